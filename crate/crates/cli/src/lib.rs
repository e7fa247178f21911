//! `lbp-inpaint` command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 unreadable or
//! unwritable file, 4 configuration violation. Failures print one line on
//! stderr: `error kind=<kind> code=<code> message="<text>"`.

pub mod config;
pub mod files;

use std::ffi::OsString;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use lbp_inpaint::attention::AttentionConfig;
use lbp_inpaint::data::{MaskPolicy, SampleSource, SyntheticTextures};
use lbp_inpaint::gradsuite;
use lbp_inpaint::lbp::extract_lbp;
use lbp_inpaint::mask::{missing_ratio, RatioBucket};
use lbp_inpaint::metrics::{reports_csv, MetricReport, Scope};
use lbp_inpaint::network::{generator_spec, Role};
use lbp_inpaint::pipeline::Inpainter;
use lbp_inpaint::train::{
    JointStage, LbpStage, Network, TrainConfig, G1_FILE, G2_FILE, STAGE1_TRACE,
};
use lbp_inpaint::Error;

use config::{Config, DataSource};
use files::FolderSource;

/// Written next to the checkpoints so later commands see the same settings.
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Io,
    Config,
    Data,
    Training,
    Runtime,
}

impl ErrorKind {
    pub fn code(self) -> i32 {
        match self {
            ErrorKind::Usage => 2,
            ErrorKind::Io => 3,
            ErrorKind::Config => 4,
            ErrorKind::Data | ErrorKind::Training | ErrorKind::Runtime => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorKind::Usage => "usage",
            ErrorKind::Io => "io",
            ErrorKind::Config => "config",
            ErrorKind::Data => "data",
            ErrorKind::Training => "training",
            ErrorKind::Runtime => "runtime",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        CliError {
            kind,
            message: message.into(),
        }
    }
    pub fn io(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Io, message)
    }
    pub fn config(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Config, message)
    }
    pub fn data(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Data, message)
    }
}

impl fmt::Display for CliError {
    /// Single line; the message is quoted and escaped.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "error kind={} code={} message={:?}",
            self.kind.name(),
            self.kind.code(),
            self.message
        )
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let kind = match &e {
            Error::Config(_) => ErrorKind::Config,
            Error::Io(_) | Error::Checkpoint(_) => ErrorKind::Io,
            Error::Training { .. } => ErrorKind::Training,
            _ => ErrorKind::Runtime,
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<config::ConfigError> for CliError {
    fn from(e: config::ConfigError) -> Self {
        CliError::config(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "lbp-inpaint", version, about = "LBP-guided image inpainting")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Seed for training and mask generation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key = value` configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the LBP code map of an image as a grayscale PNG.
    ExtractLbp { input: PathBuf, output: PathBuf },
    /// Write a mask PNG (white known, black missing).
    GenMask {
        #[arg(long = "h", value_name = "HEIGHT")]
        height: usize,
        #[arg(long = "w", value_name = "WIDTH")]
        width: usize,
        /// Square hole of this side.
        #[arg(long, value_name = "SIDE", conflicts_with = "irregular", required_unless_present = "irregular")]
        centering: Option<usize>,
        /// Brush strokes with a missing percentage in LO-HI.
        #[arg(long, value_name = "LO-HI", value_parser = config::parse_bucket)]
        irregular: Option<RatioBucket>,
        output: PathBuf,
    },
    /// Train both stages, writing checkpoints and loss traces.
    Train {
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Continue from the checkpoints already in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Fill the hole of an image with trained generators.
    Inpaint {
        #[arg(long, value_name = "DIR")]
        checkpoint: PathBuf,
        image: PathBuf,
        mask: PathBuf,
        output: PathBuf,
        /// Also write the predicted LBP map.
        #[arg(long, value_name = "FILE")]
        lbp_out: Option<PathBuf>,
    },
    /// Compare outputs with ground truth (files or directories of PNGs).
    Evaluate {
        output: PathBuf,
        truth: PathBuf,
        /// Restrict metrics to the hole of this mask (file or directory).
        #[arg(long, value_name = "MASK")]
        mask: Option<PathBuf>,
        /// Also write the CSV here.
        #[arg(long, value_name = "FILE")]
        report: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable building block.
    Gradcheck,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let line = text
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ")
                .to_string();
            return report(CliError::new(ErrorKind::Usage, line));
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => report(e),
    }
}

fn report(e: CliError) -> i32 {
    eprintln!("{e}");
    e.kind.code()
}

fn dispatch(cli: Cli) -> Result<i32, CliError> {
    let g = &cli.global;
    match cli.command {
        Command::ExtractLbp { input, output } => {
            let map = extract_lbp(&files::read_gray(&input)?)?;
            files::write_gray(&output, &map.to_image())?;
            Ok(0)
        }
        Command::GenMask {
            height,
            width,
            centering,
            irregular,
            output,
        } => {
            let policy = match (centering, irregular) {
                (Some(side), _) => MaskPolicy::Centering { side },
                (None, Some(bucket)) => MaskPolicy::Irregular { bucket },
                (None, None) => unreachable!("clap requires one of the two"),
            };
            let mask = policy.make(height, width, g.seed.unwrap_or(0))?;
            files::write_gray(&output, &mask.to_image())?;
            let (ratio, class) = missing_ratio(&mask);
            println!("missing_ratio={ratio:.6} class={class}");
            Ok(0)
        }
        Command::Train { out, resume } => {
            let cfg = load_config(g)?;
            train(cfg, out, resume)
        }
        Command::Inpaint {
            checkpoint,
            image,
            mask,
            output,
            lbp_out,
        } => {
            inpaint(g, &checkpoint, &image, &mask, &output, lbp_out.as_deref())?;
            Ok(0)
        }
        Command::Evaluate {
            output,
            truth,
            mask,
            report,
        } => {
            evaluate(&output, &truth, mask.as_deref(), report.as_deref())?;
            Ok(0)
        }
        Command::Gradcheck => {
            let results = gradsuite::run_suite(g.seed.unwrap_or(0))?;
            print!("{}", gradsuite::format_table(&results));
            Ok(if results.iter().all(|r| r.passed()) { 0 } else { 1 })
        }
    }
}

fn read_config(path: &Path) -> Result<Config, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("cannot read {}: {e}", path.display())))?;
    Config::parse(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

/// File settings, then command-line overrides, then validation.
fn load_config(g: &Global) -> Result<Config, CliError> {
    let mut cfg = match &g.config {
        Some(p) => read_config(p)?,
        None => Config::default(),
    };
    if let Some(s) = g.seed {
        cfg.train.seed = s;
    }
    if g.deterministic {
        cfg.train.deterministic = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn data_source(cfg: &Config) -> Result<Box<dyn SampleSource>, CliError> {
    let size = cfg.train.image_size;
    Ok(match &cfg.data {
        DataSource::Synthetic => Box::new(SyntheticTextures {
            size,
            seed: cfg.data_seed,
            mask: cfg.mask,
        }),
        DataSource::Folder(dir) => {
            Box::new(FolderSource::load(dir, size, cfg.mask, cfg.data_seed)?)
        }
    })
}

fn progress_every(total: usize) -> usize {
    (total / 10).max(1)
}

fn print_row(stage: &str, it: usize, total: usize, columns: &[String], row: &[f64]) {
    let mut line = format!("{stage} {it}/{total}");
    for (c, v) in columns.iter().zip(row) {
        line.push_str(&format!(" {c}={v:.4}"));
    }
    eprintln!("{line}");
}

fn check_spec(net: &Network, cfg: &TrainConfig, role: Role) -> Result<(), CliError> {
    if net.spec != generator_spec(&cfg.generator_options(role))? {
        return Err(CliError::config(
            "checkpoint architecture does not match the configuration",
        ));
    }
    Ok(())
}

fn train(mut cfg: Config, out: Option<PathBuf>, resume: bool) -> Result<i32, CliError> {
    let dir = out
        .or_else(|| cfg.train.checkpoint_dir.clone())
        .unwrap_or_else(|| PathBuf::from("checkpoints"));
    cfg.train.checkpoint_dir = Some(dir.clone());
    let data = data_source(&cfg)?;
    let t = &cfg.train;
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::io(format!("cannot create {}: {e}", dir.display())))?;
    std::fs::write(dir.join(CONFIG_FILE), cfg.to_text())
        .map_err(|e| CliError::io(format!("cannot write config: {e}")))?;

    let resume_joint = resume && dir.join(G2_FILE).exists();
    let mut joint = if resume_joint {
        let s = JointStage::load(&dir)?;
        check_spec(&s.g1, t, Role::Lbp)?;
        check_spec(&s.g2, t, Role::Inpaint)?;
        s
    } else {
        let mut s1 = if resume && dir.join(STAGE1_TRACE).exists() {
            let s = LbpStage::load(&dir)?;
            check_spec(&s.g1, t, Role::Lbp)?;
            s
        } else {
            LbpStage::new(t)?
        };
        let every = progress_every(t.iters_stage1);
        while s1.iteration < t.iters_stage1 {
            s1.step(data.as_ref(), t)?;
            if s1.iteration % every == 0 || s1.iteration == t.iters_stage1 {
                let (_, row) = s1.trace.rows().last().expect("stepped");
                print_row("stage1", s1.iteration, t.iters_stage1, s1.trace.columns(), row);
            }
        }
        s1.save(&dir)?;
        JointStage::new(s1.g1, t)?
    };
    let every = progress_every(t.iters_stage2);
    while joint.iteration < t.iters_stage2 {
        joint.step(data.as_ref(), t)?;
        if joint.iteration % every == 0 || joint.iteration == t.iters_stage2 {
            let (_, row) = joint.trace.rows().last().expect("stepped");
            print_row("stage2", joint.iteration, t.iters_stage2, joint.trace.columns(), row);
        }
    }
    joint.save(&dir)?;
    println!("checkpoints written to {}", dir.display());
    Ok(0)
}

fn inpaint(
    g: &Global,
    dir: &Path,
    image: &Path,
    mask: &Path,
    output: &Path,
    lbp_out: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = match &g.config {
        Some(p) => Some(read_config(p)?),
        None if dir.join(CONFIG_FILE).exists() => Some(read_config(&dir.join(CONFIG_FILE))?),
        None => None,
    };
    let (g1, _) = Network::load(&dir.join(G1_FILE))?;
    let (g2, _) = Network::load(&dir.join(G2_FILE))?;
    let mut attention = cfg.map_or_else(AttentionConfig::default, |c| c.train.attention);
    if let Some(l) = g2.spec.attention_layer() {
        attention.layer_index = l;
    }
    let inpainter = Inpainter::new(g1.spec, g1.state, g2.spec, g2.state, attention)?;
    let img = files::read_rgb(image)?;
    let m = files::read_mask(mask)?;
    let result = inpainter.run(&img, &m)?;
    files::write_rgb(output, &result.composite)?;
    if let Some(p) = lbp_out {
        files::write_gray(p, &result.lbp.to_image())?;
    }
    Ok(())
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn evaluate(
    output: &Path,
    truth: &Path,
    mask: Option<&Path>,
    report: Option<&Path>,
) -> Result<(), CliError> {
    let pairs: Vec<(String, PathBuf, PathBuf)> = if output.is_dir() {
        if !truth.is_dir() {
            return Err(CliError::new(
                ErrorKind::Usage,
                "output is a directory, so truth must be one too",
            ));
        }
        let outs = files::png_files(output)?;
        if outs.is_empty() {
            return Err(CliError::data(format!("no PNG images in {}", output.display())));
        }
        outs.into_iter()
            .map(|o| {
                let name = file_name(&o);
                let t = truth.join(&name);
                (name, o, t)
            })
            .collect()
    } else {
        vec![(file_name(output), output.to_path_buf(), truth.to_path_buf())]
    };
    let shared_mask = match mask {
        Some(m) if !m.is_dir() => Some(files::read_mask(m)?),
        _ => None,
    };
    let mut rows = Vec::with_capacity(pairs.len());
    for (name, o, t) in pairs {
        let a = files::read_rgb(&o)?;
        let b = files::read_rgb(&t)?;
        let own_mask = match mask {
            Some(m) if m.is_dir() => Some(files::read_mask(&m.join(&name))?),
            _ => None,
        };
        let scope = match own_mask.as_ref().or(shared_mask.as_ref()) {
            Some(m) => Scope::Hole(m),
            None => Scope::Full,
        };
        let r = MetricReport::compute(&a, &b, scope)
            .map_err(|e| CliError::data(format!("{name}: {e}")))?;
        rows.push((name, r));
    }
    let csv = reports_csv(&rows);
    if let Some(p) = report {
        std::fs::write(p, &csv)
            .map_err(|e| CliError::io(format!("cannot write {}: {e}", p.display())))?;
    }
    let mut stdout = std::io::stdout().lock();
    stdout
        .write_all(csv.as_bytes())
        .map_err(|e| CliError::io(format!("cannot write output: {e}")))?;
    Ok(())
}
