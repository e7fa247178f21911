//! Plain-text training configuration: one `key = value` per line, `#`
//! starts a comment. Unknown keys and repeated keys are rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use lbp_inpaint::attention::AttentionScope;
use lbp_inpaint::data::MaskPolicy;
use lbp_inpaint::losses::NormMode;
use lbp_inpaint::mask::RatioBucket;
use lbp_inpaint::network::WidthScale;
use lbp_inpaint::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct ConfigError {
    /// 1-based line, when the problem is tied to one.
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

fn err(line: Option<usize>, message: impl Into<String>) -> ConfigError {
    ConfigError {
        line,
        message: message.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Full-size networks on 256x256 images.
    Paper,
    /// Depth 5, 1/8 width, 64x64 images.
    Desk,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    /// Directory of square PNG images.
    Folder(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub preset: Preset,
    pub train: TrainConfig,
    pub data: DataSource,
    pub data_seed: u64,
    pub mask: MaskPolicy,
}

impl Config {
    pub fn preset(preset: Preset) -> Self {
        let (train, side) = match preset {
            Preset::Paper => (TrainConfig::default(), 120),
            Preset::Desk => (TrainConfig::desk(), 16),
        };
        Config {
            preset,
            train,
            data: DataSource::Synthetic,
            data_seed: 0,
            mask: MaskPolicy::Centering { side },
        }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(Some(i + 1), format!("expected 'key = value', got '{line}'")))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(err(Some(i + 1), format!("unknown key '{k}'")));
            }
            if entries.insert(k.to_string(), (i + 1, v.to_string())).is_some() {
                return Err(err(Some(i + 1), format!("key '{k}' given twice")));
            }
        }
        let preset = match entries.remove("preset") {
            Some((l, v)) => match v.as_str() {
                "paper" => Preset::Paper,
                "desk" => Preset::Desk,
                _ => return Err(err(Some(l), format!("preset must be 'paper' or 'desk', got '{v}'"))),
            },
            None => Preset::Paper,
        };
        let mut cfg = Config::preset(preset);
        for (k, (l, v)) in entries {
            cfg.set(&k, &v).map_err(|m| err(Some(l), format!("{k}: {m}")))?;
        }
        Ok(cfg)
    }

    /// Every key, in a fixed order.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let w = &t.weights;
        let a = &t.attention;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        put(
            "preset",
            match self.preset {
                Preset::Paper => "paper",
                Preset::Desk => "desk",
            }
            .into(),
        );
        put("seed", t.seed.to_string());
        put("lr", t.adam.lr.to_string());
        put("beta1", t.adam.beta1.to_string());
        put("beta2", t.adam.beta2.to_string());
        put("adam_eps", t.adam.eps.to_string());
        put("batch", t.batch.to_string());
        put("iters_stage1", t.iters_stage1.to_string());
        put("iters_stage2", t.iters_stage2.to_string());
        put("lambda_m", w.multi_level.to_string());
        put("lambda_r", w.reconstruction.to_string());
        put("lambda_a", w.adversarial.to_string());
        put("lambda_p", w.perceptual.to_string());
        put("lambda_s", w.style.to_string());
        put("attention", on_off(t.attention_enabled));
        put("attention_layer", a.layer_index.to_string());
        put("attention_top", a.top_count.to_string());
        put("attention_eps", a.similarity_eps.to_string());
        put(
            "attention_scope",
            match a.scope {
                AttentionScope::Dual => "dual",
                AttentionScope::KnownOnly => "known_only",
            }
            .into(),
        );
        put("deterministic", on_off(t.deterministic));
        put("depth", t.depth.to_string());
        put("width_scale", t.width_scale.to_string());
        put("image_size", t.image_size.to_string());
        put("discriminator_depth", t.discriminator_depth.to_string());
        put(
            "norm",
            match t.norm {
                NormMode::Euclidean => "euclidean",
                NormMode::SizeNormalized => "size_normalized",
            }
            .into(),
        );
        put("freeze_discriminator", on_off(t.freeze_discriminator));
        put("checkpoint_every", t.checkpoint_every.to_string());
        put(
            "checkpoint_dir",
            t.checkpoint_dir
                .as_ref()
                .map_or("none".into(), |p| p.display().to_string()),
        );
        put(
            "data",
            match &self.data {
                DataSource::Synthetic => "synthetic".into(),
                DataSource::Folder(p) => p.display().to_string(),
            },
        );
        put("data_seed", self.data_seed.to_string());
        put(
            "mask",
            match self.mask {
                MaskPolicy::Centering { side } => format!("centering:{side}"),
                MaskPolicy::Irregular { bucket } => {
                    format!("irregular:{}-{}", bucket.lower(), bucket.upper())
                }
            },
        );
        s
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let t = &mut self.train;
        match key {
            "seed" => t.seed = num(v)?,
            "lr" => t.adam.lr = num(v)?,
            "beta1" => t.adam.beta1 = num(v)?,
            "beta2" => t.adam.beta2 = num(v)?,
            "adam_eps" => t.adam.eps = num(v)?,
            "batch" => t.batch = num(v)?,
            "iters_stage1" => t.iters_stage1 = num(v)?,
            "iters_stage2" => t.iters_stage2 = num(v)?,
            "lambda_m" => t.weights.multi_level = num(v)?,
            "lambda_r" => t.weights.reconstruction = num(v)?,
            "lambda_a" => t.weights.adversarial = num(v)?,
            "lambda_p" => t.weights.perceptual = num(v)?,
            "lambda_s" => t.weights.style = num(v)?,
            "attention" => t.attention_enabled = flag(v)?,
            "attention_layer" => t.attention.layer_index = num(v)?,
            "attention_top" => t.attention.top_count = num(v)?,
            "attention_eps" => t.attention.similarity_eps = num(v)?,
            "attention_scope" => {
                t.attention.scope = match v {
                    "dual" => AttentionScope::Dual,
                    "known_only" => AttentionScope::KnownOnly,
                    _ => return Err(format!("expected 'dual' or 'known_only', got '{v}'")),
                }
            }
            "deterministic" => t.deterministic = flag(v)?,
            "depth" => t.depth = num(v)?,
            "width_scale" => t.width_scale = v.parse::<WidthScale>().map_err(|e| e.to_string())?,
            "image_size" => t.image_size = num(v)?,
            "discriminator_depth" => t.discriminator_depth = num(v)?,
            "norm" => {
                t.norm = match v {
                    "euclidean" => NormMode::Euclidean,
                    "size_normalized" => NormMode::SizeNormalized,
                    _ => return Err(format!("expected 'euclidean' or 'size_normalized', got '{v}'")),
                }
            }
            "freeze_discriminator" => t.freeze_discriminator = flag(v)?,
            "checkpoint_every" => t.checkpoint_every = num(v)?,
            "checkpoint_dir" => {
                t.checkpoint_dir = match v {
                    "" => return Err("empty path".into()),
                    "none" => None,
                    p => Some(PathBuf::from(p)),
                }
            }
            "data" => {
                self.data = match v {
                    "" => return Err("empty path".into()),
                    "synthetic" => DataSource::Synthetic,
                    p => DataSource::Folder(PathBuf::from(p)),
                }
            }
            "data_seed" => self.data_seed = num(v)?,
            "mask" => self.mask = parse_mask(v)?,
            _ => unreachable!("keys are checked before dispatch"),
        }
        Ok(())
    }

    /// Range and consistency checks beyond syntax.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train.validate().map_err(|e| err(None, e.to_string()))?;
        self.mask
            .make(self.train.image_size, self.train.image_size, self.data_seed)
            .map(|_| ())
            .map_err(|e| err(None, format!("mask: {e}")))
    }
}

impl Default for Config {
    fn default() -> Self {
        Config::preset(Preset::Paper)
    }
}

const KEYS: &[&str] = &[
    "preset",
    "seed",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "batch",
    "iters_stage1",
    "iters_stage2",
    "lambda_m",
    "lambda_r",
    "lambda_a",
    "lambda_p",
    "lambda_s",
    "attention",
    "attention_layer",
    "attention_top",
    "attention_eps",
    "attention_scope",
    "deterministic",
    "depth",
    "width_scale",
    "image_size",
    "discriminator_depth",
    "norm",
    "freeze_discriminator",
    "checkpoint_every",
    "checkpoint_dir",
    "data",
    "data_seed",
    "mask",
];

fn on_off(b: bool) -> String {
    if b { "on" } else { "off" }.into()
}

fn flag(v: &str) -> Result<bool, String> {
    match v {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected on/off, got '{v}'")),
    }
}

fn num<T: std::str::FromStr>(v: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("cannot parse '{v}': {e}"))
}

/// `centering:<side>` or `irregular:<lower>-<upper>` (percent).
pub fn parse_mask(v: &str) -> Result<MaskPolicy, String> {
    match v.split_once(':') {
        Some(("centering", side)) => Ok(MaskPolicy::Centering { side: num(side)? }),
        Some(("irregular", range)) => Ok(MaskPolicy::Irregular {
            bucket: parse_bucket(range)?,
        }),
        _ => Err(format!("expected 'centering:<side>' or 'irregular:<lo>-<hi>', got '{v}'")),
    }
}

pub fn parse_bucket(v: &str) -> Result<RatioBucket, String> {
    let (lo, hi) = v
        .trim_end_matches('%')
        .split_once('-')
        .ok_or_else(|| format!("expected '<lo>-<hi>', got '{v}'"))?;
    RatioBucket::new(num(lo)?, num(hi)?).map_err(|e| e.to_string())
}
