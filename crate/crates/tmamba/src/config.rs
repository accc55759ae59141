//! Flat `key = value` run configuration with dotted keys.
//!
//! ```text
//! # comment
//! net.size = 64,64
//! net.channels.1 = 16
//! optim.lr = 5e-3
//! sweep.thresholds = 0.1:0.9, 0.2:0.8
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use tmamba_core::data::SynthConfig;
use tmamba_core::net::NetConfig;
use tmamba_core::optim::AdamWConfig;
use tmamba_core::posenc::PosMode;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid value for {key}: {reason}")]
    Value { key: String, reason: String },
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub net: NetConfig,
    pub optim: AdamWConfig,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Dataset manifest read by `train`.
    pub manifest: Option<PathBuf>,
    /// Dataset written by `synth`; its rank and size follow `net`.
    pub synth: SynthConfig,
    pub synth_train: usize,
    pub synth_val: usize,
    pub synth_test: usize,
    /// `(s_low, s_high)` pairs; when non-empty `train` runs once per pair.
    pub sweep_thresholds: Vec<(f64, f64)>,
    pub gradcheck_eps: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let net = NetConfig::tiny(2, &[64, 64]);
        let synth = SynthConfig::new(2, &[64, 64]);
        Self {
            net,
            optim: AdamWConfig::default(),
            plateau_factor: 0.5,
            plateau_patience: 3,
            min_lr: 0.0,
            epochs: 30,
            batch_size: 8,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            manifest: None,
            synth,
            synth_train: 200,
            synth_val: 0,
            synth_test: 50,
            sweep_thresholds: Vec::new(),
            gradcheck_eps: 4e-2,
        }
    }
}

fn value_err(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Value {
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| value_err(key, format!("{v:?}: {e}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(value_err(key, format!("{v:?} is not a boolean"))),
    }
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',').map(|s| num(key, s.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Starts from the defaults and applies every line of `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut synth_shape_set = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            let (k, v) = (k.trim(), v.trim());
            synth_shape_set |= k == "synth.size";
            cfg.set(k, v)?;
        }
        if !synth_shape_set {
            cfg.synth.rank = cfg.net.spatial_rank;
            cfg.synth.size = cfg.net.input_size.clone();
            cfg.synth.spacing.resize(cfg.synth.rank, 1.0);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let n = &mut self.net;
        match key {
            "net.rank" => n.spatial_rank = num(key, v)?,
            "net.size" => n.input_size = list(key, v)?,
            "net.in_channels" => n.in_channels = num(key, v)?,
            "net.channels" => {
                let c: Vec<usize> = list(key, v)?;
                n.channels = c
                    .try_into()
                    .map_err(|_| value_err(key, "expected three comma-separated widths"))?;
            }
            "net.channels.0" => n.channels[0] = num(key, v)?,
            "net.channels.1" => n.channels[1] = num(key, v)?,
            "net.channels.2" => n.channels[2] = num(key, v)?,
            "net.depth" => n.depth = num(key, v)?,
            "net.growth" => n.growth = num(key, v)?,
            "net.classes" => n.classes = num(key, v)?,
            "net.state" => n.state = num(key, v)?,
            "net.pool_dim" => n.pool_dim = num(key, v)?,
            "net.s_low" => n.s_low = num(key, v)?,
            "net.s_high" => n.s_high = num(key, v)?,
            "net.use_tim" => n.use_tim = flag(key, v)?,
            "net.use_freq" => n.use_freq = flag(key, v)?,
            "net.use_gate" => n.use_gate = flag(key, v)?,
            "net.use_residual" => n.use_residual = flag(key, v)?,
            "net.pos_mode" => n.pos_mode = v.parse::<PosMode>().map_err(|e| value_err(key, e.to_string()))?,
            "loss.dice_weight" => n.dice_weight = num(key, v)?,
            "loss.ce_weight" => n.ce_weight = num(key, v)?,
            "optim.lr" => self.optim.lr = num(key, v)?,
            "optim.beta1" => self.optim.beta1 = num(key, v)?,
            "optim.beta2" => self.optim.beta2 = num(key, v)?,
            "optim.eps" => self.optim.eps = num(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = num(key, v)?,
            "sched.factor" => self.plateau_factor = num(key, v)?,
            "sched.patience" => self.plateau_patience = num(key, v)?,
            "sched.min_lr" => self.min_lr = num(key, v)?,
            "train.epochs" => self.epochs = num(key, v)?,
            "train.batch_size" => self.batch_size = num(key, v)?,
            "train.seed" => self.seed = num(key, v)?,
            "train.out_dir" => self.out_dir = PathBuf::from(v),
            "data.manifest" => self.manifest = (!v.is_empty()).then(|| PathBuf::from(v)),
            "synth.size" => {
                self.synth.size = list(key, v)?;
                self.synth.rank = self.synth.size.len();
                self.synth.spacing.resize(self.synth.rank, 1.0);
            }
            "synth.spacing" => self.synth.spacing = list(key, v)?,
            "synth.objects.min" => self.synth.objects.0 = num(key, v)?,
            "synth.objects.max" => self.synth.objects.1 = num(key, v)?,
            "synth.contrast_gap" => self.synth.contrast_gap = num(key, v)?,
            "synth.noise_sigma" => self.synth.noise_sigma = num(key, v)?,
            "synth.blur_radius" => self.synth.blur_radius = num(key, v)?,
            "synth.background" => self.synth.background = num(key, v)?,
            "synth.seed" => self.synth.seed = num(key, v)?,
            "synth.train" => self.synth_train = num(key, v)?,
            "synth.val" => self.synth_val = num(key, v)?,
            "synth.test" => self.synth_test = num(key, v)?,
            "sweep.thresholds" => self.sweep_thresholds = parse_pairs(key, v)?,
            "gradcheck.eps" => self.gradcheck_eps = num(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let n = &self.net;
        if !(2..=3).contains(&n.spatial_rank) {
            return Err(value_err("net.rank", "must be 2 or 3"));
        }
        if n.input_size.len() != n.spatial_rank || n.input_size.iter().any(|s| *s == 0 || s % 8 != 0) {
            return Err(value_err(
                "net.size",
                format!("{:?} needs {} extents, each a positive multiple of 8", n.input_size, n.spatial_rank),
            ));
        }
        if !(n.s_low > 0.0 && n.s_low <= n.s_high && n.s_high < 1.0) {
            return Err(value_err("net.s_low", "thresholds must satisfy 0 < s_low <= s_high < 1"));
        }
        n.validate().map_err(|e| value_err("net", e.to_string()))?;
        if self.epochs > 100_000 {
            return Err(value_err("train.epochs", "unreasonably large"));
        }
        if self.batch_size == 0 {
            return Err(value_err("train.batch_size", "must be positive"));
        }
        if !(self.optim.lr > 0.0) {
            return Err(value_err("optim.lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.optim.beta1) || !(0.0..1.0).contains(&self.optim.beta2) {
            return Err(value_err("optim.beta1", "betas must lie in [0, 1)"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return Err(value_err("sched.factor", "must lie in (0, 1]"));
        }
        if self.plateau_patience == 0 {
            return Err(value_err("sched.patience", "must be positive"));
        }
        self.synth.validate().map_err(|e| value_err("synth", e.to_string()))?;
        if !(self.gradcheck_eps > 0.0) {
            return Err(value_err("gradcheck.eps", "must be positive"));
        }
        Ok(())
    }

    /// Every key with its current value, parseable by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let n = &self.net;
        let o = &self.optim;
        let s = &self.synth;
        let mut t = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(t, "{k} = {v}");
        };
        kv("net.rank", n.spatial_rank.to_string());
        kv("net.size", join(&n.input_size));
        kv("net.in_channels", n.in_channels.to_string());
        kv("net.channels", join(&n.channels));
        kv("net.depth", n.depth.to_string());
        kv("net.growth", n.growth.to_string());
        kv("net.classes", n.classes.to_string());
        kv("net.state", n.state.to_string());
        kv("net.pool_dim", n.pool_dim.to_string());
        kv("net.s_low", n.s_low.to_string());
        kv("net.s_high", n.s_high.to_string());
        kv("net.use_tim", n.use_tim.to_string());
        kv("net.use_freq", n.use_freq.to_string());
        kv("net.use_gate", n.use_gate.to_string());
        kv("net.use_residual", n.use_residual.to_string());
        kv("net.pos_mode", n.pos_mode.to_string());
        kv("loss.dice_weight", n.dice_weight.to_string());
        kv("loss.ce_weight", n.ce_weight.to_string());
        kv("optim.lr", o.lr.to_string());
        kv("optim.beta1", o.beta1.to_string());
        kv("optim.beta2", o.beta2.to_string());
        kv("optim.eps", o.eps.to_string());
        kv("optim.weight_decay", o.weight_decay.to_string());
        kv("sched.factor", self.plateau_factor.to_string());
        kv("sched.patience", self.plateau_patience.to_string());
        kv("sched.min_lr", self.min_lr.to_string());
        kv("train.epochs", self.epochs.to_string());
        kv("train.batch_size", self.batch_size.to_string());
        kv("train.seed", self.seed.to_string());
        kv("train.out_dir", self.out_dir.display().to_string());
        kv(
            "data.manifest",
            self.manifest.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        kv("synth.size", join(&s.size));
        kv("synth.spacing", join(&s.spacing));
        kv("synth.objects.min", s.objects.0.to_string());
        kv("synth.objects.max", s.objects.1.to_string());
        kv("synth.contrast_gap", s.contrast_gap.to_string());
        kv("synth.noise_sigma", s.noise_sigma.to_string());
        kv("synth.blur_radius", s.blur_radius.to_string());
        kv("synth.background", s.background.to_string());
        kv("synth.seed", s.seed.to_string());
        kv("synth.train", self.synth_train.to_string());
        kv("synth.val", self.synth_val.to_string());
        kv("synth.test", self.synth_test.to_string());
        kv(
            "sweep.thresholds",
            self.sweep_thresholds
                .iter()
                .map(|(a, b)| format!("{a}:{b}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("gradcheck.eps", self.gradcheck_eps.to_string());
        t
    }

    /// `TMAMBA_SEED`, when set, replaces the training seed.
    pub fn apply_env_seed(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var("TMAMBA_SEED") {
            self.seed = num("TMAMBA_SEED", v.trim())?;
        }
        Ok(())
    }
}

fn parse_pairs(key: &str, v: &str) -> Result<Vec<(f64, f64)>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|p| {
            let (a, b) = p
                .trim()
                .split_once(':')
                .ok_or_else(|| value_err(key, format!("{p:?} is not `s_low:s_high`")))?;
            let pair = (num::<f64>(key, a.trim())?, num::<f64>(key, b.trim())?);
            if !(pair.0 > 0.0 && pair.0 <= pair.1 && pair.1 < 1.0) {
                return Err(value_err(key, format!("{p:?} violates 0 < s_low <= s_high < 1")));
            }
            Ok(pair)
        })
        .collect()
}
