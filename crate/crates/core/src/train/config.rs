use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{FusionKind, NetworkConfig};

/// Everything a training run depends on besides the data itself.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epoch: usize,
    pub batch_size: usize,
    pub poly_power: f64,
    pub lambda: f64,
    pub beta: f64,
    pub seed: u64,
    pub train_manifest: PathBuf,
    pub eval_manifest: Option<PathBuf>,
    pub network: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            max_epoch: 1,
            batch_size: 1,
            poly_power: 0.9,
            lambda: 0.1,
            beta: 0.1,
            seed: 0,
            train_manifest: PathBuf::from("train/manifest.txt"),
            eval_manifest: None,
            network: NetworkConfig::default(),
        }
    }
}

const KEYS: &[&str] = &[
    "learning_rate",
    "max_epoch",
    "batch_size",
    "poly_power",
    "lambda",
    "beta",
    "seed",
    "train_manifest",
    "eval_manifest",
    "modalities",
    "classes",
    "stages",
    "base_channels",
    "appearance_dim",
    "patch",
    "leaky_slope",
    "dropout_prob",
    "fusion",
    "disentangle",
];

fn value<T: std::str::FromStr>(line: usize, key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::config(format!("line {line}: cannot parse {key} = {raw:?}")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if self.batch_size != 1 {
            return Err(Error::config(format!("batch_size must be 1, got {}", self.batch_size)));
        }
        if self.max_epoch == 0 {
            return Err(Error::config("max_epoch must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(self.poly_power > 0.0 && self.poly_power.is_finite()) {
            return Err(Error::config("poly_power must be positive"));
        }
        for (name, v) in [("lambda", self.lambda), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Relative manifest
    /// paths are resolved against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut c = TrainConfig::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, val) = content
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {line}: expected key = value")))?;
            let (key, val) = (key.trim(), val.trim());
            if !KEYS.contains(&key) {
                return Err(Error::config(format!("line {line}: unknown key {key:?}")));
            }
            if !seen.insert(key.to_string()) {
                return Err(Error::config(format!("line {line}: duplicate key {key:?}")));
            }
            let n = &mut c.network;
            match key {
                "learning_rate" => c.learning_rate = value(line, key, val)?,
                "max_epoch" => c.max_epoch = value(line, key, val)?,
                "batch_size" => c.batch_size = value(line, key, val)?,
                "poly_power" => c.poly_power = value(line, key, val)?,
                "lambda" => c.lambda = value(line, key, val)?,
                "beta" => c.beta = value(line, key, val)?,
                "seed" => c.seed = value(line, key, val)?,
                "train_manifest" => c.train_manifest = base_dir.join(val),
                "eval_manifest" => c.eval_manifest = Some(base_dir.join(val)),
                "modalities" => n.modalities = value(line, key, val)?,
                "classes" => n.classes = value(line, key, val)?,
                "stages" => n.stages = value(line, key, val)?,
                "base_channels" => n.base_channels = value(line, key, val)?,
                "appearance_dim" => n.appearance_dim = value(line, key, val)?,
                "patch" => n.patch = value(line, key, val)?,
                "leaky_slope" => n.leaky_slope = value(line, key, val)?,
                "dropout_prob" => n.dropout_prob = value(line, key, val)?,
                "fusion" => n.fusion = FusionKind::parse(val)?,
                "disentangle" => n.disentangle = value(line, key, val)?,
                _ => unreachable!("key list and match arms agree"),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new("")))
    }

    /// Inverse of [`TrainConfig::parse`] with absolute manifest paths.
    pub fn to_text(&self) -> String {
        let n = &self.network;
        let mut s = String::new();
        let mut put = |k: &str, v: &dyn std::fmt::Display| writeln!(s, "{k} = {v}").expect("writing to a String");
        put("learning_rate", &self.learning_rate);
        put("max_epoch", &self.max_epoch);
        put("batch_size", &self.batch_size);
        put("poly_power", &self.poly_power);
        put("lambda", &self.lambda);
        put("beta", &self.beta);
        put("seed", &self.seed);
        put("train_manifest", &self.train_manifest.display());
        if let Some(m) = &self.eval_manifest {
            put("eval_manifest", &m.display());
        }
        put("modalities", &n.modalities);
        put("classes", &n.classes);
        put("stages", &n.stages);
        put("base_channels", &n.base_channels);
        put("appearance_dim", &n.appearance_dim);
        put("patch", &n.patch);
        put("leaky_slope", &n.leaky_slope);
        put("dropout_prob", &n.dropout_prob);
        put("fusion", &n.fusion.as_str());
        put("disentangle", &n.disentangle);
        s
    }
}
