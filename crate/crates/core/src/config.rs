//! Flat key-value experiment configuration.
//!
//! Grammar: one `key = value` per line; `#` starts a comment (whole line or
//! trailing); blank lines ignored. Unknown keys are rejected, naming the
//! key. Every run echoes its fully resolved configuration (all keys, with
//! defaults applied) into the output directory, and that file parses back
//! into the same configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::attacks::{AttackSpec, NormKind};
use crate::data::{load_idx_images, make_synth_digits, make_two_moons, Dataset};
use crate::error::{Error, Result};
use crate::model::{ArchitectureSpec, HeadConfig, HeadMode};
use crate::objectives::{ObjectiveKind, ObjectiveSpec};
use crate::seeds;
use crate::trainer::{Framework, TrainSpec};

/// Attack method names surfaced by the CLI; they map onto `AttackSpec`
/// flag combinations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackMethod {
    Fgsm,
    Bim,
    Pgd,
    Mim,
}

impl AttackMethod {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(AttackMethod::Fgsm),
            "bim" => Ok(AttackMethod::Bim),
            "pgd" => Ok(AttackMethod::Pgd),
            "mim" => Ok(AttackMethod::Mim),
            _ => Err(Error::Parse(format!("unknown attack method `{s}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttackMethod::Fgsm => "fgsm",
            AttackMethod::Bim => "bim",
            AttackMethod::Pgd => "pgd",
            AttackMethod::Mim => "mim",
        }
    }
}

/// Dataset selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    TwoMoons,
    SynthDigits,
    Idx,
}

impl DatasetKind {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "two-moons" => Ok(DatasetKind::TwoMoons),
            "synth-digits" => Ok(DatasetKind::SynthDigits),
            "idx" => Ok(DatasetKind::Idx),
            _ => Err(Error::Parse(format!("unknown dataset `{s}`"))),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            DatasetKind::TwoMoons => "two-moons",
            DatasetKind::SynthDigits => "synth-digits",
            DatasetKind::Idx => "idx",
        }
    }
}

/// Fully resolved experiment configuration.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    // dataset
    pub dataset: DatasetKind,
    pub train_n: usize,
    pub eval_n: usize,
    pub data_noise: f64,
    pub data_classes: usize,
    pub data_seed: u64,
    pub idx_train_images: String,
    pub idx_train_labels: String,
    pub idx_eval_images: String,
    pub idx_eval_labels: String,
    // model
    pub arch: String,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub image_hw: usize,
    pub conv_channels: (usize, usize),
    pub feature_dim: usize,
    // head
    pub head: HeadMode,
    pub scale_s: f64,
    pub margin_m: f64,
    // training
    pub framework: Framework,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay: Vec<f64>,
    pub alpha: f64,
    pub lambda: f64,
    pub free_replays: usize,
    pub log_wall_time: bool,
    pub checkpoint_every: usize,
    // attack (inner maximization and default evaluation budget)
    pub attack: AttackMethod,
    pub norm: NormKind,
    pub eps: f64,
    pub eta: f64,
    pub steps: usize,
    pub rand_init: bool,
    pub restarts: usize,
    pub momentum_mu: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/out"),
            dataset: DatasetKind::TwoMoons,
            train_n: 400,
            eval_n: 200,
            data_noise: 0.1,
            data_classes: 10,
            data_seed: 1,
            idx_train_images: String::new(),
            idx_train_labels: String::new(),
            idx_eval_images: String::new(),
            idx_eval_labels: String::new(),
            arch: "mlp".into(),
            input_dim: 2,
            hidden: vec![32, 32],
            image_hw: 28,
            conv_channels: (4, 8),
            feature_dim: 16,
            head: HeadMode::Standard,
            scale_s: 15.0,
            margin_m: 0.2,
            framework: Framework::PgdAt,
            epochs: 20,
            batch_size: 64,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay: vec![0.75, 0.9],
            alpha: 0.5,
            lambda: 0.5,
            free_replays: 4,
            log_wall_time: true,
            checkpoint_every: 0,
            attack: AttackMethod::Pgd,
            norm: NormKind::LInf,
            eps: 0.3,
            eta: 0.075,
            steps: 10,
            rand_init: true,
            restarts: 1,
            momentum_mu: 1.0,
        }
    }
}

/// Parse "0.3", "8/255" or "2e-3" into a float.
pub fn parse_ratio(s: &str) -> Result<f64> {
    if let Some((num, den)) = s.split_once('/') {
        let n: f64 = num
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("bad ratio `{s}`")))?;
        let d: f64 = den
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("bad ratio `{s}`")))?;
        if d == 0.0 {
            return Err(Error::Parse(format!("zero denominator in `{s}`")));
        }
        Ok(n / d)
    } else {
        s.trim()
            .parse()
            .map_err(|_| Error::Parse(format!("bad number `{s}`")))
    }
}

fn parse_key<T, F: FnOnce(&str) -> Result<T>>(key: &str, v: &str, f: F) -> Result<T> {
    f(v).map_err(|e| Error::Parse(format!("key `{key}`: {e}")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    parse_key(key, v, |s| {
        s.parse()
            .map_err(|_| Error::Parse(format!("bad integer `{s}`")))
    })
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    parse_key(key, v, |s| {
        s.parse()
            .map_err(|_| Error::Parse(format!("bad integer `{s}`")))
    })
}

fn parse_f64_key(key: &str, v: &str) -> Result<f64> {
    parse_key(key, v, parse_ratio)
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    parse_key(key, v, |s| match s {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Parse(format!("bad boolean `{s}`"))),
    })
}

fn parse_usize_list(key: &str, v: &str) -> Result<Vec<usize>> {
    parse_key(key, v, |s| {
        if s.trim().is_empty() {
            return Ok(Vec::new());
        }
        s.split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad integer `{p}`")))
            })
            .collect()
    })
}

fn parse_f64_list(key: &str, v: &str) -> Result<Vec<f64>> {
    parse_key(key, v, |s| {
        if s.trim().is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|p| parse_ratio(p.trim())).collect()
    })
}

impl ExperimentConfig {
    /// Parse a config document, applying defaults for absent keys and
    /// rejecting unknown ones.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = k.trim().to_string();
            if kv.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Parse(format!("duplicate key `{key}`")));
            }
        }
        let mut cfg = ExperimentConfig::default();
        for (key, v) in &kv {
            match key.as_str() {
                "seed" => cfg.seed = parse_u64(key, v)?,
                "out_dir" => cfg.out_dir = PathBuf::from(v),
                "dataset" => cfg.dataset = parse_key(key, v, DatasetKind::parse)?,
                "train_n" => cfg.train_n = parse_usize(key, v)?,
                "eval_n" => cfg.eval_n = parse_usize(key, v)?,
                "data_noise" => cfg.data_noise = parse_f64_key(key, v)?,
                "data_classes" => cfg.data_classes = parse_usize(key, v)?,
                "data_seed" => cfg.data_seed = parse_u64(key, v)?,
                "idx_train_images" => cfg.idx_train_images = v.clone(),
                "idx_train_labels" => cfg.idx_train_labels = v.clone(),
                "idx_eval_images" => cfg.idx_eval_images = v.clone(),
                "idx_eval_labels" => cfg.idx_eval_labels = v.clone(),
                "arch" => {
                    if v != "mlp" && v != "conv" {
                        return Err(Error::Parse(format!("key `arch`: unknown value `{v}`")));
                    }
                    cfg.arch = v.clone();
                }
                "input_dim" => cfg.input_dim = parse_usize(key, v)?,
                "hidden" => cfg.hidden = parse_usize_list(key, v)?,
                "image_hw" => cfg.image_hw = parse_usize(key, v)?,
                "conv_channels" => {
                    let ch = parse_usize_list(key, v)?;
                    if ch.len() != 2 {
                        return Err(Error::Parse(
                            "key `conv_channels`: expected two integers".into(),
                        ));
                    }
                    cfg.conv_channels = (ch[0], ch[1]);
                }
                "feature_dim" => cfg.feature_dim = parse_usize(key, v)?,
                "head" => cfg.head = parse_key(key, v, |s| HeadMode::parse(s).map_err(Into::into))?,
                "scale_s" => cfg.scale_s = parse_f64_key(key, v)?,
                "margin_m" => cfg.margin_m = parse_f64_key(key, v)?,
                "framework" => {
                    cfg.framework = parse_key(key, v, |s| Framework::parse(s).map_err(Into::into))?
                }
                "epochs" => cfg.epochs = parse_usize(key, v)?,
                "batch_size" => cfg.batch_size = parse_usize(key, v)?,
                "lr" => cfg.lr = parse_f64_key(key, v)?,
                "momentum" => cfg.momentum = parse_f64_key(key, v)?,
                "weight_decay" => cfg.weight_decay = parse_f64_key(key, v)?,
                "lr_decay" => cfg.lr_decay = parse_f64_list(key, v)?,
                "alpha" => cfg.alpha = parse_f64_key(key, v)?,
                "lambda" => cfg.lambda = parse_f64_key(key, v)?,
                "free_replays" => cfg.free_replays = parse_usize(key, v)?,
                "log_wall_time" => cfg.log_wall_time = parse_bool(key, v)?,
                "checkpoint_every" => cfg.checkpoint_every = parse_usize(key, v)?,
                "attack" => cfg.attack = parse_key(key, v, AttackMethod::parse)?,
                "norm" => cfg.norm = parse_key(key, v, |s| NormKind::parse(s).map_err(Into::into))?,
                "eps" => cfg.eps = parse_f64_key(key, v)?,
                "eta" => cfg.eta = parse_f64_key(key, v)?,
                "steps" => cfg.steps = parse_usize(key, v)?,
                "rand_init" => cfg.rand_init = parse_bool(key, v)?,
                "restarts" => cfg.restarts = parse_usize(key, v)?,
                "momentum_mu" => cfg.momentum_mu = parse_f64_key(key, v)?,
                _ => return Err(Error::Parse(format!("unknown config key `{key}`"))),
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// The fully resolved key set, in fixed order, re-parseable by
    /// [`ExperimentConfig::parse`].
    pub fn to_resolved_string(&self, version: &str) -> String {
        let mut s = String::new();
        s.push_str(&format!("# resolved by sphere-at {version}\n"));
        let join_usize =
            |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let join_f64 = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        s.push_str(&format!("seed = {}\n", self.seed));
        s.push_str(&format!("out_dir = {}\n", self.out_dir.display()));
        s.push_str(&format!("dataset = {}\n", self.dataset.name()));
        s.push_str(&format!("train_n = {}\n", self.train_n));
        s.push_str(&format!("eval_n = {}\n", self.eval_n));
        s.push_str(&format!("data_noise = {}\n", self.data_noise));
        s.push_str(&format!("data_classes = {}\n", self.data_classes));
        s.push_str(&format!("data_seed = {}\n", self.data_seed));
        s.push_str(&format!("idx_train_images = {}\n", self.idx_train_images));
        s.push_str(&format!("idx_train_labels = {}\n", self.idx_train_labels));
        s.push_str(&format!("idx_eval_images = {}\n", self.idx_eval_images));
        s.push_str(&format!("idx_eval_labels = {}\n", self.idx_eval_labels));
        s.push_str(&format!("arch = {}\n", self.arch));
        s.push_str(&format!("input_dim = {}\n", self.input_dim));
        s.push_str(&format!("hidden = {}\n", join_usize(&self.hidden)));
        s.push_str(&format!("image_hw = {}\n", self.image_hw));
        s.push_str(&format!(
            "conv_channels = {},{}\n",
            self.conv_channels.0, self.conv_channels.1
        ));
        s.push_str(&format!("feature_dim = {}\n", self.feature_dim));
        s.push_str(&format!("head = {}\n", self.head.name()));
        s.push_str(&format!("scale_s = {}\n", self.scale_s));
        s.push_str(&format!("margin_m = {}\n", self.margin_m));
        s.push_str(&format!("framework = {}\n", self.framework.name()));
        s.push_str(&format!("epochs = {}\n", self.epochs));
        s.push_str(&format!("batch_size = {}\n", self.batch_size));
        s.push_str(&format!("lr = {}\n", self.lr));
        s.push_str(&format!("momentum = {}\n", self.momentum));
        s.push_str(&format!("weight_decay = {}\n", self.weight_decay));
        s.push_str(&format!("lr_decay = {}\n", join_f64(&self.lr_decay)));
        s.push_str(&format!("alpha = {}\n", self.alpha));
        s.push_str(&format!("lambda = {}\n", self.lambda));
        s.push_str(&format!("free_replays = {}\n", self.free_replays));
        s.push_str(&format!("log_wall_time = {}\n", self.log_wall_time));
        s.push_str(&format!("checkpoint_every = {}\n", self.checkpoint_every));
        s.push_str(&format!("attack = {}\n", self.attack.name()));
        s.push_str(&format!("norm = {}\n", self.norm.name()));
        s.push_str(&format!("eps = {}\n", self.eps));
        s.push_str(&format!("eta = {}\n", self.eta));
        s.push_str(&format!("steps = {}\n", self.steps));
        s.push_str(&format!("rand_init = {}\n", self.rand_init));
        s.push_str(&format!("restarts = {}\n", self.restarts));
        s.push_str(&format!("momentum_mu = {}\n", self.momentum_mu));
        s
    }

    pub fn head_config(&self) -> Result<HeadConfig> {
        HeadConfig::new(self.head, self.scale_s, self.margin_m)
    }

    pub fn architecture(&self) -> Result<ArchitectureSpec> {
        let arch = match self.arch.as_str() {
            "mlp" => ArchitectureSpec::mlp(
                self.input_dim,
                self.hidden.clone(),
                self.feature_dim,
                self.data_classes_effective(),
            ),
            "conv" => ArchitectureSpec::conv(
                self.image_hw,
                self.conv_channels,
                self.feature_dim,
                self.data_classes_effective(),
            ),
            other => return Err(Error::Parse(format!("unknown arch `{other}`"))),
        };
        arch.validate()?;
        Ok(arch)
    }

    fn data_classes_effective(&self) -> usize {
        match self.dataset {
            DatasetKind::TwoMoons => 2,
            _ => self.data_classes,
        }
    }

    /// Build the attack spec used for the inner maximization and the
    /// default evaluation attack.
    pub fn attack_spec(&self) -> Result<AttackSpec> {
        let head = self.head_config()?;
        let objective = ObjectiveSpec::new(ObjectiveKind::CeVsLabel, head)
            .with_weights(self.alpha, self.lambda);
        let (rand_init, mu) = match self.attack {
            AttackMethod::Fgsm => (false, 0.0),
            AttackMethod::Bim => (false, 0.0),
            AttackMethod::Pgd => (self.rand_init, 0.0),
            AttackMethod::Mim => (false, self.momentum_mu),
        };
        let spec = AttackSpec {
            norm: self.norm,
            eps: self.eps,
            eta: self.eta,
            steps: if self.attack == AttackMethod::Fgsm { 1 } else { self.steps },
            rand_init,
            restarts: self.restarts,
            momentum_mu: mu,
            input_range: (0.0, 1.0),
            objective,
            seed: seeds::split(self.seed, "attack"),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn train_spec(&self) -> Result<TrainSpec> {
        let spec = TrainSpec {
            framework: self.framework,
            head: self.head_config()?,
            attack: self.attack_spec()?,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            lr_decay_epochs: self.lr_decay.clone(),
            alpha: self.alpha,
            lambda: self.lambda,
            free_replays: self.free_replays,
            seed: self.seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Materialize the train and eval datasets.
    pub fn load_datasets(&self) -> Result<(Dataset, Dataset)> {
        match self.dataset {
            DatasetKind::TwoMoons => {
                let train = make_two_moons(self.train_n, self.data_noise, self.data_seed)?;
                let mut eval =
                    make_two_moons(self.eval_n, self.data_noise, seeds::split(self.data_seed, "eval"))?;
                eval.split = "eval".into();
                Ok((train, eval))
            }
            DatasetKind::SynthDigits => {
                let train = make_synth_digits(self.train_n, self.data_classes, self.data_seed)?;
                let mut eval = make_synth_digits(
                    self.eval_n,
                    self.data_classes,
                    seeds::split(self.data_seed, "eval"),
                )?;
                eval.split = "eval".into();
                Ok((train, eval))
            }
            DatasetKind::Idx => {
                for (key, v) in [
                    ("idx_train_images", &self.idx_train_images),
                    ("idx_train_labels", &self.idx_train_labels),
                    ("idx_eval_images", &self.idx_eval_images),
                    ("idx_eval_labels", &self.idx_eval_labels),
                ] {
                    if v.is_empty() {
                        return Err(Error::Parse(format!(
                            "dataset = idx requires key `{key}`"
                        )));
                    }
                }
                let mut train = load_idx_images(
                    Path::new(&self.idx_train_images),
                    Path::new(&self.idx_train_labels),
                )?;
                let mut eval = load_idx_images(
                    Path::new(&self.idx_eval_images),
                    Path::new(&self.idx_eval_labels),
                )?;
                // idx headers carry no class count; the config does
                train.classes = self.data_classes;
                eval.classes = self.data_classes;
                eval.split = "eval".into();
                if self.train_n > 0 {
                    train = train.take(self.train_n);
                }
                if self.eval_n > 0 {
                    eval = eval.take(self.eval_n);
                }
                Ok((train, eval))
            }
        }
    }
}
