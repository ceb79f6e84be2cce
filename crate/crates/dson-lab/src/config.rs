//! Flat `key = value` experiment configuration. Lines starting with `#` are
//! comments, lists are comma-separated, parse -> serialize -> parse is a
//! fixed point.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use dson_core::norm::Variant;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// A variant plus the weight-sharing switch it implies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VariantSpec {
    Bn,
    In,
    Dsbn,
    Sn,
    Ibn,
    Dson,
    DsonAgnostic,
}

impl VariantSpec {
    pub const ALL: [VariantSpec; 7] = [
        VariantSpec::Bn,
        VariantSpec::In,
        VariantSpec::Ibn,
        VariantSpec::Dsbn,
        VariantSpec::Sn,
        VariantSpec::Dson,
        VariantSpec::DsonAgnostic,
    ];

    pub fn core_variant(self) -> Variant {
        match self {
            VariantSpec::Bn => Variant::Bn,
            VariantSpec::In => Variant::In,
            VariantSpec::Dsbn => Variant::Dsbn,
            VariantSpec::Sn => Variant::SnShared,
            VariantSpec::Ibn => Variant::IbnSplit,
            VariantSpec::Dson | VariantSpec::DsonAgnostic => Variant::Dson,
        }
    }

    pub fn domain_specific_weights(self) -> bool {
        !matches!(self, VariantSpec::DsonAgnostic)
    }

    pub fn name(self) -> &'static str {
        match self {
            VariantSpec::Bn => "bn",
            VariantSpec::In => "in",
            VariantSpec::Dsbn => "dsbn",
            VariantSpec::Sn => "sn",
            VariantSpec::Ibn => "ibn",
            VariantSpec::Dson => "dson",
            VariantSpec::DsonAgnostic => "dson-agnostic",
        }
    }
}

impl FromStr for VariantSpec {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bn" => Ok(VariantSpec::Bn),
            "in" => Ok(VariantSpec::In),
            "dsbn" => Ok(VariantSpec::Dsbn),
            "sn" => Ok(VariantSpec::Sn),
            "ibn" => Ok(VariantSpec::Ibn),
            "dson" => Ok(VariantSpec::Dson),
            "dson-agnostic" => Ok(VariantSpec::DsonAgnostic),
            other => Err(ConfigError(format!(
                "unknown variant '{}' (expected one of bn, in, dsbn, sn, ibn, dson, dson-agnostic)",
                other
            ))),
        }
    }
}

impl fmt::Display for VariantSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which held-out target domains a sweep covers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TargetSpec {
    All,
    One(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub variant: VariantSpec,
    pub domains: Vec<usize>,
    pub target: TargetSpec,
    pub iters: u64,
    pub batch_per_domain: usize,
    pub eta0: f64,
    pub lr_alpha: f64,
    pub lr_beta: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub noise: f64,
    pub seeds: Vec<u64>,
    pub domain_specific_weights: bool,
    pub freeze_bn: bool,
    pub log_every: u64,
    pub val_every: u64,
    pub out_dir: String,
    pub data_dir: String,
    // Dataset generation knobs (gen-data).
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub train_per_domain: usize,
    pub test_per_domain: usize,
    pub data_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            variant: VariantSpec::Dson,
            domains: vec![0, 1, 2, 3],
            target: TargetSpec::All,
            iters: 1000,
            batch_per_domain: 16,
            eta0: 0.02,
            lr_alpha: 10.0,
            lr_beta: 0.75,
            momentum: 0.9,
            weight_decay: 0.0,
            noise: 0.0,
            seeds: vec![0, 1, 2, 3, 4],
            domain_specific_weights: true,
            freeze_bn: false,
            log_every: 10,
            val_every: 100,
            out_dir: String::from("out"),
            data_dir: String::from("data"),
            classes: 5,
            channels: 3,
            height: 16,
            width: 16,
            train_per_domain: 500,
            test_per_domain: 200,
            data_seed: dson_core::synth::PRESET_SEED,
        }
    }
}

fn parse_list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>()
                .map_err(|_| ConfigError(format!("invalid entry '{}' in list '{}'", s, key)))
        })
        .collect()
}

fn parse_scalar<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse::<T>()
        .map_err(|_| ConfigError(format!("invalid value '{}' for key '{}'", raw, key)))
}

fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(ConfigError(format!(
            "invalid value '{}' for key '{}' (expected true or false)",
            other, key
        ))),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut seen: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                ConfigError(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let key = key.trim().to_string();
            if seen
                .insert(key.clone(), value.trim().to_string())
                .is_some()
            {
                return Err(ConfigError(format!("duplicate key '{}'", key)));
            }
        }

        let mut cfg = ExperimentConfig::default();
        for (key, value) in &seen {
            match key.as_str() {
                "variant" => cfg.variant = value.parse()?,
                "domains" => cfg.domains = parse_list(key, value)?,
                "target" => {
                    cfg.target = if value == "all" {
                        TargetSpec::All
                    } else {
                        TargetSpec::One(parse_scalar(key, value)?)
                    }
                }
                "iters" => cfg.iters = parse_scalar(key, value)?,
                "batch_per_domain" => cfg.batch_per_domain = parse_scalar(key, value)?,
                "eta0" => cfg.eta0 = parse_scalar(key, value)?,
                "lr_alpha" => cfg.lr_alpha = parse_scalar(key, value)?,
                "lr_beta" => cfg.lr_beta = parse_scalar(key, value)?,
                "momentum" => cfg.momentum = parse_scalar(key, value)?,
                "weight_decay" => cfg.weight_decay = parse_scalar(key, value)?,
                "noise" => cfg.noise = parse_scalar(key, value)?,
                "seeds" => cfg.seeds = parse_list(key, value)?,
                "domain_specific_weights" => {
                    cfg.domain_specific_weights = parse_bool(key, value)?
                }
                "freeze_bn" => cfg.freeze_bn = parse_bool(key, value)?,
                "log_every" => cfg.log_every = parse_scalar(key, value)?,
                "val_every" => cfg.val_every = parse_scalar(key, value)?,
                "out_dir" => cfg.out_dir = value.clone(),
                "data_dir" => cfg.data_dir = value.clone(),
                "classes" => cfg.classes = parse_scalar(key, value)?,
                "channels" => cfg.channels = parse_scalar(key, value)?,
                "height" => cfg.height = parse_scalar(key, value)?,
                "width" => cfg.width = parse_scalar(key, value)?,
                "train_per_domain" => cfg.train_per_domain = parse_scalar(key, value)?,
                "test_per_domain" => cfg.test_per_domain = parse_scalar(key, value)?,
                "data_seed" => cfg.data_seed = parse_scalar(key, value)?,
                other => return Err(ConfigError(format!("unknown key '{}'", other))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn serialize(&self) -> String {
        let list =
            |xs: &[usize]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let seeds = self
            .seeds
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let target = match self.target {
            TargetSpec::All => String::from("all"),
            TargetSpec::One(t) => t.to_string(),
        };
        format!(
            "variant = {}\n\
             domains = {}\n\
             target = {}\n\
             iters = {}\n\
             batch_per_domain = {}\n\
             eta0 = {}\n\
             lr_alpha = {}\n\
             lr_beta = {}\n\
             momentum = {}\n\
             weight_decay = {}\n\
             noise = {}\n\
             seeds = {}\n\
             domain_specific_weights = {}\n\
             freeze_bn = {}\n\
             log_every = {}\n\
             val_every = {}\n\
             out_dir = {}\n\
             data_dir = {}\n\
             classes = {}\n\
             channels = {}\n\
             height = {}\n\
             width = {}\n\
             train_per_domain = {}\n\
             test_per_domain = {}\n\
             data_seed = {}\n",
            self.variant,
            list(&self.domains),
            target,
            self.iters,
            self.batch_per_domain,
            self.eta0,
            self.lr_alpha,
            self.lr_beta,
            self.momentum,
            self.weight_decay,
            self.noise,
            seeds,
            self.domain_specific_weights,
            self.freeze_bn,
            self.log_every,
            self.val_every,
            self.out_dir,
            self.data_dir,
            self.classes,
            self.channels,
            self.height,
            self.width,
            self.train_per_domain,
            self.test_per_domain,
            self.data_seed,
        )
    }

    fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(ConfigError(String::from("domains list is empty")));
        }
        if self.seeds.is_empty() {
            return Err(ConfigError(String::from("seeds list is empty")));
        }
        if let TargetSpec::One(t) = self.target {
            if !self.domains.contains(&t) {
                return Err(ConfigError(format!(
                    "target domain {} is not in the domains list",
                    t
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(ConfigError(format!(
                "noise level {} outside [0, 1]",
                self.noise
            )));
        }
        Ok(())
    }

    /// The held-out targets this config sweeps over.
    pub fn target_list(&self) -> Vec<usize> {
        match self.target {
            TargetSpec::All => self.domains.clone(),
            TargetSpec::One(t) => vec![t],
        }
    }
}
