//! Flat `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored; every key is optional and
//! unknown keys are rejected. [`ExperimentConfig::to_text`] writes every key
//! in a fixed order, which is also the form hashed into the run manifest.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::{PartitionSpec, PartitionStrategy};
use crate::error::ConfigError;
use crate::federation::{Aggregation, FederationConfig};
use crate::losses::Method;

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic {
        num_classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        input_dim: usize,
        separation: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub hidden_dims: Vec<usize>,
    pub partition: PartitionStrategy,
    pub num_clients: usize,
    pub shards_per_client: usize,
    pub alpha: f64,
    pub federation: FederationConfig,
    pub out_dir: PathBuf,
    pub checkpoint_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synthetic {
                num_classes: 10,
                train_per_class: 500,
                test_per_class: 100,
                input_dim: 32,
                separation: 2.0,
            },
            hidden_dims: vec![64, 64],
            partition: PartitionStrategy::Sharding,
            num_clients: 100,
            shards_per_client: 2,
            alpha: 0.1,
            federation: FederationConfig::default(),
            out_dir: PathBuf::from("out"),
            checkpoint_every: 0,
        }
    }
}

/// Every accepted key, in serialization order.
pub const KEYS: &[&str] = &[
    "dataset",
    "num_classes",
    "train_per_class",
    "test_per_class",
    "input_dim",
    "separation",
    "train_images",
    "train_labels",
    "test_images",
    "test_labels",
    "hidden_dims",
    "partition",
    "num_clients",
    "shards_per_client",
    "alpha",
    "rounds",
    "local_epochs",
    "batch_size",
    "sampling_ratio",
    "method",
    "beta",
    "tau",
    "mu",
    "lambda",
    "lr0",
    "momentum",
    "weight_decay",
    "lr_decay",
    "aggregation",
    "seed",
    "eval_every",
    "checkpoint_every",
    "out_dir",
];

struct Entry {
    value: String,
    line: usize,
}

struct Entries(HashMap<String, Entry>);

impl Entries {
    fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.0
            .get(key)
            .map(|e| {
                e.value.parse::<T>().map_err(|err| ConfigError::Type {
                    key: key.into(),
                    line: e.line,
                    value: e.value.clone(),
                    reason: err.to_string(),
                })
            })
            .transpose()
    }

    fn choice<T>(&self, key: &str, parse: fn(&str) -> Option<T>, allowed: &str) -> Result<Option<T>, ConfigError> {
        self.0
            .get(key)
            .map(|e| {
                parse(&e.value).ok_or_else(|| ConfigError::Type {
                    key: key.into(),
                    line: e.line,
                    value: e.value.clone(),
                    reason: format!("expected one of {allowed}"),
                })
            })
            .transpose()
    }

    fn line(&self, key: &str) -> Option<usize> {
        self.0.get(key).map(|e| e.line)
    }

    fn range(&self, key: &str, ok: bool, reason: &str) -> Result<(), ConfigError> {
        if ok {
            Ok(())
        } else {
            Err(ConfigError::Range {
                key: key.into(),
                line: self.line(key),
                reason: reason.into(),
            })
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn parse_dims(text: &str) -> Result<Vec<usize>, String> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|e| e.to_string()))
        .collect()
}

impl ExperimentConfig {
    /// Parses config text. Relative IDX paths are resolved against `base_dir`.
    pub fn from_text(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut entries = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                text: content.into(),
            })?;
            let key = key.trim();
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey { key: key.into(), line });
            }
            if entries.contains_key(key) {
                return Err(ConfigError::Duplicate { key: key.into(), line });
            }
            entries.insert(key.to_string(), Entry { value: value.trim().to_string(), line });
        }
        let e = Entries(entries);
        let mut cfg = Self::default();

        let dataset = e.parse::<String>("dataset")?.unwrap_or_else(|| "synthetic".into());
        cfg.data = match dataset.as_str() {
            "synthetic" => {
                let (mut c, mut tr, mut te, mut d, mut sep): (usize, usize, usize, usize, f64) = (10, 500, 100, 32, 2.0);
                set(&mut c, e.parse("num_classes")?);
                set(&mut tr, e.parse("train_per_class")?);
                set(&mut te, e.parse("test_per_class")?);
                set(&mut d, e.parse("input_dim")?);
                set(&mut sep, e.parse("separation")?);
                e.range("num_classes", c >= 2, "must be >= 2")?;
                e.range("train_per_class", tr >= 1, "must be >= 1")?;
                e.range("test_per_class", te >= 1, "must be >= 1")?;
                e.range("input_dim", d >= 1, "must be >= 1")?;
                e.range("separation", sep.is_finite() && sep >= 0.0, "must be finite and >= 0")?;
                DataSource::Synthetic {
                    num_classes: c,
                    train_per_class: tr,
                    test_per_class: te,
                    input_dim: d,
                    separation: sep,
                }
            }
            "idx" => {
                let path = |key: &str| -> Result<PathBuf, ConfigError> {
                    let p: PathBuf = e.parse::<String>(key)?.map(PathBuf::from).ok_or_else(|| ConfigError::Range {
                        key: key.into(),
                        line: e.line("dataset"),
                        reason: "required when dataset = idx".into(),
                    })?;
                    let resolved = if p.is_relative() { base_dir.join(&p) } else { p };
                    if !resolved.exists() {
                        return Err(ConfigError::MissingPath { key: key.into(), path: resolved });
                    }
                    Ok(resolved)
                };
                DataSource::Idx {
                    train_images: path("train_images")?,
                    train_labels: path("train_labels")?,
                    test_images: path("test_images")?,
                    test_labels: path("test_labels")?,
                }
            }
            other => {
                return Err(ConfigError::Type {
                    key: "dataset".into(),
                    line: e.line("dataset").unwrap_or(0),
                    value: other.into(),
                    reason: "expected synthetic or idx".into(),
                })
            }
        };

        if let Some(entry) = e.0.get("hidden_dims") {
            cfg.hidden_dims = parse_dims(&entry.value).map_err(|reason| ConfigError::Type {
                key: "hidden_dims".into(),
                line: entry.line,
                value: entry.value.clone(),
                reason,
            })?;
        }
        e.range("hidden_dims", cfg.hidden_dims.iter().all(|&d| d >= 1), "widths must be >= 1")?;

        set(&mut cfg.partition, e.choice("partition", PartitionStrategy::parse, "sharding, dirichlet, iid")?);
        set(&mut cfg.num_clients, e.parse("num_clients")?);
        set(&mut cfg.shards_per_client, e.parse("shards_per_client")?);
        set(&mut cfg.alpha, e.parse("alpha")?);
        e.range("num_clients", cfg.num_clients >= 1, "must be >= 1")?;
        e.range("shards_per_client", cfg.shards_per_client >= 1, "must be >= 1")?;
        e.range("alpha", cfg.alpha.is_finite() && cfg.alpha > 0.0, "must be > 0")?;

        let f = &mut cfg.federation;
        set(&mut f.rounds, e.parse("rounds")?);
        set(&mut f.local_epochs, e.parse("local_epochs")?);
        set(&mut f.batch_size, e.parse("batch_size")?);
        set(&mut f.sampling_ratio, e.parse("sampling_ratio")?);
        set(&mut f.loss.method, e.choice("method", Method::parse, "fedavg, fedprox, fedntd, fedntd_mse, kd, kd_ntd_interp")?);
        set(&mut f.loss.beta, e.parse("beta")?);
        set(&mut f.loss.tau, e.parse("tau")?);
        set(&mut f.loss.mu, e.parse("mu")?);
        set(&mut f.loss.lambda, e.parse("lambda")?);
        set(&mut f.lr0, e.parse("lr0")?);
        set(&mut f.momentum, e.parse("momentum")?);
        set(&mut f.weight_decay, e.parse("weight_decay")?);
        set(&mut f.lr_decay, e.parse("lr_decay")?);
        set(&mut f.aggregation, e.choice("aggregation", Aggregation::parse, "size_weighted, uniform")?);
        set(&mut f.master_seed, e.parse("seed")?);
        set(&mut f.eval_every, e.parse("eval_every")?);
        set(&mut cfg.checkpoint_every, e.parse("checkpoint_every")?);
        if let Some(dir) = e.parse::<String>("out_dir")? {
            cfg.out_dir = PathBuf::from(dir);
        }

        let f = &cfg.federation;
        e.range("rounds", f.rounds >= 1, "must be >= 1")?;
        e.range("local_epochs", f.local_epochs >= 1, "must be >= 1")?;
        e.range("batch_size", f.batch_size >= 1, "must be >= 1")?;
        e.range("sampling_ratio", f.sampling_ratio > 0.0 && f.sampling_ratio <= 1.0, "must be in (0, 1]")?;
        e.range("beta", f.loss.beta.is_finite() && f.loss.beta >= 0.0, "must be >= 0")?;
        e.range("tau", f.loss.tau.is_finite() && f.loss.tau > 0.0, "must be > 0")?;
        e.range("mu", f.loss.mu.is_finite() && f.loss.mu >= 0.0, "must be >= 0")?;
        e.range("lambda", (0.0..=1.0).contains(&f.loss.lambda), "must be in [0, 1]")?;
        e.range("lr0", f.lr0.is_finite() && f.lr0 >= 0.0, "must be >= 0")?;
        e.range("momentum", (0.0..1.0).contains(&f.momentum), "must be in [0, 1)")?;
        e.range("weight_decay", f.weight_decay.is_finite() && f.weight_decay >= 0.0, "must be >= 0")?;
        e.range("lr_decay", f.lr_decay.is_finite() && f.lr_decay > 0.0, "must be > 0")?;
        e.range("eval_every", f.eval_every >= 1, "must be >= 1")?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_text(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Every key with its value, in [`KEYS`] order. `out_dir` is included
    /// only when `with_out_dir` is set.
    pub fn entries(&self, with_out_dir: bool) -> Vec<(&'static str, String)> {
        let mut out: Vec<(&'static str, String)> = Vec::new();
        match &self.data {
            DataSource::Synthetic {
                num_classes,
                train_per_class,
                test_per_class,
                input_dim,
                separation,
            } => {
                out.push(("dataset", "synthetic".into()));
                out.push(("num_classes", num_classes.to_string()));
                out.push(("train_per_class", train_per_class.to_string()));
                out.push(("test_per_class", test_per_class.to_string()));
                out.push(("input_dim", input_dim.to_string()));
                out.push(("separation", separation.to_string()));
            }
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                out.push(("dataset", "idx".into()));
                out.push(("train_images", train_images.display().to_string()));
                out.push(("train_labels", train_labels.display().to_string()));
                out.push(("test_images", test_images.display().to_string()));
                out.push(("test_labels", test_labels.display().to_string()));
            }
        }
        let dims: Vec<String> = self.hidden_dims.iter().map(usize::to_string).collect();
        out.push(("hidden_dims", dims.join(",")));
        out.push(("partition", self.partition.name().into()));
        out.push(("num_clients", self.num_clients.to_string()));
        out.push(("shards_per_client", self.shards_per_client.to_string()));
        out.push(("alpha", self.alpha.to_string()));
        let f = &self.federation;
        out.push(("rounds", f.rounds.to_string()));
        out.push(("local_epochs", f.local_epochs.to_string()));
        out.push(("batch_size", f.batch_size.to_string()));
        out.push(("sampling_ratio", f.sampling_ratio.to_string()));
        out.push(("method", f.loss.method.name().into()));
        out.push(("beta", f.loss.beta.to_string()));
        out.push(("tau", f.loss.tau.to_string()));
        out.push(("mu", f.loss.mu.to_string()));
        out.push(("lambda", f.loss.lambda.to_string()));
        out.push(("lr0", f.lr0.to_string()));
        out.push(("momentum", f.momentum.to_string()));
        out.push(("weight_decay", f.weight_decay.to_string()));
        out.push(("lr_decay", f.lr_decay.to_string()));
        out.push(("aggregation", f.aggregation.name().into()));
        out.push(("seed", f.master_seed.to_string()));
        out.push(("eval_every", f.eval_every.to_string()));
        out.push(("checkpoint_every", self.checkpoint_every.to_string()));
        if with_out_dir {
            out.push(("out_dir", self.out_dir.display().to_string()));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries(true) {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// SHA-256 of the canonical text without `out_dir`.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (k, v) in self.entries(false) {
            hasher.update(format!("{k} = {v}\n").as_bytes());
        }
        hasher
            .finalize()
            .iter()
            .fold(String::with_capacity(64), |mut s, b| {
                let _ = write!(s, "{b:02x}");
                s
            })
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec {
            strategy: self.partition,
            shards_per_client: self.shards_per_client,
            alpha: self.alpha,
            num_clients: self.num_clients,
            seed: self.federation.master_seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig, ConfigError> {
        ExperimentConfig::from_text(text, Path::new("."))
    }

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = parse("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let f = &cfg.federation;
        assert_eq!(f.loss.method, Method::FedAvg);
        assert_eq!((f.local_epochs, f.batch_size), (5, 50));
        assert_eq!((f.momentum, f.lr_decay, f.weight_decay), (0.9, 0.99, 1e-5));
        assert_eq!((f.loss.beta, f.loss.tau, f.loss.mu), (1.0, 1.0, 0.1));
        assert_eq!(f.lr0, 0.01);
    }

    #[test]
    fn errors_name_key_and_line() {
        match parse("# comment\nbeta = -1\n") {
            Err(ConfigError::Range { key, line, .. }) => {
                assert_eq!(key, "beta");
                assert_eq!(line, Some(2));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse("\n\nbogus = 1"), Err(ConfigError::UnknownKey { line: 3, .. })));
        assert!(matches!(parse("rounds = many"), Err(ConfigError::Type { line: 1, .. })));
        assert!(matches!(parse("rounds"), Err(ConfigError::Syntax { .. })));
        assert!(matches!(parse("tau = 1\ntau = 2"), Err(ConfigError::Duplicate { .. })));
        assert!(matches!(parse("method = fedsgd"), Err(ConfigError::Type { .. })));
        assert!(matches!(parse("dataset = idx\ntrain_images = /nonexistent/x"), Err(ConfigError::MissingPath { .. })));
        let msg = parse("sampling_ratio = 1.5").unwrap_err().to_string();
        assert!(msg.contains("sampling_ratio"), "{msg}");
    }

    #[test]
    fn round_trips_through_text() {
        let text = "num_clients = 100\nsampling_ratio = 0.1\nlocal_epochs = 3\nbatch_size = 50\n\
                    method = fedntd\nhidden_dims = 128, 32\ntau = 0.3\n";
        let a = parse(text).unwrap();
        let b = parse(&a.to_text()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_text(), b.to_text());
    }

    #[test]
    fn hash_ignores_layout_but_not_values() {
        let a = parse("rounds = 10\nbeta = 1").unwrap();
        let b = parse("# same\n  beta=1.0   # trailing\n\nrounds   =   10\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = parse("rounds = 11\nbeta = 1").unwrap();
        assert_ne!(a.hash(), c.hash());
        let d = parse("rounds = 10\nbeta = 1\nout_dir = elsewhere").unwrap();
        assert_eq!(a.hash(), d.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
