//! Runs a configured experiment end to end and writes its outputs.

use std::path::{Path, PathBuf};

use crate::config::{DataSource, ExperimentConfig};
use crate::data::{self, ClientData, Dataset};
use crate::error::Result;
use crate::federation::{Federation, RunOptions};
use crate::io::{self, RunManifest, RunSummary};
use crate::metrics::RoundLog;
use crate::model::{self, MlpConfig};

pub const ROUND_CSV: &str = "rounds.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const MANIFEST_JSON: &str = "manifest.json";

/// Train and test data of a config.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.data {
        DataSource::Synthetic {
            num_classes,
            train_per_class,
            test_per_class,
            input_dim,
            separation,
        } => data::synth_train_test(
            *num_classes,
            *train_per_class,
            *test_per_class,
            *input_dim,
            *separation,
            cfg.federation.master_seed,
        ),
        DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let train = data::read_idx(train_images, train_labels)?;
            let mut test = data::read_idx(test_images, test_labels)?;
            test.num_classes = test.num_classes.max(train.num_classes);
            Ok((train, test))
        }
    }
}

pub struct Prepared {
    pub model: MlpConfig,
    pub train: Dataset,
    pub test: Dataset,
    pub partition: Vec<ClientData>,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let (train, mut test) = load_data(cfg)?;
    let num_classes = train.num_classes.max(test.num_classes);
    let mut train = train;
    train.num_classes = num_classes;
    test.num_classes = num_classes;
    let model = MlpConfig::new(train.dim(), cfg.hidden_dims.clone(), num_classes)?;
    let partition = cfg.partition_spec().apply(&train)?;
    Ok(Prepared {
        model,
        train,
        test,
        partition,
    })
}

pub struct RunOutput {
    pub logs: Vec<RoundLog>,
    pub summary: RunSummary,
    pub out_dir: PathBuf,
}

/// Trains, then writes the round CSV, summary, manifest and any checkpoints
/// into the config's `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<RunOutput> {
    let prepared = prepare(cfg)?;
    let out_dir = cfg.out_dir.clone();
    std::fs::create_dir_all(&out_dir)?;
    let started_at = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .ok();

    let fed = Federation {
        model: &prepared.model,
        config: &cfg.federation,
        dataset: &prepared.train,
        partition: &prepared.partition,
        testset: &prepared.test,
    };
    let options = RunOptions {
        threads,
        checkpoint_dir: (cfg.checkpoint_every > 0).then(|| out_dir.clone()),
        checkpoint_every: cfg.checkpoint_every,
    };
    let init = model::init_params(&prepared.model, cfg.federation.master_seed);
    let state = fed.run(init, &options)?;
    let logs = state.history;
    let summary = RunSummary::from_logs(&logs)?;

    let manifest = RunManifest {
        config_hash: cfg.hash(),
        master_seed: cfg.federation.master_seed,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        round_csv: ROUND_CSV.into(),
        summary_json: SUMMARY_JSON.into(),
        started_at,
    };
    io::write_round_csv(&out_dir.join(ROUND_CSV), &logs, prepared.model.num_classes)?;
    write(&out_dir.join(SUMMARY_JSON), &io::summary_json(&summary, &cfg.entries(false), &manifest)?)?;
    write(&out_dir.join(MANIFEST_JSON), &io::manifest_json(&manifest)?)?;
    Ok(RunOutput { logs, summary, out_dir })
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}
