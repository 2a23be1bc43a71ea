//! The synchronous round loop: sample clients, train locally, average.
//!
//! Clients of a round can train concurrently. Each one owns a copy of the
//! incoming global parameters, a fresh momentum buffer and an RNG stream
//! keyed by `(master_seed, round, client_id)`, so the outcome does not depend
//! on thread count or scheduling.

use std::path::PathBuf;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;

use crate::data::{in_local_distribution, out_local_distribution, ClientData, Dataset, LabelDistribution};
use crate::error::{Error, Result};
use crate::losses::{fedprox_penalty, LossConfig, Method};
use crate::metrics::{self, ClassAccuracyVector, RoundLog};
use crate::model::{self, MlpConfig, OptState, ParamVector};
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// Weights proportional to client sample counts.
    #[default]
    SizeWeighted,
    /// Plain mean over the sampled clients.
    Uniform,
}

impl Aggregation {
    pub fn name(self) -> &'static str {
        match self {
            Aggregation::SizeWeighted => "size_weighted",
            Aggregation::Uniform => "uniform",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "size_weighted" => Some(Aggregation::SizeWeighted),
            "uniform" => Some(Aggregation::Uniform),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub sampling_ratio: f64,
    pub loss: LossConfig,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,
    pub aggregation: Aggregation,
    pub master_seed: u64,
    /// Evaluate every this many rounds; the final round is always evaluated.
    pub eval_every: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            rounds: 200,
            local_epochs: 5,
            batch_size: 50,
            sampling_ratio: 0.1,
            loss: LossConfig::default(),
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 1e-5,
            lr_decay: 0.99,
            aggregation: Aggregation::SizeWeighted,
            master_seed: 0,
            eval_every: 1,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.local_epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::InvalidArgument(
                "rounds, local_epochs, batch_size and eval_every must be >= 1".into(),
            ));
        }
        if !(self.sampling_ratio > 0.0 && self.sampling_ratio <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "sampling_ratio = {} outside (0, 1]",
                self.sampling_ratio
            )));
        }
        if !(self.lr0.is_finite() && self.lr0 >= 0.0) || !(self.lr_decay.is_finite() && self.lr_decay > 0.0) {
            return Err(Error::InvalidArgument("lr0 must be >= 0 and lr_decay > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument("momentum in [0, 1), weight_decay >= 0".into()));
        }
        self.loss.validate()
    }

    pub fn lr_at(&self, round_index: usize) -> f64 {
        model::lr_at_round_with_decay(self.lr0, self.lr_decay, round_index)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: ParamVector,
    pub sample_count: usize,
    /// Mean of the per-step batch losses.
    pub mean_loss: f64,
}

/// Number of clients drawn per round: `max(1, round(R * K))`.
pub fn clients_per_round(num_clients: usize, ratio: f64) -> usize {
    ((ratio * num_clients as f64).round() as usize).clamp(1, num_clients.max(1))
}

/// Ids drawn without replacement from a per-round stream, sorted ascending.
pub fn sample_clients(num_clients: usize, ratio: f64, round: usize, master_seed: u64) -> Vec<usize> {
    let m = clients_per_round(num_clients, ratio);
    let mut rng = rng::stream(master_seed, Purpose::Sampling, round as u64, 0);
    let mut ids = index::sample(&mut rng, num_clients, m).into_vec();
    ids.sort_unstable();
    ids
}

/// Like [`sample_clients`] but over an explicit pool of eligible ids.
pub fn sample_from_pool(pool: &[usize], ratio: f64, round: usize, master_seed: u64) -> Vec<usize> {
    let mut ids: Vec<usize> = sample_clients(pool.len(), ratio, round, master_seed)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    ids.sort_unstable();
    ids
}

/// Runs `E` epochs of mini-batch momentum SGD from `w_global` on one client.
/// `round` is 1-based and only keys the shuffling stream and error reports.
pub fn local_train(
    model_cfg: &MlpConfig,
    w_global: &ParamVector,
    client: &ClientData,
    dataset: &Dataset,
    config: &FederationConfig,
    round: usize,
    lr: f64,
) -> Result<ClientUpdate> {
    if client.is_empty() {
        return Err(Error::EmptyClient {
            client: client.client_id,
        });
    }
    let loss_cfg = config.loss;
    let mut params = w_global.clone();
    let mut state = OptState::zeros(params.len());
    let mut rng = rng::stream(
        config.master_seed,
        Purpose::LocalShuffle,
        round as u64,
        client.client_id as u64,
    );
    let mut order = client.indices.clone();
    let mut loss_sum = 0.0;
    let mut steps = 0usize;
    for _ in 0..config.local_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch = dataset.batch(chunk);
            let teacher = if loss_cfg.method.needs_teacher() {
                Some(model::forward(model_cfg, w_global, &batch.features)?)
            } else {
                None
            };
            let (mut loss, mut grad) = model::loss_and_gradient(model_cfg, &params, &batch, |logits| {
                loss_cfg.batch_loss(logits, teacher.as_ref(), &batch.labels)
            })?;
            if loss_cfg.method == Method::FedProx {
                let (penalty, pg) = fedprox_penalty(&params.0, &w_global.0, loss_cfg.mu)?;
                loss += penalty;
                for (g, p) in grad.0.iter_mut().zip(&pg) {
                    *g += p;
                }
            }
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    round,
                    client: client.client_id,
                    loss,
                });
            }
            model::sgd_momentum_step(&mut params, &grad, &mut state, lr, config.momentum, config.weight_decay)
                .map_err(|_| Error::Divergence {
                    round,
                    client: client.client_id,
                    loss,
                })?;
            loss_sum += loss;
            steps += 1;
        }
    }
    Ok(ClientUpdate {
        client_id: client.client_id,
        params,
        sample_count: client.len(),
        mean_loss: loss_sum / steps as f64,
    })
}

/// Weighted parameter average, summed in ascending client-id order.
pub fn aggregate(updates: &[ClientUpdate], mode: Aggregation) -> Result<ParamVector> {
    let first = updates
        .first()
        .ok_or_else(|| Error::InvalidArgument("no client updates to aggregate".into()))?;
    let len = first.params.len();
    if updates.iter().any(|u| u.params.len() != len) {
        return Err(Error::DimensionMismatch("client updates differ in length".into()));
    }
    let mut ordered: Vec<&ClientUpdate> = updates.iter().collect();
    ordered.sort_by_key(|u| u.client_id);
    let weights = aggregation_weights(&ordered, mode);
    let mut out = vec![0.0; len];
    for (u, w) in ordered.iter().zip(weights) {
        for (o, v) in out.iter_mut().zip(&u.params.0) {
            *o += w * v;
        }
    }
    Ok(ParamVector(out))
}

fn aggregation_weights(updates: &[&ClientUpdate], mode: Aggregation) -> Vec<f64> {
    match mode {
        Aggregation::Uniform => vec![1.0 / updates.len() as f64; updates.len()],
        Aggregation::SizeWeighted => {
            let total: usize = updates.iter().map(|u| u.sample_count).sum();
            updates
                .iter()
                .map(|u| u.sample_count as f64 / total as f64)
                .collect()
        }
    }
}

/// Mutable state of a running federation.
#[derive(Debug, Clone)]
pub struct RoundState {
    /// Number of completed rounds.
    pub round: usize,
    pub global: ParamVector,
    /// Class accuracies of `global` on the test set.
    pub global_acc: ClassAccuracyVector,
    pub history: Vec<RoundLog>,
}

/// Optional side outputs of a run.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Upper bound on concurrently training clients; `None` uses all cores.
    pub threads: Option<usize>,
    /// Write `checkpoint_round_<t>.bin` here every `checkpoint_every` rounds.
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_every: usize,
}

/// Everything a run needs besides its configuration.
pub struct Federation<'a> {
    pub model: &'a MlpConfig,
    pub config: &'a FederationConfig,
    pub dataset: &'a Dataset,
    pub partition: &'a [ClientData],
    pub testset: &'a Dataset,
}

impl Federation<'_> {
    fn check(&self) -> Result<()> {
        self.config.validate()?;
        self.model.validate()?;
        if self.dataset.dim() != self.model.input_dim || self.testset.dim() != self.model.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "data width {} / test width {} vs model input {}",
                self.dataset.dim(),
                self.testset.dim(),
                self.model.input_dim
            )));
        }
        if self.dataset.num_classes != self.model.num_classes || self.testset.num_classes != self.model.num_classes {
            return Err(Error::DimensionMismatch("class counts of data and model differ".into()));
        }
        if self.partition.iter().enumerate().any(|(i, c)| c.client_id != i) {
            return Err(Error::InvalidArgument("client ids must be 0..K in order".into()));
        }
        Ok(())
    }

    pub fn start(&self, init: ParamVector) -> Result<RoundState> {
        self.check()?;
        let global_acc = metrics::class_wise_accuracy(self.model, &init, self.testset, 0)?;
        Ok(RoundState {
            round: 0,
            global: init,
            global_acc,
            history: Vec::new(),
        })
    }

    /// Runs one round and, on evaluation rounds, appends its log.
    pub fn step(&self, state: &mut RoundState, pool: Option<&rayon::ThreadPool>) -> Result<()> {
        let t = state.round + 1;
        let eligible: Vec<usize> = self.partition.iter().filter(|c| !c.is_empty()).map(|c| c.client_id).collect();
        if eligible.is_empty() {
            return Err(Error::InvalidArgument("every client is empty".into()));
        }
        let sampled = sample_from_pool(&eligible, self.config.sampling_ratio, t, self.config.master_seed);
        let lr = self.config.lr_at(t - 1);
        let train = |&k: &usize| {
            local_train(self.model, &state.global, &self.partition[k], self.dataset, self.config, t, lr)
        };
        let updates: Vec<ClientUpdate> = match pool {
            Some(pool) => pool.install(|| sampled.par_iter().map(train).collect::<Result<_>>())?,
            None => sampled.iter().map(train).collect::<Result<_>>()?,
        };
        let new_global = aggregate(&updates, self.config.aggregation)?;
        if !new_global.is_finite() {
            return Err(Error::NonFinite(format!("global parameters after round {t}")));
        }

        let evaluate = t.is_multiple_of(self.config.eval_every) || t == self.config.rounds;
        if evaluate {
            let log = self.round_log(t, &state.global, &state.global_acc, &new_global, &updates, pool)?;
            state.global_acc = log.class_acc.clone();
            state.history.push(log);
        }
        state.global = new_global;
        if !evaluate {
            state.global_acc = metrics::class_wise_accuracy(self.model, &state.global, self.testset, t)?;
        }
        state.round = t;
        Ok(())
    }

    fn round_log(
        &self,
        t: usize,
        incoming: &ParamVector,
        incoming_acc: &ClassAccuracyVector,
        new_global: &ParamVector,
        updates: &[ClientUpdate],
        pool: Option<&rayon::ThreadPool>,
    ) -> Result<RoundLog> {
        let (correct, total) = metrics::class_counts(self.model, new_global, self.testset)?;
        let class_acc = metrics::accuracy_from_counts(&correct, &total, t)?;
        let global_acc = correct.iter().sum::<usize>() as f64 / total.iter().sum::<usize>() as f64;
        // Distribution of the model the clients started from; uniform when it
        // gets nothing right.
        let a_g = metrics::normalized_accuracy_vector(incoming_acc)
            .unwrap_or_else(|_| LabelDistribution::uniform(self.model.num_classes));

        let per_client = |u: &ClientUpdate| -> Result<[f64; 4]> {
            let p = in_local_distribution(&self.partition[u.client_id], self.dataset)?;
            let p_out = out_local_distribution(&p)?;
            let local_acc = metrics::class_wise_accuracy(self.model, &u.params, self.testset, t)?;
            Ok([
                metrics::masked_accuracy_from(&local_acc, &p)?,
                metrics::masked_accuracy_from(&local_acc, &p_out)?,
                metrics::weight_divergence(incoming, &u.params)?,
                metrics::distribution_distance(&a_g, &p)?,
            ])
        };
        let rows: Vec<[f64; 4]> = match pool {
            Some(pool) => pool.install(|| updates.par_iter().map(per_client).collect::<Result<_>>())?,
            None => updates.iter().map(per_client).collect::<Result<_>>()?,
        };
        let column = |i: usize| rows.iter().map(|r| r[i]).collect::<Vec<_>>();
        let (in_mean, in_std) = metrics::mean_std(&column(0));
        let (out_mean, out_std) = metrics::mean_std(&column(1));
        let (wd_mean, _) = metrics::mean_std(&column(2));
        let (dd_mean, _) = metrics::mean_std(&column(3));
        let (loss_mean, _) = metrics::mean_std(&updates.iter().map(|u| u.mean_loss).collect::<Vec<_>>());
        Ok(RoundLog {
            round: t,
            global_acc,
            class_acc,
            local_in_acc_mean: in_mean,
            local_in_acc_std: in_std,
            local_out_acc_mean: out_mean,
            local_out_acc_std: out_std,
            weight_div_mean: wd_mean,
            dist_dist_mean: dd_mean,
            train_loss: loss_mean,
        })
    }

    /// Runs all rounds from `init`.
    pub fn run(&self, init: ParamVector, options: &RunOptions) -> Result<RoundState> {
        let pool = match options.threads {
            Some(1) => None,
            threads => Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads.unwrap_or(0))
                    .build()
                    .map_err(|e| Error::InvalidArgument(e.to_string()))?,
            ),
        };
        let mut state = self.start(init)?;
        while state.round < self.config.rounds {
            self.step(&mut state, pool.as_ref())?;
            if let Some(dir) = &options.checkpoint_dir {
                if options.checkpoint_every > 0 && state.round % options.checkpoint_every == 0 {
                    let path = dir.join(format!("checkpoint_round_{}.bin", state.round));
                    std::fs::write(path, state.global.to_bytes())?;
                }
            }
        }
        Ok(state)
    }
}

/// Runs a full federation and returns the per-round logs.
pub fn run_federation(
    model_cfg: &MlpConfig,
    config: &FederationConfig,
    dataset: &Dataset,
    partition: &[ClientData],
    testset: &Dataset,
    init: ParamVector,
    options: &RunOptions,
) -> Result<Vec<RoundLog>> {
    let fed = Federation {
        model: model_cfg,
        config,
        dataset,
        partition,
        testset,
    };
    Ok(fed.run(init, options)?.history)
}
