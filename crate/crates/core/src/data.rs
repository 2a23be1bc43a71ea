//! Datasets, label distributions and the non-IID partitioners.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::Serialize;

use crate::error::{Error, IdxError, Result};
use crate::model::{Batch, Matrix};
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidArgument("dataset has no samples".into()));
        }
        // Validates row count and label range.
        Batch::new(features.clone(), labels.clone(), num_classes)?;
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Gathers the given rows into a batch.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        Batch {
            features: Matrix::from_vec(indices.len(), d, data).expect("consistent shape"),
            labels,
        }
    }

    pub fn as_batch(&self) -> Batch {
        Batch {
            features: self.features.clone(),
            labels: self.labels.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClientData {
    pub client_id: usize,
    pub indices: Vec<usize>,
}

impl ClientData {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// A probability vector over classes.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct LabelDistribution(pub Vec<f64>);

impl LabelDistribution {
    /// Accepts vectors with non-negative entries summing to 1 within 1e-9.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.is_empty() || probs.iter().any(|&p| p.is_nan() || p < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "not a probability vector: {probs:?}"
            )));
        }
        Ok(Self(probs))
    }

    pub fn uniform(num_classes: usize) -> Self {
        Self(vec![1.0 / num_classes as f64; num_classes])
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PartitionStrategy {
    #[default]
    Sharding,
    Dirichlet,
    Iid,
}

impl PartitionStrategy {
    pub fn name(self) -> &'static str {
        match self {
            PartitionStrategy::Sharding => "sharding",
            PartitionStrategy::Dirichlet => "dirichlet",
            PartitionStrategy::Iid => "iid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "sharding" => PartitionStrategy::Sharding,
            "dirichlet" => PartitionStrategy::Dirichlet,
            "iid" => PartitionStrategy::Iid,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionSpec {
    pub strategy: PartitionStrategy,
    pub shards_per_client: usize,
    pub alpha: f64,
    pub num_clients: usize,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn apply(&self, dataset: &Dataset) -> Result<Vec<ClientData>> {
        match self.strategy {
            PartitionStrategy::Sharding => {
                shard_partition(dataset, self.num_clients, self.shards_per_client, self.seed)
            }
            PartitionStrategy::Dirichlet => {
                dirichlet_partition(dataset, self.num_clients, self.alpha, self.seed)
            }
            PartitionStrategy::Iid => iid_partition(dataset, self.num_clients, self.seed),
        }
    }
}

/// Class-conditional mixture of unit-covariance Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBlobs {
    pub means: Vec<Vec<f64>>,
}

impl GaussianBlobs {
    /// Class means at `separation` times independent random unit directions.
    pub fn new(num_classes: usize, dim: usize, separation: f64, seed: u64) -> Self {
        let mut rng = rng::stream(seed, Purpose::Data, 0, 0);
        let means = (0..num_classes)
            .map(|_| {
                let dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                dir.iter().map(|v| separation * v / norm).collect()
            })
            .collect();
        Self { means }
    }

    /// `per_class` samples of every class, ordered by class.
    pub fn sample(&self, per_class: usize, seed: u64, stream: u64) -> Result<Dataset> {
        let num_classes = self.means.len();
        let dim = self.means.first().map_or(0, Vec::len);
        let mut rng = rng::stream(seed, Purpose::Data, 1, stream);
        let mut data = Vec::with_capacity(num_classes * per_class * dim);
        let mut labels = Vec::with_capacity(num_classes * per_class);
        for (c, mean) in self.means.iter().enumerate() {
            for _ in 0..per_class {
                data.extend(mean.iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)));
                labels.push(c);
            }
        }
        Dataset::new(Matrix::from_vec(labels.len(), dim, data)?, labels, num_classes)
    }
}

pub fn synth_dataset(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    GaussianBlobs::new(num_classes, dim, separation, seed).sample(per_class, seed, 0)
}

/// Train and test sets drawn from the same blob means.
pub fn synth_train_test(
    num_classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let blobs = GaussianBlobs::new(num_classes, dim, separation, seed);
    Ok((
        blobs.sample(train_per_class, seed, 0)?,
        blobs.sample(test_per_class, seed, 1)?,
    ))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_all(path: &Path) -> std::result::Result<Vec<u8>, IdxError> {
    std::fs::read(path).map_err(|source| IdxError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> std::result::Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| IdxError::Truncated {
            path: path.to_path_buf(),
            needed: at + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> std::result::Result<(), IdxError> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(IdxError::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

fn check_len(bytes: &[u8], needed: usize, path: &Path) -> std::result::Result<(), IdxError> {
    if bytes.len() < needed {
        return Err(IdxError::Truncated {
            path: path.to_path_buf(),
            needed,
            found: bytes.len(),
        });
    }
    Ok(())
}

/// Reads an IDX image/label pair (MNIST layout). Pixels are scaled by 1/255;
/// the class count is `max(label) + 1`, at least 2.
pub fn read_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = read_all(images_path)?;
    check_magic(&images, IDX_IMAGES_MAGIC, images_path)?;
    let n = be_u32(&images, 4, images_path)? as usize;
    let rows = be_u32(&images, 8, images_path)? as usize;
    let cols = be_u32(&images, 12, images_path)? as usize;
    let dim = rows * cols;
    check_len(&images, 16 + n * dim, images_path)?;

    let labels_raw = read_all(labels_path)?;
    check_magic(&labels_raw, IDX_LABELS_MAGIC, labels_path)?;
    let n_labels = be_u32(&labels_raw, 4, labels_path)? as usize;
    check_len(&labels_raw, 8 + n_labels, labels_path)?;
    if n_labels != n {
        return Err(IdxError::CountMismatch {
            images: n,
            labels: n_labels,
        }
        .into());
    }

    let features = images[16..16 + n * dim].iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels: Vec<usize> = labels_raw[8..8 + n].iter().map(|&b| usize::from(b)).collect();
    let num_classes = labels.iter().copied().max().map_or(2, |m| (m + 1).max(2));
    Dataset::new(Matrix::from_vec(n, dim, features)?, labels, num_classes)
}

/// Indices ordered by label, ties by original index.
fn sorted_by_label(dataset: &Dataset) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.sort_by_key(|&i| (dataset.labels[i], i));
    idx
}

/// Label-sorted sharding: `K * s` equal contiguous shards of the sorted
/// index list, dealt `s` per client in a seeded random order.
pub fn shard_partition(
    dataset: &Dataset,
    num_clients: usize,
    shards_per_client: usize,
    seed: u64,
) -> Result<Vec<ClientData>> {
    let total_shards = num_clients * shards_per_client;
    if total_shards == 0 || !dataset.len().is_multiple_of(total_shards) {
        return Err(Error::InvalidArgument(format!(
            "{} samples cannot be cut into {num_clients} x {shards_per_client} equal shards",
            dataset.len()
        )));
    }
    let shard_size = dataset.len() / total_shards;
    let sorted = sorted_by_label(dataset);
    let mut order: Vec<usize> = (0..total_shards).collect();
    order.shuffle(&mut rng::stream(seed, Purpose::Partition, 0, 0));
    Ok(order
        .chunks(shards_per_client)
        .enumerate()
        .map(|(client_id, shards)| ClientData {
            client_id,
            indices: shards
                .iter()
                .flat_map(|&s| sorted[s * shard_size..(s + 1) * shard_size].iter().copied())
                .collect(),
        })
        .collect())
}

/// Split `count` items by `weights` with largest-remainder rounding.
/// Remainder ties go to the lower client index.
fn largest_remainder(weights: &[f64], count: usize) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / total * count as f64).collect();
    let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = alloc.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &k in order.iter().take(count.saturating_sub(assigned)) {
        alloc[k] += 1;
    }
    alloc
}

/// Per-class Dirichlet(α) split across clients. Each class's samples are
/// shuffled, then divided by largest-remainder rounding of the drawn
/// proportions. Clients may end up empty.
pub fn dirichlet_partition(
    dataset: &Dataset,
    num_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<ClientData>> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("dirichlet alpha = {alpha} must be > 0")));
    }
    if num_clients == 0 {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut clients: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
    let sorted = sorted_by_label(dataset);
    let counts = dataset.class_counts();
    let mut start = 0;
    for (c, &count) in counts.iter().enumerate() {
        let mut members = sorted[start..start + count].to_vec();
        start += count;
        let mut rng = rng::stream(seed, Purpose::Partition, 1, c as u64);
        members.shuffle(&mut rng);
        // Redraw in the (astronomically rare) case every gamma variate underflows.
        let weights = loop {
            let w: Vec<f64> = (0..num_clients).map(|_| gamma.sample(&mut rng)).collect();
            if w.iter().sum::<f64>() > 0.0 {
                break w;
            }
        };
        let mut offset = 0;
        for (k, n) in largest_remainder(&weights, count).into_iter().enumerate() {
            clients[k].extend_from_slice(&members[offset..offset + n]);
            offset += n;
        }
    }
    Ok(clients
        .into_iter()
        .enumerate()
        .map(|(client_id, mut indices)| {
            indices.sort_unstable();
            ClientData { client_id, indices }
        })
        .collect())
}

/// Uniformly random split into `K` near-equal parts.
pub fn iid_partition(dataset: &Dataset, num_clients: usize, seed: u64) -> Result<Vec<ClientData>> {
    if num_clients == 0 {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(&mut rng::stream(seed, Purpose::Partition, 2, 0));
    let base = dataset.len() / num_clients;
    let extra = dataset.len() % num_clients;
    let mut offset = 0;
    Ok((0..num_clients)
        .map(|client_id| {
            let n = base + usize::from(client_id < extra);
            let mut indices = idx[offset..offset + n].to_vec();
            offset += n;
            indices.sort_unstable();
            ClientData { client_id, indices }
        })
        .collect())
}

/// Empirical class frequencies of a client's data.
pub fn in_local_distribution(client: &ClientData, dataset: &Dataset) -> Result<LabelDistribution> {
    if client.is_empty() {
        return Err(Error::EmptyClient {
            client: client.client_id,
        });
    }
    let mut counts = vec![0usize; dataset.num_classes];
    for &i in &client.indices {
        counts[dataset.labels[i]] += 1;
    }
    let n = client.len() as f64;
    Ok(LabelDistribution(counts.into_iter().map(|c| c as f64 / n).collect()))
}

/// `(1 - p_c) / (C - 1)` for every class.
pub fn out_local_distribution(p: &LabelDistribution) -> Result<LabelDistribution> {
    let c = p.num_classes();
    if c < 2 {
        return Err(Error::InvalidArgument(
            "out-local distribution needs at least two classes".into(),
        ));
    }
    let denom = (c - 1) as f64;
    Ok(LabelDistribution(p.0.iter().map(|&pc| (1.0 - pc) / denom).collect()))
}

#[derive(Debug, Serialize)]
struct ClientExport<'a> {
    indices: &'a [usize],
    p: Option<LabelDistribution>,
    p_out: Option<LabelDistribution>,
}

/// JSON object keyed by client id with each client's indices and its in/out
/// label distributions (`null` for empty clients).
pub fn partition_to_json(partition: &[ClientData], dataset: &Dataset) -> Result<String> {
    let mut map = serde_json::Map::new();
    for client in partition {
        let p = in_local_distribution(client, dataset).ok();
        let p_out = p.as_ref().map(out_local_distribution).transpose()?;
        let entry = ClientExport {
            indices: &client.indices,
            p,
            p_out,
        };
        map.insert(
            client.client_id.to_string(),
            serde_json::to_value(entry).map_err(|e| Error::Format(e.to_string()))?,
        );
    }
    serde_json::to_string_pretty(&map).map_err(|e| Error::Format(e.to_string()))
}
