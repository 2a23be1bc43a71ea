//! Accuracy, forgetting, drift and alignment measurements.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabelDistribution};
use crate::error::{Error, Result};
use crate::model::{self, MlpConfig, Matrix, ParamVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracyVector {
    pub round: usize,
    pub acc: Vec<f64>,
}

impl ClassAccuracyVector {
    pub fn num_classes(&self) -> usize {
        self.acc.len()
    }

    pub fn mean(&self) -> f64 {
        self.acc.iter().sum::<f64>() / self.acc.len() as f64
    }
}

/// One evaluated round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub global_acc: f64,
    pub class_acc: ClassAccuracyVector,
    pub local_in_acc_mean: f64,
    pub local_in_acc_std: f64,
    pub local_out_acc_mean: f64,
    pub local_out_acc_std: f64,
    pub weight_div_mean: f64,
    pub dist_dist_mean: f64,
    pub train_loss: f64,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-class correct counts and totals of the model on `testset`.
pub fn class_counts(
    config: &MlpConfig,
    params: &ParamVector,
    testset: &Dataset,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let logits = model::forward(config, params, &testset.features)?;
    let mut correct = vec![0; testset.num_classes];
    let mut total = vec![0; testset.num_classes];
    for (row, &y) in logits.iter_rows().zip(&testset.labels) {
        total[y] += 1;
        if argmax(row) == y {
            correct[y] += 1;
        }
    }
    Ok((correct, total))
}

pub fn class_wise_accuracy(
    config: &MlpConfig,
    params: &ParamVector,
    testset: &Dataset,
    round: usize,
) -> Result<ClassAccuracyVector> {
    let (correct, total) = class_counts(config, params, testset)?;
    accuracy_from_counts(&correct, &total, round)
}

pub fn accuracy_from_counts(correct: &[usize], total: &[usize], round: usize) -> Result<ClassAccuracyVector> {
    let acc = correct
        .iter()
        .zip(total)
        .enumerate()
        .map(|(class, (&c, &t))| {
            if t == 0 {
                Err(Error::MissingClass { class })
            } else {
                Ok(c as f64 / t as f64)
            }
        })
        .collect::<Result<_>>()?;
    Ok(ClassAccuracyVector { round, acc })
}

/// Mean over classes of the gap between each class's best accuracy before
/// the final round and its final accuracy. `history` must be ordered by
/// round; its last entry is the final round.
pub fn forgetting_measure(history: &[ClassAccuracyVector]) -> Result<f64> {
    if history.len() < 2 {
        return Err(Error::InvalidArgument(
            "forgetting needs at least two rounds of history".into(),
        ));
    }
    let (last, earlier) = history.split_last().unwrap();
    let c = last.num_classes();
    if earlier.iter().any(|h| h.num_classes() != c) {
        return Err(Error::DimensionMismatch("class counts differ across rounds".into()));
    }
    // Each gap is split exactly into hi + lo and the terms are summed without
    // rounding, so the result is the correctly rounded sum divided by C.
    let mut terms = Vec::with_capacity(2 * c);
    for k in 0..c {
        let peak = earlier.iter().map(|h| h.acc[k]).fold(f64::NEG_INFINITY, f64::max);
        let (hi, lo) = two_sum(peak, -last.acc[k]);
        terms.push(hi);
        terms.push(lo);
    }
    Ok(exact_sum(&terms) / c as f64)
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Correctly rounded sum of finite values (Shewchuk's partials).
fn exact_sum(values: &[f64]) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for &v in values {
        let mut x = v;
        let mut kept = 0;
        for i in 0..partials.len() {
            let y = partials[i];
            let (a, b) = if x.abs() < y.abs() { (y, x) } else { (x, y) };
            let (hi, lo) = (a + b, b - ((a + b) - a));
            if lo != 0.0 {
                partials[kept] = lo;
                kept += 1;
            }
            x = hi;
        }
        partials.truncate(kept);
        partials.push(x);
    }
    let mut n = partials.len();
    let mut hi = 0.0;
    if n > 0 {
        n -= 1;
        hi = partials[n];
        let mut lo = 0.0;
        while n > 0 {
            let x = hi;
            n -= 1;
            let y = partials[n];
            hi = x + y;
            let yr = hi - x;
            lo = y - yr;
            if lo != 0.0 {
                break;
            }
        }
        // Half-way correction, as in CPython's fsum.
        if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
    }
    hi
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn accuracy_cosine_similarity(a: &ClassAccuracyVector, b: &ClassAccuracyVector) -> f64 {
    cosine_similarity(&a.acc, &b.acc)
}

/// Cosine similarity of every round's class accuracies with the round
/// before it.
pub fn cosine_drift_series(history: &[ClassAccuracyVector]) -> Vec<(usize, f64)> {
    history
        .windows(2)
        .map(|w| (w[1].round, accuracy_cosine_similarity(&w[0], &w[1])))
        .collect()
}

/// Mean squared local norm over squared norm of the mean.
pub fn gradient_diversity(grads: &[&[f64]]) -> Result<f64> {
    let first = grads
        .first()
        .ok_or_else(|| Error::InvalidArgument("no gradients".into()))?;
    let dim = first.len();
    if grads.iter().any(|g| g.len() != dim) {
        return Err(Error::DimensionMismatch("gradients of unequal length".into()));
    }
    let k = grads.len() as f64;
    let mut mean = vec![0.0; dim];
    let mut sq_norms = 0.0;
    for g in grads {
        for (m, v) in mean.iter_mut().zip(g.iter()) {
            *m += v / k;
        }
        sq_norms += g.iter().map(|v| v * v).sum::<f64>();
    }
    let denom: f64 = mean.iter().map(|v| v * v).sum();
    if denom == 0.0 {
        return Err(Error::InvalidArgument("mean gradient is zero".into()));
    }
    Ok(sq_norms / k / denom)
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!("lengths {} and {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum())
}

/// `||w_g - w_k||_1`.
pub fn weight_divergence(w_g: &ParamVector, w_k: &ParamVector) -> Result<f64> {
    l1_distance(&w_g.0, &w_k.0)
}

/// Class accuracies scaled to sum to one.
pub fn normalized_accuracy_vector(acc: &ClassAccuracyVector) -> Result<LabelDistribution> {
    let total: f64 = acc.acc.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument("all class accuracies are zero".into()));
    }
    Ok(LabelDistribution(acc.acc.iter().map(|a| a / total).collect()))
}

/// `||A_G - p_k||_1`.
pub fn distribution_distance(a: &LabelDistribution, b: &LabelDistribution) -> Result<f64> {
    l1_distance(&a.0, &b.0)
}

/// For each neuron of `layer`, the class whose samples produce the largest
/// summed activation (ties to the lowest class).
pub fn neuron_class_preference(
    config: &MlpConfig,
    params: &ParamVector,
    dataset: &Dataset,
    layer: usize,
) -> Result<Vec<usize>> {
    if let Some(class) = dataset.class_counts().iter().position(|&n| n == 0) {
        return Err(Error::MissingClass { class });
    }
    let outputs = model::layer_outputs(config, params, &dataset.features, layer)?;
    let width = outputs.cols();
    let mut h = Matrix::zeros(width, dataset.num_classes);
    for (row, &y) in outputs.iter_rows().zip(&dataset.labels) {
        for (neuron, &a) in row.iter().enumerate() {
            h.row_mut(neuron)[y] += a;
        }
    }
    Ok(h.iter_rows().map(argmax).collect())
}

/// Fraction of neurons whose preferred class agrees.
pub fn alignment(pref_a: &[usize], pref_b: &[usize]) -> Result<f64> {
    if pref_a.len() != pref_b.len() {
        return Err(Error::DimensionMismatch(format!(
            "preference vectors of length {} and {}",
            pref_a.len(),
            pref_b.len()
        )));
    }
    if pref_a.is_empty() {
        return Ok(1.0);
    }
    let same = pref_a.iter().zip(pref_b).filter(|(a, b)| a == b).count();
    Ok(same as f64 / pref_a.len() as f64)
}

/// Accuracy under a reweighted label distribution: `sum_c w_c acc_c`.
pub fn masked_accuracy_from(acc: &ClassAccuracyVector, weights: &LabelDistribution) -> Result<f64> {
    if acc.num_classes() != weights.num_classes() {
        return Err(Error::DimensionMismatch("weights and accuracies differ in classes".into()));
    }
    Ok(acc.acc.iter().zip(&weights.0).map(|(a, w)| a * w).sum())
}

pub fn masked_accuracy(
    config: &MlpConfig,
    params: &ParamVector,
    testset: &Dataset,
    weights: &LabelDistribution,
) -> Result<f64> {
    let (correct, total) = class_counts(config, params, testset)?;
    let mut acc = 0.0;
    for (class, (&w, (&c, &t))) in weights.0.iter().zip(correct.iter().zip(&total)).enumerate() {
        if w == 0.0 {
            continue;
        }
        if t == 0 {
            return Err(Error::MissingClass { class });
        }
        acc += w * c as f64 / t as f64;
    }
    Ok(acc)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
