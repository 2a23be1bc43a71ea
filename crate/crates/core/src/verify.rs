//! Numerical checks of the analytical results behind not-true distillation.
//!
//! * gradient diversity under out-local regularisation (`diversity`)
//! * true / not-true decomposition of logit-matching losses (`decompos*`)
//! * minimax optimality of the uniform distribution (`minimax`)
//! * the smoothness upper bound on mixture losses
//!
//! Every check evaluates one quantity by two independent routes or tests an
//! inequality pointwise; none of them touches a training run.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::data::LabelDistribution;
use crate::error::{Error, Result};
use crate::losses::softmax_temp;
use crate::metrics::gradient_diversity;
use crate::rng::{self, Purpose};

/// Population variance over classes.
fn class_variance(p: &[f64]) -> f64 {
    let n = p.len() as f64;
    let mean = p.iter().sum::<f64>() / n;
    p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

fn random_simplex(rng: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..c).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

// ---------------------------------------------------------------------------
// Gradient diversity
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct DiversityInstance {
    pub clients: Vec<LabelDistribution>,
    pub num_classes: usize,
}

impl DiversityInstance {
    pub fn new(clients: Vec<LabelDistribution>) -> Result<Self> {
        let num_classes = clients
            .first()
            .map(LabelDistribution::num_classes)
            .ok_or_else(|| Error::InvalidArgument("no clients".into()))?;
        if num_classes < 2 || clients.iter().any(|p| p.num_classes() != num_classes) {
            return Err(Error::InvalidArgument("clients need a common C >= 2".into()));
        }
        Ok(Self { clients, num_classes })
    }

    /// `K` clients (a multiple of `C`) holding cyclic shifts of `base`, so
    /// every class has total mass `K / C`.
    pub fn cyclic(base: &[f64], copies: usize) -> Result<Self> {
        let c = base.len();
        let clients = (0..c * copies)
            .map(|k| LabelDistribution::new((0..c).map(|j| base[(j + k) % c]).collect()))
            .collect::<Result<_>>()?;
        Self::new(clients)
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    /// Whether `sum_k p^k(c) = K / C` for every class, within 1e-9.
    pub fn is_uniform_global(&self) -> bool {
        let target = self.num_clients() as f64 / self.num_classes as f64;
        (0..self.num_classes).all(|c| {
            let col: f64 = self.clients.iter().map(|p| p.0[c]).sum();
            (col - target).abs() <= 1e-9
        })
    }

    fn require_uniform_global(&self) -> Result<()> {
        if self.is_uniform_global() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                "client distributions do not average to the uniform distribution".into(),
            ))
        }
    }

    fn sum_variance(&self) -> f64 {
        self.clients.iter().map(|p| class_variance(&p.0)).sum()
    }

    /// Constant of the slope bound, `2 C^3 / (K (C-1)^2) * sum_k Var_c[p^k]`.
    pub fn slope_constant(&self) -> f64 {
        let c = self.num_classes as f64;
        let k = self.num_clients() as f64;
        2.0 * c.powi(3) / (k * (c - 1.0).powi(2)) * self.sum_variance()
    }
}

/// `beta`-regularised local gradients `p^k + beta * p~^k` expressed in an
/// orthonormal basis of class gradients.
pub fn regularized_gradients(instance: &DiversityInstance, beta: f64) -> Vec<Vec<f64>> {
    let c = instance.num_classes as f64;
    instance
        .clients
        .iter()
        .map(|p| p.0.iter().map(|&pc| pc + beta * (1.0 - pc) / (c - 1.0)).collect())
        .collect()
}

/// Gradient diversity straight from its definition.
pub fn lambda_of_beta(instance: &DiversityInstance, beta: f64) -> Result<f64> {
    let grads = regularized_gradients(instance, beta);
    let refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
    gradient_diversity(&refs)
}

/// Closed form valid under the uniform-global assumption:
/// `1 + C^2 / (K (1+beta)^2) * (1 - beta/(C-1))^2 * sum_k Var_c[p^k]`.
pub fn lambda_closed_form(instance: &DiversityInstance, beta: f64) -> Result<f64> {
    instance.require_uniform_global()?;
    let c = instance.num_classes as f64;
    let k = instance.num_clients() as f64;
    let shrink = (1.0 - beta / (c - 1.0)).powi(2);
    Ok(1.0 + c * c / (k * (1.0 + beta).powi(2)) * shrink * instance.sum_variance())
}

/// Analytical derivative of [`lambda_closed_form`].
pub fn lambda_slope(instance: &DiversityInstance, beta: f64) -> f64 {
    let c = instance.num_classes as f64;
    let b1 = 1.0 + beta;
    -instance.slope_constant() * (c / b1.powi(3) - 1.0 / b1.powi(2))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiversityReport {
    pub betas: Vec<f64>,
    pub lambdas: Vec<f64>,
    /// Largest |definition - closed form| over the grid.
    pub closed_form_error: f64,
    pub monotone: bool,
    /// Largest `slope - (-M / (1+beta)^2)` over the grid; `<= 1e-6` passes.
    pub slope_excess: f64,
    pub slope_bound_holds: bool,
}

pub const SLOPE_TOLERANCE: f64 = 1e-6;
const FD_STEP: f64 = 1e-5;

/// Evaluates diversity on `betas` (which must lie in `[0, C/2 - 1]`) and
/// checks monotonicity and the slope bound with central differences.
pub fn verify_diversity(instance: &DiversityInstance, betas: &[f64]) -> Result<DiversityReport> {
    instance.require_uniform_global()?;
    let limit = instance.num_classes as f64 / 2.0 - 1.0;
    if betas.iter().any(|&b| !(0.0..=limit + 1e-12).contains(&b)) {
        return Err(Error::InvalidArgument(format!("beta grid must lie in [0, {limit}]")));
    }
    let m = instance.slope_constant();
    let mut lambdas = Vec::with_capacity(betas.len());
    let mut closed_form_error: f64 = 0.0;
    let mut slope_excess = f64::NEG_INFINITY;
    for &b in betas {
        let l = lambda_of_beta(instance, b)?;
        closed_form_error = closed_form_error.max((l - lambda_closed_form(instance, b)?).abs());
        let slope = (lambda_of_beta(instance, b + FD_STEP)? - lambda_of_beta(instance, b - FD_STEP)?) / (2.0 * FD_STEP);
        slope_excess = slope_excess.max(slope + m / (1.0 + b).powi(2));
        lambdas.push(l);
    }
    let monotone = lambdas.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    Ok(DiversityReport {
        betas: betas.to_vec(),
        lambdas,
        closed_form_error,
        monotone,
        slope_excess,
        slope_bound_holds: slope_excess <= SLOPE_TOLERANCE,
    })
}

/// `0, step, 2 step, ...` up to `C/2 - 1`.
pub fn beta_grid(num_classes: usize, step: f64) -> Vec<f64> {
    let limit = num_classes as f64 / 2.0 - 1.0;
    let n = (limit / step + 1e-9).floor() as usize;
    (0..=n).map(|i| i as f64 * step).collect()
}

/// A random cyclic instance with `C` in `3..=10` and `K = C * m`, `m <= 3`.
pub fn random_diversity_instance(rng: &mut ChaCha8Rng) -> DiversityInstance {
    let c = rng.random_range(3..=10);
    let copies = rng.random_range(1..=3);
    let base = random_simplex(rng, c);
    DiversityInstance::cyclic(&base, copies).expect("cyclic shifts of a simplex vector")
}

// ---------------------------------------------------------------------------
// True / not-true decomposition
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionInstance {
    pub local: Vec<Vec<f64>>,
    pub global: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub tau: f64,
}

impl DecompositionInstance {
    /// Every class must be present among the labels.
    pub fn new(local: Vec<Vec<f64>>, global: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize, tau: f64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidArgument("need at least two classes".into()));
        }
        if local.len() != labels.len() || global.len() != labels.len() {
            return Err(Error::DimensionMismatch("logit and label counts differ".into()));
        }
        if local.iter().chain(&global).any(|z| z.len() != num_classes || z.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidArgument("logits must be finite vectors of length C".into()));
        }
        let mut seen = vec![false; num_classes];
        for &y in &labels {
            *seen.get_mut(y).ok_or_else(|| Error::InvalidArgument(format!("label {y} out of range")))? = true;
        }
        if let Some(class) = seen.iter().position(|s| !s) {
            return Err(Error::MissingClass { class });
        }
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::InvalidArgument(format!("tau = {tau}")));
        }
        Ok(Self {
            local,
            global,
            labels,
            num_classes,
            tau,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn class_sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.num_classes];
        for &y in &self.labels {
            s[y] += 1;
        }
        s
    }

    /// Returns `(p, p~)` of the instance's labels.
    fn distributions(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.len() as f64;
        let c = self.num_classes as f64;
        let p: Vec<f64> = self.class_sizes().iter().map(|&s| s as f64 / n).collect();
        let p_out = p.iter().map(|pc| (1.0 - pc) / (c - 1.0)).collect();
        (p, p_out)
    }
}

/// Both sides of the true/not-true identities for a per-(sample, class) term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decomposition {
    pub true_direct: f64,
    pub true_weighted: f64,
    pub not_true_direct: f64,
    pub not_true_weighted: f64,
}

impl Decomposition {
    pub fn discrepancy(&self) -> f64 {
        (self.true_direct - self.true_weighted)
            .abs()
            .max((self.not_true_direct - self.not_true_weighted).abs())
    }
}

/// `direct` side accumulates `term(i, c)` over samples; `weighted` side
/// regroups per class with weights `p_c` over `S_c` and `p~_c` over its
/// complement. `not_true_scale` multiplies the direct not-true sum.
fn decompose(inst: &DecompositionInstance, term: &dyn Fn(usize, usize) -> f64, not_true_scale: f64) -> Decomposition {
    let n = inst.len() as f64;
    let c = inst.num_classes;
    let mut true_direct = 0.0;
    let mut not_true_direct = 0.0;
    for (i, &y) in inst.labels.iter().enumerate() {
        true_direct += term(i, y);
        not_true_direct += (0..c).filter(|&k| k != y).map(|k| term(i, k)).sum::<f64>();
    }
    true_direct /= n;
    not_true_direct *= not_true_scale / n;

    let (p, p_out) = inst.distributions();
    let sizes = inst.class_sizes();
    let mut true_weighted = 0.0;
    let mut not_true_weighted = 0.0;
    for k in 0..c {
        let (mut inside, mut outside) = (0.0, 0.0);
        for (i, &y) in inst.labels.iter().enumerate() {
            if y == k {
                inside += term(i, k);
            } else {
                outside += term(i, k);
            }
        }
        true_weighted += p[k] * inside / sizes[k] as f64;
        not_true_weighted += p_out[k] * outside / (inst.len() - sizes[k]) as f64;
    }
    Decomposition {
        true_direct,
        true_weighted,
        not_true_direct,
        not_true_weighted,
    }
}

/// KL form: `L_true = sum_c p_c E_{S_c}[.]` and
/// `L_not-true / (C-1) = sum_c p~_c E_{not S_c}[.]`, with full softmaxes.
pub fn decompose_kl(inst: &DecompositionInstance) -> Result<Decomposition> {
    let q_l: Vec<Vec<f64>> = inst.local.iter().map(|z| softmax_temp(z, inst.tau)).collect::<Result<_>>()?;
    let q_g: Vec<Vec<f64>> = inst.global.iter().map(|z| softmax_temp(z, inst.tau)).collect::<Result<_>>()?;
    let term = |i: usize, c: usize| {
        let g = q_g[i][c];
        if g <= 0.0 {
            0.0
        } else {
            -g * (q_l[i][c] / g).ln()
        }
    };
    Ok(decompose(inst, &term, 1.0 / (inst.num_classes - 1) as f64))
}

/// MSE form with the squared per-class logit gap.
pub fn decompose_mse(inst: &DecompositionInstance) -> Decomposition {
    let term = |i: usize, c: usize| (inst.local[i][c] - inst.global[i][c]).powi(2);
    decompose(inst, &term, 1.0 / (inst.num_classes - 1) as f64)
}

pub fn verify_decomposition_kl(inst: &DecompositionInstance) -> Result<f64> {
    Ok(decompose_kl(inst)?.discrepancy())
}

pub fn verify_decomposition_mse(inst: &DecompositionInstance) -> f64 {
    decompose_mse(inst).discrepancy()
}

/// Random instance with `C` in `2..=10`, `N` in `C..=64`, every class present.
pub fn random_decomposition_instance(rng: &mut ChaCha8Rng) -> DecompositionInstance {
    let c = rng.random_range(2..=10);
    let n = rng.random_range(c..=64);
    let mut labels: Vec<usize> = (0..c).chain((c..n).map(|_| rng.random_range(0..c))).collect();
    labels.shuffle(rng);
    let mut logits = |scale: f64| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..c).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect()
    };
    let local = logits(3.0);
    let global = logits(3.0);
    let tau = rng.random_range(0.5..4.0);
    DecompositionInstance::new(local, global, labels, c, tau).expect("valid by construction")
}

// ---------------------------------------------------------------------------
// Minimax optimality of the uniform distribution
// ---------------------------------------------------------------------------

/// A finite, permutation-invariant distribution over the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricFamily {
    pub name: String,
    pub atoms: Vec<Vec<f64>>,
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for perm in permutations(n - 1) {
        for pos in 0..=perm.len() {
            let mut p = perm.clone();
            p.insert(pos, n - 1);
            out.push(p);
        }
    }
    out
}

impl SymmetricFamily {
    /// Uniform over the one-hot vertices.
    pub fn vertices(c: usize) -> Self {
        Self {
            name: "vertices".into(),
            atoms: (0..c)
                .map(|i| (0..c).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
        }
    }

    /// Uniform over all coordinate permutations of `base`.
    pub fn permutations_of(base: &[f64]) -> Self {
        Self {
            name: format!("permutations of {base:?}"),
            atoms: permutations(base.len())
                .into_iter()
                .map(|perm| perm.iter().map(|&i| base[i]).collect())
                .collect(),
        }
    }

    /// `E_{p' ~ family} ||p' - p||_2`.
    pub fn expected_distance(&self, p: &[f64]) -> f64 {
        self.atoms
            .iter()
            .map(|a| a.iter().zip(p).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
            .sum::<f64>()
            / self.atoms.len() as f64
    }
}

/// Simplex points whose coordinates are multiples of `1 / steps`.
pub fn simplex_grid(c: usize, steps: usize) -> Vec<Vec<f64>> {
    fn rec(c: usize, left: usize, steps: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<f64>>) {
        if prefix.len() + 1 == c {
            prefix.push(left);
            out.push(prefix.iter().map(|&k| k as f64 / steps as f64).collect());
            prefix.pop();
            return;
        }
        for k in 0..=left {
            prefix.push(k);
            rec(c, left - k, steps, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(c, steps, steps, &mut Vec::new(), &mut out);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinimaxReport {
    pub family: String,
    pub argmin: Vec<f64>,
    pub argmin_value: f64,
    pub uniform_value: f64,
    pub distance_to_uniform: f64,
    pub grid_step: f64,
    /// Argmin within one grid step of uniform.
    pub is_uniform: bool,
    /// `G(uniform) <= G(p)` at every grid point.
    pub uniform_dominates: bool,
    /// Largest `|G(p) - G(sigma p)|` over grid points and cyclic shifts.
    pub symmetry_error: f64,
}

/// Minimises the expected distance over a simplex grid of step `grid_step`.
/// Only the per-family minimality is checked, not the supremum over every
/// symmetric family.
pub fn verify_minimax(family: &SymmetricFamily, c: usize, grid_step: f64) -> Result<MinimaxReport> {
    if !(2..=4).contains(&c) || family.atoms.iter().any(|a| a.len() != c) {
        return Err(Error::InvalidArgument("C must be 2, 3 or 4 and match the family".into()));
    }
    if !(grid_step > 0.0 && grid_step <= 0.05) {
        return Err(Error::InvalidArgument(format!("grid step {grid_step} must be in (0, 0.05]")));
    }
    let steps = (1.0 / grid_step).round() as usize;
    let uniform = vec![1.0 / c as f64; c];
    let uniform_value = family.expected_distance(&uniform);
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut uniform_dominates = true;
    let mut symmetry_error: f64 = 0.0;
    for p in simplex_grid(c, steps) {
        let g = family.expected_distance(&p);
        uniform_dominates &= uniform_value <= g + 1e-12;
        for shift in 1..c {
            let rotated: Vec<f64> = (0..c).map(|j| p[(j + shift) % c]).collect();
            symmetry_error = symmetry_error.max((family.expected_distance(&rotated) - g).abs());
        }
        // Among numerically tied minimizers keep the one nearest uniform.
        let better = best.as_ref().is_none_or(|(q, v)| {
            g < *v - 1e-12 || ((g - *v).abs() <= 1e-12 && sq_dist(&p, &uniform) < sq_dist(q, &uniform))
        });
        if better {
            best = Some((p, g));
        }
    }
    let (argmin, argmin_value) = best.expect("grid is never empty");
    let distance_to_uniform = argmin
        .iter()
        .zip(&uniform)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(MinimaxReport {
        family: family.name.clone(),
        argmin,
        argmin_value,
        uniform_value,
        distance_to_uniform,
        grid_step,
        is_uniform: distance_to_uniform <= grid_step,
        uniform_dominates,
        symmetry_error,
    })
}

// ---------------------------------------------------------------------------
// Smoothness bound
// ---------------------------------------------------------------------------

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// One random mixture: class optima `w_c`, weights `p`, a query point `w`.
fn smoothness_trial(rng: &mut ChaCha8Rng, c: usize, dim: usize, radius: f64) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let centre: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let mut near = |scale: f64| -> Vec<f64> {
        centre.iter().map(|m| m + scale * rng.sample::<f64, _>(StandardNormal)).collect()
    };
    let optima: Vec<Vec<f64>> = (0..c).map(|_| near(radius)).collect();
    let w = near(radius);
    let p = random_simplex(rng, c);
    (optima, p, w)
}

/// Quadratic class losses `lambda/2 ||w - w_c||^2` attain the bound with
/// equality; returns the largest `LHS - RHS` over `trials`.
pub fn verify_smoothness_bound(lambda: f64, c: usize, trials: usize, seed: u64) -> Result<f64> {
    smoothness_check(lambda, c, trials, seed, 0.0)
}

/// Same check with `lambda/2 ||d||^2 - eps ||d||^4` class losses, sampled
/// inside the radius `sqrt(lambda / (12 eps))` where each is still convex
/// around its optimum.
pub fn verify_smoothness_bound_quartic(lambda: f64, eps: f64, c: usize, trials: usize, seed: u64) -> Result<f64> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidArgument("eps must be > 0".into()));
    }
    smoothness_check(lambda, c, trials, seed, eps)
}

fn smoothness_check(lambda: f64, c: usize, trials: usize, seed: u64, eps: f64) -> Result<f64> {
    if !(lambda.is_finite() && lambda > 0.0) || c == 0 {
        return Err(Error::InvalidArgument(format!("lambda = {lambda}, C = {c}")));
    }
    let mut rng = rng::stream(seed, Purpose::Verify, 4, c as u64);
    let dim = 8;
    let radius = if eps > 0.0 {
        // keeps every ||w - w_c|| well inside the convex region
        0.1 * (lambda / (12.0 * eps)).sqrt() / (dim as f64).sqrt()
    } else {
        1.0
    };
    let loss_c = |w: &[f64], wc: &[f64]| {
        let d2 = sq_dist(w, wc);
        0.5 * lambda * d2 - eps * d2 * d2
    };
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..trials {
        let (optima, p, w) = smoothness_trial(&mut rng, c, dim, radius);
        let lhs: f64 = p.iter().zip(&optima).map(|(pc, wc)| pc * loss_c(&w, wc)).sum();
        let rhs: f64 = p
            .iter()
            .zip(&optima)
            .map(|(pc, wc)| pc * (loss_c(wc, wc) + 0.5 * lambda * sq_dist(&w, wc)))
            .sum();
        worst = worst.max(lhs - rhs);
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Suite
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
    pub note: String,
}

impl std::fmt::Display for CheckLine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<28} measured={:.3e} tolerance={:.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.tolerance
        )?;
        if !self.note.is_empty() {
            write!(f, "  ({})", self.note)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub lines: Vec<CheckLine>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.lines.iter().all(|l| l.passed)
    }
}

pub const DECOMPOSITION_TOLERANCE: f64 = 1e-9;
pub const DIVERSITY_TOLERANCE: f64 = 1e-9;
pub const SMOOTHNESS_TOLERANCE: f64 = 1e-9;
pub const MINIMAX_GRID_STEP: f64 = 0.02;

fn line(name: &str, measured: f64, tolerance: f64, passed: bool, note: impl Into<String>) -> CheckLine {
    CheckLine {
        name: name.into(),
        passed,
        measured,
        tolerance,
        note: note.into(),
    }
}

/// Runs every check. `trials` sets the instance count of the randomised
/// decomposition and smoothness checks; the diversity sweep uses
/// `max(trials / 2, 1)` instances.
pub fn run_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut lines = Vec::new();

    let mut rng = rng::stream(seed, Purpose::Verify, 2, 0);
    let (mut kl_worst, mut mse_worst) = (0.0f64, 0.0f64);
    for _ in 0..trials {
        let inst = random_decomposition_instance(&mut rng);
        kl_worst = kl_worst.max(verify_decomposition_kl(&inst)?);
        mse_worst = mse_worst.max(verify_decomposition_mse(&inst));
    }
    lines.push(line("decomposition_kl", kl_worst, DECOMPOSITION_TOLERANCE, kl_worst < DECOMPOSITION_TOLERANCE, format!("{trials} instances, N<=64, C<=10")));
    lines.push(line("decomposition_mse", mse_worst, DECOMPOSITION_TOLERANCE, mse_worst < DECOMPOSITION_TOLERANCE, format!("{trials} instances, N<=64, C<=10")));

    let mut rng = rng::stream(seed, Purpose::Verify, 1, 0);
    let n1 = (trials / 2).max(1);
    let (mut cf_worst, mut slope_worst) = (0.0f64, f64::NEG_INFINITY);
    let mut monotone = true;
    for _ in 0..n1 {
        let inst = random_diversity_instance(&mut rng);
        let report = verify_diversity(&inst, &beta_grid(inst.num_classes, 0.01))?;
        cf_worst = cf_worst.max(report.closed_form_error);
        slope_worst = slope_worst.max(report.slope_excess);
        monotone &= report.monotone;
    }
    lines.push(line("diversity_closed_form", cf_worst, DIVERSITY_TOLERANCE, cf_worst <= DIVERSITY_TOLERANCE, format!("{n1} cyclic instances")));
    lines.push(line("diversity_monotone", if monotone { 0.0 } else { 1.0 }, 0.0, monotone, "beta grid step 0.01 on [0, C/2-1]"));
    lines.push(line("diversity_slope_bound", slope_worst, SLOPE_TOLERANCE, slope_worst <= SLOPE_TOLERANCE, "slope + M/(1+beta)^2"));

    let families = [
        (2, SymmetricFamily::vertices(2)),
        (2, SymmetricFamily::permutations_of(&[0.8, 0.2])),
        (3, SymmetricFamily::vertices(3)),
        (3, SymmetricFamily::permutations_of(&[0.6, 0.3, 0.1])),
    ];
    for (c, family) in &families {
        let r = verify_minimax(family, *c, MINIMAX_GRID_STEP)?;
        let passed = r.is_uniform && r.uniform_dominates;
        lines.push(line(
            &format!("minimax_uniform_argmin_c{c}"),
            r.distance_to_uniform,
            MINIMAX_GRID_STEP,
            passed,
            format!("{}; per-family check only", r.family),
        ));
    }

    let quad = verify_smoothness_bound(1.5, 5, trials, seed)?;
    lines.push(line("smoothness_bound_quadratic", quad, SMOOTHNESS_TOLERANCE, quad <= SMOOTHNESS_TOLERANCE, format!("{trials} trials, equality case")));
    let quartic = verify_smoothness_bound_quartic(1.5, 0.05, 5, trials, seed)?;
    lines.push(line("smoothness_bound_quartic", quartic, SMOOTHNESS_TOLERANCE, quartic <= SMOOTHNESS_TOLERANCE, "locally smooth quartic"));

    Ok(SuiteReport { lines })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(v: &[f64]) -> LabelDistribution {
        LabelDistribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn identical_clients_have_unit_diversity() {
        let inst = DiversityInstance::new(vec![dist(&[0.7, 0.2, 0.1]); 4]).unwrap();
        for b in [0.0, 0.3, 1.0, 5.0] {
            assert!((lambda_of_beta(&inst, b).unwrap() - 1.0).abs() < 1e-14);
        }
        assert!(!inst.is_uniform_global());
        assert!(lambda_closed_form(&inst, 0.0).is_err());
        let uniform = DiversityInstance::new(vec![LabelDistribution::uniform(4); 4]).unwrap();
        let r = verify_diversity(&uniform, &beta_grid(4, 0.1)).unwrap();
        assert_eq!(uniform.slope_constant(), 0.0);
        assert!(r.monotone && r.slope_bound_holds);
        assert!(r.slope_excess.abs() < 1e-9);
    }

    #[test]
    fn cyclic_instance_is_monotone() {
        let inst = DiversityInstance::cyclic(&[0.7, 0.1, 0.1, 0.1], 1).unwrap();
        assert!(inst.is_uniform_global());
        let r = verify_diversity(&inst, &beta_grid(4, 0.01)).unwrap();
        assert_eq!(r.betas.len(), 101);
        assert!(r.monotone);
        assert!(r.slope_bound_holds);
        assert!(r.closed_form_error < 1e-12);
        // at beta = C - 1 all regularised gradients coincide
        let top = lambda_of_beta(&inst, 3.0).unwrap();
        assert!((top - lambda_closed_form(&inst, 3.0).unwrap()).abs() < 1e-12);
        assert!((top - 1.0).abs() < 1e-12);
        assert!(verify_diversity(&inst, &[2.0]).is_err());
    }

    #[test]
    fn analytical_slope_matches_finite_difference() {
        let inst = DiversityInstance::cyclic(&[0.5, 0.3, 0.15, 0.05, 0.0], 2).unwrap();
        for b in [0.0, 0.4, 1.2] {
            let fd = (lambda_closed_form(&inst, b + 1e-6).unwrap() - lambda_closed_form(&inst, b - 1e-6).unwrap()) / 2e-6;
            assert!((fd - lambda_slope(&inst, b)).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_logits_vanish() {
        let z = vec![vec![0.3, -1.0, 2.0], vec![1.0, 1.0, 0.0], vec![0.0, 0.5, -0.5]];
        let inst = DecompositionInstance::new(z.clone(), z, vec![0, 1, 2], 3, 1.0).unwrap();
        let kl = decompose_kl(&inst).unwrap();
        assert_eq!((kl.true_direct, kl.not_true_direct), (0.0, 0.0));
        assert_eq!(verify_decomposition_mse(&inst), 0.0);
        assert!(matches!(
            DecompositionInstance::new(vec![vec![0.0, 0.0]], vec![vec![0.0, 0.0]], vec![0], 2, 1.0),
            Err(Error::MissingClass { class: 1 })
        ));
    }

    #[test]
    fn mse_decomposition_hand_example() {
        // d = z_l - z_g: sample 0 (y=0) gaps [1, 2], sample 1 (y=1) gaps [3, -1]
        let inst = DecompositionInstance::new(
            vec![vec![1.0, 2.0], vec![3.0, 0.0]],
            vec![vec![0.0, 0.0], vec![0.0, 1.0]],
            vec![0, 1],
            2,
            1.0,
        )
        .unwrap();
        let d = decompose_mse(&inst);
        // true: (1 + 1) / 2; not-true: (4 + 9) / (2 * 1)
        assert_eq!(d.true_direct, 1.0);
        assert_eq!(d.true_weighted, 1.0);
        assert_eq!(d.not_true_direct, 6.5);
        assert_eq!(d.not_true_weighted, 6.5);
    }

    #[test]
    fn minimax_two_class_vertices() {
        let r = verify_minimax(&SymmetricFamily::vertices(2), 2, 0.02).unwrap();
        assert_eq!(r.argmin.len(), 2);
        assert!((r.argmin[0] - 0.5).abs() < 1e-12);
        assert!(r.is_uniform && r.uniform_dominates);
        assert!(r.symmetry_error < 1e-12);
        assert!(verify_minimax(&SymmetricFamily::vertices(5), 5, 0.02).is_err());
        assert!(verify_minimax(&SymmetricFamily::vertices(2), 2, 0.1).is_err());
    }

    #[test]
    fn grid_and_permutations() {
        assert_eq!(simplex_grid(3, 2).len(), 6);
        assert_eq!(simplex_grid(4, 20).len(), 1771);
        assert_eq!(permutations(3).len(), 6);
        assert_eq!(SymmetricFamily::permutations_of(&[0.5, 0.3, 0.2]).atoms.len(), 6);
        assert_eq!(beta_grid(4, 0.5), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn smoothness_quadratic_is_tight() {
        let v = verify_smoothness_bound(2.0, 4, 50, 3).unwrap();
        assert!(v.abs() <= 1e-9);
        let q = verify_smoothness_bound_quartic(2.0, 0.1, 4, 50, 3).unwrap();
        assert!(q <= 0.0);
    }
}
