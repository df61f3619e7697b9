//! DP-SGD optimization and the RDP privacy accountant.
//!
//! Per-example gradients are clipped to L2 norm C, summed in index order,
//! and a single Gaussian draw of scale sigma*C is added per optimizer step
//! (after gradient accumulation), so the step result is independent of
//! worker count. The accountant tracks the subsampled Gaussian mechanism in
//! Renyi DP: closed binomial form at integer orders, numerical quadrature
//! at fractional orders, classic conversion
//! eps = min_alpha [T * rdp(alpha) + ln(1/delta)/(alpha-1)].
//!
//! Batches are shuffled fixed-size (sampling rate q = B/n in the
//! accountant), the standard practical deployment; true Poisson subsampling
//! is not used, which makes the reported epsilon conservative with respect
//! to batch-shape reproducibility.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::rng::Stream;

#[derive(Debug, Error)]
pub enum DpError {
    #[error("invalid DP config: {0}")]
    InvalidConfig(String),
    #[error("non-finite gradient entry at coordinate {coord}")]
    NonFiniteGradient { coord: usize },
    #[error("sigma = 0 yields infinite epsilon")]
    InfiniteEpsilon,
    #[error("composed delta {0} is not below 1")]
    DeltaOverflow(f64),
    #[error(
        "target epsilon {target} unreachable in sigma bracket [{lo}, {hi}]: eps({lo}) = {eps_lo}, eps({hi}) = {eps_hi}"
    )]
    CalibrationOutOfBracket {
        target: f64,
        lo: f64,
        hi: f64,
        eps_lo: f64,
        eps_hi: f64,
    },
    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },
    #[error("example {index}: {message}")]
    Objective { index: usize, message: String },
}

// ---------------------------------------------------------------------------
// Budgets
// ---------------------------------------------------------------------------

/// An (epsilon, delta) pair. `epsilon` may be infinite for non-private
/// (sigma = 0) training; it serializes as the string "infinite" so reports
/// stay valid JSON.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    #[serde(with = "eps_serde")]
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub const ZERO: PrivacyBudget = PrivacyBudget {
        epsilon: 0.0,
        delta: 0.0,
    };

    pub fn new(epsilon: f64, delta: f64) -> PrivacyBudget {
        PrivacyBudget { epsilon, delta }
    }
}

mod eps_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Eps {
        Finite(f64),
        Tag(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            Eps::Finite(*v).serialize(s)
        } else {
            Eps::Tag("infinite".into()).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Eps::deserialize(d)? {
            Eps::Finite(v) => Ok(v),
            Eps::Tag(t) if t == "infinite" => Ok(f64::INFINITY),
            Eps::Tag(t) => Err(serde::de::Error::custom(format!("bad epsilon: {t}"))),
        }
    }
}

/// Sequential composition: budgets add in both components.
pub fn compose(a: PrivacyBudget, b: PrivacyBudget) -> Result<PrivacyBudget, DpError> {
    let delta = a.delta + b.delta;
    if delta >= 1.0 {
        return Err(DpError::DeltaOverflow(delta));
    }
    Ok(PrivacyBudget::new(a.epsilon + b.epsilon, delta))
}

// ---------------------------------------------------------------------------
// RDP accountant
// ---------------------------------------------------------------------------

/// Bookkeeping for the subsampled Gaussian mechanism.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccountantState {
    /// Sampling rate q = effective_batch / dataset_size, in (0, 1].
    pub sample_rate: f64,
    /// Noise multiplier sigma > 0.
    pub noise_multiplier: f64,
    /// Number of optimizer steps.
    pub steps: usize,
    /// RDP order grid.
    pub orders: Vec<f64>,
}

/// Integer orders 2..=64 plus fractional fill-in near 1. Finer grids move
/// epsilon by under a percent.
pub fn standard_orders() -> Vec<f64> {
    let mut orders = vec![1.25, 1.5, 1.75];
    orders.extend((2..=64).map(f64::from));
    orders
}

impl AccountantState {
    pub fn new(sample_rate: f64, noise_multiplier: f64, steps: usize) -> AccountantState {
        assert!(
            sample_rate > 0.0 && sample_rate <= 1.0,
            "sample rate must be in (0, 1]"
        );
        AccountantState {
            sample_rate,
            noise_multiplier,
            steps,
            orders: standard_orders(),
        }
    }
}

fn ln_factorial_table(n: usize) -> Vec<f64> {
    let mut t = vec![0.0; n + 1];
    for i in 1..=n {
        t[i] = t[i - 1] + (i as f64).ln();
    }
    t
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + terms.iter().map(|&t| (t - max).exp()).sum::<f64>().ln()
}

/// RDP of one subsampled-Gaussian step at integer order alpha:
/// (1/(alpha-1)) * ln sum_k C(alpha,k) (1-q)^(alpha-k) q^k e^{k(k-1)/(2 sigma^2)}.
fn rdp_integer(q: f64, sigma: f64, alpha: u64) -> f64 {
    debug_assert!(alpha >= 2);
    if q >= 1.0 {
        return alpha as f64 / (2.0 * sigma * sigma);
    }
    let lnf = ln_factorial_table(alpha as usize);
    let ln_q = q.ln();
    let ln_1mq = (1.0 - q).ln();
    let terms: Vec<f64> = (0..=alpha)
        .map(|k| {
            let kf = k as f64;
            let ln_binom =
                lnf[alpha as usize] - lnf[k as usize] - lnf[(alpha - k) as usize];
            ln_binom
                + (alpha - k) as f64 * ln_1mq
                + kf * ln_q
                + kf * (kf - 1.0) / (2.0 * sigma * sigma)
        })
        .collect();
    log_sum_exp(&terms) / (alpha as f64 - 1.0)
}

/// ln((1-q) + q * e^u), stable for large |u|.
fn ln_mix(q: f64, u: f64) -> f64 {
    let a = (1.0 - q).ln();
    let b = q.ln() + u;
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// RDP at non-integer order via quadrature of
/// E_{t~N(0,1)}[ ((1-q) + q e^{(2 sigma t - 1)/(2 sigma^2)})^alpha ]
/// to relative tolerance 1e-6.
fn rdp_quadrature(q: f64, sigma: f64, alpha: f64) -> f64 {
    if q >= 1.0 {
        return alpha / (2.0 * sigma * sigma);
    }
    let ln_integrand = |t: f64| -> f64 {
        let u = (2.0 * sigma * t - 1.0) / (2.0 * sigma * sigma);
        -0.5 * t * t - 0.5 * (2.0 * std::f64::consts::PI).ln() + alpha * ln_mix(q, u)
    };
    // The exponential tilt peaks near t = alpha/sigma; pad generously.
    let lo = -40.0;
    let hi = alpha / sigma + 40.0;

    let simpson = |n: usize| -> f64 {
        // ln of the composite Simpson estimate, computed in shifted space.
        let h = (hi - lo) / n as f64;
        let mut lns = Vec::with_capacity(n + 1);
        let mut weights = Vec::with_capacity(n + 1);
        for i in 0..=n {
            lns.push(ln_integrand(lo + i as f64 * h));
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            weights.push(w);
        }
        let max = lns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = lns
            .iter()
            .zip(&weights)
            .map(|(&l, &w)| w * (l - max).exp())
            .sum();
        max + (sum * h / 3.0).ln()
    };

    let mut n = 512;
    let mut prev = simpson(n) / (alpha - 1.0);
    loop {
        n *= 2;
        let next = simpson(n) / (alpha - 1.0);
        if (next - prev).abs() <= 1e-6 * next.abs().max(1e-12) || n >= 1 << 20 {
            return next;
        }
        prev = next;
    }
}

/// Per-step RDP of the subsampled Gaussian at order `alpha`. Exactly
/// alpha/(2 sigma^2) when q = 1.
pub fn rdp_subsampled_gaussian(q: f64, sigma: f64, alpha: f64) -> f64 {
    assert!(sigma > 0.0, "sigma must be positive");
    assert!(alpha > 1.0, "order must exceed 1");
    if q >= 1.0 {
        return alpha / (2.0 * sigma * sigma);
    }
    if alpha.fract() == 0.0 && alpha <= u64::MAX as f64 {
        rdp_integer(q, sigma, alpha as u64)
    } else {
        rdp_quadrature(q, sigma, alpha)
    }
}

/// Convert accumulated RDP to (epsilon, delta)-DP:
/// eps = min_alpha [steps * rdp(alpha) + ln(1/delta)/(alpha-1)].
pub fn rdp_epsilon(state: &AccountantState, delta: f64) -> Result<f64, DpError> {
    if state.noise_multiplier <= 0.0 {
        return Err(DpError::InfiniteEpsilon);
    }
    assert!(delta > 0.0 && delta < 1.0, "delta must be in (0, 1)");
    if state.steps == 0 {
        return Ok(0.0);
    }
    let ln_inv_delta = (1.0 / delta).ln();
    let eps = state
        .orders
        .iter()
        .map(|&alpha| {
            state.steps as f64
                * rdp_subsampled_gaussian(state.sample_rate, state.noise_multiplier, alpha)
                + ln_inv_delta / (alpha - 1.0)
        })
        .fold(f64::INFINITY, f64::min);
    Ok(eps)
}

const SIGMA_BRACKET: (f64, f64) = (0.1, 100.0);

/// Find sigma whose epsilon lands in [0.99 * target, target] by bisection
/// over sigma in [0.1, 100].
pub fn calibrate_sigma(
    target: &PrivacyBudget,
    sample_rate: f64,
    steps: usize,
) -> Result<f64, DpError> {
    assert!(target.epsilon > 0.0, "target epsilon must be positive");
    let (mut lo, mut hi) = SIGMA_BRACKET;
    let eps_at = |sigma: f64| -> Result<f64, DpError> {
        rdp_epsilon(&AccountantState::new(sample_rate, sigma, steps), target.delta)
    };
    let eps_lo = eps_at(lo)?;
    let eps_hi = eps_at(hi)?;
    // Epsilon decreases in sigma: need eps_hi <= target <= eps_lo.
    if target.epsilon > eps_lo || target.epsilon < eps_hi {
        return Err(DpError::CalibrationOutOfBracket {
            target: target.epsilon,
            lo,
            hi,
            eps_lo,
            eps_hi,
        });
    }
    for _ in 0..200 {
        let eps_hi_side = eps_at(hi)?;
        if eps_hi_side >= 0.99 * target.epsilon && eps_hi_side <= target.epsilon {
            return Ok(hi);
        }
        let mid = 0.5 * (lo + hi);
        if eps_at(mid)? > target.epsilon {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(DpError::InvalidConfig(
        "sigma bisection failed to converge".into(),
    ))
}

// ---------------------------------------------------------------------------
// Clipping and the optimizer step
// ---------------------------------------------------------------------------

/// Scale `g` by min(1, C / ||g||_2) over the whole flattened bundle.
/// Returns the clipped gradient and its (post-clip) norm.
pub fn clip_with_norm(g: &[f64], clip_norm: f64) -> Result<(Vec<f64>, f64), DpError> {
    assert!(clip_norm > 0.0, "clip norm must be positive");
    let mut sq = 0.0;
    for (i, &x) in g.iter().enumerate() {
        if !x.is_finite() {
            return Err(DpError::NonFiniteGradient { coord: i });
        }
        sq += x * x;
    }
    let norm = sq.sqrt();
    if norm <= clip_norm {
        Ok((g.to_vec(), norm))
    } else {
        let scale = clip_norm / norm;
        Ok((g.iter().map(|x| x * scale).collect(), clip_norm))
    }
}

pub fn clip(g: &[f64], clip_norm: f64) -> Result<Vec<f64>, DpError> {
    clip_with_norm(g, clip_norm).map(|(c, _)| c)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DpConfig {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub freeze_embedding: bool,
    pub seed: u64,
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig {
            clip_norm: 1.0,
            noise_multiplier: 1.0,
            batch_size: 4,
            grad_accum: 16,
            epochs: 3,
            learning_rate: 0.5,
            freeze_embedding: true,
            seed: 0,
        }
    }
}

impl DpConfig {
    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accum
    }

    pub fn validate(&self, dataset_size: usize) -> Result<(), DpError> {
        if self.clip_norm <= 0.0 {
            return Err(DpError::InvalidConfig("clip_norm must be positive".into()));
        }
        if self.noise_multiplier < 0.0 {
            return Err(DpError::InvalidConfig(
                "noise_multiplier must be non-negative".into(),
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err(DpError::InvalidConfig(
                "learning_rate must be positive".into(),
            ));
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return Err(DpError::InvalidConfig(
                "batch_size and grad_accum must be positive".into(),
            ));
        }
        if self.effective_batch() > dataset_size {
            return Err(DpError::InvalidConfig(format!(
                "effective batch {} exceeds dataset size {dataset_size}",
                self.effective_batch()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub theta: Vec<f64>,
    pub clipped_norms: Vec<f64>,
}

/// One DP-SGD step:
/// theta' = theta - lr * (1/B) (sum_i clip(g_i, C) + z), z ~ N(0, sigma^2 C^2 I).
/// With `freeze_embedding` the first `embed_len` coordinates of the update
/// are zeroed after noising.
pub fn dp_sgd_step(
    theta: &[f64],
    per_example_grads: &[Vec<f64>],
    cfg: &DpConfig,
    noise: &mut Stream,
    embed_len: usize,
) -> Result<StepOutcome, DpError> {
    assert!(!per_example_grads.is_empty(), "need at least one gradient");
    let b = per_example_grads.len() as f64;
    let mut sum = vec![0.0; theta.len()];
    let mut clipped_norms = Vec::with_capacity(per_example_grads.len());
    for g in per_example_grads {
        let (clipped, norm) = clip_with_norm(g, cfg.clip_norm)?;
        clipped_norms.push(norm);
        for (s, c) in sum.iter_mut().zip(&clipped) {
            *s += c;
        }
    }
    if cfg.noise_multiplier > 0.0 {
        let scale = cfg.noise_multiplier * cfg.clip_norm;
        for s in sum.iter_mut() {
            *s += scale * noise.gaussian();
        }
    }
    let frozen = if cfg.freeze_embedding { embed_len } else { 0 };
    let mut new_theta = theta.to_vec();
    for (i, (t, s)) in new_theta.iter_mut().zip(&sum).enumerate() {
        if i < frozen {
            continue;
        }
        *t -= cfg.learning_rate * s / b;
    }
    Ok(StepOutcome {
        theta: new_theta,
        clipped_norms,
    })
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Loss families the DP trainer runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    LmNll,
    BtPairwise,
}

/// A per-example differentiable objective. The example is the unit of
/// clipping and of the privacy guarantee.
pub trait DpObjective: Sync {
    fn num_examples(&self) -> usize;
    /// Flat gradient and loss for one example at the given parameters.
    fn example_grad_loss(&self, theta: &[f64], index: usize) -> Result<(Vec<f64>, f64), DpError>;
}

#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: usize,
    /// Mean per-example loss before clipping.
    pub loss: f64,
    pub mean_clipped_norm: f64,
    #[serde(with = "eps_serde")]
    pub epsilon_so_far: f64,
    /// Per-example post-clip norms; the clip contract checks every one.
    #[serde(skip)]
    pub clipped_norms: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub theta: Vec<f64>,
    pub spent: PrivacyBudget,
    pub history: Vec<StepRecord>,
    pub accountant: Option<AccountantState>,
}

/// Run DP-SGD over shuffled fixed-size batches for `cfg.epochs` epochs.
/// `delta` is the reporting delta for the spent budget.
pub fn train_dp(
    theta0: Vec<f64>,
    objective: &impl DpObjective,
    cfg: &DpConfig,
    delta: f64,
    embed_len: usize,
) -> Result<TrainOutcome, DpError> {
    let n = objective.num_examples();
    if n == 0 {
        return Err(DpError::InvalidConfig("empty training set".into()));
    }
    cfg.validate(n)?;
    let effective = cfg.effective_batch();
    let steps_per_epoch = n.div_ceil(effective);
    let total_steps = steps_per_epoch * cfg.epochs;
    let sample_rate = effective as f64 / n as f64;

    if total_steps == 0 {
        return Ok(TrainOutcome {
            theta: theta0,
            spent: PrivacyBudget::ZERO,
            history: Vec::new(),
            accountant: None,
        });
    }

    // Per-step RDP is constant across steps; precompute it per order so the
    // running epsilon is cheap to log.
    let orders = standard_orders();
    let per_step_rdp: Option<Vec<f64>> = (cfg.noise_multiplier > 0.0).then(|| {
        orders
            .iter()
            .map(|&a| rdp_subsampled_gaussian(sample_rate, cfg.noise_multiplier, a))
            .collect()
    });
    let eps_after = |steps: usize| -> f64 {
        match &per_step_rdp {
            None => f64::INFINITY,
            Some(rdp) => {
                let ln_inv_delta = (1.0 / delta).ln();
                orders
                    .iter()
                    .zip(rdp)
                    .map(|(&a, &r)| steps as f64 * r + ln_inv_delta / (a - 1.0))
                    .fold(f64::INFINITY, f64::min)
            }
        }
    };

    let mut theta = theta0;
    let mut history = Vec::with_capacity(total_steps);
    let mut step_index = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        Stream::derived(cfg.seed, "dp_shuffle", epoch as u64).shuffle(&mut order);
        for chunk in order.chunks(effective) {
            let theta_ref = &theta;
            let results = exec::map_indexed(chunk.len(), |i| {
                objective.example_grad_loss(theta_ref, chunk[i])
            });
            let mut grads = Vec::with_capacity(chunk.len());
            let mut loss_sum = 0.0;
            for r in results {
                let (g, l) = r?;
                loss_sum += l;
                grads.push(g);
            }
            let mean_loss = loss_sum / chunk.len() as f64;
            if !mean_loss.is_finite() {
                return Err(DpError::Diverged { step: step_index });
            }
            let mut noise = Stream::derived(cfg.seed, "dp_noise", step_index as u64);
            let outcome = dp_sgd_step(&theta, &grads, cfg, &mut noise, embed_len)?;
            theta = outcome.theta;
            let mean_norm = outcome.clipped_norms.iter().sum::<f64>()
                / outcome.clipped_norms.len() as f64;
            history.push(StepRecord {
                step: step_index,
                loss: mean_loss,
                mean_clipped_norm: mean_norm,
                epsilon_so_far: eps_after(step_index + 1),
                clipped_norms: outcome.clipped_norms,
            });
            step_index += 1;
        }
    }

    let spent = PrivacyBudget::new(eps_after(total_steps), delta);
    Ok(TrainOutcome {
        theta,
        spent,
        history,
        accountant: Some(AccountantState::new(
            sample_rate,
            cfg.noise_multiplier,
            total_steps,
        )),
    })
}

/// Serialize a training history as JSON Lines
/// (step, loss, mean_clipped_norm, epsilon_so_far).
pub fn history_jsonl(history: &[StepRecord]) -> String {
    let mut out = String::new();
    for rec in history {
        out.push_str(&serde_json::to_string(rec).expect("history serializes"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn clip_examples() {
        let (c, n) = clip_with_norm(&[3.0, 4.0], 10.0).unwrap();
        assert_eq!(c, vec![3.0, 4.0]);
        assert!((n - 5.0).abs() < 1e-12);

        let (c, n) = clip_with_norm(&[3.0, 4.0], 1.0).unwrap();
        assert!((c[0] - 0.6).abs() < 1e-12 && (c[1] - 0.8).abs() < 1e-12);
        assert!((n - 1.0).abs() < 1e-12);

        let (c, _) = clip_with_norm(&[0.0, 0.0], 1.0).unwrap();
        assert_eq!(c, vec![0.0, 0.0]);

        assert!(matches!(
            clip(&[1.0, f64::NAN], 1.0),
            Err(DpError::NonFiniteGradient { coord: 1 })
        ));
    }

    #[test]
    fn noiseless_step_is_plain_averaged_sgd() {
        let cfg = DpConfig {
            noise_multiplier: 0.0,
            clip_norm: 100.0,
            learning_rate: 0.1,
            freeze_embedding: false,
            ..DpConfig::default()
        };
        let theta = vec![1.0, 2.0];
        let grads = vec![vec![0.2, -0.4], vec![0.6, 0.0]];
        let mut noise = Stream::new(0);
        let out = dp_sgd_step(&theta, &grads, &cfg, &mut noise, 0).unwrap();
        // mean grad = (0.4, -0.2)
        assert!((out.theta[0] - (1.0 - 0.1 * 0.4)).abs() < 1e-15);
        assert!((out.theta[1] - (2.0 + 0.1 * 0.2)).abs() < 1e-15);
    }

    #[test]
    fn step_is_deterministic_per_seed() {
        let cfg = DpConfig {
            noise_multiplier: 1.5,
            freeze_embedding: false,
            ..DpConfig::default()
        };
        let theta = vec![0.0; 16];
        let grads = vec![vec![0.1; 16]; 4];
        let a = dp_sgd_step(&theta, &grads, &cfg, &mut Stream::new(7), 0).unwrap();
        let b = dp_sgd_step(&theta, &grads, &cfg, &mut Stream::new(7), 0).unwrap();
        assert_eq!(a.theta, b.theta);
        let c = dp_sgd_step(&theta, &grads, &cfg, &mut Stream::new(8), 0).unwrap();
        assert_ne!(a.theta, c.theta);
    }

    #[test]
    fn freeze_embedding_zeroes_leading_update() {
        let cfg = DpConfig {
            noise_multiplier: 1.0,
            freeze_embedding: true,
            ..DpConfig::default()
        };
        let theta = vec![5.0; 8];
        let grads = vec![vec![0.3; 8]];
        let out = dp_sgd_step(&theta, &grads, &cfg, &mut Stream::new(1), 3).unwrap();
        assert_eq!(&out.theta[..3], &[5.0, 5.0, 5.0]);
        assert!(out.theta[3..].iter().all(|&t| t != 5.0));
    }

    #[test]
    fn noise_std_matches_sigma_c_over_b() {
        // With zero gradients the update is exactly (1/B) z per coordinate,
        // so its std must be sigma * C / B.
        let cfg = DpConfig {
            clip_norm: 2.0,
            noise_multiplier: 1.5,
            learning_rate: 1.0,
            freeze_embedding: false,
            ..DpConfig::default()
        };
        let b = 4usize;
        let theta = vec![0.0; 1];
        let grads = vec![vec![0.0]; b];
        let n = 10_000;
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let mut noise = Stream::new(i as u64);
            let out = dp_sgd_step(&theta, &grads, &cfg, &mut noise, 0).unwrap();
            samples.push(out.theta[0]);
        }
        let mean: f64 = samples.iter().sum::<f64>() / n as f64;
        let var: f64 =
            samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let expected = cfg.noise_multiplier * cfg.clip_norm / b as f64;
        let rel = (var.sqrt() - expected).abs() / expected;
        assert!(rel < 0.05, "std {} vs expected {expected}", var.sqrt());
    }

    #[test]
    fn epsilon_matches_closed_form_grid_minimization_at_q1() {
        // Independent route: evaluate alpha/(2 sigma^2) + ln(1/delta)/(alpha-1)
        // over the same documented grid and take the minimum directly.
        let delta = 1e-5;
        for &sigma in &[1.0, 2.0, 4.0] {
            let state = AccountantState::new(1.0, sigma, 1);
            let eps = rdp_epsilon(&state, delta).unwrap();
            let oracle = standard_orders()
                .iter()
                .map(|&a| a / (2.0 * sigma * sigma) + (1.0 / delta).ln() / (a - 1.0))
                .fold(f64::INFINITY, f64::min);
            assert!(
                (eps - oracle).abs() < 1e-9,
                "sigma {sigma}: {eps} vs {oracle}"
            );
        }
    }

    #[test]
    fn epsilon_strictly_decreases_as_sigma_doubles() {
        let delta = 1e-5;
        let eps: Vec<f64> = [0.5, 1.0, 2.0, 4.0, 8.0]
            .iter()
            .map(|&s| rdp_epsilon(&AccountantState::new(0.1, s, 100), delta).unwrap())
            .collect();
        for w in eps.windows(2) {
            assert!(w[1] < w[0], "{eps:?}");
        }
    }

    #[test]
    fn doubling_steps_never_decreases_epsilon() {
        let delta = 1e-5;
        for &steps in &[1usize, 5, 50, 500] {
            let e1 = rdp_epsilon(&AccountantState::new(0.2, 1.3, steps), delta).unwrap();
            let e2 = rdp_epsilon(&AccountantState::new(0.2, 1.3, steps * 2), delta).unwrap();
            assert!(e2 >= e1);
        }
    }

    #[test]
    fn sigma_zero_is_infinite_epsilon() {
        let state = AccountantState {
            sample_rate: 0.5,
            noise_multiplier: 0.0,
            steps: 10,
            orders: standard_orders(),
        };
        assert!(matches!(
            rdp_epsilon(&state, 1e-5),
            Err(DpError::InfiniteEpsilon)
        ));
    }

    #[test]
    fn quadrature_agrees_with_binomial_form_at_integer_orders() {
        for &(q, sigma) in &[(0.05, 1.0), (0.3, 0.8), (0.9, 2.5)] {
            for alpha in [2u64, 3, 5, 8] {
                let exact = rdp_integer(q, sigma, alpha);
                let quad = rdp_quadrature(q, sigma, alpha as f64);
                let rel = (exact - quad).abs() / exact.abs().max(1e-12);
                assert!(
                    rel < 1e-5,
                    "q={q} sigma={sigma} alpha={alpha}: {exact} vs {quad}"
                );
            }
        }
    }

    #[test]
    fn calibration_round_trip_lands_in_band() {
        let target = PrivacyBudget::new(8.0, 1e-5);
        let sigma = calibrate_sigma(&target, 0.25, 12).unwrap();
        let eps = rdp_epsilon(&AccountantState::new(0.25, sigma, 12), 1e-5).unwrap();
        assert!((0.99 * 8.0..=8.0).contains(&eps), "eps {eps} sigma {sigma}");

        // Tighter target needs strictly more noise.
        let sigma_tight = calibrate_sigma(&PrivacyBudget::new(2.0, 1e-5), 0.25, 12).unwrap();
        assert!(sigma_tight > sigma);
    }

    #[test]
    fn calibration_reports_bracket_when_unreachable() {
        let err = calibrate_sigma(&PrivacyBudget::new(1e9, 1e-5), 1.0, 10_000).unwrap_err();
        match err {
            DpError::CalibrationOutOfBracket { eps_lo, eps_hi, .. } => {
                assert!(eps_lo > eps_hi);
            }
            other => panic!("unexpected: {other}"),
        }
    }

    #[test]
    fn compose_matches_sequential_law() {
        let a = PrivacyBudget::new(8.0, 1e-5);
        let total = compose(a, a).unwrap();
        assert_eq!(total.epsilon, 16.0);
        assert_eq!(total.delta, 2e-5);

        let b = PrivacyBudget::new(0.0, 1e-9);
        let c = compose(a, b).unwrap();
        assert_eq!(c.epsilon, 8.0);
        assert_eq!(compose(a, b).unwrap(), compose(b, a).unwrap());

        assert!(matches!(
            compose(PrivacyBudget::new(1.0, 0.6), PrivacyBudget::new(1.0, 0.5)),
            Err(DpError::DeltaOverflow(_))
        ));
    }

    #[test]
    fn compose_is_commutative_and_associative() {
        let a = PrivacyBudget::new(3.25, 1e-6);
        let b = PrivacyBudget::new(0.5, 2e-7);
        let c = PrivacyBudget::new(7.0, 5e-6);
        // Commutativity is exact in IEEE-754 addition.
        assert_eq!(compose(a, b).unwrap(), compose(b, a).unwrap());
        // Associativity holds mathematically; floating point keeps it
        // within rounding.
        let left = compose(compose(a, b).unwrap(), c).unwrap();
        let right = compose(a, compose(b, c).unwrap()).unwrap();
        assert!((left.epsilon - right.epsilon).abs() < 1e-12);
        assert!((left.delta - right.delta).abs() < 1e-18);
    }

    #[test]
    fn budget_epsilon_serializes_infinite_as_tag() {
        let b = PrivacyBudget::new(f64::INFINITY, 1e-5);
        let s = serde_json::to_string(&b).unwrap();
        assert!(s.contains("infinite"));
        let back: PrivacyBudget = serde_json::from_str(&s).unwrap();
        assert!(back.epsilon.is_infinite());
    }

    // Quadratic toy objective: per-example loss 0.5 * ||theta - target_i||^2.
    struct Quadratic {
        targets: Vec<Vec<f64>>,
    }

    impl DpObjective for Quadratic {
        fn num_examples(&self) -> usize {
            self.targets.len()
        }
        fn example_grad_loss(
            &self,
            theta: &[f64],
            index: usize,
        ) -> Result<(Vec<f64>, f64), DpError> {
            let t = &self.targets[index];
            let grad: Vec<f64> = theta.iter().zip(t).map(|(a, b)| a - b).collect();
            let loss = 0.5 * grad.iter().map(|g| g * g).sum::<f64>();
            Ok((grad, loss))
        }
    }

    fn quad_objective(n: usize) -> Quadratic {
        // Targets centered away from the zero start point so descent from
        // theta = 0 is genuine.
        let offset = [2.0, -1.5, 1.0];
        let mut stream = Stream::new(5);
        Quadratic {
            targets: (0..n)
                .map(|_| {
                    offset
                        .iter()
                        .map(|o| o + stream.uniform() * 0.4 - 0.2)
                        .collect()
                })
                .collect(),
        }
    }

    #[test]
    fn train_dp_zero_epochs_is_identity_with_zero_spent() {
        let obj = quad_objective(16);
        let cfg = DpConfig {
            epochs: 0,
            batch_size: 4,
            grad_accum: 2,
            ..DpConfig::default()
        };
        let out = train_dp(vec![1.0, 2.0, 3.0], &obj, &cfg, 1e-5, 0).unwrap();
        assert_eq!(out.theta, vec![1.0, 2.0, 3.0]);
        assert_eq!(out.spent, PrivacyBudget::ZERO);
        assert!(out.history.is_empty());
    }

    #[test]
    fn train_dp_noiseless_loss_decreases_and_is_deterministic() {
        let obj = quad_objective(32);
        let cfg = DpConfig {
            epochs: 3,
            batch_size: 4,
            grad_accum: 2,
            noise_multiplier: 0.0,
            clip_norm: 1e6,
            learning_rate: 0.05,
            freeze_embedding: false,
            seed: 9,
        };
        let out = train_dp(vec![0.0; 3], &obj, &cfg, 1e-5, 0).unwrap();
        let per_epoch: Vec<f64> = out
            .history
            .chunks(32 / 8)
            .map(|c| c.iter().map(|r| r.loss).sum::<f64>() / c.len() as f64)
            .collect();
        for w in per_epoch.windows(2) {
            assert!(w[1] < w[0], "epoch losses {per_epoch:?}");
        }
        // Non-private run reports infinite epsilon.
        assert!(out.spent.epsilon.is_infinite());

        let again = train_dp(vec![0.0; 3], &obj, &cfg, 1e-5, 0).unwrap();
        assert_eq!(out.theta, again.theta);
    }

    #[test]
    fn train_dp_clip_contract_holds_everywhere() {
        let obj = quad_objective(24);
        let cfg = DpConfig {
            epochs: 4,
            batch_size: 2,
            grad_accum: 3,
            noise_multiplier: 1.2,
            clip_norm: 0.05,
            learning_rate: 0.1,
            freeze_embedding: false,
            seed: 3,
        };
        let out = train_dp(vec![0.0; 3], &obj, &cfg, 1e-5, 0).unwrap();
        assert!(!out.history.is_empty());
        for rec in &out.history {
            for &n in &rec.clipped_norms {
                assert!(n <= cfg.clip_norm + 1e-12);
            }
            assert!(rec.mean_clipped_norm <= cfg.clip_norm + 1e-12);
            assert!(rec.epsilon_so_far.is_finite());
        }
        // Epsilon log is nondecreasing.
        for w in out.history.windows(2) {
            assert!(w[1].epsilon_so_far >= w[0].epsilon_so_far);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn prop_clip_norm_bounded(
            g in prop::collection::vec(-50.0f64..50.0, 1..40),
            c in 0.01f64..10.0,
        ) {
            let (clipped, norm) = clip_with_norm(&g, c).unwrap();
            let actual: f64 = clipped.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!(actual <= c + 1e-12);
            prop_assert!((actual - norm).abs() < 1e-9);
        }

        #[test]
        fn prop_accountant_monotone(
            q in 0.01f64..1.0,
            sigma in 0.3f64..8.0,
            steps in 1usize..400,
            bump in 1.01f64..2.0,
        ) {
            let delta = 1e-5;
            let base = rdp_epsilon(&AccountantState::new(q, sigma, steps), delta).unwrap();
            // Slack covers the 1e-6 relative tolerance of the
            // fractional-order quadrature.
            let slack = 1e-6 * base.abs().max(1.0);
            // Nonincreasing in sigma.
            let more_noise =
                rdp_epsilon(&AccountantState::new(q, sigma * bump, steps), delta).unwrap();
            prop_assert!(more_noise <= base + slack);
            // Nondecreasing in steps.
            let more_steps =
                rdp_epsilon(&AccountantState::new(q, sigma, steps + 7), delta).unwrap();
            prop_assert!(more_steps >= base - slack);
            // Nondecreasing in q.
            let q2 = (q * bump).min(1.0);
            let more_q = rdp_epsilon(&AccountantState::new(q2, sigma, steps), delta).unwrap();
            prop_assert!(more_q >= base - slack);
        }
    }
}
