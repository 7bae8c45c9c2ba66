//! Private training with previous-step noise cancellation on small synthetic
//! tasks.
//!
//! Step `i` aggregates clipped per-example gradients `x_i` over its batch and
//! updates `theta_i = theta_{i-1} - (eta / B) (x_i + nu_i)`, where
//! `nu_i = zeta sigma (Z_i - lambda Z_{i-1})` comes from a [`NoiseStream`].
//! Batches per epoch are `m = N / B`; step `i` uses batch `(i - 1) mod m`, so
//! every epoch replays the same allocation.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::calibration::{
    amplified_multiplier_stub, gaussian_multiplier, CalibrationError, PrivacyBudget,
};
use crate::matrix::{make_c_lambda, MatrixError};
use crate::noise::{NoiseError, NoiseMode, NoiseStream, NoiseStreamConfig};
use crate::sensitivity::{sens_c_lambda_closed, SensitivityError};

const STREAM_THETA0: u64 = 1;
const STREAM_BATCHING: u64 = 2;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at step {step}: non-finite gradient or parameter")]
    Diverged { step: usize },
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Sensitivity(#[from] SensitivityError),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error("trace export failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace export failed: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Linreg,
    Logreg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub dim: usize,
    pub dataset_size: usize,
    /// Standard deviation of label noise (linreg) or of the logit perturbation
    /// before thresholding (logreg).
    #[serde(default = "default_label_noise")]
    pub label_noise: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_label_noise() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Theta0Spec {
    #[default]
    Zeros,
    Gaussian { std: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Batching {
    #[default]
    BallsInBins,
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Amplification {
    #[default]
    None,
    Bnb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: TaskSpec,
    #[serde(default)]
    pub theta0: Theta0Spec,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub learning_rate: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub iterations: usize,
    pub budget: PrivacyBudget,
    #[serde(default)]
    pub batching: Batching,
    #[serde(default)]
    pub amplification: Amplification,
    /// Replaces the calibrated multiplier `sigma_{eps,delta}`; `0` disables noise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_override: Option<f64>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn batches_per_epoch(&self) -> usize {
        self.task.dataset_size / self.batch_size
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        let t = &self.task;
        if t.dim == 0 || t.dataset_size == 0 {
            return bad("task dim and dataset_size must be positive".into());
        }
        if !(t.label_noise >= 0.0 && t.label_noise.is_finite()) {
            return bad(format!("label_noise must be non-negative, got {}", t.label_noise));
        }
        if self.batch_size == 0 || self.batch_size > t.dataset_size {
            return bad(format!(
                "batch_size must be in 1..={}, got {}",
                t.dataset_size, self.batch_size
            ));
        }
        if !t.dataset_size.is_multiple_of(self.batch_size) {
            return bad(format!(
                "dataset_size {} is not divisible by batch_size {}",
                t.dataset_size, self.batch_size
            ));
        }
        if self.epochs == 0 || self.iterations != self.epochs * self.batches_per_epoch() {
            return bad(format!(
                "iterations must equal epochs * dataset_size / batch_size = {}, got {}",
                self.epochs * self.batches_per_epoch(),
                self.iterations
            ));
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.lambda) {
            return bad(format!("lambda must be in [0, 1), got {}", self.lambda));
        }
        if let Theta0Spec::Gaussian { std } = self.theta0 {
            if !(std >= 0.0 && std.is_finite()) {
                return bad(format!("theta0 std must be non-negative, got {std}"));
            }
        }
        if let Some(s) = self.sigma_override {
            if !(s >= 0.0 && s.is_finite()) {
                return bad(format!("sigma_override must be non-negative, got {s}"));
            }
        }
        Ok(())
    }

    /// Noise multiplier `sigma_{eps,delta}` before sensitivity scaling.
    pub fn sigma_multiplier(&self) -> Result<f64> {
        if let Some(s) = self.sigma_override {
            return Ok(s);
        }
        match self.amplification {
            Amplification::None => Ok(gaussian_multiplier(&self.budget)?),
            Amplification::Bnb => {
                let c = make_c_lambda(self.iterations, self.lambda)?;
                Ok(amplified_multiplier_stub(&self.budget, &c.into(), self.epochs)?)
            }
        }
    }

    /// `sens_{k,b}(C_lambda)` with `b = N / B`.
    pub fn sensitivity(&self) -> Result<f64> {
        Ok(sens_c_lambda_closed(
            self.iterations,
            self.epochs,
            self.batches_per_epoch(),
            self.lambda,
        )?)
    }

    /// Configuration of the stream that yields `nu_1, ..., nu_n`.
    pub fn noise_config(&self) -> Result<NoiseStreamConfig> {
        let sigma = self.sensitivity()? * self.sigma_multiplier()?;
        Ok(NoiseStreamConfig::new(
            NoiseMode::LambdaCancel {
                lambda: self.lambda,
            },
            self.task.dim,
            self.clip_norm * sigma,
            self.seed,
        )?)
    }
}

/// Synthetic supervised dataset with closed-form gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: TaskKind,
    pub features: Vec<Vec<f64>>,
    /// Real targets (linreg) or labels in {-1, +1} (logreg).
    pub targets: Vec<f64>,
    pub w_star: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean norm, rescaled so that large finite entries do not overflow.
fn norm(v: &[f64]) -> f64 {
    let s = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if s == 0.0 || !s.is_finite() {
        return s;
    }
    s * v.iter().map(|x| (x / s) * (x / s)).sum::<f64>().sqrt()
}

/// Numerically stable `log(1 + e^{-z})`.
fn softplus_neg(z: f64) -> f64 {
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.w_star.len()
    }

    pub fn example_loss(&self, theta: &[f64], j: usize) -> f64 {
        let z = dot(theta, &self.features[j]);
        let y = self.targets[j];
        match self.kind {
            TaskKind::Linreg => 0.5 * (z - y) * (z - y),
            TaskKind::Logreg => softplus_neg(y * z),
        }
    }

    pub fn example_grad(&self, theta: &[f64], j: usize) -> Vec<f64> {
        let x = &self.features[j];
        let z = dot(theta, x);
        let y = self.targets[j];
        let coef = match self.kind {
            TaskKind::Linreg => z - y,
            // d/dz log(1 + e^{-yz}) = -y / (1 + e^{yz})
            TaskKind::Logreg => -y / (1.0 + (y * z).exp()),
        };
        x.iter().map(|v| coef * v).collect()
    }

    pub fn mean_loss(&self, theta: &[f64]) -> f64 {
        (0..self.len()).map(|j| self.example_loss(theta, j)).sum::<f64>() / self.len() as f64
    }
}

/// Features `x ~ N(0, I_d)`, `w* ~ N(0, I_d / d)`; linreg targets
/// `<w*, x> + noise`, logreg labels `sign(<w*, x> + noise)`.
pub fn synth_task(spec: &TaskSpec) -> Result<Dataset> {
    if spec.dim == 0 || spec.dataset_size == 0 {
        return Err(TrainError::InvalidConfig(
            "task dim and dataset_size must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.dim;
    let scale = 1.0 / (d as f64).sqrt();
    let w_star: Vec<f64> = (0..d)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut features = Vec::with_capacity(spec.dataset_size);
    let mut targets = Vec::with_capacity(spec.dataset_size);
    for _ in 0..spec.dataset_size {
        let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let e: f64 = rng.sample(StandardNormal);
        let z = dot(&w_star, &x) + spec.label_noise * e;
        targets.push(match spec.kind {
            TaskKind::Linreg => z,
            TaskKind::Logreg => {
                if z >= 0.0 {
                    1.0
                } else {
                    -1.0
                }
            }
        });
        features.push(x);
    }
    Ok(Dataset {
        kind: spec.kind,
        features,
        targets,
        w_star,
    })
}

/// Scales `g` to norm at most `zeta`.
pub fn clip(g: &[f64], zeta: f64) -> Vec<f64> {
    let n = norm(g);
    if n <= zeta {
        return g.to_vec();
    }
    let f = n / zeta;
    let mut out: Vec<f64> = g.iter().map(|v| v / f).collect();
    // rounding can leave the norm a few ulps above zeta
    while norm(&out) > zeta {
        for v in out.iter_mut() {
            *v *= 1.0 - f64::EPSILON;
        }
    }
    out
}

/// Assignment of each data index to a batch within an epoch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub assignment: Vec<usize>,
    pub batches_per_epoch: usize,
}

impl BatchPlan {
    /// Members of each batch in index order.
    pub fn batches(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.batches_per_epoch];
        for (j, &bin) in self.assignment.iter().enumerate() {
            out[bin].push(j);
        }
        out
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.batches_per_epoch];
        for &bin in &self.assignment {
            c[bin] += 1;
        }
        c
    }
}

/// Each index goes to a uniformly random batch, independently.
pub fn allocate_balls_in_bins(dataset_size: usize, batches_per_epoch: usize, seed: u64) -> BatchPlan {
    assert!(batches_per_epoch >= 1, "batches_per_epoch must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_BATCHING);
    BatchPlan {
        assignment: (0..dataset_size)
            .map(|_| rng.random_range(0..batches_per_epoch))
            .collect(),
        batches_per_epoch,
    }
}

/// Indices `(i - 1) B, ..., i B - 1` modulo `N` for one-based step `i`.
pub fn sequential_batches(dataset_size: usize, batch_size: usize, i: usize) -> Vec<usize> {
    assert!(i >= 1, "steps are one-based");
    let start = ((i - 1) % dataset_size) * batch_size % dataset_size;
    (0..batch_size).map(|t| (start + t) % dataset_size).collect()
}

fn initial_theta(config: &TrainConfig) -> Vec<f64> {
    let d = config.task.dim;
    match config.theta0 {
        Theta0Spec::Zeros => vec![0.0; d],
        Theta0Spec::Gaussian { std } => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(STREAM_THETA0);
            (0..d)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect()
        }
    }
}

pub fn theta_hash(theta: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in theta {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Data indices of the batch, in aggregation order.
    pub batch: Vec<usize>,
    pub batch_len: usize,
    pub clipped_sum: Vec<f64>,
    pub noise: Vec<f64>,
    pub max_example_norm: f64,
    pub theta_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub theta0: Vec<f64>,
    pub sigma_multiplier: f64,
    pub sens: f64,
    /// `zeta * sens * sigma_multiplier`.
    pub noise_std: f64,
    pub records: Vec<StepRecord>,
    pub theta_final: Vec<f64>,
    pub final_loss: f64,
}

/// `theta - (eta / B) (x + nu)`, coordinate-wise in this order.
pub fn apply_update(theta: &mut [f64], x: &[f64], nu: &[f64], eta: f64, batch_size: usize) {
    let rate = eta / batch_size as f64;
    for ((t, a), b) in theta.iter_mut().zip(x).zip(nu) {
        *t -= rate * (a + b);
    }
}

/// Runs the full training loop and returns `theta_n` with its trace.
pub fn train(config: &TrainConfig) -> Result<(Vec<f64>, TrainTrace)> {
    config.validate()?;
    let data = synth_task(&config.task)?;
    train_on(config, &data)
}

/// [`train`] on an existing dataset.
pub fn train_on(config: &TrainConfig, data: &Dataset) -> Result<(Vec<f64>, TrainTrace)> {
    config.validate()?;
    if data.dim() != config.task.dim || data.len() != config.task.dataset_size {
        return Err(TrainError::InvalidConfig(
            "dataset shape differs from the task spec".into(),
        ));
    }
    let sigma_multiplier = config.sigma_multiplier()?;
    let sens = config.sensitivity()?;
    let noise_config = config.noise_config()?;
    let mut stream = NoiseStream::new(noise_config.clone())?.with_horizon(config.iterations as u64);

    let m = config.batches_per_epoch();
    let plan = match config.batching {
        Batching::BallsInBins => Some(allocate_balls_in_bins(data.len(), m, config.seed).batches()),
        Batching::Sequential => None,
    };

    let theta0 = initial_theta(config);
    let mut theta = theta0.clone();
    let d = config.task.dim;
    let mut records = Vec::with_capacity(config.iterations);
    let mut noise = vec![0.0; d];
    for i in 1..=config.iterations {
        let batch = match &plan {
            Some(p) => p[(i - 1) % m].clone(),
            None => sequential_batches(data.len(), config.batch_size, i),
        };
        let mut x = vec![0.0; d];
        let mut max_norm = 0.0f64;
        for &j in &batch {
            let g = data.example_grad(&theta, j);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::Diverged { step: i });
            }
            let c = clip(&g, config.clip_norm);
            max_norm = max_norm.max(norm(&c));
            for (a, v) in x.iter_mut().zip(&c) {
                *a += v;
            }
        }
        stream.next_noise_into(&mut noise)?;
        apply_update(&mut theta, &x, &noise, config.learning_rate, config.batch_size);
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::Diverged { step: i });
        }
        records.push(StepRecord {
            step: i,
            batch_len: batch.len(),
            clipped_sum: x,
            noise: noise.clone(),
            max_example_norm: max_norm,
            theta_hash: theta_hash(&theta),
            batch,
        });
    }
    let final_loss = data.mean_loss(&theta);
    let trace = TrainTrace {
        theta0,
        sigma_multiplier,
        sens,
        noise_std: noise_config.scale,
        records,
        theta_final: theta.clone(),
        final_loss,
    };
    Ok((theta, trace))
}

/// Replays `theta_0` through the recorded `x_i` and the given noise rows.
pub fn reconstruct_theta(
    trace: &TrainTrace,
    noise: &[Vec<f64>],
    eta: f64,
    batch_size: usize,
) -> Vec<f64> {
    let mut theta = trace.theta0.clone();
    for (r, nu) in trace.records.iter().zip(noise) {
        apply_update(&mut theta, &r.clipped_sum, nu, eta, batch_size);
    }
    theta
}

/// JSON lines: a header with the config, one line per step, and a footer with
/// the final parameters.
pub fn write_trace_jsonl<W: Write>(
    mut w: W,
    config: &TrainConfig,
    trace: &TrainTrace,
) -> Result<()> {
    #[derive(Serialize)]
    struct Header<'a> {
        config: &'a TrainConfig,
        sigma_multiplier: f64,
        sens: f64,
        noise_std: f64,
        theta0: &'a [f64],
    }
    #[derive(Serialize)]
    struct Footer<'a> {
        theta_final: &'a [f64],
        final_loss: f64,
        theta_hash: String,
    }
    serde_json::to_writer(
        &mut w,
        &serde_json::json!({ "header": Header {
            config,
            sigma_multiplier: trace.sigma_multiplier,
            sens: trace.sens,
            noise_std: trace.noise_std,
            theta0: &trace.theta0,
        }}),
    )?;
    writeln!(w)?;
    for r in &trace.records {
        serde_json::to_writer(&mut w, &serde_json::json!({ "step": r }))?;
        writeln!(w)?;
    }
    serde_json::to_writer(
        &mut w,
        &serde_json::json!({ "final": Footer {
            theta_final: &trace.theta_final,
            final_loss: trace.final_loss,
            theta_hash: theta_hash(&trace.theta_final),
        }}),
    )?;
    writeln!(w)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::buffered_reference;

    pub(crate) fn small_config() -> TrainConfig {
        TrainConfig {
            task: TaskSpec {
                kind: TaskKind::Linreg,
                dim: 3,
                dataset_size: 16,
                label_noise: 0.1,
                seed: 5,
            },
            theta0: Theta0Spec::Zeros,
            batch_size: 4,
            clip_norm: 1.0,
            learning_rate: 0.2,
            lambda: 0.7,
            epochs: 2,
            iterations: 8,
            budget: PrivacyBudget::new(2.0, 1e-5).unwrap(),
            batching: Batching::BallsInBins,
            amplification: Amplification::None,
            sigma_override: None,
            seed: 11,
        }
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clip(&[0.0, 0.0], 1.0), vec![0.0, 0.0]);
        let c = clip(&[3.0, 4.0], 1.0);
        assert!((c[0] - 0.6).abs() < 1e-15 && (c[1] - 0.8).abs() < 1e-15);
        let g = [2.0, 0.0, 0.0];
        assert_eq!(clip(&g, 1.0), vec![1.0, 0.0, 0.0]);
        assert_eq!(clip(&[0.1, 0.2], 1.0), vec![0.1, 0.2]);
        let big = clip(&[1e300, -1e300], 1.0);
        assert!(norm(&big) <= 1.0 && norm(&big) > 0.999);
    }

    #[test]
    fn clip_never_exceeds_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let d = rng.random_range(1..20);
            let g: Vec<f64> = (0..d).map(|_| 100.0 * rng.sample::<f64, _>(StandardNormal)).collect();
            let zeta = rng.random_range(1e-3..10.0);
            let c = clip(&g, zeta);
            assert!(norm(&c) <= zeta);
            let s = norm(&g) / norm(&c);
            for (a, b) in g.iter().zip(&c) {
                assert!((a - s * b).abs() <= 1e-9 * norm(&g));
            }
        }
    }

    #[test]
    fn sequential_examples() {
        assert_eq!(sequential_batches(10, 4, 1), vec![0, 1, 2, 3]);
        assert_eq!(sequential_batches(10, 4, 3), vec![8, 9, 0, 1]);
        assert_eq!(sequential_batches(5, 5, 7), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn balls_in_bins_examples() {
        let p = allocate_balls_in_bins(50, 1, 9);
        assert!(p.assignment.iter().all(|&b| b == 0));
        assert_eq!(allocate_balls_in_bins(100, 7, 4), allocate_balls_in_bins(100, 7, 4));
        assert_ne!(allocate_balls_in_bins(100, 7, 4), allocate_balls_in_bins(100, 7, 5));
        let p = allocate_balls_in_bins(40, 6, 1);
        let flat: Vec<usize> = {
            let mut v: Vec<usize> = p.batches().concat();
            v.sort();
            v
        };
        assert_eq!(flat, (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn balls_in_bins_count_variance() {
        let (n, m) = (100_000usize, 100usize);
        let c = allocate_balls_in_bins(n, m, 2024).counts();
        let mean = c.iter().sum::<usize>() as f64 / m as f64;
        let var = c.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
        let want = 1000.0 * (1.0 - 1.0 / m as f64);
        assert_eq!(mean, 1000.0);
        assert!((var - want).abs() <= 0.1 * want, "{var} vs {want}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        for kind in [TaskKind::Linreg, TaskKind::Logreg] {
            let spec = TaskSpec {
                kind,
                dim: 5,
                dataset_size: 30,
                label_noise: 0.3,
                seed: 1,
            };
            let data = synth_task(&spec).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            for _ in 0..10 {
                let theta: Vec<f64> = (0..5).map(|_| rng.sample(StandardNormal)).collect();
                let j = rng.random_range(0..30);
                let g = data.example_grad(&theta, j);
                let h = 1e-5;
                for c in 0..5 {
                    let mut p = theta.clone();
                    let mut q = theta.clone();
                    p[c] += h;
                    q[c] -= h;
                    let fd = (data.example_loss(&p, j) - data.example_loss(&q, j)) / (2.0 * h);
                    assert!((fd - g[c]).abs() <= 1e-6, "{kind:?} c={c}: {fd} vs {}", g[c]);
                }
            }
        }
    }

    #[test]
    fn synthetic_data_properties() {
        for kind in [TaskKind::Linreg, TaskKind::Logreg] {
            let spec = TaskSpec {
                kind,
                dim: 4,
                dataset_size: 200,
                label_noise: 0.1,
                seed: 8,
            };
            let a = synth_task(&spec).unwrap();
            assert_eq!(a, synth_task(&spec).unwrap());
            assert!(a.mean_loss(&a.w_star) < a.mean_loss(&[0.0; 4]));
        }
    }

    #[test]
    fn config_validation() {
        let ok = small_config();
        ok.validate().unwrap();
        let mut c = ok.clone();
        c.iterations = 9;
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.task.dataset_size = 18;
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.lambda = 1.0;
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.batch_size = 32;
        assert!(c.validate().is_err());

        let json = serde_json::to_string(&ok).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), ok);
        assert!(serde_json::from_str::<TrainConfig>(&json.replace("\"seed\":11", "\"seed\":11,\"x\":1")).is_err());
    }

    #[test]
    fn amplification_modes() {
        let mut c = small_config();
        c.amplification = Amplification::Bnb;
        let err = train(&c).unwrap_err();
        assert!(err.to_string().contains("amplified_multiplier_stub"), "{err}");
        c.amplification = Amplification::None;
        assert!(train(&c).is_ok());
    }

    #[test]
    fn noise_free_lambda_zero_is_plain_sgd() {
        let mut c = small_config();
        c.lambda = 0.0;
        c.sigma_override = Some(0.0);
        c.clip_norm = 1e9;
        let (theta, _) = train(&c).unwrap();

        let data = synth_task(&c.task).unwrap();
        let plan = allocate_balls_in_bins(16, 4, c.seed).batches();
        let mut w = vec![0.0; 3];
        for i in 0..c.iterations {
            let mut x = vec![0.0; 3];
            for &j in &plan[i % 4] {
                for (a, g) in x.iter_mut().zip(data.example_grad(&w, j)) {
                    *a += g;
                }
            }
            apply_update(&mut w, &x, &[0.0; 3], c.learning_rate, c.batch_size);
        }
        assert_eq!(theta, w);
    }

    #[test]
    fn noise_free_runs_ignore_lambda() {
        let mut c = small_config();
        c.sigma_override = Some(0.0);
        let base = train(&c).unwrap().0;
        for l in [0.0, 0.3, 0.95] {
            c.lambda = l;
            assert_eq!(train(&c).unwrap().0, base);
        }
    }

    #[test]
    fn trace_reconstruction_is_bit_exact() {
        let c = small_config();
        let (theta, trace) = train(&c).unwrap();
        let noise = buffered_reference(&c.noise_config().unwrap(), c.iterations).unwrap();
        assert_eq!(reconstruct_theta(&trace, &noise, c.learning_rate, c.batch_size), theta);
        assert!(trace.records.iter().all(|r| r.max_example_norm <= c.clip_norm));
        assert_eq!(trace.records.last().unwrap().theta_hash, theta_hash(&theta));
    }

    #[test]
    fn epochs_replay_the_same_batches() {
        let c = small_config();
        let (_, trace) = train(&c).unwrap();
        let batches: Vec<&Vec<usize>> = trace.records.iter().map(|r| &r.batch).collect();
        assert_eq!(batches[..4], batches[4..]);
        let mut all: Vec<usize> = batches[..4].iter().flat_map(|b| b.iter().copied()).collect();
        all.sort();
        assert_eq!(all, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn trace_export_has_header_steps_footer() {
        let c = small_config();
        let (_, trace) = train(&c).unwrap();
        let mut buf = Vec::new();
        write_trace_jsonl(&mut buf, &c, &trace).unwrap();
        let lines: Vec<serde_json::Value> = String::from_utf8(buf)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), c.iterations + 2);
        let cfg: TrainConfig =
            serde_json::from_value(lines[0]["header"]["config"].clone()).unwrap();
        assert_eq!(cfg, c);
        assert_eq!(lines[3]["step"]["step"], 3);
        assert!(lines[c.iterations + 1]["final"]["theta_final"].is_array());
    }

    #[test]
    fn divergence_reports_step() {
        let mut c = small_config();
        c.clip_norm = 1e300;
        c.learning_rate = 1e150;
        c.sigma_override = Some(0.0);
        match train(&c) {
            Err(TrainError::Diverged { step }) => assert!(step >= 1 && step <= c.iterations),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
