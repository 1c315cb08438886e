//! One-dimensional Gaussian-process regression with an RBF kernel.
//!
//! Each model maps a single body-frame velocity component to the
//! acceleration error on the same axis; three independent models form a
//! [`ResidualModel`]. Dense models are trained by maximizing the log
//! marginal likelihood in log-hyperparameter space, then distilled into
//! small models by refitting on posterior means at a handful of
//! inducing inputs, which keeps prediction cost at O(m) per query.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::NoiseRng;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Relative jitter (times sigma_f2) always added to the Gram diagonal.
const BASE_JITTER_REL: f64 = 1e-8;
/// Escalation ceiling for the jitter on factorization failure.
const MAX_JITTER_REL: f64 = 1e-4;

/// RBF kernel hyperparameters. All strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpHyperparams {
    /// Kernel lengthscale, input units.
    pub lengthscale: f64,
    /// Signal variance, output units squared.
    pub sigma_f2: f64,
    /// Observation noise variance, output units squared.
    pub sigma_n2: f64,
}

impl GpHyperparams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lengthscale > 0.0
            && self.sigma_f2 > 0.0
            && self.sigma_n2 > 0.0
            && self.lengthscale.is_finite()
            && self.sigma_f2.is_finite()
            && self.sigma_n2.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "hyperparameters must be finite and positive: {self:?}"
            )))
        }
    }
}

/// RBF kernel value. Noise enters the Gram diagonal in [`gp_fit`], not
/// the kernel itself, so covariances between distinct points and the
/// test-point variance stay noise-free.
pub fn rbf_kernel(z_i: f64, z_j: f64, hyper: &GpHyperparams) -> f64 {
    let d = (z_i - z_j) / hyper.lengthscale;
    hyper.sigma_f2 * (-0.5 * d * d).exp()
}

/// A fitted one-dimensional GP.
#[derive(Debug, Clone)]
pub struct GpModel {
    pub train_inputs: Vec<f64>,
    pub train_targets: Vec<f64>,
    pub hyper: GpHyperparams,
    /// Lower-triangular Cholesky factor of K = kernel Gram + (sigma_n2 +
    /// jitter) I.
    pub chol: DMatrix<f64>,
    /// Cached K^-1 y.
    pub alpha: DVector<f64>,
    /// Absolute jitter that ended up on the diagonal.
    pub jitter: f64,
}

fn noise_free_gram(inputs: &[f64], hyper: &GpHyperparams) -> DMatrix<f64> {
    let n = inputs.len();
    DMatrix::from_fn(n, n, |i, j| rbf_kernel(inputs[i], inputs[j], hyper))
}

/// Fit a GP: build the Gram matrix, factor it, cache `alpha = K^-1 y`.
///
/// A jitter of `1e-8 * sigma_f2` is always added to the diagonal and
/// escalated tenfold (up to `1e-4 * sigma_f2`) if the factorization
/// fails. The procedure is a pure function of its arguments, so reloads
/// of a serialized model reproduce the factorization bit for bit.
pub fn gp_fit(inputs: &[f64], targets: &[f64], hyper: &GpHyperparams) -> Result<GpModel> {
    hyper.validate()?;
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(Error::InvalidInput(format!(
            "need n >= 1 with matching lengths, got {} inputs / {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    if inputs.iter().chain(targets).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite training data".into()));
    }

    let n = inputs.len();
    let kf = noise_free_gram(inputs, hyper);
    let y = DVector::from_column_slice(targets);

    let mut jitter_rel = BASE_JITTER_REL;
    while jitter_rel <= MAX_JITTER_REL {
        let mut k = kf.clone();
        for i in 0..n {
            k[(i, i)] += hyper.sigma_n2 + jitter_rel * hyper.sigma_f2;
        }
        if let Some(chol) = nalgebra::linalg::Cholesky::new(k) {
            let alpha = chol.solve(&y);
            return Ok(GpModel {
                train_inputs: inputs.to_vec(),
                train_targets: targets.to_vec(),
                hyper: *hyper,
                chol: chol.unpack(),
                alpha,
                jitter: jitter_rel * hyper.sigma_f2,
            });
        }
        jitter_rel *= 10.0;
    }
    Err(Error::Numerical(format!(
        "Gram factorization failed for n={n} even with jitter {:.1e} * sigma_f2 \
         (lengthscale={}, sigma_f2={}, sigma_n2={})",
        MAX_JITTER_REL, hyper.lengthscale, hyper.sigma_f2, hyper.sigma_n2
    )))
}

impl GpModel {
    pub fn len(&self) -> usize {
        self.train_inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_inputs.is_empty()
    }

    fn kernel_column(&self, z_star: f64) -> DVector<f64> {
        DVector::from_fn(self.len(), |i, _| {
            rbf_kernel(self.train_inputs[i], z_star, &self.hyper)
        })
    }

    /// Posterior mean and variance at a query point. Small negative
    /// variances from round-off are clamped to zero.
    pub fn predict(&self, z_star: f64) -> (f64, f64) {
        let k_star = self.kernel_column(z_star);
        let mu = k_star.dot(&self.alpha);
        let w = self
            .chol
            .solve_lower_triangular(&k_star)
            .expect("triangular solve on a fitted factor");
        let var = self.hyper.sigma_f2 - w.norm_squared();
        (mu, var.max(0.0))
    }

    /// Derivative of the posterior mean with respect to the query point.
    pub fn mean_derivative(&self, z_star: f64) -> f64 {
        let l2 = self.hyper.lengthscale * self.hyper.lengthscale;
        self.train_inputs
            .iter()
            .zip(self.alpha.iter())
            .map(|(&z_i, &a_i)| a_i * rbf_kernel(z_i, z_star, &self.hyper) * (z_i - z_star) / l2)
            .sum()
    }
}

/// Log marginal likelihood and its gradient with respect to
/// `(ln lengthscale, ln sigma_f2, ln sigma_n2)`.
pub fn log_marginal_likelihood(
    inputs: &[f64],
    targets: &[f64],
    hyper: &GpHyperparams,
) -> Result<(f64, [f64; 3])> {
    let sq = squared_distances(inputs);
    lml_from_distances(&sq, targets, hyper)
}

fn squared_distances(inputs: &[f64]) -> DMatrix<f64> {
    let n = inputs.len();
    DMatrix::from_fn(n, n, |i, j| {
        let d = inputs[i] - inputs[j];
        d * d
    })
}

/// Shared implementation reusing a precomputed squared-distance matrix;
/// the optimizer calls this once per accepted iterate.
fn lml_from_distances(
    sq: &DMatrix<f64>,
    targets: &[f64],
    hyper: &GpHyperparams,
) -> Result<(f64, [f64; 3])> {
    let n = targets.len();
    let l2 = hyper.lengthscale * hyper.lengthscale;
    let kf = sq.map(|d2| hyper.sigma_f2 * (-0.5 * d2 / l2).exp());
    let y = DVector::from_column_slice(targets);

    let mut jitter_rel = BASE_JITTER_REL;
    let (chol, jitter_rel) = loop {
        let mut k = kf.clone();
        for i in 0..n {
            k[(i, i)] += hyper.sigma_n2 + jitter_rel * hyper.sigma_f2;
        }
        if let Some(c) = nalgebra::linalg::Cholesky::new(k) {
            break (c, jitter_rel);
        }
        jitter_rel *= 10.0;
        if jitter_rel > MAX_JITTER_REL {
            return Err(Error::Numerical(
                "Gram factorization failed while evaluating the marginal likelihood".into(),
            ));
        }
    };

    let alpha = chol.solve(&y);
    let log_det_half: f64 = (0..n).map(|i| chol.l_dirty()[(i, i)].ln()).sum();
    let value = -0.5 * y.dot(&alpha)
        - log_det_half
        - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

    // Gradient via d/dtheta = 1/2 tr((alpha alpha^T - K^-1) dK/dtheta).
    let kinv = chol.inverse();
    let mut g_len = 0.0;
    let mut g_sf = 0.0;
    let mut g_sn = 0.0;
    for i in 0..n {
        for j in 0..n {
            let s = alpha[i] * alpha[j] - kinv[(i, j)];
            let kf_ij = kf[(i, j)];
            // dK/d(ln L) = Kf .* d^2 / L^2
            g_len += s * kf_ij * sq[(i, j)] / l2;
            // dK/d(ln sf2): everything proportional to sigma_f2.
            let mut dk_sf = kf_ij;
            if i == j {
                dk_sf += jitter_rel * hyper.sigma_f2;
            }
            g_sf += s * dk_sf;
            if i == j {
                g_sn += s * hyper.sigma_n2;
            }
        }
    }
    Ok((value, [0.5 * g_len, 0.5 * g_sf, 0.5 * g_sn]))
}

/// Value-only evaluation for line searches (no inverse needed).
fn lml_value_from_distances(
    sq: &DMatrix<f64>,
    targets: &[f64],
    hyper: &GpHyperparams,
) -> Option<f64> {
    let n = targets.len();
    let l2 = hyper.lengthscale * hyper.lengthscale;
    let kf = sq.map(|d2| hyper.sigma_f2 * (-0.5 * d2 / l2).exp());

    let mut jitter_rel = BASE_JITTER_REL;
    while jitter_rel <= MAX_JITTER_REL {
        let mut k = kf.clone();
        for i in 0..n {
            k[(i, i)] += hyper.sigma_n2 + jitter_rel * hyper.sigma_f2;
        }
        if let Some(chol) = nalgebra::linalg::Cholesky::new(k) {
            let y = DVector::from_column_slice(targets);
            let alpha = chol.solve(&y);
            let log_det_half: f64 = (0..n).map(|i| chol.l_dirty()[(i, i)].ln()).sum();
            let v = -0.5 * y.dot(&alpha)
                - log_det_half
                - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
            return v.is_finite().then_some(v);
        }
        jitter_rel *= 10.0;
    }
    None
}

/// Settings for hyperparameter training.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Number of optimizer starts; the first one starts exactly at the
    /// supplied initial hyperparameters.
    pub restarts: usize,
    pub max_iters: usize,
    /// Gradient-norm stopping tolerance (in log-parameter space).
    pub grad_tol: f64,
    /// Standard deviation of the log-space perturbation applied to
    /// restarts 1..
    pub perturb_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            restarts: 5,
            max_iters: 200,
            grad_tol: 1e-6,
            perturb_scale: 0.7,
            seed: 0,
        }
    }
}

/// Heuristic initial hyperparameters from data moments.
pub fn init_hyperparams(inputs: &[f64], targets: &[f64]) -> GpHyperparams {
    let std = |v: &[f64]| -> f64 {
        let n = v.len().max(1) as f64;
        let mean = v.iter().sum::<f64>() / n;
        (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
    };
    let sx = std(inputs).max(1e-3);
    let sy = std(targets).max(1e-3);
    GpHyperparams {
        lengthscale: sx,
        sigma_f2: sy * sy,
        sigma_n2: 0.01 * sy * sy,
    }
}

// Log-parameter bounds keeping the search away from degenerate extremes.
const LOG_BOUND: f64 = 23.0;

fn clamp_theta(theta: &mut [f64; 3]) {
    for t in theta.iter_mut() {
        *t = t.clamp(-LOG_BOUND, LOG_BOUND);
    }
}

fn theta_to_hyper(theta: &[f64; 3]) -> GpHyperparams {
    GpHyperparams {
        lengthscale: theta[0].exp(),
        sigma_f2: theta[1].exp(),
        sigma_n2: theta[2].exp(),
    }
}

/// Steepest ascent on the log marginal likelihood from one start point.
/// Returns the best iterate and its likelihood, or None if even the
/// initial evaluation fails.
fn ascend(
    sq: &DMatrix<f64>,
    targets: &[f64],
    start: GpHyperparams,
    cfg: &TrainConfig,
) -> Option<(f64, GpHyperparams)> {
    let mut theta = [
        start.lengthscale.ln(),
        start.sigma_f2.ln(),
        start.sigma_n2.ln(),
    ];
    clamp_theta(&mut theta);

    let (mut value, mut grad) =
        lml_from_distances(sq, targets, &theta_to_hyper(&theta)).ok()?;
    if !value.is_finite() {
        return None;
    }

    let mut step = 0.1;
    for _ in 0..cfg.max_iters {
        let gnorm = (grad[0] * grad[0] + grad[1] * grad[1] + grad[2] * grad[2]).sqrt();
        if gnorm < cfg.grad_tol {
            break;
        }
        let dir = [grad[0] / gnorm, grad[1] / gnorm, grad[2] / gnorm];

        let mut accepted = false;
        while step >= 1e-14 {
            let mut cand = [
                theta[0] + step * dir[0],
                theta[1] + step * dir[1],
                theta[2] + step * dir[2],
            ];
            clamp_theta(&mut cand);
            match lml_value_from_distances(sq, targets, &theta_to_hyper(&cand)) {
                Some(v) if v > value => {
                    theta = cand;
                    if let Ok((v2, g2)) = lml_from_distances(sq, targets, &theta_to_hyper(&theta))
                    {
                        value = v2;
                        grad = g2;
                    } else {
                        value = v;
                    }
                    step = (step * 1.8).min(1.0);
                    accepted = true;
                    break;
                }
                _ => step *= 0.5,
            }
        }
        if !accepted {
            break; // line search collapsed: no ascent direction left
        }
    }
    Some((value, theta_to_hyper(&theta)))
}

fn restart_starts(init: &GpHyperparams, cfg: &TrainConfig) -> Vec<GpHyperparams> {
    (0..cfg.restarts.max(1))
        .map(|r| {
            if r == 0 {
                *init
            } else {
                let mut rng = NoiseRng::derive(cfg.seed, r as u64);
                GpHyperparams {
                    lengthscale: init.lengthscale
                        * (cfg.perturb_scale * rng.standard_normal()).exp(),
                    sigma_f2: init.sigma_f2 * (cfg.perturb_scale * rng.standard_normal()).exp(),
                    sigma_n2: init.sigma_n2 * (cfg.perturb_scale * rng.standard_normal()).exp(),
                }
            }
        })
        .collect()
}

// With the parallel feature on, this is the reference path the rayon
// dispatch is checked against in tests.
#[cfg_attr(feature = "parallel", allow(dead_code))]
fn run_restarts_seq(
    sq: &DMatrix<f64>,
    targets: &[f64],
    starts: &[GpHyperparams],
    cfg: &TrainConfig,
) -> Vec<Option<(f64, GpHyperparams)>> {
    starts.iter().map(|s| ascend(sq, targets, *s, cfg)).collect()
}

#[cfg(feature = "parallel")]
fn run_restarts_par(
    sq: &DMatrix<f64>,
    targets: &[f64],
    starts: &[GpHyperparams],
    cfg: &TrainConfig,
) -> Vec<Option<(f64, GpHyperparams)>> {
    starts
        .par_iter()
        .map(|s| ascend(sq, targets, *s, cfg))
        .collect()
}

/// Maximize the log marginal likelihood over several restarts.
///
/// Restart 0 starts exactly at `init` and only ever accepts ascent
/// steps, so the returned likelihood is never worse than the
/// likelihood at `init`. Ties between restarts resolve to the lowest
/// restart index, and the parallel path reproduces the sequential
/// result exactly.
pub fn train_hyperparams(
    inputs: &[f64],
    targets: &[f64],
    init: &GpHyperparams,
    cfg: &TrainConfig,
) -> Result<GpHyperparams> {
    init.validate()?;
    if inputs.len() < 2 || inputs.len() != targets.len() {
        return Err(Error::InvalidInput(format!(
            "training needs n >= 2 matched samples, got {}",
            inputs.len()
        )));
    }
    let sq = squared_distances(inputs);
    let starts = restart_starts(init, cfg);

    #[cfg(feature = "parallel")]
    let outcomes = run_restarts_par(&sq, targets, &starts, cfg);
    #[cfg(not(feature = "parallel"))]
    let outcomes = run_restarts_seq(&sq, targets, &starts, cfg);

    let mut best: Option<(f64, GpHyperparams)> = None;
    for outcome in outcomes.into_iter().flatten() {
        let better = match &best {
            Some((bv, _)) => outcome.0 > *bv,
            None => true,
        };
        if better {
            best = Some(outcome);
        }
    }
    best.map(|(_, h)| h).ok_or_else(|| {
        Error::Numerical("hyperparameter training failed: every restart diverged".into())
    })
}

/// Distill a dense model into a small one: predict the dense posterior
/// mean at the inducing inputs and refit with the dense kernel
/// hyperparameters. The inducing targets are exact function values of
/// the dense mean, so the refit uses a vanishing noise term; prediction
/// afterwards costs O(m) per query.
pub fn sparsify(dense: &GpModel, inducing_inputs: &[f64]) -> Result<GpModel> {
    if inducing_inputs.is_empty() {
        return Err(Error::InvalidInput("need at least one inducing input".into()));
    }
    let targets: Vec<f64> = inducing_inputs.iter().map(|&z| dense.predict(z).0).collect();
    let hyper = GpHyperparams {
        lengthscale: dense.hyper.lengthscale,
        sigma_f2: dense.hyper.sigma_f2,
        sigma_n2: 1e-12 * dense.hyper.sigma_f2,
    };
    gp_fit(inducing_inputs, &targets, &hyper)
}

/// Body axes the residual models are indexed by.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        }
    }

    pub fn from_name(s: &str) -> Result<Axis> {
        match s {
            "x" => Ok(Axis::X),
            "y" => Ok(Axis::Y),
            "z" => Ok(Axis::Z),
            other => Err(Error::Data(format!("unknown axis label {other:?}"))),
        }
    }
}

/// Three independent per-axis GPs mapping body-frame velocity to
/// body-frame acceleration error.
#[derive(Debug, Clone)]
pub struct ResidualModel {
    pub gp_x: GpModel,
    pub gp_y: GpModel,
    pub gp_z: GpModel,
}

impl ResidualModel {
    pub fn axis(&self, axis: Axis) -> &GpModel {
        match axis {
            Axis::X => &self.gp_x,
            Axis::Y => &self.gp_y,
            Axis::Z => &self.gp_z,
        }
    }

    /// Save one JSON file per axis (`model_x.json`, ...) in `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for axis in Axis::ALL {
            let file = GpModelFile::from_model(self.axis(axis), axis);
            let path = dir.join(format!("model_{}.json", axis.name()));
            std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let load = |axis: Axis| -> Result<GpModel> {
            let path = dir.join(format!("model_{}.json", axis.name()));
            let text = std::fs::read_to_string(&path).map_err(|e| {
                Error::Data(format!("cannot read model file {}: {e}", path.display()))
            })?;
            let file: GpModelFile = serde_json::from_str(&text)?;
            file.into_model(axis)
        };
        Ok(Self {
            gp_x: load(Axis::X)?,
            gp_y: load(Axis::Y)?,
            gp_z: load(Axis::Z)?,
        })
    }
}

/// Per-axis posterior mean and variance of the residual acceleration at
/// a body-frame velocity. Axes never mix.
pub fn residual_predict(
    model: &ResidualModel,
    v_body: &nalgebra::Vector3<f64>,
) -> (nalgebra::Vector3<f64>, nalgebra::Vector3<f64>) {
    let (mx, vx) = model.gp_x.predict(v_body.x);
    let (my, vy) = model.gp_y.predict(v_body.y);
    let (mz, vz) = model.gp_z.predict(v_body.z);
    (
        nalgebra::Vector3::new(mx, my, mz),
        nalgebra::Vector3::new(vx, vy, vz),
    )
}

/// On-disk form of a fitted model. Loading refits the factorization
/// from the stored data, which reproduces predictions bit for bit.
#[derive(Debug, Serialize, Deserialize)]
pub struct GpModelFile {
    pub axis: String,
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
    pub lengthscale: f64,
    pub sigma_f2: f64,
    pub sigma_n2: f64,
}

impl GpModelFile {
    pub fn from_model(model: &GpModel, axis: Axis) -> Self {
        Self {
            axis: axis.name().to_string(),
            inputs: model.train_inputs.clone(),
            targets: model.train_targets.clone(),
            lengthscale: model.hyper.lengthscale,
            sigma_f2: model.hyper.sigma_f2,
            sigma_n2: model.hyper.sigma_n2,
        }
    }

    pub fn into_model(self, expected_axis: Axis) -> Result<GpModel> {
        let axis = Axis::from_name(&self.axis)?;
        if axis != expected_axis {
            return Err(Error::Data(format!(
                "model file labeled axis {} but expected {}",
                self.axis,
                expected_axis.name()
            )));
        }
        gp_fit(
            &self.inputs,
            &self.targets,
            &GpHyperparams {
                lengthscale: self.lengthscale,
                sigma_f2: self.sigma_f2,
                sigma_n2: self.sigma_n2,
            },
        )
    }
}
