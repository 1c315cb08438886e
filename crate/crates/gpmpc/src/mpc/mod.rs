//! Receding-horizon tracking controller.
//!
//! Multiple-shooting Gauss-Newton SQP in a real-time-iteration scheme:
//! each control step rolls the current input plan out through the
//! discrete model, linearizes along it, condenses to a box-constrained
//! QP over the inputs and takes the full step. Three model modes are
//! supported:
//!
//! * [`MpcMode::Nominal`] - plain rigid-body model,
//! * [`MpcMode::Precomputed`] - per-node acceleration corrections
//!   supplied by the caller (first node optionally re-evaluated online
//!   from the measured state when a residual model is passed in),
//! * [`MpcMode::Direct`] - residual model evaluated at every node of
//!   every iteration, with its input-velocity sensitivity folded into
//!   the linearization.

pub mod qp;

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3, Quaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{residual_predict, ResidualModel};
use crate::quad::{
    self, discrete_jacobians, rotate_raw, rotation_matrix, ControlInput, Correction, QuadParams,
    State, DIM_INPUT, DIM_STATE,
};
use qp::{condense, projected_gradient_norm, solve_box_qp, LinearizedProblem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MpcMode {
    Nominal,
    Precomputed,
    Direct,
}

impl MpcMode {
    pub fn name(self) -> &'static str {
        match self {
            MpcMode::Nominal => "nominal",
            MpcMode::Precomputed => "precomputed",
            MpcMode::Direct => "direct",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    /// Prediction horizon, s.
    pub horizon_t: f64,
    /// Number of control intervals over the horizon.
    pub nodes: usize,
    /// Diagonal stage weights over the 13 state components.
    pub q: [f64; 13],
    /// Diagonal terminal weights.
    pub q_terminal: [f64; 13],
    /// Diagonal input weights over the four thrusts.
    pub r: [f64; 4],
    pub mode: MpcMode,
    /// Gauss-Newton iterations per control step (1 = real-time
    /// iteration; more for offline convergence studies).
    pub sqp_iters_per_step: usize,
    pub qp_kkt_tol: f64,
    pub qp_max_iters: usize,
    /// RK4 sub-steps per control interval inside the shooting rollout.
    pub rk4_substeps: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        let q = [
            10.0, 10.0, 10.0, // position
            5.0, 5.0, 5.0, 5.0, // attitude quaternion
            1.0, 1.0, 1.0, // velocity
            0.1, 0.1, 0.1, // body rates
        ];
        Self {
            horizon_t: 1.0,
            nodes: 10,
            q,
            q_terminal: q.map(|w| 10.0 * w),
            r: [0.1; 4],
            mode: MpcMode::Nominal,
            sqp_iters_per_step: 1,
            qp_kkt_tol: 1e-8,
            qp_max_iters: 100,
            rk4_substeps: 2,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon_t > 0.0) {
            return Err(Error::Config("horizon_t must be > 0".into()));
        }
        if self.nodes < 2 {
            return Err(Error::Config("need at least 2 horizon nodes".into()));
        }
        if self.q.iter().chain(&self.q_terminal).any(|w| *w < 0.0)
            || self.r.iter().any(|w| *w < 0.0)
        {
            return Err(Error::Config("cost weights must be non-negative".into()));
        }
        if !self.q[..3].iter().any(|w| *w > 0.0) {
            return Err(Error::Config(
                "at least one position weight must be positive".into(),
            ));
        }
        if self.sqp_iters_per_step == 0 || self.rk4_substeps == 0 {
            return Err(Error::Config(
                "sqp_iters_per_step and rk4_substeps must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Node spacing, s.
    pub fn node_dt(&self) -> f64 {
        self.horizon_t / self.nodes as f64
    }
}

/// Reference states and inputs over one horizon, sampled at the node
/// spacing. Construction checks quaternion norms and aligns consecutive
/// quaternion signs so direct component differences stay continuous.
#[derive(Debug, Clone)]
pub struct ReferenceWindow {
    pub states: Vec<State>,
    pub inputs: Vec<ControlInput>,
}

impl ReferenceWindow {
    pub fn new(mut states: Vec<State>, inputs: Vec<ControlInput>) -> Result<Self> {
        if states.len() != inputs.len() + 1 || states.is_empty() {
            return Err(Error::InvalidInput(format!(
                "window needs N+1 states and N inputs, got {} / {}",
                states.len(),
                inputs.len()
            )));
        }
        for s in &states {
            if (s.q.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(
                    "reference quaternion is not unit-norm".into(),
                ));
            }
        }
        for k in 1..states.len() {
            let dot = states[k - 1].q.coords.dot(&states[k].q.coords);
            if dot < 0.0 {
                states[k].q = -states[k].q;
            }
        }
        Ok(Self { states, inputs })
    }

    pub fn nodes(&self) -> usize {
        self.inputs.len()
    }
}

/// Correction for one horizon interval: a body-frame acceleration and
/// the attitude used to rotate it into the world frame.
#[derive(Debug, Clone, Copy)]
pub struct NodeCorrection {
    pub accel_body: Vector3<f64>,
    pub attitude: Quaternion<f64>,
}

impl NodeCorrection {
    pub fn zero() -> Self {
        Self {
            accel_body: Vector3::zeros(),
            attitude: Quaternion::new(1.0, 0.0, 0.0, 0.0),
        }
    }

    pub fn world_accel(&self) -> Vector3<f64> {
        rotate_raw(&self.attitude, &self.accel_body)
    }
}

/// Where the downstream-node corrections came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionSource {
    ReferenceSchedule,
    PreviousSolution,
}

/// One correction per horizon interval (N entries; the terminal node
/// has no outgoing interval to correct).
#[derive(Debug, Clone)]
pub struct CorrectionSet {
    pub nodes: Vec<NodeCorrection>,
    pub source: CorrectionSource,
}

impl CorrectionSet {
    pub fn zeros(n: usize) -> Self {
        Self {
            nodes: vec![NodeCorrection::zero(); n],
            source: CorrectionSource::ReferenceSchedule,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    /// All QP subproblems met the KKT tolerance.
    Ok,
    /// At least one QP hit its iteration cap; the best feasible iterate
    /// was used.
    QpIterationLimit,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    /// Predicted states; `states[0]` is exactly the initial state.
    pub states: Vec<State>,
    pub inputs: Vec<ControlInput>,
    pub sqp_iterations: usize,
    /// KKT residual of the last QP solve.
    pub kkt_residual: f64,
    /// Projected-gradient norm of the first iteration's QP at zero
    /// increment; measures how far the (warm-started) plan was from
    /// stationarity before this step.
    pub initial_kkt_residual: f64,
    /// Tracking objective of the returned trajectory.
    pub objective: f64,
    /// Objective after each Gauss-Newton iteration.
    pub objective_trace: Vec<f64>,
    pub solve_time_ms: f64,
    pub status: SolveStatus,
}

/// Quaternion-sign-aligned state error `x - x_ref` as a 13-vector.
pub fn state_error(x: &State, x_ref: &State) -> DVector<f64> {
    let mut r = x_ref.clone();
    if x.q.coords.dot(&r.q.coords) < 0.0 {
        r.q = -r.q;
    }
    let diff = x.to_vec() - r.to_vec();
    DVector::from_column_slice(diff.as_slice())
}

/// Quadratic tracking cost of one stage.
pub fn stage_cost(
    x: &State,
    u: &ControlInput,
    x_ref: &State,
    u_ref: &ControlInput,
    cfg: &MpcConfig,
) -> f64 {
    let ex = state_error(x, x_ref);
    let mut cost = 0.0;
    for i in 0..DIM_STATE {
        cost += cfg.q[i] * ex[i] * ex[i];
    }
    for i in 0..DIM_INPUT {
        let du = u.thrusts[i] - u_ref.thrusts[i];
        cost += cfg.r[i] * du * du;
    }
    cost
}

fn terminal_cost(x: &State, x_ref: &State, cfg: &MpcConfig) -> f64 {
    let ex = state_error(x, x_ref);
    (0..DIM_STATE).map(|i| cfg.q_terminal[i] * ex[i] * ex[i]).sum()
}

/// Full tracking objective of a trajectory against a reference window.
pub fn trajectory_objective(
    states: &[State],
    inputs: &[ControlInput],
    reference: &ReferenceWindow,
    cfg: &MpcConfig,
) -> f64 {
    let n = inputs.len();
    let mut total = 0.0;
    for k in 0..n {
        total += stage_cost(
            &states[k],
            &inputs[k],
            &reference.states[k],
            &reference.inputs[k],
            cfg,
        );
    }
    total + terminal_cost(&states[n], &reference.states[n], cfg)
}

/// Integrate one control interval under a constant world-frame
/// correction acceleration, optionally accumulating the interval
/// sensitivities across the sub-steps.
fn propagate_node(
    x: &State,
    u: &ControlInput,
    accel_world: &Vector3<f64>,
    dt: f64,
    substeps: usize,
    params: &QuadParams,
    with_jacobians: bool,
) -> Result<(State, Option<(DMatrix<f64>, DMatrix<f64>)>)> {
    let h = dt / substeps as f64;
    let corr = Correction::new(*accel_world);
    let identity_q = Quaternion::new(1.0, 0.0, 0.0, 0.0);
    let mut state = x.clone();
    let mut jac = if with_jacobians {
        Some((
            DMatrix::<f64>::identity(DIM_STATE, DIM_STATE),
            DMatrix::<f64>::zeros(DIM_STATE, DIM_INPUT),
        ))
    } else {
        None
    };
    for _ in 0..substeps {
        if let Some((a_acc, b_acc)) = jac.as_mut() {
            let (a_s, b_s) = discrete_jacobians(&state, u, h, params, Some(&corr), &identity_q)?;
            let a_s = DMatrix::from_column_slice(DIM_STATE, DIM_STATE, a_s.as_slice());
            let b_s = DMatrix::from_column_slice(DIM_STATE, DIM_INPUT, b_s.as_slice());
            *b_acc = &a_s * &*b_acc + b_s;
            *a_acc = a_s * &*a_acc;
        }
        state = quad::rk4_step(&state, u, h, params, Some(&corr), &identity_q)?;
    }
    Ok((state, jac))
}

fn is_finite_state(x: &State) -> bool {
    x.to_vec().iter().all(|v| v.is_finite())
}

/// Per-interval world-frame correction accelerations for the current
/// rollout, for one Gauss-Newton iteration.
enum ModePlan<'a> {
    Nominal,
    Precomputed {
        world: Vec<Vector3<f64>>,
    },
    Direct {
        residual: &'a ResidualModel,
        node_dt: f64,
    },
}

impl ModePlan<'_> {
    /// Correction for interval `k` starting at state `x_k`, plus the
    /// linearization add-on for state-dependent corrections.
    fn correction(&self, k: usize, x_k: &State) -> (Vector3<f64>, Option<Matrix3<f64>>) {
        match self {
            ModePlan::Nominal => (Vector3::zeros(), None),
            ModePlan::Precomputed { world } => (world[k], None),
            ModePlan::Direct { residual, node_dt } => {
                let v_body = x_k.body_velocity();
                let (mean, _) = residual_predict(residual, &v_body);
                let accel = rotate_raw(&x_k.q, &mean);
                // Sensitivity of the correction to the node's world
                // velocity: R diag(dmu/dv) R'. The attitude dependence
                // of the body-frame transform is dropped; with a
                // Gauss-Newton Hessian the residual term it would add
                // is second order.
                let sens = if k == 0 {
                    None // initial state is fixed, not a variable
                } else {
                    let rot = rotation_matrix(&x_k.q);
                    let d = Matrix3::from_diagonal(&Vector3::new(
                        residual.gp_x.mean_derivative(v_body.x),
                        residual.gp_y.mean_derivative(v_body.y),
                        residual.gp_z.mean_derivative(v_body.z),
                    ));
                    Some(rot * d * rot.transpose() * *node_dt)
                };
                (accel, sens)
            }
        }
    }
}

/// Previous plan to start the iteration from.
#[derive(Debug, Clone, Copy)]
pub struct WarmStart<'a> {
    pub previous: &'a SolveResult,
    /// Node boundaries the horizon has crossed since `previous` was
    /// solved. The plan is shifted by this many nodes (duplicating the
    /// last input); zero reuses it as-is, which is what a re-solve at a
    /// faster-than-node control rate wants between boundaries.
    pub shift_nodes: usize,
}

/// One receding-horizon solve.
///
/// Warm starting shifts the previous input plan by the crossed node
/// count and duplicates the last input; a cold start uses hover
/// inputs. The initial state is pinned, so the first node's online
/// correction (residual model at the measured body velocity) is a
/// constant of the problem and is evaluated here, inside the timed
/// call.
pub fn solve(
    x_init: &State,
    reference: &ReferenceWindow,
    corrections: Option<&CorrectionSet>,
    residual: Option<&ResidualModel>,
    warm: Option<WarmStart<'_>>,
    params: &QuadParams,
    cfg: &MpcConfig,
) -> Result<SolveResult> {
    let start = Instant::now();
    let n = cfg.nodes;
    if reference.nodes() != n {
        return Err(Error::InvalidInput(format!(
            "reference window has {} nodes, config expects {n}",
            reference.nodes()
        )));
    }
    let dt = cfg.node_dt();

    let plan = match cfg.mode {
        MpcMode::Nominal => ModePlan::Nominal,
        MpcMode::Precomputed => {
            let corr = corrections.ok_or_else(|| {
                Error::InvalidInput("precomputed mode requires a correction set".into())
            })?;
            if corr.nodes.len() != n {
                return Err(Error::InvalidInput(format!(
                    "correction set has {} entries, expected {n}",
                    corr.nodes.len()
                )));
            }
            let mut world: Vec<Vector3<f64>> =
                corr.nodes.iter().map(NodeCorrection::world_accel).collect();
            if let Some(model) = residual {
                // First node online from the measurement.
                let (mean, _) = residual_predict(model, &x_init.body_velocity());
                world[0] = rotate_raw(&x_init.q, &mean);
            }
            ModePlan::Precomputed { world }
        }
        MpcMode::Direct => {
            let model = residual.ok_or_else(|| {
                Error::InvalidInput("direct mode requires a residual model".into())
            })?;
            ModePlan::Direct {
                residual: model,
                node_dt: dt,
            }
        }
    };

    let mut inputs: Vec<ControlInput> = match warm {
        Some(w) if w.previous.inputs.len() == n => {
            let shift = w.shift_nodes.min(n);
            let last = *w.previous.inputs.last().expect("nonempty warm plan");
            let mut shifted: Vec<ControlInput> = w.previous.inputs[shift..].to_vec();
            shifted.resize(n, last);
            shifted
        }
        _ => vec![params.hover_input(); n],
    };

    let q_diag = DVector::from_column_slice(&cfg.q);
    let qt_diag = DVector::from_column_slice(&cfg.q_terminal);
    let r_diag = DVector::from_column_slice(&cfg.r);

    let mut status = SolveStatus::Ok;
    let mut kkt_residual = 0.0;
    let mut initial_kkt_residual = 0.0;
    let mut objective_trace = Vec::with_capacity(cfg.sqp_iters_per_step);
    let mut states: Vec<State> = Vec::new();

    for iter in 0..cfg.sqp_iters_per_step {
        // Rollout + linearization along the current plan.
        let mut a = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        states = Vec::with_capacity(n + 1);
        states.push(x_init.clone());
        for k in 0..n {
            let (accel, sens) = plan.correction(k, &states[k]);
            let (next, jac) = propagate_node(
                &states[k],
                &inputs[k],
                &accel,
                dt,
                cfg.rk4_substeps,
                params,
                true,
            )?;
            if !is_finite_state(&next) {
                return Err(Error::Solver(format!(
                    "non-finite state in rollout at node {}",
                    k + 1
                )));
            }
            let (mut a_k, b_k) = jac.expect("jacobians requested");
            if let Some(m) = sens {
                // Constant-over-interval acceleration adds dt*m to the
                // velocity rows and dt^2/2*m to the position rows.
                for r in 0..3 {
                    for c in 0..3 {
                        a_k[(quad::V + r, quad::V + c)] += dt * m[(r, c)];
                        a_k[(quad::P + r, quad::V + c)] += 0.5 * dt * dt * m[(r, c)];
                    }
                }
            }
            a.push(a_k);
            b.push(b_k);
            states.push(next);
        }

        let lp = LinearizedProblem {
            a,
            b,
            q: q_diag.clone(),
            q_terminal: qt_diag.clone(),
            r: r_diag.clone(),
            state_error: (0..=n)
                .map(|k| state_error(&states[k], &reference.states[k]))
                .collect(),
            input_error: (0..n)
                .map(|k| {
                    DVector::from_fn(DIM_INPUT, |i, _| {
                        inputs[k].thrusts[i] - reference.inputs[k].thrusts[i]
                    })
                })
                .collect(),
            lb: (0..n)
                .map(|k| DVector::from_fn(DIM_INPUT, |i, _| params.u_min - inputs[k].thrusts[i]))
                .collect(),
            ub: (0..n)
                .map(|k| DVector::from_fn(DIM_INPUT, |i, _| params.u_max - inputs[k].thrusts[i]))
                .collect(),
        };

        let boxqp = condense(&lp);
        if iter == 0 {
            initial_kkt_residual =
                projected_gradient_norm(&boxqp, &DVector::zeros(boxqp.g.len()));
        }
        let sol = solve_box_qp(
            &boxqp,
            &DVector::zeros(boxqp.g.len()),
            cfg.qp_kkt_tol,
            cfg.qp_max_iters,
        )?;
        if !sol.converged {
            status = SolveStatus::QpIterationLimit;
        }
        kkt_residual = sol.kkt_residual;

        for k in 0..n {
            for i in 0..DIM_INPUT {
                inputs[k].thrusts[i] = (inputs[k].thrusts[i] + sol.x[k * DIM_INPUT + i])
                    .clamp(params.u_min, params.u_max);
            }
        }

        // Re-roll with the stepped inputs for the objective trace and,
        // on the last iteration, the returned trajectory.
        states = vec![x_init.clone()];
        for k in 0..n {
            let (accel, _) = plan.correction(k, &states[k]);
            let (next, _) =
                propagate_node(&states[k], &inputs[k], &accel, dt, cfg.rk4_substeps, params, false)?;
            if !is_finite_state(&next) {
                return Err(Error::Solver(format!(
                    "non-finite state in rollout at node {}",
                    k + 1
                )));
            }
            states.push(next);
        }
        objective_trace.push(trajectory_objective(&states, &inputs, reference, cfg));
    }

    let objective = *objective_trace.last().expect("at least one iteration");
    Ok(SolveResult {
        states,
        inputs,
        sqp_iterations: cfg.sqp_iters_per_step,
        kkt_residual,
        initial_kkt_residual,
        objective,
        objective_trace,
        solve_time_ms: start.elapsed().as_secs_f64() * 1e3,
        status,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn hover_window(p: Vector3<f64>, params: &QuadParams, n: usize) -> ReferenceWindow {
        ReferenceWindow::new(
            vec![State::hover_at(p); n + 1],
            vec![params.hover_input(); n],
        )
        .unwrap()
    }

    fn cfg_with(mode: MpcMode) -> MpcConfig {
        MpcConfig {
            mode,
            ..Default::default()
        }
    }

    #[test]
    fn default_config_validates() {
        MpcConfig::default().validate().unwrap();
    }

    #[test]
    fn window_requires_matched_lengths() {
        let params = QuadParams::default();
        let err = ReferenceWindow::new(
            vec![State::hover_at(Vector3::zeros()); 3],
            vec![params.hover_input(); 3],
        );
        assert!(err.is_err());
    }

    #[test]
    fn window_aligns_quaternion_signs() {
        let params = QuadParams::default();
        let mut states = vec![State::hover_at(Vector3::zeros()); 3];
        states[1].q = -states[1].q;
        let w = ReferenceWindow::new(states, vec![params.hover_input(); 2]).unwrap();
        for k in 1..w.states.len() {
            assert!(w.states[k - 1].q.coords.dot(&w.states[k].q.coords) >= 0.0);
        }
    }

    #[test]
    fn stage_cost_zero_at_reference() {
        let params = QuadParams::default();
        let cfg = cfg_with(MpcMode::Nominal);
        let x = State::hover_at(Vector3::new(1.0, 2.0, 3.0));
        let u = params.hover_input();
        assert_eq!(stage_cost(&x, &u, &x, &u, &cfg), 0.0);
    }

    #[test]
    fn stage_cost_unit_offset() {
        let mut cfg = cfg_with(MpcMode::Nominal);
        cfg.q = [0.0; 13];
        cfg.q[0] = 1.0;
        cfg.q[1] = 1.0;
        cfg.q[2] = 1.0;
        cfg.r = [0.0; 4];
        let params = QuadParams::default();
        let x_ref = State::hover_at(Vector3::zeros());
        let x = State::hover_at(Vector3::new(1.0, 0.0, 0.0));
        let u = params.hover_input();
        assert_relative_eq!(stage_cost(&x, &u, &x_ref, &u, &cfg), 1.0);
    }

    #[test]
    fn stage_cost_handles_quaternion_double_cover() {
        let cfg = cfg_with(MpcMode::Nominal);
        let params = QuadParams::default();
        let x = State::hover_at(Vector3::zeros());
        let mut x_ref = x.clone();
        x_ref.q = -x_ref.q;
        let u = params.hover_input();
        assert_eq!(stage_cost(&x, &u, &x_ref, &u, &cfg), 0.0);
    }

    #[test]
    fn hover_regulation_returns_exact_hover_thrust() {
        let params = QuadParams::default();
        let cfg = cfg_with(MpcMode::Nominal);
        let p = Vector3::new(0.0, 0.0, 2.5);
        let window = hover_window(p, &params, cfg.nodes);
        let result = solve(
            &State::hover_at(p),
            &window,
            None,
            None,
            None,
            &params,
            &cfg,
        )
        .unwrap();
        let expected = params.hover_thrust_per_rotor();
        for u in &result.inputs {
            for t in u.thrusts {
                assert!((t - expected).abs() <= 1e-6, "thrust {t} vs {expected}");
            }
        }
        assert_eq!(result.status, SolveStatus::Ok);
        assert_eq!(result.states[0], State::hover_at(p));
    }

    #[test]
    fn unreachable_climb_saturates_all_rotors() {
        let params = QuadParams::default();
        let cfg = cfg_with(MpcMode::Nominal);
        let window = hover_window(Vector3::new(0.0, 0.0, 100.0), &params, cfg.nodes);
        let result = solve(
            &State::hover_at(Vector3::zeros()),
            &window,
            None,
            None,
            None,
            &params,
            &cfg,
        )
        .unwrap();
        assert_eq!(result.status, SolveStatus::Ok);
        for u in &result.inputs {
            for t in u.thrusts {
                assert_eq!(t, params.u_max);
            }
        }
    }

    #[test]
    fn known_bias_corrections_cancel_one_step_error() {
        let params = QuadParams::default();
        let mut cfg = cfg_with(MpcMode::Precomputed);
        cfg.sqp_iters_per_step = 2;
        let bias = Vector3::new(0.5, 0.0, 0.0);
        let p = Vector3::new(0.0, 0.0, 2.0);
        let window = hover_window(p, &params, cfg.nodes);
        let corr = CorrectionSet {
            nodes: vec![
                NodeCorrection {
                    accel_body: bias,
                    attitude: Quaternion::new(1.0, 0.0, 0.0, 0.0),
                };
                cfg.nodes
            ],
            source: CorrectionSource::ReferenceSchedule,
        };
        let x0 = State::hover_at(p);
        let result = solve(&x0, &window, Some(&corr), None, None, &params, &cfg).unwrap();

        // Plant with the same constant bias, integrated identically.
        let correction = Correction::new(bias);
        let mut plant = x0.clone();
        let h = cfg.node_dt() / cfg.rk4_substeps as f64;
        for _ in 0..cfg.rk4_substeps {
            plant = quad::rk4_step(
                &plant,
                &result.inputs[0],
                h,
                &params,
                Some(&correction),
                &Quaternion::new(1.0, 0.0, 0.0, 0.0),
            )
            .unwrap();
        }
        let gap = (result.states[1].to_vec() - plant.to_vec()).norm();
        assert!(gap <= 1e-6, "one-step prediction gap {gap}");
    }

    #[test]
    fn zero_corrections_match_nominal_bitwise() {
        let params = QuadParams::default();
        let nominal_cfg = cfg_with(MpcMode::Nominal);
        let precomp_cfg = cfg_with(MpcMode::Precomputed);
        let mut x0 = State::hover_at(Vector3::new(0.3, -0.4, 2.0));
        x0.v = Vector3::new(0.5, 0.2, -0.1);
        x0.w = Vector3::new(0.1, -0.2, 0.05);
        let window = hover_window(Vector3::new(0.0, 0.0, 2.0), &params, nominal_cfg.nodes);

        let a = solve(&x0, &window, None, None, None, &params, &nominal_cfg).unwrap();
        let zeros = CorrectionSet::zeros(precomp_cfg.nodes);
        let b = solve(&x0, &window, Some(&zeros), None, None, &params, &precomp_cfg).unwrap();

        for (ua, ub) in a.inputs.iter().zip(&b.inputs) {
            for i in 0..4 {
                assert_eq!(ua.thrusts[i].to_bits(), ub.thrusts[i].to_bits());
            }
        }
        for (sa, sb) in a.states.iter().zip(&b.states) {
            let (va, vb) = (sa.to_vec(), sb.to_vec());
            for i in 0..DIM_STATE {
                assert_eq!(va[i].to_bits(), vb[i].to_bits());
            }
        }
    }

    #[test]
    fn objective_is_monotone_over_iterations_on_frozen_problem() {
        let params = QuadParams::default();
        let mut cfg = cfg_with(MpcMode::Nominal);
        cfg.sqp_iters_per_step = 8;
        let mut x0 = State::hover_at(Vector3::new(0.5, -0.3, 2.2));
        x0.v = Vector3::new(0.4, 0.0, -0.2);
        let window = hover_window(Vector3::new(0.0, 0.0, 2.0), &params, cfg.nodes);
        let result = solve(&x0, &window, None, None, None, &params, &cfg).unwrap();
        for pair in result.objective_trace.windows(2) {
            assert!(
                pair[1] <= pair[0] + 1e-9,
                "objective increased: {:?}",
                result.objective_trace
            );
        }
    }

    #[test]
    fn inputs_respect_bounds_on_randomized_problems() {
        let params = QuadParams::default();
        let mut cfg = cfg_with(MpcMode::Nominal);
        cfg.nodes = 5;
        cfg.horizon_t = 0.5;
        let mut rng = crate::rng::NoiseRng::seed_from_u64(77);
        let mut warm: Option<SolveResult> = None;
        for _ in 0..1000 {
            let target = rng.normal_vector3() * 3.0;
            let mut x0 = State::hover_at(rng.normal_vector3() * 2.0);
            x0.v = rng.normal_vector3() * 3.0;
            x0.w = rng.normal_vector3();
            let window = hover_window(target, &params, cfg.nodes);
            let warm_ref = warm.as_ref().map(|previous| WarmStart {
                previous,
                shift_nodes: 1,
            });
            let result = solve(&x0, &window, None, None, warm_ref, &params, &cfg).unwrap();
            for u in &result.inputs {
                for t in u.thrusts {
                    assert!(t >= params.u_min - 1e-9 && t <= params.u_max + 1e-9);
                }
            }
            warm = Some(result);
        }
    }
}
