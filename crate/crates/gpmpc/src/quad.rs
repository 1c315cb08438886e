//! Quadrotor rigid-body model.
//!
//! State layout is 13-dimensional: world position, attitude as a unit
//! quaternion (w, x, y, z), world linear velocity, body angular rates.
//! Rotor thrusts are the control input. The module provides the
//! continuous dynamics, an RK4 discrete step with an optional additive
//! acceleration correction, and analytic sensitivities of the discrete
//! map (including the quaternion renormalization at the end of a step).

use nalgebra::{Matrix3, Quaternion, SMatrix, SVector, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Raw 13-vector state: `[p(3), q(w,x,y,z), v(3), w(3)]`.
pub type StateVec = SVector<f64, 13>;
/// Sensitivity of one discrete step w.r.t. the state.
pub type StateJacobian = SMatrix<f64, 13, 13>;
/// Sensitivity of one discrete step w.r.t. the four rotor thrusts.
pub type InputJacobian = SMatrix<f64, 13, 4>;

pub const DIM_STATE: usize = 13;
pub const DIM_INPUT: usize = 4;

pub(crate) const P: usize = 0;
pub(crate) const Q: usize = 3;
pub(crate) const V: usize = 7;
pub(crate) const W: usize = 10;

/// Physical parameters of the vehicle.
///
/// Defaults describe a Hummingbird-class quadrotor.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct QuadParams {
    /// Vehicle mass, kg.
    pub mass: f64,
    /// Diagonal of the inertia matrix (J_x, J_y, J_z), kg m^2.
    pub inertia_diag: [f64; 3],
    /// Rotor displacement from the center of mass along body x, m.
    pub d_x: f64,
    /// Rotor displacement from the center of mass along body y, m.
    pub d_y: f64,
    /// Rotor drag torque constant, m.
    pub c_tau: f64,
    /// World-frame gravity along z, m/s^2 (negative: pointing down).
    pub gravity: f64,
    /// Minimum thrust per rotor, N.
    pub u_min: f64,
    /// Maximum thrust per rotor, N.
    pub u_max: f64,
}

impl Default for QuadParams {
    fn default() -> Self {
        Self {
            mass: 0.68,
            inertia_diag: [0.007, 0.007, 0.012],
            d_x: 0.12,
            d_y: 0.12,
            c_tau: 0.016,
            gravity: -9.81,
            u_min: 0.0,
            u_max: 4.5,
        }
    }
}

impl QuadParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0) {
            return Err(Error::Config(format!("mass must be > 0, got {}", self.mass)));
        }
        if self.inertia_diag.iter().any(|j| !(*j > 0.0)) {
            return Err(Error::Config(format!(
                "inertia entries must be > 0, got {:?}",
                self.inertia_diag
            )));
        }
        if !(self.d_x > 0.0 && self.d_y > 0.0 && self.c_tau > 0.0) {
            return Err(Error::Config(
                "rotor geometry (d_x, d_y, c_tau) must be > 0".into(),
            ));
        }
        if !(self.gravity < 0.0) {
            return Err(Error::Config(format!(
                "gravity is the world-z component and must be negative, got {}",
                self.gravity
            )));
        }
        if !(0.0 <= self.u_min && self.u_min < self.u_max) {
            return Err(Error::Config(format!(
                "thrust bounds must satisfy 0 <= u_min < u_max, got [{}, {}]",
                self.u_min, self.u_max
            )));
        }
        Ok(())
    }

    pub fn gravity_vector(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, self.gravity)
    }

    /// Per-rotor thrust that exactly balances gravity.
    pub fn hover_thrust_per_rotor(&self) -> f64 {
        self.mass * (-self.gravity) / 4.0
    }

    pub fn hover_input(&self) -> ControlInput {
        ControlInput::uniform(self.hover_thrust_per_rotor())
    }
}

/// Vehicle state. Fields are public; every operation that returns a
/// `State` keeps the quaternion unit-norm to within 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    /// World position, m.
    pub p: Vector3<f64>,
    /// Attitude quaternion rotating body vectors into the world frame.
    pub q: Quaternion<f64>,
    /// World linear velocity, m/s.
    pub v: Vector3<f64>,
    /// Body angular rates, rad/s.
    pub w: Vector3<f64>,
}

impl State {
    pub fn new(p: Vector3<f64>, q: Quaternion<f64>, v: Vector3<f64>, w: Vector3<f64>) -> Self {
        Self { p, q, v, w }
    }

    /// Hover at `p`: identity attitude, zero rates.
    pub fn hover_at(p: Vector3<f64>) -> Self {
        Self {
            p,
            q: Quaternion::new(1.0, 0.0, 0.0, 0.0),
            v: Vector3::zeros(),
            w: Vector3::zeros(),
        }
    }

    pub fn to_vec(&self) -> StateVec {
        let mut x = StateVec::zeros();
        x.fixed_rows_mut::<3>(P).copy_from(&self.p);
        x[Q] = self.q.w;
        x[Q + 1] = self.q.i;
        x[Q + 2] = self.q.j;
        x[Q + 3] = self.q.k;
        x.fixed_rows_mut::<3>(V).copy_from(&self.v);
        x.fixed_rows_mut::<3>(W).copy_from(&self.w);
        x
    }

    pub fn from_vec(x: &StateVec) -> Self {
        Self {
            p: x.fixed_rows::<3>(P).into_owned(),
            q: Quaternion::new(x[Q], x[Q + 1], x[Q + 2], x[Q + 3]),
            v: x.fixed_rows::<3>(V).into_owned(),
            w: x.fixed_rows::<3>(W).into_owned(),
        }
    }

    /// Velocity expressed in the body frame of this state's attitude.
    pub fn body_velocity(&self) -> Vector3<f64> {
        rotate_raw(&self.q.conjugate(), &self.v)
    }
}

/// Per-rotor thrusts, N.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlInput {
    pub thrusts: [f64; 4],
}

impl ControlInput {
    pub fn new(thrusts: [f64; 4]) -> Self {
        Self { thrusts }
    }

    pub fn uniform(t: f64) -> Self {
        Self { thrusts: [t; 4] }
    }

    pub fn as_vector(&self) -> Vector4<f64> {
        Vector4::from(self.thrusts)
    }
}

/// Body-frame acceleration correction, m/s^2. The frame rotation used to
/// express it in the world frame is supplied by the caller alongside.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correction {
    pub a_body: Vector3<f64>,
}

impl Correction {
    pub fn new(a_body: Vector3<f64>) -> Self {
        Self { a_body }
    }

    pub fn zero() -> Self {
        Self {
            a_body: Vector3::zeros(),
        }
    }
}

/// Hamilton product written out; nalgebra's `Mul` does the same but the
/// explicit form keeps this module self-contained for the Jacobians.
pub fn quat_mul(a: &Quaternion<f64>, b: &Quaternion<f64>) -> Quaternion<f64> {
    Quaternion::new(
        a.w * b.w - a.i * b.i - a.j * b.j - a.k * b.k,
        a.w * b.i + a.i * b.w + a.j * b.k - a.k * b.j,
        a.w * b.j - a.i * b.k + a.j * b.w + a.k * b.i,
        a.w * b.k + a.i * b.j - a.j * b.i + a.k * b.w,
    )
}

/// q v q-bar without any unit-norm check. For non-unit q this scales the
/// result by |q|^2, which is exactly the vector field the RK4 stages
/// integrate through.
pub fn rotate_raw(q: &Quaternion<f64>, v: &Vector3<f64>) -> Vector3<f64> {
    let r = quat_mul(&quat_mul(q, &Quaternion::from_imag(*v)), &q.conjugate());
    r.imag()
}

/// Rotation matrix of a (unit) quaternion; columns are the rotated
/// basis vectors.
pub fn rotation_matrix(q: &Quaternion<f64>) -> Matrix3<f64> {
    Matrix3::from_columns(&[
        rotate_raw(q, &Vector3::x()),
        rotate_raw(q, &Vector3::y()),
        rotate_raw(q, &Vector3::z()),
    ])
}

pub fn quat_from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Quaternion<f64> {
    let half = 0.5 * angle;
    let s = half.sin();
    Quaternion::new(half.cos(), axis.x * s, axis.y * s, axis.z * s)
}

/// Rotation vector (axis * angle) of a quaternion, assuming it is close
/// enough to unit norm for atan2 to be meaningful.
pub fn quat_log(q: &Quaternion<f64>) -> Vector3<f64> {
    let v = q.imag();
    let n = v.norm();
    if n < 1e-14 {
        return Vector3::zeros();
    }
    // Map to the hemisphere with positive scalar part first.
    let (w, v) = if q.w < 0.0 { (-q.w, -v) } else { (q.w, v) };
    let angle = 2.0 * n.atan2(w);
    v * (angle / n)
}

/// Rotate `v` by the unit quaternion `q`.
///
/// Errors if `q` deviates from unit norm by more than 1e-9.
pub fn quat_rotate(q: &Quaternion<f64>, v: &Vector3<f64>) -> Result<Vector3<f64>> {
    let norm = q.norm();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "quaternion norm {norm} is not unit within 1e-9"
        )));
    }
    Ok(rotate_raw(q, v))
}

/// Collective thrust and body torque produced by the four rotors.
///
/// Rotor order: 0 front-left, 1 back-left, 2 back-right, 3 front-right,
/// which yields the sign pattern below.
pub fn mix_thrusts(u: &ControlInput, params: &QuadParams) -> (Vector3<f64>, Vector3<f64>) {
    let [t0, t1, t2, t3] = u.thrusts;
    let thrust = Vector3::new(0.0, 0.0, t0 + t1 + t2 + t3);
    let torque = Vector3::new(
        params.d_y * (-t0 - t1 + t2 + t3),
        params.d_x * (-t0 + t1 + t2 - t3),
        params.c_tau * (-t0 + t1 - t2 + t3),
    );
    (thrust, torque)
}

/// Torque sensitivity to the four thrusts (rows x, y, z).
fn torque_mixing_matrix(params: &QuadParams) -> SMatrix<f64, 3, 4> {
    SMatrix::<f64, 3, 4>::from_rows(&[
        [-params.d_y, -params.d_y, params.d_y, params.d_y].into(),
        [-params.d_x, params.d_x, params.d_x, -params.d_x].into(),
        [-params.c_tau, params.c_tau, -params.c_tau, params.c_tau].into(),
    ])
}

/// Time derivative of the raw state. `extra_accel` is a world-frame
/// acceleration added to the velocity rows (used for corrections and for
/// the drag-augmented plant).
pub(crate) fn dynamics_raw(
    x: &StateVec,
    u: &ControlInput,
    params: &QuadParams,
    extra_accel: &Vector3<f64>,
) -> StateVec {
    let q = Quaternion::new(x[Q], x[Q + 1], x[Q + 2], x[Q + 3]);
    let v = x.fixed_rows::<3>(V).into_owned();
    let w = x.fixed_rows::<3>(W).into_owned();

    let (thrust_b, torque_b) = mix_thrusts(u, params);
    let j = Vector3::from(params.inertia_diag);

    let q_dot = quat_mul(&q, &Quaternion::from_imag(w * 0.5));
    let v_dot = rotate_raw(&q, &thrust_b) / params.mass + params.gravity_vector() + extra_accel;
    let jw = j.component_mul(&w);
    let w_dot = (torque_b - w.cross(&jw)).component_div(&j);

    let mut dx = StateVec::zeros();
    dx.fixed_rows_mut::<3>(P).copy_from(&v);
    dx[Q] = q_dot.w;
    dx[Q + 1] = q_dot.i;
    dx[Q + 2] = q_dot.j;
    dx[Q + 3] = q_dot.k;
    dx.fixed_rows_mut::<3>(V).copy_from(&v_dot);
    dx.fixed_rows_mut::<3>(W).copy_from(&w_dot);
    dx
}

/// Continuous dynamics of the nominal model as a 13-vector.
pub fn continuous_dynamics(x: &State, u: &ControlInput, params: &QuadParams) -> StateVec {
    dynamics_raw(&x.to_vec(), u, params, &Vector3::zeros())
}

/// One classical RK4 step of an arbitrary raw-state vector field.
pub(crate) fn rk4_raw<F>(f: F, x: &StateVec, dt: f64) -> StateVec
where
    F: Fn(&StateVec) -> StateVec,
{
    let k1 = f(x);
    let k2 = f(&(x + k1 * (dt * 0.5)));
    let k3 = f(&(x + k2 * (dt * 0.5)));
    let k4 = f(&(x + k3 * dt));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

pub(crate) fn normalize_quat_rows(x: &mut StateVec) {
    let n = (x[Q] * x[Q] + x[Q + 1] * x[Q + 1] + x[Q + 2] * x[Q + 2] + x[Q + 3] * x[Q + 3]).sqrt();
    for i in Q..Q + 4 {
        x[i] /= n;
    }
}

/// Discrete step of the nominal model over `dt` seconds.
///
/// When a correction is supplied, `quat_rotate(q_corr, corr.a_body)` is
/// added to the velocity derivative as a constant world-frame
/// acceleration for the whole step, so the velocity gains exactly
/// `a * dt` and the position `a * dt^2 / 2`. The returned quaternion is
/// renormalized.
pub fn rk4_step(
    x: &State,
    u: &ControlInput,
    dt: f64,
    params: &QuadParams,
    corr: Option<&Correction>,
    q_corr: &Quaternion<f64>,
) -> Result<State> {
    if dt < 0.0 {
        return Err(Error::InvalidInput(format!("negative time step {dt}")));
    }
    if dt == 0.0 {
        return Ok(x.clone());
    }
    let accel = match corr {
        Some(c) => rotate_raw(q_corr, &c.a_body),
        None => Vector3::zeros(),
    };
    let mut next = rk4_raw(
        |xv| dynamics_raw(xv, u, params, &accel),
        &x.to_vec(),
        dt,
    );
    normalize_quat_rows(&mut next);
    Ok(State::from_vec(&next))
}

/// Jacobian of the continuous dynamics w.r.t. the raw state.
fn continuous_jacobian_x(x: &StateVec, u: &ControlInput, params: &QuadParams) -> StateJacobian {
    let q = Quaternion::new(x[Q], x[Q + 1], x[Q + 2], x[Q + 3]);
    let w = x.fixed_rows::<3>(W).into_owned();
    let (thrust_b, _) = mix_thrusts(u, params);
    let j = Vector3::from(params.inertia_diag);

    let mut fx = StateJacobian::zeros();

    // d(p_dot)/dv = I
    for i in 0..3 {
        fx[(P + i, V + i)] = 1.0;
    }

    // d(q_dot)/dq = 1/2 * right-multiplication matrix of (0, w)
    let (wx, wy, wz) = (w.x, w.y, w.z);
    let rw = [
        [0.0, -wx, -wy, -wz],
        [wx, 0.0, wz, -wy],
        [wy, -wz, 0.0, wx],
        [wz, wy, -wx, 0.0],
    ];
    for (r, row) in rw.iter().enumerate() {
        for (c, val) in row.iter().enumerate() {
            fx[(Q + r, Q + c)] = 0.5 * val;
        }
    }

    // d(q_dot)/dw = 1/2 * imaginary columns of the left-multiplication
    // matrix of q
    let lw = [
        [-q.i, -q.j, -q.k],
        [q.w, -q.k, q.j],
        [q.k, q.w, -q.i],
        [-q.j, q.i, q.w],
    ];
    for (r, row) in lw.iter().enumerate() {
        for (c, val) in row.iter().enumerate() {
            fx[(Q + r, W + c)] = 0.5 * val;
        }
    }

    // d(v_dot)/dq: derivative of q (0,T) q-bar, column per quaternion
    // component. The product is quadratic in q, so each column is
    // e_c (0,T) q-bar + q (0,T) e_c-bar.
    let t_quat = Quaternion::from_imag(thrust_b);
    for c in 0..4 {
        let mut e = Quaternion::new(0.0, 0.0, 0.0, 0.0);
        match c {
            0 => e.w = 1.0,
            1 => e.i = 1.0,
            2 => e.j = 1.0,
            _ => e.k = 1.0,
        }
        let col = (quat_mul(&quat_mul(&e, &t_quat), &q.conjugate())
            + quat_mul(&quat_mul(&q, &t_quat), &e.conjugate()))
        .imag()
            / params.mass;
        for r in 0..3 {
            fx[(V + r, Q + c)] = col[r];
        }
    }

    // d(w_dot)/dw = -J^-1 (skew(w) J - skew(J w))
    let jw = j.component_mul(&w);
    let m = Matrix3::from_diagonal(&j.map(|x| 1.0 / x))
        * (skew(&w) * Matrix3::from_diagonal(&j) - skew(&jw));
    for r in 0..3 {
        for c in 0..3 {
            fx[(W + r, W + c)] = -m[(r, c)];
        }
    }

    fx
}

/// Jacobian of the continuous dynamics w.r.t. the thrusts.
fn continuous_jacobian_u(x: &StateVec, params: &QuadParams) -> InputJacobian {
    let q = Quaternion::new(x[Q], x[Q + 1], x[Q + 2], x[Q + 3]);
    let j = Vector3::from(params.inertia_diag);

    let mut fu = InputJacobian::zeros();
    // Each rotor adds 1 N of collective thrust along body z.
    let dv = rotate_raw(&q, &Vector3::z()) / params.mass;
    for c in 0..4 {
        for r in 0..3 {
            fu[(V + r, c)] = dv[r];
        }
    }
    let tau = torque_mixing_matrix(params);
    for r in 0..3 {
        for c in 0..4 {
            fu[(W + r, c)] = tau[(r, c)] / j[r];
        }
    }
    fu
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Sensitivities of `rk4_step` w.r.t. state and input, propagated
/// analytically through the four stages and the final quaternion
/// renormalization. The additive correction is constant in both state
/// and input, so it contributes nothing here; the argument is kept so
/// the sensitivities are evaluated along the same trajectory the step
/// itself takes.
pub fn discrete_jacobians(
    x: &State,
    u: &ControlInput,
    dt: f64,
    params: &QuadParams,
    corr: Option<&Correction>,
    q_corr: &Quaternion<f64>,
) -> Result<(StateJacobian, InputJacobian)> {
    if dt <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "discrete_jacobians requires dt > 0, got {dt}"
        )));
    }
    let accel = match corr {
        Some(c) => rotate_raw(q_corr, &c.a_body),
        None => Vector3::zeros(),
    };
    let x0 = x.to_vec();
    let f = |xv: &StateVec| dynamics_raw(xv, u, params, &accel);
    let eye = StateJacobian::identity();

    let k1 = f(&x0);
    let k1x = continuous_jacobian_x(&x0, u, params);
    let k1u = continuous_jacobian_u(&x0, params);

    let x2 = x0 + k1 * (dt * 0.5);
    let fx2 = continuous_jacobian_x(&x2, u, params);
    let k2 = f(&x2);
    let k2x = fx2 * (eye + k1x * (dt * 0.5));
    let k2u = fx2 * (k1u * (dt * 0.5)) + continuous_jacobian_u(&x2, params);

    let x3 = x0 + k2 * (dt * 0.5);
    let fx3 = continuous_jacobian_x(&x3, u, params);
    let k3 = f(&x3);
    let k3x = fx3 * (eye + k2x * (dt * 0.5));
    let k3u = fx3 * (k2u * (dt * 0.5)) + continuous_jacobian_u(&x3, params);

    let x4 = x0 + k3 * dt;
    let fx4 = continuous_jacobian_x(&x4, u, params);
    let k4x = fx4 * (eye + k3x * dt);
    let k4u = fx4 * (k3u * dt) + continuous_jacobian_u(&x4, params);

    let mut a = eye + (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * (dt / 6.0);
    let mut b = (k1u + k2u * 2.0 + k3u * 2.0 + k4u) * (dt / 6.0);

    // Renormalization Jacobian: d(q/|q|)/dq = (I - qh qh^T)/|q| applied
    // to the quaternion rows of the raw step output.
    let k4 = f(&x4);
    let raw = x0 + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    let qraw = Vector4::new(raw[Q], raw[Q + 1], raw[Q + 2], raw[Q + 3]);
    let n = qraw.norm();
    let qh = qraw / n;
    let proj = (SMatrix::<f64, 4, 4>::identity() - qh * qh.transpose()) / n;

    let qa = proj * a.fixed_rows::<4>(Q).into_owned();
    a.fixed_rows_mut::<4>(Q).copy_from(&qa);
    let qb = proj * b.fixed_rows::<4>(Q).into_owned();
    b.fixed_rows_mut::<4>(Q).copy_from(&qb);

    Ok((a, b))
}
