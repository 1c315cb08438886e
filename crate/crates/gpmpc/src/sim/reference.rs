//! Figure-eight reference trajectory with differential-flatness
//! attitude.
//!
//! The planar path `x = 5 cos(s) - 5, y = 5 sin(s) cos(s), z = 2.5`
//! (with `s = sqrt(2) * phase`) is traversed under a ramped phase-rate
//! profile: the rate rises from zero over the first quarter of the run,
//! holds, and descends over the last quarter, so the vehicle starts and
//! ends at rest. A rate of 1.0 corresponds to a 10 m/s peak speed;
//! `speed_scale` scales the rate directly.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

use crate::mpc::{MpcConfig, ReferenceWindow};
use crate::quad::{quat_log, quat_mul, ControlInput, QuadParams, State};
use crate::Result;

const SQRT2: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Clone)]
pub struct LemniscateReference {
    /// Phase-rate multiplier; 1.0 reaches the analytic 10 m/s peak.
    pub speed_scale: f64,
    /// Time after which the reference holds its final point, s.
    pub duration: f64,
    /// Fraction of the duration spent ramping up (and again down).
    pub ramp_fraction: f64,
    params: QuadParams,
}

impl LemniscateReference {
    pub fn new(speed_scale: f64, duration: f64, ramp_fraction: f64, params: &QuadParams) -> Self {
        Self {
            speed_scale,
            duration,
            ramp_fraction: ramp_fraction.clamp(0.0, 0.5),
            params: params.clone(),
        }
    }

    /// Phase and its first two time derivatives. The rate rises from 0
    /// to `speed_scale` over the first `ramp_fraction` of the run along
    /// a smoothstep, holds, and descends symmetrically. The smoothstep
    /// keeps the rate C1, so the demanded acceleration (and with it the
    /// flatness attitude) stays continuous at the ramp corners; a
    /// piecewise-linear rate would step the attitude there and kick the
    /// controller hard at speed.
    fn phase(&self, t: f64) -> (f64, f64, f64) {
        let total = self.duration;
        let f = self.ramp_fraction;
        let scale = self.speed_scale;
        let ramp = f * total;

        if t <= 0.0 {
            return (0.0, 0.0, 0.0);
        }
        if t >= total {
            let full = if f > 0.0 { (1.0 - f) * total } else { total };
            return (scale * full, 0.0, 0.0);
        }
        if f == 0.0 {
            return (scale * t, scale, 0.0);
        }
        // Smoothstep r = 3u^2 - 2u^3 with integral u^3 - u^4/2 (times
        // the ramp length); both ramps cover scale * ramp / 2 of phase.
        let smooth = |u: f64| (3.0 - 2.0 * u) * u * u;
        let smooth_int = |u: f64| (u - 0.5 * u * u) * u * u * u;
        if t < ramp {
            let u = t / ramp;
            (
                scale * ramp * smooth_int(u),
                scale * smooth(u),
                scale * 6.0 * u * (1.0 - u) / ramp,
            )
        } else if t <= total - ramp {
            (scale * (ramp / 2.0 + (t - ramp)), scale, 0.0)
        } else {
            let u = (total - t) / ramp;
            (
                scale * ((1.0 - f) * total - ramp * smooth_int(u)),
                scale * smooth(u),
                -scale * 6.0 * u * (1.0 - u) / ramp,
            )
        }
    }

    /// Position, velocity and acceleration of the flat output.
    fn flat_output(&self, t: f64) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        let (s, s_dot, s_ddot) = self.phase(t);
        let a1 = SQRT2 * s;
        let a2 = 2.0 * SQRT2 * s;

        let p = Vector3::new(5.0 * (a1.cos() - 1.0), 2.5 * a2.sin(), 2.5);
        // Derivatives with respect to the phase.
        let dp = Vector3::new(-5.0 * SQRT2 * a1.sin(), 5.0 * SQRT2 * a2.cos(), 0.0);
        let ddp = Vector3::new(-10.0 * a1.cos(), -20.0 * a2.sin(), 0.0);

        let v = dp * s_dot;
        let a = dp * s_ddot + ddp * (s_dot * s_dot);
        (p, v, a)
    }

    /// Zero-yaw attitude whose body z axis carries the demanded thrust.
    fn flat_attitude(&self, accel: &Vector3<f64>) -> Quaternion<f64> {
        let thrust_dir = accel - self.params.gravity_vector();
        let z_b = thrust_dir.normalize();
        let x_c = Vector3::x();
        let y_b = z_b.cross(&x_c).normalize();
        let x_b = y_b.cross(&z_b);
        let rot = Matrix3::from_columns(&[x_b, y_b, z_b]);
        let unit = UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(rot));
        let q = unit.into_inner();
        if q.w < 0.0 {
            -q
        } else {
            q
        }
    }

    /// Reference state and feed-forward input at time `t`.
    pub fn sample(&self, t: f64) -> (State, ControlInput) {
        let (p, v, a) = self.flat_output(t);
        let q = self.flat_attitude(&a);

        // Body rates from symmetric quaternion differencing. The step
        // is kept coarse so the attitude-rate kinks at the ramp corners
        // average out instead of aliasing into the rate reference.
        let h = 1e-2;
        let q_minus = align(&self.flat_attitude(&self.flat_output(t - h).2), &q);
        let q_plus = align(&self.flat_attitude(&self.flat_output(t + h).2), &q);
        let rel = quat_mul(&q_minus.conjugate(), &q_plus);
        let w = quat_log(&rel) / (2.0 * h);

        let thrust_total = self.params.mass * (a - self.params.gravity_vector()).norm();
        let state = State::new(p, q, v, w);
        (state, ControlInput::uniform(thrust_total / 4.0))
    }

    /// Sample one horizon starting at `t` on the controller's node grid.
    pub fn window(&self, t: f64, cfg: &MpcConfig) -> Result<ReferenceWindow> {
        let dt = cfg.node_dt();
        let mut states = Vec::with_capacity(cfg.nodes + 1);
        let mut inputs = Vec::with_capacity(cfg.nodes);
        for k in 0..=cfg.nodes {
            let (s, u) = self.sample(t + k as f64 * dt);
            states.push(s);
            if k < cfg.nodes {
                inputs.push(u);
            }
        }
        ReferenceWindow::new(states, inputs)
    }
}

fn align(q: &Quaternion<f64>, reference: &Quaternion<f64>) -> Quaternion<f64> {
    if q.coords.dot(&reference.coords) < 0.0 {
        -*q
    } else {
        *q
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn reference(scale: f64, duration: f64, ramp: f64) -> LemniscateReference {
        LemniscateReference::new(scale, duration, ramp, &QuadParams::default())
    }

    #[test]
    fn starts_at_rest_on_the_figure_eight() {
        let r = reference(1.0, 16.0, 0.25);
        let (s, u) = r.sample(0.0);
        assert_relative_eq!(s.p, Vector3::new(0.0, 0.0, 2.5), epsilon = 1e-12);
        assert_relative_eq!(s.v.norm(), 0.0, epsilon = 1e-12);
        // Hover feed-forward at zero acceleration.
        let hover = QuadParams::default().hover_thrust_per_rotor();
        assert_relative_eq!(u.thrusts[0], hover, epsilon = 1e-9);
    }

    #[test]
    fn full_rate_period_returns_to_start() {
        let r = reference(1.0, 100.0, 0.0);
        let period = std::f64::consts::PI * SQRT2;
        let (s, _) = r.sample(period);
        assert_relative_eq!(s.p, Vector3::new(0.0, 0.0, 2.5), epsilon = 1e-9);
    }

    #[test]
    fn peak_speed_at_full_rate_is_ten() {
        let r = reference(1.0, 100.0, 0.0);
        let mut peak: f64 = 0.0;
        for i in 0..5000 {
            let t = 6.3 * i as f64 / 5000.0;
            peak = peak.max(r.sample(t).0.v.norm());
        }
        assert_relative_eq!(peak, 10.0, epsilon = 1e-3);
    }

    #[test]
    fn analytic_velocity_matches_position_differences() {
        let r = reference(0.8, 20.0, 0.25);
        let h = 1e-5;
        for &t in &[1.1, 4.0, 9.7, 16.2] {
            let (s, _) = r.sample(t);
            let (pp, _, _) = r.flat_output(t + h);
            let (pm, _, _) = r.flat_output(t - h);
            let fd = (pp - pm) / (2.0 * h);
            assert!((s.v - fd).norm() <= 1e-6, "t={t}: {} vs {fd:?}", s.v);
        }
    }

    #[test]
    fn analytic_acceleration_matches_velocity_differences() {
        let r = reference(0.8, 20.0, 0.25);
        let h = 1e-5;
        for &t in &[1.1, 4.0, 9.7, 16.2] {
            let (_, _, a) = r.flat_output(t);
            let (_, vp, _) = r.flat_output(t + h);
            let (_, vm, _) = r.flat_output(t - h);
            let fd = (vp - vm) / (2.0 * h);
            assert!((a - fd).norm() <= 1e-5, "t={t}: {a:?} vs {fd:?}");
        }
    }

    #[test]
    fn attitude_is_unit_and_body_rates_are_finite() {
        let r = reference(1.0, 16.0, 0.25);
        for i in 0..160 {
            let t = 16.0 * i as f64 / 160.0;
            let (s, _) = r.sample(t);
            assert!((s.q.norm() - 1.0).abs() <= 1e-9);
            assert!(s.w.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn holds_final_point_after_the_run() {
        let r = reference(1.0, 10.0, 0.25);
        let (end, _) = r.sample(10.0);
        let (later, _) = r.sample(14.0);
        assert_eq!(end.p, later.p);
        assert_relative_eq!(later.v.norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn windows_line_up_with_the_node_grid() {
        let r = reference(1.0, 16.0, 0.25);
        let cfg = MpcConfig::default();
        let w = r.window(3.0, &cfg).unwrap();
        assert_eq!(w.states.len(), cfg.nodes + 1);
        let (direct, _) = r.sample(3.0 + 4.0 * cfg.node_dt());
        assert_relative_eq!(w.states[4].p, direct.p, epsilon = 1e-12);
    }
}
