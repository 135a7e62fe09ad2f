//! Class-specific state estimation: a linear Kalman filter over a
//! constant-velocity model and an extended Kalman filter over a constant
//! yaw-rate and acceleration (CTRA) model.
//!
//! Both models share the leading seven state entries with the box
//! observation `(x, y, z, yaw, l, w, h)`. The trailing three are
//! `(vx, vy, vz)` for CV and `(v, a, ω)` for CYRA.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{wrap_angle, Box3D, MotionModelKind};

pub const STATE_DIM: usize = 10;
pub const OBS_DIM: usize = 7;

pub type StateVec = SVector<f64, STATE_DIM>;
pub type StateCov = SMatrix<f64, STATE_DIM, STATE_DIM>;
pub type ObsVec = SVector<f64, OBS_DIM>;
type ObsCov = SMatrix<f64, OBS_DIM, OBS_DIM>;
type ObsMatrix = SMatrix<f64, OBS_DIM, STATE_DIM>;

/// Below this yaw rate (rad/s) the CTRA step uses its series expansion; the
/// closed form loses roughly `a·ε/ω²` to cancellation.
pub const OMEGA_EPS: f64 = 1e-2;
const SERIES_TERMS: usize = 8;

const YAW: usize = 3;
const INIT_DYNAMIC_VAR: f64 = 10.0;

/// Process noise densities (per second) for each state entry, and observation
/// noise variances for each box entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub process: [f64; STATE_DIM],
    pub observation: [f64; OBS_DIM],
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            process: [0.01; STATE_DIM],
            observation: [0.1; OBS_DIM],
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.process.iter().any(|&q| !(q > 0.0 && q.is_finite())) {
            return Err(Error::validation(
                "noise.process",
                "entries must be positive",
            ));
        }
        if self
            .observation
            .iter()
            .any(|&r| !(r > 0.0 && r.is_finite()))
        {
            return Err(Error::validation(
                "noise.observation",
                "entries must be positive",
            ));
        }
        Ok(())
    }

    fn r(&self) -> ObsCov {
        ObsCov::from_diagonal(&ObsVec::from_column_slice(&self.observation))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub model: MotionModelKind,
    pub mean: StateVec,
    pub cov: StateCov,
}

pub fn box_to_obs(b: &Box3D) -> ObsVec {
    ObsVec::from_column_slice(&[b.x, b.y, b.z, b.yaw, b.l, b.w, b.h])
}

fn obs_matrix() -> ObsMatrix {
    let mut h = ObsMatrix::zeros();
    for i in 0..OBS_DIM {
        h[(i, i)] = 1.0;
    }
    h
}

impl KalmanState {
    /// Fresh track state: box entries observed, dynamics unknown.
    pub fn from_box(model: MotionModelKind, b: &Box3D, noise: &NoiseConfig) -> Self {
        let mut mean = StateVec::zeros();
        mean.fixed_rows_mut::<OBS_DIM>(0).copy_from(&box_to_obs(b));
        mean[YAW] = wrap_angle(mean[YAW]);
        let mut cov = StateCov::zeros();
        for i in 0..OBS_DIM {
            cov[(i, i)] = noise.observation[i];
        }
        for i in OBS_DIM..STATE_DIM {
            cov[(i, i)] = INIT_DYNAMIC_VAR;
        }
        KalmanState { model, mean, cov }
    }

    pub fn to_box(&self) -> Box3D {
        let m = &self.mean;
        Box3D {
            x: m[0],
            y: m[1],
            z: m[2],
            yaw: m[3],
            l: m[4].max(1e-3),
            w: m[5].max(1e-3),
            h: m[6].max(1e-3),
        }
    }

    /// Planar speed in m/s.
    pub fn speed(&self) -> f64 {
        match self.model {
            MotionModelKind::Cv => self.mean[7].hypot(self.mean[8]),
            MotionModelKind::Cyra => self.mean[7].abs(),
        }
    }

    pub fn predict(&self, dt: f64, noise: &NoiseConfig) -> Result<KalmanState> {
        if dt.is_nan() || dt <= 0.0 {
            return Err(Error::NonPositiveDt(dt));
        }
        let (mut mean, f) = match self.model {
            MotionModelKind::Cv => cv_transition(&self.mean, dt),
            MotionModelKind::Cyra => cyra_transition(&self.mean, dt),
        };
        mean[YAW] = wrap_angle(mean[YAW]);
        let q = process_noise(self.model, dt, noise);
        let cov = symmetrize(f * self.cov * f.transpose() + q);
        Ok(KalmanState {
            model: self.model,
            mean,
            cov,
        })
    }

    /// Measurement update with a box observation; the yaw innovation is wrapped.
    pub fn update(&self, obs: &Box3D, noise: &NoiseConfig) -> Result<KalmanState> {
        let obs = obs.validate()?;
        let h = obs_matrix();
        let r = noise.r();
        let mut innov = box_to_obs(&obs) - h * self.mean;
        innov[YAW] = wrap_angle(innov[YAW]);
        let s = symmetrize_obs(h * self.cov * h.transpose() + r);
        let chol = s.cholesky().ok_or(Error::SingularInnovation)?;
        let s_inv = chol.inverse();
        if !s_inv.iter().all(|v| v.is_finite()) {
            return Err(Error::SingularInnovation);
        }
        let k = self.cov * h.transpose() * s_inv;
        let mut mean = self.mean + k * innov;
        mean[YAW] = wrap_angle(mean[YAW]);
        let i_kh = StateCov::identity() - k * h;
        let cov = symmetrize(i_kh * self.cov * i_kh.transpose() + k * r * k.transpose());
        Ok(KalmanState {
            model: self.model,
            mean,
            cov,
        })
    }
}

fn symmetrize(p: StateCov) -> StateCov {
    (p + p.transpose()) * 0.5
}

fn symmetrize_obs(p: ObsCov) -> ObsCov {
    (p + p.transpose()) * 0.5
}

/// Linear CV step and its (constant) transition matrix.
pub fn cv_transition(x: &StateVec, dt: f64) -> (StateVec, StateCov) {
    let mut f = StateCov::identity();
    for axis in 0..3 {
        f[(axis, 7 + axis)] = dt;
    }
    (f * x, f)
}

/// CTRA step and its analytic Jacobian with respect to the state.
pub fn cyra_transition(x: &StateVec, dt: f64) -> (StateVec, StateCov) {
    let (yaw, v, a, w) = (x[3], x[7], x[8], x[9]);
    let (s0, c0) = yaw.sin_cos();
    let mut out = *x;
    let mut jac = StateCov::identity();

    let (dx, dy);
    if w.abs() < OMEGA_EPS {
        // Taylor series in ω of ∫(v + a·s)·(cos, sin)(yaw + ω·s) ds.
        let mut sx = [0.0; 5];
        let mut sy = [0.0; 5];
        let mut coef = 1.0; // ω^k / k!
        let mut prev_coef = 0.0; // ω^(k−1) / (k−1)!, the ω-derivative of `coef`
        for k in 0..SERIES_TERMS {
            if k > 0 {
                prev_coef = coef;
                coef *= w / k as f64;
            }
            let time_v = dt.powi(k as i32 + 1) / (k + 1) as f64;
            let time_a = dt.powi(k as i32 + 2) / (k + 2) as f64;
            let dist = v * time_v + a * time_a;
            let (ck, sk) = (cos_derivative(yaw, k), sin_derivative(yaw, k));
            sx[0] += coef * ck * dist;
            sy[0] += coef * sk * dist;
            sx[1] += coef * cos_derivative(yaw, k + 1) * dist;
            sy[1] += coef * sin_derivative(yaw, k + 1) * dist;
            sx[2] += coef * ck * time_v;
            sy[2] += coef * sk * time_v;
            sx[3] += coef * ck * time_a;
            sy[3] += coef * sk * time_a;
            sx[4] += prev_coef * ck * dist;
            sy[4] += prev_coef * sk * dist;
        }
        dx = sx[0];
        dy = sy[0];
        for (row, s) in [(0, &sx), (1, &sy)] {
            jac[(row, 3)] = s[1];
            jac[(row, 7)] = s[2];
            jac[(row, 8)] = s[3];
            jac[(row, 9)] = s[4];
        }
    } else {
        let (s1, c1) = (yaw + w * dt).sin_cos();
        let w2 = w * w;
        let w3 = w2 * w;
        let ax = c1 - c0 + w * dt * s1;
        let ay = s1 - s0 - w * dt * c1;
        dx = v / w * (s1 - s0) + a / w2 * ax;
        dy = v / w * (c0 - c1) + a / w2 * ay;

        jac[(0, 3)] = v / w * (c1 - c0) + a / w2 * (s0 - s1 + w * dt * c1);
        jac[(0, 7)] = (s1 - s0) / w;
        jac[(0, 8)] = ax / w2;
        jac[(0, 9)] =
            -v / w2 * (s1 - s0) + v * dt / w * c1 - 2.0 * a / w3 * ax + a * dt * dt / w * c1;

        jac[(1, 3)] = v / w * (s1 - s0) + a / w2 * ax;
        jac[(1, 7)] = (c0 - c1) / w;
        jac[(1, 8)] = ay / w2;
        jac[(1, 9)] =
            -v / w2 * (c0 - c1) + v * dt / w * s1 - 2.0 * a / w3 * ay + a * dt * dt / w * s1;
    }
    out[0] += dx;
    out[1] += dy;
    out[3] = yaw + w * dt;
    out[7] = v + a * dt;
    jac[(3, 9)] = dt;
    jac[(7, 8)] = dt;
    (out, jac)
}

/// k-th derivative of cos at `t`.
fn cos_derivative(t: f64, k: usize) -> f64 {
    match k % 4 {
        0 => t.cos(),
        1 => -t.sin(),
        2 => -t.cos(),
        _ => t.sin(),
    }
}

/// k-th derivative of sin at `t`.
fn sin_derivative(t: f64, k: usize) -> f64 {
    match k % 4 {
        0 => t.sin(),
        1 => t.cos(),
        2 => -t.sin(),
        _ => -t.cos(),
    }
}

/// Discrete process noise for one step of length `dt`.
///
/// CV integrates white-noise acceleration exactly, so covariance propagation
/// is additive in time. CYRA uses a diagonal `q·dt` approximation.
pub fn process_noise(model: MotionModelKind, dt: f64, noise: &NoiseConfig) -> StateCov {
    let q = &noise.process;
    let mut out = StateCov::zeros();
    match model {
        MotionModelKind::Cv => {
            for axis in 0..3 {
                let (p, v) = (axis, 7 + axis);
                out[(p, p)] = q[p] * dt + q[v] * dt * dt * dt / 3.0;
                out[(p, v)] = q[v] * dt * dt / 2.0;
                out[(v, p)] = out[(p, v)];
                out[(v, v)] = q[v] * dt;
            }
            for i in 3..OBS_DIM {
                out[(i, i)] = q[i] * dt;
            }
        }
        MotionModelKind::Cyra => {
            for i in 0..STATE_DIM {
                out[(i, i)] = q[i] * dt;
            }
        }
    }
    out
}

/// Planar speed of a state; CV uses hypot(vx, vy), CYRA |v|.
pub fn speed(state: &KalmanState) -> f64 {
    state.speed()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cyra(yaw: f64, v: f64, a: f64, w: f64) -> StateVec {
        let mut x = StateVec::zeros();
        x[3] = yaw;
        x[4] = 4.0;
        x[5] = 2.0;
        x[6] = 1.5;
        x[7] = v;
        x[8] = a;
        x[9] = w;
        x
    }

    /// RK4 on ẋ = v cos θ, ẏ = v sin θ, θ̇ = ω, v̇ = a.
    fn rk4(x: &StateVec, dt: f64, steps: usize) -> StateVec {
        let deriv = |s: [f64; 4], a: f64, w: f64| [s[3] * s[2].cos(), s[3] * s[2].sin(), w, a];
        let (a, w) = (x[8], x[9]);
        let mut s = [x[0], x[1], x[3], x[7]];
        let h = dt / steps as f64;
        for _ in 0..steps {
            let k1 = deriv(s, a, w);
            let add = |s: [f64; 4], k: [f64; 4], f: f64| {
                [
                    s[0] + f * k[0],
                    s[1] + f * k[1],
                    s[2] + f * k[2],
                    s[3] + f * k[3],
                ]
            };
            let k2 = deriv(add(s, k1, h / 2.0), a, w);
            let k3 = deriv(add(s, k2, h / 2.0), a, w);
            let k4 = deriv(add(s, k3, h), a, w);
            for i in 0..4 {
                s[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        let mut out = *x;
        out[0] = s[0];
        out[1] = s[1];
        out[3] = s[2];
        out[7] = s[3];
        out
    }

    #[test]
    fn cv_predict_example() {
        let mut st = KalmanState::from_box(
            MotionModelKind::Cv,
            &Box3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0),
            &NoiseConfig::default(),
        );
        st.mean[7] = 2.0;
        let p = st.predict(0.1, &NoiseConfig::default()).unwrap();
        assert!((p.mean[0] - 0.2).abs() < 1e-15);
        assert_eq!(p.mean[1], 0.0);
        assert!(matches!(
            st.predict(0.0, &NoiseConfig::default()),
            Err(Error::NonPositiveDt(_))
        ));
    }

    #[test]
    fn cyra_straight_line_limit() {
        let (out, _) = cyra_transition(&cyra(0.0, 1.0, 0.0, 1e-12), 1.0);
        assert!((out[0] - 1.0).abs() < 1e-12);
        assert!(out[1].abs() < 1e-11);
    }

    #[test]
    fn cyra_matches_rk4() {
        let x = cyra(0.3, 1.0, 0.5, 0.2);
        let (out, _) = cyra_transition(&x, 0.1);
        let oracle = rk4(&x, 0.1, 200);
        assert!((out - oracle).abs().max() < 1e-9);
    }

    #[test]
    fn cyra_jacobian_matches_finite_differences() {
        let h = 1e-6;
        for &(yaw, v, a, w) in &[
            (0.3, 1.0, 0.5, 0.2),
            (-2.0, 8.0, -1.0, 1e-8),
            (1.0, 3.0, 0.2, -0.7),
            (0.5, 5.0, 1.0, 0.0101),
            (0.5, 5.0, 1.0, -0.0099),
        ] {
            let x = cyra(yaw, v, a, w);
            let (_, jac) = cyra_transition(&x, 0.5);
            for j in 0..STATE_DIM {
                let mut xp = x;
                let mut xm = x;
                xp[j] += h;
                xm[j] -= h;
                let fd = (cyra_transition(&xp, 0.5).0 - cyra_transition(&xm, 0.5).0) / (2.0 * h);
                for i in 0..STATE_DIM {
                    let tol = 1e-4 * fd[i].abs().max(1.0);
                    assert!(
                        (jac[(i, j)] - fd[i]).abs() < tol,
                        "d{i}/d{j}: analytic {} fd {}",
                        jac[(i, j)],
                        fd[i]
                    );
                }
            }
        }
    }

    #[test]
    fn update_perfect_measurement_limit() {
        let noise = NoiseConfig::default();
        let st = KalmanState::from_box(
            MotionModelKind::Cyra,
            &Box3D::new(0.0, 0.0, 0.0, 1.0, 2.0, 1.0, 0.0),
            &noise,
        );
        let tight = NoiseConfig {
            observation: [1e-12; OBS_DIM],
            ..noise
        };
        let obs = Box3D::new(1.0, -2.0, 0.3, 1.0, 2.0, 1.0, 0.2);
        let post = st.update(&obs, &tight).unwrap();
        assert!((post.mean[0] - 1.0).abs() < 1e-6);
        assert!((post.mean[1] + 2.0).abs() < 1e-6);
        assert!((post.mean[2] - 0.3).abs() < 1e-6);
    }

    #[test]
    fn update_at_prediction_shrinks_covariance() {
        let noise = NoiseConfig::default();
        let b = Box3D::new(3.0, 1.0, 0.0, 1.0, 2.0, 1.0, 0.5);
        let st = KalmanState::from_box(MotionModelKind::Cv, &b, &noise)
            .predict(0.1, &noise)
            .unwrap();
        let post = st.update(&st.to_box(), &noise).unwrap();
        assert!((post.mean - st.mean).abs().max() < 1e-12);
        assert!(post.cov.trace() < st.cov.trace());
    }

    #[test]
    fn yaw_innovation_wraps() {
        let noise = NoiseConfig::default();
        let st = KalmanState::from_box(
            MotionModelKind::Cv,
            &Box3D::new(0.0, 0.0, 0.0, 1.0, 2.0, 1.0, 3.1),
            &noise,
        );
        let post = st
            .update(&Box3D::new(0.0, 0.0, 0.0, 1.0, 2.0, 1.0, -3.1), &noise)
            .unwrap();
        // Innovation is 2π − 6.2 ≈ +0.083 and the gain is ½ for equal variances.
        let moved = wrap_angle(post.mean[3] - 3.1);
        assert!(moved > 0.0 && moved < 0.0832, "moved {moved}");
        assert!((moved - 0.5 * (2.0 * std::f64::consts::PI - 6.2)).abs() < 1e-9);
    }

    #[test]
    fn singular_innovation_is_reported() {
        let noise = NoiseConfig::default();
        let mut st = KalmanState::from_box(
            MotionModelKind::Cv,
            &Box3D::new(0.0, 0.0, 0.0, 1.0, 2.0, 1.0, 0.0),
            &noise,
        );
        st.cov = StateCov::zeros();
        let degenerate = NoiseConfig {
            observation: [0.0; OBS_DIM],
            ..noise
        };
        assert!(matches!(
            st.update(&st.to_box(), &degenerate),
            Err(Error::SingularInnovation)
        ));
    }

    #[test]
    fn speed_examples() {
        let noise = NoiseConfig::default();
        let b = Box3D::new(0.0, 0.0, 0.0, 1.0, 2.0, 1.0, 0.0);
        let mut cv = KalmanState::from_box(MotionModelKind::Cv, &b, &noise);
        assert_eq!(cv.speed(), 0.0);
        cv.mean[7] = 3.0;
        cv.mean[8] = 4.0;
        assert_eq!(speed(&cv), 5.0);
        let mut cy = KalmanState::from_box(MotionModelKind::Cyra, &b, &noise);
        cy.mean[7] = -2.0;
        assert_eq!(cy.speed(), 2.0);
    }

    #[test]
    fn cv_predict_is_time_additive() {
        let noise = NoiseConfig::default();
        let mut st = KalmanState::from_box(
            MotionModelKind::Cv,
            &Box3D::new(1.0, 2.0, 0.0, 1.0, 2.0, 1.0, 0.0),
            &noise,
        );
        st.mean[7] = 1.5;
        st.mean[8] = -0.75;
        let once = st.predict(0.75, &noise).unwrap();
        let twice = st
            .predict(0.25, &noise)
            .unwrap()
            .predict(0.5, &noise)
            .unwrap();
        assert_eq!(once.mean, twice.mean);
        assert!((once.cov - twice.cov).abs().max() < 1e-9);
    }

    #[test]
    fn covariance_stays_psd_under_random_cycles() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = NoiseConfig::default();
        for model in [MotionModelKind::Cv, MotionModelKind::Cyra] {
            let mut st = KalmanState::from_box(
                model,
                &Box3D::new(0.0, 0.0, 0.0, 1.0, 2.0, 1.0, 0.0),
                &noise,
            );
            for _ in 0..1000 {
                st = st.predict(rng.random_range(0.05..0.3), &noise).unwrap();
                if rng.random_bool(0.8) {
                    let mut b = st.to_box();
                    b.x += rng.random_range(-0.5..0.5);
                    b.y += rng.random_range(-0.5..0.5);
                    b.yaw += rng.random_range(-0.2..0.2);
                    st = st.update(&b, &noise).unwrap();
                }
                assert!((st.cov - st.cov.transpose()).abs().max() < 1e-9);
                let min_eig = SymmetricEigen::new(st.cov).eigenvalues.min();
                assert!(min_eig >= -1e-9, "min eigenvalue {min_eig}");
            }
        }
    }

    #[test]
    fn ekf_tracks_noiseless_ctra() {
        let noise = NoiseConfig::default();
        let dt = 0.1;
        let mut truth = cyra(0.2, 6.0, 0.3, 0.15);
        let mut st = KalmanState::from_box(MotionModelKind::Cyra, &state_box(&truth), &noise);
        let mut sq = 0.0;
        let mut n = 0;
        for step in 1..=100 {
            truth = cyra_transition(&truth, dt).0;
            st = st.predict(dt, &noise).unwrap();
            st = st.update(&state_box(&truth), &noise).unwrap();
            if step > 10 {
                sq += (st.mean[0] - truth[0]).powi(2) + (st.mean[1] - truth[1]).powi(2);
                n += 1;
            }
        }
        let rmse = (sq / n as f64).sqrt();
        assert!(rmse < 0.05, "rmse {rmse}");
    }

    fn state_box(x: &StateVec) -> Box3D {
        Box3D::new(x[0], x[1], x[2], x[5], x[4], x[6], wrap_angle(x[3]))
    }
}
