//! Reaction-kinetics baseline: the infection/killer/target system, a small
//! fixed-step integrator and the analytic interior steady state.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdeError {
    #[error("time step must be positive and finite, got {0}")]
    BadStep(f64),
    #[error("end time must be positive and finite, got {0}")]
    BadEnd(f64),
    #[error("state became non-finite at t = {t} (component {component})")]
    NonFinite { t: f64, component: usize },
    #[error("fixed point undefined: parameter {0} is zero")]
    Degenerate(&'static str),
    #[error("negative rate {name} = {value}")]
    NegativeRate { name: &'static str, value: f64 },
    #[error("initial state has {0} components, system has {1}")]
    Dimension(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    #[default]
    Rk4,
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "euler" => Ok(Method::Euler),
            "rk4" => Ok(Method::Rk4),
            _ => Err(format!("unknown method {s:?} (expected euler or rk4)")),
        }
    }
}

/// Any autonomous system `dy/dt = f(y)`.
pub trait OdeSystem<T: Real> {
    fn dim(&self) -> usize;
    fn rhs(&self, y: &[T], dy: &mut [T]);
}

/// Dense samples of an integrated system, row-major `t.len() x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution<T> {
    pub t: Vec<T>,
    pub y: Vec<T>,
    pub dim: usize,
    pub method: Method,
    pub dt: T,
    /// Number of component updates that went negative and were clamped.
    pub clamped: usize,
}

impl<T: Real> Solution<T> {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.y[i * self.dim..(i + 1) * self.dim]
    }

    pub fn last(&self) -> &[T] {
        self.row(self.len() - 1)
    }

    pub fn component(&self, c: usize) -> impl Iterator<Item = T> + '_ {
        self.y.iter().skip(c).step_by(self.dim).copied()
    }
}

/// Fixed-step integration from `t = 0` to `t_end`, keeping every `stride`-th
/// step (and the last). Negative components are clamped to zero when
/// `clamp` is set.
pub fn solve<T: Real, S: OdeSystem<T> + ?Sized>(
    sys: &S,
    y0: &[T],
    t_end: T,
    dt: T,
    method: Method,
    stride: usize,
    clamp: bool,
) -> Result<Solution<T>, OdeError> {
    let n = sys.dim();
    if y0.len() != n {
        return Err(OdeError::Dimension(y0.len(), n));
    }
    if !(dt > T::zero()) || !dt.is_finite() {
        return Err(OdeError::BadStep(dt.to_f64_lossy()));
    }
    if !(t_end > T::zero()) || !t_end.is_finite() {
        return Err(OdeError::BadEnd(t_end.to_f64_lossy()));
    }
    let steps = (t_end / dt).round().to_usize().unwrap_or(0).max(1);
    let stride = stride.max(1);
    let mut out = Solution {
        t: Vec::with_capacity(steps / stride + 2),
        y: Vec::with_capacity((steps / stride + 2) * n),
        dim: n,
        method,
        dt,
        clamped: 0,
    };
    let mut y = y0.to_vec();
    let mut k = [vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]];
    let mut tmp = vec![T::zero(); n];
    out.t.push(T::zero());
    out.y.extend_from_slice(&y);
    let half = T::lit(0.5);
    let sixth = T::lit(1.0 / 6.0);
    let two = T::lit(2.0);
    for step in 1..=steps {
        match method {
            Method::Euler => {
                sys.rhs(&y, &mut k[0]);
                for i in 0..n {
                    y[i] = y[i] + dt * k[0][i];
                }
            }
            Method::Rk4 => {
                sys.rhs(&y, &mut k[0]);
                for i in 0..n {
                    tmp[i] = y[i] + half * dt * k[0][i];
                }
                sys.rhs(&tmp, &mut k[1]);
                for i in 0..n {
                    tmp[i] = y[i] + half * dt * k[1][i];
                }
                sys.rhs(&tmp, &mut k[2]);
                for i in 0..n {
                    tmp[i] = y[i] + dt * k[2][i];
                }
                sys.rhs(&tmp, &mut k[3]);
                for i in 0..n {
                    y[i] = y[i] + dt * sixth * (k[0][i] + two * k[1][i] + two * k[2][i] + k[3][i]);
                }
            }
        }
        let t = T::from_usize(step).unwrap() * dt;
        for (i, v) in y.iter_mut().enumerate() {
            if !v.is_finite() {
                return Err(OdeError::NonFinite {
                    t: t.to_f64_lossy(),
                    component: i,
                });
            }
            if clamp && *v < T::zero() {
                *v = T::zero();
                out.clamped += 1;
            }
        }
        if step % stride == 0 || step == steps {
            out.t.push(t);
            out.y.extend_from_slice(&y);
        }
    }
    if out.clamped > 0 {
        log::warn!("{} negative excursions clamped to zero", out.clamped);
    }
    Ok(out)
}

/// Rates of the three-species infection model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KineticsParams<T> {
    pub p_infect: T,
    pub p_kill: T,
    pub p_resp: T,
    pub s: T,
    pub d_i: T,
    pub d_k: T,
    pub d_c: T,
}

/// Concentrations of infected (I), killer (K) and target (C) agents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct KineticsState<T> {
    pub i: T,
    pub k: T,
    pub c: T,
}

impl<T: Real> KineticsState<T> {
    pub fn new(i: T, k: T, c: T) -> Self {
        Self { i, k, c }
    }

    pub fn to_array(self) -> [T; 3] {
        [self.i, self.k, self.c]
    }

    pub fn from_slice(v: &[T]) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        (self.i - other.i)
            .abs()
            .max((self.k - other.k).abs())
            .max((self.c - other.c).abs())
    }
}

impl<T: Real> KineticsParams<T> {
    pub fn validate(&self) -> Result<(), OdeError> {
        for (name, v) in [
            ("p_infect", self.p_infect),
            ("p_kill", self.p_kill),
            ("p_resp", self.p_resp),
            ("s", self.s),
            ("d_I", self.d_i),
            ("d_K", self.d_k),
            ("d_C", self.d_c),
        ] {
            if !(v >= T::zero()) {
                return Err(OdeError::NegativeRate {
                    name,
                    value: v.to_f64_lossy(),
                });
            }
        }
        Ok(())
    }
}

pub fn derivatives<T: Real>(x: &KineticsState<T>, p: &KineticsParams<T>) -> KineticsState<T> {
    let infection = p.p_infect * x.i * x.c;
    KineticsState {
        i: infection - p.p_kill * x.i * x.k - p.d_i * x.i,
        k: p.p_resp * x.i * x.k - p.d_k * x.k,
        c: p.s - infection - p.d_c * x.c,
    }
}

impl<T: Real> OdeSystem<T> for KineticsParams<T> {
    fn dim(&self) -> usize {
        3
    }

    fn rhs(&self, y: &[T], dy: &mut [T]) {
        let d = derivatives(&KineticsState::from_slice(y), self);
        dy[0] = d.i;
        dy[1] = d.k;
        dy[2] = d.c;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub points: Vec<(T, KineticsState<T>)>,
    pub method: Method,
    pub dt: T,
    pub clamped: usize,
}

impl<T: Real> Trajectory<T> {
    pub fn last(&self) -> KineticsState<T> {
        self.points.last().map(|p| p.1).unwrap_or_default()
    }

    pub fn series(&self, f: impl Fn(&KineticsState<T>) -> T) -> Vec<T> {
        self.points.iter().map(|(_, s)| f(s)).collect()
    }
}

/// Integrates the kinetics model, sampling every step.
pub fn integrate<T: Real>(
    params: &KineticsParams<T>,
    init: KineticsState<T>,
    t_end: T,
    dt: T,
    method: Method,
) -> Result<Trajectory<T>, OdeError> {
    integrate_strided(params, init, t_end, dt, method, 1)
}

pub fn integrate_strided<T: Real>(
    params: &KineticsParams<T>,
    init: KineticsState<T>,
    t_end: T,
    dt: T,
    method: Method,
    stride: usize,
) -> Result<Trajectory<T>, OdeError> {
    params.validate()?;
    let sol = solve(params, &init.to_array(), t_end, dt, method, stride, true)?;
    let points = (0..sol.len())
        .map(|r| (sol.t[r], KineticsState::from_slice(sol.row(r))))
        .collect();
    Ok(Trajectory {
        points,
        method,
        dt,
        clamped: sol.clamped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPoint<T> {
    pub state: KineticsState<T>,
    /// `K* < 0`: the interior point is not feasible and the
    /// infection-free state `(0, 0, s/d_C)` governs instead.
    pub infection_free: bool,
}

/// The interior steady state of the kinetics model.
pub fn fixed_point<T: Real>(p: &KineticsParams<T>) -> Result<FixedPoint<T>, OdeError> {
    if p.p_resp == T::zero() {
        return Err(OdeError::Degenerate("p_resp"));
    }
    if p.p_kill == T::zero() {
        return Err(OdeError::Degenerate("p_kill"));
    }
    let i = p.d_k / p.p_resp;
    let denom = p.p_infect * i + p.d_c;
    if denom == T::zero() {
        return Err(OdeError::Degenerate("p_infect·I* + d_C"));
    }
    let c = p.s / denom;
    let k = (p.p_infect * c - p.d_i) / p.p_kill;
    Ok(FixedPoint {
        state: KineticsState { i, k, c },
        infection_free: k < T::zero(),
    })
}

/// Local extrema of a sampled series, as `(index, is_maximum)`.
pub fn local_extrema<T: Real>(v: &[T]) -> Vec<(usize, bool)> {
    let mut out = Vec::new();
    for j in 1..v.len().saturating_sub(1) {
        if v[j] > v[j - 1] && v[j] >= v[j + 1] {
            out.push((j, true));
        } else if v[j] < v[j - 1] && v[j] <= v[j + 1] {
            out.push((j, false));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fig1() -> KineticsParams<f64> {
        KineticsParams {
            p_infect: 0.3,
            p_kill: 0.5,
            p_resp: 0.1,
            s: 0.01,
            d_i: 0.01,
            d_k: 0.01,
            d_c: 0.01,
        }
    }

    #[test]
    fn derivative_at_initial_state() {
        let d = derivatives(&KineticsState::new(0.1, 0.1, 1.0), &fig1());
        assert!((d.i - 0.024).abs() < 1e-15);
        assert!(d.k.abs() < 1e-15);
        assert!((d.c + 0.03).abs() < 1e-15);
    }

    #[test]
    fn zero_params_are_stationary() {
        let p = KineticsParams {
            p_infect: 0.0,
            p_kill: 0.0,
            p_resp: 0.0,
            s: 0.0,
            d_i: 0.0,
            d_k: 0.0,
            d_c: 0.0,
        };
        let d = derivatives(&KineticsState::new(0.3, 2.0, 5.0), &p);
        assert_eq!(d, KineticsState::new(0.0, 0.0, 0.0));
    }

    #[test]
    fn pure_decay_matches_closed_form() {
        let p = KineticsParams { s: 0.0, ..fig1() };
        let tr = integrate(&p, KineticsState::new(0.0, 0.0, 2.0), 50.0, 0.01, Method::Rk4).unwrap();
        let exact = 2.0 * (-0.01f64 * 50.0).exp();
        assert!((tr.last().c - exact).abs() < 1e-10);
    }

    #[test]
    fn convergence_orders() {
        // reference from a much finer rk4 run
        let init = KineticsState::new(0.1, 0.1, 1.0);
        let p = fig1();
        let reference = integrate_strided(&p, init, 20.0, 0.0005, Method::Rk4, 1000).unwrap().last();
        let err = |m, dt| {
            integrate_strided(&p, init, 20.0, dt, m, 10_000)
                .unwrap()
                .last()
                .max_abs_diff(&reference)
        };
        let rk = err(Method::Rk4, 0.2) / err(Method::Rk4, 0.1);
        let eu = err(Method::Euler, 0.02) / err(Method::Euler, 0.01);
        assert!((12.0..20.0).contains(&rk), "rk4 ratio {rk}");
        assert!((1.7..2.3).contains(&eu), "euler ratio {eu}");
    }

    #[test]
    fn degenerate_fixed_point() {
        let p = KineticsParams { p_resp: 0.0, ..fig1() };
        assert_eq!(fixed_point(&p), Err(OdeError::Degenerate("p_resp")));
        let p = KineticsParams { p_kill: 0.0, ..fig1() };
        assert_eq!(fixed_point(&p), Err(OdeError::Degenerate("p_kill")));
    }

    #[test]
    fn bad_steps_rejected() {
        let init = KineticsState::new(0.1, 0.1, 1.0);
        assert!(matches!(integrate(&fig1(), init, 1.0, 0.0, Method::Rk4), Err(OdeError::BadStep(_))));
        assert!(matches!(integrate(&fig1(), init, -1.0, 0.1, Method::Rk4), Err(OdeError::BadEnd(_))));
    }

    #[test]
    fn works_in_single_precision() {
        let p = KineticsParams::<f32> {
            p_infect: 0.3,
            p_kill: 0.5,
            p_resp: 0.1,
            s: 0.01,
            d_i: 0.01,
            d_k: 0.01,
            d_c: 0.01,
        };
        let fp = fixed_point(&p).unwrap().state;
        assert!((fp.k - 0.13).abs() < 1e-6);
        let d = derivatives(&fp, &p);
        assert!(d.i.abs() < 1e-6 && d.k.abs() < 1e-6 && d.c.abs() < 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn fixed_point_residual(p_infect in 0.01f64..2.0, p_kill in 0.01f64..2.0, p_resp in 0.01f64..2.0,
                               s in 0.0f64..1.0, d_i in 0.0f64..0.5, d_k in 0.001f64..0.5, d_c in 0.001f64..0.5) {
            let p = KineticsParams { p_infect, p_kill, p_resp, s, d_i, d_k, d_c };
            let fp = fixed_point(&p).unwrap();
            let d = derivatives(&fp.state, &p);
            prop_assert!(d.i.abs().max(d.k.abs()).max(d.c.abs()) < 1e-12);
        }

        #[test]
        fn clamped_trajectories_stay_non_negative(p_infect in 0.0f64..3.0, p_kill in 0.0f64..3.0,
                                                  p_resp in 0.0f64..3.0, s in 0.0f64..0.2,
                                                  i0 in 0.0f64..1.0, k0 in 0.0f64..1.0, c0 in 0.0f64..2.0) {
            let p = KineticsParams { p_infect, p_kill, p_resp, s, d_i: 0.05, d_k: 0.05, d_c: 0.05 };
            let tr = integrate(&p, KineticsState::new(i0, k0, c0), 30.0, 0.5, Method::Euler).unwrap();
            for (_, x) in &tr.points {
                prop_assert!(x.i >= 0.0 && x.k >= 0.0 && x.c >= 0.0);
            }
        }
    }
}
