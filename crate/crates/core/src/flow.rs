//! Continuous-time Sinkhorn flow in the 1-D Gaussian ansatz.
//!
//! The forward conditional `F_{1|0} = N(A_f x0 + a_f, v_f)` and backward
//! conditional `B_{0|1} = N(A_b x1 + a_b, v_b)` evolve in algorithmic time
//! `l` under
//!
//! ```text
//! d log f(x1|x0) / dl = -log f(x1|x0) + log q(x1; x0) + KL(f(.|x0) | q(.; x0)),
//! q(x1; x0) = b(x0|x1) psi1(x1)
//! ```
//!
//! and its mirror for `b`. Both sides are quadratic in the free variable, so
//! three collocation pairs determine the parameter rates.

use std::io::Write;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::dist::GaussianSpec;
use crate::error::{Error, Result};
use crate::oracle::gaussian_sb_coupling;

pub const DEFAULT_DL: f64 = 1e-3;
/// The mean converges slowest, at roughly `exp(-0.38 l)` on unit-scale
/// problems; 30 leaves it within `1e-4`.
pub const DEFAULT_L_MAX: f64 = 30.0;

/// Gaussian marginals `N(mu0, var0)`, `N(mu1, var1)` and reference scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowProblem {
    pub mu0: f64,
    pub var0: f64,
    pub mu1: f64,
    pub var1: f64,
    pub sigma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussFlowState {
    pub l: f64,
    pub gain_f: f64,
    pub offset_f: f64,
    pub var_f: f64,
    pub gain_b: f64,
    pub offset_b: f64,
    pub var_b: f64,
}

/// Forward-side moments `(E[X1], V[X1], C[X0, X1])`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowMoments {
    pub mean1: f64,
    pub var1: f64,
    pub cross: f64,
}

/// Parameter rates, ordered `(A_f, a_f, v_f, A_b, a_b, v_b)`, plus the
/// largest mismatch at held-out collocation pairs.
#[derive(Clone, Copy, Debug)]
pub struct FlowRhs {
    pub rates: [f64; 6],
    pub residual: f64,
}

impl FlowProblem {
    pub fn new(mu0: f64, var0: f64, mu1: f64, var1: f64, sigma: f64) -> Result<Self> {
        for (name, v) in [("var0", var0), ("var1", var1), ("sigma", sigma)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::NotPositive { kind: "flow problem", detail: format!("{name} = {v}") });
            }
        }
        Ok(FlowProblem { mu0, var0, mu1, var1, sigma })
    }

    /// Null-drift starting point.
    pub fn initial_state(&self) -> GaussFlowState {
        let s2 = self.sigma * self.sigma;
        GaussFlowState { l: 0.0, gain_f: 1.0, offset_f: 0.0, var_f: s2, gain_b: 1.0, offset_b: 0.0, var_b: s2 }
    }

    fn marginals(&self) -> Result<(GaussianSpec, GaussianSpec)> {
        Ok((GaussianSpec::isotropic(vec![self.mu0], self.var0)?, GaussianSpec::isotropic(vec![self.mu1], self.var1)?))
    }

    /// Conditionals of the bridge's static coupling, the fixed point of the flow.
    pub fn analytic_state(&self) -> Result<GaussFlowState> {
        let (p0, p1) = self.marginals()?;
        let eps = self.sigma * self.sigma;
        let fwd = gaussian_sb_coupling(&p0, &p1, eps)?;
        let bwd = gaussian_sb_coupling(&p1, &p0, eps)?;
        let (gf, of, vf) = fwd.conditional_map();
        let (gb, ob, vb) = bwd.conditional_map();
        Ok(GaussFlowState {
            l: f64::INFINITY,
            gain_f: gf[(0, 0)],
            offset_f: of[0],
            var_f: vf[(0, 0)],
            gain_b: gb[(0, 0)],
            offset_b: ob[0],
            var_b: vb[(0, 0)],
        })
    }

    pub fn analytic_moments(&self) -> Result<FlowMoments> {
        let (p0, p1) = self.marginals()?;
        let inst = gaussian_sb_coupling(&p0, &p1, self.sigma * self.sigma)?;
        Ok(FlowMoments { mean1: self.mu1, var1: self.var1, cross: inst.cross_cov()[(0, 0)] })
    }

    pub fn moments(&self, s: &GaussFlowState) -> FlowMoments {
        FlowMoments {
            mean1: s.gain_f * self.mu0 + s.offset_f,
            var1: s.gain_f * s.gain_f * self.var0 + s.var_f,
            cross: s.gain_f * self.var0,
        }
    }
}

/// `log q(y) = alpha y^2 + beta y + gamma`.
#[derive(Clone, Copy, Debug)]
struct Quadratic {
    alpha: f64,
    beta: f64,
    gamma: f64,
}

impl Quadratic {
    fn at(&self, y: f64) -> f64 {
        (self.alpha * y + self.beta) * y + self.gamma
    }

    fn add(self, o: Quadratic) -> Quadratic {
        Quadratic { alpha: self.alpha + o.alpha, beta: self.beta + o.beta, gamma: self.gamma + o.gamma }
    }
}

fn log_normal(y: f64, m: f64, v: f64) -> f64 {
    -0.5 * ((y - m).powi(2) / v + (2.0 * std::f64::consts::PI * v).ln())
}

/// `log N(y; m, v)` as a quadratic in `y`.
fn normal_in_mean_arg(m: f64, v: f64) -> Quadratic {
    Quadratic { alpha: -0.5 / v, beta: m / v, gamma: -0.5 * (m * m / v + (2.0 * std::f64::consts::PI * v).ln()) }
}

/// `log N(x; g y + o, v)` as a quadratic in `y`.
fn normal_in_cond_arg(x: f64, g: f64, o: f64, v: f64) -> Quadratic {
    let r = x - o;
    Quadratic {
        alpha: -0.5 * g * g / v,
        beta: g * r / v,
        gamma: -0.5 * (r * r / v + (2.0 * std::f64::consts::PI * v).ln()),
    }
}

/// `KL(N(m, v) | exp(q))` for an unnormalized Gaussian `exp(q)`.
fn kl_to_unnormalized(m: f64, v: f64, q: Quadratic) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * v).ln() - q.alpha * (m * m + v) - q.beta * m - q.gamma
}

/// One side of the flow: conditional `N(g c + o, v)` of the free variable
/// given the conditioning variable `c`, against `q(y; c) = other(c|y) psi(y)`.
struct Side {
    gain: f64,
    offset: f64,
    var: f64,
    other_gain: f64,
    other_offset: f64,
    other_var: f64,
    psi: Quadratic,
    cond_mean: f64,
    cond_sd: f64,
}

impl Side {
    fn target(&self, c: f64) -> Quadratic {
        normal_in_cond_arg(c, self.other_gain, self.other_offset, self.other_var).add(self.psi)
    }

    fn rhs_at(&self, c: f64, y: f64, l: f64) -> Result<f64> {
        let q = self.target(c);
        if q.alpha >= 0.0 {
            return Err(Error::FlowAborted {
                l,
                detail: format!("target is not integrable (quadratic coefficient {:e})", q.alpha),
            });
        }
        let m = self.gain * c + self.offset;
        Ok(-log_normal(y, m, self.var) + q.at(y) + kl_to_unnormalized(m, self.var, q))
    }

    fn row(&self, c: f64, y: f64) -> Vector3<f64> {
        let u = y - self.gain * c - self.offset;
        let v = self.var;
        Vector3::new(u * c / v, u / v, u * u / (2.0 * v * v) - 0.5 / v)
    }

    /// Rates `(dg, do, dv)` and the held-out residual.
    fn solve(&self, l: f64) -> Result<(Vector3<f64>, f64)> {
        let s = self.var.sqrt();
        let (ca, cb) = (self.cond_mean - self.cond_sd, self.cond_mean + self.cond_sd);
        let pairs = [
            (ca, self.gain * ca + self.offset + s),
            (cb, self.gain * cb + self.offset + s),
            (ca, self.gain * ca + self.offset),
        ];
        let mut m = Matrix3::zeros();
        let mut r = Vector3::zeros();
        for (i, &(c, y)) in pairs.iter().enumerate() {
            m.set_row(i, &self.row(c, y).transpose());
            r[i] = self.rhs_at(c, y, l)?;
        }
        let rates = m
            .lu()
            .solve(&r)
            .ok_or_else(|| Error::FlowAborted { l, detail: "singular collocation system".into() })?;
        let mut residual: f64 = 0.0;
        for (c, y) in [
            (self.cond_mean + 0.3 * self.cond_sd, self.gain * (self.cond_mean + 0.3 * self.cond_sd) + self.offset - 1.7 * s),
            (self.cond_mean - 2.1 * self.cond_sd, self.gain * (self.cond_mean - 2.1 * self.cond_sd) + self.offset + 0.6 * s),
        ] {
            let implied = self.row(c, y).dot(&rates);
            residual = residual.max((implied - self.rhs_at(c, y, l)?).abs());
        }
        Ok((rates, residual))
    }
}

pub fn rhs(state: &GaussFlowState, prob: &FlowProblem) -> Result<FlowRhs> {
    if !(state.var_f > 0.0 && state.var_b > 0.0) {
        return Err(Error::FlowAborted { l: state.l, detail: format!("non-positive variance in {state:?}") });
    }
    let fwd = Side {
        gain: state.gain_f,
        offset: state.offset_f,
        var: state.var_f,
        other_gain: state.gain_b,
        other_offset: state.offset_b,
        other_var: state.var_b,
        psi: normal_in_mean_arg(prob.mu1, prob.var1),
        cond_mean: prob.mu0,
        cond_sd: prob.var0.sqrt(),
    };
    let bwd = Side {
        gain: state.gain_b,
        offset: state.offset_b,
        var: state.var_b,
        other_gain: state.gain_f,
        other_offset: state.offset_f,
        other_var: state.var_f,
        psi: normal_in_mean_arg(prob.mu0, prob.var0),
        cond_mean: prob.mu1,
        cond_sd: prob.var1.sqrt(),
    };
    let (rf, ef) = fwd.solve(state.l)?;
    let (rb, eb) = bwd.solve(state.l)?;
    Ok(FlowRhs { rates: [rf[0], rf[1], rf[2], rb[0], rb[1], rb[2]], residual: ef.max(eb) })
}

/// Internal coordinates `(A_f, a_f, log v_f, A_b, a_b, log v_b)`.
fn pack(s: &GaussFlowState) -> [f64; 6] {
    [s.gain_f, s.offset_f, s.var_f.ln(), s.gain_b, s.offset_b, s.var_b.ln()]
}

fn unpack(l: f64, z: &[f64; 6]) -> GaussFlowState {
    GaussFlowState { l, gain_f: z[0], offset_f: z[1], var_f: z[2].exp(), gain_b: z[3], offset_b: z[4], var_b: z[5].exp() }
}

fn deriv(l: f64, z: &[f64; 6], prob: &FlowProblem) -> Result<[f64; 6]> {
    let s = unpack(l, z);
    let r = rhs(&s, prob)?.rates;
    Ok([r[0], r[1], r[2] / s.var_f, r[3], r[4], r[5] / s.var_b])
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub state: GaussFlowState,
    pub moments: FlowMoments,
}

/// Classical RK4 from the null-drift state up to `l_max`.
pub fn integrate(prob: &FlowProblem, l_max: f64, dl: f64) -> Result<Vec<TrajectoryRow>> {
    if !(dl > 0.0 && dl.is_finite()) || !(l_max >= 0.0 && l_max.is_finite()) {
        return Err(Error::InvalidInput(format!("need dl > 0 and l_max >= 0, got dl = {dl}, l_max = {l_max}")));
    }
    let steps = (l_max / dl).round() as usize;
    let mut state = prob.initial_state();
    let mut z = pack(&state);
    let mut out = Vec::with_capacity(steps + 1);
    out.push(TrajectoryRow { state, moments: prob.moments(&state) });
    let axpy = |z: &[f64; 6], k: &[f64; 6], h: f64| -> [f64; 6] { std::array::from_fn(|i| z[i] + h * k[i]) };
    for n in 0..steps {
        let l = n as f64 * dl;
        let k1 = deriv(l, &z, prob)?;
        let k2 = deriv(l + dl / 2.0, &axpy(&z, &k1, dl / 2.0), prob)?;
        let k3 = deriv(l + dl / 2.0, &axpy(&z, &k2, dl / 2.0), prob)?;
        let k4 = deriv(l + dl, &axpy(&z, &k3, dl), prob)?;
        z = std::array::from_fn(|i| z[i] + dl / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::FlowAborted { l: l + dl, detail: "non-finite state; step too large".into() });
        }
        state = unpack((n + 1) as f64 * dl, &z);
        out.push(TrajectoryRow { state, moments: prob.moments(&state) });
    }
    Ok(out)
}

/// Writes every `every`-th row (and the last) as CSV.
pub fn write_trajectory_csv<W: Write>(mut w: W, traj: &[TrajectoryRow], every: usize) -> std::io::Result<()> {
    writeln!(w, "l,A_f,a_f,v_f,A_b,a_b,v_b,E_F[X1],V_F[X1],C_F[X0_X1]")?;
    let every = every.max(1);
    for (i, r) in traj.iter().enumerate() {
        if i % every != 0 && i + 1 != traj.len() {
            continue;
        }
        let s = &r.state;
        let m = &r.moments;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            s.l, s.gain_f, s.offset_f, s.var_f, s.gain_b, s.offset_b, s.var_b, m.mean1, m.var1, m.cross
        )?;
    }
    Ok(())
}
