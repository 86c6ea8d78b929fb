//! Closed-form quantities of the reference diffusion `dX = sigma sqrt(beta_t) dW`
//! and an Euler–Maruyama stepper for learned drifts.
//!
//! With the constant schedule (`beta_t = 1`) the transition from `x0` is
//! `N(x0, sigma^2 t)`, the bridge pinned at `(x0, x1)` is
//! `N(x0 (1 - t) + x1 t, sigma^2 t (1 - t))`, and the conditional drifts are
//! `(x1 - x_t) / (1 - t)` forward and `(x0 - x_t) / t` backward. A general
//! schedule replaces elapsed time by the cumulative `b_{s:t} = int_s^t beta`.

use std::fmt;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Zip};

use crate::dist::GaussianSpec;
use crate::error::{Error, Result};
use crate::rng::RngStream;

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Noise schedule: rate `beta_t` and its antiderivative `B(t)` with `B(0) = 0`.
#[derive(Clone)]
pub struct Schedule {
    name: String,
    beta: ScalarFn,
    cumulative: ScalarFn,
}

impl fmt::Debug for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Schedule").field("name", &self.name).finish()
    }
}

impl Schedule {
    pub fn constant() -> Self {
        Self { name: "constant".into(), beta: Arc::new(|_| 1.0), cumulative: Arc::new(|t| t) }
    }

    /// `beta_t = a + 2 (1 - a) t`, so that `b_{0:1} = 1`. Requires `a` in `(0, 1]`.
    pub fn linear_ramp(a: f64) -> Result<Self> {
        if !(a > 0.0 && a <= 1.0) {
            return Err(Error::InvalidInput(format!("linear-ramp start {a} outside (0, 1]")));
        }
        Self::custom(
            format!("linear-ramp({a})"),
            move |t| a + 2.0 * (1.0 - a) * t,
            move |t| a * t + (1.0 - a) * t * t,
        )
    }

    /// User-supplied pair `(beta, B)`. `B` is checked against Simpson
    /// quadrature of `beta` and must satisfy `B(1) - B(0) = 1`.
    pub fn custom(
        name: impl Into<String>,
        beta: impl Fn(f64) -> f64 + Send + Sync + 'static,
        cumulative: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        let s = Self { name: name.into(), beta: Arc::new(beta), cumulative: Arc::new(cumulative) };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        const N: usize = 2000;
        let total = self.b(0.0, 1.0);
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidInput(format!("schedule {}: b_(0:1) = {total}, expected 1", self.name)));
        }
        for i in 0..N {
            let t = (i as f64 + 0.5) / N as f64;
            let beta = (self.beta)(t);
            if !(beta.is_finite() && beta > 0.0) {
                return Err(Error::InvalidInput(format!("schedule {}: beta({t}) = {beta}", self.name)));
            }
        }
        for k in 1..=10 {
            let t = k as f64 / 10.0;
            let quad = simpson(|u| (self.beta)(u), 0.0, t, N);
            let closed = self.b(0.0, t);
            if (quad - closed).abs() > 1e-8 {
                return Err(Error::InvalidInput(format!(
                    "schedule {}: closed-form b_(0:{t}) = {closed} disagrees with quadrature {quad}",
                    self.name
                )));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn beta(&self, t: f64) -> f64 {
        (self.beta)(t)
    }

    /// `b_{s:t} = B(t) - B(s)`.
    pub fn b(&self, s: f64, t: f64) -> f64 {
        (self.cumulative)(t) - (self.cumulative)(s)
    }
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// Reference SDE parameters.
#[derive(Clone, Debug)]
pub struct RefDynamics {
    sigma: f64,
    schedule: Schedule,
}

fn check_unit(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::TimeRange { t, range: "[0, 1]" })
    }
}

impl RefDynamics {
    pub fn new(sigma: f64, schedule: Schedule) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::InvalidInput(format!("sigma must be positive, got {sigma}")));
        }
        Ok(Self { sigma, schedule })
    }

    pub fn constant(sigma: f64) -> Result<Self> {
        Self::new(sigma, Schedule::constant())
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    /// Same schedule, different diffusion scale.
    pub fn with_sigma(&self, sigma: f64) -> Result<Self> {
        Self::new(sigma, self.schedule.clone())
    }

    /// Law of `X_t` given `X_0 = x0`: `N(x0, sigma^2 b_{0:t} I)`.
    pub fn transition_params(&self, x0: &[f64], t: f64) -> Result<GaussianSpec> {
        check_unit(t)?;
        let var = self.sigma * self.sigma * self.schedule.b(0.0, t);
        GaussianSpec::isotropic(x0.to_vec(), var)
    }

    /// Mean weights `(w0, w1)` and variance of the bridge at time `t`, so
    /// that `X_t ~ N(w0 x0 + w1 x1, var I)`.
    pub fn bridge_coefficients(&self, t: f64, sigma: f64) -> (f64, f64, f64) {
        let before = self.schedule.b(0.0, t);
        let after = self.schedule.b(t, 1.0);
        (after, before, sigma * sigma * before * after)
    }

    /// One draw from the reference bridge pinned at `x0` (t=0) and `x1` (t=1).
    pub fn bridge_sample(&self, x0: &[f64], x1: &[f64], t: f64, rng: &mut RngStream) -> Result<Vec<f64>> {
        check_unit(t)?;
        if x0.len() != x1.len() {
            return Err(Error::Shape("bridge endpoints differ in dimension".into()));
        }
        if t == 0.0 {
            return Ok(x0.to_vec());
        }
        if t == 1.0 {
            return Ok(x1.to_vec());
        }
        let (w0, w1, var) = self.bridge_coefficients(t, self.sigma);
        let sd = var.sqrt();
        Ok(x0.iter().zip(x1).map(|(a, b)| w0 * a + w1 * b + sd * rng.normal()).collect())
    }

    /// Row-wise bridge draws with per-row times and (optionally) per-row sigmas.
    pub fn bridge_sample_batch(
        &self,
        x0: ArrayView2<f64>,
        x1: ArrayView2<f64>,
        t: ArrayView1<f64>,
        sigma_rows: Option<ArrayView1<f64>>,
        rng: &mut RngStream,
    ) -> Result<Array2<f64>> {
        if x0.dim() != x1.dim() || t.len() != x0.nrows() {
            return Err(Error::Shape("bridge batch shapes disagree".into()));
        }
        let mut out = Array2::zeros(x0.raw_dim());
        for i in 0..x0.nrows() {
            let ti = t[i];
            check_unit(ti)?;
            let sigma = sigma_rows.map_or(self.sigma, |s| s[i]);
            let (w0, w1, var) = self.bridge_coefficients(ti, sigma);
            let sd = var.sqrt();
            for j in 0..x0.ncols() {
                out[[i, j]] = w0 * x0[[i, j]] + w1 * x1[[i, j]] + sd * rng.normal();
            }
        }
        Ok(out)
    }

    fn fwd_rate(&self, t: f64) -> Result<f64> {
        if !(0.0..1.0).contains(&t) {
            return Err(Error::TimeRange { t, range: "[0, 1)" });
        }
        Ok(self.schedule.beta(t) / self.schedule.b(t, 1.0))
    }

    fn bwd_rate(&self, t: f64) -> Result<f64> {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::TimeRange { t, range: "(0, 1]" });
        }
        Ok(self.schedule.beta(t) / self.schedule.b(0.0, t))
    }

    /// Forward bridge drift `sigma^2 grad log r_{1|t}(x1 | x_t)`.
    pub fn fwd_drift_target(&self, xt: &[f64], t: f64, x1: &[f64]) -> Result<Vec<f64>> {
        let k = self.fwd_rate(t)?;
        Ok(xt.iter().zip(x1).map(|(a, b)| k * (b - a)).collect())
    }

    /// Backward bridge drift `sigma^2 grad log r_{t|0}(x_t | x0)`.
    pub fn bwd_drift_target(&self, xt: &[f64], t: f64, x0: &[f64]) -> Result<Vec<f64>> {
        let k = self.bwd_rate(t)?;
        Ok(xt.iter().zip(x0).map(|(a, b)| k * (b - a)).collect())
    }

    /// Batched forward targets; row `i` uses time `t[i]`.
    pub fn fwd_drift_target_batch(
        &self,
        xt: ArrayView2<f64>,
        t: ArrayView1<f64>,
        x1: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        let rates = t.iter().map(|&ti| self.fwd_rate(ti)).collect::<Result<Array1<f64>>>()?;
        Ok(scale_rows(&(&x1 - &xt), &rates))
    }

    pub fn bwd_drift_target_batch(
        &self,
        xt: ArrayView2<f64>,
        t: ArrayView1<f64>,
        x0: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        let rates = t.iter().map(|&ti| self.bwd_rate(ti)).collect::<Result<Array1<f64>>>()?;
        Ok(scale_rows(&(&x0 - &xt), &rates))
    }
}

fn scale_rows(m: &Array2<f64>, s: &Array1<f64>) -> Array2<f64> {
    let mut out = m.clone();
    Zip::from(out.rows_mut()).and(s).for_each(|mut row, &k| row *= k);
    out
}

/// Strictly monotone discretization of `[0, 1]`, in either direction.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    /// `0, 1/steps, ..., 1`.
    pub fn forward(steps: usize) -> Self {
        Self { times: (0..=steps).map(|i| i as f64 / steps as f64).collect() }
    }

    /// `1, 1 - 1/steps, ..., 0`.
    pub fn backward(steps: usize) -> Self {
        Self { times: (0..=steps).map(|i| (steps - i) as f64 / steps as f64).collect() }
    }

    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::InvalidInput("time grid needs at least two points".into()));
        }
        let first = times[0];
        let last = *times.last().unwrap();
        let ends_ok = (first == 0.0 && last == 1.0) || (first == 1.0 && last == 0.0);
        if !ends_ok {
            return Err(Error::InvalidInput("time grid must run between 0 and 1".into()));
        }
        let increasing = last > first;
        let monotone = times.windows(2).all(|w| if increasing { w[1] > w[0] } else { w[1] < w[0] });
        if !monotone {
            return Err(Error::InvalidInput("time grid is not strictly monotone".into()));
        }
        Ok(Self { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn is_forward(&self) -> bool {
        self.times[0] < self.times[1]
    }
}

/// Euler–Maruyama integration of `dX = drift(X, t) dt + sigma sqrt(beta_t) dW`
/// along `grid`, starting from the rows of `x_init`.
///
/// On a decreasing grid `dt` is negative in the drift increment; the noise
/// always has variance `sigma^2 |b_{t_prev:t}|`. For the backward SDE pass
/// the drift as `-v`. `sigma_rows` overrides `dyn.sigma()` per row.
pub fn euler_maruyama<D>(
    mut drift: D,
    x_init: ArrayView2<f64>,
    grid: &TimeGrid,
    dyn_: &RefDynamics,
    sigma_rows: Option<ArrayView1<f64>>,
    rng: &mut RngStream,
) -> Result<Array2<f64>>
where
    D: FnMut(ArrayView2<f64>, f64) -> Result<Array2<f64>>,
{
    let (n, d) = x_init.dim();
    if let Some(s) = sigma_rows {
        if s.len() != n {
            return Err(Error::Shape(format!("{} per-row sigmas for {n} rows", s.len())));
        }
    }
    let mut x = x_init.to_owned();
    if n == 0 {
        return Ok(x);
    }
    let mut noise = vec![0.0; n * d];
    for (step, w) in grid.times().windows(2).enumerate() {
        let (prev, t) = (w[0], w[1]);
        let dt = t - prev;
        let scale = dyn_.schedule().b(prev, t).abs().sqrt();
        let mu = drift(x.view(), prev)?;
        if mu.dim() != (n, d) {
            return Err(Error::Shape(format!("drift returned {:?}, expected {:?}", mu.dim(), (n, d))));
        }
        rng.fill_normal(&mut noise);
        for i in 0..n {
            let sd = sigma_rows.map_or(dyn_.sigma(), |s| s[i]) * scale;
            for j in 0..d {
                let v = x[[i, j]] + mu[[i, j]] * dt + sd * noise[i * d + j];
                if !v.is_finite() {
                    return Err(Error::NonFiniteState { step, t });
                }
                x[[i, j]] = v;
            }
        }
    }
    Ok(x)
}
