//! Schrödinger-bridge problems with known solutions.
//!
//! Two families are provided: Gaussian marginals, whose static bridge is the
//! closed-form Gaussian entropic-OT coupling, and Gaussian `Psi0` paired with a
//! Gaussian-mixture terminal potential, for which `S_{1|0}` is an explicit
//! mixture and the optimal drift is a log-sum-exp of Gaussian convolutions.
//! A log-domain grid Sinkhorn solver cross-checks the Gaussian formula.

mod gaussian;
mod mixture;
mod sinkhorn;

pub use gaussian::{gaussian_sb_coupling, GaussianSBInstance};
pub use mixture::{mixture_sb_build, pentagon_potential, MixturePotentialSBInstance};
pub use sinkhorn::{grid_sinkhorn, sinkhorn_gaussian_1d, GridCoupling, GridMoments};

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView2};

use crate::dist::Sampler;
use crate::error::{Error, Result};
use crate::reference::RefDynamics;
use crate::rng::RngStream;

/// A bridge problem with exact samplers, exact optimal drift and exact
/// conditional moments of `S_{1|0}`.
pub trait SbInstance: Send + Sync {
    fn dim(&self) -> usize;

    /// Reference process (constant schedule, `sigma^2 = epsilon`).
    fn dynamics(&self) -> &RefDynamics;

    fn sample_psi0(&self, n: usize, rng: &mut RngStream) -> Result<Array2<f64>>;

    /// Row-wise draws `x1 ~ S_{1|0}(. | x0)`.
    fn sample_conditional(&self, x0: ArrayView2<f64>, rng: &mut RngStream) -> Result<Array2<f64>>;

    /// Mean and covariance of `S_{1|0}(. | x0)`.
    fn conditional_moments(&self, x0: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)>;

    /// SB-optimal forward drift `mu_s(x, t)`, `t < 1`.
    fn sb_optimal_drift(&self, x: &[f64], t: f64) -> Result<Vec<f64>>;

    /// Total variance `tr Cov_S(X1)`.
    fn x1_total_variance(&self) -> f64;

    fn sigma(&self) -> f64 {
        self.dynamics().sigma()
    }

    /// `(x0, x1) ~ S_{0,1}`.
    fn sample_coupling(&self, n: usize, rng: &mut RngStream) -> Result<(Array2<f64>, Array2<f64>)> {
        let x0 = self.sample_psi0(n, &mut rng.split("psi0"))?;
        let x1 = self.sample_conditional(x0.view(), &mut rng.split("conditional"))?;
        Ok((x0, x1))
    }

    fn sample_psi1(&self, n: usize, rng: &mut RngStream) -> Result<Array2<f64>> {
        Ok(self.sample_coupling(n, rng)?.1)
    }

    /// Batched optimal drift at a shared time.
    fn sb_optimal_drift_batch(&self, x: ArrayView2<f64>, t: f64) -> Result<Array2<f64>> {
        let mut out = Array2::zeros(x.raw_dim());
        for (i, row) in x.rows().into_iter().enumerate() {
            let v = self.sb_optimal_drift(row.as_slice().map_or(&row.to_vec()[..], |s| s), t)?;
            out.row_mut(i).assign(&Array1::from(v));
        }
        Ok(out)
    }
}

pub(crate) fn check_drift_time(t: f64) -> Result<()> {
    if (0.0..1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::TimeRange { t, range: "[0, 1)" })
    }
}

/// Exact `S`-distributed triples `(x0, x_t, x1)`.
pub fn sample_sb_path_points(
    inst: &dyn SbInstance,
    n: usize,
    t: f64,
    rng: &mut RngStream,
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::TimeRange { t, range: "[0, 1]" });
    }
    let (x0, x1) = inst.sample_coupling(n, &mut rng.split("coupling"))?;
    let times = Array1::from_elem(n, t);
    let xt = inst
        .dynamics()
        .bridge_sample_batch(x0.view(), x1.view(), times.view(), None, &mut rng.split("bridge"))?;
    Ok((x0, xt, x1))
}

/// The `Psi1` marginal of an instance as a [`Sampler`].
pub struct Psi1<I>(pub I);

impl<I: std::ops::Deref<Target = T> + Send + Sync, T: SbInstance + ?Sized> Sampler for Psi1<I> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn sample(&self, n: usize, rng: &mut RngStream) -> Result<Array2<f64>> {
        self.0.sample_psi1(n, rng)
    }
}

/// The `Psi0` marginal of an instance as a [`Sampler`].
pub struct Psi0<I>(pub I);

impl<I: std::ops::Deref<Target = T> + Send + Sync, T: SbInstance + ?Sized> Sampler for Psi0<I> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn sample(&self, n: usize, rng: &mut RngStream) -> Result<Array2<f64>> {
        self.0.sample_psi0(n, rng)
    }
}
