use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2};

use super::{check_drift_time, SbInstance};
use crate::dist::{gaussian_sample, GaussianSpec};
use crate::error::{Error, Result};
use crate::linalg;
use crate::reference::RefDynamics;
use crate::rng::RngStream;

/// Gaussian marginals and their closed-form entropic-OT coupling.
#[derive(Clone, Debug)]
pub struct GaussianSBInstance {
    pub psi0: GaussianSpec,
    pub psi1: GaussianSpec,
    pub epsilon: f64,
    /// Law of `(X0, X1)` as a `2d`-dimensional Gaussian.
    pub joint: GaussianSpec,
    dynamics: RefDynamics,
    /// `Cov(X0, X1)`, rows indexed by `X0`.
    cross: DMatrix<f64>,
    /// `E[X1 | x0] = gain x0 + offset`.
    gain: DMatrix<f64>,
    offset: DVector<f64>,
    cond_cov: DMatrix<f64>,
    /// Terminal potential `exp(-x'Qx/2 + q'x)` generating the optimal drift.
    pot_quad: DMatrix<f64>,
    pot_lin: DVector<f64>,
}

/// Closed-form Gaussian coupling minimizing `E[|X0 - X1|^2 / 2] + epsilon H`.
///
/// With `A = Sigma0`, `B = Sigma1`:
/// `C = 1/2 A^{1/2} (4 A^{1/2} B A^{1/2} + epsilon^2 I)^{1/2} A^{-1/2} - epsilon/2 I`.
pub fn gaussian_sb_coupling(psi0: &GaussianSpec, psi1: &GaussianSpec, epsilon: f64) -> Result<GaussianSBInstance> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::InvalidInput(format!("epsilon must be positive, got {epsilon}")));
    }
    let d = psi0.dim();
    if psi1.dim() != d {
        return Err(Error::Shape("marginals differ in dimension".into()));
    }
    let a = psi0.cov_matrix();
    let b = psi1.cov_matrix();
    linalg::check_pd(&a)?;
    linalg::check_pd(&b)?;

    let eye = DMatrix::<f64>::identity(d, d);
    let a_half = linalg::sqrt_psd(&a);
    let a_half_inv = linalg::inv_pd(&a_half)?;
    let inner = &a_half * &b * &a_half * 4.0 + &eye * (epsilon * epsilon);
    let core = linalg::sqrt_psd(&inner);
    let cross = (&a_half * core * &a_half_inv) * 0.5 - &eye * (epsilon / 2.0);

    let a_inv = linalg::inv_pd(&a)?;
    let gain = cross.transpose() * &a_inv;
    let mu0 = psi0.mean_vector();
    let mu1 = psi1.mean_vector();
    let offset = &mu1 - &gain * &mu0;
    let cond_cov = &b - cross.transpose() * &a_inv * &cross;
    let cond_cov = (&cond_cov + cond_cov.transpose()) * 0.5;
    let cond_prec = linalg::inv_pd(&cond_cov)?;

    // The bridge structure forces gain = V / sigma^2 (the x0-x1 interaction
    // of S_{0,1} is exactly the reference kernel's).
    let dev = (&gain - &cond_cov / epsilon).amax();
    if dev > 1e-8 * (1.0 + gain.amax()) {
        return Err(Error::InvalidInput(format!("Gaussian coupling failed its structure check ({dev:e})")));
    }

    let pot_quad = &cond_prec - &eye / epsilon;
    let pot_lin = &cond_prec * &offset;

    let mut jm = DMatrix::zeros(2 * d, 2 * d);
    jm.view_mut((0, 0), (d, d)).copy_from(&a);
    jm.view_mut((0, d), (d, d)).copy_from(&cross);
    jm.view_mut((d, 0), (d, d)).copy_from(&cross.transpose());
    jm.view_mut((d, d), (d, d)).copy_from(&b);
    let jm = (&jm + jm.transpose()) * 0.5;
    let mut jmean = psi0.mean.clone();
    jmean.extend_from_slice(&psi1.mean);
    let joint = GaussianSpec::from_moments(&DVector::from_vec(jmean), &jm)?;

    Ok(GaussianSBInstance {
        psi0: psi0.clone(),
        psi1: psi1.clone(),
        epsilon,
        joint,
        dynamics: RefDynamics::constant(epsilon.sqrt())?,
        cross,
        gain,
        offset,
        cond_cov,
        pot_quad,
        pot_lin,
    })
}

impl GaussianSBInstance {
    /// `Cov(X0, X1)` under the optimal coupling.
    pub fn cross_cov(&self) -> &DMatrix<f64> {
        &self.cross
    }

    /// `(gain, offset, covariance)` of `S_{1|0}(. | x0) = N(gain x0 + offset, covariance)`.
    pub fn conditional_map(&self) -> (&DMatrix<f64>, &DVector<f64>, &DMatrix<f64>) {
        (&self.gain, &self.offset, &self.cond_cov)
    }

    /// `(Q, q)` of the terminal potential `exp(-x'Qx/2 + q'x)`.
    pub fn terminal_potential(&self) -> (&DMatrix<f64>, &DVector<f64>) {
        (&self.pot_quad, &self.pot_lin)
    }

    /// Covariance of `X_t` under `S` (coupling plus reference bridge).
    pub fn marginal_cov(&self, t: f64) -> DMatrix<f64> {
        let a = self.psi0.cov_matrix();
        let b = self.psi1.cov_matrix();
        let d = a.nrows();
        let c = &self.cross;
        &a * (1.0 - t).powi(2)
            + &b * (t * t)
            + (c + c.transpose()) * (t * (1.0 - t))
            + DMatrix::identity(d, d) * (self.epsilon * t * (1.0 - t))
    }

    /// Backward optimal drift `v_s(x, t)`, `t > 0`, so that `-v_s` drives
    /// the time reversal from `Psi1`. Obtained from the forward formula on
    /// the time-reversed problem.
    pub fn sb_optimal_bwd_drift(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let rev = gaussian_sb_coupling(&self.psi1, &self.psi0, self.epsilon)?;
        rev.sb_optimal_drift(x, 1.0 - t)
    }
}

impl SbInstance for GaussianSBInstance {
    fn dim(&self) -> usize {
        self.psi0.dim()
    }

    fn dynamics(&self) -> &RefDynamics {
        &self.dynamics
    }

    fn sample_psi0(&self, n: usize, rng: &mut RngStream) -> Result<Array2<f64>> {
        gaussian_sample(&self.psi0, n, rng)
    }

    fn sample_psi1(&self, n: usize, rng: &mut RngStream) -> Result<Array2<f64>> {
        gaussian_sample(&self.psi1, n, rng)
    }

    fn sample_conditional(&self, x0: ArrayView2<f64>, rng: &mut RngStream) -> Result<Array2<f64>> {
        let d = self.dim();
        let zero = GaussianSpec::from_moments(&DVector::zeros(d), &self.cond_cov)?;
        let noise = gaussian_sample(&zero, x0.nrows(), rng)?;
        let mut out = noise;
        for (i, row) in x0.rows().into_iter().enumerate() {
            let x = DVector::from_iterator(d, row.iter().copied());
            let m = &self.gain * x + &self.offset;
            for j in 0..d {
                out[[i, j]] += m[j];
            }
        }
        Ok(out)
    }

    fn conditional_moments(&self, x0: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let x = DVector::from_column_slice(x0);
        Ok((&self.gain * x + &self.offset, self.cond_cov.clone()))
    }

    /// `mu_s(x, t) = sigma^2 (I + tau Q)^{-1} (q - Q x)`, `tau = sigma^2 (1 - t)`.
    fn sb_optimal_drift(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        check_drift_time(t)?;
        let d = self.dim();
        let tau = self.epsilon * (1.0 - t);
        let m = DMatrix::identity(d, d) + &self.pot_quad * tau;
        let rhs = &self.pot_lin - &self.pot_quad * DVector::from_column_slice(x);
        let sol = m.lu().solve(&rhs).ok_or_else(|| Error::InvalidInput("singular drift system".into()))?;
        Ok((sol * self.epsilon).iter().copied().collect())
    }

    fn x1_total_variance(&self) -> f64 {
        self.psi1.variances().iter().sum()
    }
}
