//! Evaluation metrics: the Girsanov drift gap and the conditional
//! Bures-Wasserstein UVP.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::dist::{sample_cov, GaussianSpec};
use crate::error::{Error, Result};
use crate::linalg;
use crate::oracle::SbInstance;
use crate::rng::RngStream;

/// Default time clip for the drift-gap integral.
pub const TIME_CLIP: f64 = 0.0025;

/// A Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
    pub n: usize,
}

impl Estimate {
    fn from_samples(xs: &[f64], scale: f64) -> Estimate {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = if n > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        Estimate { value: scale * mean, se: scale * (var / n as f64).sqrt(), n }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub kl: Estimate,
    pub cbw2_uvp: Estimate,
    pub n_times: usize,
    pub n_inner: usize,
    pub seed: u64,
}

/// Stratified times: midpoints of `n` equal cells of `[clip, 1 - clip]`.
pub fn stratified_times(n: usize, clip: f64) -> Vec<f64> {
    let w = (1.0 - 2.0 * clip) / n as f64;
    (0..n).map(|k| clip + (k as f64 + 0.5) * w).collect()
}

/// Girsanov estimate of `KL(S | P)` for a model with forward drift `drift_p`.
///
/// Each of `n_paths` coupling draws contributes the average of
/// `|mu_s - mu_p|^2 / (2 sigma^2)` over the stratified times, with a fresh
/// bridge point per time. The standard error is taken across paths.
pub fn kl_drift_gap<D>(
    inst: &dyn SbInstance,
    mut drift_p: D,
    n_paths: usize,
    n_times: usize,
    clip: f64,
    rng: &mut RngStream,
) -> Result<Estimate>
where
    D: FnMut(ArrayView2<f64>, f64) -> Result<Array2<f64>>,
{
    if n_paths < 2 || n_times == 0 {
        return Err(Error::InvalidInput("kl_drift_gap needs n_paths >= 2 and n_times >= 1".into()));
    }
    if !(clip > 0.0 && clip < 0.5) {
        return Err(Error::InvalidInput(format!("time clip must lie in (0, 0.5), got {clip}")));
    }
    let sigma = inst.sigma();
    let (x0, x1) = inst.sample_coupling(n_paths, &mut rng.split("coupling"))?;
    let mut per_path = vec![0.0; n_paths];
    for (k, t) in stratified_times(n_times, clip).into_iter().enumerate() {
        let times = Array1::from_elem(n_paths, t);
        let xt = inst.dynamics().bridge_sample_batch(
            x0.view(),
            x1.view(),
            times.view(),
            None,
            &mut rng.split_indexed("bridge", k as u64),
        )?;
        let ms = inst.sb_optimal_drift_batch(xt.view(), t)?;
        let mp = drift_p(xt.view(), t)?;
        if mp.dim() != ms.dim() {
            return Err(Error::Shape(format!("model drift is {:?}, expected {:?}", mp.dim(), ms.dim())));
        }
        for (i, (a, b)) in ms.rows().into_iter().zip(mp.rows()).enumerate() {
            let gap: f64 = a.iter().zip(b.iter()).map(|(u, v)| (u - v).powi(2)).sum();
            if !gap.is_finite() {
                return Err(Error::NonFiniteState { step: k, t });
            }
            per_path[i] += gap;
        }
    }
    Ok(Estimate::from_samples(&per_path, 1.0 / (2.0 * sigma * sigma * n_times as f64)))
}

/// Squared Bures-Wasserstein distance between two Gaussians.
pub fn bw2(g1: &GaussianSpec, g2: &GaussianSpec) -> Result<f64> {
    if g1.dim() != g2.dim() {
        return Err(Error::Shape("bw2 arguments differ in dimension".into()));
    }
    let s1 = g1.cov_matrix();
    let s2 = g2.cov_matrix();
    linalg::check_symmetric(&s1)?;
    linalg::check_symmetric(&s2)?;
    let mean: f64 = g1.mean.iter().zip(&g2.mean).map(|(a, b)| (a - b).powi(2)).sum();
    let r1 = linalg::sqrt_psd(&s1);
    let cross = linalg::sqrt_psd(&(&r1 * &s2 * &r1));
    Ok(mean + s1.trace() + s2.trace() - 2.0 * cross.trace())
}

/// Gaussian fit by sample mean and unbiased covariance plus `1e-6 I`.
pub fn fit_gaussian(x: ArrayView2<f64>) -> Result<GaussianSpec> {
    let d = x.ncols();
    if x.nrows() < d + 1 {
        return Err(Error::InvalidInput(format!("covariance fit needs at least {} samples, got {}", d + 1, x.nrows())));
    }
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let mut cov = sample_cov(x);
    for i in 0..d {
        cov[[i, i]] += 1e-6;
    }
    GaussianSpec::new(mean.to_vec(), crate::dist::Covariance::Full(cov.rows().into_iter().map(|r| r.to_vec()).collect()))
}

/// Conditions simulated per call of `sim`.
const COND_CHUNK: usize = 25;

/// `100 / (tr Cov_S(X1) / 2)` times the average over `x0 ~ Psi0` of
/// `BW2(fit of sim(x0), S_{1|0}(. | x0))`.
///
/// `sim` receives `x0` rows (each condition repeated `n_inner` times, grouped
/// by condition) and returns terminal samples row-aligned with them.
pub fn cbw2_uvp<S>(
    inst: &dyn SbInstance,
    mut sim: S,
    n_cond: usize,
    n_inner: usize,
    rng: &mut RngStream,
) -> Result<Estimate>
where
    S: FnMut(ArrayView2<f64>, &mut RngStream) -> Result<Array2<f64>>,
{
    let d = inst.dim();
    if n_inner < d + 1 {
        return Err(Error::InvalidInput(format!("n_inner must be at least {}, got {n_inner}", d + 1)));
    }
    if n_cond < 2 {
        return Err(Error::InvalidInput("n_cond must be at least 2".into()));
    }
    let x0 = inst.sample_psi0(n_cond, &mut rng.split("conditions"))?;
    let mut per_cond = Vec::with_capacity(n_cond);
    for (chunk_idx, start) in (0..n_cond).step_by(COND_CHUNK).enumerate() {
        let end = (start + COND_CHUNK).min(n_cond);
        let rows = (end - start) * n_inner;
        let batch = Array2::from_shape_fn((rows, d), |(r, j)| x0[[start + r / n_inner, j]]);
        let out = sim(batch.view(), &mut rng.split_indexed("simulate", chunk_idx as u64))?;
        if out.dim() != (rows, d) {
            return Err(Error::Shape(format!("simulator returned {:?}, expected ({rows}, {d})", out.dim())));
        }
        for c in start..end {
            let off = (c - start) * n_inner;
            let fit = fit_gaussian(out.slice(ndarray::s![off..off + n_inner, ..]))?;
            let (m, cov) = inst.conditional_moments(x0.row(c).as_slice().expect("standard layout"))?;
            let truth = GaussianSpec::from_moments(&m, &cov)?;
            per_cond.push(bw2(&fit, &truth)?);
        }
    }
    Ok(Estimate::from_samples(&per_cond, 100.0 / (0.5 * inst.x1_total_variance())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::Covariance;
    use crate::oracle::{gaussian_sb_coupling, mixture_sb_build, pentagon_potential};

    #[test]
    fn bw2_scalar_closed_form() {
        let a = GaussianSpec::isotropic(vec![0.0], 1.0).unwrap();
        let b = GaussianSpec::isotropic(vec![3.0], 4.0).unwrap();
        assert!((bw2(&a, &b).unwrap() - 10.0).abs() < 1e-12);
        assert!(bw2(&a, &a).unwrap().abs() < 1e-10);
    }

    #[test]
    fn bw2_commuting_diagonal() {
        let a = GaussianSpec::diagonal(vec![0.0, 0.0], vec![1.0, 4.0]).unwrap();
        let b = GaussianSpec::diagonal(vec![0.0, 0.0], vec![4.0, 1.0]).unwrap();
        assert!((bw2(&a, &b).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn bw2_rejects_asymmetric() {
        let a = GaussianSpec { mean: vec![0.0, 0.0], cov: Covariance::Full(vec![vec![1.0, 0.5], vec![0.0, 1.0]]) };
        assert!(bw2(&a, &GaussianSpec::standard(2)).is_err());
    }

    #[test]
    fn kl_of_exact_drift_is_zero() {
        let inst = mixture_sb_build(&GaussianSpec::standard(2), &pentagon_potential(4.0, 0.5).unwrap(), 1.0).unwrap();
        let e = kl_drift_gap(&inst, |x, t| inst.sb_optimal_drift_batch(x, t), 200, 10, TIME_CLIP, &mut RngStream::from_seed(1))
            .unwrap();
        assert_eq!(e.value, 0.0);
    }

    #[test]
    fn kl_of_constant_drift_on_trivial_problem() {
        let s2 = 0.5;
        let inst = gaussian_sb_coupling(
            &GaussianSpec::standard(2),
            &GaussianSpec::isotropic(vec![0.0; 2], 1.0 + s2).unwrap(),
            s2,
        )
        .unwrap();
        let c = [0.3, -0.4];
        let e = kl_drift_gap(
            &inst,
            |x, _| Ok(Array2::from_shape_fn(x.raw_dim(), |(_, j)| c[j])),
            100,
            5,
            TIME_CLIP,
            &mut RngStream::from_seed(1),
        )
        .unwrap();
        let exact = 0.25 / (2.0 * s2);
        assert!((e.value - exact).abs() <= 3.0 * e.se + 1e-9, "{} vs {exact}", e.value);
    }

    #[test]
    fn cbw2_of_constant_simulator() {
        // BW2 against a point mass (plus the 1e-6 jitter) is |m|^2 + tr Sigma
        let inst = mixture_sb_build(&GaussianSpec::standard(2), &pentagon_potential(4.0, 0.5).unwrap(), 1.0).unwrap();
        let mut rng = RngStream::from_seed(5);
        let e = cbw2_uvp(&inst, |x, _| Ok(Array2::zeros(x.raw_dim())), 30, 4, &mut rng).unwrap();
        let x0 = inst.sample_psi0(30, &mut RngStream::from_seed(5).split("conditions")).unwrap();
        let mut acc = 0.0;
        for r in x0.rows() {
            let (m, c) = inst.conditional_moments(&r.to_vec()).unwrap();
            let jitter = GaussianSpec::isotropic(vec![0.0; 2], 1e-6).unwrap();
            let truth = GaussianSpec::from_moments(&m, &c).unwrap();
            acc += bw2(&jitter, &truth).unwrap();
        }
        let expected = 100.0 / (0.5 * inst.x1_total_variance()) * acc / 30.0;
        assert!((e.value - expected).abs() < 1e-9 * expected);
    }

    #[test]
    fn cbw2_rejects_tiny_inner() {
        let inst = mixture_sb_build(&GaussianSpec::standard(2), &pentagon_potential(4.0, 0.5).unwrap(), 1.0).unwrap();
        assert!(cbw2_uvp(&inst, |x, _| Ok(x.to_owned()), 10, 2, &mut RngStream::from_seed(0)).is_err());
    }

    #[test]
    fn stratified_grid_is_clipped() {
        let t = stratified_times(4, 0.1);
        assert!((t[0] - 0.2).abs() < 1e-15 && (t[3] - 0.8).abs() < 1e-15);
    }
}
