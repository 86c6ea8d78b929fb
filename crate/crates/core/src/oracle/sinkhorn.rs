use ndarray::Array2;

use crate::dist::GaussianSpec;
use crate::error::{Error, Result};

/// Entropic coupling on finite supports.
#[derive(Clone, Debug)]
pub struct GridCoupling {
    pub plan: Array2<f64>,
    /// L1 error of the row marginal after the last column update.
    pub marginal_error: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn logsumexp(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn for `min <P, C> + epsilon KL(P | mu x nu)`.
///
/// Stops when the row-marginal L1 error drops below `tol` or after
/// `max_iters` sweeps; `converged` reports which.
pub fn grid_sinkhorn(
    mu: &[f64],
    nu: &[f64],
    cost: &Array2<f64>,
    epsilon: f64,
    max_iters: usize,
    tol: f64,
) -> Result<GridCoupling> {
    let (n, m) = (mu.len(), nu.len());
    if cost.dim() != (n, m) {
        return Err(Error::Shape(format!("cost is {:?}, expected ({n}, {m})", cost.dim())));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidInput(format!("epsilon must be positive, got {epsilon}")));
    }
    for (name, h) in [("mu", mu), ("nu", nu)] {
        let s: f64 = h.iter().sum();
        if h.iter().any(|v| *v < 0.0 || !v.is_finite()) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("{name} is not a probability vector")));
        }
    }
    let log_mu: Vec<f64> = mu.iter().map(|v| v.ln()).collect();
    let log_nu: Vec<f64> = nu.iter().map(|v| v.ln()).collect();
    let kern = cost.mapv(|c| -c / epsilon);
    // scaled potentials f/epsilon, g/epsilon
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut err = f64::INFINITY;
    let mut iters = 0;
    while iters < max_iters {
        iters += 1;
        for i in 0..n {
            f[i] = if mu[i] > 0.0 { log_mu[i] - logsumexp((0..m).map(|j| kern[[i, j]] + g[j])) } else { f64::NEG_INFINITY };
        }
        for j in 0..m {
            g[j] = if nu[j] > 0.0 { log_nu[j] - logsumexp((0..n).map(|i| kern[[i, j]] + f[i])) } else { f64::NEG_INFINITY };
        }
        if iters % 5 == 0 || iters == max_iters {
            err = (0..n)
                .map(|i| {
                    let row = if mu[i] > 0.0 { logsumexp((0..m).map(|j| kern[[i, j]] + g[j] + f[i])).exp() } else { 0.0 };
                    (row - mu[i]).abs()
                })
                .sum();
            if err < tol {
                break;
            }
        }
    }
    let plan = Array2::from_shape_fn((n, m), |(i, j)| {
        let l = kern[[i, j]] + f[i] + g[j];
        if l.is_finite() { l.exp() } else { 0.0 }
    });
    Ok(GridCoupling { plan, marginal_error: err, iterations: iters, converged: err < tol })
}

/// Moments of a 1-D grid coupling.
#[derive(Clone, Copy, Debug)]
pub struct GridMoments {
    pub mean0: f64,
    pub mean1: f64,
    pub var0: f64,
    pub var1: f64,
    pub cross: f64,
    pub converged: bool,
}

/// Entropic coupling of two 1-D Gaussians discretized on `n` points of
/// `[lo, hi]`, cost `|x - y|^2 / 2`.
pub fn sinkhorn_gaussian_1d(
    psi0: &GaussianSpec,
    psi1: &GaussianSpec,
    epsilon: f64,
    n: usize,
    lo: f64,
    hi: f64,
) -> Result<GridMoments> {
    if psi0.dim() != 1 || psi1.dim() != 1 {
        return Err(Error::Shape("1-D marginals required".into()));
    }
    if n < 2 || !(hi > lo) {
        return Err(Error::InvalidInput("bad grid".into()));
    }
    let xs: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    let hist = |p: &GaussianSpec| -> Result<Vec<f64>> {
        let l: Vec<f64> = xs.iter().map(|x| p.log_density(&[*x])).collect::<Result<_>>()?;
        let z = logsumexp(l.iter().copied());
        Ok(l.iter().map(|v| (v - z).exp()).collect())
    };
    let mu = hist(psi0)?;
    let nu = hist(psi1)?;
    let cost = Array2::from_shape_fn((n, n), |(i, j)| 0.5 * (xs[i] - xs[j]).powi(2));
    let c = grid_sinkhorn(&mu, &nu, &cost, epsilon, 20_000, 1e-10)?;
    let mut m = GridMoments { mean0: 0.0, mean1: 0.0, var0: 0.0, var1: 0.0, cross: 0.0, converged: c.converged };
    for i in 0..n {
        for j in 0..n {
            let p = c.plan[[i, j]];
            m.mean0 += p * xs[i];
            m.mean1 += p * xs[j];
        }
    }
    for i in 0..n {
        for j in 0..n {
            let p = c.plan[[i, j]];
            let (a, b) = (xs[i] - m.mean0, xs[j] - m.mean1);
            m.var0 += p * a * a;
            m.var1 += p * b * b;
            m.cross += p * a * b;
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn marginals_hold() {
        let mu = vec![0.2, 0.5, 0.3];
        let nu = vec![0.6, 0.4];
        let cost = Array2::from_shape_fn((3, 2), |(i, j)| (i as f64 - j as f64).powi(2));
        let c = grid_sinkhorn(&mu, &nu, &cost, 0.3, 5000, 1e-12).unwrap();
        assert!(c.converged);
        for j in 0..2 {
            assert!((c.plan.column(j).sum() - nu[j]).abs() < 1e-12);
        }
        for i in 0..3 {
            assert!((c.plan.row(i).sum() - mu[i]).abs() < 1e-11);
        }
    }

    #[test]
    fn large_epsilon_gives_product() {
        let mu = vec![0.5, 0.5];
        let nu = vec![0.25, 0.75];
        let cost = Array2::from_shape_fn((2, 2), |(i, j)| (i + j) as f64);
        let c = grid_sinkhorn(&mu, &nu, &cost, 1e9, 100, 1e-14).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((c.plan[[i, j]] - mu[i] * nu[j]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn zero_mass_bins_stay_empty() {
        let mu = vec![0.0, 1.0];
        let nu = vec![0.5, 0.5];
        let cost = Array2::zeros((2, 2));
        let c = grid_sinkhorn(&mu, &nu, &cost, 1.0, 100, 1e-12).unwrap();
        assert_eq!(c.plan.row(0).sum(), 0.0);
        assert!((c.plan[[1, 0]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_histogram() {
        let cost = Array2::zeros((2, 2));
        assert!(grid_sinkhorn(&[0.5, 0.6], &[0.5, 0.5], &cost, 1.0, 10, 1e-9).is_err());
        assert!(grid_sinkhorn(&[0.5, 0.5], &[1.0], &cost, 1.0, 10, 1e-9).is_err());
    }

    #[test]
    fn gaussian_grid_agrees_with_closed_form() {
        let p0 = GaussianSpec::isotropic(vec![-1.0], 1.0).unwrap();
        let p1 = GaussianSpec::isotropic(vec![1.0], 1.5).unwrap();
        let eps = 1.0;
        let m = sinkhorn_gaussian_1d(&p0, &p1, eps, 200, -8.0, 8.0).unwrap();
        let cf = crate::oracle::gaussian_sb_coupling(&p0, &p1, eps).unwrap();
        assert!(m.converged);
        assert!((m.cross - cf.cross_cov()[(0, 0)]).abs() < 1e-3, "{} vs {}", m.cross, cf.cross_cov()[(0, 0)]);
    }

    #[test]
    fn symmetric_problem_gives_symmetric_plan() {
        let n = 40;
        let x: Vec<f64> = (0..n).map(|i| -3.0 + 6.0 * i as f64 / (n - 1) as f64).collect();
        let mut mu: Vec<f64> = x.iter().map(|v| (-0.5 * v * v).exp()).collect();
        let z: f64 = mu.iter().sum();
        mu.iter_mut().for_each(|v| *v /= z);
        let cost = Array2::from_shape_fn((n, n), |(i, j)| (x[i] - x[j]).powi(2));
        let c = grid_sinkhorn(&mu, &mu, &cost, 0.5, 20_000, 1e-12).unwrap();
        assert!(c.converged);
        let asym = (&c.plan - &c.plan.t()).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(asym < 1e-12, "{asym}");
        // mirror symmetry of the grid carries over to the plan
        let mirrored = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).fold(0.0f64, |a, (i, j)| {
            a.max((c.plan[[i, j]] - c.plan[[n - 1 - i, n - 1 - j]]).abs())
        });
        assert!(mirrored < 1e-12, "{mirrored}");
    }
}
