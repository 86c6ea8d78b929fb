use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2};

use super::{check_drift_time, SbInstance};
use crate::dist::{gaussian_sample, Covariance, GaussianSpec, MixtureSpec};
use crate::error::{Error, Result};
use crate::reference::RefDynamics;
use crate::rng::RngStream;

const VARIANCE_DRAWS: usize = 200_000;

/// Centered Gaussian `Psi0` with terminal potential
/// `v(x1) = sum_k w_k N(x1; m_k, S_k)`, so that
/// `S_{1|0}(x1 | x0) ∝ v(x1) N(x1; x0, sigma^2 I)`.
///
/// Component covariances are diagonal.
#[derive(Clone, Debug)]
pub struct MixturePotentialSBInstance {
    pub psi0: GaussianSpec,
    pub potential: MixtureSpec,
    dynamics: RefDynamics,
    log_w: Vec<f64>,
    means: Vec<Vec<f64>>,
    vars: Vec<Vec<f64>>,
    post_vars: Vec<Vec<f64>>,
    total_var: std::sync::Arc<OnceLock<f64>>,
}

/// The default 2-D potential: five components on a regular pentagon.
pub fn pentagon_potential(radius: f64, var: f64) -> Result<MixtureSpec> {
    let components = (0..5)
        .map(|k| {
            let a = 2.0 * std::f64::consts::PI * k as f64 / 5.0;
            GaussianSpec::isotropic(vec![radius * a.cos(), radius * a.sin()], var)
        })
        .collect::<Result<Vec<_>>>()?;
    MixtureSpec::new(vec![0.2; 5], components)
}

pub fn mixture_sb_build(psi0: &GaussianSpec, potential: &MixtureSpec, sigma: f64) -> Result<MixturePotentialSBInstance> {
    psi0.validate()?;
    potential.validate()?;
    let d = psi0.dim();
    if psi0.mean.iter().any(|m| *m != 0.0) {
        return Err(Error::InvalidInput("Psi0 must be centered".into()));
    }
    if potential.components.iter().any(|c| c.dim() != d) {
        return Err(Error::Shape("potential components differ in dimension from Psi0".into()));
    }
    let dynamics = RefDynamics::constant(sigma)?;
    let s2 = sigma * sigma;
    let mut means = Vec::new();
    let mut vars = Vec::new();
    let mut post_vars = Vec::new();
    for c in &potential.components {
        let v = match &c.cov {
            Covariance::Diagonal(v) => v.clone(),
            Covariance::Full(_) => {
                return Err(Error::InvalidInput("potential components must have diagonal covariance".into()))
            }
        };
        if v.iter().any(|s| *s <= 0.0) {
            return Err(Error::NotPositive { kind: "potential variance", detail: format!("{v:?}") });
        }
        post_vars.push(v.iter().map(|s| 1.0 / (1.0 / s + 1.0 / s2)).collect());
        means.push(c.mean.clone());
        vars.push(v);
    }
    Ok(MixturePotentialSBInstance {
        psi0: psi0.clone(),
        potential: potential.clone(),
        dynamics,
        log_w: potential.weights.iter().map(|w| w.ln()).collect(),
        means,
        vars,
        post_vars,
        total_var: Default::default(),
    })
}

fn log_normal_diag(x: &[f64], m: &[f64], v: &[f64], extra: f64) -> f64 {
    let mut acc = 0.0;
    for i in 0..x.len() {
        let s = v[i] + extra;
        let r = x[i] - m[i];
        acc -= 0.5 * (r * r / s + (2.0 * std::f64::consts::PI * s).ln());
    }
    acc
}

fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        z += *l;
    }
    for l in logits.iter_mut() {
        *l /= z;
    }
}

impl MixturePotentialSBInstance {
    fn k(&self) -> usize {
        self.log_w.len()
    }

    /// Posterior component weights of `S_{1|0}(. | x0)`.
    pub fn conditional_weights(&self, x0: &[f64]) -> Vec<f64> {
        let s2 = self.sigma().powi(2);
        let mut w: Vec<f64> = (0..self.k())
            .map(|k| self.log_w[k] + log_normal_diag(x0, &self.means[k], &self.vars[k], s2))
            .collect();
        softmax_in_place(&mut w);
        w
    }

    /// Mean of component `k` of `S_{1|0}(. | x0)`; its covariance is diagonal
    /// `(S_k^{-1} + sigma^{-2})^{-1}`.
    fn component_mean(&self, k: usize, x0: &[f64]) -> Vec<f64> {
        let s2 = self.sigma().powi(2);
        (0..x0.len())
            .map(|i| self.post_vars[k][i] * (self.means[k][i] / self.vars[k][i] + x0[i] / s2))
            .collect()
    }

    /// `S_{1|0}(. | x0)` as an explicit mixture.
    pub fn conditional_mixture(&self, x0: &[f64]) -> Result<MixtureSpec> {
        let comps = (0..self.k())
            .map(|k| GaussianSpec::diagonal(self.component_mean(k, x0), self.post_vars[k].clone()))
            .collect::<Result<Vec<_>>>()?;
        let mut w = self.conditional_weights(x0);
        let z: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= z);
        MixtureSpec::new(w, comps)
    }

    fn compute_total_variance(&self) -> f64 {
        // law of total variance, averaged over x0 draws
        let d = self.dim();
        let mut rng = RngStream::from_seed(0).split("mixture/x1-variance");
        let Ok(x0) = gaussian_sample(&self.psi0, VARIANCE_DRAWS, &mut rng) else {
            return f64::NAN;
        };
        let mut within = 0.0;
        let mut sum = vec![0.0; d];
        let mut sum_sq = vec![0.0; d];
        for row in x0.rows() {
            let x: Vec<f64> = row.to_vec();
            let (m, c) = self.conditional_moments(&x).expect("dimension checked");
            within += c.trace();
            for i in 0..d {
                sum[i] += m[i];
                sum_sq[i] += m[i] * m[i];
            }
        }
        let n = VARIANCE_DRAWS as f64;
        let between: f64 = (0..d).map(|i| sum_sq[i] / n - (sum[i] / n).powi(2)).sum();
        within / n + between
    }
}

impl SbInstance for MixturePotentialSBInstance {
    fn dim(&self) -> usize {
        self.psi0.dim()
    }

    fn dynamics(&self) -> &RefDynamics {
        &self.dynamics
    }

    fn sample_psi0(&self, n: usize, rng: &mut RngStream) -> Result<Array2<f64>> {
        gaussian_sample(&self.psi0, n, rng)
    }

    fn sample_conditional(&self, x0: ArrayView2<f64>, rng: &mut RngStream) -> Result<Array2<f64>> {
        let d = self.dim();
        if x0.ncols() != d {
            return Err(Error::Shape(format!("expected {d} columns, got {}", x0.ncols())));
        }
        let mut out = Array2::zeros(x0.raw_dim());
        for (i, row) in x0.rows().into_iter().enumerate() {
            let x: Vec<f64> = row.to_vec();
            let w = self.conditional_weights(&x);
            let k = crate::dist::choose_index(&w, rng.uniform());
            let m = self.component_mean(k, &x);
            for j in 0..d {
                out[[i, j]] = m[j] + self.post_vars[k][j].sqrt() * rng.normal();
            }
        }
        Ok(out)
    }

    fn conditional_moments(&self, x0: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let d = self.dim();
        if x0.len() != d {
            return Err(Error::Shape(format!("expected length {d}, got {}", x0.len())));
        }
        let w = self.conditional_weights(x0);
        let comp: Vec<DVector<f64>> = (0..self.k()).map(|k| DVector::from_vec(self.component_mean(k, x0))).collect();
        let mean = comp.iter().zip(&w).fold(DVector::zeros(d), |acc, (m, wk)| acc + m * *wk);
        let mut cov = DMatrix::zeros(d, d);
        for k in 0..self.k() {
            let r = &comp[k] - &mean;
            cov += (DMatrix::from_diagonal(&DVector::from_column_slice(&self.post_vars[k])) + &r * r.transpose()) * w[k];
        }
        Ok((mean, cov))
    }

    /// `mu_s(x, t) = sigma^2 grad_x log sum_k w_k N(x; m_k, S_k + sigma^2 (1 - t) I)`.
    fn sb_optimal_drift(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        check_drift_time(t)?;
        let d = self.dim();
        if x.len() != d {
            return Err(Error::Shape(format!("expected length {d}, got {}", x.len())));
        }
        let s2 = self.sigma().powi(2);
        let tau = s2 * (1.0 - t);
        let mut g: Vec<f64> = (0..self.k())
            .map(|k| self.log_w[k] + log_normal_diag(x, &self.means[k], &self.vars[k], tau))
            .collect();
        softmax_in_place(&mut g);
        let mut out = vec![0.0; d];
        for k in 0..self.k() {
            for i in 0..d {
                out[i] -= g[k] * (x[i] - self.means[k][i]) / (self.vars[k][i] + tau);
            }
        }
        out.iter_mut().for_each(|v| *v *= s2);
        Ok(out)
    }

    /// Computed once per instance by Rao-Blackwellized Monte Carlo over `x0`
    /// with a fixed internal seed.
    fn x1_total_variance(&self) -> f64 {
        *self.total_var.get_or_init(|| self.compute_total_variance())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::sample_cov;

    fn default_inst(sigma: f64) -> MixturePotentialSBInstance {
        mixture_sb_build(&GaussianSpec::standard(2), &pentagon_potential(4.0, 0.5).unwrap(), sigma).unwrap()
    }

    #[test]
    fn single_component_matches_gaussian_oracle() {
        // a Gaussian potential gives a Gaussian SB; compare with the closed form
        let sigma = 1.3f64;
        let pot = MixtureSpec::new(vec![1.0], vec![GaussianSpec::diagonal(vec![1.0], vec![0.7]).unwrap()]).unwrap();
        let inst = mixture_sb_build(&GaussianSpec::standard(1), &pot, sigma).unwrap();
        let (m0, c0) = inst.conditional_moments(&[0.0]).unwrap();
        let (m1, _) = inst.conditional_moments(&[1.0]).unwrap();
        let gain = m1[0] - m0[0];
        let v = c0[(0, 0)];
        let var1 = gain * gain + v;
        let psi1 = GaussianSpec::isotropic(vec![m0[0]], var1).unwrap();
        let g = crate::oracle::gaussian_sb_coupling(&GaussianSpec::standard(1), &psi1, sigma * sigma).unwrap();
        assert!((g.cross_cov()[(0, 0)] - gain).abs() < 1e-10);
        for t in [0.0, 0.5, 0.95] {
            for x in [-2.0, 0.3, 1.7] {
                let a = inst.sb_optimal_drift(&[x], t).unwrap()[0];
                let b = g.sb_optimal_drift(&[x], t).unwrap()[0];
                assert!((a - b).abs() < 1e-9, "t={t} x={x}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn drift_is_scaled_gradient_of_log_potential() {
        // central finite differences of log h
        let inst = default_inst(1.0);
        let s2 = 1.0;
        let t = 0.4;
        let log_h = |x: &[f64]| {
            let l: Vec<f64> = (0..5)
                .map(|k| inst.log_w[k] + log_normal_diag(x, &inst.means[k], &inst.vars[k], s2 * (1.0 - t)))
                .collect();
            let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + l.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
        };
        let x = [0.8, -1.1];
        let v = inst.sb_optimal_drift(&x, t).unwrap();
        let h = 1e-5;
        for i in 0..2 {
            let mut p = x;
            let mut m = x;
            p[i] += h;
            m[i] -= h;
            let fd = s2 * (log_h(&p) - log_h(&m)) / (2.0 * h);
            assert!((fd - v[i]).abs() < 1e-7, "{fd} vs {}", v[i]);
        }
    }

    #[test]
    fn conditional_moments_match_quadrature() {
        // direct 2-D quadrature of v(x1) N(x1; x0, sigma^2)
        let inst = default_inst(1.0);
        let x0 = [0.5, 0.2];
        let n = 401;
        let (lo, hi) = (-8.0, 8.0);
        let h = (hi - lo) / (n - 1) as f64;
        let mut z = 0.0;
        let mut m = [0.0; 2];
        let mut s = [0.0; 3];
        for i in 0..n {
            for j in 0..n {
                let x = [lo + i as f64 * h, lo + j as f64 * h];
                let v: f64 = inst.potential.weights.iter().zip(&inst.potential.components)
                    .map(|(w, c)| w * c.log_density(&x).unwrap().exp())
                    .sum();
                let k = (-((x[0] - x0[0]).powi(2) + (x[1] - x0[1]).powi(2)) / 2.0).exp();
                let p = v * k;
                z += p;
                m[0] += p * x[0];
                m[1] += p * x[1];
                s[0] += p * x[0] * x[0];
                s[1] += p * x[0] * x[1];
                s[2] += p * x[1] * x[1];
            }
        }
        let m = [m[0] / z, m[1] / z];
        let (mean, cov) = inst.conditional_moments(&x0).unwrap();
        assert!((mean[0] - m[0]).abs() < 1e-6 && (mean[1] - m[1]).abs() < 1e-6);
        assert!((cov[(0, 0)] - (s[0] / z - m[0] * m[0])).abs() < 1e-6);
        assert!((cov[(0, 1)] - (s[1] / z - m[0] * m[1])).abs() < 1e-6);
        assert!((cov[(1, 1)] - (s[2] / z - m[1] * m[1])).abs() < 1e-6);
    }

    #[test]
    fn sampled_conditional_moments() {
        let inst = default_inst(1.0);
        let x0 = Array2::from_shape_fn((50_000, 2), |(_, j)| [0.5, -0.4][j]);
        let x1 = inst.sample_conditional(x0.view(), &mut RngStream::from_seed(2)).unwrap();
        let (mean, cov) = inst.conditional_moments(&[0.5, -0.4]).unwrap();
        let em = x1.mean_axis(ndarray::Axis(0)).unwrap();
        let ec = sample_cov(x1.view());
        for i in 0..2 {
            assert!((em[i] - mean[i]).abs() < 0.05, "{} vs {}", em[i], mean[i]);
            assert!((ec[[i, i]] - cov[(i, i)]).abs() < 0.1 * cov[(i, i)]);
        }
    }

    #[test]
    fn total_variance_agrees_with_direct_sampling() {
        let inst = default_inst(1.0);
        let v = inst.x1_total_variance();
        let x1 = inst.sample_psi1(100_000, &mut RngStream::from_seed(4)).unwrap();
        let c = sample_cov(x1.view());
        let direct = c[[0, 0]] + c[[1, 1]];
        assert!((v - direct).abs() < 0.02 * v, "{v} vs {direct}");
        assert_eq!(v, inst.x1_total_variance());
    }

    #[test]
    fn weights_are_normalized_and_stable_far_out() {
        let inst = default_inst(0.3);
        let w = inst.conditional_weights(&[1e3, -1e3]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.iter().all(|v| v.is_finite()));
        let d = inst.sb_optimal_drift(&[1e3, -1e3], 0.99).unwrap();
        assert!(d.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_bad_inputs() {
        let pot = pentagon_potential(4.0, 0.5).unwrap();
        let off = GaussianSpec::isotropic(vec![1.0, 0.0], 1.0).unwrap();
        assert!(mixture_sb_build(&off, &pot, 1.0).is_err());
        assert!(mixture_sb_build(&GaussianSpec::standard(3), &pot, 1.0).is_err());
        assert!(mixture_sb_build(&GaussianSpec::standard(2), &pot, 0.0).is_err());
        assert!(default_inst(1.0).sb_optimal_drift(&[0.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn flat_potential_leaves_the_reference() {
        // a very wide potential is nearly constant, so S_{1|0} is the reference transition
        let pot = MixtureSpec::new(vec![0.5, 0.5], vec![
            GaussianSpec::isotropic(vec![1.0, 0.0], 1e10).unwrap(),
            GaussianSpec::isotropic(vec![-1.0, 2.0], 1e10).unwrap(),
        ])
        .unwrap();
        let inst = mixture_sb_build(&GaussianSpec::standard(2), &pot, 0.8).unwrap();
        let x0 = [0.7, -1.2];
        let (m, c) = inst.conditional_moments(&x0).unwrap();
        for i in 0..2 {
            assert!((m[i] - x0[i]).abs() < 1e-8);
            assert!((c[(i, i)] - 0.64).abs() < 1e-8);
        }
        for t in [0.0, 0.5, 0.9] {
            assert!(inst.sb_optimal_drift(&x0, t).unwrap().iter().all(|v| v.abs() < 1e-8));
        }
    }

    #[test]
    fn small_sigma_clusters_on_five_modes() {
        let inst = mixture_sb_build(&GaussianSpec::standard(2), &pentagon_potential(4.0, 0.05).unwrap(), 0.3).unwrap();
        let n = 5000;
        let x0 = Array2::zeros((n, 2));
        let x1 = inst.sample_conditional(x0.view(), &mut RngStream::from_seed(11)).unwrap();
        let cond = inst.conditional_mixture(&[0.0, 0.0]).unwrap();
        let modes = &cond.components;
        let mut counts = [0usize; 5];
        for row in x1.rows() {
            let (k, d2) = modes
                .iter()
                .map(|c| (row[0] - c.mean[0]).powi(2) + (row[1] - c.mean[1]).powi(2))
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            assert!(d2.sqrt() < 1.0, "sample {row} far from every mode");
            counts[k] += 1;
        }
        // x0 = 0 is equidistant from all modes
        for c in counts {
            let frac = c as f64 / n as f64;
            assert!((frac - 0.2).abs() < 0.03, "{counts:?}");
        }
    }
}
