//! Gaussian and Gaussian-mixture specifications with exact samplers.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::RngStream;

/// Anything that can produce i.i.d. rows of a `d`-dimensional law.
pub trait Sampler {
    fn dim(&self) -> usize;
    fn sample(&self, n: usize, rng: &mut RngStream) -> Result<Array2<f64>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Covariance {
    Diagonal(Vec<f64>),
    /// Row-major square matrix.
    Full(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub mean: Vec<f64>,
    pub cov: Covariance,
}

impl GaussianSpec {
    pub fn new(mean: Vec<f64>, cov: Covariance) -> Result<Self> {
        let spec = Self { mean, cov };
        spec.validate()?;
        Ok(spec)
    }

    pub fn diagonal(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        Self::new(mean, Covariance::Diagonal(var))
    }

    pub fn isotropic(mean: Vec<f64>, var: f64) -> Result<Self> {
        let d = mean.len();
        Self::diagonal(mean, vec![var; d])
    }

    pub fn standard(d: usize) -> Self {
        Self { mean: vec![0.0; d], cov: Covariance::Diagonal(vec![1.0; d]) }
    }

    pub fn from_moments(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let rows = (0..cov.nrows()).map(|i| cov.row(i).iter().copied().collect()).collect();
        Self::new(mean.iter().copied().collect(), Covariance::Full(rows))
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.mean.len();
        if d == 0 {
            return Err(Error::InvalidInput("Gaussian with zero dimension".into()));
        }
        if self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidInput("non-finite Gaussian mean".into()));
        }
        match &self.cov {
            Covariance::Diagonal(v) => {
                if v.len() != d {
                    return Err(Error::Shape(format!("diagonal of length {} for d = {d}", v.len())));
                }
                if let Some(bad) = v.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
                    return Err(Error::NotPositive {
                        kind: "positive semidefinite",
                        detail: format!("diagonal variance {bad}"),
                    });
                }
            }
            Covariance::Full(rows) => {
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    return Err(Error::Shape(format!("covariance is not {d}x{d}")));
                }
                linalg::check_psd(&self.cov_matrix())?;
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.mean)
    }

    pub fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.mean.len();
        match &self.cov {
            Covariance::Diagonal(v) => DMatrix::from_diagonal(&DVector::from_column_slice(v)),
            Covariance::Full(rows) => DMatrix::from_fn(d, d, |i, j| rows[i][j]),
        }
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self.cov, Covariance::Diagonal(_))
    }

    /// Per-coordinate variances (the covariance diagonal).
    pub fn variances(&self) -> Vec<f64> {
        match &self.cov {
            Covariance::Diagonal(v) => v.clone(),
            Covariance::Full(rows) => (0..rows.len()).map(|i| rows[i][i]).collect(),
        }
    }

    /// Matrix `L` with `L L^T = cov`, from the clamped eigendecomposition.
    fn factor(&self) -> DMatrix<f64> {
        match &self.cov {
            Covariance::Diagonal(v) => {
                DMatrix::from_diagonal(&DVector::from_iterator(v.len(), v.iter().map(|x| x.sqrt())))
            }
            Covariance::Full(_) => {
                let eig = linalg::sym_eigen(&self.cov_matrix());
                let scale = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
                eig.eigenvectors * DMatrix::from_diagonal(&scale)
            }
        }
    }

    /// Writes `n` draws into `out` (row-major `n x d`).
    fn sample_into(&self, out: &mut Array2<f64>, rng: &mut RngStream) {
        let d = self.dim();
        let mut z = vec![0.0; d];
        match &self.cov {
            Covariance::Diagonal(v) => {
                let sd: Vec<f64> = v.iter().map(|x| x.sqrt()).collect();
                for mut row in out.rows_mut() {
                    rng.fill_normal(&mut z);
                    for j in 0..d {
                        row[j] = self.mean[j] + sd[j] * z[j];
                    }
                }
            }
            Covariance::Full(_) => {
                let l = self.factor();
                for mut row in out.rows_mut() {
                    rng.fill_normal(&mut z);
                    for i in 0..d {
                        let mut acc = self.mean[i];
                        for (j, zj) in z.iter().enumerate() {
                            acc += l[(i, j)] * zj;
                        }
                        row[i] = acc;
                    }
                }
            }
        }
    }

    /// Log-density at `x`; requires a positive-definite covariance.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let d = self.dim();
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        match &self.cov {
            Covariance::Diagonal(v) => {
                let mut acc = -0.5 * d as f64 * ln_2pi;
                for j in 0..d {
                    if v[j] <= 0.0 {
                        return Err(Error::NotPositive { kind: "positive definite", detail: "zero variance".into() });
                    }
                    let r = x[j] - self.mean[j];
                    acc -= 0.5 * (r * r / v[j] + v[j].ln());
                }
                Ok(acc)
            }
            Covariance::Full(_) => {
                let cov = self.cov_matrix();
                let chol = cov.cholesky().ok_or_else(|| Error::NotPositive {
                    kind: "positive definite",
                    detail: "Cholesky factorization failed".into(),
                })?;
                let r = DVector::from_column_slice(x) - self.mean_vector();
                let sol = chol.solve(&r);
                let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                Ok(-0.5 * (d as f64 * ln_2pi + logdet + r.dot(&sol)))
            }
        }
    }
}

/// `n` i.i.d. draws from `spec`.
pub fn gaussian_sample(spec: &GaussianSpec, n: usize, rng: &mut RngStream) -> Result<Array2<f64>> {
    spec.validate()?;
    let mut out = Array2::zeros((n, spec.dim()));
    spec.sample_into(&mut out, rng);
    Ok(out)
}

impl Sampler for GaussianSpec {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn sample(&self, n: usize, rng: &mut RngStream) -> Result<Array2<f64>> {
        gaussian_sample(self, n, rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub weights: Vec<f64>,
    pub components: Vec<GaussianSpec>,
}

impl MixtureSpec {
    pub fn new(weights: Vec<f64>, components: Vec<GaussianSpec>) -> Result<Self> {
        let spec = Self { weights, components };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::InvalidInput("mixture has no components".into()));
        }
        if self.weights.len() != self.components.len() {
            return Err(Error::Shape(format!(
                "{} weights for {} components",
                self.weights.len(),
                self.components.len()
            )));
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidInput("mixture weights must be nonnegative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!("mixture weights sum to {total}, not 1")));
        }
        let d = self.components[0].dim();
        for c in &self.components {
            if c.dim() != d {
                return Err(Error::Shape("mixture components differ in dimension".into()));
            }
            c.validate()?;
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }
}

/// Picks `k` with probability `weights[k]` by inverting the cumulative sum.
pub(crate) fn choose_index(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    // u landed in the rounding gap above the final cumulative sum
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(weights.len() - 1)
}

/// `n` i.i.d. draws from the mixture: pick a component, then draw from it.
pub fn mixture_sample(spec: &MixtureSpec, n: usize, rng: &mut RngStream) -> Result<Array2<f64>> {
    spec.validate()?;
    let d = spec.dim();
    let mut out = Array2::zeros((n, d));
    let mut row = Array2::zeros((1, d));
    for i in 0..n {
        let k = choose_index(&spec.weights, rng.uniform());
        spec.components[k].sample_into(&mut row, rng);
        out.row_mut(i).assign(&row.row(0));
    }
    Ok(out)
}

impl Sampler for MixtureSpec {
    fn dim(&self) -> usize {
        MixtureSpec::dim(self)
    }

    fn sample(&self, n: usize, rng: &mut RngStream) -> Result<Array2<f64>> {
        mixture_sample(self, n, rng)
    }
}

pub fn sample_mean(x: ArrayView2<f64>) -> Array1<f64> {
    x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(x.ncols()))
}

/// Unbiased (n - 1) sample covariance.
pub fn sample_cov(x: ArrayView2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let m = sample_mean(x);
    let centered = &x - &m;
    centered.t().dot(&centered) / (n.saturating_sub(1).max(1) as f64)
}

/// Sample cross-covariance between the columns of `a` and `b` (`d_a x d_b`).
pub fn sample_cross_cov(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let ca = &a - &sample_mean(a);
    let cb = &b - &sample_mean(b);
    ca.t().dot(&cb) / (n.saturating_sub(1).max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_moments() {
        let n = 100_000;
        let mut rng = RngStream::from_seed(3);
        let x = gaussian_sample(&GaussianSpec::standard(3), n, &mut rng).unwrap();
        // 5 standard errors: mean se = 1/sqrt(n) ~ 0.0032; var se = sqrt(2/n) ~ 0.0045
        let m = sample_mean(x.view());
        let c = sample_cov(x.view());
        for j in 0..3 {
            assert!(m[j].abs() < 0.02, "mean {}", m[j]);
            assert!((c[[j, j]] - 1.0).abs() < 0.05, "var {}", c[[j, j]]);
        }
    }

    #[test]
    fn full_covariance_moments() {
        let cov = vec![vec![2.0, 0.6], vec![0.6, 0.5]];
        let spec = GaussianSpec::new(vec![1.0, -1.0], Covariance::Full(cov.clone())).unwrap();
        let n = 100_000;
        let mut rng = RngStream::from_seed(4);
        let x = gaussian_sample(&spec, n, &mut rng).unwrap();
        let c = sample_cov(x.view());
        let m = sample_mean(x.view());
        for i in 0..2 {
            // se of mean: sqrt(var/n)
            assert!((m[i] - spec.mean[i]).abs() < 5.0 * (cov[i][i] / n as f64).sqrt());
            for j in 0..2 {
                // se of covariance entry: sqrt((s_ii s_jj + s_ij^2)/n)
                let se = ((cov[i][i] * cov[j][j] + cov[i][j] * cov[i][j]) / n as f64).sqrt();
                assert!((c[[i, j]] - cov[i][j]).abs() < 5.0 * se, "cov[{i}{j}] = {}", c[[i, j]]);
            }
        }
    }

    #[test]
    fn zero_covariance_returns_mean() {
        let spec = GaussianSpec::new(vec![1.5, -2.0], Covariance::Full(vec![vec![0.0; 2]; 2])).unwrap();
        let mut rng = RngStream::from_seed(0);
        let x = gaussian_sample(&spec, 50, &mut rng).unwrap();
        for row in x.rows() {
            assert_eq!(row[0], 1.5);
            assert_eq!(row[1], -2.0);
        }
    }

    #[test]
    fn singular_psd_accepted() {
        let spec = GaussianSpec::new(vec![0.0, 0.0], Covariance::Full(vec![vec![1.0, 1.0], vec![1.0, 1.0]])).unwrap();
        let mut rng = RngStream::from_seed(0);
        let x = gaussian_sample(&spec, 100, &mut rng).unwrap();
        for row in x.rows() {
            assert!((row[0] - row[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn non_psd_rejected() {
        let err = GaussianSpec::new(vec![0.0, 0.0], Covariance::Full(vec![vec![1.0, 2.0], vec![2.0, 1.0]]));
        assert!(matches!(err, Err(Error::NotPositive { .. })));
    }

    #[test]
    fn same_seed_bitwise_identical() {
        let spec = GaussianSpec::isotropic(vec![0.0; 4], 2.0).unwrap();
        let a = gaussian_sample(&spec, 64, &mut RngStream::from_seed(11)).unwrap();
        let b = gaussian_sample(&spec, 64, &mut RngStream::from_seed(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_component_mixture_matches_gaussian_law() {
        let g = GaussianSpec::isotropic(vec![3.0], 4.0).unwrap();
        let mix = MixtureSpec::new(vec![1.0], vec![g]).unwrap();
        let x = mixture_sample(&mix, 100_000, &mut RngStream::from_seed(2)).unwrap();
        let m = sample_mean(x.view())[0];
        let v = sample_cov(x.view())[[0, 0]];
        // se(mean) = 2/sqrt(n) ~ 0.0063, se(var) = 4 sqrt(2/n) ~ 0.018
        assert!((m - 3.0).abs() < 0.032);
        assert!((v - 4.0).abs() < 0.09);
    }

    #[test]
    fn two_mode_fractions() {
        let n = 10_000;
        let comps = vec![
            GaussianSpec::isotropic(vec![-10.0], 1.0).unwrap(),
            GaussianSpec::isotropic(vec![10.0], 1.0).unwrap(),
        ];
        let mix = MixtureSpec::new(vec![0.5, 0.5], comps).unwrap();
        let x = mixture_sample(&mix, n, &mut RngStream::from_seed(8)).unwrap();
        let frac = x.column(0).iter().filter(|v| **v > 0.0).count() as f64 / n as f64;
        // binomial sd = 0.5/sqrt(n) = 0.005; 0.02 is 4 sd
        assert!((frac - 0.5).abs() < 0.02, "fraction {frac}");
    }

    #[test]
    fn weights_must_sum_to_one() {
        let comps = vec![GaussianSpec::standard(1), GaussianSpec::standard(1)];
        assert!(MixtureSpec::new(vec![0.45, 0.45], comps).is_err());
    }

    #[test]
    fn empty_mixture_rejected() {
        assert!(MixtureSpec::new(vec![], vec![]).is_err());
    }

    #[test]
    fn log_density_paths_agree() {
        let diag = GaussianSpec::diagonal(vec![1.0, 2.0], vec![0.5, 3.0]).unwrap();
        let full = GaussianSpec::new(
            vec![1.0, 2.0],
            Covariance::Full(vec![vec![0.5, 0.0], vec![0.0, 3.0]]),
        )
        .unwrap();
        let x = [0.3, -1.0];
        assert!((diag.log_density(&x).unwrap() - full.log_density(&x).unwrap()).abs() < 1e-12);
    }
}
