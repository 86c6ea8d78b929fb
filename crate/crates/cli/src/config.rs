use std::path::Path;
use std::sync::Arc;

use bm2::bm2::{Bm2Config, Problem};
use bm2::dist::{GaussianSpec, MixtureSpec};
use bm2::flow::FlowProblem;
use bm2::ibm::IbmConfig;
use bm2::oracle::{gaussian_sb_coupling, mixture_sb_build, pentagon_potential, SbInstance};
use bm2::reference::{RefDynamics, Schedule};
use bm2::suite::instance_problem;
use serde::{Deserialize, Serialize};

/// Invalid or unreadable configuration; maps to exit status 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn bad<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Bm2,
    Bm2Sigma,
    Ibm,
    Flow,
    OracleCheck,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Bm2 => "bm2",
            Method::Bm2Sigma => "bm2-sigma",
            Method::Ibm => "ibm",
            Method::Flow => "flow",
            Method::OracleCheck => "oracle-check",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProblemConfig {
    /// `N(0, I)` to `N(0, (1 + sigma^2) I)`.
    Trivial { dim: usize },
    #[serde(rename = "gaussian-1d")]
    Gaussian1d { mu0: f64, var0: f64, mu1: f64, var1: f64 },
    /// Standard `Psi0` and the five-component pentagon potential.
    #[serde(rename = "mixture-2d")]
    Mixture2d {
        #[serde(default = "default_radius")]
        radius: f64,
        #[serde(default = "default_component_var")]
        var: f64,
    },
    /// Centered isotropic `Psi0` and a diagonal-covariance mixture potential.
    MixtureCustom { psi0_var: f64, weights: Vec<f64>, means: Vec<Vec<f64>>, vars: Vec<Vec<f64>> },
}

fn default_radius() -> f64 {
    4.0
}

fn default_component_var() -> f64 {
    0.5
}

impl ProblemConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ProblemConfig::Trivial { .. } => "trivial",
            ProblemConfig::Gaussian1d { .. } => "gaussian-1d",
            ProblemConfig::Mixture2d { .. } => "mixture-2d",
            ProblemConfig::MixtureCustom { .. } => "mixture-custom",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Constant,
    LinearRamp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynConfig {
    pub sigma: f64,
    #[serde(default = "default_schedule")]
    pub schedule: ScheduleKind,
    /// Starting rate of the linear ramp.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ramp_start: Option<f64>,
}

fn default_schedule() -> ScheduleKind {
    ScheduleKind::Constant
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub enabled: bool,
    pub kl_paths: usize,
    pub kl_times: usize,
    pub cbw_cond: usize,
    pub cbw_inner: usize,
    /// Simulated pairs for the coupling cross-covariance.
    pub n_eval: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { enabled: true, kl_paths: 1000, kl_times: 50, cbw_cond: 100, cbw_inner: 200, n_eval: 10_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub l_max: f64,
    pub dl: f64,
    /// Trajectory rows written every this many integration steps.
    pub every: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { l_max: bm2::flow::DEFAULT_L_MAX, dl: bm2::flow::DEFAULT_DL, every: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    #[serde(default)]
    pub seed: u64,
    /// Output directory, resolved against `BM2_OUT_ROOT` when relative.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
    pub problem: ProblemConfig,
    #[serde(rename = "dyn")]
    pub dynamics: DynConfig,
    #[serde(default)]
    pub train: Bm2Config,
    #[serde(default)]
    pub ibm: IbmConfig,
    #[serde(default)]
    pub metrics: MetricConfig,
    #[serde(default)]
    pub flow: FlowConfig,
}

pub fn load(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
    parse(&text)
}

pub fn parse(text: &str) -> Result<ExperimentConfig, ConfigError> {
    toml::from_str(text).map_err(|e| ConfigError(e.to_string().trim_end().to_string()))
}

/// Oracle instance of the configured problem at the configured `sigma`.
pub fn instance(p: &ProblemConfig, sigma: f64) -> bm2::Result<Arc<dyn SbInstance>> {
    let s2 = sigma * sigma;
    Ok(match p {
        ProblemConfig::Trivial { dim } => Arc::new(gaussian_sb_coupling(
            &GaussianSpec::standard(*dim),
            &GaussianSpec::isotropic(vec![0.0; *dim], 1.0 + s2)?,
            s2,
        )?),
        ProblemConfig::Gaussian1d { mu0, var0, mu1, var1 } => Arc::new(gaussian_sb_coupling(
            &GaussianSpec::isotropic(vec![*mu0], *var0)?,
            &GaussianSpec::isotropic(vec![*mu1], *var1)?,
            s2,
        )?),
        ProblemConfig::Mixture2d { radius, var } => {
            Arc::new(mixture_sb_build(&GaussianSpec::standard(2), &pentagon_potential(*radius, *var)?, sigma)?)
        }
        ProblemConfig::MixtureCustom { psi0_var, weights, means, vars } => {
            let d = means.first().map_or(0, Vec::len);
            let comps = means
                .iter()
                .zip(vars)
                .map(|(m, v)| GaussianSpec::diagonal(m.clone(), v.clone()))
                .collect::<bm2::Result<Vec<_>>>()?;
            if means.len() != vars.len() {
                return Err(bm2::Error::InvalidInput(format!("{} means but {} vars", means.len(), vars.len())));
            }
            let psi0 = GaussianSpec::isotropic(vec![0.0; d], *psi0_var)?;
            Arc::new(mixture_sb_build(&psi0, &MixtureSpec::new(weights.clone(), comps)?, sigma)?)
        }
    })
}

/// Everything a run needs, built and checked before any computation.
pub struct Resolved {
    pub cfg: ExperimentConfig,
    pub instance: Arc<dyn SbInstance>,
    pub problem: Problem,
}

impl ExperimentConfig {
    pub fn dynamics(&self) -> Result<RefDynamics, ConfigError> {
        let d = &self.dynamics;
        let schedule = match (d.schedule, d.ramp_start) {
            (ScheduleKind::Constant, None) => Schedule::constant(),
            (ScheduleKind::Constant, Some(_)) => return bad("dyn.ramp_start only applies to schedule = \"linear-ramp\""),
            (ScheduleKind::LinearRamp, Some(a)) => Schedule::linear_ramp(a).map_err(|e| ConfigError(format!("dyn.ramp_start: {e}")))?,
            (ScheduleKind::LinearRamp, None) => return bad("dyn.ramp_start is required for schedule = \"linear-ramp\""),
        };
        RefDynamics::new(d.sigma, schedule).map_err(|e| ConfigError(format!("dyn.sigma: {e}")))
    }

    pub fn flow_problem(&self) -> Result<FlowProblem, ConfigError> {
        match self.problem {
            ProblemConfig::Gaussian1d { mu0, var0, mu1, var1 } => {
                FlowProblem::new(mu0, var0, mu1, var1, self.dynamics.sigma).map_err(|e| ConfigError(format!("problem: {e}")))
            }
            _ => bad(format!("method flow needs problem.kind = \"gaussian-1d\", got {:?}", self.problem.name())),
        }
    }

    pub fn resolve(mut self) -> Result<Resolved, ConfigError> {
        let dynamics = self.dynamics()?;
        self.train.seed = self.seed;
        self.train.amortized = self.method == Method::Bm2Sigma;
        self.train.validate().map_err(|e| ConfigError(format!("train: {e}")))?;
        if self.method == Method::Ibm && (self.ibm.outer == 0 || self.ibm.inner == 0) {
            return bad("ibm.outer and ibm.inner must be positive");
        }
        if self.method == Method::Flow {
            self.flow_problem()?;
            if !(self.flow.dl > 0.0 && self.flow.l_max > 0.0) || self.flow.every == 0 {
                return bad("flow.l_max and flow.dl must be positive and flow.every at least 1");
            }
        }
        let m = &self.metrics;
        if m.enabled && (m.kl_paths < 2 || m.kl_times == 0 || m.cbw_cond < 2 || m.n_eval < 2) {
            return bad("metrics: kl_paths, cbw_cond and n_eval must be at least 2 and kl_times at least 1");
        }
        let instance = instance(&self.problem, self.dynamics.sigma).map_err(|e| ConfigError(format!("problem: {e}")))?;
        if m.enabled && m.cbw_inner < instance.dim() + 1 {
            return bad(format!("metrics.cbw_inner must be at least {}", instance.dim() + 1));
        }
        let mut problem = instance_problem(instance.clone());
        problem.dynamics = dynamics;
        Ok(Resolved { cfg: self, instance, problem })
    }
}
