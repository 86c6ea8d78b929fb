use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Component, Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use bm2::bm2::{simulate, simulate_from, train};
use bm2::dist::sample_cross_cov;
use bm2::metrics::{cbw2_uvp, kl_drift_gap, TIME_CLIP};
use bm2::net::{write_checkpoint, DriftNet, Head};
use bm2::oracle::{gaussian_sb_coupling, sinkhorn_gaussian_1d};
use bm2::rng::RngStream;
use bm2::suite::{self, CheckResult, Relation, Status};
use ndarray::Array1;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{self, ConfigError, Method, ProblemConfig, Resolved, ScheduleKind};

/// Command-line overrides applied on top of the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub steps: Option<usize>,
}

pub const OUT_ROOT_ENV: &str = "BM2_OUT_ROOT";

/// Relative directories are placed under `$BM2_OUT_ROOT` (or the working
/// directory) and may not climb out of it.
pub fn resolve_out_dir(requested: &Path) -> Result<PathBuf, ConfigError> {
    if requested.is_absolute() {
        return Ok(requested.to_path_buf());
    }
    if requested.components().any(|c| matches!(c, Component::ParentDir)) {
        return Err(ConfigError(format!("output directory {} must not contain '..'", requested.display())));
    }
    Ok(match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(requested),
        _ => requested.to_path_buf(),
    })
}

/// Output directory; every artifact is a plain file name inside it.
pub struct OutDir {
    pub path: PathBuf,
    written: Vec<String>,
}

impl OutDir {
    pub fn create(path: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self { path, written: Vec::new() })
    }

    pub fn write(&mut self, name: &str, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
        assert!(!name.contains(['/', '\\']) && name != ".." && name != ".", "artifact names are plain file names");
        let p = self.path.join(name);
        let mut w = BufWriter::new(File::create(&p).with_context(|| format!("creating {}", p.display()))?);
        f(&mut w)?;
        w.flush()?;
        if !self.written.iter().any(|n| n == name) {
            self.written.push(name.to_string());
        }
        Ok(())
    }

    fn digests(&self) -> Result<Vec<Artifact>> {
        self.written
            .iter()
            .map(|name| {
                let bytes = std::fs::read(self.path.join(name))?;
                let sha256 = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
                Ok(Artifact { name: name.clone(), bytes: bytes.len() as u64, sha256 })
            })
            .collect()
    }
}

#[derive(Serialize)]
struct Artifact {
    name: String,
    bytes: u64,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'a str,
    method: &'a str,
    seed: u64,
    git_hash: String,
    wall_time_s: f64,
    artifacts: Vec<Artifact>,
}

fn git_hash() -> String {
    std::process::Command::new("git")
        .args(["-C", env!("CARGO_MANIFEST_DIR"), "rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

fn write_csv<T: Serialize>(out: &mut OutDir, name: &str, rows: &[T]) -> Result<()> {
    out.write(name, |w| {
        let mut c = csv::Writer::from_writer(w);
        for r in rows {
            c.serialize(r)?;
        }
        c.flush()?;
        Ok(())
    })
}

#[derive(Serialize)]
struct TrainLogRow {
    step: usize,
    loss_f: f64,
    loss_b: f64,
    loss: f64,
}

#[derive(Serialize)]
struct IbmLogCsv {
    iteration: usize,
    direction: String,
    final_inner_loss: f64,
}

/// One row of `metrics.csv` for the trained methods.
#[derive(Serialize)]
pub struct MetricsRow {
    pub method: String,
    pub problem: String,
    pub d: usize,
    pub eps: f64,
    pub seed: u64,
    pub final_loss: f64,
    pub kl: f64,
    pub kl_se: f64,
    pub cbw2_uvp: f64,
    pub cbw2_uvp_se: f64,
    /// Trace of the simulated `Cov(X0, X1)`.
    pub cross_cov: f64,
    /// Same trace from exact coupling draws.
    pub cross_cov_ref: f64,
}

#[derive(Serialize)]
struct FlowMetricsRow {
    method: String,
    problem: String,
    d: usize,
    eps: f64,
    seed: u64,
    l_max: f64,
    dl: f64,
    mean1: f64,
    var1: f64,
    cross: f64,
    mean1_ref: f64,
    var1_ref: f64,
    cross_ref: f64,
    max_err: f64,
}

fn trace_cross(x0: ndarray::ArrayView2<f64>, x1: ndarray::ArrayView2<f64>) -> f64 {
    sample_cross_cov(x0, x1).diag().sum()
}

/// Metrics of a forward-drift model against the configured oracle.
fn evaluate<F: bm2::net::Real>(r: &Resolved, net: &DriftNet<F>, final_loss: f64) -> Result<MetricsRow> {
    let cfg = &r.cfg;
    let m = &cfg.metrics;
    let sigma = cfg.dynamics.sigma;
    let mut row = MetricsRow {
        method: cfg.method.name().into(),
        problem: cfg.problem.name().into(),
        d: r.instance.dim(),
        eps: sigma * sigma,
        seed: cfg.seed,
        final_loss,
        kl: f64::NAN,
        kl_se: f64::NAN,
        cbw2_uvp: f64::NAN,
        cbw2_uvp_se: f64::NAN,
        cross_cov: f64::NAN,
        cross_cov_ref: f64::NAN,
    };
    if !m.enabled {
        return Ok(row);
    }
    let eval = RngStream::from_seed(cfg.seed).split("eval");
    // the oracle drift assumes a constant schedule; the coupling does not
    if cfg.dynamics.schedule == ScheduleKind::Constant {
        let sig = net.spec().sigma_cond.then(|| Array1::from_elem(m.kl_paths, sigma));
        let drift = net.drift_fn(Head::Forward, 1.0, sig.as_ref().map(|s| s.view()));
        let kl = kl_drift_gap(r.instance.as_ref(), drift, m.kl_paths, m.kl_times, TIME_CLIP, &mut eval.split("kl"))?;
        row.kl = kl.value;
        row.kl_se = kl.se;
    }
    let dyn_ = &r.problem.dynamics;
    let grid = cfg.train.grid_steps;
    let cbw = cbw2_uvp(
        r.instance.as_ref(),
        |x, rng| simulate_from(net, Head::Forward, x, grid, dyn_, None, rng),
        m.cbw_cond,
        m.cbw_inner,
        &mut eval.split("cbw"),
    )?;
    row.cbw2_uvp = cbw.value;
    row.cbw2_uvp_se = cbw.se;
    let (x0, x1) = simulate(net, Head::Forward, m.n_eval, grid, &r.problem, None, &mut eval.split("coupling"))?;
    row.cross_cov = trace_cross(x0.view(), x1.view());
    let (y0, y1) = r.instance.sample_coupling(m.n_eval, &mut eval.split("reference"))?;
    row.cross_cov_ref = trace_cross(y0.view(), y1.view());
    Ok(row)
}

fn tail_mean(xs: &[f64]) -> f64 {
    let k = xs.len().min(100);
    if k == 0 {
        return f64::NAN;
    }
    xs[xs.len() - k..].iter().sum::<f64>() / k as f64
}

fn checkpoint<F: bm2::net::Real>(out: &mut OutDir, name: &str, net: &DriftNet<F>) -> Result<()> {
    out.write(name, |w| Ok(write_checkpoint(net, w)?))
}

fn run_bm2(r: &Resolved, out: &mut OutDir) -> Result<()> {
    let res = train::<f32>(&r.cfg.train, &r.problem, None)?;
    let rows: Vec<TrainLogRow> =
        res.log.iter().map(|l| TrainLogRow { step: l.step, loss_f: l.loss_f, loss_b: l.loss_b, loss: l.loss }).collect();
    write_csv(out, "train_log.csv", &rows)?;
    checkpoint(out, "checkpoint.bin", &res.ema_net)?;
    let losses: Vec<f64> = res.log.iter().map(|l| l.loss).collect();
    let row = evaluate(r, &res.ema_net, tail_mean(&losses))?;
    write_csv(out, "metrics.csv", &[row])
}

fn run_ibm(r: &Resolved, out: &mut OutDir) -> Result<()> {
    let res = bm2::ibm::ibm_loop::<f32>(&r.cfg.ibm, &r.cfg.train, &r.problem, None)?;
    let rows: Vec<IbmLogCsv> = res
        .log
        .iter()
        .map(|l| IbmLogCsv { iteration: l.iteration, direction: l.direction.clone(), final_inner_loss: l.final_inner_loss })
        .collect();
    write_csv(out, "train_log.csv", &rows)?;
    checkpoint(out, "checkpoint.bin", &res.forward)?;
    checkpoint(out, "checkpoint_backward.bin", &res.backward)?;
    let last = res.log.last().map_or(f64::NAN, |l| l.final_inner_loss);
    let row = evaluate(r, &res.forward, last)?;
    write_csv(out, "metrics.csv", &[row])
}

fn run_flow(r: &Resolved, out: &mut OutDir) -> Result<()> {
    let cfg = &r.cfg;
    let prob = cfg.flow_problem()?;
    let traj = bm2::flow::integrate(&prob, cfg.flow.l_max, cfg.flow.dl)?;
    out.write("trajectory.csv", |w| Ok(bm2::flow::write_trajectory_csv(w, &traj, cfg.flow.every)?))?;
    let end = traj.last().expect("trajectory has the initial row").moments;
    let t = prob.analytic_moments()?;
    let max_err = [(end.mean1 - t.mean1).abs(), (end.var1 - t.var1).abs(), (end.cross - t.cross).abs()]
        .into_iter()
        .fold(0.0, f64::max);
    let row = FlowMetricsRow {
        method: cfg.method.name().into(),
        problem: cfg.problem.name().into(),
        d: 1,
        eps: cfg.dynamics.sigma.powi(2),
        seed: cfg.seed,
        l_max: cfg.flow.l_max,
        dl: cfg.flow.dl,
        mean1: end.mean1,
        var1: end.var1,
        cross: end.cross,
        mean1_ref: t.mean1,
        var1_ref: t.var1,
        cross_ref: t.cross,
        max_err,
    };
    write_csv(out, "metrics.csv", &[row])
}

/// Oracle cross-validations, plus a grid Sinkhorn check of the configured
/// Gaussian pair. Returns the results for the caller to report.
pub fn oracle_checks(r: &Resolved) -> Result<Vec<CheckResult>> {
    let mut results = suite::run_oracle(r.cfg.seed);
    if let ProblemConfig::Gaussian1d { mu0, var0, mu1, var1 } = r.cfg.problem {
        let eps = r.cfg.dynamics.sigma.powi(2);
        let clock = Instant::now();
        let p0 = bm2::dist::GaussianSpec::isotropic(vec![mu0], var0)?;
        let p1 = bm2::dist::GaussianSpec::isotropic(vec![mu1], var1)?;
        let exact = gaussian_sb_coupling(&p0, &p1, eps)?.cross_cov()[(0, 0)];
        let half = 8.0 * var0.max(var1).sqrt() + mu0.abs().max(mu1.abs());
        let grid = sinkhorn_gaussian_1d(&p0, &p1, eps, 400, -half, half)?;
        let measured = (grid.cross - exact).abs();
        let threshold = 1e-2;
        results.push(CheckResult {
            name: "oracle/configured-sinkhorn".into(),
            criterion: None,
            status: if grid.converged && measured < threshold { Status::Pass } else { Status::Fail },
            measured,
            relation: Relation::Lt,
            threshold,
            runtime_ms: clock.elapsed().as_millis() as u64,
            detail: format!("grid {:.6} closed form {exact:.6} on [{:.2}, {half:.2}]", grid.cross, -half),
        });
    }
    Ok(results)
}

fn run_oracle_check(r: &Resolved, out: &mut OutDir) -> Result<usize> {
    let results = oracle_checks(r)?;
    out.write("oracle_checks.jsonl", |w| Ok(suite::write_jsonl(w, &results)?))?;
    print!("{}", suite::summary(&results));
    Ok(results.iter().filter(|c| c.status == Status::Fail).count())
}

/// Loads, overrides and validates a config without running it.
pub fn prepare(path: &Path, ov: &Overrides) -> Result<(Resolved, PathBuf), ConfigError> {
    let mut cfg = config::load(path)?;
    if let Some(s) = ov.seed {
        cfg.seed = s;
    }
    if let Some(n) = ov.steps {
        match cfg.method {
            Method::Bm2 | Method::Bm2Sigma => cfg.train.steps = n,
            Method::Ibm => cfg.ibm.inner = n,
            m => return Err(ConfigError(format!("--steps does not apply to method {}", m.name()))),
        }
    }
    if let Some(o) = &ov.out {
        cfg.out = Some(o.to_string_lossy().into_owned());
    }
    let requested = match &cfg.out {
        Some(o) => PathBuf::from(o),
        None => {
            let stem = path.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned());
            Path::new("runs").join(stem)
        }
    };
    let dir = resolve_out_dir(&requested)?;
    Ok((cfg.resolve()?, dir))
}

/// Runs an experiment and writes its artifacts; returns the output directory.
pub fn run(path: &Path, ov: &Overrides) -> Result<PathBuf> {
    let (r, dir) = prepare(path, ov)?;
    let clock = Instant::now();
    let mut out = OutDir::create(dir)?;
    let echo = toml::to_string(&r.cfg).context("serializing the resolved config")?;
    out.write("config.toml", |w| Ok(w.write_all(echo.as_bytes())?))?;
    let mut failed = 0;
    match r.cfg.method {
        Method::Bm2 | Method::Bm2Sigma => run_bm2(&r, &mut out)?,
        Method::Ibm => run_ibm(&r, &mut out)?,
        Method::Flow => run_flow(&r, &mut out)?,
        Method::OracleCheck => failed = run_oracle_check(&r, &mut out)?,
    }
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        method: r.cfg.method.name(),
        seed: r.cfg.seed,
        git_hash: git_hash(),
        wall_time_s: clock.elapsed().as_secs_f64(),
        artifacts: out.digests()?,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    out.write("manifest.json", |w| Ok(writeln!(w, "{json}")?))?;
    if failed > 0 {
        anyhow::bail!("{failed} oracle check(s) failed; see {}", out.path.join("oracle_checks.jsonl").display());
    }
    Ok(out.path)
}
