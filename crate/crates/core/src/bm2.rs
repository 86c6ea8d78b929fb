//! Coupled bridge matching: one joint network regresses its forward head on
//! bridges of the backward SDE's endpoints and its backward head on bridges of
//! the forward SDE's endpoints.

use std::sync::Arc;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::dist::Sampler;
use crate::error::{Error, Result};
use crate::net::{with_ema, AdamW, AdamWConfig, DriftNet, Ema, Head, NetSpec, Real, Segment};
use crate::reference::{euler_maruyama, RefDynamics, TimeGrid};
use crate::rng::RngStream;

/// Marginal samplers and reference process of a bridge problem.
#[derive(Clone)]
pub struct Problem {
    pub psi0: Arc<dyn Sampler + Send + Sync>,
    pub psi1: Arc<dyn Sampler + Send + Sync>,
    pub dynamics: RefDynamics,
}

impl Problem {
    pub fn dim(&self) -> usize {
        self.psi0.dim()
    }

    fn check(&self) -> Result<()> {
        if self.psi0.dim() != self.psi1.dim() {
            return Err(Error::Shape(format!("Psi0 has dimension {}, Psi1 {}", self.psi0.dim(), self.psi1.dim())));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub width: usize,
    pub hidden_layers: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { width: 768, hidden_layers: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Bm2Config {
    pub batch_size: usize,
    pub steps: usize,
    /// Training times are drawn from `U(time_clip, 1 - time_clip)`.
    pub time_clip: f64,
    pub grid_steps: usize,
    pub cache_size: usize,
    pub refresh_every: usize,
    pub ema_decay: f64,
    pub optimizer: AdamWConfig,
    pub net: NetConfig,
    /// Per-entry `sigma ~ U(lo, hi)` with a sigma-conditioned network.
    pub amortized: bool,
    pub sigma_range: [f64; 2],
    /// EMA snapshots are handed to the observer every this many steps (0: never).
    pub snapshot_every: usize,
    pub seed: u64,
}

impl Default for Bm2Config {
    fn default() -> Self {
        Self {
            batch_size: 1000,
            steps: 50_000,
            time_clip: 0.0025,
            grid_steps: 200,
            cache_size: 5000,
            refresh_every: 200,
            ema_decay: 0.999,
            optimizer: AdamWConfig::default(),
            net: NetConfig::default(),
            amortized: false,
            sigma_range: [0.1, 4.0],
            snapshot_every: 1000,
            seed: 0,
        }
    }
}

/// Largest loss accepted before training is declared divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e8;

impl Bm2Config {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if !(self.time_clip > 0.0 && self.time_clip < 0.5) {
            return bad(format!("time_clip must lie in (0, 0.5), got {}", self.time_clip));
        }
        if self.batch_size == 0 || self.batch_size > self.cache_size {
            return bad(format!("batch_size must be in 1..=cache_size ({}), got {}", self.cache_size, self.batch_size));
        }
        if self.grid_steps == 0 || self.refresh_every == 0 {
            return bad("grid_steps and refresh_every must be positive".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must lie in [0, 1), got {}", self.ema_decay));
        }
        if self.net.width == 0 || self.net.hidden_layers == 0 {
            return bad("network width and hidden_layers must be positive".into());
        }
        let [lo, hi] = self.sigma_range;
        if self.amortized && !(lo > 0.0 && hi > lo && hi.is_finite()) {
            return bad(format!("sigma_range must satisfy 0 < lo < hi, got [{lo}, {hi}]"));
        }
        if !(self.optimizer.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.optimizer.lr));
        }
        Ok(())
    }

    pub fn net_spec(&self, dim: usize) -> NetSpec {
        NetSpec { sigma_cond: self.amortized, ..NetSpec::joint(dim, self.net.width, self.net.hidden_layers) }
    }
}

/// Endpoint pairs from the forward SDE (`f_*`, `x0 ~ Psi0`) and from the
/// backward SDE (`b_*`, `x1 ~ Psi1`). Paths are never stored.
#[derive(Clone, Debug)]
pub struct EndpointCache {
    pub f_x0: Array2<f64>,
    pub f_x1: Array2<f64>,
    pub b_x0: Array2<f64>,
    pub b_x1: Array2<f64>,
    pub f_sigma: Option<Array1<f64>>,
    pub b_sigma: Option<Array1<f64>>,
    /// Number of refreshes that produced this cache.
    pub generation: usize,
}

impl EndpointCache {
    pub fn capacity(&self) -> usize {
        self.f_x0.nrows()
    }

    /// A cache built from given pairs (no simulation).
    pub fn from_pairs(
        f: (Array2<f64>, Array2<f64>),
        b: (Array2<f64>, Array2<f64>),
        sigmas: Option<(Array1<f64>, Array1<f64>)>,
    ) -> Result<Self> {
        let n = f.0.nrows();
        if f.0.dim() != f.1.dim() || b.0.dim() != b.1.dim() || b.0.nrows() != n || f.0.ncols() != b.0.ncols() {
            return Err(Error::Shape("cache pair shapes disagree".into()));
        }
        let (f_sigma, b_sigma) = match sigmas {
            Some((a, c)) if a.len() == n && c.len() == n => (Some(a), Some(c)),
            Some(_) => return Err(Error::Shape("per-entry sigmas do not match cache size".into())),
            None => (None, None),
        };
        Ok(Self { f_x0: f.0, f_x1: f.1, b_x0: b.0, b_x1: b.1, f_sigma, b_sigma, generation: 0 })
    }
}

fn draw_sigmas(n: usize, range: [f64; 2], rng: &mut RngStream) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.uniform_range(range[0], range[1]))
}

/// Simulates `x_init` through the forward (`mu_f`) or backward (`-v_b`) SDE.
pub fn simulate_from<F: Real>(
    net: &DriftNet<F>,
    head: Head,
    x_init: ArrayView2<f64>,
    grid_steps: usize,
    dynamics: &RefDynamics,
    sigma_rows: Option<ArrayView1<f64>>,
    rng: &mut RngStream,
) -> Result<Array2<f64>> {
    let (grid, sign) = match head {
        Head::Forward => (TimeGrid::forward(grid_steps), 1.0),
        Head::Backward => (TimeGrid::backward(grid_steps), -1.0),
    };
    let net_sigma = if net.spec().sigma_cond {
        Some(sigma_rows.map_or_else(|| Array1::from_elem(x_init.nrows(), dynamics.sigma()), |s| s.to_owned()))
    } else {
        None
    };
    let drift = net.drift_fn(head, sign, net_sigma.as_ref().map(|s| s.view()));
    euler_maruyama(drift, x_init, &grid, dynamics, sigma_rows, rng)
}

/// Endpoint pairs `(x0, x1)` of `n` simulated paths. The forward direction
/// starts from `Psi0`, the backward from `Psi1`.
pub fn simulate<F: Real>(
    net: &DriftNet<F>,
    head: Head,
    n: usize,
    grid_steps: usize,
    problem: &Problem,
    sigma: Option<f64>,
    rng: &mut RngStream,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let dynamics = match sigma {
        Some(s) => problem.dynamics.with_sigma(s)?,
        None => problem.dynamics.clone(),
    };
    let start = match head {
        Head::Forward => problem.psi0.sample(n, &mut rng.split("start"))?,
        Head::Backward => problem.psi1.sample(n, &mut rng.split("start"))?,
    };
    let end = simulate_from(net, head, start.view(), grid_steps, &dynamics, None, &mut rng.split("path"))?;
    Ok(match head {
        Head::Forward => (start, end),
        Head::Backward => (end, start),
    })
}

/// Rebuilds both halves of the cache by simulating the (EMA) network.
pub fn refresh_cache<F: Real>(
    net_ema: &DriftNet<F>,
    problem: &Problem,
    cfg: &Bm2Config,
    generation: usize,
    rng: &mut RngStream,
) -> Result<EndpointCache> {
    let n = cfg.cache_size;
    let dyn_ = &problem.dynamics;
    let (f_sigma, b_sigma) = if cfg.amortized {
        (
            Some(draw_sigmas(n, cfg.sigma_range, &mut rng.split("f-sigma"))),
            Some(draw_sigmas(n, cfg.sigma_range, &mut rng.split("b-sigma"))),
        )
    } else {
        (None, None)
    };
    let f_x0 = problem.psi0.sample(n, &mut rng.split("psi0"))?;
    let f_x1 = simulate_from(
        net_ema,
        Head::Forward,
        f_x0.view(),
        cfg.grid_steps,
        dyn_,
        f_sigma.as_ref().map(|s| s.view()),
        &mut rng.split("forward"),
    )?;
    let b_x1 = problem.psi1.sample(n, &mut rng.split("psi1"))?;
    let b_x0 = simulate_from(
        net_ema,
        Head::Backward,
        b_x1.view(),
        cfg.grid_steps,
        dyn_,
        b_sigma.as_ref().map(|s| s.view()),
        &mut rng.split("backward"),
    )?;
    Ok(EndpointCache { f_x0, f_x1, b_x0, b_x1, f_sigma, b_sigma, generation })
}

fn gather(src: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    src.select(Axis(0), idx)
}

/// The two regression segments of one training step.
pub fn sample_segments(
    cache: &EndpointCache,
    dynamics: &RefDynamics,
    batch_size: usize,
    time_clip: f64,
    rng: &mut RngStream,
) -> Result<[Segment; 2]> {
    let cap = cache.capacity();
    if cap == 0 {
        return Err(Error::InvalidInput("empty endpoint cache".into()));
    }
    let mut draw = rng.split("batch");
    let t = Array1::from_shape_fn(batch_size, |_| draw.uniform_range(time_clip, 1.0 - time_clip));
    let ib: Vec<usize> = (0..batch_size).map(|_| draw.index(cap)).collect();
    let if_: Vec<usize> = (0..batch_size).map(|_| draw.index(cap)).collect();
    debug_assert!(t.iter().all(|&s| s > 0.0 && s < 1.0));

    let (b0, b1) = (gather(&cache.b_x0, &ib), gather(&cache.b_x1, &ib));
    let (f0, f1) = (gather(&cache.f_x0, &if_), gather(&cache.f_x1, &if_));
    let bs = cache.b_sigma.as_ref().map(|s| s.select(Axis(0), &ib));
    let fs = cache.f_sigma.as_ref().map(|s| s.select(Axis(0), &if_));

    let bt = dynamics.bridge_sample_batch(b0.view(), b1.view(), t.view(), bs.as_ref().map(|s| s.view()), &mut rng.split("bridge-b"))?;
    let ft = dynamics.bridge_sample_batch(f0.view(), f1.view(), t.view(), fs.as_ref().map(|s| s.view()), &mut rng.split("bridge-f"))?;
    let target_f = dynamics.fwd_drift_target_batch(bt.view(), t.view(), b1.view())?;
    let target_b = dynamics.bwd_drift_target_batch(ft.view(), t.view(), f0.view())?;
    Ok([
        Segment { head: Head::Forward, x: bt, t: t.clone(), sigma: bs, target: target_f },
        Segment { head: Head::Backward, x: ft, t, sigma: fs, target: target_b },
    ])
}

/// Loss and gradient of one stochastic BM² step.
pub fn sample_loss<F: Real>(
    cache: &EndpointCache,
    net: &DriftNet<F>,
    dynamics: &RefDynamics,
    cfg: &Bm2Config,
    rng: &mut RngStream,
) -> Result<crate::net::LossGrad<F>> {
    let segs = sample_segments(cache, dynamics, cfg.batch_size, cfg.time_clip, rng)?;
    net.loss_and_grad(&segs)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss_f: f64,
    pub loss_b: f64,
    pub loss: f64,
    pub wall_ms: u64,
}

pub struct TrainOutput<F: Real> {
    /// EMA parameters, the ones used for evaluation.
    pub ema_net: DriftNet<F>,
    pub net: DriftNet<F>,
    pub log: Vec<LogRow>,
}

/// Called with `(step, ema_net)` every `snapshot_every` steps.
pub type Observer<'a, F> = dyn FnMut(usize, &DriftNet<F>) -> Result<()> + 'a;

/// Runs BM² from a fresh network.
pub fn train<F: Real>(cfg: &Bm2Config, problem: &Problem, observer: Option<&mut Observer<'_, F>>) -> Result<TrainOutput<F>> {
    cfg.validate()?;
    problem.check()?;
    let root = RngStream::from_seed(cfg.seed);
    let net = DriftNet::init(cfg.net_spec(problem.dim()), &mut root.split("init"))?;
    train_from(cfg, problem, net, observer)
}

/// Runs BM² starting from `net`.
pub fn train_from<F: Real>(
    cfg: &Bm2Config,
    problem: &Problem,
    mut net: DriftNet<F>,
    mut observer: Option<&mut Observer<'_, F>>,
) -> Result<TrainOutput<F>> {
    cfg.validate()?;
    problem.check()?;
    if net.spec().dim != problem.dim() || net.spec().sigma_cond != cfg.amortized {
        return Err(Error::InvalidInput("network does not match the problem dimension or sigma conditioning".into()));
    }
    let root = RngStream::from_seed(cfg.seed);
    let clock = Instant::now();
    let mut opt = AdamW::new(cfg.optimizer, net.params().len());
    let mut ema = Ema::new(cfg.ema_decay, net.params())?;
    let mut cache: Option<EndpointCache> = None;
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if step % cfg.refresh_every == 0 {
            let gen = step / cfg.refresh_every;
            let frozen = with_ema(&net, &ema);
            cache = Some(refresh_cache(&frozen, problem, cfg, gen, &mut root.split_indexed("refresh", gen as u64))?);
        }
        let c = cache.as_ref().expect("cache filled at step 0");
        let lg = sample_loss(c, &net, &problem.dynamics, cfg, &mut root.split_indexed("step", step as u64))?;
        if !lg.loss.is_finite() || lg.loss > DIVERGENCE_LIMIT {
            return Err(Error::Diverged { step, loss: lg.loss });
        }
        opt.step(net.params_mut(), &lg.grad)?;
        ema.update(net.params());
        log.push(LogRow {
            step,
            loss_f: lg.loss_f,
            loss_b: lg.loss_b,
            loss: lg.loss,
            wall_ms: clock.elapsed().as_millis() as u64,
        });
        if cfg.snapshot_every > 0 && (step + 1) % cfg.snapshot_every == 0 {
            if let Some(obs) = observer.as_deref_mut() {
                obs(step + 1, &with_ema(&net, &ema))?;
            }
        }
    }
    Ok(TrainOutput { ema_net: with_ema(&net, &ema), net, log })
}

/// Median of a slice of losses.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{sample_cov, GaussianSpec};

    fn gauss(mean: f64, var: f64) -> Arc<dyn Sampler + Send + Sync> {
        Arc::new(GaussianSpec::isotropic(vec![mean], var).unwrap())
    }

    fn small_cfg() -> Bm2Config {
        Bm2Config {
            batch_size: 32,
            steps: 20,
            cache_size: 64,
            refresh_every: 10,
            grid_steps: 20,
            net: NetConfig { width: 16, hidden_layers: 2 },
            snapshot_every: 0,
            ..Default::default()
        }
    }

    fn problem() -> Problem {
        Problem { psi0: gauss(-2.0, 1.0), psi1: gauss(2.0, 1.0), dynamics: RefDynamics::constant(1.0).unwrap() }
    }

    #[test]
    fn zero_drift_cache_is_reference() {
        let p = Problem { psi0: gauss(0.0, 1.0), psi1: gauss(0.0, 1.0), dynamics: RefDynamics::constant(1.0).unwrap() };
        let cfg = Bm2Config { cache_size: 40_000, ..small_cfg() };
        let net = DriftNet::<f32>::init(cfg.net_spec(1), &mut RngStream::from_seed(0)).unwrap();
        let c = refresh_cache(&net, &p, &cfg, 0, &mut RngStream::from_seed(1)).unwrap();
        assert_eq!(c.capacity(), 40_000);
        let v = sample_cov(c.f_x1.view())[[0, 0]];
        assert!((v - 2.0).abs() < 0.05, "{v}");
        let v = sample_cov(c.b_x0.view())[[0, 0]];
        assert!((v - 2.0).abs() < 0.05, "{v}");
    }

    #[test]
    fn amortized_cache_carries_sigmas() {
        let cfg = Bm2Config { amortized: true, ..small_cfg() };
        let net = DriftNet::<f32>::init(cfg.net_spec(1), &mut RngStream::from_seed(0)).unwrap();
        let c = refresh_cache(&net, &problem(), &cfg, 0, &mut RngStream::from_seed(1)).unwrap();
        for s in [c.f_sigma.unwrap(), c.b_sigma.unwrap()] {
            assert_eq!(s.len(), 64);
            assert!(s.iter().all(|v| (0.1..4.0).contains(v)));
        }
    }

    #[test]
    fn times_respect_clip() {
        let cfg = small_cfg();
        let net = DriftNet::<f32>::init(cfg.net_spec(1), &mut RngStream::from_seed(0)).unwrap();
        let c = refresh_cache(&net, &problem(), &cfg, 0, &mut RngStream::from_seed(1)).unwrap();
        let segs = sample_segments(&c, &problem().dynamics, 5000, 0.0025, &mut RngStream::from_seed(2)).unwrap();
        assert!(segs[0].t.iter().all(|t| (0.0025..=0.9975).contains(t)));
        assert_eq!(segs[0].t, segs[1].t);
    }

    #[test]
    fn sample_loss_is_deterministic() {
        let cfg = small_cfg();
        let p = problem();
        let net = DriftNet::<f32>::init(cfg.net_spec(1), &mut RngStream::from_seed(0)).unwrap();
        let c = refresh_cache(&net, &p, &cfg, 0, &mut RngStream::from_seed(1)).unwrap();
        let a = sample_loss(&c, &net, &p.dynamics, &cfg, &mut RngStream::from_seed(3)).unwrap();
        let b = sample_loss(&c, &net, &p.dynamics, &cfg, &mut RngStream::from_seed(3)).unwrap();
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.grad, b.grad);
    }

    #[test]
    fn injected_cache_gives_same_gradient() {
        let cfg = small_cfg();
        let p = problem();
        let net = DriftNet::<f64>::init(cfg.net_spec(1), &mut RngStream::from_seed(0)).unwrap();
        let c = refresh_cache(&net, &p, &cfg, 0, &mut RngStream::from_seed(1)).unwrap();
        let copy = EndpointCache::from_pairs(
            (c.f_x0.clone(), c.f_x1.clone()),
            (c.b_x0.clone(), c.b_x1.clone()),
            None,
        )
        .unwrap();
        let a = sample_loss(&c, &net, &p.dynamics, &cfg, &mut RngStream::from_seed(3)).unwrap();
        let b = sample_loss(&copy, &net, &p.dynamics, &cfg, &mut RngStream::from_seed(3)).unwrap();
        assert_eq!(a.grad, b.grad);
    }

    #[test]
    fn training_is_reproducible() {
        let cfg = small_cfg();
        let a = train::<f32>(&cfg, &problem(), None).unwrap();
        let b = train::<f32>(&cfg, &problem(), None).unwrap();
        assert_eq!(a.ema_net.params(), b.ema_net.params());
        assert_eq!(a.log.len(), 20);
        assert!(a.log.iter().zip(&b.log).all(|(x, y)| x.loss == y.loss));
    }

    #[test]
    fn observer_sees_snapshots() {
        let cfg = Bm2Config { snapshot_every: 5, ..small_cfg() };
        let mut seen = Vec::new();
        let mut obs = |s: usize, _: &DriftNet<f32>| {
            seen.push(s);
            Ok(())
        };
        train(&cfg, &problem(), Some(&mut obs)).unwrap();
        assert_eq!(seen, vec![5, 10, 15, 20]);
    }

    #[test]
    fn empty_simulation() {
        let cfg = small_cfg();
        let net = DriftNet::<f32>::init(cfg.net_spec(1), &mut RngStream::from_seed(0)).unwrap();
        let (a, b) = simulate(&net, Head::Forward, 0, 10, &problem(), None, &mut RngStream::from_seed(0)).unwrap();
        assert_eq!((a.nrows(), b.nrows()), (0, 0));
    }

    #[test]
    fn zero_drift_from_point_mass() {
        let cfg = small_cfg();
        let net = DriftNet::<f32>::init(cfg.net_spec(2), &mut RngStream::from_seed(0)).unwrap();
        let x0 = Array2::zeros((50_000, 2));
        let dyn_ = RefDynamics::constant(0.7).unwrap();
        let x1 = simulate_from(&net, Head::Forward, x0.view(), 10, &dyn_, None, &mut RngStream::from_seed(1)).unwrap();
        let c = sample_cov(x1.view());
        assert!((c[[0, 0]] - 0.49).abs() < 0.02 && (c[[1, 1]] - 0.49).abs() < 0.02);
    }

    #[test]
    fn config_validation() {
        assert!(Bm2Config { time_clip: 0.5, ..small_cfg() }.validate().is_err());
        assert!(Bm2Config { batch_size: 65, ..small_cfg() }.validate().is_err());
        assert!(Bm2Config { amortized: true, sigma_range: [0.0, 1.0], ..small_cfg() }.validate().is_err());
        assert!(small_cfg().validate().is_ok());
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = small_cfg();
        let p = Problem { psi0: gauss(0.0, 1.0), psi1: gauss(1e9, 1.0), dynamics: RefDynamics::constant(1.0).unwrap() };
        match train::<f32>(&cfg, &p, None) {
            Err(Error::Diverged { step, .. }) => assert!(step <= 2),
            other => panic!("expected divergence, got {:?}", other.map(|o| o.log.len())),
        }
    }
}
