//! Iterated bridge matching: repeated Markovian projection, alternating the
//! time direction, with separate forward and backward networks.

use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::bm2::{simulate, Bm2Config, Problem};
use crate::error::{Error, Result};
use crate::net::{with_ema, AdamW, DriftNet, Ema, Head, HeadLayout, NetSpec, Real, Segment};
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IbmConfig {
    pub outer: usize,
    pub inner: usize,
}

impl Default for IbmConfig {
    fn default() -> Self {
        Self { outer: 10, inner: 5000 }
    }
}

/// Network, optimizer state and EMA of one direction, carried across
/// outer iterations.
pub struct Learner<F: Real> {
    pub net: DriftNet<F>,
    opt: AdamW<F>,
    ema: Ema<F>,
}

impl<F: Real> Learner<F> {
    pub fn new(net: DriftNet<F>, cfg: &Bm2Config) -> Result<Self> {
        let opt = AdamW::new(cfg.optimizer, net.params().len());
        let ema = Ema::new(cfg.ema_decay, net.params())?;
        Ok(Self { net, opt, ema })
    }

    pub fn ema_net(&self) -> DriftNet<F> {
        with_ema(&self.net, &self.ema)
    }
}

/// Draws `n` coupled pairs `(x0, x1)`.
pub type CouplingSampler<'a> = dyn FnMut(usize, &mut RngStream) -> Result<(Array2<f64>, Array2<f64>)> + 'a;

/// Fits `head` to the bridge mixture of a fixed coupling by regressing on
/// bridge drift targets. The pair cache is redrawn every `refresh_every`
/// steps. Returns the per-step losses.
pub fn fit_projection<F: Real>(
    coupling: &mut CouplingSampler<'_>,
    head: Head,
    learner: &mut Learner<F>,
    problem: &Problem,
    cfg: &Bm2Config,
    steps: usize,
    rng: &RngStream,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if learner.net.spec().head_offset(head).is_none() {
        return Err(Error::InvalidInput(format!("network has no {head:?} head")));
    }
    let dyn_ = &problem.dynamics;
    let mut pairs: Option<(Array2<f64>, Array2<f64>)> = None;
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        if step % cfg.refresh_every == 0 {
            let k = (step / cfg.refresh_every) as u64;
            let (x0, x1) = coupling(cfg.cache_size, &mut rng.split_indexed("coupling", k))?;
            if x0.dim() != x1.dim() || x0.nrows() != cfg.cache_size {
                return Err(Error::Shape("coupling sampler returned mismatched pairs".into()));
            }
            pairs = Some((x0, x1));
        }
        let (x0, x1) = pairs.as_ref().expect("filled at step 0");
        let r = rng.split_indexed("step", step as u64);
        let mut draw = r.split("batch");
        let t = Array1::from_shape_fn(cfg.batch_size, |_| draw.uniform_range(cfg.time_clip, 1.0 - cfg.time_clip));
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| draw.index(cfg.cache_size)).collect();
        let (b0, b1) = (x0.select(Axis(0), &idx), x1.select(Axis(0), &idx));
        let xt = dyn_.bridge_sample_batch(b0.view(), b1.view(), t.view(), None, &mut r.split("bridge"))?;
        let target = match head {
            Head::Forward => dyn_.fwd_drift_target_batch(xt.view(), t.view(), b1.view())?,
            Head::Backward => dyn_.bwd_drift_target_batch(xt.view(), t.view(), b0.view())?,
        };
        let lg = learner.net.loss_and_grad(&[Segment { head, x: xt, t, sigma: None, target }])?;
        if !lg.loss.is_finite() || lg.loss > crate::bm2::DIVERGENCE_LIMIT {
            return Err(Error::Diverged { step, loss: lg.loss });
        }
        learner.opt.step(learner.net.params_mut(), &lg.grad)?;
        learner.ema.update(learner.net.params());
        losses.push(lg.loss);
    }
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IbmLogRow {
    pub iteration: usize,
    pub direction: String,
    /// Mean loss over the last 100 inner steps.
    pub final_inner_loss: f64,
    pub metric: Option<f64>,
    pub wall_ms: u64,
}

pub struct IbmOutput<F: Real> {
    pub forward: DriftNet<F>,
    pub backward: DriftNet<F>,
    /// Direction fitted in the last outer iteration.
    pub last: Head,
    pub log: Vec<IbmLogRow>,
}

/// Called after each outer iteration with `(iteration, head, ema net)`.
pub type IbmObserver<'a, F> = dyn FnMut(usize, Head, &DriftNet<F>) -> Result<Option<f64>> + 'a;

/// Iteration 0 projects the independent coupling `Psi0 x Psi1` forward; each
/// later iteration simulates the previous transport from its exact starting
/// marginal and projects in the opposite direction.
pub fn ibm_loop<F: Real>(
    ibm: &IbmConfig,
    cfg: &Bm2Config,
    problem: &Problem,
    mut observer: Option<&mut IbmObserver<'_, F>>,
) -> Result<IbmOutput<F>> {
    cfg.validate()?;
    if cfg.amortized {
        return Err(Error::InvalidInput("iterated bridge matching does not support the amortized mode".into()));
    }
    if ibm.outer == 0 || ibm.inner == 0 {
        return Err(Error::InvalidInput("outer and inner must be positive".into()));
    }
    let d = problem.dim();
    let root = RngStream::from_seed(cfg.seed);
    let half = (cfg.net.width / 2).max(1);
    let spec = |h| NetSpec { dim: d, width: half, hidden_layers: cfg.net.hidden_layers, sigma_cond: false, heads: HeadLayout::Single(h) };
    let mut fwd = Learner::new(DriftNet::init(spec(Head::Forward), &mut root.split("init-forward"))?, cfg)?;
    let mut bwd = Learner::new(DriftNet::init(spec(Head::Backward), &mut root.split("init-backward"))?, cfg)?;
    let clock = Instant::now();
    let mut log = Vec::with_capacity(ibm.outer);
    let mut last = Head::Forward;
    for it in 0..ibm.outer {
        let head = if it % 2 == 0 { Head::Forward } else { Head::Backward };
        let it_rng = root.split_indexed("iteration", it as u64);
        let losses = if it == 0 {
            let mut indep = |n: usize, r: &mut RngStream| -> Result<(Array2<f64>, Array2<f64>)> {
                Ok((problem.psi0.sample(n, &mut r.split("psi0"))?, problem.psi1.sample(n, &mut r.split("psi1"))?))
            };
            fit_projection(&mut indep, head, &mut fwd, problem, cfg, ibm.inner, &it_rng)?
        } else {
            let (source, prev_head, target) = match head {
                Head::Forward => (bwd.ema_net(), Head::Backward, &mut fwd),
                Head::Backward => (fwd.ema_net(), Head::Forward, &mut bwd),
            };
            let mut transport = |n: usize, r: &mut RngStream| simulate(&source, prev_head, n, cfg.grid_steps, problem, None, r);
            fit_projection(&mut transport, head, target, problem, cfg, ibm.inner, &it_rng)?
        };
        let tail = &losses[losses.len().saturating_sub(100)..];
        let fitted = match head {
            Head::Forward => fwd.ema_net(),
            Head::Backward => bwd.ema_net(),
        };
        let metric = match observer.as_deref_mut() {
            Some(obs) => obs(it, head, &fitted)?,
            None => None,
        };
        log.push(IbmLogRow {
            iteration: it,
            direction: match head {
                Head::Forward => "forward".into(),
                Head::Backward => "backward".into(),
            },
            final_inner_loss: tail.iter().sum::<f64>() / tail.len() as f64,
            metric,
            wall_ms: clock.elapsed().as_millis() as u64,
        });
        last = head;
    }
    Ok(IbmOutput { forward: fwd.ema_net(), backward: bwd.ema_net(), last, log })
}
