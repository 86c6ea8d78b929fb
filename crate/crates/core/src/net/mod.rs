//! The drift approximator: a ReLU multilayer perceptron whose output is split
//! into a forward head `mu_f(x, t)` and a backward head `v_b(x, t)`, with
//! hand-written reverse-mode gradients of the bridge-matching regression loss.

mod checkpoint;
mod optim;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use optim::{with_ema, AdamW, AdamWConfig, Ema};

use std::fmt::Debug;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, Axis, ScalarOperand};
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Floating-point type used for network parameters and activations.
pub trait Real: Float + std::ops::AddAssign + ndarray::LinalgScalar + ScalarOperand + Debug + Send + Sync + 'static {
    const NAME: &'static str;
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    const NAME: &'static str = "f32";
    fn of(v: f64) -> Self {
        v as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";
    fn of(v: f64) -> Self {
        v
    }
    fn f64(self) -> f64 {
        self
    }
}

/// Sinusoidal time features: `sin(k pi t), cos(k pi t)` for `k = 1..=4`.
pub const TIME_FREQUENCIES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    Forward,
    Backward,
}

/// Which heads the output layer carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadLayout {
    /// `[mu_f | v_b]`, `2d` outputs.
    Joint,
    /// A single `d`-wide head (separate-network baselines).
    Single(Head),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub dim: usize,
    pub width: usize,
    pub hidden_layers: usize,
    pub sigma_cond: bool,
    pub heads: HeadLayout,
}

impl NetSpec {
    /// Joint two-head network.
    pub fn joint(dim: usize, width: usize, hidden_layers: usize) -> Self {
        Self { dim, width, hidden_layers, sigma_cond: false, heads: HeadLayout::Joint }
    }

    pub fn input_dim(&self) -> usize {
        self.dim + 1 + 2 * TIME_FREQUENCIES + usize::from(self.sigma_cond)
    }

    pub fn output_dim(&self) -> usize {
        match self.heads {
            HeadLayout::Joint => 2 * self.dim,
            HeadLayout::Single(_) => self.dim,
        }
    }

    /// `(fan_in, fan_out)` of every dense layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = vec![(self.input_dim(), self.width)];
        for _ in 1..self.hidden_layers {
            shapes.push((self.width, self.width));
        }
        shapes.push((self.width, self.output_dim()));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn head_offset(&self, head: Head) -> Option<usize> {
        match (self.heads, head) {
            (HeadLayout::Joint, Head::Forward) => Some(0),
            (HeadLayout::Joint, Head::Backward) => Some(self.dim),
            (HeadLayout::Single(h), q) if h == q => Some(0),
            _ => None,
        }
    }

    /// Flat indices of the final-layer weights and biases that feed only `head`.
    pub fn head_param_indices(&self, head: Head) -> Vec<usize> {
        let Some(col0) = self.head_offset(head) else {
            return Vec::new();
        };
        let shapes = self.layer_shapes();
        let (fan_in, fan_out) = *shapes.last().expect("at least one layer");
        let off: usize = shapes[..shapes.len() - 1].iter().map(|(i, o)| i * o + o).sum();
        let cols = col0..col0 + self.dim;
        let mut idx: Vec<usize> = (0..fan_in).flat_map(|r| cols.clone().map(move |c| off + r * fan_out + c)).collect();
        idx.extend(cols.map(|c| off + fan_in * fan_out + c));
        idx
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.width == 0 || self.hidden_layers == 0 {
            return Err(Error::InvalidInput(format!("degenerate network spec {self:?}")));
        }
        Ok(())
    }
}

/// Offsets of `(W, b)` for each layer inside the flat parameter vector.
#[derive(Clone, Debug)]
struct Layout {
    shapes: Vec<(usize, usize)>,
    offsets: Vec<usize>,
}

impl Layout {
    fn new(spec: &NetSpec) -> Self {
        let shapes = spec.layer_shapes();
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut off = 0;
        for (i, o) in &shapes {
            offsets.push(off);
            off += i * o + o;
        }
        Self { shapes, offsets }
    }

    fn weights<'a, F>(&self, theta: &'a [F], l: usize) -> (ArrayView2<'a, F>, ArrayView1<'a, F>) {
        let (i, o) = self.shapes[l];
        let off = self.offsets[l];
        let w = ArrayView2::from_shape((i, o), &theta[off..off + i * o]).expect("layout");
        let b = ArrayView1::from(&theta[off + i * o..off + i * o + o]);
        (w, b)
    }

    fn split_mut<'a, F>(&self, grad: &'a mut [F], l: usize) -> (ndarray::ArrayViewMut2<'a, F>, ArrayViewMut1<'a, F>) {
        let (i, o) = self.shapes[l];
        let off = self.offsets[l];
        let (w, b) = grad[off..off + i * o + o].split_at_mut(i * o);
        (ndarray::ArrayViewMut2::from_shape((i, o), w).expect("layout"), ArrayViewMut1::from(b))
    }
}

/// One regression block: evaluate `head` at `(x, t[, sigma])` and regress onto `target`.
#[derive(Clone, Debug)]
pub struct Segment {
    pub head: Head,
    pub x: Array2<f64>,
    pub t: Array1<f64>,
    pub sigma: Option<Array1<f64>>,
    pub target: Array2<f64>,
}

/// Loss value, its split by head, and the gradient with respect to `theta`.
#[derive(Clone, Debug)]
pub struct LossGrad<F> {
    pub loss: f64,
    pub loss_f: f64,
    pub loss_b: f64,
    pub grad: Array1<F>,
}

#[derive(Clone, Debug)]
pub struct DriftNet<F: Real> {
    spec: NetSpec,
    layout: Layout,
    theta: Array1<F>,
}

impl<F: Real> DriftNet<F> {
    /// He-normal hidden layers, zero output layer (both heads start at 0).
    pub fn init(spec: NetSpec, rng: &mut RngStream) -> Result<Self> {
        spec.validate()?;
        let layout = Layout::new(&spec);
        let mut theta = Array1::zeros(spec.param_count());
        let last = layout.shapes.len() - 1;
        for l in 0..last {
            let (fan_in, fan_out) = layout.shapes[l];
            let sd = (2.0 / fan_in as f64).sqrt();
            let off = layout.offsets[l];
            for v in theta.slice_mut(s![off..off + fan_in * fan_out]).iter_mut() {
                *v = F::of(sd * rng.normal());
            }
        }
        Ok(Self { spec, layout, theta })
    }

    pub fn from_params(spec: NetSpec, theta: Array1<F>) -> Result<Self> {
        spec.validate()?;
        if theta.len() != spec.param_count() {
            return Err(Error::Shape(format!("{} parameters for a spec needing {}", theta.len(), spec.param_count())));
        }
        Ok(Self { layout: Layout::new(&spec), spec, theta })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn params(&self) -> &Array1<F> {
        &self.theta
    }

    pub fn params_mut(&mut self) -> &mut Array1<F> {
        &mut self.theta
    }

    /// Zeroes the output layer so both heads vanish identically.
    pub fn zero_output_layer(&mut self) {
        let l = self.layout.shapes.len() - 1;
        let off = self.layout.offsets[l];
        self.theta.slice_mut(s![off..]).fill(F::zero());
    }

    /// Input features `[x, t, sin/cos(k pi t), (log sigma)]`.
    fn features(&self, x: ArrayView2<f64>, t: ArrayView1<f64>, sigma: Option<ArrayView1<f64>>) -> Result<Array2<F>> {
        let (n, d) = x.dim();
        if d != self.spec.dim {
            return Err(Error::Shape(format!("input has {d} columns, network expects {}", self.spec.dim)));
        }
        if t.len() != n {
            return Err(Error::Shape(format!("{} times for {n} rows", t.len())));
        }
        match (self.spec.sigma_cond, sigma) {
            (true, None) => return Err(Error::Shape("sigma-conditioned network needs sigma input".into())),
            (false, Some(_)) => return Err(Error::Shape("network is not sigma-conditioned".into())),
            (true, Some(s)) if s.len() != n => return Err(Error::Shape(format!("{} sigmas for {n} rows", s.len()))),
            _ => {}
        }
        let mut out = Array2::zeros((n, self.spec.input_dim()));
        for i in 0..n {
            let ti = t[i];
            if !ti.is_finite() {
                return Err(Error::InvalidInput(format!("non-finite time at row {i}")));
            }
            let mut row = out.row_mut(i);
            for j in 0..d {
                row[j] = F::of(x[[i, j]]);
            }
            row[d] = F::of(ti);
            for k in 0..TIME_FREQUENCIES {
                let w = std::f64::consts::PI * (k + 1) as f64 * ti;
                row[d + 1 + 2 * k] = F::of(w.sin());
                row[d + 2 + 2 * k] = F::of(w.cos());
            }
            if let Some(s) = sigma {
                row[d + 1 + 2 * TIME_FREQUENCIES] = F::of(s[i].ln());
            }
        }
        Ok(out)
    }

    /// Raw network output (`n x output_dim`) on prepared features.
    fn run(&self, mut h: Array2<F>) -> Array2<F> {
        let theta = self.theta.as_slice().expect("contiguous parameters");
        let last = self.layout.shapes.len() - 1;
        for l in 0..=last {
            let (w, b) = self.layout.weights(theta, l);
            h = h.dot(&w);
            h += &b;
            if l < last {
                h.mapv_inplace(|v| v.max(F::zero()));
            }
        }
        h
    }

    /// All head outputs, `n x output_dim`, in `f64`.
    pub fn forward_raw(&self, x: ArrayView2<f64>, t: ArrayView1<f64>, sigma: Option<ArrayView1<f64>>) -> Result<Array2<f64>> {
        let feats = self.features(x, t, sigma)?;
        Ok(self.run(feats).mapv(F::f64))
    }

    /// Both heads `(mu_f, v_b)` of a joint network in one pass.
    pub fn forward(
        &self,
        x: ArrayView2<f64>,
        t: ArrayView1<f64>,
        sigma: Option<ArrayView1<f64>>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        if self.spec.heads != HeadLayout::Joint {
            return Err(Error::InvalidInput("forward() needs a joint network; use forward_head".into()));
        }
        let out = self.forward_raw(x, t, sigma)?;
        let d = self.spec.dim;
        Ok((out.slice(s![.., ..d]).to_owned(), out.slice(s![.., d..]).to_owned()))
    }

    pub fn forward_head(
        &self,
        head: Head,
        x: ArrayView2<f64>,
        t: ArrayView1<f64>,
        sigma: Option<ArrayView1<f64>>,
    ) -> Result<Array2<f64>> {
        let off = self
            .spec
            .head_offset(head)
            .ok_or_else(|| Error::InvalidInput(format!("network has no {head:?} head")))?;
        let out = self.forward_raw(x, t, sigma)?;
        Ok(out.slice(s![.., off..off + self.spec.dim]).to_owned())
    }

    /// Drift closure for SDE simulation at a shared time `t` (per-row sigma optional).
    pub fn drift_fn<'a>(
        &'a self,
        head: Head,
        sign: f64,
        sigma: Option<ArrayView1<'a, f64>>,
    ) -> impl FnMut(ArrayView2<f64>, f64) -> Result<Array2<f64>> + 'a {
        move |x, t| {
            let tv = Array1::from_elem(x.nrows(), t);
            let mut out = self.forward_head(head, x, tv.view(), sigma)?;
            if sign != 1.0 {
                out *= sign;
            }
            Ok(out)
        }
    }

    /// Mean over each segment of `1/2 |target - head(x, t)|^2`, summed over
    /// segments, and its exact gradient with respect to all parameters.
    pub fn loss_and_grad(&self, segments: &[Segment]) -> Result<LossGrad<F>> {
        let d = self.spec.dim;
        let out_dim = self.spec.output_dim();
        let mut blocks = Vec::with_capacity(segments.len());
        let mut total_rows = 0;
        for seg in segments {
            if seg.target.dim() != seg.x.dim() {
                return Err(Error::Shape("segment target and input shapes differ".into()));
            }
            let off = self
                .spec
                .head_offset(seg.head)
                .ok_or_else(|| Error::InvalidInput(format!("network has no {:?} head", seg.head)))?;
            blocks.push((total_rows, seg.x.nrows(), off));
            total_rows += seg.x.nrows();
        }

        let mut input = Array2::zeros((total_rows, self.spec.input_dim()));
        for (seg, &(start, n, _)) in segments.iter().zip(&blocks) {
            let f = self.features(seg.x.view(), seg.t.view(), seg.sigma.as_ref().map(|s| s.view()))?;
            input.slice_mut(s![start..start + n, ..]).assign(&f);
        }

        // forward pass, keeping the input of every layer
        let theta = self.theta.as_slice().expect("contiguous parameters");
        let last = self.layout.shapes.len() - 1;
        let mut acts: Vec<Array2<F>> = Vec::with_capacity(last + 1);
        acts.push(input);
        for l in 0..last {
            let (w, b) = self.layout.weights(theta, l);
            let mut z = acts[l].dot(&w);
            z += &b;
            z.mapv_inplace(|v| v.max(F::zero()));
            acts.push(z);
        }
        let (w_out, b_out) = self.layout.weights(theta, last);
        let mut out = acts[last].dot(&w_out);
        out += &b_out;

        // loss and dL/d(out)
        let mut dout = Array2::<F>::zeros((total_rows, out_dim));
        let mut per_head = [0.0f64; 2];
        for (seg, &(start, n, off)) in segments.iter().zip(&blocks) {
            if n == 0 {
                continue;
            }
            let scale = 1.0 / n as f64;
            let mut acc = 0.0f64;
            for i in 0..n {
                let r = start + i;
                let mut row_loss = 0.0f64;
                for j in 0..d {
                    let resid = out[[r, off + j]].f64() - seg.target[[i, j]];
                    row_loss += 0.5 * resid * resid;
                    dout[[r, off + j]] = F::of(resid * scale);
                }
                if !row_loss.is_finite() {
                    return Err(Error::NonFiniteLoss { row: r });
                }
                acc += row_loss;
            }
            let idx = match seg.head {
                Head::Forward => 0,
                Head::Backward => 1,
            };
            per_head[idx] += acc * scale;
        }

        // reverse pass
        let mut grad = Array1::<F>::zeros(self.theta.len());
        let gslice = grad.as_slice_mut().expect("contiguous gradient");
        let mut delta = dout;
        for l in (0..=last).rev() {
            let (mut gw, mut gb) = self.layout.split_mut(gslice, l);
            ndarray::linalg::general_mat_mul(F::one(), &acts[l].t(), &delta, F::zero(), &mut gw);
            gb.assign(&delta.sum_axis(Axis(0)));
            if l > 0 {
                let (w, _) = self.layout.weights(theta, l);
                let mut prev = delta.dot(&w.t());
                ndarray::Zip::from(&mut prev).and(&acts[l]).for_each(|g, &a| {
                    if a <= F::zero() {
                        *g = F::zero();
                    }
                });
                delta = prev;
            }
        }

        Ok(LossGrad { loss: per_head[0] + per_head[1], loss_f: per_head[0], loss_b: per_head[1], grad })
    }

    /// Loss only (no gradient); used by finite-difference checks.
    pub fn loss(&self, segments: &[Segment]) -> Result<f64> {
        Ok(self.loss_and_grad(segments)?.loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_segments(d: usize, n: usize, rng: &mut RngStream) -> Vec<Segment> {
        let mut seg = |head| {
            let x = Array2::from_shape_fn((n, d), |_| rng.normal());
            let t = Array1::from_shape_fn(n, |_| rng.uniform_range(0.05, 0.95));
            let target = Array2::from_shape_fn((n, d), |_| rng.normal());
            Segment { head, x, t, sigma: None, target }
        };
        vec![seg(Head::Forward), seg(Head::Backward)]
    }

    fn random_net(spec: NetSpec, seed: u64) -> DriftNet<f64> {
        let mut rng = RngStream::from_seed(seed);
        let mut net = DriftNet::<f64>::init(spec, &mut rng).unwrap();
        for v in net.params_mut().iter_mut() {
            *v = 0.5 * rng.normal();
        }
        net
    }

    #[test]
    fn zero_output_layer_gives_zero_heads() {
        let spec = NetSpec::joint(3, 16, 3);
        let net = DriftNet::<f32>::init(spec, &mut RngStream::from_seed(0)).unwrap();
        let mut rng = RngStream::from_seed(1);
        let x = Array2::from_shape_fn((10, 3), |_| 3.0 * rng.normal());
        let t = Array1::from_shape_fn(10, |_| rng.uniform());
        let (mu, v) = net.forward(x.view(), t.view(), None).unwrap();
        assert!(mu.iter().chain(v.iter()).all(|z| *z == 0.0));
    }

    #[test]
    fn default_scale_parameter_count() {
        for d in [1, 2, 16, 64, 128] {
            let p = NetSpec::joint(d, 768, 3).param_count();
            assert!((1_100_000..1_500_000).contains(&p), "d={d}: {p}");
        }
    }

    #[test]
    fn batched_rows_match_single_rows() {
        let net = random_net(NetSpec::joint(2, 32, 3), 4);
        let net32 = DriftNet::<f32>::from_params(*net.spec(), net.params().mapv(|v| v as f32)).unwrap();
        let mut rng = RngStream::from_seed(5);
        let x = Array2::from_shape_fn((37, 2), |_| rng.normal());
        let t = Array1::from_shape_fn(37, |_| rng.uniform());
        let all = net32.forward_raw(x.view(), t.view(), None).unwrap();
        for i in [0, 7, 36] {
            let one = net32.forward_raw(x.slice(s![i..i + 1, ..]), t.slice(s![i..i + 1]), None).unwrap();
            assert_eq!(one.row(0), all.row(i), "row {i}");
        }
    }

    #[test]
    fn shape_errors() {
        let net = random_net(NetSpec::joint(2, 8, 2), 0);
        let x = Array2::zeros((4, 3));
        let t = Array1::zeros(4);
        assert!(net.forward(x.view(), t.view(), None).is_err());
        let x = Array2::zeros((4, 2));
        assert!(net.forward(x.view(), Array1::zeros(3).view(), None).is_err());
        assert!(net.forward(x.view(), t.view(), Some(t.view())).is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let spec = NetSpec::joint(2, 4, 3);
        let net = random_net(spec, 11);
        let segs = toy_segments(2, 6, &mut RngStream::from_seed(12));
        let lg = net.loss_and_grad(&segs).unwrap();
        let h = 1e-4;
        let mut worst = 0.0f64;
        for k in 0..net.params().len() {
            let mut plus = net.clone();
            plus.params_mut()[k] += h;
            let mut minus = net.clone();
            minus.params_mut()[k] -= h;
            let fd = (plus.loss(&segs).unwrap() - minus.loss(&segs).unwrap()) / (2.0 * h);
            let g = lg.grad[k];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-5, "max relative error {worst:e}");
    }

    #[test]
    fn loss_zero_at_exact_targets() {
        let net = random_net(NetSpec::joint(2, 8, 2), 3);
        let mut segs = toy_segments(2, 5, &mut RngStream::from_seed(4));
        for seg in &mut segs {
            seg.target = net.forward_head(seg.head, seg.x.view(), seg.t.view(), None).unwrap();
        }
        let lg = net.loss_and_grad(&segs).unwrap();
        assert_eq!(lg.loss, 0.0);
        assert!(lg.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn doubling_targets_at_zero_output_quadruples_loss() {
        let net = DriftNet::<f64>::init(NetSpec::joint(2, 8, 2), &mut RngStream::from_seed(0)).unwrap();
        let mut segs = toy_segments(2, 5, &mut RngStream::from_seed(1));
        let l1 = net.loss(&segs).unwrap();
        for seg in &mut segs {
            seg.target *= 2.0;
        }
        let l2 = net.loss(&segs).unwrap();
        assert!((l2 - 4.0 * l1).abs() < 1e-12 * l2);
    }

    #[test]
    fn heads_train_disjoint_output_blocks() {
        // only forward targets carry signal; at zero init the backward head's
        // output block must receive no gradient
        let spec = NetSpec::joint(2, 8, 2);
        let net = DriftNet::<f64>::init(spec, &mut RngStream::from_seed(0)).unwrap();
        let mut segs = toy_segments(2, 5, &mut RngStream::from_seed(1));
        segs[1].target.fill(0.0);
        let lg = net.loss_and_grad(&segs).unwrap();
        let layout = Layout::new(&spec);
        let last = layout.shapes.len() - 1;
        let (fan_in, out) = layout.shapes[last];
        let off = layout.offsets[last];
        for i in 0..fan_in {
            for j in 2..out {
                assert_eq!(lg.grad[off + i * out + j], 0.0);
            }
        }
        for j in 2..out {
            assert_eq!(lg.grad[off + fan_in * out + j], 0.0);
        }
        assert!(lg.grad.slice(s![off..]).iter().any(|g| *g != 0.0));
    }

    #[test]
    fn non_finite_target_reports_row() {
        let net = random_net(NetSpec::joint(1, 4, 1), 0);
        let mut segs = toy_segments(1, 3, &mut RngStream::from_seed(0));
        segs[1].target[[2, 0]] = f64::NAN;
        let err = net.loss_and_grad(&segs).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { row: 5 }), "{err:?}");
    }

    #[test]
    fn deterministic_loss_and_grad() {
        let net = random_net(NetSpec::joint(2, 16, 3), 1);
        let segs = toy_segments(2, 20, &mut RngStream::from_seed(2));
        let a = net.loss_and_grad(&segs).unwrap();
        let b = net.loss_and_grad(&segs).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.grad, b.grad);
    }
}
