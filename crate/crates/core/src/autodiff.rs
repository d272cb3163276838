//! Tape-based reverse-mode differentiation over the primitive kernels.
//!
//! The tape is rebuilt every forward pass (define-by-run). Node ids are
//! assigned in push order, so the recorded program is already topologically
//! sorted and backward is a single reverse sweep. Gradients accumulate
//! additively across fan-out.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{HcmlError, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(&self) -> usize {
        self.0
    }
}

/// Arguments handed to a node's backward function.
pub struct BackCtx<'a> {
    pub out_grad: &'a Tensor,
    pub out: &'a Tensor,
    pub parents: &'a [Rc<Tensor>],
    /// Which parents actually need a gradient.
    pub needs: &'a [bool],
}

type BackFn = Box<dyn Fn(&BackCtx) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackFn>,
}

/// Recorded computation of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradient of the loss with respect to every reachable node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push_node(value, vec![], true, None)
    }

    /// Non-trainable input; backward never flows into it.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push_node(value, vec![], false, None)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    fn push_node(
        &self,
        value: Tensor,
        parents: Vec<usize>,
        requires_grad: bool,
        backward: Option<BackFn>,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        // Parents always precede children; this is what makes the reverse
        // sweep sound and rules out cycles.
        assert!(parents.iter().all(|&p| p < id), "tape op references a later node");
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            requires_grad,
            backward,
        });
        Var(id)
    }

    /// Record an op. `backward` may be skipped entirely when no parent needs
    /// gradients.
    pub fn push_op(&self, value: Tensor, parents: &[Var], backward: BackFn) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].requires_grad)
        };
        let back = requires_grad.then_some(backward);
        self.push_node(value, parents.iter().map(|p| p.0).collect(), requires_grad, back)
    }

    /// Reverse sweep from a scalar loss. Two sweeps over the same tape give
    /// identical results; accumulators live in the returned map, not the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let loss_node = nodes
            .get(loss.0)
            .ok_or_else(|| HcmlError::InvalidArg("backward: unknown node".into()))?;
        if loss_node.value.numel() != 1 {
            return Err(HcmlError::shape(
                "backward",
                "scalar loss",
                format!("{:?}", loss_node.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_node.value.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad || node.backward.is_none() {
                continue;
            }
            let Some(out_grad) = grads[id].clone() else {
                continue;
            };
            let parent_vals: Vec<Rc<Tensor>> =
                node.parents.iter().map(|&p| Rc::clone(&nodes[p].value)).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let ctx = BackCtx {
                out_grad: &out_grad,
                out: &node.value,
                parents: &parent_vals,
                needs: &needs,
            };
            let parent_grads = (node.backward.as_ref().unwrap())(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                debug_assert_eq!(pg.shape(), nodes[pid].value.shape(), "gradient shape mismatch");
                match &mut grads[pid] {
                    Some(acc) => acc.axpy(1.0, &pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }

    // -- elementwise and structural ops --------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(&self.value(b))?;
        Ok(self.push_op(value, &[a, b], Box::new(|ctx| {
            vec![
                ctx.needs[0].then(|| ctx.out_grad.clone()),
                ctx.needs[1].then(|| ctx.out_grad.clone()),
            ]
        })))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(&self.value(b))?;
        Ok(self.push_op(value, &[a, b], Box::new(|ctx| {
            vec![
                ctx.needs[0].then(|| ctx.out_grad.clone()),
                ctx.needs[1].then(|| ctx.out_grad.scale(-1.0)),
            ]
        })))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(&self.value(b))?;
        Ok(self.push_op(value, &[a, b], Box::new(|ctx| {
            vec![
                ctx.needs[0].then(|| ctx.out_grad.mul(&ctx.parents[1]).unwrap()),
                ctx.needs[1].then(|| ctx.out_grad.mul(&ctx.parents[0]).unwrap()),
            ]
        })))
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        let value = self.value(x).scale(c);
        self.push_op(value, &[x], Box::new(move |ctx| {
            vec![ctx.needs[0].then(|| ctx.out_grad.scale(c))]
        }))
    }

    pub fn relu(&self, x: Var) -> Var {
        let value = tensor::relu(&self.value(x));
        self.push_op(value, &[x], Box::new(|ctx| {
            vec![ctx.needs[0].then(|| tensor::relu_bwd(&ctx.parents[0], ctx.out_grad))]
        }))
    }

    pub fn mean(&self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::scalar(tensor::mean(&xv));
        self.push_op(value, &[x], Box::new(|ctx| {
            let n = ctx.parents[0].numel() as f64;
            let g = ctx.out_grad.scalar_value() / n;
            vec![ctx.needs[0].then(|| Tensor::full(ctx.parents[0].shape(), g))]
        }))
    }

    pub fn concat_channels(&self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let value = tensor::concat_channels(&refs)?;
        Ok(self.push_op(value, parts, Box::new(|ctx| {
            let shapes: Vec<Vec<usize>> = ctx.parents.iter().map(|p| p.shape().to_vec()).collect();
            let grads = tensor::concat_channels_bwd(&shapes, ctx.out_grad);
            grads
                .into_iter()
                .zip(ctx.needs)
                .map(|(g, &need)| need.then_some(g))
                .collect()
        })))
    }

    pub fn conv1x1x1(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let value = tensor::conv1x1x1(&self.value(x), &self.value(w), &self.value(b))?;
        Ok(self.push_op(value, &[x, w, b], Box::new(|ctx| {
            let (gx, gw, gb) = tensor::conv1x1x1_bwd(
                &ctx.parents[0],
                &ctx.parents[1],
                ctx.out_grad,
                (ctx.needs[0], ctx.needs[1], ctx.needs[2]),
            );
            vec![gx, gw, gb]
        })))
    }

    pub fn conv3x3(&self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let value = tensor::conv3x3_spatial(&self.value(x), &self.value(w), &self.value(b), stride)?;
        Ok(self.push_op(value, &[x, w, b], Box::new(move |ctx| {
            let (gx, gw, gb) = tensor::conv3x3_bwd(
                &ctx.parents[0],
                &ctx.parents[1],
                ctx.out_grad,
                stride,
                (ctx.needs[0], ctx.needs[1], ctx.needs[2]),
            );
            vec![gx, gw, gb]
        })))
    }

    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let bias_val = b.map(|bv| self.value(bv));
        let value = tensor::linear(&self.value(x), &self.value(w), bias_val.as_deref())?;
        let mut parents = vec![x, w];
        if let Some(bv) = b {
            parents.push(bv);
        }
        let has_bias = b.is_some();
        Ok(self.push_op(value, &parents, Box::new(move |ctx| {
            let needs_b = has_bias && ctx.needs[2];
            let (gx, gw, gb) = tensor::linear_bwd(
                &ctx.parents[0],
                &ctx.parents[1],
                ctx.out_grad,
                has_bias,
                (ctx.needs[0], ctx.needs[1], needs_b),
            );
            let mut out = vec![gx, gw];
            if has_bias {
                out.push(gb);
            }
            out
        })))
    }

    pub fn channel_scale(&self, x: Var, s: Var) -> Result<Var> {
        let value = tensor::channel_scale(&self.value(x), &self.value(s))?;
        Ok(self.push_op(value, &[x, s], Box::new(|ctx| {
            let (gx, gs) = tensor::channel_scale_bwd(
                &ctx.parents[0],
                &ctx.parents[1],
                ctx.out_grad,
                (ctx.needs[0], ctx.needs[1]),
            );
            vec![gx, gs]
        })))
    }

    pub fn cosine_sim(&self, u: Var, v: Var) -> Result<Var> {
        let s = tensor::cosine_sim(&self.value(u), &self.value(v))?;
        Ok(self.push_op(Tensor::scalar(s), &[u, v], Box::new(|ctx| {
            let g = ctx.out_grad.scalar_value();
            let mut gu = Tensor::zeros(ctx.parents[0].shape());
            let mut gv = Tensor::zeros(ctx.parents[1].shape());
            tensor::cosine_sim_bwd_acc(
                ctx.parents[0].data(),
                ctx.parents[1].data(),
                tensor::COSINE_NORM_EPS,
                g,
                ctx.needs[0].then_some(gu.data_mut()).map(|d| &mut d[..]),
                ctx.needs[1].then_some(gv.data_mut()).map(|d| &mut d[..]),
            );
            vec![ctx.needs[0].then_some(gu), ctx.needs[1].then_some(gv)]
        })))
    }

    /// Keep frames `t0..t1`.
    pub fn slice_time(&self, x: Var, t0: usize, t1: usize) -> Result<Var> {
        let xv = self.value(x);
        let (b, c, t, h, w) = xv.dims5()?;
        if t0 >= t1 || t1 > t {
            return Err(HcmlError::InvalidArg(format!(
                "slice_time: invalid range {t0}..{t1} for T = {t}"
            )));
        }
        let tn = t1 - t0;
        let mut out = Tensor::zeros(&[b, c, tn, h, w]);
        let hw = h * w;
        for bi in 0..b {
            for ci in 0..c {
                for ti in 0..tn {
                    let src = xv.idx5(bi, ci, t0 + ti, 0, 0);
                    let dst = out.idx5(bi, ci, ti, 0, 0);
                    out.data_mut()[dst..dst + hw].copy_from_slice(&xv.data()[src..src + hw]);
                }
            }
        }
        Ok(self.push_op(out, &[x], Box::new(move |ctx| {
            if !ctx.needs[0] {
                return vec![None];
            }
            let mut gx = Tensor::zeros(ctx.parents[0].shape());
            let (b, c, _, h, w) = ctx.parents[0].dims5().unwrap();
            let hw = h * w;
            for bi in 0..b {
                for ci in 0..c {
                    for ti in 0..tn {
                        let dst = gx.idx5(bi, ci, t0 + ti, 0, 0);
                        let src = ctx.out_grad.idx5(bi, ci, ti, 0, 0);
                        gx.data_mut()[dst..dst + hw]
                            .copy_from_slice(&ctx.out_grad.data()[src..src + hw]);
                    }
                }
            }
            vec![Some(gx)]
        })))
    }

    /// Keep frames 0, stride, 2*stride, ...
    pub fn subsample_time(&self, x: Var, stride: usize) -> Result<Var> {
        let xv = self.value(x);
        let (b, c, t, h, w) = xv.dims5()?;
        if stride < 1 {
            return Err(HcmlError::InvalidArg("subsample_time: stride must be >= 1".into()));
        }
        let tn = t.div_ceil(stride);
        let mut out = Tensor::zeros(&[b, c, tn, h, w]);
        let hw = h * w;
        for bi in 0..b {
            for ci in 0..c {
                for ti in 0..tn {
                    let src = xv.idx5(bi, ci, ti * stride, 0, 0);
                    let dst = out.idx5(bi, ci, ti, 0, 0);
                    out.data_mut()[dst..dst + hw].copy_from_slice(&xv.data()[src..src + hw]);
                }
            }
        }
        Ok(self.push_op(out, &[x], Box::new(move |ctx| {
            if !ctx.needs[0] {
                return vec![None];
            }
            let mut gx = Tensor::zeros(ctx.parents[0].shape());
            let (b, c, _, h, w) = ctx.parents[0].dims5().unwrap();
            let hw = h * w;
            for bi in 0..b {
                for ci in 0..c {
                    for ti in 0..tn {
                        let dst = gx.idx5(bi, ci, ti * stride, 0, 0);
                        let src = ctx.out_grad.idx5(bi, ci, ti, 0, 0);
                        gx.data_mut()[dst..dst + hw]
                            .copy_from_slice(&ctx.out_grad.data()[src..src + hw]);
                    }
                }
            }
            vec![Some(gx)]
        })))
    }

    /// out[.., t] = in[.., min(t + 1, T - 1)]: every frame paired with its
    /// successor, the last with itself.
    pub fn shift_time_forward(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (b, c, t, h, w) = xv.dims5()?;
        let hw = h * w;
        let mut out = Tensor::zeros(xv.shape());
        for bi in 0..b {
            for ci in 0..c {
                for ti in 0..t {
                    let src = xv.idx5(bi, ci, (ti + 1).min(t - 1), 0, 0);
                    let dst = out.idx5(bi, ci, ti, 0, 0);
                    out.data_mut()[dst..dst + hw].copy_from_slice(&xv.data()[src..src + hw]);
                }
            }
        }
        Ok(self.push_op(out, &[x], Box::new(move |ctx| {
            if !ctx.needs[0] {
                return vec![None];
            }
            let mut gx = Tensor::zeros(ctx.parents[0].shape());
            let (b, c, t, h, w) = ctx.parents[0].dims5().unwrap();
            let hw = h * w;
            for bi in 0..b {
                for ci in 0..c {
                    for ti in 0..t {
                        let dst = gx.idx5(bi, ci, (ti + 1).min(t - 1), 0, 0);
                        let src = ctx.out_grad.idx5(bi, ci, ti, 0, 0);
                        for k in 0..hw {
                            gx.data_mut()[dst + k] += ctx.out_grad.data()[src + k];
                        }
                    }
                }
            }
            vec![Some(gx)]
        })))
    }

    /// Keep channels `c0..c1`.
    pub fn slice_channels(&self, x: Var, c0: usize, c1: usize) -> Result<Var> {
        let xv = self.value(x);
        let (b, c, t, h, w) = xv.dims5()?;
        if c0 >= c1 || c1 > c {
            return Err(HcmlError::InvalidArg(format!(
                "slice_channels: invalid range {c0}..{c1} for C = {c}"
            )));
        }
        let cn = c1 - c0;
        let inner = t * h * w;
        let mut out = Tensor::zeros(&[b, cn, t, h, w]);
        for bi in 0..b {
            let src = (bi * c + c0) * inner;
            let dst = bi * cn * inner;
            out.data_mut()[dst..dst + cn * inner].copy_from_slice(&xv.data()[src..src + cn * inner]);
        }
        Ok(self.push_op(out, &[x], Box::new(move |ctx| {
            if !ctx.needs[0] {
                return vec![None];
            }
            let mut gx = Tensor::zeros(ctx.parents[0].shape());
            let (b, c, t, h, w) = ctx.parents[0].dims5().unwrap();
            let inner = t * h * w;
            for bi in 0..b {
                let dst = (bi * c + c0) * inner;
                let src = bi * cn * inner;
                gx.data_mut()[dst..dst + cn * inner]
                    .copy_from_slice(&ctx.out_grad.data()[src..src + cn * inner]);
            }
            vec![Some(gx)]
        })))
    }

    /// Nearest-neighbor spatial upsampling by integer factors.
    pub fn upsample_nearest(&self, x: Var, fh: usize, fw: usize) -> Result<Var> {
        let xv = self.value(x);
        let (b, c, t, h, w) = xv.dims5()?;
        if fh < 1 || fw < 1 {
            return Err(HcmlError::InvalidArg("upsample_nearest: factors must be >= 1".into()));
        }
        let mut out = Tensor::zeros(&[b, c, t, h * fh, w * fw]);
        for bi in 0..b {
            for ci in 0..c {
                for ti in 0..t {
                    for y in 0..h * fh {
                        for x2 in 0..w * fw {
                            let v = xv.at5(bi, ci, ti, y / fh, x2 / fw);
                            let idx = out.idx5(bi, ci, ti, y, x2);
                            out.data_mut()[idx] = v;
                        }
                    }
                }
            }
        }
        Ok(self.push_op(out, &[x], Box::new(move |ctx| {
            if !ctx.needs[0] {
                return vec![None];
            }
            let mut gx = Tensor::zeros(ctx.parents[0].shape());
            let (b, c, t, h, w) = ctx.parents[0].dims5().unwrap();
            for bi in 0..b {
                for ci in 0..c {
                    for ti in 0..t {
                        for y in 0..h * fh {
                            for x2 in 0..w * fw {
                                let g = ctx.out_grad.at5(bi, ci, ti, y, x2);
                                let idx = gx.idx5(bi, ci, ti, y / fh, x2 / fw);
                                gx.data_mut()[idx] += g;
                            }
                        }
                    }
                }
            }
            vec![Some(gx)]
        })))
    }

    /// Gather feature vectors at (b, t, y, x) sites into a (rows, C) matrix.
    pub fn gather_sites(&self, x: Var, sites: Vec<(usize, usize, usize, usize)>) -> Result<Var> {
        let xv = self.value(x);
        let (b, c, t, h, w) = xv.dims5()?;
        for &(bi, ti, y, xx) in &sites {
            if bi >= b || ti >= t || y >= h || xx >= w {
                return Err(HcmlError::InvalidArg(format!(
                    "gather_sites: site ({bi},{ti},{y},{xx}) outside {:?}",
                    xv.shape()
                )));
            }
        }
        let mut out = Tensor::zeros(&[sites.len(), c]);
        for (r, &(bi, ti, y, xx)) in sites.iter().enumerate() {
            for ci in 0..c {
                out.data_mut()[r * c + ci] = xv.at5(bi, ci, ti, y, xx);
            }
        }
        Ok(self.push_op(out, &[x], Box::new(move |ctx| {
            if !ctx.needs[0] {
                return vec![None];
            }
            let mut gx = Tensor::zeros(ctx.parents[0].shape());
            let c = ctx.parents[0].shape()[1];
            for (r, &(bi, ti, y, xx)) in sites.iter().enumerate() {
                for ci in 0..c {
                    let idx = gx.idx5(bi, ci, ti, y, xx);
                    gx.data_mut()[idx] += ctx.out_grad.data()[r * c + ci];
                }
            }
            vec![Some(gx)]
        })))
    }

    /// Select rows of a (R, C) matrix.
    pub fn select_rows(&self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        if rows.iter().any(|&i| i >= r) {
            return Err(HcmlError::InvalidArg("select_rows: row index out of range".into()));
        }
        let mut out = Tensor::zeros(&[rows.len(), c]);
        for (dst, &src) in rows.iter().enumerate() {
            out.data_mut()[dst * c..(dst + 1) * c].copy_from_slice(&xv.data()[src * c..(src + 1) * c]);
        }
        Ok(self.push_op(out, &[x], Box::new(move |ctx| {
            if !ctx.needs[0] {
                return vec![None];
            }
            let mut gx = Tensor::zeros(ctx.parents[0].shape());
            let c = ctx.parents[0].shape()[1];
            for (src, &dst) in rows.iter().enumerate() {
                for ci in 0..c {
                    gx.data_mut()[dst * c + ci] += ctx.out_grad.data()[src * c + ci];
                }
            }
            vec![Some(gx)]
        })))
    }

    /// Stack (R_i, C) matrices along rows.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(HcmlError::InvalidArg("concat_rows: no inputs".into()));
        }
        let values: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let (_, c) = values[0].dims2()?;
        let mut total = 0;
        for v in &values {
            let (r, vc) = v.dims2()?;
            if vc != c {
                return Err(HcmlError::shape("concat_rows", format!("C = {c}"), format!("C = {vc}")));
            }
            total += r;
        }
        let mut out = Tensor::zeros(&[total, c]);
        let mut off = 0;
        for v in &values {
            out.data_mut()[off..off + v.numel()].copy_from_slice(v.data());
            off += v.numel();
        }
        Ok(self.push_op(out, parts, Box::new(|ctx| {
            let mut off = 0;
            ctx.parents
                .iter()
                .zip(ctx.needs)
                .map(|(p, &need)| {
                    let n = p.numel();
                    let g = need.then(|| {
                        let mut gp = Tensor::zeros(p.shape());
                        gp.data_mut().copy_from_slice(&ctx.out_grad.data()[off..off + n]);
                        gp
                    });
                    off += n;
                    g
                })
                .collect()
        })))
    }

    /// Mean over (T, H, W) per (batch, channel).
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (b, c, t, h, w) = xv.dims5()?;
        let inner = t * h * w;
        let mut out = Tensor::zeros(&[b, c]);
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * inner;
                out.data_mut()[bi * c + ci] =
                    xv.data()[base..base + inner].iter().sum::<f64>() / inner as f64;
            }
        }
        Ok(self.push_op(out, &[x], Box::new(move |ctx| {
            if !ctx.needs[0] {
                return vec![None];
            }
            let (b, c, _, _, _) = ctx.parents[0].dims5().unwrap();
            let mut gx = Tensor::zeros(ctx.parents[0].shape());
            for bi in 0..b {
                for ci in 0..c {
                    let g = ctx.out_grad.data()[bi * c + ci] / inner as f64;
                    let base = (bi * c + ci) * inner;
                    for v in &mut gx.data_mut()[base..base + inner] {
                        *v = g;
                    }
                }
            }
            vec![Some(gx)]
        })))
    }

    /// Forward difference along W: out[..., x] = in[..., x+1] - in[..., x].
    pub fn grad_x(&self, v: Var) -> Result<Var> {
        let xv = self.value(v);
        let (b, c, t, h, w) = xv.dims5()?;
        if w < 2 {
            return Err(HcmlError::InvalidArg("grad_x: needs W >= 2".into()));
        }
        let mut out = Tensor::zeros(&[b, c, t, h, w - 1]);
        for bi in 0..b {
            for ci in 0..c {
                for ti in 0..t {
                    for y in 0..h {
                        for x in 0..w - 1 {
                            let idx = out.idx5(bi, ci, ti, y, x);
                            out.data_mut()[idx] = xv.at5(bi, ci, ti, y, x + 1) - xv.at5(bi, ci, ti, y, x);
                        }
                    }
                }
            }
        }
        Ok(self.push_op(out, &[v], Box::new(|ctx| {
            if !ctx.needs[0] {
                return vec![None];
            }
            let (b, c, t, h, w) = ctx.parents[0].dims5().unwrap();
            let mut gx = Tensor::zeros(ctx.parents[0].shape());
            for bi in 0..b {
                for ci in 0..c {
                    for ti in 0..t {
                        for y in 0..h {
                            for x in 0..w - 1 {
                                let g = ctx.out_grad.at5(bi, ci, ti, y, x);
                                let i1 = gx.idx5(bi, ci, ti, y, x + 1);
                                let i0 = gx.idx5(bi, ci, ti, y, x);
                                gx.data_mut()[i1] += g;
                                gx.data_mut()[i0] -= g;
                            }
                        }
                    }
                }
            }
            vec![Some(gx)]
        })))
    }

    /// Forward difference along H.
    pub fn grad_y(&self, v: Var) -> Result<Var> {
        let xv = self.value(v);
        let (b, c, t, h, w) = xv.dims5()?;
        if h < 2 {
            return Err(HcmlError::InvalidArg("grad_y: needs H >= 2".into()));
        }
        let mut out = Tensor::zeros(&[b, c, t, h - 1, w]);
        for bi in 0..b {
            for ci in 0..c {
                for ti in 0..t {
                    for y in 0..h - 1 {
                        for x in 0..w {
                            let idx = out.idx5(bi, ci, ti, y, x);
                            out.data_mut()[idx] = xv.at5(bi, ci, ti, y + 1, x) - xv.at5(bi, ci, ti, y, x);
                        }
                    }
                }
            }
        }
        Ok(self.push_op(out, &[v], Box::new(|ctx| {
            if !ctx.needs[0] {
                return vec![None];
            }
            let (b, c, t, h, w) = ctx.parents[0].dims5().unwrap();
            let mut gx = Tensor::zeros(ctx.parents[0].shape());
            for bi in 0..b {
                for ci in 0..c {
                    for ti in 0..t {
                        for y in 0..h - 1 {
                            for x in 0..w {
                                let g = ctx.out_grad.at5(bi, ci, ti, y, x);
                                let i1 = gx.idx5(bi, ci, ti, y + 1, x);
                                let i0 = gx.idx5(bi, ci, ti, y, x);
                                gx.data_mut()[i1] += g;
                                gx.data_mut()[i0] -= g;
                            }
                        }
                    }
                }
            }
            vec![Some(gx)]
        })))
    }

    /// Identity forward whose backward multiplies the gradient by `factor`.
    /// Test fixture for exercising negative controls in the gradient checker.
    pub fn corrupt_gradient(&self, x: Var, factor: f64) -> Var {
        let value = (*self.value(x)).clone();
        self.push_op(value, &[x], Box::new(move |ctx| {
            vec![ctx.needs[0].then(|| ctx.out_grad.scale(factor))]
        }))
    }
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Outcome of checking one scalar-valued computation against central
/// differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    /// (parameter name, max relative error) per checked input.
    pub per_param: Vec<(String, f64)>,
    pub step: f64,
    pub tol: f64,
    pub passed: bool,
    pub note: Option<String>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compare the tape gradient of `f` against central differences
/// (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate of every input.
pub fn grad_check<F>(name: &str, inputs: &[(String, Tensor)], h: f64, tol: f64, f: F) -> GradCheckReport
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let fail = |note: String| GradCheckReport {
        name: name.to_string(),
        per_param: inputs.iter().map(|(n, _)| (n.clone(), f64::INFINITY)).collect(),
        step: h,
        tol,
        passed: false,
        note: Some(note),
    };

    let eval = |tensors: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        if tape.value(loss).numel() != 1 {
            return Err(HcmlError::shape("grad_check", "scalar loss", "non-scalar"));
        }
        Ok((tape, vars, loss))
    };

    let base: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let (tape, vars, loss) = match eval(&base) {
        Ok(v) => v,
        Err(e) => return fail(format!("forward failed: {e}")),
    };
    if !tape.value(loss).is_finite() {
        return fail("non-finite loss value".into());
    }
    let grads = match tape.backward(loss) {
        Ok(g) => g,
        Err(e) => return fail(format!("backward failed: {e}")),
    };

    let mut per_param = Vec::with_capacity(inputs.len());
    let mut passed = true;
    let mut note = None;
    for (pi, (pname, pt)) in inputs.iter().enumerate() {
        let zero;
        let analytic = match grads.wrt(vars[pi]) {
            Some(g) => g,
            None => {
                zero = Tensor::zeros(pt.shape());
                &zero
            }
        };
        let mut max_err = 0.0f64;
        for j in 0..pt.numel() {
            let mut plus = base.clone();
            plus[pi].data_mut()[j] += h;
            let mut minus = base.clone();
            minus[pi].data_mut()[j] -= h;
            let fp = match eval(&plus) {
                Ok((t, _, l)) => t.value(l).scalar_value(),
                Err(e) => return fail(format!("forward failed at +h: {e}")),
            };
            let fm = match eval(&minus) {
                Ok((t, _, l)) => t.value(l).scalar_value(),
                Err(e) => return fail(format!("forward failed at -h: {e}")),
            };
            if !fp.is_finite() || !fm.is_finite() {
                passed = false;
                note = Some(format!("non-finite probe at {pname}[{j}]"));
                max_err = f64::INFINITY;
                break;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let err = rel_err(analytic.data()[j], numeric);
            if err > max_err {
                max_err = err;
            }
        }
        if max_err > tol {
            passed = false;
        }
        per_param.push((pname.clone(), max_err));
    }

    GradCheckReport {
        name: name.to_string(),
        per_param,
        step: h,
        tol,
        passed,
        note,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mean_gradient_is_uniform() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0]));
        let loss = tape.mean(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn relu_subgradient() {
        for (xv, expect) in [(-1.0, 0.0), (2.0, 1.0), (0.0, 0.0)] {
            let tape = Tape::new();
            let x = tape.leaf(Tensor::from_vec(vec![xv]));
            let loss = tape.relu(x);
            let grads = tape.backward(loss).unwrap();
            assert_eq!(grads.wrt(x).unwrap().data(), &[expect]);
        }
    }

    #[test]
    fn cosine_gradient_zero_at_aligned() {
        let tape = Tape::new();
        let u = tape.leaf(Tensor::from_vec(vec![1.0, 0.0]));
        let v = tape.constant(Tensor::from_vec(vec![1.0, 0.0]));
        let loss = tape.cosine_sim(u, v).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gu = grads.wrt(u).unwrap();
        assert!(gu.data().iter().all(|g| g.abs() < 1e-12), "{:?}", gu.data());

        // central-difference verification of the same fact
        let report = grad_check(
            "cosine_at_max",
            &[("u".into(), Tensor::from_vec(vec![1.0, 0.0]))],
            1e-5,
            1e-4,
            |tape, vars| {
                let v = tape.constant(Tensor::from_vec(vec![1.0, 0.0]));
                tape.cosine_sim(vars[0], v)
            },
        );
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let y = tape.relu(x);
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn fanout_gradients_accumulate() {
        // loss = mean(x + x) => d/dx = 2/n
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, -1.0]));
        let s = tape.add(x, x).unwrap();
        let loss = tape.mean(s);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_twice_is_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tape = Tape::new();
        let x = tape.leaf(Tensor::uniform(&[1, 2, 1, 3, 3], -1.0, 1.0, &mut rng));
        let w = tape.leaf(Tensor::uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut rng));
        let b = tape.leaf(Tensor::uniform(&[2], -1.0, 1.0, &mut rng));
        let y = tape.conv3x3(x, w, b, 1).unwrap();
        let loss = tape.mean(tape.relu(y));
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        assert_eq!(g1.wrt(w).unwrap(), g2.wrt(w).unwrap());
        assert_eq!(g1.wrt(x).unwrap(), g2.wrt(x).unwrap());
    }

    #[test]
    fn backward_is_linear_over_loss_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let xv = Tensor::uniform(&[6], -1.0, 1.0, &mut rng);

        let grad_of = |combine: &dyn Fn(&Tape, Var) -> Var| -> Tensor {
            let tape = Tape::new();
            let x = tape.leaf(xv.clone());
            let loss = combine(&tape, x);
            tape.backward(loss).unwrap().wrt(x).unwrap().clone()
        };

        let g_sum = grad_of(&|tape, x| {
            let a = tape.mean(tape.relu(x));
            let sq = tape.mul(x, x).unwrap();
            let b = tape.mean(sq);
            tape.add(a, b).unwrap()
        });
        let g_a = grad_of(&|tape, x| tape.mean(tape.relu(x)));
        let g_b = grad_of(&|tape, x| {
            let sq = tape.mul(x, x).unwrap();
            tape.mean(sq)
        });
        let combined = g_a.add(&g_b).unwrap();
        assert!(g_sum.max_abs_diff(&combined) < 1e-12);
    }

    #[test]
    fn grad_check_passes_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Tensor::uniform(&[5], -2.0, 2.0, &mut rng);
        let report = grad_check("mean_square", &[("x".into(), x)], 1e-5, 1e-6, |tape, vars| {
            let sq = tape.mul(vars[0], vars[0])?;
            Ok(tape.mean(sq))
        });
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn grad_check_catches_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = Tensor::uniform(&[4], 0.5, 2.0, &mut rng);
        let report = grad_check("corrupted", &[("x".into(), x)], 1e-5, 1e-4, |tape, vars| {
            let bad = tape.corrupt_gradient(vars[0], 1.02);
            let sq = tape.mul(bad, bad)?;
            Ok(tape.mean(sq))
        });
        assert!(!report.passed);
    }

    #[test]
    fn structural_ops_roundtrip_gradients() {
        // mean over a gather/select/concat pipeline has uniform gradient mass
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2, 2, 2, 2], (0..16).map(|v| v as f64).collect()).unwrap());
        let g = tape.gather_sites(x, vec![(0, 0, 0, 0), (0, 1, 1, 1)]).unwrap();
        let s = tape.select_rows(g, vec![1, 0, 1]).unwrap();
        let loss = tape.mean(s);
        let grads = tape.backward(loss).unwrap();
        let gx = grads.wrt(x).unwrap();
        let total: f64 = gx.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grad_check_structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = Tensor::uniform(&[2, 3, 4, 4, 4], -1.0, 1.0, &mut rng);
        let report = grad_check("structural", &[("x".into(), x)], 1e-5, 1e-6, |tape, vars| {
            let a = tape.slice_time(vars[0], 1, 3)?;
            let b = tape.subsample_time(a, 2)?;
            let c = tape.slice_channels(b, 0, 2)?;
            let d = tape.upsample_nearest(c, 2, 2)?;
            let e = tape.grad_x(d)?;
            let f2 = tape.grad_y(e)?;
            let g = tape.global_avg_pool(f2)?;
            let sq = tape.mul(g, g)?;
            Ok(tape.mean(sq))
        });
        assert!(report.passed, "{report:?}");
    }
}
