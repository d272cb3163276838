//! Preliminary motion cues: a small dense-connected flow estimator trained
//! by frame reconstruction (photometric + smoothness losses).
//!
//! Warping direction: frame t is reconstructed from frame t+1 using the
//! forward flow at t, so a flow of (+1, 0) at (x, y) samples the next frame
//! one pixel to the right.

use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::error::{HcmlError, Result};
use crate::params::{Binding, ParamId, ParamStore, StageTag};
use crate::tensor::Tensor;

/// Per-pixel (U, V) displacement field over a clip: (B, 2, T, H, W).
/// Channel 0 is horizontal displacement in pixels (positive rightward),
/// channel 1 vertical (positive downward).
#[derive(Clone, Debug)]
pub struct FlowField(Tensor);

impl FlowField {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let (_, c, _, _, _) = tensor.dims5()?;
        if c != 2 {
            return Err(HcmlError::shape("FlowField", "2 channels (U, V)", format!("{c} channels")));
        }
        if !tensor.is_finite() {
            return Err(HcmlError::NonFinite("flow field".into()));
        }
        Ok(FlowField(tensor))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// 0/1 mask of warp samples that landed inside the image: (B, 1, T, H, W).
#[derive(Clone, Debug)]
pub struct ValidityMask(pub Tensor);

impl ValidityMask {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// Replicate the single mask channel across `c` channels.
    pub fn expand_channels(&self, c: usize) -> Tensor {
        let (b, _, t, h, w) = self.0.dims5().unwrap();
        let inner = t * h * w;
        let mut out = Tensor::zeros(&[b, c, t, h, w]);
        for bi in 0..b {
            let src = &self.0.data()[bi * inner..(bi + 1) * inner];
            for ci in 0..c {
                let dst = (bi * c + ci) * inner;
                out.data_mut()[dst..dst + inner].copy_from_slice(src);
            }
        }
        out
    }
}

/// Generalized Charbonnier penalty rho(z) = (z^2 + eps^2)^alpha.
#[derive(Clone, Copy, Debug)]
pub struct CharbonnierParams {
    pub alpha: f64,
    pub eps: f64,
}

impl Default for CharbonnierParams {
    fn default() -> Self {
        CharbonnierParams { alpha: 0.45, eps: 1e-3 }
    }
}

impl CharbonnierParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.alpha && self.alpha < 1.0) || self.eps <= 0.0 {
            return Err(HcmlError::InvalidArg(format!(
                "charbonnier needs alpha in (0,1) and eps > 0, got alpha={}, eps={}",
                self.alpha, self.eps
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn rho(&self, z: f64) -> f64 {
        (z * z + self.eps * self.eps).powf(self.alpha)
    }

    #[inline]
    pub fn rho_prime(&self, z: f64) -> f64 {
        2.0 * self.alpha * z * (z * z + self.eps * self.eps).powf(self.alpha - 1.0)
    }
}

/// Elementwise Charbonnier penalty on the tape.
pub fn charbonnier(tape: &Tape, x: Var, cp: CharbonnierParams) -> Var {
    let value = tape.value(x).map(|z| cp.rho(z));
    tape.push_op(value, &[x], Box::new(move |ctx| {
        vec![ctx.needs[0].then(|| {
            ctx.parents[0]
                .zip_map(ctx.out_grad, "charbonnier_bwd", |z, g| g * cp.rho_prime(z))
                .unwrap()
        })]
    }))
}

#[inline]
fn sample_bilinear(frame: &[f64], h: usize, w: usize, sy: f64, sx: f64) -> f64 {
    let x0 = sx.floor() as usize;
    let y0 = sy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = sx - x0 as f64;
    let fy = sy - y0 as f64;
    (1.0 - fx) * (1.0 - fy) * frame[y0 * w + x0]
        + fx * (1.0 - fy) * frame[y0 * w + x1]
        + (1.0 - fx) * fy * frame[y1 * w + x0]
        + fx * fy * frame[y1 * w + x1]
}

/// Warp each frame of `source` by the flow at the same index:
/// out(x, y) = source(x + U(x,y), y + V(x,y)) via bilinear interpolation.
/// Samples outside [0, W-1] x [0, H-1] produce 0 output and a 0 mask entry.
pub fn bilinear_warp(source: &Tensor, flow: &Tensor) -> Result<(Tensor, ValidityMask)> {
    let (b, c, t, h, w) = source.dims5()?;
    let (fb, fc, ft, fh, fw) = flow.dims5()?;
    if fc != 2 || fb != b || ft != t || fh != h || fw != w {
        return Err(HcmlError::shape(
            "bilinear_warp",
            format!("flow ({b},2,{t},{h},{w})"),
            format!("{:?}", flow.shape()),
        ));
    }
    let hw = h * w;
    let mut warped = Tensor::zeros(source.shape());
    let mut mask = Tensor::zeros(&[b, 1, t, h, w]);
    warped
        .data_mut()
        .par_chunks_mut(c * t * hw)
        .zip(mask.data_mut().par_chunks_mut(t * hw))
        .zip(source.data().par_chunks(c * t * hw))
        .zip(flow.data().par_chunks(2 * t * hw))
        .for_each(|(((out_b, mask_b), src_b), flow_b)| {
            for ti in 0..t {
                for y in 0..h {
                    for x in 0..w {
                        let pos = y * w + x;
                        let u = flow_b[ti * hw + pos]; // channel 0
                        let v = flow_b[(t + ti) * hw + pos]; // channel 1
                        let sx = x as f64 + u;
                        let sy = y as f64 + v;
                        if sx < 0.0 || sx > (w - 1) as f64 || sy < 0.0 || sy > (h - 1) as f64 {
                            continue;
                        }
                        mask_b[ti * hw + pos] = 1.0;
                        for ci in 0..c {
                            let frame = &src_b[(ci * t + ti) * hw..(ci * t + ti + 1) * hw];
                            out_b[(ci * t + ti) * hw + pos] = sample_bilinear(frame, h, w, sy, sx);
                        }
                    }
                }
            }
        });
    Ok((warped, ValidityMask(mask)))
}

fn bilinear_warp_bwd(
    source: &Tensor,
    flow: &Tensor,
    gout: &Tensor,
    needs: (bool, bool),
) -> (Option<Tensor>, Option<Tensor>) {
    let (b, c, t, h, w) = source.dims5().unwrap();
    let hw = h * w;
    let mut g_source = needs.0.then(|| Tensor::zeros(source.shape()));
    let mut g_flow = needs.1.then(|| Tensor::zeros(flow.shape()));

    // Per-batch slices are disjoint, so each may be processed independently.
    let results: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let src_b = &source.data()[bi * c * t * hw..(bi + 1) * c * t * hw];
            let flow_b = &flow.data()[bi * 2 * t * hw..(bi + 1) * 2 * t * hw];
            let go_b = &gout.data()[bi * c * t * hw..(bi + 1) * c * t * hw];
            let mut gs = needs.0.then(|| vec![0.0; c * t * hw]);
            let mut gf = needs.1.then(|| vec![0.0; 2 * t * hw]);
            for ti in 0..t {
                for y in 0..h {
                    for x in 0..w {
                        let pos = y * w + x;
                        let u = flow_b[ti * hw + pos];
                        let v = flow_b[(t + ti) * hw + pos];
                        let sx = x as f64 + u;
                        let sy = y as f64 + v;
                        if sx < 0.0 || sx > (w - 1) as f64 || sy < 0.0 || sy > (h - 1) as f64 {
                            continue;
                        }
                        let x0 = sx.floor() as usize;
                        let y0 = sy.floor() as usize;
                        let x1 = (x0 + 1).min(w - 1);
                        let y1 = (y0 + 1).min(h - 1);
                        let fx = sx - x0 as f64;
                        let fy = sy - y0 as f64;
                        let mut du = 0.0;
                        let mut dv = 0.0;
                        for ci in 0..c {
                            let base = (ci * t + ti) * hw;
                            let g = go_b[base + pos];
                            if g == 0.0 {
                                continue;
                            }
                            if let Some(gs) = gs.as_mut() {
                                gs[base + y0 * w + x0] += g * (1.0 - fx) * (1.0 - fy);
                                gs[base + y0 * w + x1] += g * fx * (1.0 - fy);
                                gs[base + y1 * w + x0] += g * (1.0 - fx) * fy;
                                gs[base + y1 * w + x1] += g * fx * fy;
                            }
                            let frame = &src_b[base..base + hw];
                            du += g
                                * ((1.0 - fy) * (frame[y0 * w + x1] - frame[y0 * w + x0])
                                    + fy * (frame[y1 * w + x1] - frame[y1 * w + x0]));
                            dv += g
                                * ((1.0 - fx) * (frame[y1 * w + x0] - frame[y0 * w + x0])
                                    + fx * (frame[y1 * w + x1] - frame[y0 * w + x1]));
                        }
                        if let Some(gf) = gf.as_mut() {
                            gf[ti * hw + pos] += du;
                            gf[(t + ti) * hw + pos] += dv;
                        }
                    }
                }
            }
            (gs, gf)
        })
        .collect();

    for (bi, (gs, gf)) in results.into_iter().enumerate() {
        if let (Some(dst), Some(src)) = (g_source.as_mut(), gs) {
            dst.data_mut()[bi * c * t * hw..(bi + 1) * c * t * hw].copy_from_slice(&src);
        }
        if let (Some(dst), Some(src)) = (g_flow.as_mut(), gf) {
            dst.data_mut()[bi * 2 * t * hw..(bi + 1) * 2 * t * hw].copy_from_slice(&src);
        }
    }
    (g_source, g_flow)
}

/// Differentiable warp; the mask is a by-product and carries no gradient.
pub fn bilinear_warp_op(tape: &Tape, source: Var, flow: Var) -> Result<(Var, ValidityMask)> {
    let (warped, mask) = bilinear_warp(&tape.value(source), &tape.value(flow))?;
    let var = tape.push_op(warped, &[source, flow], Box::new(|ctx| {
        let (gs, gf) = bilinear_warp_bwd(
            &ctx.parents[0],
            &ctx.parents[1],
            ctx.out_grad,
            (ctx.needs[0], ctx.needs[1]),
        );
        vec![gs, gf]
    }));
    Ok((var, mask))
}

/// Masked mean Charbonnier error between a target and its reconstruction,
/// averaged over every element (batch, channels, frames, pixels).
pub fn photometric_loss(
    tape: &Tape,
    target: Var,
    warped: Var,
    mask: &ValidityMask,
    cp: CharbonnierParams,
) -> Result<Var> {
    let c = tape.value(target).dims5()?.1;
    let diff = tape.sub(target, warped)?;
    let rho = charbonnier(tape, diff, cp);
    let mask_c = tape.constant(mask.expand_channels(c));
    let masked = tape.mul(rho, mask_c)?;
    Ok(tape.mean(masked))
}

/// Pure-tensor route of the same quantity, used as an independent check and
/// by the integer-flow grid search.
pub fn photometric_loss_value(
    target: &Tensor,
    warped: &Tensor,
    mask: &ValidityMask,
    cp: CharbonnierParams,
) -> Result<f64> {
    let (b, c, t, h, w) = target.dims5()?;
    if warped.shape() != target.shape() {
        return Err(HcmlError::shape(
            "photometric_loss",
            format!("{:?}", target.shape()),
            format!("{:?}", warped.shape()),
        ));
    }
    let hw = h * w;
    let mut acc = 0.0;
    for bi in 0..b {
        for ci in 0..c {
            for ti in 0..t {
                for p in 0..hw {
                    let m = mask.0.data()[(bi * t + ti) * hw + p];
                    if m == 0.0 {
                        continue;
                    }
                    let idx = ((bi * c + ci) * t + ti) * hw + p;
                    acc += m * cp.rho(target.data()[idx] - warped.data()[idx]);
                }
            }
        }
    }
    Ok(acc / (b * c * t * hw) as f64)
}

/// Mean Charbonnier penalty on forward-difference flow gradients, averaged
/// per direction and summed over the four (U/V, x/y) terms. The final
/// row/column has no forward difference and is excluded from each mean.
pub fn smoothness_loss(tape: &Tape, flow: Var, cp: CharbonnierParams) -> Result<Var> {
    let u = tape.slice_channels(flow, 0, 1)?;
    let v = tape.slice_channels(flow, 1, 2)?;
    let mut total = None;
    for comp in [u, v] {
        for grad in [tape.grad_x(comp)?, tape.grad_y(comp)?] {
            let term = tape.mean(charbonnier(tape, grad, cp));
            total = Some(match total {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
    }
    Ok(total.unwrap())
}

/// Components of the self-supervised reconstruction objective.
pub struct ReconLoss {
    pub total: Var,
    pub photometric: Var,
    pub smoothness: Var,
}

/// L_reconstruct = L_photometric + zeta * L_smoothness, warping frame t+1
/// back to frame t for t in 0..T-1.
pub fn reconstruction_loss(
    tape: &Tape,
    frames: Var,
    flow: Var,
    cp: CharbonnierParams,
    zeta: f64,
) -> Result<ReconLoss> {
    let (_, _, t, _, _) = tape.value(frames).dims5()?;
    if t < 2 {
        return Err(HcmlError::InvalidArg(format!(
            "reconstruction_loss needs T >= 2 frames, got T = {t}"
        )));
    }
    let target = tape.slice_time(frames, 0, t - 1)?;
    let source = tape.slice_time(frames, 1, t)?;
    let flow_used = tape.slice_time(flow, 0, t - 1)?;
    let (warped, mask) = bilinear_warp_op(tape, source, flow_used)?;
    let photometric = photometric_loss(tape, target, warped, &mask, cp)?;
    let smoothness = smoothness_loss(tape, flow, cp)?;
    let total = tape.add(photometric, tape.scale(smoothness, zeta))?;
    Ok(ReconLoss {
        total,
        photometric,
        smoothness,
    })
}

/// Five 3x3 conv layers with dense connections: layer k consumes the
/// channel-concatenation of the module input and all previous outputs. The
/// final layer emits 2 channels (U, V) with no activation and starts at
/// zero so training begins from the identity warp.
pub struct FlowEstimator {
    pub in_channels: usize,
    pub growth: usize,
    layers: Vec<(ParamId, ParamId)>,
}

impl FlowEstimator {
    pub const NUM_LAYERS: usize = 5;

    pub fn register(
        store: &mut ParamStore,
        tag: StageTag,
        in_channels: usize,
        growth: usize,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(Self::NUM_LAYERS);
        for k in 0..Self::NUM_LAYERS {
            let c_in = in_channels + k * growth;
            let last = k == Self::NUM_LAYERS - 1;
            let c_out = if last { 2 } else { growth };
            let w = if last {
                Tensor::zeros(&[c_out, c_in, 3, 3])
            } else {
                kaiming_conv3x3(c_out, c_in, rng)
            };
            let wid = store.register(&format!("{prefix}.l{}.w", k + 1), tag, w);
            let bid = store.register(&format!("{prefix}.l{}.b", k + 1), tag, Tensor::zeros(&[c_out]));
            layers.push((wid, bid));
        }
        FlowEstimator {
            in_channels,
            growth,
            layers,
        }
    }

    /// Estimate a flow field from a feature clip (B, C_in, T, H, W).
    pub fn forward(&self, tape: &Tape, bind: &Binding, features: Var) -> Result<Var> {
        let got = tape.value(features).dims5()?.1;
        if got != self.in_channels {
            return Err(HcmlError::shape(
                "FlowEstimator::forward",
                format!("{} channels", self.in_channels),
                format!("{got} channels"),
            ));
        }
        let mut feats = vec![features];
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            let input = if feats.len() == 1 {
                feats[0]
            } else {
                tape.concat_channels(&feats)?
            };
            let y = tape.conv3x3(input, bind.var(w), bind.var(b), 1)?;
            if k + 1 < Self::NUM_LAYERS {
                feats.push(tape.relu(y));
            } else {
                return Ok(y);
            }
        }
        unreachable!()
    }

    /// Shape of the last layer's weight, exposed for tests of the dense
    /// connectivity arithmetic.
    pub fn final_layer_weight<'s>(&self, store: &'s ParamStore) -> &'s Tensor {
        store.get(self.layers[Self::NUM_LAYERS - 1].0)
    }
}

pub(crate) fn kaiming_conv3x3(c_out: usize, c_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (c_in * 9) as f64).sqrt();
    Tensor::uniform(&[c_out, c_in, 3, 3], -bound, bound, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rho0() -> f64 {
        CharbonnierParams::default().rho(0.0)
    }

    #[test]
    fn charbonnier_value_at_zero() {
        // (eps^2)^alpha = 10^(-2.7)
        assert!((rho0() - 10f64.powf(-2.7)).abs() < 1e-12);
        assert!((rho0() - 1.995262e-3).abs() < 1e-8);
    }

    #[test]
    fn charbonnier_is_even_increasing_bounded_below() {
        let cp = CharbonnierParams::default();
        let mut prev = cp.rho(0.0);
        for i in 1..100 {
            let z = i as f64 * 0.05;
            assert!((cp.rho(z) - cp.rho(-z)).abs() < 1e-15);
            assert!(cp.rho(z) > prev);
            assert!(cp.rho(z) >= cp.rho(0.0));
            prev = cp.rho(z);
        }
    }

    #[test]
    fn zero_flow_warp_is_identity_with_full_mask() {
        let mut r = rng(1);
        let src = Tensor::uniform(&[2, 3, 2, 5, 6], 0.0, 1.0, &mut r);
        let flow = Tensor::zeros(&[2, 2, 2, 5, 6]);
        let (warped, mask) = bilinear_warp(&src, &flow).unwrap();
        assert_eq!(warped, src);
        assert!(mask.tensor().data().iter().all(|&m| m == 1.0));
    }

    #[test]
    fn integer_flow_matches_direct_indexing() {
        let mut r = rng(2);
        let (h, w) = (6, 7);
        let src = Tensor::uniform(&[1, 2, 1, h, w], 0.0, 1.0, &mut r);
        for _ in 0..20 {
            let du = r.gen_range(-3i64..=3) as f64;
            let dv = r.gen_range(-3i64..=3) as f64;
            let mut flow = Tensor::zeros(&[1, 2, 1, h, w]);
            for p in 0..h * w {
                flow.data_mut()[p] = du;
                flow.data_mut()[h * w + p] = dv;
            }
            let (warped, mask) = bilinear_warp(&src, &flow).unwrap();
            for c in 0..2 {
                for y in 0..h {
                    for x in 0..w {
                        let sx = x as i64 + du as i64;
                        let sy = y as i64 + dv as i64;
                        let inside = sx >= 0 && sx < w as i64 && sy >= 0 && sy < h as i64;
                        assert_eq!(mask.tensor().at5(0, 0, 0, y, x) == 1.0, inside);
                        let want = if inside {
                            src.at5(0, c, 0, sy as usize, sx as usize)
                        } else {
                            0.0
                        };
                        assert_eq!(warped.at5(0, c, 0, y, x), want);
                    }
                }
            }
        }
    }

    #[test]
    fn translated_pair_reconstructs_interior() {
        let mut r = rng(3);
        let (h, w) = (8, 8);
        // frame A random; frame B = A translated left by 1 (content moves left),
        // so warping B with U = +1 ... careful: we reconstruct A from B with
        // A(x) = B(x + U). B(x) = A(x + 1) means U = -1... build directly:
        // B(x, y) = A(x - 1, y) (moved right). Then A(x) = B(x + 1): U = +1.
        let a = Tensor::uniform(&[1, 1, 1, h, w], 0.0, 1.0, &mut r);
        let mut b = Tensor::zeros(&[1, 1, 1, h, w]);
        for y in 0..h {
            for x in 1..w {
                let v = a.at5(0, 0, 0, y, x - 1);
                let idx = b.idx5(0, 0, 0, y, x);
                b.data_mut()[idx] = v;
            }
        }
        let mut flow = Tensor::zeros(&[1, 2, 1, h, w]);
        for p in 0..h * w {
            flow.data_mut()[p] = 1.0;
        }
        let (warped, _) = bilinear_warp(&b, &flow).unwrap();
        for y in 0..h {
            for x in 0..w - 1 {
                assert!((warped.at5(0, 0, 0, y, x) - a.at5(0, 0, 0, y, x)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn far_out_of_bounds_flow_masks_out() {
        let src = Tensor::full(&[1, 1, 1, 4, 4], 0.5);
        let mut flow = Tensor::zeros(&[1, 2, 1, 4, 4]);
        for p in 0..16 {
            flow.data_mut()[p] = 10.0;
        }
        let (warped, mask) = bilinear_warp(&src, &flow).unwrap();
        assert!(mask.tensor().data().iter().all(|&m| m == 0.0));
        assert!(warped.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn photometric_examples() {
        let cp = CharbonnierParams::default();
        let mut r = rng(4);
        let target = Tensor::uniform(&[1, 3, 2, 4, 4], 0.0, 1.0, &mut r);

        // perfect reconstruction, full mask -> rho(0)
        let tape = Tape::new();
        let tv = tape.constant(target.clone());
        let wv = tape.constant(target.clone());
        let mask = ValidityMask(Tensor::full(&[1, 1, 2, 4, 4], 1.0));
        let loss = photometric_loss(&tape, tv, wv, &mask, cp).unwrap();
        assert!((tape.value(loss).scalar_value() - rho0()).abs() < 1e-12);

        // empty mask -> 0
        let mask0 = ValidityMask(Tensor::zeros(&[1, 1, 2, 4, 4]));
        let loss0 = photometric_loss(&tape, tv, wv, &mask0, cp).unwrap();
        assert_eq!(tape.value(loss0).scalar_value(), 0.0);

        // constant error 0.1 -> (0.01 + 1e-6)^0.45, matching the direct route
        let warped = target.map(|v| v - 0.1);
        let wv2 = tape.constant(warped.clone());
        let loss2 = photometric_loss(&tape, tv, wv2, &mask, cp).unwrap();
        let want = (0.01f64 + 1e-6).powf(0.45);
        assert!((tape.value(loss2).scalar_value() - want).abs() < 1e-12);
        let direct = photometric_loss_value(&target, &warped, &mask, cp).unwrap();
        assert!((tape.value(loss2).scalar_value() - direct).abs() < 1e-14);
    }

    #[test]
    fn smoothness_examples() {
        let cp = CharbonnierParams::default();
        let (h, w) = (5, 6);

        // constant flow -> 4 * rho(0), and invariant to global shifts
        let tape = Tape::new();
        let flow = tape.constant(Tensor::full(&[1, 2, 2, h, w], 1.7));
        let loss = smoothness_loss(&tape, flow, cp).unwrap();
        assert!((tape.value(loss).scalar_value() - 4.0 * rho0()).abs() < 1e-12);

        // U(x, y) = x, V = 0 -> rho(1) + 3 rho(0)
        let mut f = Tensor::zeros(&[1, 2, 1, h, w]);
        for y in 0..h {
            for x in 0..w {
                let idx = f.idx5(0, 0, 0, y, x);
                f.data_mut()[idx] = x as f64;
            }
        }
        let fv = tape.constant(f.clone());
        let loss2 = smoothness_loss(&tape, fv, cp).unwrap();
        let want = cp.rho(1.0) + 3.0 * rho0();
        assert!((tape.value(loss2).scalar_value() - want).abs() < 1e-12);
        assert!((cp.rho(1.0) - 1.0f64.powf(0.45) * (1.0 + 1e-6f64).powf(0.45)).abs() < 1e-9);

        // translation invariance
        let shifted = tape.constant(f.map(|v| v + 3.25));
        let loss3 = smoothness_loss(&tape, shifted, cp).unwrap();
        assert!((tape.value(loss2).scalar_value() - tape.value(loss3).scalar_value()).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_loss_composition() {
        let cp = CharbonnierParams::default();
        let mut r = rng(5);
        // static clip, zero flow -> rho(0) + zeta * 4 rho(0)
        let one = Tensor::uniform(&[1, 3, 1, 4, 4], 0.0, 1.0, &mut r);
        let mut data = Vec::new();
        for c in 0..3 {
            let f = &one.data()[c * 16..(c + 1) * 16];
            for _ in 0..3 {
                data.extend_from_slice(f);
            }
        }
        let clip = Tensor::new(vec![1, 3, 3, 4, 4], data).unwrap();
        let zeta = 0.1;
        let tape = Tape::new();
        let frames = tape.constant(clip.clone());
        let flow = tape.constant(Tensor::zeros(&[1, 2, 3, 4, 4]));
        let recon = reconstruction_loss(&tape, frames, flow, cp, zeta).unwrap();
        let want = rho0() + zeta * 4.0 * rho0();
        assert!((tape.value(recon.total).scalar_value() - want).abs() < 1e-12);

        // zeta = 0 -> photometric alone
        let recon0 = reconstruction_loss(&tape, frames, flow, cp, 0.0).unwrap();
        let t0 = tape.value(recon0.total).scalar_value();
        let p0 = tape.value(recon0.photometric).scalar_value();
        assert!((t0 - p0).abs() < 1e-15);

        // T < 2 rejected
        let tape2 = Tape::new();
        let short = tape2.constant(Tensor::zeros(&[1, 3, 1, 4, 4]));
        let sflow = tape2.constant(Tensor::zeros(&[1, 2, 1, 4, 4]));
        assert!(reconstruction_loss(&tape2, short, sflow, cp, zeta).is_err());
    }

    #[test]
    fn reconstruction_grad_check_wrt_flow() {
        // Central differences lose accuracy where the Charbonnier curvature
        // blows up (|z| near eps), so the instance keeps photometric diffs
        // and flow gradients bounded away from zero, and flow fractional
        // parts away from the integer grid lines of the warp.
        let mut r = rng(6);
        let cp = CharbonnierParams::default();
        let (t, h, w) = (3, 5, 5);
        let mut frames = Tensor::zeros(&[1, 2, t, h, w]);
        for ci in 0..2 {
            for ti in 0..t {
                for p in 0..h * w {
                    let lo = ti % 2 == 0;
                    let band = if lo { (0.0, 0.3) } else { (0.7, 1.0) };
                    let idx = ((ci * t) + ti) * h * w + p;
                    frames.data_mut()[idx] = r.gen_range(band.0..band.1);
                }
            }
        }
        let mut flow = Tensor::zeros(&[1, 2, t, h, w]);
        for ci in 0..2 {
            for ti in 0..t {
                for y in 0..h {
                    for x in 0..w {
                        let idx = flow.idx5(0, ci, ti, y, x);
                        let ramp = 0.25 + 0.05 * x as f64 + 0.03 * y as f64;
                        flow.data_mut()[idx] = ramp + r.gen_range(-0.005..0.005);
                    }
                }
            }
        }
        let report = grad_check(
            "reconstruction_loss",
            &[("flow".into(), flow)],
            1e-5,
            1e-4,
            move |tape, vars| {
                let f = tape.constant(frames.clone());
                Ok(reconstruction_loss(tape, f, vars[0], cp, 0.1)?.total)
            },
        );
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn estimator_dense_channels_and_zero_init() {
        let mut r = rng(7);
        let mut store = ParamStore::new();
        let est = FlowEstimator::register(&mut store, StageTag::Level0, 16, 16, "flow", &mut r);
        // layer-5 input channels = 16 + 4 * 16 = 80
        assert_eq!(est.final_layer_weight(&store).shape(), &[2, 80, 3, 3]);

        let tape = Tape::new();
        let bind = store.bind(&tape, |_| false);
        let x = tape.constant(Tensor::uniform(&[2, 16, 3, 6, 6], -1.0, 1.0, &mut r));
        let flow = est.forward(&tape, &bind, x).unwrap();
        assert_eq!(tape.value(flow).shape(), &[2, 2, 3, 6, 6]);
        // zero-initialized output layer -> zero flow everywhere
        assert!(tape.value(flow).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_translation_recovered_by_grid_search() {
        // On a synthetic pair translating by (u*, v*), the integer constant
        // flow minimizing the photometric loss is (u*, v*).
        let mut r = rng(8);
        let cp = CharbonnierParams::default();
        let (h, w) = (9, 9);
        for &(du, dv) in &[(1i64, 0i64), (-1, 1), (2, -1), (0, 2)] {
            // textured frame A, frame B = A shifted by (du, dv)
            let a = Tensor::uniform(&[1, 1, 1, h, w], 0.0, 1.0, &mut r);
            let mut b = Tensor::zeros(&[1, 1, 1, h, w]);
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = (y as i64 - dv, x as i64 - du);
                    if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                        let v = a.at5(0, 0, 0, sy as usize, sx as usize);
                        let idx = b.idx5(0, 0, 0, y, x);
                        b.data_mut()[idx] = v;
                    }
                }
            }
            let mut best = (f64::INFINITY, (99i64, 99i64));
            for cu in -3..=3i64 {
                for cv in -3..=3i64 {
                    let mut flow = Tensor::zeros(&[1, 2, 1, h, w]);
                    for p in 0..h * w {
                        flow.data_mut()[p] = cu as f64;
                        flow.data_mut()[h * w + p] = cv as f64;
                    }
                    let (warped, mask) = bilinear_warp(&b, &flow).unwrap();
                    let loss = photometric_loss_value(&a, &warped, &mask, cp).unwrap();
                    if loss < best.0 {
                        best = (loss, (cu, cv));
                    }
                }
            }
            assert_eq!(best.1, (du, dv), "failed for ({du},{dv})");
        }
    }
}
