//! Prime motion block: cost volumes over adjacent feature pairs, channel
//! reduction, and residual fusion back into the backbone.
//!
//! A cost volume compares the feature vector at each position of frame t
//! with feature vectors inside a displacement window of frame t+1 using
//! cosine similarity. The displacement enumeration is row-major over
//! (dy, dx) from most-negative to most-positive; this fixed order defines
//! the channel semantics of saved checkpoints.

use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::error::{HcmlError, Result};
use crate::params::{Binding, ParamId, ParamStore, StageTag};
use crate::tensor::{self, Tensor, COSINE_NORM_EPS};

/// Search window of a cost volume layer.
#[derive(Clone, Copy, Debug)]
pub struct CostVolumeParams {
    /// Maximum displacement in pixels.
    pub max_displacement: usize,
    /// Striding factor over displacements.
    pub stride: usize,
    /// Matching cost assigned to out-of-boundary targets. Neutral cosine (0)
    /// rather than -1 so borders are not penalized.
    pub boundary_cost: f64,
}

impl CostVolumeParams {
    pub fn new(max_displacement: usize, stride: usize) -> Result<Self> {
        if stride < 1 {
            return Err(HcmlError::InvalidArg(
                "cost volume stride must be >= 1".into(),
            ));
        }
        Ok(CostVolumeParams {
            max_displacement,
            stride,
            boundary_cost: 0.0,
        })
    }

    /// Displacement steps per direction: floor(d / s).
    pub fn steps(&self) -> usize {
        self.max_displacement / self.stride
    }

    /// Output channel count M = (2 * floor(d/s) + 1)^2.
    pub fn channels(&self) -> usize {
        let k = 2 * self.steps() + 1;
        k * k
    }

    /// Displacements (dy, dx) in channel order.
    pub fn offsets(&self) -> Vec<(i64, i64)> {
        let k = self.steps() as i64;
        let s = self.stride as i64;
        let mut out = Vec::with_capacity(self.channels());
        for iy in -k..=k {
            for ix in -k..=k {
                out.push((iy * s, ix * s));
            }
        }
        out
    }
}

/// Dimensions of one pyramid level's motion block.
#[derive(Clone, Copy, Debug)]
pub struct LevelSpec {
    pub level: usize,
    pub in_channels: usize,
    /// Channel reduction factor: the block works on C/beta channels.
    pub beta: usize,
    /// Output motion-feature channels.
    pub out_channels: usize,
    pub cost_volume: CostVolumeParams,
}

impl LevelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.beta == 0 || self.in_channels % self.beta != 0 {
            return Err(HcmlError::InvalidArg(format!(
                "level {}: channels {} not divisible by beta {}",
                self.level, self.in_channels, self.beta
            )));
        }
        if self.in_channels / self.beta == 0 {
            return Err(HcmlError::InvalidArg(format!(
                "level {}: reduced channels must be >= 1",
                self.level
            )));
        }
        Ok(())
    }

    pub fn reduced_channels(&self) -> usize {
        self.in_channels / self.beta
    }
}

/// Re-organize a feature clip into adjacent pairs, replicating the last
/// frame so the pair count (and downstream temporal extent) stays T.
pub fn build_pairs(features: &Tensor) -> Result<Vec<(Tensor, Tensor)>> {
    let (_, _, t, _, _) = features.dims5()?;
    (0..t)
        .map(|ti| {
            let a = frame(features, ti)?;
            let b = frame(features, (ti + 1).min(t - 1))?;
            Ok((a, b))
        })
        .collect()
}

/// Extract frame t as a (B, C, H, W) tensor.
pub fn frame(features: &Tensor, t: usize) -> Result<Tensor> {
    let (b, c, tt, h, w) = features.dims5()?;
    if t >= tt {
        return Err(HcmlError::InvalidArg(format!("frame {t} out of range T = {tt}")));
    }
    let mut out = Tensor::zeros(&[b, c, h, w]);
    let hw = h * w;
    for bi in 0..b {
        for ci in 0..c {
            let src = features.idx5(bi, ci, t, 0, 0);
            let dst = (bi * c + ci) * hw;
            out.data_mut()[dst..dst + hw].copy_from_slice(&features.data()[src..src + hw]);
        }
    }
    Ok(out)
}

/// Frame layout used by the cost volume kernels: positions outer, channels
/// inner, so every feature vector is contiguous.
fn to_position_major(frame: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * hw];
    for ci in 0..c {
        for p in 0..hw {
            out[p * c + ci] = frame[ci * hw + p];
        }
    }
    out
}

/// Cost volume between two single (C, H, W) feature maps.
pub fn cost_volume(f_t: &Tensor, f_next: &Tensor, params: &CostVolumeParams) -> Result<Tensor> {
    let (c, h, w) = f_t.dims3()?;
    if f_t.shape() != f_next.shape() {
        return Err(HcmlError::shape(
            "cost_volume",
            format!("{:?}", f_t.shape()),
            format!("{:?}", f_next.shape()),
        ));
    }
    let m = params.channels();
    let offsets = params.offsets();
    let hw = h * w;
    let a = to_position_major(f_t.data(), c, hw);
    let b = to_position_major(f_next.data(), c, hw);
    let mut out = Tensor::zeros(&[m, h, w]);
    for (mi, &(dy, dx)) in offsets.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let ty = y as i64 + dy;
                let tx = x as i64 + dx;
                let v = if ty < 0 || ty >= h as i64 || tx < 0 || tx >= w as i64 {
                    params.boundary_cost
                } else {
                    let pu = (y * w + x) * c;
                    let pv = (ty as usize * w + tx as usize) * c;
                    tensor::cosine_sim_slices(&a[pu..pu + c], &b[pv..pv + c], COSINE_NORM_EPS)
                };
                out.data_mut()[(mi * h + y) * w + x] = v;
            }
        }
    }
    Ok(out)
}

/// Cost volumes for a whole clip: pairs (t, t+1) with the last frame
/// replicated, stacked over t. (B, C, T, H, W) -> (B, M, T, H, W).
pub fn cost_volume_clip(features: &Tensor, params: &CostVolumeParams) -> Result<Tensor> {
    let (b, c, t, h, w) = features.dims5()?;
    let m = params.channels();
    let offsets = params.offsets();
    let hw = h * w;
    let mut out = Tensor::zeros(&[b, m, t, h, w]);
    out.data_mut()
        .par_chunks_mut(m * t * hw)
        .zip(features.data().par_chunks(c * t * hw))
        .for_each(|(out_b, in_b)| {
            // position-major copies of every frame of this clip
            let frames: Vec<Vec<f64>> = (0..t)
                .map(|ti| {
                    let mut f = vec![0.0; c * hw];
                    for ci in 0..c {
                        let src = (ci * t + ti) * hw;
                        for p in 0..hw {
                            f[p * c + ci] = in_b[src + p];
                        }
                    }
                    f
                })
                .collect();
            for ti in 0..t {
                let t2 = (ti + 1).min(t - 1);
                let (fa, fb) = (&frames[ti], &frames[t2]);
                for (mi, &(dy, dx)) in offsets.iter().enumerate() {
                    for y in 0..h {
                        let ty = y as i64 + dy;
                        let row_ok = ty >= 0 && ty < h as i64;
                        for x in 0..w {
                            let tx = x as i64 + dx;
                            let v = if !row_ok || tx < 0 || tx >= w as i64 {
                                params.boundary_cost
                            } else {
                                let pu = (y * w + x) * c;
                                let pv = (ty as usize * w + tx as usize) * c;
                                tensor::cosine_sim_slices(
                                    &fa[pu..pu + c],
                                    &fb[pv..pv + c],
                                    COSINE_NORM_EPS,
                                )
                            };
                            out_b[((mi * t + ti) * h + y) * w + x] = v;
                        }
                    }
                }
            }
        });
    Ok(out)
}

pub(crate) fn cost_volume_clip_bwd(
    features: &Tensor,
    params: &CostVolumeParams,
    gout: &Tensor,
) -> Tensor {
    let (_, c, t, h, w) = features.dims5().unwrap();
    let offsets = params.offsets();
    let m = params.channels();
    let hw = h * w;
    let mut gin = Tensor::zeros(features.shape());
    gin.data_mut()
        .par_chunks_mut(c * t * hw)
        .zip(features.data().par_chunks(c * t * hw))
        .zip(gout.data().par_chunks(m * t * hw))
        .for_each(|((gin_b, in_b), go_b)| {
            let frames: Vec<Vec<f64>> = (0..t)
                .map(|ti| {
                    let mut f = vec![0.0; c * hw];
                    for ci in 0..c {
                        let src = (ci * t + ti) * hw;
                        for p in 0..hw {
                            f[p * c + ci] = in_b[src + p];
                        }
                    }
                    f
                })
                .collect();
            let mut gframes: Vec<Vec<f64>> = (0..t).map(|_| vec![0.0; c * hw]).collect();
            for ti in 0..t {
                let t2 = (ti + 1).min(t - 1);
                for (mi, &(dy, dx)) in offsets.iter().enumerate() {
                    for y in 0..h {
                        let ty = y as i64 + dy;
                        if ty < 0 || ty >= h as i64 {
                            continue;
                        }
                        for x in 0..w {
                            let tx = x as i64 + dx;
                            if tx < 0 || tx >= w as i64 {
                                continue;
                            }
                            let g = go_b[((mi * t + ti) * h + y) * w + x];
                            if g == 0.0 {
                                continue;
                            }
                            let pu = (y * w + x) * c;
                            let pv = (ty as usize * w + tx as usize) * c;
                            // The replicated last pair reads the same frame
                            // twice; accumulate both sides separately.
                            if ti == t2 {
                                let (u, v) = (frames[ti][pu..pu + c].to_vec(), frames[ti][pv..pv + c].to_vec());
                                let gf = &mut gframes[ti];
                                tensor::cosine_sim_bwd_acc(
                                    &u,
                                    &v,
                                    COSINE_NORM_EPS,
                                    g,
                                    Some(&mut gf[pu..pu + c]),
                                    None,
                                );
                                tensor::cosine_sim_bwd_acc(
                                    &u,
                                    &v,
                                    COSINE_NORM_EPS,
                                    g,
                                    None,
                                    Some(&mut gf[pv..pv + c]),
                                );
                            } else {
                                let (left, right) = gframes.split_at_mut(t2);
                                tensor::cosine_sim_bwd_acc(
                                    &frames[ti][pu..pu + c],
                                    &frames[t2][pv..pv + c],
                                    COSINE_NORM_EPS,
                                    g,
                                    Some(&mut left[ti][pu..pu + c]),
                                    Some(&mut right[0][pv..pv + c]),
                                );
                            }
                        }
                    }
                }
            }
            // back to channel-major
            for ti in 0..t {
                for ci in 0..c {
                    let dst = (ci * t + ti) * hw;
                    for p in 0..hw {
                        gin_b[dst + p] += gframes[ti][p * c + ci];
                    }
                }
            }
        });
    gin
}

/// Differentiable clip-level cost volume.
pub fn cost_volume_op(tape: &Tape, features: Var, params: CostVolumeParams) -> Result<Var> {
    let value = cost_volume_clip(&tape.value(features), &params)?;
    Ok(tape.push_op(value, &[features], Box::new(move |ctx| {
        vec![ctx.needs[0].then(|| cost_volume_clip_bwd(&ctx.parents[0], &params, ctx.out_grad))]
    })))
}

/// Prime motion block: reduce channels, compute per-pair cost volumes,
/// concatenate with the reduced features, and combine with a pointwise conv.
pub struct PrimeMotionBlock {
    pub spec: LevelSpec,
    reduce_w: ParamId,
    reduce_b: ParamId,
    post_w: ParamId,
    post_b: ParamId,
    post_scale: ParamId,
    fuse_w: ParamId,
    fuse_b: ParamId,
}

impl PrimeMotionBlock {
    pub fn register(
        store: &mut ParamStore,
        tag: StageTag,
        spec: LevelSpec,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let red = spec.reduced_channels();
        let m = spec.cost_volume.channels();
        let cat = m + red;
        let reduce_w = store.register(
            &format!("{prefix}.reduce.w"),
            tag,
            kaiming_matrix(red, spec.in_channels, rng),
        );
        let reduce_b = store.register(&format!("{prefix}.reduce.b"), tag, Tensor::zeros(&[red]));
        let post_w = store.register(
            &format!("{prefix}.post.w"),
            tag,
            kaiming_matrix(spec.out_channels, cat, rng),
        );
        let post_b = store.register(&format!("{prefix}.post.b"), tag, Tensor::zeros(&[spec.out_channels]));
        let post_scale = store.register(
            &format!("{prefix}.post.scale"),
            tag,
            Tensor::full(&[spec.out_channels], 1.0),
        );
        // Zero-initialized fusion keeps the residual path inert at start.
        let fuse_w = store.register(
            &format!("{prefix}.fuse.w"),
            tag,
            Tensor::zeros(&[spec.in_channels, spec.out_channels]),
        );
        let fuse_b = store.register(&format!("{prefix}.fuse.b"), tag, Tensor::zeros(&[spec.in_channels]));
        Ok(PrimeMotionBlock {
            spec,
            reduce_w,
            reduce_b,
            post_w,
            post_b,
            post_scale,
            fuse_w,
            fuse_b,
        })
    }

    /// Motion features P^l for a feature clip (B, C^l, T, H, W).
    pub fn forward(&self, tape: &Tape, bind: &Binding, features: Var) -> Result<Var> {
        let reduced = tape.conv1x1x1(features, bind.var(self.reduce_w), bind.var(self.reduce_b))?;
        let cv = cost_volume_op(tape, reduced, self.spec.cost_volume)?;
        let cat = tape.concat_channels(&[cv, reduced])?;
        let post = tape.conv1x1x1(cat, bind.var(self.post_w), bind.var(self.post_b))?;
        let scaled = tape.channel_scale(post, bind.var(self.post_scale))?;
        Ok(tape.relu(scaled))
    }

    /// Residual fusion Z^l = F^l + g^l(P^l).
    pub fn fuse(&self, tape: &Tape, bind: &Binding, f_l: Var, p_l: Var) -> Result<Var> {
        fuse_residual(tape, f_l, p_l, bind.var(self.fuse_w), bind.var(self.fuse_b))
    }
}

/// Z^l = F^l + g^l(P^l) where g^l is a pointwise conv matching channels.
pub fn fuse_residual(tape: &Tape, f_l: Var, p_l: Var, g_w: Var, g_b: Var) -> Result<Var> {
    let g = tape.conv1x1x1(p_l, g_w, g_b)?;
    tape.add(f_l, g)
}

/// Fan-in scaled uniform init for pointwise conv / linear weights.
pub(crate) fn kaiming_matrix(c_out: usize, c_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / c_in as f64).sqrt();
    Tensor::uniform(&[c_out, c_in], -bound, bound, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Naive five-nested-loop reference, independent of the optimized path.
    fn naive_cost_volume(f_t: &Tensor, f_next: &Tensor, params: &CostVolumeParams) -> Tensor {
        let (c, h, w) = f_t.dims3().unwrap();
        let offsets = params.offsets();
        let mut out = Tensor::zeros(&[params.channels(), h, w]);
        for (mi, &(dy, dx)) in offsets.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    let (ty, tx) = (y as i64 + dy, x as i64 + dx);
                    let v = if ty < 0 || ty >= h as i64 || tx < 0 || tx >= w as i64 {
                        params.boundary_cost
                    } else {
                        let u: Vec<f64> = (0..c).map(|ci| f_t.data()[(ci * h + y) * w + x]).collect();
                        let vv: Vec<f64> = (0..c)
                            .map(|ci| f_next.data()[(ci * h + ty as usize) * w + tx as usize])
                            .collect();
                        tensor::cosine_sim_slices(&u, &vv, COSINE_NORM_EPS)
                    };
                    out.data_mut()[(mi * h + y) * w + x] = v;
                }
            }
        }
        out
    }

    #[test]
    fn channel_count_formula() {
        assert_eq!(CostVolumeParams::new(3, 1).unwrap().channels(), 49);
        assert_eq!(CostVolumeParams::new(4, 2).unwrap().channels(), 25);
        assert_eq!(CostVolumeParams::new(0, 1).unwrap().channels(), 1);
        assert!(CostVolumeParams::new(1, 0).is_err());
    }

    #[test]
    fn offsets_are_row_major_negative_to_positive() {
        let p = CostVolumeParams::new(1, 1).unwrap();
        assert_eq!(
            p.offsets(),
            vec![
                (-1, -1), (-1, 0), (-1, 1),
                (0, -1), (0, 0), (0, 1),
                (1, -1), (1, 0), (1, 1),
            ]
        );
    }

    #[test]
    fn self_similarity_at_zero_displacement() {
        let mut r = rng(1);
        let f = Tensor::uniform(&[4, 6, 6], 0.1, 1.0, &mut r);
        let p = CostVolumeParams::new(2, 1).unwrap();
        let cv = cost_volume(&f, &f, &p).unwrap();
        let zero_channel = p.channels() / 2;
        let (_, h, w) = f.dims3().unwrap();
        for y in 0..h {
            for x in 0..w {
                assert!((cv.data()[(zero_channel * h + y) * w + x] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn d_zero_is_consecutive_cosine_map() {
        let mut r = rng(2);
        let f0 = Tensor::uniform(&[3, 5, 5], -1.0, 1.0, &mut r);
        let f1 = Tensor::uniform(&[3, 5, 5], -1.0, 1.0, &mut r);
        let p = CostVolumeParams::new(0, 1).unwrap();
        let cv = cost_volume(&f0, &f1, &p).unwrap();
        assert_eq!(cv.shape(), &[1, 5, 5]);
        for y in 0..5 {
            for x in 0..5 {
                let u: Vec<f64> = (0..3).map(|c| f0.data()[(c * 5 + y) * 5 + x]).collect();
                let v: Vec<f64> = (0..3).map(|c| f1.data()[(c * 5 + y) * 5 + x]).collect();
                let want = tensor::cosine_sim_slices(&u, &v, COSINE_NORM_EPS);
                assert!((cv.data()[(y * 5) + x + 0] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shifted_content_lights_up_matching_channel() {
        let mut r = rng(3);
        let (c, h, w) = (3, 6, 6);
        let f0 = Tensor::uniform(&[c, h, w], 0.1, 1.0, &mut r);
        // F_{t+1}(x) = F_t(x - 1): content moved right by one pixel
        let mut f1 = Tensor::zeros(&[c, h, w]);
        for ci in 0..c {
            for y in 0..h {
                for x in 1..w {
                    f1.data_mut()[(ci * h + y) * w + x] = f0.data()[(ci * h + y) * w + x - 1];
                }
            }
        }
        let p = CostVolumeParams::new(1, 1).unwrap();
        let cv = cost_volume(&f0, &f1, &p).unwrap();
        // channel for (dy, dx) = (0, +1) is index 5 in the 3x3 ordering
        let mi = 5;
        for y in 0..h {
            for x in 0..w - 1 {
                assert!(
                    (cv.data()[(mi * h + y) * w + x] - 1.0).abs() < 1e-12,
                    "mismatch at ({y},{x})"
                );
            }
        }
    }

    #[test]
    fn matches_naive_reference() {
        let mut r = rng(4);
        for (d, s) in [(0, 1), (1, 1), (3, 1), (4, 2)] {
            let p = CostVolumeParams::new(d, s).unwrap();
            let f0 = Tensor::uniform(&[4, 8, 8], -1.0, 1.0, &mut r);
            let f1 = Tensor::uniform(&[4, 8, 8], -1.0, 1.0, &mut r);
            let fast = cost_volume(&f0, &f1, &p).unwrap();
            let slow = naive_cost_volume(&f0, &f1, &p);
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }

    #[test]
    fn clip_kernel_matches_pair_kernel_with_replication() {
        let mut r = rng(5);
        let feats = Tensor::uniform(&[2, 3, 4, 5, 5], -1.0, 1.0, &mut r);
        let p = CostVolumeParams::new(1, 1).unwrap();
        let clip = cost_volume_clip(&feats, &p).unwrap();
        let pairs = build_pairs(&feats).unwrap();
        assert_eq!(pairs.len(), 4);
        for (ti, (fa, fb)) in pairs.iter().enumerate() {
            for bi in 0..2 {
                let fa_b = single(fa, bi);
                let fb_b = single(fb, bi);
                let want = cost_volume(&fa_b, &fb_b, &p).unwrap();
                for mi in 0..p.channels() {
                    for y in 0..5 {
                        for x in 0..5 {
                            let got = clip.at5(bi, mi, ti, y, x);
                            assert!((got - want.data()[(mi * 5 + y) * 5 + x]).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    fn single(f: &Tensor, b: usize) -> Tensor {
        // (B, C, H, W) -> (C, H, W) for batch b
        let s = f.shape();
        let (c, h, w) = (s[1], s[2], s[3]);
        let per = c * h * w;
        Tensor::new(vec![c, h, w], f.data()[b * per..(b + 1) * per].to_vec()).unwrap()
    }

    #[test]
    fn build_pairs_degenerate_and_replication() {
        let mut r = rng(6);
        let t1 = Tensor::uniform(&[1, 2, 1, 3, 3], 0.1, 1.0, &mut r);
        let pairs = build_pairs(&t1).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].0, pairs[0].1);

        let t4 = Tensor::uniform(&[1, 2, 4, 3, 3], 0.1, 1.0, &mut r);
        let pairs = build_pairs(&t4).unwrap();
        assert_eq!(pairs.len(), 4);
        assert_eq!(pairs[3].0, pairs[3].1);
        assert_eq!(pairs[3].0, frame(&t4, 3).unwrap());

        // replicated pair at zero displacement is exact self-similarity
        let p = CostVolumeParams::new(1, 1).unwrap();
        let cv = cost_volume(&single(&pairs[3].0, 0), &single(&pairs[3].1, 0), &p).unwrap();
        let mid = p.channels() / 2;
        for v in &cv.data()[mid * 9..(mid + 1) * 9] {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn static_clip_zero_displacement_channel_is_one() {
        let mut r = rng(7);
        let one_frame = Tensor::uniform(&[1, 3, 1, 4, 4], 0.1, 1.0, &mut r);
        // tile to 5 identical frames
        let mut data = Vec::new();
        let (_, c, _, h, w) = one_frame.dims5().unwrap();
        for ci in 0..c {
            let f = &one_frame.data()[ci * h * w..(ci + 1) * h * w];
            for _ in 0..5 {
                data.extend_from_slice(f);
            }
        }
        let clip = Tensor::new(vec![1, c, 5, h, w], data).unwrap();
        let p = CostVolumeParams::new(2, 1).unwrap();
        let cv = cost_volume_clip(&clip, &p).unwrap();
        let mid = p.channels() / 2;
        for ti in 0..5 {
            for y in 0..h {
                for x in 0..w {
                    assert!((cv.at5(0, mid, ti, y, x) - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pmb_shapes_and_temporal_preservation() {
        let mut r = rng(8);
        let spec = LevelSpec {
            level: 1,
            in_channels: 16,
            beta: 4,
            out_channels: 8,
            cost_volume: CostVolumeParams::new(3, 1).unwrap(),
        };
        assert_eq!(spec.reduced_channels(), 4);
        assert_eq!(spec.cost_volume.channels() + spec.reduced_channels(), 53);

        let mut store = ParamStore::new();
        let pmb = PrimeMotionBlock::register(&mut store, StageTag::Level1, spec, "pmb1", &mut r).unwrap();
        assert_eq!(store.get(pmb.post_w).shape(), &[8, 53]);

        for t in [1usize, 2, 8] {
            let tape = Tape::new();
            let bind = store.bind(&tape, |_| false);
            let x = tape.constant(Tensor::uniform(&[1, 16, t, 6, 6], -1.0, 1.0, &mut r));
            let p = pmb.forward(&tape, &bind, x).unwrap();
            assert_eq!(tape.value(p).shape(), &[1, 8, t, 6, 6]);
        }
    }

    #[test]
    fn fuse_residual_identity_and_rearrangement() {
        let mut r = rng(9);
        let mut store = ParamStore::new();
        let spec = LevelSpec {
            level: 1,
            in_channels: 8,
            beta: 2,
            out_channels: 4,
            cost_volume: CostVolumeParams::new(1, 1).unwrap(),
        };
        let pmb = PrimeMotionBlock::register(&mut store, StageTag::Level1, spec, "pmb", &mut r).unwrap();

        let f_val = Tensor::uniform(&[1, 8, 2, 4, 4], -1.0, 1.0, &mut r);
        let p_val = Tensor::uniform(&[1, 4, 2, 4, 4], -1.0, 1.0, &mut r);

        // zero fusion conv (the init) -> Z = F bit for bit
        {
            let tape = Tape::new();
            let bind = store.bind(&tape, |_| false);
            let f = tape.constant(f_val.clone());
            let p = tape.constant(p_val.clone());
            let z = pmb.fuse(&tape, &bind, f, p).unwrap();
            assert_eq!(*tape.value(z), f_val);
        }

        // random fusion conv: Z - F == g(P), and F = 0 -> Z = g(P)
        store
            .set_value(pmb.fuse_w, Tensor::uniform(&[8, 4], -1.0, 1.0, &mut r))
            .unwrap();
        store
            .set_value(pmb.fuse_b, Tensor::uniform(&[8], -0.5, 0.5, &mut r))
            .unwrap();
        {
            let tape = Tape::new();
            let bind = store.bind(&tape, |_| false);
            let f = tape.constant(f_val.clone());
            let p = tape.constant(p_val.clone());
            let z = pmb.fuse(&tape, &bind, f, p).unwrap();
            let g = tensor::conv1x1x1(&p_val, store.get(pmb.fuse_w), store.get(pmb.fuse_b)).unwrap();
            let diff = tape.value(z).sub(&f_val).unwrap();
            assert!(diff.max_abs_diff(&g) < 1e-12);

            let tape2 = Tape::new();
            let bind2 = store.bind(&tape2, |_| false);
            let f0 = tape2.constant(Tensor::zeros(&[1, 8, 2, 4, 4]));
            let p2 = tape2.constant(p_val.clone());
            let z2 = pmb.fuse(&tape2, &bind2, f0, p2).unwrap();
            assert!(tape2.value(z2).max_abs_diff(&g) < 1e-12);
        }
    }

    #[test]
    fn cost_volume_scale_invariance_per_position() {
        use rand::Rng as _;
        let mut r = rng(10);
        let feats = Tensor::uniform(&[1, 4, 3, 5, 5], 0.1, 1.0, &mut r);
        let p = CostVolumeParams::new(2, 1).unwrap();
        let base = cost_volume_clip(&feats, &p).unwrap();
        // positive per-position rescale
        let mut scaled = feats.clone();
        let (_, c, t, h, w) = feats.dims5().unwrap();
        for ti in 0..t {
            for y in 0..h {
                for x in 0..w {
                    let s = r.gen_range(0.1..10.0);
                    for ci in 0..c {
                        let idx = scaled.idx5(0, ci, ti, y, x);
                        scaled.data_mut()[idx] *= s;
                    }
                }
            }
        }
        let rescaled = cost_volume_clip(&scaled, &p).unwrap();
        assert!(base.max_abs_diff(&rescaled) < 1e-12);
    }

    #[test]
    fn cost_volume_grad_check() {
        let mut r = rng(11);
        let feats = Tensor::uniform(&[1, 3, 3, 4, 4], 0.2, 1.0, &mut r);
        let p = CostVolumeParams::new(1, 1).unwrap();
        let report = crate::autodiff::grad_check(
            "cost_volume",
            &[("features".into(), feats)],
            1e-5,
            1e-4,
            |tape, vars| {
                let cv = cost_volume_op(tape, vars[0], p)?;
                let sq = tape.mul(cv, cv)?;
                Ok(tape.mean(sq))
            },
        );
        assert!(report.passed, "{report:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        // all entries lie in [-1, 1]
        #[test]
        fn entries_bounded(seed in 0u64..1000, d in 0usize..3, h in 2usize..6, w in 2usize..6) {
            let mut r = rng(seed);
            let f = Tensor::uniform(&[2, 3, 3, h, w], -2.0, 2.0, &mut r);
            let p = CostVolumeParams::new(d, 1).unwrap();
            let cv = cost_volume_clip(&f, &p).unwrap();
            prop_assert!(cv.data().iter().all(|v| v.abs() <= 1.0 + 1e-12));
            prop_assert_eq!(cv.shape()[1], p.channels());
        }
    }
}
