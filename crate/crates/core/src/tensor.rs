//! Dense row-major tensors and the primitive numeric kernels built on them.
//!
//! Everything in the crate computes in `f64`. Tensors are immutable values
//! once constructed; the kernels here are pure functions returning fresh
//! tensors, so they are safe to call from multiple threads.

use rayon::prelude::*;

use crate::error::{HcmlError, Result};

/// Norm threshold below which cosine similarity is defined as 0 instead of
/// dividing by a vanishing norm.
pub const COSINE_NORM_EPS: f64 = 1e-12;

/// Dense N-dimensional array of `f64`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor from a shape and a flat row-major buffer.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(HcmlError::InvalidArg(format!(
                "tensor extents must be >= 1, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(HcmlError::shape(
                "tensor::new",
                format!("{numel} elements for shape {shape:?}"),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Uniform random entries in `[lo, hi)`.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl rand::Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Interpret as (B, C, T, H, W).
    pub fn dims5(&self) -> Result<(usize, usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, t, h, w] => Ok((b, c, t, h, w)),
            _ => Err(HcmlError::shape(
                "dims5",
                "rank-5 tensor (B,C,T,H,W)",
                format!("{:?}", self.shape),
            )),
        }
    }

    /// Interpret as (C, H, W).
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(HcmlError::shape(
                "dims3",
                "rank-3 tensor (C,H,W)",
                format!("{:?}", self.shape),
            )),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(HcmlError::shape(
                "dims2",
                "rank-2 tensor",
                format!("{:?}", self.shape),
            )),
        }
    }

    #[inline]
    pub fn idx5(&self, b: usize, c: usize, t: usize, y: usize, x: usize) -> usize {
        let s = &self.shape;
        ((((b * s[1] + c) * s[2] + t) * s[3] + y) * s[4]) + x
    }

    #[inline]
    pub fn at5(&self, b: usize, c: usize, t: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx5(b, c, t, y, x)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(HcmlError::shape(
                op,
                format!("{:?}", self.shape),
                format!("{:?}", other.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    /// Add `other * c` in place; shapes must already match.
    pub fn axpy(&mut self, c: f64, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += c * b;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Video clip wrapper: a rank-5 tensor (B, C, T, H, W).
#[derive(Clone, Debug)]
pub struct VideoClip(Tensor);

impl VideoClip {
    pub fn new(tensor: Tensor) -> Result<Self> {
        tensor.dims5()?;
        Ok(VideoClip(tensor))
    }

    /// Raw-frame clips: 3 channels, pixel values in [0, 1].
    pub fn raw_frames(tensor: Tensor) -> Result<Self> {
        let (_, c, _, _, _) = tensor.dims5()?;
        if c != 3 {
            return Err(HcmlError::shape("VideoClip::raw_frames", "C = 3", format!("C = {c}")));
        }
        if tensor.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(HcmlError::InvalidArg(
                "raw frame values must lie in [0, 1]".into(),
            ));
        }
        Ok(VideoClip(tensor))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Clips fed to motion operations need at least two frames.
    pub fn check_motion_ready(&self) -> Result<()> {
        let (_, _, t, _, _) = self.0.dims5()?;
        if t < 2 {
            return Err(HcmlError::InvalidArg(format!(
                "motion operations need T >= 2 frames, got T = {t}"
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Primitive kernels (forward + backward). The backward functions return only
// the gradients requested through the `needs` flags to avoid wasted work on
// frozen subgraphs.
// ---------------------------------------------------------------------------

/// Pointwise (1x1x1) convolution: mixes channels, preserves all other extents.
pub fn conv1x1x1(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, c_in, t, h, w) = input.dims5()?;
    let (c_out, wc_in) = weight.dims2()?;
    if wc_in != c_in || bias.shape() != [c_out] {
        return Err(HcmlError::shape(
            "conv1x1x1",
            format!("weight ({c_out},{c_in}), bias ({c_out},) for input {:?}", input.shape()),
            format!("weight {:?}, bias {:?}", weight.shape(), bias.shape()),
        ));
    }
    let sites = t * h * w;
    let mut out = Tensor::zeros(&[b, c_out, t, h, w]);
    out.data
        .par_chunks_mut(c_out * sites)
        .zip(input.data.par_chunks(c_in * sites))
        .for_each(|(out_b, in_b)| {
            for o in 0..c_out {
                let row = &mut out_b[o * sites..(o + 1) * sites];
                row.fill(bias.data[o]);
                for i in 0..c_in {
                    let w_oi = weight.data[o * c_in + i];
                    if w_oi == 0.0 {
                        continue;
                    }
                    let in_row = &in_b[i * sites..(i + 1) * sites];
                    for (r, &v) in row.iter_mut().zip(in_row.iter()) {
                        *r += w_oi * v;
                    }
                }
            }
        });
    Ok(out)
}

pub(crate) fn conv1x1x1_bwd(
    input: &Tensor,
    weight: &Tensor,
    gout: &Tensor,
    needs: (bool, bool, bool),
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (b, c_in, t, h, w) = input.dims5().unwrap();
    let (c_out, _) = weight.dims2().unwrap();
    let sites = t * h * w;

    let g_input = needs.0.then(|| {
        let mut gi = Tensor::zeros(input.shape());
        gi.data
            .par_chunks_mut(c_in * sites)
            .zip(gout.data.par_chunks(c_out * sites))
            .for_each(|(gi_b, go_b)| {
                for o in 0..c_out {
                    let go_row = &go_b[o * sites..(o + 1) * sites];
                    for i in 0..c_in {
                        let w_oi = weight.data[o * c_in + i];
                        if w_oi == 0.0 {
                            continue;
                        }
                        let gi_row = &mut gi_b[i * sites..(i + 1) * sites];
                        for (r, &g) in gi_row.iter_mut().zip(go_row.iter()) {
                            *r += w_oi * g;
                        }
                    }
                }
            });
        gi
    });

    let g_weight = needs.1.then(|| {
        // Per-batch partials summed in batch order so results do not depend
        // on thread scheduling.
        let partials: Vec<Vec<f64>> = (0..b)
            .into_par_iter()
            .map(|bi| {
                let in_b = &input.data[bi * c_in * sites..(bi + 1) * c_in * sites];
                let go_b = &gout.data[bi * c_out * sites..(bi + 1) * c_out * sites];
                let mut gw = vec![0.0; c_out * c_in];
                for o in 0..c_out {
                    let go_row = &go_b[o * sites..(o + 1) * sites];
                    for i in 0..c_in {
                        let in_row = &in_b[i * sites..(i + 1) * sites];
                        let mut acc = 0.0;
                        for (&g, &v) in go_row.iter().zip(in_row.iter()) {
                            acc += g * v;
                        }
                        gw[o * c_in + i] += acc;
                    }
                }
                gw
            })
            .collect();
        let mut gw = Tensor::zeros(weight.shape());
        for p in &partials {
            for (a, &v) in gw.data.iter_mut().zip(p.iter()) {
                *a += v;
            }
        }
        gw
    });

    let g_bias = needs.2.then(|| {
        let mut gb = Tensor::zeros(&[c_out]);
        for bi in 0..b {
            for o in 0..c_out {
                let base = (bi * c_out + o) * sites;
                gb.data[o] += gout.data[base..base + sites].iter().sum::<f64>();
            }
        }
        gb
    });

    (g_input, g_weight, g_bias)
}

/// Spatial 3x3 convolution applied per frame, zero padding 1, configurable
/// stride. Output spatial extent is ceil(extent / stride).
pub fn conv3x3_spatial(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    if stride < 1 {
        return Err(HcmlError::InvalidArg("conv3x3_spatial: stride must be >= 1".into()));
    }
    let (b, c_in, t, h, w) = input.dims5()?;
    let wshape = weight.shape();
    if wshape.len() != 4 || wshape[1] != c_in || wshape[2] != 3 || wshape[3] != 3 {
        return Err(HcmlError::shape(
            "conv3x3_spatial",
            format!("weight (C_out,{c_in},3,3)"),
            format!("{wshape:?}"),
        ));
    }
    let c_out = wshape[0];
    if bias.shape() != [c_out] {
        return Err(HcmlError::shape(
            "conv3x3_spatial",
            format!("bias ({c_out},)"),
            format!("{:?}", bias.shape()),
        ));
    }
    let ho = h.div_ceil(stride);
    let wo = w.div_ceil(stride);
    let mut out = Tensor::zeros(&[b, c_out, t, ho, wo]);
    out.data
        .par_chunks_mut(c_out * t * ho * wo)
        .zip(input.data.par_chunks(c_in * t * h * w))
        .for_each(|(out_b, in_b)| {
            for o in 0..c_out {
                for ti in 0..t {
                    for yo in 0..ho {
                        for xo in 0..wo {
                            let mut acc = bias.data[o];
                            for i in 0..c_in {
                                let w_base = ((o * c_in + i) * 3) * 3;
                                let in_base = (i * t + ti) * h * w;
                                for ky in 0..3usize {
                                    let y = (yo * stride + ky) as isize - 1;
                                    if y < 0 || y >= h as isize {
                                        continue;
                                    }
                                    let row = in_base + (y as usize) * w;
                                    for kx in 0..3usize {
                                        let x = (xo * stride + kx) as isize - 1;
                                        if x < 0 || x >= w as isize {
                                            continue;
                                        }
                                        acc += weight.data[w_base + ky * 3 + kx] * in_b[row + x as usize];
                                    }
                                }
                            }
                            out_b[((o * t + ti) * ho + yo) * wo + xo] = acc;
                        }
                    }
                }
            }
        });
    Ok(out)
}

pub(crate) fn conv3x3_bwd(
    input: &Tensor,
    weight: &Tensor,
    gout: &Tensor,
    stride: usize,
    needs: (bool, bool, bool),
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (b, c_in, t, h, w) = input.dims5().unwrap();
    let c_out = weight.shape()[0];
    let (ho, wo) = (gout.shape()[3], gout.shape()[4]);

    let g_input = needs.0.then(|| {
        let mut gi = Tensor::zeros(input.shape());
        gi.data
            .par_chunks_mut(c_in * t * h * w)
            .zip(gout.data.par_chunks(c_out * t * ho * wo))
            .for_each(|(gi_b, go_b)| {
                for o in 0..c_out {
                    for ti in 0..t {
                        for yo in 0..ho {
                            for xo in 0..wo {
                                let g = go_b[((o * t + ti) * ho + yo) * wo + xo];
                                if g == 0.0 {
                                    continue;
                                }
                                for i in 0..c_in {
                                    let w_base = ((o * c_in + i) * 3) * 3;
                                    let in_base = (i * t + ti) * h * w;
                                    for ky in 0..3usize {
                                        let y = (yo * stride + ky) as isize - 1;
                                        if y < 0 || y >= h as isize {
                                            continue;
                                        }
                                        let row = in_base + (y as usize) * w;
                                        for kx in 0..3usize {
                                            let x = (xo * stride + kx) as isize - 1;
                                            if x < 0 || x >= w as isize {
                                                continue;
                                            }
                                            gi_b[row + x as usize] += g * weight.data[w_base + ky * 3 + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            });
        gi
    });

    let g_weight = needs.1.then(|| {
        let partials: Vec<Vec<f64>> = (0..b)
            .into_par_iter()
            .map(|bi| {
                let in_b = &input.data[bi * c_in * t * h * w..(bi + 1) * c_in * t * h * w];
                let go_b = &gout.data[bi * c_out * t * ho * wo..(bi + 1) * c_out * t * ho * wo];
                let mut gw = vec![0.0; c_out * c_in * 9];
                for o in 0..c_out {
                    for ti in 0..t {
                        for yo in 0..ho {
                            for xo in 0..wo {
                                let g = go_b[((o * t + ti) * ho + yo) * wo + xo];
                                if g == 0.0 {
                                    continue;
                                }
                                for i in 0..c_in {
                                    let w_base = ((o * c_in + i) * 3) * 3;
                                    let in_base = (i * t + ti) * h * w;
                                    for ky in 0..3usize {
                                        let y = (yo * stride + ky) as isize - 1;
                                        if y < 0 || y >= h as isize {
                                            continue;
                                        }
                                        let row = in_base + (y as usize) * w;
                                        for kx in 0..3usize {
                                            let x = (xo * stride + kx) as isize - 1;
                                            if x < 0 || x >= w as isize {
                                                continue;
                                            }
                                            gw[w_base + ky * 3 + kx] += g * in_b[row + x as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                gw
            })
            .collect();
        let mut gw = Tensor::zeros(weight.shape());
        for p in &partials {
            for (a, &v) in gw.data.iter_mut().zip(p.iter()) {
                *a += v;
            }
        }
        gw
    });

    let g_bias = needs.2.then(|| {
        let mut gb = Tensor::zeros(&[c_out]);
        let per_map = t * ho * wo;
        for bi in 0..b {
            for o in 0..c_out {
                let base = (bi * c_out + o) * per_map;
                gb.data[o] += gout.data[base..base + per_map].iter().sum::<f64>();
            }
        }
        gb
    });

    (g_input, g_weight, g_bias)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Subgradient at exactly 0 is defined as 0.
pub(crate) fn relu_bwd(x: &Tensor, gout: &Tensor) -> Tensor {
    let data = x
        .data
        .iter()
        .zip(gout.data.iter())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor {
        shape: x.shape.clone(),
        data,
    }
}

/// Concatenate along axis 1 (channels for rank-5, columns for rank-2).
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(HcmlError::InvalidArg("concat_channels: no inputs".into()));
    }
    let first = parts[0].shape();
    if first.len() < 2 {
        return Err(HcmlError::shape("concat_channels", "rank >= 2", format!("{first:?}")));
    }
    for p in parts {
        let s = p.shape();
        if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
            return Err(HcmlError::shape(
                "concat_channels",
                format!("{first:?} except axis 1"),
                format!("{s:?}"),
            ));
        }
    }
    let outer = first[0];
    let inner: usize = first[2..].iter().product();
    let total_c: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut shape = first.to_vec();
    shape[1] = total_c;
    let mut out = Tensor::zeros(&shape);
    for b in 0..outer {
        let mut c_off = 0;
        for p in parts {
            let pc = p.shape()[1];
            let src = &p.data[b * pc * inner..(b + 1) * pc * inner];
            let dst_base = (b * total_c + c_off) * inner;
            out.data[dst_base..dst_base + pc * inner].copy_from_slice(src);
            c_off += pc;
        }
    }
    Ok(out)
}

/// Split a gradient of the concatenated tensor back into per-part gradients.
pub(crate) fn concat_channels_bwd(part_shapes: &[Vec<usize>], gout: &Tensor) -> Vec<Tensor> {
    let outer = part_shapes[0][0];
    let inner: usize = part_shapes[0][2..].iter().product();
    let total_c = gout.shape()[1];
    let mut grads: Vec<Tensor> = part_shapes.iter().map(|s| Tensor::zeros(s)).collect();
    for b in 0..outer {
        let mut c_off = 0;
        for (gi, s) in grads.iter_mut().zip(part_shapes.iter()) {
            let pc = s[1];
            let src_base = (b * total_c + c_off) * inner;
            gi.data[b * pc * inner..(b + 1) * pc * inner]
                .copy_from_slice(&gout.data[src_base..src_base + pc * inner]);
            c_off += pc;
        }
    }
    grads
}

/// Arithmetic mean of all entries.
pub fn mean(x: &Tensor) -> f64 {
    x.data.iter().sum::<f64>() / x.numel() as f64
}

/// Cosine similarity between two equal-length slices; 0 if either norm is
/// below `eps`.
pub fn cosine_sim_slices(u: &[f64], v: &[f64], eps: f64) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for (&a, &b) in u.iter().zip(v.iter()) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    let (nu, nv) = (nu.sqrt(), nv.sqrt());
    if nu < eps || nv < eps {
        0.0
    } else {
        dot / (nu * nv)
    }
}

/// Cosine similarity between two vectors.
pub fn cosine_sim(u: &Tensor, v: &Tensor) -> Result<f64> {
    if u.shape() != v.shape() || u.shape().len() != 1 {
        return Err(HcmlError::shape(
            "cosine_sim",
            format!("matching vectors, left {:?}", u.shape()),
            format!("{:?}", v.shape()),
        ));
    }
    Ok(cosine_sim_slices(u.data(), v.data(), COSINE_NORM_EPS))
}

/// d cos(u, v) / du and / dv, written into the provided accumulators scaled
/// by `g`. No-op when either norm is under `eps` (the cosine was defined 0).
pub(crate) fn cosine_sim_bwd_acc(
    u: &[f64],
    v: &[f64],
    eps: f64,
    g: f64,
    gu: Option<&mut [f64]>,
    gv: Option<&mut [f64]>,
) {
    let mut dot = 0.0;
    let mut nu2 = 0.0;
    let mut nv2 = 0.0;
    for (&a, &b) in u.iter().zip(v.iter()) {
        dot += a * b;
        nu2 += a * a;
        nv2 += b * b;
    }
    let (nu, nv) = (nu2.sqrt(), nv2.sqrt());
    if nu < eps || nv < eps {
        return;
    }
    let s = dot / (nu * nv);
    if let Some(gu) = gu {
        let inv = 1.0 / (nu * nv);
        for ((ga, &a), &b) in gu.iter_mut().zip(u.iter()).zip(v.iter()) {
            *ga += g * (b * inv - s * a / nu2);
        }
    }
    if let Some(gv) = gv {
        let inv = 1.0 / (nu * nv);
        for ((gb, &b), &a) in gv.iter_mut().zip(v.iter()).zip(u.iter()) {
            *gb += g * (a * inv - s * b / nv2);
        }
    }
}

/// Row-wise affine map: out[n, o] = bias[o] + sum_i x[n, i] * w[o, i].
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, c_in) = x.dims2()?;
    let (c_out, wc_in) = weight.dims2()?;
    if wc_in != c_in {
        return Err(HcmlError::shape(
            "linear",
            format!("weight (C_out,{c_in})"),
            format!("{:?}", weight.shape()),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(HcmlError::shape(
                "linear",
                format!("bias ({c_out},)"),
                format!("{:?}", b.shape()),
            ));
        }
    }
    let mut out = Tensor::zeros(&[n, c_out]);
    out.data
        .par_chunks_mut(c_out)
        .zip(x.data.par_chunks(c_in))
        .for_each(|(out_row, x_row)| {
            for o in 0..c_out {
                let w_row = &weight.data[o * c_in..(o + 1) * c_in];
                let mut acc = bias.map_or(0.0, |b| b.data[o]);
                for (&xv, &wv) in x_row.iter().zip(w_row.iter()) {
                    acc += xv * wv;
                }
                out_row[o] = acc;
            }
        });
    Ok(out)
}

pub(crate) fn linear_bwd(
    x: &Tensor,
    weight: &Tensor,
    gout: &Tensor,
    has_bias: bool,
    needs: (bool, bool, bool),
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (n, c_in) = x.dims2().unwrap();
    let (c_out, _) = weight.dims2().unwrap();

    let gx = needs.0.then(|| {
        let mut gx = Tensor::zeros(x.shape());
        gx.data
            .par_chunks_mut(c_in)
            .zip(gout.data.par_chunks(c_out))
            .for_each(|(gx_row, go_row)| {
                for o in 0..c_out {
                    let g = go_row[o];
                    if g == 0.0 {
                        continue;
                    }
                    let w_row = &weight.data[o * c_in..(o + 1) * c_in];
                    for (r, &wv) in gx_row.iter_mut().zip(w_row.iter()) {
                        *r += g * wv;
                    }
                }
            });
        gx
    });

    let gw = needs.1.then(|| {
        let mut gw = Tensor::zeros(weight.shape());
        for ni in 0..n {
            let x_row = &x.data[ni * c_in..(ni + 1) * c_in];
            let go_row = &gout.data[ni * c_out..(ni + 1) * c_out];
            for o in 0..c_out {
                let g = go_row[o];
                if g == 0.0 {
                    continue;
                }
                let w_row = &mut gw.data[o * c_in..(o + 1) * c_in];
                for (r, &xv) in w_row.iter_mut().zip(x_row.iter()) {
                    *r += g * xv;
                }
            }
        }
        gw
    });

    let gb = (needs.2 && has_bias).then(|| {
        let mut gb = Tensor::zeros(&[c_out]);
        for ni in 0..n {
            for o in 0..c_out {
                gb.data[o] += gout.data[ni * c_out + o];
            }
        }
        gb
    });

    (gx, gw, gb)
}

/// Per-channel learnable scale on axis 1.
pub fn channel_scale(x: &Tensor, scale: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() < 2 || scale.shape() != [s[1]] {
        return Err(HcmlError::shape(
            "channel_scale",
            format!("scale ({},) for input {s:?}", s.get(1).copied().unwrap_or(0)),
            format!("{:?}", scale.shape()),
        ));
    }
    let outer = s[0];
    let c = s[1];
    let inner: usize = s[2..].iter().product();
    let mut out = x.clone();
    for b in 0..outer {
        for ci in 0..c {
            let base = (b * c + ci) * inner;
            let sv = scale.data[ci];
            for v in &mut out.data[base..base + inner] {
                *v *= sv;
            }
        }
    }
    Ok(out)
}

pub(crate) fn channel_scale_bwd(
    x: &Tensor,
    scale: &Tensor,
    gout: &Tensor,
    needs: (bool, bool),
) -> (Option<Tensor>, Option<Tensor>) {
    let s = x.shape();
    let (outer, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let gx = needs.0.then(|| {
        let mut gx = gout.clone();
        for b in 0..outer {
            for ci in 0..c {
                let base = (b * c + ci) * inner;
                let sv = scale.data[ci];
                for v in &mut gx.data[base..base + inner] {
                    *v *= sv;
                }
            }
        }
        gx
    });
    let gs = needs.1.then(|| {
        let mut gs = Tensor::zeros(&[c]);
        for b in 0..outer {
            for ci in 0..c {
                let base = (b * c + ci) * inner;
                let mut acc = 0.0;
                for k in 0..inner {
                    acc += gout.data[base + k] * x.data[base + k];
                }
                gs.data[ci] += acc;
            }
        }
        gs
    });
    (gx, gs)
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

    #[test]
    fn new_validates_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains('6') && msg.contains('5'), "{msg}");
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn conv1x1x1_identity_weight_is_identity() {
        let mut r = rng(1);
        let x = Tensor::uniform(&[2, 3, 2, 4, 4], -1.0, 1.0, &mut r);
        let mut w = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let y = conv1x1x1(&x, &w, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn conv1x1x1_hand_sum() {
        // all-ones input, C_in = 4, one output row of 0.5 with bias 1 -> 3.0
        let x = Tensor::full(&[1, 4, 2, 3, 3], 1.0);
        let w = Tensor::full(&[1, 4], 0.5);
        let b = Tensor::from_vec(vec![1.0]);
        let y = conv1x1x1(&x, &w, &b).unwrap();
        assert!(y.data().iter().all(|&v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn conv1x1x1_zero_weight_gives_bias() {
        let mut r = rng(2);
        let x = Tensor::uniform(&[1, 2, 2, 2, 2], -1.0, 1.0, &mut r);
        let w = Tensor::zeros(&[3, 2]);
        let b = Tensor::from_vec(vec![0.25, -1.5, 2.0]);
        let y = conv1x1x1(&x, &w, &b).unwrap();
        for o in 0..3 {
            for s in 0..8 {
                assert_eq!(y.data()[o * 8 + s], b.data()[o]);
            }
        }
    }

    #[test]
    fn conv1x1x1_rejects_mismatch_naming_shapes() {
        let x = Tensor::zeros(&[1, 4, 1, 2, 2]);
        let w = Tensor::zeros(&[2, 3]);
        let err = conv1x1x1(&x, &w, &Tensor::zeros(&[2])).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("[2, 3]") && msg.contains('4'), "{msg}");
    }

    #[test]
    fn conv1x1x1_is_linear() {
        let mut r = rng(3);
        let x = Tensor::uniform(&[1, 3, 2, 4, 4], -1.0, 1.0, &mut r);
        let y = Tensor::uniform(&[1, 3, 2, 4, 4], -1.0, 1.0, &mut r);
        let w = Tensor::uniform(&[5, 3], -1.0, 1.0, &mut r);
        let b0 = Tensor::zeros(&[5]);
        let (alpha, beta) = (0.7, -1.3);
        let lhs = conv1x1x1(&x.scale(alpha).add(&y.scale(beta)).unwrap(), &w, &b0).unwrap();
        let rhs = conv1x1x1(&x, &w, &b0)
            .unwrap()
            .scale(alpha)
            .add(&conv1x1x1(&y, &w, &b0).unwrap().scale(beta))
            .unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }

    #[test]
    fn conv3x3_delta_kernel_is_identity() {
        let mut r = rng(4);
        let x = Tensor::uniform(&[1, 2, 2, 5, 5], -1.0, 1.0, &mut r);
        let mut w = Tensor::zeros(&[2, 2, 3, 3]);
        for o in 0..2 {
            w.data_mut()[((o * 2 + o) * 3 + 1) * 3 + 1] = 1.0;
        }
        let y = conv3x3_spatial(&x, &w, &Tensor::zeros(&[2]), 1).unwrap();
        assert!(x.max_abs_diff(&y) < 1e-12);
    }

    #[test]
    fn conv3x3_box_kernel_interior_sum() {
        let c = 0.37;
        let x = Tensor::full(&[1, 1, 1, 5, 5], c);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv3x3_spatial(&x, &w, &Tensor::zeros(&[1]), 1).unwrap();
        // interior pixel sees all nine taps
        assert!((y.at5(0, 0, 0, 2, 2) - 9.0 * c).abs() < 1e-12);
        // corner sees four
        assert!((y.at5(0, 0, 0, 0, 0) - 4.0 * c).abs() < 1e-12);
    }

    #[test]
    fn conv3x3_stride2_halves_extent() {
        let x = Tensor::zeros(&[1, 1, 1, 8, 8]);
        let w = Tensor::zeros(&[1, 1, 3, 3]);
        let y = conv3x3_spatial(&x, &w, &Tensor::zeros(&[1]), 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 4, 4]);
        assert!(conv3x3_spatial(&x, &w, &Tensor::zeros(&[1]), 0).is_err());
    }

    #[test]
    fn relu_and_concat_and_mean_examples() {
        let x = Tensor::from_vec(vec![-1.0, 2.0, 0.0]);
        assert_eq!(relu(&x).data(), &[0.0, 2.0, 0.0]);
        let x2 = relu(&relu(&x));
        assert_eq!(x2, relu(&x));

        let a = Tensor::zeros(&[2, 4, 2, 3, 3]);
        let b = Tensor::zeros(&[2, 9, 2, 3, 3]);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 13, 2, 3, 3]);
        let bad = Tensor::zeros(&[2, 9, 2, 3, 4]);
        assert!(concat_channels(&[&a, &bad]).is_err());

        assert!((mean(&Tensor::from_vec(vec![1.0, 2.0, 3.0, 6.0])) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn concat_roundtrips_through_bwd() {
        let mut r = rng(5);
        let a = Tensor::uniform(&[2, 2, 1, 2, 2], -1.0, 1.0, &mut r);
        let b = Tensor::uniform(&[2, 3, 1, 2, 2], -1.0, 1.0, &mut r);
        let c = concat_channels(&[&a, &b]).unwrap();
        let grads = concat_channels_bwd(&[a.shape().to_vec(), b.shape().to_vec()], &c);
        assert_eq!(grads[0], a);
        assert_eq!(grads[1], b);
    }

    #[test]
    fn cosine_examples() {
        let u = Tensor::from_vec(vec![0.3, -0.7, 2.0]);
        assert!((cosine_sim(&u, &u).unwrap() - 1.0).abs() < 1e-12);
        let a = Tensor::from_vec(vec![1.0, 0.0]);
        let b = Tensor::from_vec(vec![0.0, 5.0]);
        assert!(cosine_sim(&a, &b).unwrap().abs() < 1e-15);
        let c = Tensor::from_vec(vec![1.0, 1.0]);
        assert!((cosine_sim(&a, &c).unwrap() - 1.0 / 2.0f64.sqrt()).abs() < 1e-12);
        assert_eq!(cosine_sim(&a, &Tensor::zeros(&[2])).unwrap(), 0.0);
        assert!(cosine_sim(&a, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn linear_matches_manual() {
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0]).unwrap();
        let w = Tensor::new(vec![2, 3], vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5]).unwrap();
        let b = Tensor::from_vec(vec![0.1, -0.1]);
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert!((y.data()[0] - (1.0 - 3.0 + 0.1)).abs() < 1e-12);
        assert!((y.data()[1] - (3.0 - 0.1)).abs() < 1e-12);
        assert!((y.data()[2] - (-1.0 - 2.0 + 0.1)).abs() < 1e-12);
    }

    #[test]
    fn channel_scale_scales_per_channel() {
        let mut r = rng(6);
        let x = Tensor::uniform(&[1, 2, 1, 2, 2], -1.0, 1.0, &mut r);
        let s = Tensor::from_vec(vec![2.0, -1.0]);
        let y = channel_scale(&x, &s).unwrap();
        assert!((y.at5(0, 0, 0, 0, 0) - 2.0 * x.at5(0, 0, 0, 0, 0)).abs() < 1e-15);
        assert!((y.at5(0, 1, 0, 1, 1) + x.at5(0, 1, 0, 1, 1)).abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        // Output shape of conv ops is a pure function of input shapes.
        #[test]
        fn conv_shapes_are_pure_functions(
            b in 1usize..3, c_in in 1usize..4, c_out in 1usize..4,
            t in 1usize..3, h in 1usize..8, w in 1usize..8, stride in 1usize..3,
        ) {
            let x = Tensor::zeros(&[b, c_in, t, h, w]);
            let w1 = Tensor::zeros(&[c_out, c_in]);
            let y = conv1x1x1(&x, &w1, &Tensor::zeros(&[c_out])).unwrap();
            prop_assert_eq!(y.shape(), &[b, c_out, t, h, w]);

            let w3 = Tensor::zeros(&[c_out, c_in, 3, 3]);
            let y3 = conv3x3_spatial(&x, &w3, &Tensor::zeros(&[c_out]), stride).unwrap();
            prop_assert_eq!(y3.shape(), &[b, c_out, t, h.div_ceil(stride), w.div_ceil(stride)]);
        }

        // cosine_sim(cu, v) = cosine_sim(u, v) for c > 0, and |cos| <= 1 + eps.
        #[test]
        fn cosine_scale_invariance(
            vals in proptest::collection::vec(-5.0f64..5.0, 2..8),
            other in proptest::collection::vec(-5.0f64..5.0, 2..8),
            c in 0.01f64..100.0,
        ) {
            let n = vals.len().min(other.len());
            let u = Tensor::from_vec(vals[..n].to_vec());
            let v = Tensor::from_vec(other[..n].to_vec());
            let s1 = cosine_sim(&u, &v).unwrap();
            let s2 = cosine_sim(&u.scale(c), &v).unwrap();
            prop_assert!((s1 - s2).abs() < 1e-9);
            prop_assert!(s1.abs() <= 1.0 + 1e-12);
        }

        #[test]
        fn relu_idempotent(vals in proptest::collection::vec(-5.0f64..5.0, 1..32)) {
            let x = Tensor::from_vec(vals);
            prop_assert_eq!(relu(&relu(&x)), relu(&x));
        }
    }
}
