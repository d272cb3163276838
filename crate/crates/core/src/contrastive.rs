//! Hierarchical contrastive objective: motion features at level l predict
//! future motion features at level l-1, scored by a temperature-scaled
//! softmax over one positive and three kinds of negatives (spatial,
//! temporal, easy).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::error::{HcmlError, Result};
use crate::motion::kaiming_matrix;
use crate::params::{Binding, ParamId, ParamStore, StageTag};
use crate::tensor::{self, Tensor, COSINE_NORM_EPS};

/// Hyperparameters of one contrastive level.
#[derive(Clone, Debug)]
pub struct ContrastiveConfig {
    /// Softmax temperature.
    pub temperature: f64,
    /// Spatial locations sampled per video (N).
    pub n_locations: usize,
    /// Prediction steps Delta.
    pub steps: Vec<usize>,
    /// Hidden width of the predictor MLP.
    pub hidden_dim: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            temperature: 0.1,
            n_locations: 16,
            steps: vec![1, 2, 3],
            hidden_dim: 64,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(HcmlError::InvalidArg("temperature must be > 0".into()));
        }
        if self.n_locations == 0 || self.hidden_dim == 0 {
            return Err(HcmlError::InvalidArg("N and hidden dim must be >= 1".into()));
        }
        if self.steps.is_empty() || self.steps.iter().any(|&d| d == 0) {
            return Err(HcmlError::InvalidArg("prediction steps must be positive".into()));
        }
        Ok(())
    }
}

/// Two-layer predictor f_delta(x) = W2_delta * relu(W1 * x), with W1 shared
/// across all prediction steps.
pub struct PredictorMLP {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    w1: ParamId,
    heads: Vec<(usize, ParamId)>,
}

impl PredictorMLP {
    pub fn register(
        store: &mut ParamStore,
        tag: StageTag,
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
        steps: &[usize],
        prefix: &str,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let w1 = store.register(&format!("{prefix}.w1"), tag, kaiming_matrix(hidden_dim, in_dim, rng));
        let heads = steps
            .iter()
            .map(|&d| {
                (
                    d,
                    store.register(
                        &format!("{prefix}.w2d{d}"),
                        tag,
                        kaiming_matrix(out_dim, hidden_dim, rng),
                    ),
                )
            })
            .collect();
        PredictorMLP {
            in_dim,
            hidden_dim,
            out_dim,
            w1,
            heads,
        }
    }

    pub fn head(&self, step: usize) -> Result<ParamId> {
        self.heads
            .iter()
            .find(|(d, _)| *d == step)
            .map(|(_, id)| *id)
            .ok_or_else(|| HcmlError::InvalidArg(format!("prediction step {step} not in Delta")))
    }

    /// Shared hidden layer on a (rows, in_dim) matrix.
    pub fn hidden(&self, tape: &Tape, bind: &Binding, x: Var) -> Result<Var> {
        let pre = tape.linear(x, bind.var(self.w1), None)?;
        Ok(tape.relu(pre))
    }

    /// Per-step output head on a (rows, hidden_dim) matrix.
    pub fn project(&self, tape: &Tape, bind: &Binding, hidden: Var, step: usize) -> Result<Var> {
        tape.linear(hidden, bind.var(self.head(step)?), None)
    }
}

/// Sampled spatial locations per video, on the target (level l-1) grid.
#[derive(Clone, Debug)]
pub struct SampleSets {
    pub n_videos: usize,
    pub n_times: usize,
    pub grid: (usize, usize),
    /// (y, x) per video, N entries each.
    pub locations: Vec<Vec<(usize, usize)>>,
    pub seed: u64,
}

impl SampleSets {
    pub fn n_locations(&self) -> usize {
        self.locations[0].len()
    }

    /// Candidate row index for ground-truth feature (video, location, time).
    pub fn cand_index(&self, video: usize, location: usize, time: usize) -> usize {
        (video * self.n_locations() + location) * self.n_times + time
    }

    pub fn n_candidates(&self) -> usize {
        self.n_videos * self.n_locations() * self.n_times
    }

    /// Gather sites covering every candidate row, in row order.
    fn candidate_sites(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut sites = Vec::with_capacity(self.n_candidates());
        for b in 0..self.n_videos {
            for &(y, x) in &self.locations[b] {
                for t in 0..self.n_times {
                    sites.push((b, t, y, x));
                }
            }
        }
        sites
    }
}

/// Draw N distinct spatial locations per video, uniformly without
/// replacement, deterministically from the seed.
pub fn sample_sets(
    n_videos: usize,
    n_times: usize,
    height: usize,
    width: usize,
    n_locations: usize,
    seed: u64,
) -> Result<SampleSets> {
    if n_videos == 0 || n_times == 0 {
        return Err(HcmlError::InvalidArg("sample_sets: empty batch or clip".into()));
    }
    if n_locations == 0 || n_locations > height * width {
        return Err(HcmlError::InvalidArg(format!(
            "sample_sets: N = {n_locations} exceeds grid {height}x{width}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let locations = (0..n_videos)
        .map(|_| {
            rand::seq::index::sample(&mut rng, height * width, n_locations)
                .iter()
                .map(|p| (p / width, p % width))
                .collect()
        })
        .collect();
    Ok(SampleSets {
        n_videos,
        n_times,
        grid: (height, width),
        locations,
        seed,
    })
}

/// Sizes of the three negative classes for one prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NegativeCounts {
    pub spatial: usize,
    pub temporal: usize,
    pub easy: usize,
}

/// Identity of one prediction row: which candidate is its positive.
#[derive(Clone, Copy, Debug)]
pub struct PredMeta {
    pub video: usize,
    pub location: usize,
    /// Target time on the level l-1 grid (t + delta).
    pub target_time: usize,
    pub step: usize,
}

/// Predictions, candidate pool, and the index structure tying them together.
/// The candidate pool contains the ground-truth features at every sampled
/// location and time of every video in the batch; for each prediction the
/// pool splits into 1 positive, (N-1)*T spatial negatives, T-1 temporal
/// negatives and (B-1)*N*T easy negatives.
pub struct ContrastiveBatch {
    pub preds: Var,
    pub cands: Var,
    pub positives: Vec<usize>,
    pub pred_meta: Vec<PredMeta>,
    pub sets: SampleSets,
}

impl ContrastiveBatch {
    /// Classify every non-positive candidate of one prediction by
    /// enumeration rather than by the closed-form counts.
    pub fn negative_counts(&self, row: usize) -> NegativeCounts {
        let meta = &self.pred_meta[row];
        let sets = &self.sets;
        let mut counts = NegativeCounts {
            spatial: 0,
            temporal: 0,
            easy: 0,
        };
        for b in 0..sets.n_videos {
            for k in 0..sets.n_locations() {
                for t in 0..sets.n_times {
                    if b == meta.video && k == meta.location && t == meta.target_time {
                        continue; // the positive
                    }
                    if b != meta.video {
                        counts.easy += 1;
                    } else if k != meta.location {
                        counts.spatial += 1;
                    } else {
                        counts.temporal += 1;
                    }
                }
            }
        }
        counts
    }
}

/// Assemble the contrastive batch for one level.
///
/// `p_l_up` are the level-l motion features already upsampled to the
/// level-(l-1) spatial grid; temporal alignment maps level-l time t to
/// level-(l-1) time t * ratio where ratio = T_{l-1} / T_l. With
/// `detach_targets` the ground-truth features enter as constants and
/// receive no gradient.
pub fn build_batch(
    tape: &Tape,
    bind: &Binding,
    p_l_up: Var,
    p_lm1: Var,
    mlp: &PredictorMLP,
    cfg: &ContrastiveConfig,
    seed: u64,
    detach_targets: bool,
) -> Result<ContrastiveBatch> {
    cfg.validate()?;
    let up = tape.value(p_l_up);
    let lm1 = tape.value(p_lm1);
    let (b, c_l, t_l, h, w) = up.dims5()?;
    let (b2, c_lm1, t_g, h2, w2) = lm1.dims5()?;
    if b2 != b || h2 != h || w2 != w || t_g % t_l != 0 {
        return Err(HcmlError::shape(
            "build_batch",
            format!("aligned grids: (_,{t_l}*r,{h},{w}) targets for ({b},{c_l},{t_l},{h},{w})"),
            format!("{:?}", lm1.shape()),
        ));
    }
    if c_l + c_lm1 != mlp.in_dim || c_lm1 != mlp.out_dim {
        return Err(HcmlError::shape(
            "build_batch",
            format!("predictor dims in={} out={}", mlp.in_dim, mlp.out_dim),
            format!("features give in={} out={c_lm1}", c_l + c_lm1),
        ));
    }
    let ratio = t_g / t_l;
    let max_step = *cfg.steps.iter().max().unwrap();
    if max_step >= t_g {
        return Err(HcmlError::InvalidArg(format!(
            "max prediction step {max_step} needs a future frame within T = {t_g}"
        )));
    }

    let sets = sample_sets(b, t_g, h, w, cfg.n_locations, seed)?;
    let n = sets.n_locations();

    // Detachment cuts every use of the lower level (conditioning input and
    // candidate pool alike) so the contrastive path cannot move parameters
    // below level l.
    let lm1_src = if detach_targets {
        tape.constant((*lm1).clone())
    } else {
        p_lm1
    };

    // Base rows: one per (video, location, level-l time).
    let mut base_sites_l = Vec::new();
    let mut base_sites_lm1 = Vec::new();
    for bi in 0..b {
        for &(y, x) in &sets.locations[bi] {
            for tl in 0..t_l {
                base_sites_l.push((bi, tl, y, x));
                base_sites_lm1.push((bi, tl * ratio, y, x));
            }
        }
    }
    let cond_l = tape.gather_sites(p_l_up, base_sites_l)?;
    let cond_lm1 = tape.gather_sites(lm1_src, base_sites_lm1)?;
    let inputs = tape.concat_channels(&[cond_l, cond_lm1])?;
    let hidden = mlp.hidden(tape, bind, inputs)?;

    // Candidate pool over the target grid.
    let cands = tape.gather_sites(lm1_src, sets.candidate_sites())?;

    let mut pred_parts = Vec::new();
    let mut positives = Vec::new();
    let mut pred_meta = Vec::new();
    for &step in &cfg.steps {
        let mut rows = Vec::new();
        for bi in 0..b {
            for k in 0..n {
                for tl in 0..t_l {
                    let target_t = tl * ratio + step;
                    if target_t >= t_g {
                        continue;
                    }
                    rows.push((bi * n + k) * t_l + tl);
                    positives.push(sets.cand_index(bi, k, target_t));
                    pred_meta.push(PredMeta {
                        video: bi,
                        location: k,
                        target_time: target_t,
                        step,
                    });
                }
            }
        }
        if rows.is_empty() {
            continue;
        }
        let selected = tape.select_rows(hidden, rows)?;
        pred_parts.push(mlp.project(tape, bind, selected, step)?);
    }
    let preds = tape.concat_rows(&pred_parts)?;

    Ok(ContrastiveBatch {
        preds,
        cands,
        positives,
        pred_meta,
        sets,
    })
}

/// Predicted feature vectors for a single step delta, one row per
/// (video, sampled location, valid level-l time).
pub fn predict_future(
    tape: &Tape,
    bind: &Binding,
    p_l_up: Var,
    p_lm1: Var,
    mlp: &PredictorMLP,
    cfg: &ContrastiveConfig,
    seed: u64,
    step: usize,
) -> Result<Var> {
    mlp.head(step)?;
    let single = ContrastiveConfig {
        steps: vec![step],
        ..cfg.clone()
    };
    let batch = build_batch(tape, bind, p_l_up, p_lm1, mlp, &single, seed, true)?;
    Ok(batch.preds)
}

fn cosine_rows(preds: &Tensor, cands: &Tensor) -> (usize, usize, usize, Vec<f64>) {
    let (p, c) = preds.dims2().unwrap();
    let (q, _) = cands.dims2().unwrap();
    let sims: Vec<f64> = (0..p)
        .into_par_iter()
        .flat_map_iter(|i| {
            let u = &preds.data()[i * c..(i + 1) * c];
            (0..q)
                .map(|j| {
                    let v = &cands.data()[j * c..(j + 1) * c];
                    tensor::cosine_sim_slices(u, v, COSINE_NORM_EPS)
                })
                .collect::<Vec<_>>()
        })
        .collect();
    (p, q, c, sims)
}

/// InfoNCE loss: -log softmax of the positive among all candidates, with
/// cosine similarities scaled by the temperature, averaged over predictions.
pub fn info_nce(tape: &Tape, preds: Var, cands: Var, positives: &[usize], temperature: f64) -> Result<Var> {
    if temperature <= 0.0 {
        return Err(HcmlError::InvalidArg("temperature must be > 0".into()));
    }
    let pv = tape.value(preds);
    let cv = tape.value(cands);
    let (p, _) = pv.dims2()?;
    let (q, _) = cv.dims2()?;
    if positives.len() != p || positives.iter().any(|&j| j >= q) {
        return Err(HcmlError::InvalidArg(
            "info_nce: positive index list does not match predictions".into(),
        ));
    }
    let (_, _, _, sims) = cosine_rows(&pv, &cv);
    let mut loss = 0.0;
    for i in 0..p {
        let row = &sims[i * q..(i + 1) * q];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) / temperature;
        let lse = m + row.iter().map(|&s| (s / temperature - m).exp()).sum::<f64>().ln();
        loss += lse - row[positives[i]] / temperature;
    }
    loss /= p as f64;

    let positives = positives.to_vec();
    Ok(tape.push_op(Tensor::scalar(loss), &[preds, cands], Box::new(move |ctx| {
        let g = ctx.out_grad.scalar_value();
        let pv = &ctx.parents[0];
        let cv = &ctx.parents[1];
        let (p, q, c, sims) = cosine_rows(pv, cv);
        let scale = g / (temperature * p as f64);

        // d loss / d sims, then chain through the cosine into both sides.
        // Rows are independent for the predictions; candidate gradients
        // accumulate over rows in fixed order.
        let mut gp = ctx.needs[0].then(|| Tensor::zeros(pv.shape()));
        let mut gc = ctx.needs[1].then(|| Tensor::zeros(cv.shape()));
        for i in 0..p {
            let row = &sims[i * q..(i + 1) * q];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) / temperature;
            let denom: f64 = row.iter().map(|&s| (s / temperature - m).exp()).sum();
            let u = &pv.data()[i * c..(i + 1) * c];
            for j in 0..q {
                let softmax = (row[j] / temperature - m).exp() / denom;
                let mut ds = softmax * scale;
                if j == positives[i] {
                    ds -= scale;
                }
                if ds == 0.0 {
                    continue;
                }
                let v = &cv.data()[j * c..(j + 1) * c];
                tensor::cosine_sim_bwd_acc(
                    u,
                    v,
                    COSINE_NORM_EPS,
                    ds,
                    gp.as_mut().map(|t| &mut t.data_mut()[i * c..(i + 1) * c]),
                    gc.as_mut().map(|t| &mut t.data_mut()[j * c..(j + 1) * c]),
                );
            }
        }
        vec![gp, gc]
    })))
}

/// Fraction of predictions whose positive has the strictly highest
/// temperature-scaled similarity among all candidates; ties count as
/// failures. The temperature cannot change the argmax, which is exactly
/// what the invariant tests assert.
pub fn positive_retrieval_accuracy(
    preds: &Tensor,
    cands: &Tensor,
    positives: &[usize],
    temperature: f64,
) -> Result<f64> {
    if temperature <= 0.0 {
        return Err(HcmlError::InvalidArg("temperature must be > 0".into()));
    }
    let (p, q, _, sims) = cosine_rows(preds, cands);
    if positives.len() != p {
        return Err(HcmlError::InvalidArg(
            "retrieval: positive index list does not match predictions".into(),
        ));
    }
    let mut hits = 0usize;
    for i in 0..p {
        let row = &sims[i * q..(i + 1) * q];
        let pos = row[positives[i]] / temperature;
        let strict = row
            .iter()
            .enumerate()
            .all(|(j, &s)| j == positives[i] || s / temperature < pos);
        if strict {
            hits += 1;
        }
    }
    Ok(hits as f64 / p as f64)
}

/// Mean per-channel variance of motion features across batch, time and
/// space. Logged per epoch as a collapse diagnostic.
pub fn feature_variance(features: &Tensor) -> Result<f64> {
    let (b, c, t, h, w) = features.dims5()?;
    let n = (b * t * h * w) as f64;
    let mut total = 0.0;
    for ci in 0..c {
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for bi in 0..b {
            for ti in 0..t {
                for y in 0..h {
                    for x in 0..w {
                        let v = features.at5(bi, ci, ti, y, x);
                        sum += v;
                        sum2 += v * v;
                    }
                }
            }
        }
        let mean = sum / n;
        total += (sum2 / n - mean * mean).max(0.0);
    }
    Ok(total / c as f64)
}
