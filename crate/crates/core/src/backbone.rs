//! Toy three-level convolutional video backbone.
//!
//! Stem conv 3 -> 16, then three stages of two spatial 3x3 convs each with
//! channels (16, 32, 64). Spatial stride 2 between stages, temporal stride 2
//! entering stage 3, so a (B, 3, 8, 32, 32) clip taps features at
//! (8, 32, 32), (8, 16, 16) and (4, 8, 8). Batch normalization is replaced
//! by a learnable per-channel affine scale after each conv.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{HcmlError, Result};
use crate::flow::kaiming_conv3x3;
use crate::motion::kaiming_matrix;
use crate::params::{Binding, ParamId, ParamStore, StageTag};
use crate::tensor::Tensor;

pub const STEM_CHANNELS: usize = 16;
pub const STAGE_CHANNELS: [usize; 3] = [16, 32, 64];

struct ConvUnit {
    w: ParamId,
    b: ParamId,
    scale: ParamId,
    stride: usize,
}

impl ConvUnit {
    fn register(
        store: &mut ParamStore,
        tag: StageTag,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        ConvUnit {
            w: store.register(&format!("{name}.w"), tag, kaiming_conv3x3(c_out, c_in, rng)),
            b: store.register(&format!("{name}.b"), tag, Tensor::zeros(&[c_out])),
            scale: store.register(&format!("{name}.scale"), tag, Tensor::full(&[c_out], 1.0)),
            stride,
        }
    }

    fn forward(&self, tape: &Tape, bind: &Binding, x: Var) -> Result<Var> {
        let y = tape.conv3x3(x, bind.var(self.w), bind.var(self.b), self.stride)?;
        let s = tape.channel_scale(y, bind.var(self.scale))?;
        Ok(tape.relu(s))
    }
}

/// The backbone's convolutional trunk and classifier head.
pub struct ToyBackbone {
    pub num_classes: usize,
    stem: ConvUnit,
    stages: Vec<Vec<ConvUnit>>,
    fc_w: ParamId,
    fc_b: ParamId,
}

impl ToyBackbone {
    pub fn register(store: &mut ParamStore, num_classes: usize, rng: &mut impl Rng) -> Result<Self> {
        if num_classes < 2 {
            return Err(HcmlError::InvalidArg(format!(
                "backbone needs at least 2 classes, got {num_classes}"
            )));
        }
        let stem = ConvUnit::register(store, StageTag::Level0, "stem", 3, STEM_CHANNELS, 1, rng);
        let tags = [StageTag::Level0, StageTag::Level1, StageTag::Level2];
        let mut stages = Vec::new();
        let mut c_in = STEM_CHANNELS;
        for (si, (&c_out, &tag)) in STAGE_CHANNELS.iter().zip(tags.iter()).enumerate() {
            let first_stride = if si == 0 { 1 } else { 2 };
            let units = vec![
                ConvUnit::register(store, tag, &format!("stage{}.0", si + 1), c_in, c_out, first_stride, rng),
                ConvUnit::register(store, tag, &format!("stage{}.1", si + 1), c_out, c_out, 1, rng),
            ];
            stages.push(units);
            c_in = c_out;
        }
        let fc_w = store.register("head.w", StageTag::Head, kaiming_matrix(num_classes, STAGE_CHANNELS[2], rng));
        let fc_b = store.register("head.b", StageTag::Head, Tensor::zeros(&[num_classes]));
        Ok(ToyBackbone {
            num_classes,
            stem,
            stages,
            fc_w,
            fc_b,
        })
    }

    /// Stem + stage 1: raw clip -> F^0.
    pub fn stage1(&self, tape: &Tape, bind: &Binding, clip: Var) -> Result<Var> {
        let c = tape.value(clip).dims5()?.1;
        if c != 3 {
            return Err(HcmlError::shape("backbone", "3-channel clip", format!("{c} channels")));
        }
        let mut x = self.stem.forward(tape, bind, clip)?;
        for unit in &self.stages[0] {
            x = unit.forward(tape, bind, x)?;
        }
        Ok(x)
    }

    /// Stage 2: F^0-shaped input -> F^1 (spatial stride 2).
    pub fn stage2(&self, tape: &Tape, bind: &Binding, x: Var) -> Result<Var> {
        let mut x = x;
        for unit in &self.stages[1] {
            x = unit.forward(tape, bind, x)?;
        }
        Ok(x)
    }

    /// Stage 3: temporal stride 2, then convs with spatial stride 2 -> F^2.
    pub fn stage3(&self, tape: &Tape, bind: &Binding, x: Var) -> Result<Var> {
        let mut x = tape.subsample_time(x, 2)?;
        for unit in &self.stages[2] {
            x = unit.forward(tape, bind, x)?;
        }
        Ok(x)
    }

    /// Global average pool + linear head.
    pub fn classify(&self, tape: &Tape, bind: &Binding, features: Var) -> Result<Var> {
        let pooled = tape.global_avg_pool(features)?;
        tape.linear(pooled, bind.var(self.fc_w), Some(bind.var(self.fc_b)))
    }
}

/// Mean negative log softmax probability of the true class, log-sum-exp
/// stabilized.
pub fn cross_entropy(tape: &Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let lv = tape.value(logits);
    let (b, k) = lv.dims2()?;
    if labels.len() != b {
        return Err(HcmlError::shape("cross_entropy", format!("{b} labels"), format!("{}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(HcmlError::InvalidArg(format!(
            "cross_entropy: label {bad} out of range for {k} classes"
        )));
    }
    let loss = cross_entropy_value(&lv, labels)?;
    let labels = labels.to_vec();
    Ok(tape.push_op(Tensor::scalar(loss), &[logits], Box::new(move |ctx| {
        if !ctx.needs[0] {
            return vec![None];
        }
        let lv = &ctx.parents[0];
        let (b, k) = lv.dims2().unwrap();
        let g = ctx.out_grad.scalar_value() / b as f64;
        let mut gl = Tensor::zeros(lv.shape());
        for bi in 0..b {
            let row = &lv.data()[bi * k..(bi + 1) * k];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let denom: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            for j in 0..k {
                let softmax = (row[j] - m).exp() / denom;
                let onehot = if j == labels[bi] { 1.0 } else { 0.0 };
                gl.data_mut()[bi * k + j] = g * (softmax - onehot);
            }
        }
        vec![Some(gl)]
    })))
}

/// Direct (non-tape) route of the same loss.
pub fn cross_entropy_value(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (b, k) = logits.dims2()?;
    if labels.len() != b || labels.iter().any(|&l| l >= k) {
        return Err(HcmlError::InvalidArg("cross_entropy: bad labels".into()));
    }
    let mut loss = 0.0;
    for bi in 0..b {
        let row = &logits.data()[bi * k..(bi + 1) * k];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[labels[bi]];
    }
    Ok(loss / b as f64)
}

/// Top-1 accuracy of logits against labels, in percent.
pub fn accuracy_percent(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (b, k) = logits.dims2()?;
    if labels.len() != b {
        return Err(HcmlError::InvalidArg("accuracy: bad labels".into()));
    }
    let mut hits = 0usize;
    for bi in 0..b {
        let row = &logits.data()[bi * k..(bi + 1) * k];
        let arg = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if arg == labels[bi] {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / b as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[2, 4]));
        let loss = cross_entropy(&tape, logits, &[0, 3]).unwrap();
        assert!((tape.value(loss).scalar_value() - 4f64.ln()).abs() < 1e-12);

        let mut dom = Tensor::zeros(&[1, 4]);
        dom.data_mut()[2] = 100.0;
        let dv = tape.constant(dom);
        let loss2 = cross_entropy(&tape, dv, &[2]).unwrap();
        assert!(tape.value(loss2).scalar_value() < 1e-9);

        let bad = cross_entropy(&tape, logits, &[0, 4]);
        assert!(bad.is_err());
    }

    #[test]
    fn cross_entropy_shift_invariant() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let logits = Tensor::uniform(&[3, 5], -2.0, 2.0, &mut r);
        let labels = [1usize, 4, 0];
        let shifted = Tensor::new(
            vec![3, 5],
            logits
                .data()
                .chunks(5)
                .enumerate()
                .flat_map(|(i, row)| row.iter().map(move |&v| v + (i as f64 + 1.0) * 3.7))
                .collect(),
        )
        .unwrap();
        let a = cross_entropy_value(&logits, &labels).unwrap();
        let b = cross_entropy_value(&shifted, &labels).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn cross_entropy_grad_check() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let logits = Tensor::uniform(&[4, 5], -2.0, 2.0, &mut r);
        let report = grad_check(
            "cross_entropy",
            &[("logits".into(), logits)],
            1e-5,
            1e-4,
            |tape, vars| cross_entropy(tape, vars[0], &[0, 2, 4, 1]),
        );
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn tape_and_value_routes_agree() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let logits = Tensor::uniform(&[6, 4], -3.0, 3.0, &mut r);
        let labels = [0usize, 1, 2, 3, 0, 2];
        let tape = Tape::new();
        let lv = tape.constant(logits.clone());
        let via_tape = cross_entropy(&tape, lv, &labels).unwrap();
        let direct = cross_entropy_value(&logits, &labels).unwrap();
        assert!((tape.value(via_tape).scalar_value() - direct).abs() < 1e-14);
    }

    #[test]
    fn backbone_tap_extents() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let bb = ToyBackbone::register(&mut store, 6, &mut r).unwrap();
        assert!(ToyBackbone::register(&mut ParamStore::new(), 1, &mut r).is_err());

        let tape = Tape::new();
        let bind = store.bind(&tape, |_| false);
        let clip = tape.constant(Tensor::uniform(&[2, 3, 8, 32, 32], 0.0, 1.0, &mut r));
        let f0 = bb.stage1(&tape, &bind, clip).unwrap();
        assert_eq!(tape.value(f0).shape(), &[2, 16, 8, 32, 32]);
        let f1 = bb.stage2(&tape, &bind, f0).unwrap();
        assert_eq!(tape.value(f1).shape(), &[2, 32, 8, 16, 16]);
        let f2 = bb.stage3(&tape, &bind, f1).unwrap();
        assert_eq!(tape.value(f2).shape(), &[2, 64, 4, 8, 8]);
        let logits = bb.classify(&tape, &bind, f2).unwrap();
        assert_eq!(tape.value(logits).shape(), &[2, 6]);
        assert!(tape.value(logits).is_finite());
    }

    #[test]
    fn accuracy_counts_argmax() {
        let logits = Tensor::new(vec![2, 3], vec![0.1, 2.0, -1.0, 5.0, 0.0, 0.0]).unwrap();
        assert_eq!(accuracy_percent(&logits, &[1, 0]).unwrap(), 100.0);
        assert_eq!(accuracy_percent(&logits, &[0, 0]).unwrap(), 50.0);
    }
}
