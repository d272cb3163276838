//! Progressive training: flow reconstruction first, then one contrastive
//! level at a time with everything below frozen, then joint multi-task
//! optimization. Also the evaluation probes: linear probe + efficacy
//! score, KNN over pooled motion features, and flow endpoint error.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::backbone::{accuracy_percent, cross_entropy};
use crate::contrastive::{feature_variance, info_nce, positive_retrieval_accuracy, NegativeCounts};
use crate::dataio::{Checkpoint, RngState, StageMarker, SyntheticDataset};
use crate::error::{HcmlError, Result};
use crate::model::{ForwardMode, ForwardPlan, MotionNetwork};
use crate::params::{Param, StageTag};
use crate::tensor::{self, Tensor};

/// Balancing weights of the joint objective.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    /// Reconstruction weight lambda.
    pub lambda: f64,
    /// Contrastive weights gamma^1, gamma^2.
    pub gamma: [f64; 2],
    /// Smoothness weight zeta inside the reconstruction loss.
    pub zeta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 15.0,
            gamma: [0.25, 0.25],
            zeta: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || self.zeta < 0.0 || self.gamma.iter().any(|&g| g < 0.0) {
            return Err(HcmlError::InvalidArg("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Optimizer and schedule settings shared by every stage.
#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 {
            return Err(HcmlError::InvalidArg("base_lr must be > 0".into()));
        }
        if self.warmup_epochs >= self.total_epochs {
            return Err(HcmlError::InvalidArg(format!(
                "warmup epochs ({}) must be < total epochs ({})",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(HcmlError::InvalidArg("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to base over the warmup epochs, then cosine decay
/// to 0 over the remaining epochs. Continuous at the boundary.
pub fn lr_at(epoch: usize, step_fraction: f64, cfg: &TrainConfig) -> f64 {
    let pos = epoch as f64 + step_fraction;
    let warmup = cfg.warmup_epochs as f64;
    if pos < warmup {
        cfg.base_lr * pos / warmup
    } else {
        let span = cfg.total_epochs as f64 - warmup;
        let progress = ((pos - warmup) / span).clamp(0.0, 1.0);
        cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// One SGD step with momentum: v <- momentum * v + g; p <- p - lr * v.
pub fn sgd_step(
    name: &str,
    param: &mut Tensor,
    grad: &Tensor,
    velocity: &mut Tensor,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if !grad.is_finite() {
        return Err(HcmlError::NonFinite(format!("gradient of {name}")));
    }
    for ((v, &g), p) in velocity
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(param.data_mut())
    {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Training stages, in required order. Supervised runs are standalone
/// ablations (classification loss only, from scratch).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainStage {
    Recon,
    Contrastive(usize),
    Joint,
    Supervised(ForwardMode),
}

impl TrainStage {
    pub fn marker(&self) -> StageMarker {
        match self {
            TrainStage::Recon => StageMarker::Recon,
            TrainStage::Contrastive(1) => StageMarker::Level1,
            TrainStage::Contrastive(_) => StageMarker::Level2,
            TrainStage::Joint => StageMarker::Joint,
            TrainStage::Supervised(_) => StageMarker::Supervised,
        }
    }

    /// Stage marker that must already be in place.
    pub fn requires(&self) -> StageMarker {
        match self {
            TrainStage::Recon | TrainStage::Supervised(_) => StageMarker::Fresh,
            TrainStage::Contrastive(1) => StageMarker::Recon,
            TrainStage::Contrastive(_) => StageMarker::Level1,
            TrainStage::Joint => StageMarker::Level2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TrainStage::Recon => "recon",
            TrainStage::Contrastive(1) => "level1",
            TrainStage::Contrastive(_) => "level2",
            TrainStage::Joint => "joint",
            TrainStage::Supervised(ForwardMode::Baseline) => "supervised-baseline",
            TrainStage::Supervised(ForwardMode::WithMotion) => "supervised-motion",
        }
    }

    fn trainable(&self, p: &Param) -> bool {
        match self {
            TrainStage::Recon => p.tag == StageTag::Level0,
            TrainStage::Contrastive(1) => p.tag == StageTag::Level1,
            TrainStage::Contrastive(_) => p.tag == StageTag::Level2,
            TrainStage::Joint | TrainStage::Supervised(_) => true,
        }
    }
}

/// Mutable training-loop state.
pub struct TrainState {
    pub stage_done: StageMarker,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn fresh(seed: u64) -> Self {
        TrainState {
            stage_done: StageMarker::Fresh,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

/// Per-epoch averages written to the metrics CSV.
#[derive(Clone, Debug, Default)]
pub struct EpochMetrics {
    pub lr: f64,
    pub total: f64,
    pub cls: Option<f64>,
    pub recon: Option<f64>,
    pub photo: Option<f64>,
    pub smooth: Option<f64>,
    pub contrastive: [Option<f64>; 2],
    pub retrieval: [Option<f64>; 2],
    pub neg_counts: [Option<NegativeCounts>; 2],
    pub feat_var: [Option<f64>; 2],
}

pub const METRICS_HEADER: &str = "stage,epoch,lr,loss_total,loss_cls,loss_recon,loss_photo,loss_smooth,loss_con1,loss_con2,retrieval1,retrieval2,neg1_spatial,neg1_temporal,neg1_easy,neg2_spatial,neg2_temporal,neg2_easy,feat_var1,feat_var2";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl EpochMetrics {
    pub fn csv_row(&self, stage: &str, epoch: usize) -> String {
        let nc = |i: usize, f: fn(&NegativeCounts) -> usize| {
            self.neg_counts[i]
                .as_ref()
                .map(|c| f(c).to_string())
                .unwrap_or_default()
        };
        format!(
            "{stage},{epoch},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.lr,
            self.total,
            opt(self.cls),
            opt(self.recon),
            opt(self.photo),
            opt(self.smooth),
            opt(self.contrastive[0]),
            opt(self.contrastive[1]),
            opt(self.retrieval[0]),
            opt(self.retrieval[1]),
            nc(0, |c| c.spatial),
            nc(0, |c| c.temporal),
            nc(0, |c| c.easy),
            nc(1, |c| c.spatial),
            nc(1, |c| c.temporal),
            nc(1, |c| c.easy),
            opt(self.feat_var[0]),
            opt(self.feat_var[1]),
        )
    }
}

/// Result of one stage.
pub struct StageReport {
    pub stage: TrainStage,
    pub epochs: Vec<EpochMetrics>,
}

impl StageReport {
    pub fn final_metrics(&self) -> &EpochMetrics {
        self.epochs.last().expect("at least one epoch")
    }

    /// Count of epochs whose average total loss rose versus the epoch
    /// before (for monotonicity checks).
    pub fn non_monotone_epochs(&self) -> usize {
        self.epochs
            .windows(2)
            .filter(|w| w[1].total > w[0].total)
            .count()
    }
}

struct BatchAccum {
    count: usize,
    metrics: EpochMetrics,
}

impl BatchAccum {
    fn new() -> Self {
        BatchAccum {
            count: 0,
            metrics: EpochMetrics::default(),
        }
    }

    fn add_opt(acc: &mut Option<f64>, v: Option<f64>) {
        if let Some(v) = v {
            *acc = Some(acc.unwrap_or(0.0) + v);
        }
    }

    fn finish(mut self) -> EpochMetrics {
        let n = self.count.max(1) as f64;
        let div = |v: &mut Option<f64>| {
            if let Some(x) = v.as_mut() {
                *x /= n;
            }
        };
        self.metrics.total /= n;
        div(&mut self.metrics.cls);
        div(&mut self.metrics.recon);
        div(&mut self.metrics.photo);
        div(&mut self.metrics.smooth);
        for i in 0..2 {
            div(&mut self.metrics.contrastive[i]);
            div(&mut self.metrics.retrieval[i]);
            div(&mut self.metrics.feat_var[i]);
        }
        self.metrics
    }
}

/// Train one stage on the given data. Parameters of every other stage are
/// byte-compared before and after; any mutation of a frozen parameter
/// aborts the run.
pub fn train_stage(
    net: &mut MotionNetwork,
    stage: TrainStage,
    data: &SyntheticDataset,
    cfg: &TrainConfig,
    weights: &LossWeights,
    state: &mut TrainState,
) -> Result<StageReport> {
    cfg.validate()?;
    weights.validate()?;
    if state.stage_done != stage.requires() {
        return Err(HcmlError::StageOrder(format!(
            "stage {} requires completed stage {:?}, but state is {:?}",
            stage.name(),
            stage.requires(),
            state.stage_done
        )));
    }
    if data.spec.speed > net.cfg.max_displacement[0] * net.cfg.cv_stride[0] {
        return Err(HcmlError::InvalidArg(format!(
            "object speed {} exceeds the level-1 cost volume search range {}",
            data.spec.speed,
            net.cfg.max_displacement[0]
        )));
    }

    let frozen_before = net.store.snapshot_bytes(|p| !stage.trainable(p));
    let mut velocities: Vec<Tensor> = net
        .store
        .params()
        .iter()
        .map(|p| Tensor::zeros(p.value.shape()))
        .collect();

    let n = data.samples.len();
    let mut indices: Vec<usize> = (0..n).collect();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let mut report = StageReport {
        stage,
        epochs: Vec::with_capacity(cfg.total_epochs),
    };

    for epoch in 0..cfg.total_epochs {
        indices.shuffle(&mut state.rng);
        let mut accum = BatchAccum::new();
        for (step, chunk) in indices.chunks(cfg.batch_size).enumerate() {
            let lr = lr_at(epoch, step as f64 / steps_per_epoch as f64, cfg);
            let sample_seed: u64 = state.rng.gen();
            let (clip, labels) = data.batch(chunk);

            let tape = Tape::new();
            let bind = net.store.bind(&tape, |p| stage.trainable(p));
            let plan = plan_for(stage, weights, sample_seed, net.cfg.detach_targets);
            let pass = net.forward(&tape, &bind, &clip, Some(&labels), &plan)?;

            // assemble the stage loss
            let mut cls = None;
            let mut nce = [None, None];
            for l in 0..2 {
                if let Some(batch) = &pass.batches[l] {
                    nce[l] = Some(info_nce(
                        &tape,
                        batch.preds,
                        batch.cands,
                        &batch.positives,
                        net.cfg.contrastive.temperature,
                    )?);
                }
            }
            if let Some(logits) = pass.logits {
                cls = Some(cross_entropy(&tape, logits, &labels)?);
            }
            let loss = match stage {
                TrainStage::Recon => pass.recon.as_ref().unwrap().total,
                TrainStage::Contrastive(l) => nce[l - 1].unwrap(),
                TrainStage::Supervised(_) => cls.unwrap(),
                TrainStage::Joint => {
                    let mut total = cls.unwrap();
                    total = tape.add(
                        total,
                        tape.scale(pass.recon.as_ref().unwrap().total, weights.lambda),
                    )?;
                    for l in 0..2 {
                        total = tape.add(total, tape.scale(nce[l].unwrap(), weights.gamma[l]))?;
                    }
                    total
                }
            };

            let grads = tape.backward(loss)?;
            for i in 0..net.store.len() {
                let id = crate::params::ParamId::from_index(i);
                if let Some(g) = grads.wrt(bind.var(id)) {
                    let name = net.store.param(id).name.clone();
                    let mut value = net.store.get(id).clone();
                    sgd_step(&name, &mut value, g, &mut velocities[i], lr, cfg.momentum)?;
                    net.store.set_value(id, value)?;
                }
            }

            // batch metrics
            accum.count += 1;
            accum.metrics.lr = lr;
            accum.metrics.total += tape.value(loss).scalar_value();
            BatchAccum::add_opt(&mut accum.metrics.cls, cls.map(|v| tape.value(v).scalar_value()));
            if let Some(recon) = &pass.recon {
                BatchAccum::add_opt(&mut accum.metrics.recon, Some(tape.value(recon.total).scalar_value()));
                BatchAccum::add_opt(&mut accum.metrics.photo, Some(tape.value(recon.photometric).scalar_value()));
                BatchAccum::add_opt(&mut accum.metrics.smooth, Some(tape.value(recon.smoothness).scalar_value()));
            }
            for l in 0..2 {
                if let (Some(batch), Some(nce_l)) = (&pass.batches[l], nce[l]) {
                    BatchAccum::add_opt(&mut accum.metrics.contrastive[l], Some(tape.value(nce_l).scalar_value()));
                    let acc = positive_retrieval_accuracy(
                        &tape.value(batch.preds),
                        &tape.value(batch.cands),
                        &batch.positives,
                        net.cfg.contrastive.temperature,
                    )?;
                    BatchAccum::add_opt(&mut accum.metrics.retrieval[l], Some(acc));
                    if step == 0 && accum.metrics.neg_counts[l].is_none() && !batch.positives.is_empty() {
                        accum.metrics.neg_counts[l] = Some(batch.negative_counts(0));
                    }
                    let p_var = if l == 0 { pass.p1 } else { pass.p2 };
                    if let Some(pv) = p_var {
                        BatchAccum::add_opt(
                            &mut accum.metrics.feat_var[l],
                            Some(feature_variance(&tape.value(pv))?),
                        );
                    }
                }
            }
        }
        state.epoch = epoch + 1;
        report.epochs.push(accum.finish());
    }

    let frozen_after = net.store.snapshot_bytes(|p| !stage.trainable(p));
    assert!(
        frozen_before == frozen_after,
        "frozen parameters changed during stage {}",
        stage.name()
    );
    state.stage_done = stage.marker();
    Ok(report)
}

fn plan_for(stage: TrainStage, weights: &LossWeights, sample_seed: u64, detach: bool) -> ForwardPlan {
    match stage {
        TrainStage::Recon => ForwardPlan::recon_only(weights.zeta),
        TrainStage::Contrastive(l) => ForwardPlan {
            sample_seed,
            ..ForwardPlan::contrastive_only(l, sample_seed)
        },
        TrainStage::Joint => ForwardPlan {
            mode: ForwardMode::WithMotion,
            recon: Some(weights.zeta),
            contrastive: [true, true],
            logits: true,
            sample_seed,
            detach_targets: detach,
        },
        TrainStage::Supervised(mode) => ForwardPlan {
            mode,
            recon: None,
            contrastive: [false, false],
            logits: true,
            sample_seed,
            detach_targets: true,
        },
    }
}

// ---------------------------------------------------------------------------
// Checkpointed pipeline
// ---------------------------------------------------------------------------

/// Stage-by-stage pipeline with checkpoint files and a metrics CSV in a run
/// directory. Parameters round-trip through the (f32) checkpoint at every
/// stage boundary, so an interrupted-and-resumed run is bitwise identical
/// to an uninterrupted one.
pub struct Trainer {
    pub net: MotionNetwork,
    pub weights: LossWeights,
    pub run_dir: PathBuf,
}

impl Trainer {
    pub fn new(net: MotionNetwork, weights: LossWeights, run_dir: impl Into<PathBuf>) -> Result<Self> {
        let run_dir = run_dir.into();
        std::fs::create_dir_all(&run_dir)?;
        Ok(Trainer {
            net,
            weights,
            run_dir,
        })
    }

    pub fn checkpoint_path(&self, marker: StageMarker) -> PathBuf {
        self.run_dir.join(format!("{}.ck", marker.name()))
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.run_dir.join("metrics.csv")
    }

    /// Load the prerequisite checkpoint (if any) and return the restored
    /// state without touching any files on failure.
    fn prepare(&mut self, stage: TrainStage, seed: u64) -> Result<TrainState> {
        let required = stage.requires();
        if required == StageMarker::Fresh {
            return Ok(TrainState::fresh(seed));
        }
        let path = self.checkpoint_path(required);
        if !path.exists() {
            return Err(HcmlError::StageOrder(format!(
                "stage {} requires a completed {} stage: checkpoint {} not found (run `train --stage {}` first)",
                stage.name(),
                required.name(),
                path.display(),
                required.name(),
            )));
        }
        let ck = Checkpoint::load(&path)?;
        if ck.stage != required {
            return Err(HcmlError::StageOrder(format!(
                "checkpoint {} holds stage {:?}, expected {:?}",
                path.display(),
                ck.stage,
                required
            )));
        }
        self.apply_checkpoint(&ck)?;
        Ok(TrainState {
            stage_done: ck.stage,
            epoch: 0,
            rng: ck.rng.restore(),
        })
    }

    pub fn apply_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        if ck.params.len() != self.net.store.len() {
            return Err(HcmlError::Corrupt(format!(
                "checkpoint has {} parameters, model has {}",
                ck.params.len(),
                self.net.store.len()
            )));
        }
        for (name, value) in &ck.params {
            let id = self
                .net
                .store
                .by_name(name)
                .ok_or_else(|| HcmlError::Corrupt(format!("unknown parameter {name} in checkpoint")))?;
            self.net.store.set_value(id, value.clone())?;
        }
        Ok(())
    }

    fn save_and_requantize(&mut self, marker: StageMarker, epochs: u32, rng: &ChaCha8Rng) -> Result<()> {
        let ck = Checkpoint {
            stage: marker,
            epochs_done: epochs,
            rng: RngState::capture(rng),
            params: self
                .net
                .store
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
        };
        let path = self.checkpoint_path(marker);
        ck.save(&path)?;
        // Reload so in-memory parameters equal the serialized f32 values;
        // this is what makes resume bitwise-equal to a continuous run.
        let reloaded = Checkpoint::load(&path)?;
        self.apply_checkpoint(&reloaded)
    }

    fn append_metrics(&self, stage: TrainStage, report: &StageReport) -> Result<()> {
        let path = self.metrics_path();
        let mut text = String::new();
        if !path.exists() {
            text.push_str(METRICS_HEADER);
            text.push('\n');
        }
        for (epoch, m) in report.epochs.iter().enumerate() {
            let _ = writeln!(text, "{}", m.csv_row(stage.name(), epoch));
        }
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&path)?;
        f.write_all(text.as_bytes())?;
        Ok(())
    }

    /// Run one stage end to end: order check, train, checkpoint, metrics.
    pub fn run(&mut self, stage: TrainStage, data: &SyntheticDataset, cfg: &TrainConfig) -> Result<StageReport> {
        let mut state = self.prepare(stage, cfg.seed)?;
        let weights = self.weights;
        let report = train_stage(&mut self.net, stage, data, cfg, &weights, &mut state)?;
        self.save_and_requantize(stage.marker(), cfg.total_epochs as u32, &state.rng)?;
        self.append_metrics(stage, &report)?;
        Ok(report)
    }

    /// Positive-retrieval accuracy of one contrastive level on held-out
    /// clips, averaged over batches.
    pub fn eval_retrieval(&self, data: &SyntheticDataset, level: usize, batch_size: usize, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let indices: Vec<usize> = (0..data.samples.len()).collect();
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in indices.chunks(batch_size) {
            let (clip, _) = data.batch(chunk);
            let tape = Tape::new();
            let bind = self.net.bind_all_frozen(&tape);
            let plan = ForwardPlan::contrastive_only(level, rng.gen());
            let pass = self.net.forward(&tape, &bind, &clip, None, &plan)?;
            let batch = pass.batches[level - 1].as_ref().unwrap();
            total += positive_retrieval_accuracy(
                &tape.value(batch.preds),
                &tape.value(batch.cands),
                &batch.positives,
                self.net.cfg.contrastive.temperature,
            )?;
            batches += 1;
        }
        Ok(total / batches.max(1) as f64)
    }

    /// Chance level 1/|S| for a contrastive level at the given batch size.
    /// Target grids at both levels keep the clip's full temporal extent.
    pub fn retrieval_chance(&self, data: &SyntheticDataset, batch_size: usize) -> f64 {
        let pool = batch_size * self.net.cfg.contrastive.n_locations * data.spec.frames;
        1.0 / pool as f64
    }

    /// Mean flow endpoint error on object pixels over a dataset, plus the
    /// zero-flow baseline on the same pixels.
    pub fn mean_epe(&self, data: &SyntheticDataset, batch_size: usize) -> Result<(f64, f64)> {
        let spec = &data.spec;
        let (h, w, t) = (spec.height, spec.width, spec.frames);
        let mut err = 0.0;
        let mut base = 0.0;
        let mut count = 0usize;
        let indices: Vec<usize> = (0..data.samples.len()).collect();
        for chunk in indices.chunks(batch_size) {
            let (clip, _) = data.batch(chunk);
            let flow = self.net.predict_flow(&clip)?;
            for (bi, &si) in chunk.iter().enumerate() {
                let gt = &data.samples[si].flow;
                for ti in 0..t - 1 {
                    for p in 0..h * w {
                        let gu = gt.data()[ti * h * w + p];
                        let gv = gt.data()[((t - 1) + ti) * h * w + p];
                        if gu == 0.0 && gv == 0.0 {
                            continue;
                        }
                        let pu = flow.at5(bi, 0, ti, p / w, p % w);
                        let pv = flow.at5(bi, 1, ti, p / w, p % w);
                        err += ((pu - gu).powi(2) + (pv - gv).powi(2)).sqrt();
                        base += (gu * gu + gv * gv).sqrt();
                        count += 1;
                    }
                }
            }
        }
        if count == 0 {
            return Err(HcmlError::InvalidArg("no object pixels in dataset".into()));
        }
        Ok((err / count as f64, base / count as f64))
    }

    /// Classification accuracy (percent) over a dataset.
    pub fn accuracy(&self, data: &SyntheticDataset, mode: ForwardMode, batch_size: usize) -> Result<f64> {
        let indices: Vec<usize> = (0..data.samples.len()).collect();
        let mut hits = 0.0;
        let mut total = 0usize;
        for chunk in indices.chunks(batch_size) {
            let (clip, labels) = data.batch(chunk);
            let logits = self.net.predict_logits(&clip, mode)?;
            hits += accuracy_percent(&logits, &labels)? / 100.0 * labels.len() as f64;
            total += labels.len();
        }
        Ok(100.0 * hits / total as f64)
    }

    /// Pooled motion features for every clip of a dataset: (N, C_l).
    pub fn motion_feature_matrix(&self, data: &SyntheticDataset, level: usize, batch_size: usize) -> Result<Tensor> {
        let indices: Vec<usize> = (0..data.samples.len()).collect();
        let mut rows: Vec<f64> = Vec::new();
        let mut cols = 0;
        for chunk in indices.chunks(batch_size) {
            let (clip, _) = data.batch(chunk);
            let feats = self.net.motion_features(&clip, level)?;
            cols = feats.shape()[1];
            rows.extend_from_slice(feats.data());
        }
        Tensor::new(vec![data.samples.len(), cols], rows)
    }
}

/// Efficacy score: acc_train / (acc_train - acc_test), accuracies in
/// percent. Undefined when the gap is not positive.
pub fn efficacy_score(acc_train: f64, acc_test: f64) -> Result<f64> {
    if acc_train <= acc_test {
        return Err(HcmlError::UndefinedScore {
            train: acc_train,
            test: acc_test,
        });
    }
    Ok(acc_train / (acc_train - acc_test))
}

/// Cosine-similarity KNN with majority vote; ties break to the class of
/// the most similar neighbor among the tied classes. Returns accuracy in
/// percent.
pub fn knn_eval(
    train_feats: &Tensor,
    train_labels: &[usize],
    test_feats: &Tensor,
    test_labels: &[usize],
    k: usize,
) -> Result<f64> {
    let (n_train, c) = train_feats.dims2()?;
    let (n_test, c2) = test_feats.dims2()?;
    if n_train == 0 || train_labels.len() != n_train {
        return Err(HcmlError::InvalidArg("knn: empty or mislabelled train set".into()));
    }
    if c2 != c || test_labels.len() != n_test {
        return Err(HcmlError::InvalidArg("knn: test set mismatch".into()));
    }
    if k == 0 || k > n_train {
        return Err(HcmlError::InvalidArg(format!("knn: k = {k} out of range 1..={n_train}")));
    }
    let num_classes = train_labels.iter().max().unwrap() + 1;
    let mut hits = 0usize;
    for i in 0..n_test {
        let q = &test_feats.data()[i * c..(i + 1) * c];
        let mut sims: Vec<(f64, usize)> = (0..n_train)
            .map(|j| {
                (
                    tensor::cosine_sim_slices(q, &train_feats.data()[j * c..(j + 1) * c], 1e-12),
                    j,
                )
            })
            .collect();
        sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let top = &sims[..k];
        let mut counts = vec![0usize; num_classes];
        for &(_, j) in top {
            counts[train_labels[j]] += 1;
        }
        let best = *counts.iter().max().unwrap();
        // nearest neighbor whose class is tied for the max vote
        let winner = top
            .iter()
            .find(|&&(_, j)| counts[train_labels[j]] == best)
            .map(|&(_, j)| train_labels[j])
            .unwrap();
        if winner == test_labels[i] {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / n_test as f64)
}

/// Train a single linear layer on frozen features by SGD and report
/// (train, test) accuracy in percent.
pub fn linear_probe(
    train_feats: &Tensor,
    train_labels: &[usize],
    test_feats: &Tensor,
    test_labels: &[usize],
    num_classes: usize,
    epochs: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let (n, c) = train_feats.dims2()?;
    if train_labels.len() != n || train_labels.iter().any(|&l| l >= num_classes) {
        return Err(HcmlError::InvalidArg("probe: bad train labels".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Tensor::zeros(&[num_classes, c]);
    let mut b = Tensor::zeros(&[num_classes]);
    let mut vw = Tensor::zeros(w.shape());
    let mut vb = Tensor::zeros(b.shape());
    let cfg = TrainConfig {
        base_lr: 0.05,
        warmup_epochs: 0,
        total_epochs: epochs.max(1),
        batch_size: 32,
        momentum: 0.9,
        seed,
    };
    let mut indices: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.total_epochs {
        indices.shuffle(&mut rng);
        let steps = indices.len().div_ceil(cfg.batch_size);
        for (step, chunk) in indices.chunks(cfg.batch_size).enumerate() {
            let lr = lr_at(epoch, step as f64 / steps as f64, &cfg);
            let mut xb = Vec::with_capacity(chunk.len() * c);
            let mut yb = Vec::with_capacity(chunk.len());
            for &i in chunk {
                xb.extend_from_slice(&train_feats.data()[i * c..(i + 1) * c]);
                yb.push(train_labels[i]);
            }
            let x = Tensor::new(vec![chunk.len(), c], xb)?;
            let tape = Tape::new();
            let xv = tape.constant(x);
            let wv = tape.leaf(w.clone());
            let bv = tape.leaf(b.clone());
            let logits = tape.linear(xv, wv, Some(bv))?;
            let loss = cross_entropy(&tape, logits, &yb)?;
            let grads = tape.backward(loss)?;
            sgd_step("probe.w", &mut w, grads.wrt(wv).unwrap(), &mut vw, lr, cfg.momentum)?;
            sgd_step("probe.b", &mut b, grads.wrt(bv).unwrap(), &mut vb, lr, cfg.momentum)?;
        }
    }
    let acc = |feats: &Tensor, labels: &[usize]| -> Result<f64> {
        let logits = tensor::linear(feats, &w, Some(&b))?;
        accuracy_percent(&logits, labels)
    };
    Ok((acc(train_feats, train_labels)?, acc(test_feats, test_labels)?))
}

/// Weighted total computed directly from component values; used to
/// cross-check the tape assembly.
pub fn weighted_total(cls: f64, recon: f64, con: [f64; 2], weights: &LossWeights) -> f64 {
    cls + weights.lambda * recon + weights.gamma[0] * con[0] + weights.gamma[1] * con[1]
}
