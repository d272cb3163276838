//! The full network: backbone, flow head, prime motion blocks at levels 1
//! and 2, contrastive predictors, and the classifier.
//!
//! Motion features live on a side branch. Level 0 is the flow path: the
//! estimated flow, passed through a fixed pointwise embedding, serves as
//! P^0. Levels 1 and 2 are prime motion blocks whose outputs fuse back into
//! the trunk as residuals (Z^l = F^l + g^l(P^l)), so zero-initialized
//! fusion reproduces the plain backbone bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::backbone::{ToyBackbone, STAGE_CHANNELS, STEM_CHANNELS};
use crate::contrastive::{build_batch, ContrastiveBatch, ContrastiveConfig, PredictorMLP};
use crate::error::{HcmlError, Result};
use crate::flow::{reconstruction_loss, CharbonnierParams, FlowEstimator, ReconLoss};
use crate::motion::{kaiming_matrix, CostVolumeParams, LevelSpec, PrimeMotionBlock};
use crate::params::{Binding, ParamId, ParamStore, StageTag};
use crate::tensor::Tensor;

/// Whether the motion side branch feeds the trunk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    /// Appearance-only: plain backbone, no motion blocks.
    Baseline,
    /// Motion blocks fused in as residuals.
    WithMotion,
}

/// Structural hyperparameters of the network.
#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Channels of the P^0 embedding of the flow field.
    pub p0_channels: usize,
    /// Motion feature channels at levels 1 and 2.
    pub pmb_channels: [usize; 2],
    /// Channel reduction factors at levels 1 and 2.
    pub beta: [usize; 2],
    /// Cost volume max displacement / stride at levels 1 and 2.
    pub max_displacement: [usize; 2],
    pub cv_stride: [usize; 2],
    /// Growth channels of the dense flow estimator.
    pub flow_growth: usize,
    pub contrastive: ContrastiveConfig,
    pub charbonnier: CharbonnierParams,
    /// Keep contrastive targets constant during joint training.
    pub detach_targets: bool,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 6,
            p0_channels: 8,
            pmb_channels: [16, 16],
            beta: [4, 4],
            max_displacement: [3, 2],
            cv_stride: [1, 1],
            flow_growth: 16,
            contrastive: ContrastiveConfig::default(),
            charbonnier: CharbonnierParams::default(),
            detach_targets: true,
            init_seed: 3,
        }
    }
}

/// What one forward pass should produce.
#[derive(Clone, Copy, Debug)]
pub struct ForwardPlan {
    pub mode: ForwardMode,
    pub recon: Option<f64>, // smoothness weight zeta when requested
    pub contrastive: [bool; 2],
    pub logits: bool,
    pub sample_seed: u64,
    pub detach_targets: bool,
}

impl ForwardPlan {
    pub fn recon_only(zeta: f64) -> Self {
        ForwardPlan {
            mode: ForwardMode::WithMotion,
            recon: Some(zeta),
            contrastive: [false, false],
            logits: false,
            sample_seed: 0,
            detach_targets: true,
        }
    }

    pub fn contrastive_only(level: usize, sample_seed: u64) -> Self {
        let mut c = [false, false];
        c[level - 1] = true;
        ForwardPlan {
            mode: ForwardMode::WithMotion,
            recon: None,
            contrastive: c,
            logits: false,
            sample_seed,
            detach_targets: true,
        }
    }
}

/// Tape variables produced by one forward pass.
pub struct ForwardPass {
    pub f0: Var,
    pub flow: Option<Var>,
    pub p0: Option<Var>,
    pub f1: Var,
    pub p1: Option<Var>,
    pub f2: Var,
    pub p2: Option<Var>,
    /// Trunk features entering the classifier (Z^2 or F^2).
    pub head_in: Var,
    pub logits: Option<Var>,
    pub recon: Option<ReconLoss>,
    pub batches: [Option<ContrastiveBatch>; 2],
}

pub struct MotionNetwork {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub backbone: ToyBackbone,
    pub flow_head: FlowEstimator,
    embed_w: ParamId,
    embed_b: ParamId,
    pub pmb: [PrimeMotionBlock; 2],
    pub predictors: [PredictorMLP; 2],
}

impl MotionNetwork {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.contrastive.validate()?;
        cfg.charbonnier.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut store = ParamStore::new();
        let backbone = ToyBackbone::register(&mut store, cfg.num_classes, &mut rng)?;
        // The estimator sees each frame's features paired with its
        // successor's, so motion is observable from per-frame convolutions.
        let flow_head = FlowEstimator::register(
            &mut store,
            StageTag::Level0,
            2 * STEM_CHANNELS,
            cfg.flow_growth,
            "flow",
            &mut rng,
        );
        // Fixed random projection of the flow into P^0 feature space; it
        // receives no reconstruction gradient and stays frozen afterwards.
        let embed_w = store.register("embed.w", StageTag::Level0, kaiming_matrix(cfg.p0_channels, 2, &mut rng));
        let embed_b = store.register("embed.b", StageTag::Level0, Tensor::zeros(&[cfg.p0_channels]));

        let mut pmbs = Vec::new();
        for level in 1..=2 {
            let spec = LevelSpec {
                level,
                in_channels: STAGE_CHANNELS[level],
                beta: cfg.beta[level - 1],
                out_channels: cfg.pmb_channels[level - 1],
                cost_volume: CostVolumeParams::new(
                    cfg.max_displacement[level - 1],
                    cfg.cv_stride[level - 1],
                )?,
            };
            let tag = if level == 1 { StageTag::Level1 } else { StageTag::Level2 };
            pmbs.push(PrimeMotionBlock::register(
                &mut store,
                tag,
                spec,
                &format!("pmb{level}"),
                &mut rng,
            )?);
        }
        let pmb: [PrimeMotionBlock; 2] = pmbs.try_into().map_err(|_| HcmlError::InvalidArg("pmb".into()))?;

        let pred1 = PredictorMLP::register(
            &mut store,
            StageTag::Level1,
            cfg.pmb_channels[0] + cfg.p0_channels,
            cfg.contrastive.hidden_dim,
            cfg.p0_channels,
            &cfg.contrastive.steps,
            "pred1",
            &mut rng,
        );
        let pred2 = PredictorMLP::register(
            &mut store,
            StageTag::Level2,
            cfg.pmb_channels[1] + cfg.pmb_channels[0],
            cfg.contrastive.hidden_dim,
            cfg.pmb_channels[0],
            &cfg.contrastive.steps,
            "pred2",
            &mut rng,
        );

        Ok(MotionNetwork {
            cfg,
            store,
            backbone,
            flow_head,
            embed_w,
            embed_b,
            pmb,
            predictors: [pred1, pred2],
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.total_elements()
    }

    /// Bind parameters with every stage trainable.
    pub fn bind_all_frozen(&self, tape: &Tape) -> Binding {
        self.store.bind(tape, |_| false)
    }

    /// Flow estimate for a clip on the tape.
    fn flow_from_f0(&self, tape: &Tape, bind: &Binding, f0: Var) -> Result<Var> {
        let next = tape.shift_time_forward(f0)?;
        let paired = tape.concat_channels(&[f0, next])?;
        self.flow_head.forward(tape, bind, paired)
    }

    fn p0_from_flow(&self, tape: &Tape, bind: &Binding, flow: Var) -> Result<Var> {
        tape.conv1x1x1(flow, bind.var(self.embed_w), bind.var(self.embed_b))
    }

    /// One forward pass on the given tape. The clip enters as a constant.
    pub fn forward(&self, tape: &Tape, bind: &Binding, clip: &Tensor, labels: Option<&[usize]>, plan: &ForwardPlan) -> Result<ForwardPass> {
        let clip_var = tape.constant(clip.clone());
        let f0 = self.backbone.stage1(tape, bind, clip_var)?;

        let need_p0 = plan.recon.is_some() || plan.contrastive[0];
        let (flow, p0, recon) = if need_p0 {
            let flow = self.flow_from_f0(tape, bind, f0)?;
            let p0 = plan.contrastive[0].then(|| self.p0_from_flow(tape, bind, flow)).transpose()?;
            let recon = plan
                .recon
                .map(|zeta| reconstruction_loss(tape, clip_var, flow, self.cfg.charbonnier, zeta))
                .transpose()?;
            (Some(flow), p0, recon)
        } else {
            (None, None, None)
        };

        let f1 = self.backbone.stage2(tape, bind, f0)?;
        let motion = plan.mode == ForwardMode::WithMotion;
        let need_p1 = motion || plan.contrastive[0] || plan.contrastive[1];
        let p1 = need_p1.then(|| self.pmb[0].forward(tape, bind, f1)).transpose()?;
        let stage3_in = if motion {
            self.pmb[0].fuse(tape, bind, f1, p1.unwrap())?
        } else {
            f1
        };

        let mut batches = [None, None];
        if plan.contrastive[0] {
            let p1_up = tape.upsample_nearest(p1.unwrap(), 2, 2)?;
            batches[0] = Some(build_batch(
                tape,
                bind,
                p1_up,
                p0.unwrap(),
                &self.predictors[0],
                &self.cfg.contrastive,
                plan.sample_seed,
                plan.detach_targets,
            )?);
        }

        let f2 = self.backbone.stage3(tape, bind, stage3_in)?;
        let need_p2 = (motion && plan.logits) || plan.contrastive[1];
        let p2 = need_p2.then(|| self.pmb[1].forward(tape, bind, f2)).transpose()?;
        let head_in = if motion && plan.logits {
            self.pmb[1].fuse(tape, bind, f2, p2.unwrap())?
        } else {
            f2
        };

        if plan.contrastive[1] {
            let p2_up = tape.upsample_nearest(p2.unwrap(), 2, 2)?;
            batches[1] = Some(build_batch(
                tape,
                bind,
                p2_up,
                p1.unwrap(),
                &self.predictors[1],
                &self.cfg.contrastive,
                plan.sample_seed.wrapping_add(1),
                plan.detach_targets,
            )?);
        }

        let logits = if plan.logits {
            Some(self.backbone.classify(tape, bind, head_in)?)
        } else {
            None
        };
        if let (Some(l), Some(lv)) = (labels, logits) {
            // labels validated by the loss later; here just shape-check
            let b = tape.value(lv).dims2()?.0;
            if l.len() != b {
                return Err(HcmlError::shape("forward", format!("{b} labels"), format!("{}", l.len())));
            }
        }

        Ok(ForwardPass {
            f0,
            flow,
            p0,
            f1,
            p1,
            f2,
            p2,
            head_in,
            logits,
            recon,
            batches,
        })
    }

    /// Flow prediction as a plain tensor (no gradients).
    pub fn predict_flow(&self, clip: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bind = self.bind_all_frozen(&tape);
        let clip_var = tape.constant(clip.clone());
        let f0 = self.backbone.stage1(&tape, &bind, clip_var)?;
        let flow = self.flow_from_f0(&tape, &bind, f0)?;
        Ok((*tape.value(flow)).clone())
    }

    /// Logits as a plain tensor (no gradients).
    pub fn predict_logits(&self, clip: &Tensor, mode: ForwardMode) -> Result<Tensor> {
        let tape = Tape::new();
        let bind = self.bind_all_frozen(&tape);
        let plan = ForwardPlan {
            mode,
            recon: None,
            contrastive: [false, false],
            logits: true,
            sample_seed: 0,
            detach_targets: true,
        };
        let pass = self.forward(&tape, &bind, clip, None, &plan)?;
        Ok((*tape.value(pass.logits.unwrap())).clone())
    }

    /// Globally pooled motion features P^l per clip: (B, C_l).
    pub fn motion_features(&self, clip: &Tensor, level: usize) -> Result<Tensor> {
        if !(1..=2).contains(&level) {
            return Err(HcmlError::InvalidArg(format!("motion features exist at levels 1-2, got {level}")));
        }
        let tape = Tape::new();
        let bind = self.bind_all_frozen(&tape);
        let clip_var = tape.constant(clip.clone());
        let f0 = self.backbone.stage1(&tape, &bind, clip_var)?;
        let f1 = self.backbone.stage2(&tape, &bind, f0)?;
        let p = if level == 1 {
            self.pmb[0].forward(&tape, &bind, f1)?
        } else {
            let z1 = {
                let p1 = self.pmb[0].forward(&tape, &bind, f1)?;
                self.pmb[0].fuse(&tape, &bind, f1, p1)?
            };
            let f2 = self.backbone.stage3(&tape, &bind, z1)?;
            self.pmb[1].forward(&tape, &bind, f2)?
        };
        let pooled = tape.global_avg_pool(p)?;
        Ok((*tape.value(pooled)).clone())
    }
}
