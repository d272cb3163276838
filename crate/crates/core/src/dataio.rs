//! Synthetic motion-defined video data and on-disk formats.
//!
//! Every clip shows one textured shape moving over a static noisy
//! background. The class label is a function of the motion program alone;
//! shape, texture, intensity and start position are drawn from the same
//! distribution for every class, so appearance carries no label
//! information. Motion steps are integer pixels per frame, which makes the
//! ground-truth flow exact and lets warping reconstruct object pixels
//! bit for bit.

use std::io::Read;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{HcmlError, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"HCML-DS1";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HCML-CK1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// The six motion programs. Clips are labelled by program index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MotionClass {
    TranslateRight,
    TranslateLeft,
    TranslateDown,
    TranslateUp,
    OrbitClockwise,
    Shake,
}

impl MotionClass {
    pub const ALL: [MotionClass; 6] = [
        MotionClass::TranslateRight,
        MotionClass::TranslateLeft,
        MotionClass::TranslateDown,
        MotionClass::TranslateUp,
        MotionClass::OrbitClockwise,
        MotionClass::Shake,
    ];

    /// Object displacement (dx, dy) from frame t to frame t+1.
    pub fn displacement(&self, t: usize, speed: i64) -> (i64, i64) {
        match self {
            MotionClass::TranslateRight => (speed, 0),
            MotionClass::TranslateLeft => (-speed, 0),
            MotionClass::TranslateDown => (0, speed),
            MotionClass::TranslateUp => (0, -speed),
            MotionClass::OrbitClockwise => match t % 4 {
                0 => (speed, 0),
                1 => (0, speed),
                2 => (-speed, 0),
                _ => (0, -speed),
            },
            MotionClass::Shake => {
                if t % 2 == 0 {
                    (speed, 0)
                } else {
                    (-speed, 0)
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ShapeKind {
    Square,
    Disc,
    Cross,
}

/// Parameters of the synthetic dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub num_classes: usize,
    /// Object speed in pixels per frame.
    pub speed: usize,
    /// Background noise amplitude (uniform, +/- 3^0.5 sigma).
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            height: 32,
            width: 32,
            frames: 8,
            num_classes: 6,
            speed: 1,
            noise_sigma: 0.05,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > MotionClass::ALL.len() {
            return Err(HcmlError::InvalidArg(format!(
                "num_classes must be 2..=6, got {}",
                self.num_classes
            )));
        }
        if self.frames < 2 {
            return Err(HcmlError::InvalidArg("frames must be >= 2".into()));
        }
        if self.speed == 0 {
            return Err(HcmlError::InvalidArg("speed must be >= 1".into()));
        }
        if self.height < 8 || self.width < 8 {
            return Err(HcmlError::InvalidArg("image must be at least 8x8".into()));
        }
        Ok(())
    }

    pub fn classes(&self) -> &'static [MotionClass] {
        &MotionClass::ALL[..self.num_classes]
    }
}

/// One clip with its label and exact ground-truth flow. Flow is defined on
/// object pixels (background flow is zero), so nonzero flow doubles as the
/// object validity mask.
#[derive(Clone, Debug)]
pub struct SyntheticSample {
    /// (3, T, H, W) in [0, 1].
    pub clip: Tensor,
    pub label: usize,
    /// (2, T-1, H, W): displacement from frame t to t+1 at object pixels
    /// of frame t.
    pub flow: Tensor,
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub split: Split,
    pub samples: Vec<SyntheticSample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    /// Seed streams of the two splits never overlap.
    fn stream_base(&self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1 << 32,
        }
    }

    fn code(&self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }

    fn from_code(c: u8) -> Result<Split> {
        match c {
            0 => Ok(Split::Train),
            1 => Ok(Split::Test),
            _ => Err(HcmlError::Corrupt(format!("unknown split code {c}"))),
        }
    }
}

/// Quantize through f32 so in-memory data always equals its serialized
/// form bit for bit.
fn q32(v: f64) -> f64 {
    v as f32 as f64
}

fn render_sample(spec: &SyntheticSpec, rng: &mut ChaCha8Rng, label: usize) -> Result<SyntheticSample> {
    let (h, w, t) = (spec.height, spec.width, spec.frames);
    let class = spec.classes()[label];
    let speed = spec.speed as i64;

    // cumulative object positions
    let mut offsets = vec![(0i64, 0i64)];
    for ti in 0..t - 1 {
        let (dx, dy) = class.displacement(ti, speed);
        let (px, py) = *offsets.last().unwrap();
        offsets.push((px + dx, py + dy));
    }
    let min_x = offsets.iter().map(|o| o.0).min().unwrap();
    let max_x = offsets.iter().map(|o| o.0).max().unwrap();
    let min_y = offsets.iter().map(|o| o.1).min().unwrap();
    let max_y = offsets.iter().map(|o| o.1).max().unwrap();

    let half = rng.gen_range(2..=4i64);
    let x_lo = half - min_x;
    let x_hi = w as i64 - 1 - half - max_x;
    let y_lo = half - min_y;
    let y_hi = h as i64 - 1 - half - max_y;
    if x_lo > x_hi || y_lo > y_hi {
        return Err(HcmlError::InvalidArg(format!(
            "motion program {class:?} at speed {speed} exceeds the {w}x{h} image bounds"
        )));
    }
    let cx = rng.gen_range(x_lo..=x_hi);
    let cy = rng.gen_range(y_lo..=y_hi);

    let kind = match rng.gen_range(0..3) {
        0 => ShapeKind::Square,
        1 => ShapeKind::Disc,
        _ => ShapeKind::Cross,
    };

    // object pixel offsets relative to the center
    let mut cells: Vec<(i64, i64)> = Vec::new();
    for dy in -half..=half {
        for dx in -half..=half {
            let inside = match kind {
                ShapeKind::Square => true,
                ShapeKind::Disc => dx * dx + dy * dy <= half * half,
                ShapeKind::Cross => dx.abs() <= half / 2 || dy.abs() <= half / 2,
            };
            if inside {
                cells.push((dy, dx));
            }
        }
    }

    // carried texture: per-cell, per-channel intensity, fixed across frames
    let base: [f64; 3] = [
        rng.gen_range(0.45..0.95),
        rng.gen_range(0.45..0.95),
        rng.gen_range(0.45..0.95),
    ];
    let texture: Vec<[f64; 3]> = cells
        .iter()
        .map(|_| {
            let j = rng.gen_range(-0.15..0.15);
            [
                (base[0] + j + rng.gen_range(-0.05..0.05)).clamp(0.05, 1.0),
                (base[1] + j + rng.gen_range(-0.05..0.05)).clamp(0.05, 1.0),
                (base[2] + j + rng.gen_range(-0.05..0.05)).clamp(0.05, 1.0),
            ]
        })
        .collect();

    // static background
    let bg_level = rng.gen_range(0.1..0.3);
    let amp = spec.noise_sigma * 3f64.sqrt();
    let background: Vec<f64> = (0..3 * h * w)
        .map(|_| q32((bg_level + rng.gen_range(-amp..amp)).clamp(0.0, 1.0)))
        .collect();

    let mut clip = Tensor::zeros(&[3, t, h, w]);
    for c in 0..3 {
        for ti in 0..t {
            let dst = (c * t + ti) * h * w;
            clip.data_mut()[dst..dst + h * w].copy_from_slice(&background[c * h * w..(c + 1) * h * w]);
        }
    }
    for ti in 0..t {
        let (ox, oy) = offsets[ti];
        for (cell, tex) in cells.iter().zip(texture.iter()) {
            let y = (cy + ox * 0 + oy * 0 + cell.0 + oy) as usize;
            let x = (cx + cell.1 + ox) as usize;
            for c in 0..3 {
                let idx = ((c * t + ti) * h + y) * w + x;
                clip.data_mut()[idx] = q32(tex[c]);
            }
        }
    }

    let mut flow = Tensor::zeros(&[2, t - 1, h, w]);
    for ti in 0..t - 1 {
        let (dx, dy) = (
            offsets[ti + 1].0 - offsets[ti].0,
            offsets[ti + 1].1 - offsets[ti].1,
        );
        let (ox, oy) = offsets[ti];
        for cell in &cells {
            let y = (cy + cell.0 + oy) as usize;
            let x = (cx + cell.1 + ox) as usize;
            flow.data_mut()[(ti * h + y) * w + x] = dx as f64;
            flow.data_mut()[((t - 1 + ti) * h + y) * w + x] = dy as f64;
        }
    }

    Ok(SyntheticSample {
        clip,
        label,
        flow,
    })
}

/// Generate `count` clips, balanced over classes, deterministic in the
/// seed. Each sample draws from its own seed stream, so generation is
/// order-independent and parallel.
pub fn generate(spec: &SyntheticSpec, count: usize, split: Split) -> Result<SyntheticDataset> {
    spec.validate()?;
    if count == 0 {
        return Err(HcmlError::InvalidArg("dataset count must be >= 1".into()));
    }
    let samples: Vec<Result<SyntheticSample>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(split.stream_base() + i as u64);
            render_sample(spec, &mut rng, i % spec.num_classes)
        })
        .collect();
    let samples = samples.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(SyntheticDataset {
        spec: *spec,
        split,
        samples,
    })
}

impl SyntheticDataset {
    /// Stack clips `indices` into a (B, 3, T, H, W) batch with labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let s = &self.spec;
        let per = 3 * s.frames * s.height * s.width;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.samples[i].clip.data());
            labels.push(self.samples[i].label);
        }
        (
            Tensor::new(
                vec![indices.len(), 3, s.frames, s.height, s.width],
                data,
            )
            .unwrap(),
            labels,
        )
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// FNV-1a checksum over the serialized bytes, logged for
    /// reproducibility.
    pub fn checksum(&self) -> u64 {
        fnv1a(&self.to_bytes())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        let s = &self.spec;
        for v in [s.height, s.width, s.frames, s.num_classes, s.speed] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&s.noise_sigma.to_le_bytes());
        out.extend_from_slice(&s.seed.to_le_bytes());
        out.push(self.split.code());
        out.extend_from_slice(&(self.samples.len() as u32).to_le_bytes());
        for sample in &self.samples {
            let record = sample_bytes(sample);
            out.extend_from_slice(&(record.len() as u32).to_le_bytes());
            out.extend_from_slice(&record);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<SyntheticDataset> {
        let mut r = Cursor::new(bytes);
        let magic = r.take_bytes(8)?;
        if magic != DATASET_MAGIC {
            return Err(HcmlError::Corrupt("bad dataset magic".into()));
        }
        let height = r.u32()? as usize;
        let width = r.u32()? as usize;
        let frames = r.u32()? as usize;
        let num_classes = r.u32()? as usize;
        let speed = r.u32()? as usize;
        let noise_sigma = r.f64()?;
        let seed = r.u64()?;
        let split = Split::from_code(r.u8()?)?;
        let count = r.u32()? as usize;
        let spec = SyntheticSpec {
            height,
            width,
            frames,
            num_classes,
            speed,
            noise_sigma,
            seed,
        };
        spec.validate().map_err(|e| HcmlError::Corrupt(format!("bad dataset spec: {e}")))?;
        let clip_len = 3 * frames * height * width;
        let flow_len = 2 * (frames - 1) * height * width;
        let expect = 4 * clip_len + 4 + 4 * flow_len;
        let mut samples = Vec::with_capacity(count);
        for i in 0..count {
            let len = r.u32()? as usize;
            if len != expect {
                return Err(HcmlError::Corrupt(format!(
                    "sample {i}: record length {len}, expected {expect}"
                )));
            }
            let clip = r.f32_tensor(vec![3, frames, height, width])?;
            let label = r.u32()? as usize;
            if label >= num_classes {
                return Err(HcmlError::Corrupt(format!("sample {i}: label {label} out of range")));
            }
            let flow = r.f32_tensor(vec![2, frames - 1, height, width])?;
            samples.push(SyntheticSample {
                clip,
                label,
                flow,
            });
        }
        Ok(SyntheticDataset {
            spec,
            split,
            samples,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<SyntheticDataset> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        SyntheticDataset::from_bytes(&bytes)
    }
}

fn sample_bytes(s: &SyntheticSample) -> Vec<u8> {
    let mut out = Vec::new();
    for &v in s.clip.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.extend_from_slice(&(s.label as u32).to_le_bytes());
    for &v in s.flow.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Training stage recorded in a checkpoint. Stages must run in order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum StageMarker {
    Fresh,
    Recon,
    Level1,
    Level2,
    Joint,
    /// Classification-only ablation, trained from scratch.
    Supervised,
}

impl StageMarker {
    pub fn code(&self) -> u8 {
        match self {
            StageMarker::Fresh => 0,
            StageMarker::Recon => 1,
            StageMarker::Level1 => 2,
            StageMarker::Level2 => 3,
            StageMarker::Joint => 4,
            StageMarker::Supervised => 5,
        }
    }

    pub fn from_code(c: u8) -> Result<StageMarker> {
        Ok(match c {
            0 => StageMarker::Fresh,
            1 => StageMarker::Recon,
            2 => StageMarker::Level1,
            3 => StageMarker::Level2,
            4 => StageMarker::Joint,
            5 => StageMarker::Supervised,
            _ => return Err(HcmlError::Corrupt(format!("unknown stage code {c}"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            StageMarker::Fresh => "fresh",
            StageMarker::Recon => "recon",
            StageMarker::Level1 => "level1",
            StageMarker::Level2 => "level2",
            StageMarker::Joint => "joint",
            StageMarker::Supervised => "supervised",
        }
    }
}

/// Serializable RNG position (seed, stream, word position).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to resume training: parameters (f32), stage marker and
/// RNG state. Values quantize through f32 on save, so save(load(save(x)))
/// round-trips bit for bit.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub stage: StageMarker,
    pub epochs_done: u32,
    pub rng: RngState,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(self.stage.code());
        out.extend_from_slice(&self.epochs_done.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, tensor) in &self.params {
            let nb = name.as_bytes();
            out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            out.extend_from_slice(nb);
            out.push(tensor.shape().len() as u8);
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in tensor.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Cursor::new(bytes);
        let magic = r.take_bytes(8)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(HcmlError::Corrupt("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(HcmlError::Corrupt(format!(
                "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let stage = StageMarker::from_code(r.u8()?)?;
        let epochs_done = r.u32()?;
        let mut seed = [0u8; 32];
        seed.copy_from_slice(r.take_bytes(32)?);
        let stream = r.u64()?;
        let word_pos = r.u128()?;
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take_bytes(name_len)?.to_vec())
                .map_err(|_| HcmlError::Corrupt("non-utf8 parameter name".into()))?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(r.f32()? as f64);
            }
            params.push((name, Tensor::new(shape, data)?));
        }
        Ok(Checkpoint {
            stage,
            epochs_done,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
            params,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Checkpoint::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn take_bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(HcmlError::Corrupt(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take_bytes(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take_bytes(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take_bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take_bytes(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take_bytes(16)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take_bytes(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take_bytes(8)?.try_into().unwrap()))
    }

    fn f32_tensor(&mut self, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(self.f32()? as f64);
        }
        Tensor::new(shape, data)
    }
}
