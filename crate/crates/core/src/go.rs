//! Keypose-conditioned motion generation: a transformer denoiser that infers
//! global translation and rotation from local key poses, plus a rotation
//! interpolation baseline.

use promo_nn::{
    derive_seed, rng_from, sinusoidal_batch, sinusoidal_embedding, AdamWConfig, FeedForward, LayerNorm, Linear,
    MultiHeadAttention, NnError, ParamId, ParamStore, Tape, Tensor, Var,
};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{self, Denoiser, DiffusionError, DiffusionSchedule, ScheduleKind, TrainOptions};
use crate::motion::{
    ground_root_height, rotmat_to_sixd, sixd_to_rotmat, slerp, MotionError, MotionSequence, PoseVector, Skeleton,
    FRAME_DIM, POSE_DIM, SEQ_LEN,
};
use crate::norm::FeatureNorm;
use crate::posture::replace_params;

pub const MAX_KEYPOSES: usize = 16;

#[derive(Debug, Error)]
pub enum GoError {
    #[error("keypose count {0} outside 1..={MAX_KEYPOSES}")]
    KeyposeCount(usize),
    #[error("motion has {0} frames, expected {SEQ_LEN}")]
    Length(usize),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("checkpoint parameters do not match the model: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, GoError>;

/// Frame that keypose `k` of `count` is anchored to in a sequence of `frames`.
pub fn keyframe_index(k: usize, count: usize, frames: usize) -> usize {
    (((2 * k + 1) * frames) / (2 * count)).min(frames - 1)
}

/// Local poses (root orientation and body, no translation) anchoring a motion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyposeCondition {
    poses: Vec<PoseVector>,
}

impl KeyposeCondition {
    pub fn new(poses: Vec<PoseVector>) -> Result<Self> {
        if poses.is_empty() || poses.len() > MAX_KEYPOSES {
            return Err(GoError::KeyposeCount(poses.len()));
        }
        Ok(KeyposeCondition { poses })
    }

    pub fn poses(&self) -> &[PoseVector] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// Local poses of `count` evenly spaced frames.
pub fn extract_keyposes(motion: &MotionSequence, count: usize) -> Result<KeyposeCondition> {
    if count == 0 || count > MAX_KEYPOSES {
        return Err(GoError::KeyposeCount(count));
    }
    KeyposeCondition::new((0..count).map(|k| motion.pose(keyframe_index(k, count, motion.len()))).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GoConfig {
    pub latent: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    pub dropout: f64,
}

impl Default for GoConfig {
    fn default() -> Self {
        GoConfig { latent: 32, layers: 2, heads: 4, ff: 64, dropout: 0.1 }
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff: FeedForward,
}

/// Transformer encoder over `[time token, keypose tokens, frame tokens]`.
/// Inputs and outputs are normalized `64 x 135` motions.
#[derive(Clone, Debug)]
pub struct GoDenoiser {
    config: GoConfig,
    store: ParamStore<f32>,
    frame_in: Linear,
    pose_in: Linear,
    cond_offset: ParamId,
    time_mlp: FeedForward,
    layers: Vec<EncoderLayer>,
    out_ln: LayerNorm,
    out: Linear,
    /// Normalization of keypose inputs (pose channels of the motion norm).
    pose_norm: FeatureNorm,
}

impl GoDenoiser {
    pub fn new(config: GoConfig, pose_norm: FeatureNorm, seed: u64) -> Result<Self> {
        let d = config.latent;
        if d == 0 || !d.is_multiple_of(2) || config.heads == 0 || !d.is_multiple_of(config.heads) || config.layers == 0 || config.ff == 0 {
            return Err(GoError::Mismatch(format!("invalid go config {config:?}")));
        }
        if pose_norm.dim() != POSE_DIM {
            return Err(GoError::Mismatch(format!("keypose norm has {} features", pose_norm.dim())));
        }
        let mut rng = rng_from(seed);
        let mut store = ParamStore::new();
        let frame_in = Linear::new(&mut store, "frame_in", FRAME_DIM, d, &mut rng);
        let pose_in = Linear::new(&mut store, "pose_in", POSE_DIM, d, &mut rng);
        let cond_offset = store.add_normal("cond_offset", &[d], 0.02, &mut rng);
        let time_mlp = FeedForward::new(&mut store, "time", d, d, d, 0.0, &mut rng);
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let p = format!("layer{i}");
            layers.push(EncoderLayer {
                ln1: LayerNorm::new(&mut store, &format!("{p}.ln1"), d),
                attn: MultiHeadAttention::new(&mut store, &format!("{p}.attn"), d, config.heads, config.dropout, &mut rng)?,
                ln2: LayerNorm::new(&mut store, &format!("{p}.ln2"), d),
                ff: FeedForward::new(&mut store, &format!("{p}.ff"), d, config.ff, d, config.dropout, &mut rng),
            });
        }
        let out_ln = LayerNorm::new(&mut store, "out_ln", d);
        let out = Linear::new(&mut store, "out", d, FRAME_DIM, &mut rng);
        Ok(GoDenoiser { config, store, frame_in, pose_in, cond_offset, time_mlp, layers, out_ln, out, pose_norm })
    }

    pub fn config(&self) -> GoConfig {
        self.config
    }

    pub fn load_params(&mut self, params: ParamStore<f32>) -> Result<()> {
        replace_params(&mut self.store, params).map_err(GoError::Mismatch)
    }

    fn positions(&self, frames: &[usize]) -> Vec<f32> {
        frames
            .iter()
            .flat_map(|&f| sinusoidal_embedding::<f32>(f as f64, self.config.latent).expect("even latent width"))
            .collect()
    }
}

impl Denoiser<f32> for GoDenoiser {
    type Condition = KeyposeCondition;

    fn params(&self) -> &ParamStore<f32> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    fn forward(
        &self,
        tape: &mut Tape<'_, f32>,
        x_t: Var,
        t: &[usize],
        cond: &[Option<&KeyposeCondition>],
    ) -> std::result::Result<Var, NnError> {
        let b = t.len();
        let d = self.config.latent;
        let frames = tape.shape(x_t)[1];
        let kmax = cond.iter().flatten().map(|c| c.len()).max().unwrap_or(0);

        let temb = tape.leaf(sinusoidal_batch(t, d)?);
        let temb = self.time_mlp.forward(tape, temb);
        let mut h = tape.reshape(temb, &[b, 1, d]);

        let mut keep = vec![true; b * (1 + kmax + frames)];
        if kmax > 0 {
            let mut poses = Vec::with_capacity(b * kmax * POSE_DIM);
            let mut pos = Vec::with_capacity(b * kmax * d);
            for (bi, c) in cond.iter().enumerate() {
                let given = c.map_or(&[][..], |c| c.poses());
                for k in 0..kmax {
                    let row = 1 + kmax + frames;
                    match given.get(k) {
                        Some(p) => {
                            poses.extend(self.pose_norm.normalize(p.as_slice()));
                            pos.extend(self.positions(&[keyframe_index(k, given.len(), frames)]));
                        }
                        None => {
                            poses.extend(std::iter::repeat_n(0.0, POSE_DIM));
                            pos.extend(std::iter::repeat_n(0.0, d));
                            keep[bi * row + 1 + k] = false;
                        }
                    }
                }
            }
            let kp = tape.leaf(Tensor::new(vec![b, kmax, POSE_DIM], poses)?);
            let kp = self.pose_in.forward(tape, kp);
            let off = tape.param(self.cond_offset);
            let kp = tape.add_trailing(kp, off);
            let pe = tape.leaf(Tensor::new(vec![b, kmax, d], pos)?);
            let kp = tape.add(kp, pe);
            h = tape.concat_seq(h, kp);
        }

        let x = self.frame_in.forward(tape, x_t);
        let frame_ids: Vec<usize> = (0..frames).collect();
        let pe = self.positions(&frame_ids);
        let pe: Vec<f32> = std::iter::repeat_n(pe, b).flatten().collect();
        let pe = tape.leaf(Tensor::new(vec![b, frames, d], pe)?);
        let x = tape.add(x, pe);
        h = tape.concat_seq(h, x);

        let mask = if kmax > 0 { Some(keep.as_slice()) } else { None };
        for layer in &self.layers {
            let a = layer.ln1.forward(tape, h);
            let a = layer.attn.forward(tape, a, a, mask)?;
            h = tape.add(h, a);
            let f = layer.ln2.forward(tape, h);
            let f = layer.ff.forward(tape, f);
            h = tape.add(h, f);
        }
        let y = tape.slice_seq(h, 1 + kmax, frames);
        let y = self.out_ln.forward(tape, y);
        Ok(self.out.forward(tape, y))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GoTrainConfig {
    pub model: GoConfig,
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub condition_dropout: f64,
    /// Keypose counts drawn uniformly from this inclusive range per sample and epoch.
    pub min_keyposes: usize,
    pub max_keyposes: usize,
}

impl Default for GoTrainConfig {
    fn default() -> Self {
        GoTrainConfig {
            model: GoConfig::default(),
            steps: 100,
            schedule: ScheduleKind::Cosine,
            epochs: 300,
            batch_size: 64,
            lr: 1e-3,
            condition_dropout: 0.1,
            min_keyposes: 2,
            max_keyposes: 8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GoModel {
    pub denoiser: GoDenoiser,
    pub schedule: DiffusionSchedule,
    pub norm: FeatureNorm,
}

impl GoModel {
    pub fn new(config: GoConfig, schedule: DiffusionSchedule, norm: FeatureNorm, seed: u64) -> Result<Self> {
        if norm.dim() != FRAME_DIM {
            return Err(GoError::Mismatch(format!("motion norm has {} features", norm.dim())));
        }
        let pose_norm = FeatureNorm { mean: norm.mean[3..].to_vec(), std: norm.std[3..].to_vec() };
        Ok(GoModel { denoiser: GoDenoiser::new(config, pose_norm, seed)?, schedule, norm })
    }
}

pub fn train_go_diffuser(
    motions: &[MotionSequence],
    cfg: &GoTrainConfig,
    seed: u64,
    on_epoch: impl FnMut(usize, f64),
) -> Result<(GoModel, Vec<f64>)> {
    if motions.is_empty() {
        return Err(GoError::EmptyDataset);
    }
    if let Some(m) = motions.iter().find(|m| m.len() != SEQ_LEN) {
        return Err(GoError::Length(m.len()));
    }
    if cfg.min_keyposes == 0 || cfg.min_keyposes > cfg.max_keyposes || cfg.max_keyposes > MAX_KEYPOSES {
        return Err(GoError::KeyposeCount(cfg.max_keyposes));
    }
    let norm = FeatureNorm::fit(motions.iter().flat_map(|m| m.frames().iter().map(Vec::as_slice)), FRAME_DIM);
    let schedule = DiffusionSchedule::new(cfg.schedule, cfg.steps)?;
    let mut model = GoModel::new(cfg.model, schedule, norm, derive_seed(seed, &[1]))?;
    let data: Vec<f32> = motions.iter().flat_map(|m| model.norm.normalize(&m.flat())).collect();
    let data = Tensor::new(vec![motions.len(), SEQ_LEN, FRAME_DIM], data)?;
    let opts = TrainOptions {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        optimizer: AdamWConfig { lr: cfg.lr, ..AdamWConfig::default() },
        condition_dropout: cfg.condition_dropout,
    };
    let cond_seed = derive_seed(seed, &[3]);
    let (lo, hi) = (cfg.min_keyposes, cfg.max_keyposes);
    let keyposes = |epoch: usize, i: usize| {
        let count = rng_from(derive_seed(cond_seed, &[epoch as u64, i as u64])).gen_range(lo..=hi);
        extract_keyposes(&motions[i], count).expect("count validated above")
    };
    let history = diffusion::train_loop_with(
        &mut model.denoiser,
        &data,
        keyposes,
        &model.schedule,
        &opts,
        derive_seed(seed, &[2]),
        on_epoch,
    )?;
    Ok((model, history))
}

/// One motion per condition, each from its own seed.
pub fn generate_motions(model: &GoModel, keyposes: &[KeyposeCondition], w: f64, seeds: &[u64]) -> Result<Vec<MotionSequence>> {
    let refs: Vec<Option<&KeyposeCondition>> = keyposes.iter().map(Some).collect();
    let out = diffusion::sample_batch(&model.denoiser, &model.schedule, &refs, w, &[SEQ_LEN, FRAME_DIM], seeds)?;
    out.data()
        .chunks(SEQ_LEN * FRAME_DIM)
        .map(|item| {
            let raw = model.norm.denormalize(item);
            let mut frames = Vec::with_capacity(SEQ_LEN);
            for f in raw.chunks(FRAME_DIM) {
                let mut frame = f[..3].to_vec();
                for block in f[3..].chunks(6) {
                    frame.extend_from_slice(&rotmat_to_sixd(&sixd_to_rotmat(block)?)?);
                }
                frames.push(frame);
            }
            Ok(MotionSequence::with_zeroed_start(frames, crate::synth::DEFAULT_FPS)?)
        })
        .collect()
}

pub fn generate_motion(model: &GoModel, keyposes: &KeyposeCondition, w: f64, seed: u64) -> Result<MotionSequence> {
    Ok(generate_motions(model, std::slice::from_ref(keyposes), w, &[seed])?.remove(0))
}

/// Spherical interpolation of every joint rotation between consecutive
/// keyposes, held constant before the first and after the last keyframe.
/// The root stays in place at the interpolated ground-contact height.
pub fn interpolate_baseline(
    keyposes: &KeyposeCondition,
    frame_count: usize,
    skeleton: &Skeleton,
    fps: u32,
) -> Result<MotionSequence> {
    let poses = keyposes.poses();
    let n = poses.len();
    let anchors: Vec<usize> = (0..n).map(|k| keyframe_index(k, n, frame_count)).collect();
    let rots: Vec<_> = poses.iter().map(PoseVector::rotations).collect();
    let heights: Vec<f64> = poses.iter().map(|p| ground_root_height(p, skeleton)).collect();
    let mut frames = Vec::with_capacity(frame_count);
    for f in 0..frame_count {
        let seg = anchors.iter().rposition(|&a| a <= f);
        let mut frame = vec![0.0, 0.0];
        match seg {
            Some(k) if anchors[k] == f || k + 1 == n => {
                frame.push(heights[k]);
                frame.extend_from_slice(poses[k].as_slice());
            }
            None => {
                frame.push(heights[0]);
                frame.extend_from_slice(poses[0].as_slice());
            }
            Some(k) => {
                let s = (f - anchors[k]) as f64 / (anchors[k + 1] - anchors[k]) as f64;
                frame.push(heights[k] + s * (heights[k + 1] - heights[k]));
                for (a, b) in rots[k].iter().zip(&rots[k + 1]) {
                    frame.extend_from_slice(&rotmat_to_sixd(&slerp(a, b, s))?);
                }
            }
        }
        frames.push(frame);
    }
    Ok(MotionSequence::new(frames, fps)?)
}
