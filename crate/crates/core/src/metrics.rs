use nalgebra::{DMatrix, DVector, SymmetricEigen, Vector3};
use promo_nn::layers::{Embedding, Linear};
use promo_nn::{derive_seed, rng_from, NnError, ParamId, ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contrastive::{self, ContrastiveConfig, ContrastiveError};
use crate::motion::{heading, rot_z, rotmat_to_sixd, sixd_to_rotmat, MotionSequence, FRAME_DIM, NUM_JOINTS, SEQ_LEN};
use crate::norm::FeatureNorm;
use crate::posture::replace_params;
use crate::script::{PostureScript, ScriptVocabulary, PAD};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("length mismatch: {0} vs {1}")]
    Count(usize, usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("need at least {need} frames, got {got}")]
    TooFewFrames { need: usize, got: usize },
    #[error("empty input")]
    Empty,
    #[error("covariance is not symmetric (off by {0:e})")]
    NotSymmetric(f64),
    #[error("K = {k} exceeds pool size {n}")]
    KTooLarge { k: usize, n: usize },
    #[error(transparent)]
    Contrastive(#[from] ContrastiveError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("parameter mismatch: {0}")]
    Mismatch(String),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Per-frame joint positions in metres, `[frame][joint]`.
pub type JointTrajectory = Vec<Vec<Vector3<f64>>>;

fn dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RPrecision {
    /// `(K, fraction)` in the order requested.
    pub r_at_k: Vec<(usize, f64)>,
    pub median_rank: f64,
}

/// Ranks every text against each motion by Euclidean distance. The rank of
/// the true description is one plus the number of strictly closer texts.
pub fn r_precision(motion: &[Vec<f32>], text: &[Vec<f32>], ks: &[usize]) -> Result<RPrecision> {
    if motion.len() != text.len() {
        return Err(MetricError::Count(motion.len(), text.len()));
    }
    let n = motion.len();
    if n == 0 {
        return Err(MetricError::Empty);
    }
    if let Some(&k) = ks.iter().find(|&&k| k > n || k == 0) {
        return Err(MetricError::KTooLarge { k, n });
    }
    let mut ranks: Vec<usize> = motion
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let own = dist(m, &text[i]);
            1 + text.iter().filter(|t| dist(m, t) < own).count()
        })
        .collect();
    let r_at_k = ks.iter().map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64)).collect();
    ranks.sort_unstable();
    let median_rank =
        if n % 2 == 1 { ranks[n / 2] as f64 } else { (ranks[n / 2 - 1] + ranks[n / 2]) as f64 / 2.0 };
    Ok(RPrecision { r_at_k, median_rank })
}

pub fn multimodal_distance(motion: &[Vec<f32>], text: &[Vec<f32>]) -> Result<f64> {
    if motion.len() != text.len() {
        return Err(MetricError::Count(motion.len(), text.len()));
    }
    if motion.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(motion.iter().zip(text).map(|(m, t)| dist(m, t)).sum::<f64>() / motion.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(MetricError::Shape(format!("mean {} vs covariance {:?}", mean.len(), cov.shape())));
        }
        let asym = (&cov - cov.transpose()).amax();
        if asym > 1e-8 {
            return Err(MetricError::NotSymmetric(asym));
        }
        Ok(GaussianStats { mean, cov })
    }

    /// Sample mean and unbiased covariance; a single row gives zero covariance.
    pub fn fit(features: &[Vec<f32>]) -> Result<Self> {
        let n = features.len();
        let d = features.first().ok_or(MetricError::Empty)?.len();
        if let Some(f) = features.iter().find(|f| f.len() != d) {
            return Err(MetricError::Shape(format!("feature of length {} among length {d}", f.len())));
        }
        let x = DMatrix::from_fn(n, d, |i, j| features[i][j] as f64);
        let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
        let mut cov = centered.transpose() * &centered / denom;
        cov = (&cov + cov.transpose()) * 0.5;
        GaussianStats::new(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Square root of a symmetric PSD matrix with eigenvalues floored at zero.
fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

pub fn fid(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(MetricError::Shape(format!("dimensions {} vs {}", a.dim(), b.dim())));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let sa = sym_sqrt(&a.cov);
    let inner = &sa * &b.cov * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    Ok((diff + a.cov.trace() + b.cov.trace() - 2.0 * cross).max(0.0))
}

/// Squared norm of the second temporal difference, averaged over interior
/// frames and joints.
pub fn smoothness(traj: &JointTrajectory) -> Result<f64> {
    let f = traj.len();
    if f < 3 {
        return Err(MetricError::TooFewFrames { need: 3, got: f });
    }
    let j = traj[0].len();
    check_joints(traj, j)?;
    let mut sum = 0.0;
    for t in 1..f - 1 {
        for k in 0..j {
            let acc = traj[t + 1][k] - 2.0 * traj[t][k] + traj[t - 1][k];
            sum += acc.norm_squared();
        }
    }
    Ok(sum / ((f - 2) * j) as f64)
}

fn check_joints(traj: &JointTrajectory, j: usize) -> Result<()> {
    if j == 0 || traj.iter().any(|fr| fr.len() != j) {
        return Err(MetricError::Shape("every frame needs the same non-zero joint count".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorVariant {
    /// Root joint, all three coordinates.
    RootJoint,
    /// Root joint, ground-plane coordinates only.
    GlobalTraj,
    /// All joints relative to the root of the same frame.
    MeanLocal,
    /// All joints in world coordinates.
    MeanGlobal,
}

impl ErrorVariant {
    pub const ALL: [ErrorVariant; 4] =
        [ErrorVariant::RootJoint, ErrorVariant::GlobalTraj, ErrorVariant::MeanLocal, ErrorVariant::MeanGlobal];

    pub fn name(self) -> &'static str {
        match self {
            ErrorVariant::RootJoint => "root_joint",
            ErrorVariant::GlobalTraj => "global_traj",
            ErrorVariant::MeanLocal => "mean_local",
            ErrorVariant::MeanGlobal => "mean_global",
        }
    }

    /// Selected joints and the coordinate transform of one frame.
    fn select(self, frame: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        match self {
            ErrorVariant::RootJoint => vec![frame[0]],
            ErrorVariant::GlobalTraj => vec![Vector3::new(frame[0].x, frame[0].y, 0.0)],
            ErrorVariant::MeanLocal => frame.iter().map(|p| p - frame[0]).collect(),
            ErrorVariant::MeanGlobal => frame.to_vec(),
        }
    }
}

fn check_pair(gen: &[JointTrajectory], reference: &[JointTrajectory]) -> Result<()> {
    if gen.len() != reference.len() {
        return Err(MetricError::Count(gen.len(), reference.len()));
    }
    if gen.is_empty() {
        return Err(MetricError::Empty);
    }
    for (g, r) in gen.iter().zip(reference) {
        if g.len() != r.len() || g.is_empty() {
            return Err(MetricError::Shape(format!("{} vs {} frames", g.len(), r.len())));
        }
        check_joints(g, g[0].len())?;
        check_joints(r, g[0].len())?;
    }
    Ok(())
}

/// Average positional error: mean L2 distance over samples and frames,
/// averaged over the variant's joints.
pub fn ape(gen: &[JointTrajectory], reference: &[JointTrajectory], variant: ErrorVariant) -> Result<f64> {
    check_pair(gen, reference)?;
    let mut total = 0.0;
    for (g, r) in gen.iter().zip(reference) {
        let mut per_sample = 0.0;
        for (gf, rf) in g.iter().zip(r) {
            let (gs, rs) = (variant.select(gf), variant.select(rf));
            per_sample += gs.iter().zip(&rs).map(|(a, b)| (a - b).norm()).sum::<f64>() / gs.len() as f64;
        }
        total += per_sample / g.len() as f64;
    }
    Ok(total / gen.len() as f64)
}

/// Unbiased temporal variance of every selected joint coordinate.
fn variances(traj: &JointTrajectory, variant: ErrorVariant) -> Vec<Vector3<f64>> {
    let sel: Vec<Vec<Vector3<f64>>> = traj.iter().map(|f| variant.select(f)).collect();
    let f = sel.len() as f64;
    (0..sel[0].len())
        .map(|j| {
            let mean = sel.iter().map(|fr| fr[j]).sum::<Vector3<f64>>() / f;
            sel.iter().map(|fr| (fr[j] - mean).component_mul(&(fr[j] - mean))).sum::<Vector3<f64>>() / (f - 1.0)
        })
        .collect()
}

/// Average variance error: per joint, the L2 distance between temporal
/// variance vectors, averaged over samples and then over joints.
pub fn ave(gen: &[JointTrajectory], reference: &[JointTrajectory], variant: ErrorVariant) -> Result<f64> {
    check_pair(gen, reference)?;
    if let Some(t) = gen.iter().find(|t| t.len() < 2) {
        return Err(MetricError::TooFewFrames { need: 2, got: t.len() });
    }
    let mut per_joint: Vec<f64> = Vec::new();
    for (g, r) in gen.iter().zip(reference) {
        let (vg, vr) = (variances(g, variant), variances(r, variant));
        per_joint.resize(vg.len(), 0.0);
        for (acc, (a, b)) in per_joint.iter_mut().zip(vg.iter().zip(&vr)) {
            *acc += (a - b).norm() / gen.len() as f64;
        }
    }
    Ok(per_joint.iter().sum::<f64>() / per_joint.len() as f64)
}

/// One entry of a metric report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub variant: Option<String>,
    pub value: f64,
    pub n: usize,
}

impl MetricRecord {
    pub fn new(metric: &str, variant: Option<&str>, value: f64, n: usize) -> Self {
        MetricRecord { metric: metric.into(), variant: variant.map(Into::into), value, n }
    }
}

/// Joint positions of every motion, integrated from the origin.
pub fn trajectories(motions: &[MotionSequence], skeleton: &crate::motion::Skeleton) -> Vec<JointTrajectory> {
    motions
        .iter()
        .map(|m| crate::motion::motion_joint_positions(&crate::motion::decode_motion(m, [0.0, 0.0]), skeleton))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub token_dim: usize,
    /// Temporal segments pooled separately on the motion side; also the
    /// number of plan slots on the text side.
    pub segments: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig { embed_dim: 64, hidden: 128, token_dim: 64, segments: 4 }
    }
}

/// Contrastively trained motion and plan-text encoders onto the unit sphere.
#[derive(Clone, Debug)]
pub struct FeatureExtractorPair {
    config: ExtractorConfig,
    store: ParamStore<f32>,
    vocab: ScriptVocabulary,
    norm: FeatureNorm,
    frame1: Linear,
    frame2: Linear,
    motion_head: Linear,
    tokens: Embedding,
    slots: Embedding,
    text1: Linear,
    text_head: Linear,
    log_scale: ParamId,
}

const EMBED_CHUNK: usize = 128;

/// The sequence rotated about z so its first frame faces +y.
fn canonical(m: &MotionSequence) -> MotionSequence {
    let first = sixd_to_rotmat(&m.frames()[0][3..9]).expect("sequence frames hold valid 6D blocks");
    let r = rot_z(-heading(&first));
    let frames = m
        .frames()
        .iter()
        .map(|f| {
            let mut out = f.clone();
            out[0] = r[(0, 0)] * f[0] + r[(0, 1)] * f[1];
            out[1] = r[(1, 0)] * f[0] + r[(1, 1)] * f[1];
            let root = sixd_to_rotmat(&f[3..9]).expect("sequence frames hold valid 6D blocks");
            out[3..9].copy_from_slice(&rotmat_to_sixd(&(r * root)).expect("rotation"));
            out
        })
        .collect();
    MotionSequence::new(frames, m.fps()).expect("rotation keeps the frame layout")
}

impl FeatureExtractorPair {
    pub fn new(config: ExtractorConfig, norm: FeatureNorm, seed: u64) -> Result<Self> {
        if norm.dim() != FRAME_DIM {
            return Err(MetricError::Shape(format!("motion norm has {} features", norm.dim())));
        }
        if config.segments == 0 || !SEQ_LEN.is_multiple_of(config.segments) {
            return Err(MetricError::Shape(format!("{} segments do not divide {SEQ_LEN} frames", config.segments)));
        }
        let vocab = ScriptVocabulary::standard();
        let mut rng = rng_from(seed);
        let mut store = ParamStore::new();
        let (h, e) = (config.hidden, config.embed_dim);
        let frame1 = Linear::new(&mut store, "motion.frame1", FRAME_DIM, h, &mut rng);
        let frame2 = Linear::new(&mut store, "motion.frame2", h, h, &mut rng);
        let motion_head = Linear::new(&mut store, "motion.head", config.segments * h, e, &mut rng);
        let tokens = Embedding::new(&mut store, "text.tokens", vocab.len(), config.token_dim, &mut rng);
        let slots = Embedding::new(&mut store, "text.slots", config.segments, config.token_dim, &mut rng);
        let text1 = Linear::new(&mut store, "text.l1", config.token_dim, h, &mut rng);
        let text_head = Linear::new(&mut store, "text.head", h, e, &mut rng);
        let log_scale = contrastive::add_logit_scale(&mut store, "logit_scale");
        Ok(FeatureExtractorPair {
            config,
            store,
            vocab,
            norm,
            frame1,
            frame2,
            motion_head,
            tokens,
            slots,
            text1,
            text_head,
            log_scale,
        })
    }

    pub fn config(&self) -> ExtractorConfig {
        self.config
    }

    pub fn norm(&self) -> &FeatureNorm {
        &self.norm
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn load_params(&mut self, params: ParamStore<f32>) -> Result<()> {
        replace_params(&mut self.store, params).map_err(MetricError::Mismatch)
    }

    fn motion_var(&self, tape: &mut Tape<'_, f32>, motions: &[&MotionSequence]) -> std::result::Result<Var, NnError> {
        let b = motions.len();
        let (h, s) = (self.config.hidden, self.config.segments);
        let data: Vec<f32> = motions.iter().flat_map(|m| self.norm.normalize(&m.flat())).collect();
        let x = tape.leaf(Tensor::new(vec![b, SEQ_LEN, FRAME_DIM], data)?);
        let y = self.frame1.forward(tape, x);
        let y = tape.gelu(y);
        let y = self.frame2.forward(tape, y);
        let y = tape.gelu(y);
        let per = SEQ_LEN / s;
        let y = tape.reshape(y, &[b * s, per, h]);
        let y = tape.weighted_seq_sum(y, &vec![1.0 / per as f32; b * s * per]);
        let y = tape.reshape(y, &[b, s * h]);
        let y = self.motion_head.forward(tape, y);
        Ok(tape.l2_normalize(y))
    }

    fn text_var(&self, tape: &mut Tape<'_, f32>, plans: &[&[PostureScript]]) -> std::result::Result<Var, NnError> {
        let s = self.config.segments;
        let rows: Vec<(Vec<usize>, Vec<usize>)> = plans
            .iter()
            .map(|plan| {
                let mut ids = Vec::new();
                let mut slot = Vec::new();
                for (k, script) in plan.iter().enumerate() {
                    let t = self.vocab.encode_text(script.text()).expect("rendered scripts use the standard vocabulary");
                    slot.extend(std::iter::repeat_n((k * s) / plan.len().max(1), t.len()));
                    ids.extend(t);
                }
                (ids, slot)
            })
            .collect();
        let len = rows.iter().map(|r| r.0.len()).max().unwrap_or(1).max(1);
        let (mut ids, mut slots, mut weights) = (Vec::new(), Vec::new(), Vec::new());
        for (row_ids, row_slots) in &rows {
            let w = 1.0 / row_ids.len().max(1) as f32;
            for i in 0..len {
                ids.push(row_ids.get(i).copied().unwrap_or(PAD));
                slots.push(row_slots.get(i).copied().unwrap_or(0));
                weights.push(if i < row_ids.len() { w } else { 0.0 });
            }
        }
        let t = self.tokens.lookup(tape, &ids);
        let p = self.slots.lookup(tape, &slots);
        let x = tape.add(t, p);
        let x = tape.reshape(x, &[plans.len(), len, self.config.token_dim]);
        let x = tape.weighted_seq_sum(x, &weights);
        let y = self.text1.forward(tape, x);
        let y = tape.gelu(y);
        let y = self.text_head.forward(tape, y);
        Ok(tape.l2_normalize(y))
    }

    pub fn encode_motions(&self, motions: &[MotionSequence]) -> Result<Vec<Vec<f32>>> {
        if let Some(m) = motions.iter().find(|m| m.len() != SEQ_LEN) {
            return Err(MetricError::TooFewFrames { need: SEQ_LEN, got: m.len() });
        }
        let motions: Vec<MotionSequence> = motions.iter().map(canonical).collect();
        Ok(contrastive::embed_rows(&self.store, motions.len(), EMBED_CHUNK, |tape, idx| {
            let m: Vec<&MotionSequence> = idx.iter().map(|&i| &motions[i]).collect();
            self.motion_var(tape, &m)
        })?)
    }

    pub fn encode_plans(&self, plans: &[Vec<PostureScript>]) -> Result<Vec<Vec<f32>>> {
        Ok(contrastive::embed_rows(&self.store, plans.len(), EMBED_CHUNK, |tape, idx| {
            let p: Vec<&[PostureScript]> = idx.iter().map(|&i| plans[i].as_slice()).collect();
            self.text_var(tape, &p)
        })?)
    }
}

pub fn train_feature_extractors(
    motions: &[MotionSequence],
    plans: &[Vec<PostureScript>],
    config: ExtractorConfig,
    train: &ContrastiveConfig,
    seed: u64,
    on_epoch: impl FnMut(usize, f64),
) -> Result<(FeatureExtractorPair, Vec<f64>)> {
    if motions.len() != plans.len() {
        return Err(MetricError::Count(motions.len(), plans.len()));
    }
    if motions.is_empty() {
        return Err(MetricError::Empty);
    }
    if let Some(m) = motions.iter().find(|m| m.len() != SEQ_LEN) {
        return Err(MetricError::TooFewFrames { need: SEQ_LEN, got: m.len() });
    }
    let motions: Vec<MotionSequence> = motions.iter().map(canonical).collect();
    let norm = FeatureNorm::fit(motions.iter().flat_map(|m| m.frames().iter().map(Vec::as_slice)), FRAME_DIM);
    let mut pair = FeatureExtractorPair::new(config, norm, derive_seed(seed, &[1]))?;
    let mut store = std::mem::take(&mut pair.store);
    let history = contrastive::train_contrastive(
        &mut store,
        pair.log_scale,
        motions.len(),
        train,
        derive_seed(seed, &[2]),
        |tape, idx| {
            let m: Vec<&MotionSequence> = idx.iter().map(|&i| &motions[i]).collect();
            let p: Vec<&[PostureScript]> = idx.iter().map(|&i| plans[i].as_slice()).collect();
            Ok((pair.motion_var(tape, &m)?, pair.text_var(tape, &p)?))
        },
        on_epoch,
    );
    pair.store = store;
    Ok((pair, history?))
}

pub const DEFAULT_SIMILARITY_THRESHOLD: f64 = 0.45;

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Indices of `a` whose maximum cosine similarity to every row of `b` is at
/// most `alpha`.
pub fn filter_by_similarity(a: &[Vec<f32>], b: &[Vec<f32>], alpha: f64) -> Vec<usize> {
    (0..a.len()).filter(|&i| b.iter().all(|bj| cosine(&a[i], bj) <= alpha)).collect()
}

/// Drops every plan of `a` too similar to some plan of `b` under the text encoder.
pub fn similarity_filter(
    a: &[Vec<PostureScript>],
    b: &[Vec<PostureScript>],
    encoder: &FeatureExtractorPair,
    alpha: f64,
) -> Result<Vec<usize>> {
    if b.is_empty() {
        return Ok((0..a.len()).collect());
    }
    let (ea, eb) = (encoder.encode_plans(a)?, encoder.encode_plans(b)?);
    Ok(filter_by_similarity(&ea, &eb, alpha))
}

/// Every metric of one generated/reference set, using `extractor` features
/// for FID and the retrieval metrics when given.
pub fn evaluate_sets(
    gen: &[MotionSequence],
    reference: &[MotionSequence],
    plans: Option<&[Vec<PostureScript>]>,
    extractor: Option<&FeatureExtractorPair>,
    skeleton: &crate::motion::Skeleton,
) -> Result<Vec<MetricRecord>> {
    if gen.len() != reference.len() {
        return Err(MetricError::Count(gen.len(), reference.len()));
    }
    let n = gen.len();
    let (tg, tr) = (trajectories(gen, skeleton), trajectories(reference, skeleton));
    if tg.iter().chain(&tr).any(|t| t.first().is_none_or(|f| f.len() != NUM_JOINTS)) {
        return Err(MetricError::Shape(format!("trajectories must have {NUM_JOINTS} joints")));
    }
    let mut out = Vec::new();
    for v in ErrorVariant::ALL {
        out.push(MetricRecord::new("ape", Some(v.name()), ape(&tg, &tr, v)?, n));
    }
    for v in ErrorVariant::ALL {
        out.push(MetricRecord::new("ave", Some(v.name()), ave(&tg, &tr, v)?, n));
    }
    let smooth = tg.iter().map(smoothness).sum::<Result<f64>>()? / n as f64;
    out.push(MetricRecord::new("smoothness", None, smooth, n));
    if let Some(ex) = extractor {
        let (fg, fr) = (ex.encode_motions(gen)?, ex.encode_motions(reference)?);
        out.push(MetricRecord::new("fid", None, fid(&GaussianStats::fit(&fg)?, &GaussianStats::fit(&fr)?)?, n));
        if let Some(plans) = plans {
            let ft = ex.encode_plans(plans)?;
            let ks: Vec<usize> = [1, 2, 3].into_iter().filter(|&k| k <= n).collect();
            let rp = r_precision(&fg, &ft, &ks)?;
            for (k, v) in rp.r_at_k {
                out.push(MetricRecord::new("r_precision", Some(&format!("top{k}")), v, n));
            }
            out.push(MetricRecord::new("median_rank", None, rp.median_rank, n));
            out.push(MetricRecord::new("multimodal_distance", None, multimodal_distance(&fg, &ft)?, n));
        }
    }
    Ok(out)
}
