//! Script-conditioned pose generation: the posture denoiser, the text/pose
//! retrieval encoders, and candidate sampling.

use promo_nn::{
    derive_seed, rng_from, sinusoidal_batch, AdamWConfig, BiGru, Embedding, FeedForward, LayerNorm, Linear,
    MultiHeadAttention, NnError, ParamId, ParamStore, Tape, Tensor, Var,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contrastive::{self, ContrastiveConfig, ContrastiveError};
use crate::diffusion::{self, Denoiser, DiffusionError, DiffusionSchedule, ScheduleKind, TrainOptions};
use crate::motion::{sixd_to_rotmat, MotionError, PoseVector, POSE_DIM};
use crate::norm::FeatureNorm;
use crate::script::{BodyPart, Clause, PostureScript, Qualifier, ScriptError, ScriptVocabulary, PAD};

#[derive(Debug, Error)]
pub enum PostureError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("candidate count must be at least 1")]
    NoCandidates,
    #[error("candidate ({frame}, {candidate}) stayed degenerate after a re-sample")]
    Degenerate { frame: usize, candidate: usize },
    #[error("checkpoint parameters do not match the model: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Contrastive(#[from] ContrastiveError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Script(#[from] ScriptError),
    #[error(transparent)]
    Motion(#[from] MotionError),
}

pub type Result<T> = std::result::Result<T, PostureError>;

// Clause vocabulary: every clause is the bag {category, first subject,
// second subject, qualifier} with one id range per role.
const SUBJ_A: usize = 5;
const SUBJ_B: usize = SUBJ_A + BodyPart::ALL.len();
const QUAL: usize = SUBJ_B + BodyPart::ALL.len();
/// Key attended to by every query, and the only one under a dropped condition.
pub const NULL_TOKEN: usize = QUAL + Qualifier::ALL.len();
pub const CLAUSE_VOCAB: usize = NULL_TOKEN + 1;

/// A script as the set of its clauses, each a bag of role-indexed ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScriptCondition {
    pub clauses: Vec<Vec<usize>>,
}

impl ScriptCondition {
    pub fn from_script(script: &PostureScript) -> Self {
        ScriptCondition { clauses: script.clauses().iter().map(clause_bag).collect() }
    }
}

fn clause_bag(c: &Clause) -> Vec<usize> {
    let mut bag = vec![c.category().index()];
    let s = c.subject();
    bag.push(SUBJ_A + s[0].index());
    if let Some(b) = s.get(1) {
        bag.push(SUBJ_B + b.index());
    }
    bag.push(QUAL + c.qualifier().index());
    bag
}

/// Key bags for a batch: position 0 holds the null token, then each item's
/// clauses, then empty padding. Returns the bags and the key mask.
fn key_bags(conds: &[Option<&ScriptCondition>]) -> (Vec<Vec<usize>>, Vec<bool>, usize) {
    let width = 1 + conds.iter().flatten().map(|c| c.clauses.len()).max().unwrap_or(0);
    let mut bags = Vec::with_capacity(conds.len() * width);
    let mut keep = Vec::with_capacity(conds.len() * width);
    for c in conds {
        bags.push(vec![NULL_TOKEN]);
        keep.push(true);
        let clauses = c.map(|c| c.clauses.as_slice()).unwrap_or(&[]);
        for k in 0..width - 1 {
            match clauses.get(k) {
                Some(bag) => {
                    bags.push(bag.clone());
                    keep.push(true);
                }
                None => {
                    bags.push(Vec::new());
                    keep.push(false);
                }
            }
        }
    }
    (bags, keep, width)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostureConfig {
    pub latent: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
}

impl Default for PostureConfig {
    fn default() -> Self {
        PostureConfig { latent: 64, layers: 3, heads: 4, dropout: 0.0 }
    }
}

#[derive(Clone, Debug)]
struct PostureLayer {
    ln1: LayerNorm,
    fc1: Linear,
    time: Linear,
    fc2: Linear,
    ln2: LayerNorm,
    attn: MultiHeadAttention,
}

/// Residual/cross-attention stack mapping a noised 132-d pose, a timestep and
/// a script to a clean-pose estimate.
#[derive(Clone, Debug)]
pub struct PostureDenoiser {
    config: PostureConfig,
    store: ParamStore<f32>,
    input: Linear,
    time_mlp: FeedForward,
    clause_table: Embedding,
    layers: Vec<PostureLayer>,
    out_ln: LayerNorm,
    out: Linear,
}

impl PostureDenoiser {
    pub fn new(config: PostureConfig, seed: u64) -> Result<Self> {
        let d = config.latent;
        if d == 0 || !d.is_multiple_of(2) || config.heads == 0 || !d.is_multiple_of(config.heads) || config.layers == 0 {
            return Err(PostureError::Mismatch(format!("invalid posture config {config:?}")));
        }
        let mut rng = rng_from(seed);
        let mut store = ParamStore::new();
        let input = Linear::new(&mut store, "input", POSE_DIM, d, &mut rng);
        let time_mlp = FeedForward::new(&mut store, "time", d, d, d, 0.0, &mut rng);
        let clause_table = Embedding::new(&mut store, "clauses", CLAUSE_VOCAB, d, &mut rng);
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let p = format!("layer{i}");
            layers.push(PostureLayer {
                ln1: LayerNorm::new(&mut store, &format!("{p}.ln1"), d),
                fc1: Linear::new(&mut store, &format!("{p}.fc1"), d, 2 * d, &mut rng),
                time: Linear::new(&mut store, &format!("{p}.time"), d, 2 * d, &mut rng),
                fc2: Linear::new(&mut store, &format!("{p}.fc2"), 2 * d, d, &mut rng),
                ln2: LayerNorm::new(&mut store, &format!("{p}.ln2"), d),
                attn: MultiHeadAttention::new(&mut store, &format!("{p}.attn"), d, config.heads, config.dropout, &mut rng)?,
            });
        }
        let out_ln = LayerNorm::new(&mut store, "out_ln", d);
        let out = Linear::new(&mut store, "out", d, POSE_DIM, &mut rng);
        Ok(PostureDenoiser { config, store, input, time_mlp, clause_table, layers, out_ln, out })
    }

    pub fn config(&self) -> PostureConfig {
        self.config
    }

    /// Replaces the weights with `params`, which must match names and shapes.
    pub fn load_params(&mut self, params: ParamStore<f32>) -> Result<()> {
        replace_params(&mut self.store, params).map_err(PostureError::Mismatch)
    }
}

/// Swaps in `params` if its tensor names and shapes match `store` exactly.
pub(crate) fn replace_params(store: &mut ParamStore<f32>, params: ParamStore<f32>) -> std::result::Result<(), String> {
    if store.len() != params.len() {
        return Err(format!("{} tensors, expected {}", params.len(), store.len()));
    }
    for ((_, n1, t1), (_, n2, t2)) in store.iter().zip(params.iter()) {
        if n1 != n2 || t1.shape() != t2.shape() {
            return Err(format!("{n2} {:?} where {n1} {:?} expected", t2.shape(), t1.shape()));
        }
    }
    *store = params;
    Ok(())
}

impl Denoiser<f32> for PostureDenoiser {
    type Condition = ScriptCondition;

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
        cond: &[Option<&ScriptCondition>],
    ) -> std::result::Result<Var, NnError> {
        let b = t.len();
        let d = self.config.latent;
        let mut h = self.input.forward(tape, x_t);
        let temb = tape.leaf(sinusoidal_batch(t, d)?);
        let temb = self.time_mlp.forward(tape, temb);
        let (bags, keep, width) = key_bags(cond);
        let keys = self.clause_table.bag(tape, &bags);
        let keys = tape.reshape(keys, &[b, width, d]);
        for layer in &self.layers {
            let a = layer.ln1.forward(tape, h);
            let a = layer.fc1.forward(tape, a);
            let tt = layer.time.forward(tape, temb);
            let a = tape.add(a, tt);
            let a = tape.gelu(a);
            let a = tape.dropout(a, self.config.dropout);
            let a = layer.fc2.forward(tape, a);
            h = tape.add(h, a);
            let q = layer.ln2.forward(tape, h);
            let q = tape.reshape(q, &[b, 1, d]);
            let c = layer.attn.forward(tape, q, keys, Some(&keep))?;
            let c = tape.reshape(c, &[b, d]);
            h = tape.add(h, c);
        }
        let h = self.out_ln.forward(tape, h);
        Ok(self.out.forward(tape, h))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostureTrainConfig {
    pub model: PostureConfig,
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub condition_dropout: f64,
}

impl Default for PostureTrainConfig {
    fn default() -> Self {
        PostureTrainConfig {
            model: PostureConfig::default(),
            steps: 1000,
            schedule: ScheduleKind::Linear,
            epochs: 200,
            batch_size: 64,
            lr: 1e-3,
            condition_dropout: 0.1,
        }
    }
}

/// A posture denoiser together with its noise schedule and the feature
/// standardization its inputs and outputs live in.
#[derive(Clone, Debug)]
pub struct PostureModel {
    pub denoiser: PostureDenoiser,
    pub schedule: DiffusionSchedule,
    pub norm: FeatureNorm,
}

impl PostureModel {
    pub fn new(config: PostureConfig, schedule: DiffusionSchedule, norm: FeatureNorm, seed: u64) -> Result<Self> {
        Ok(PostureModel { denoiser: PostureDenoiser::new(config, seed)?, schedule, norm })
    }
}

pub fn train_posture_diffuser(
    pairs: &[(PoseVector, PostureScript)],
    cfg: &PostureTrainConfig,
    seed: u64,
    on_epoch: impl FnMut(usize, f64),
) -> Result<(PostureModel, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(PostureError::EmptyDataset);
    }
    let norm = FeatureNorm::fit(pairs.iter().map(|(p, _)| p.as_slice()), POSE_DIM);
    let schedule = DiffusionSchedule::new(cfg.schedule, cfg.steps)?;
    let mut model = PostureModel::new(cfg.model, schedule, norm, derive_seed(seed, &[1]))?;
    let data: Vec<f32> = pairs.iter().flat_map(|(p, _)| model.norm.normalize(p.as_slice())).collect();
    let data = Tensor::new(vec![pairs.len(), POSE_DIM], data)?;
    let conds: Vec<ScriptCondition> = pairs.iter().map(|(_, s)| ScriptCondition::from_script(s)).collect();
    let opts = TrainOptions {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        optimizer: AdamWConfig { lr: cfg.lr, ..AdamWConfig::default() },
        condition_dropout: cfg.condition_dropout,
    };
    let history =
        diffusion::train_loop(&mut model.denoiser, &data, &conds, &model.schedule, &opts, derive_seed(seed, &[2]), on_epoch)?;
    Ok((model, history))
}

/// `poses[i][j]` is the j-th candidate for `scripts[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub scripts: Vec<PostureScript>,
    pub poses: Vec<Vec<PoseVector>>,
}

impl CandidateSet {
    pub fn frames(&self) -> usize {
        self.scripts.len()
    }

    pub fn candidates(&self) -> usize {
        self.poses.first().map_or(0, |p| p.len())
    }
}

/// Samples `l` poses per script. Candidate `(i, j)` uses its own seed, so the
/// result does not depend on how the work is batched.
pub fn generate_candidates(
    model: &PostureModel,
    scripts: &[PostureScript],
    l: usize,
    w: f64,
    seed: u64,
) -> Result<CandidateSet> {
    if l == 0 {
        return Err(PostureError::NoCandidates);
    }
    let conds: Vec<ScriptCondition> = scripts.iter().map(ScriptCondition::from_script).collect();
    let mut refs = Vec::with_capacity(scripts.len() * l);
    let mut seeds = Vec::with_capacity(scripts.len() * l);
    for (i, c) in conds.iter().enumerate() {
        for j in 0..l {
            refs.push(Some(c));
            seeds.push(derive_seed(seed, &[i as u64, j as u64]));
        }
    }
    let mut poses: Vec<Vec<PoseVector>> = vec![Vec::with_capacity(l); scripts.len()];
    if scripts.is_empty() {
        return Ok(CandidateSet { scripts: Vec::new(), poses });
    }
    let out = diffusion::sample_batch(&model.denoiser, &model.schedule, &refs, w, &[POSE_DIM], &seeds)?;
    for (k, row) in out.data().chunks(POSE_DIM).enumerate() {
        let (i, j) = (k / l, k % l);
        let pose = match to_pose(&model.norm, row) {
            Some(p) => p,
            None => {
                let retry_seed = derive_seed(seed, &[i as u64, j as u64, 1]);
                let again = diffusion::sample(&model.denoiser, &model.schedule, Some(&conds[i]), w, &[POSE_DIM], retry_seed)?;
                to_pose(&model.norm, &again).ok_or(PostureError::Degenerate { frame: i, candidate: j })?
            }
        };
        poses[i].push(pose);
    }
    Ok(CandidateSet { scripts: scripts.to_vec(), poses })
}

/// Maps a normalized network output to a pose with orthonormal 6D blocks.
fn to_pose(norm: &FeatureNorm, row: &[f32]) -> Option<PoseVector> {
    let raw = norm.denormalize(row);
    let rots: Option<Vec<_>> = raw.chunks(6).map(|b| sixd_to_rotmat(b).ok()).collect();
    PoseVector::from_rotations(&rots?).ok()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub embed_dim: usize,
    pub token_dim: usize,
    pub gru_hidden: usize,
    pub pose_hidden: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig { embed_dim: 128, token_dim: 32, gru_hidden: 64, pose_hidden: 256 }
    }
}

/// Token embedding, bidirectional GRU and a linear head onto the unit sphere.
#[derive(Clone, Debug)]
pub struct TextEncoderPhi {
    tokens: Embedding,
    gru: BiGru,
    head: Linear,
}

/// Feed-forward pose encoder onto the unit sphere.
#[derive(Clone, Debug)]
pub struct PoseEncoderTheta {
    l1: Linear,
    l2: Linear,
    l3: Linear,
}

/// Both retrieval encoders and their shared learnable temperature.
#[derive(Clone, Debug)]
pub struct RetrievalEncoders {
    config: RetrievalConfig,
    store: ParamStore<f32>,
    vocab: ScriptVocabulary,
    pub phi: TextEncoderPhi,
    pub theta: PoseEncoderTheta,
    log_scale: ParamId,
}

const ENCODE_CHUNK: usize = 256;

impl RetrievalEncoders {
    pub fn new(config: RetrievalConfig, seed: u64) -> Self {
        let vocab = ScriptVocabulary::standard();
        let mut rng = rng_from(seed);
        let mut store = ParamStore::new();
        let phi = TextEncoderPhi {
            tokens: Embedding::new(&mut store, "phi.tokens", vocab.len(), config.token_dim, &mut rng),
            gru: BiGru::new(&mut store, "phi.gru", config.token_dim, config.gru_hidden, &mut rng),
            head: Linear::new(&mut store, "phi.head", 2 * config.gru_hidden, config.embed_dim, &mut rng),
        };
        let theta = PoseEncoderTheta {
            l1: Linear::new(&mut store, "theta.l1", POSE_DIM, config.pose_hidden, &mut rng),
            l2: Linear::new(&mut store, "theta.l2", config.pose_hidden, config.pose_hidden, &mut rng),
            l3: Linear::new(&mut store, "theta.l3", config.pose_hidden, config.embed_dim, &mut rng),
        };
        let log_scale = contrastive::add_logit_scale(&mut store, "logit_scale");
        RetrievalEncoders { config, store, vocab, phi, theta, log_scale }
    }

    pub fn config(&self) -> RetrievalConfig {
        self.config
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn load_params(&mut self, params: ParamStore<f32>) -> Result<()> {
        replace_params(&mut self.store, params).map_err(PostureError::Mismatch)
    }

    fn text_var(&self, tape: &mut Tape<'_, f32>, scripts: &[&PostureScript]) -> std::result::Result<Var, NnError> {
        let ids: Vec<Vec<usize>> = scripts
            .iter()
            .map(|s| self.vocab.encode_text(s.text()).expect("rendered scripts use the standard vocabulary"))
            .collect();
        let len = ids.iter().map(Vec::len).max().unwrap_or(1).max(1);
        let mut flat = Vec::with_capacity(ids.len() * len);
        for row in &ids {
            flat.extend_from_slice(row);
            flat.extend(std::iter::repeat_n(PAD, len - row.len()));
        }
        let keep: Vec<bool> = flat.iter().map(|&i| i != PAD).collect();
        let x = self.phi.tokens.lookup(tape, &flat);
        let x = tape.reshape(x, &[ids.len(), len, self.config.token_dim]);
        let h = self.phi.gru.forward(tape, x, Some(&keep));
        let y = self.phi.head.forward(tape, h);
        Ok(tape.l2_normalize(y))
    }

    fn pose_var(&self, tape: &mut Tape<'_, f32>, poses: &[&PoseVector]) -> std::result::Result<Var, NnError> {
        let data: Vec<f32> = poses.iter().flat_map(|p| p.as_slice().iter().map(|&v| v as f32)).collect();
        let x = tape.leaf(Tensor::new(vec![poses.len(), POSE_DIM], data)?);
        let h = self.theta.l1.forward(tape, x);
        let h = tape.gelu(h);
        let h = self.theta.l2.forward(tape, h);
        let h = tape.gelu(h);
        let y = self.theta.l3.forward(tape, h);
        Ok(tape.l2_normalize(y))
    }

    /// Unit-norm Φ embeddings.
    pub fn encode_scripts(&self, scripts: &[PostureScript]) -> Result<Vec<Vec<f32>>> {
        Ok(contrastive::embed_rows(&self.store, scripts.len(), ENCODE_CHUNK, |tape, idx| {
            let s: Vec<&PostureScript> = idx.iter().map(|&i| &scripts[i]).collect();
            self.text_var(tape, &s)
        })?)
    }

    /// Unit-norm Θ embeddings.
    pub fn encode_poses(&self, poses: &[PoseVector]) -> Result<Vec<Vec<f32>>> {
        Ok(contrastive::embed_rows(&self.store, poses.len(), ENCODE_CHUNK, |tape, idx| {
            let p: Vec<&PoseVector> = idx.iter().map(|&i| &poses[i]).collect();
            self.pose_var(tape, &p)
        })?)
    }
}

pub fn train_retrieval_encoders(
    pairs: &[(PoseVector, PostureScript)],
    config: RetrievalConfig,
    train: &ContrastiveConfig,
    seed: u64,
    on_epoch: impl FnMut(usize, f64),
) -> Result<(RetrievalEncoders, Vec<f64>)> {
    let mut enc = RetrievalEncoders::new(config, derive_seed(seed, &[1]));
    let mut store = std::mem::take(&mut enc.store);
    let history = contrastive::train_contrastive(
        &mut store,
        enc.log_scale,
        pairs.len(),
        train,
        derive_seed(seed, &[2]),
        |tape, idx| {
            let s: Vec<&PostureScript> = idx.iter().map(|&i| &pairs[i].1).collect();
            let p: Vec<&PoseVector> = idx.iter().map(|&i| &pairs[i].0).collect();
            Ok((enc.text_var(tape, &s)?, enc.pose_var(tape, &p)?))
        },
        on_epoch,
    );
    enc.store = store;
    Ok((enc, history?))
}
