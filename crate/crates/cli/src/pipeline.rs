use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{ensure, Context, Result};
use promo_core::go::{generate_motion, GoModel, KeyposeCondition};
use promo_core::motion::{decode_motion, MotionSequence};
use promo_core::planner::{plan_motion, stub_plan, PlannerRequest, PlannerResponse};
use promo_core::planning::{build_matrices, viterbi_select};
use promo_core::posture::{generate_candidates, PostureModel, RetrievalEncoders};
use promo_core::script::PostureScript;
use promo_nn::derive_seed;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{sha256_hex, PipelineConfig};
use crate::dataset::MotionRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub prompt: String,
    /// `stub` or `live`.
    pub planner: String,
    pub raw_plan: String,
    pub candidates: usize,
    /// Selected candidate per keyframe.
    pub path: Vec<usize>,
    pub path_log_prob: f64,
    pub posture_guidance: f64,
    pub go_guidance: f64,
    pub posture_seed: u64,
    pub go_seed: u64,
    /// SHA-256 of each checkpoint file by model kind.
    pub checkpoints: BTreeMap<String, String>,
}

/// A generated or exported motion with the run that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionFile {
    pub frames: Vec<Vec<f64>>,
    pub fps: u32,
    pub plan: Vec<PostureScript>,
    /// Decoded world-space root positions, starting at the origin.
    pub root_positions: Vec<[f64; 3]>,
    pub seed: u64,
    pub config_hash: String,
    pub provenance: Option<Provenance>,
}

impl MotionFile {
    pub fn record(&self) -> MotionRecord {
        MotionRecord { frames: self.frames.clone(), fps: self.fps, plan: self.plan.clone() }
    }

    pub fn motion(&self) -> Result<MotionSequence> {
        self.record().motion()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let file: MotionFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        file.motion().with_context(|| format!("in {}", path.display()))?;
        Ok(file)
    }
}

pub struct Models {
    pub posture: PostureModel,
    pub encoders: RetrievalEncoders,
    pub go: GoModel,
    pub hashes: BTreeMap<String, String>,
}

fn load_checkpoint(path: &Path, what: &str, hashes: &mut BTreeMap<String, String>) -> Result<Checkpoint> {
    ensure!(path.exists(), "missing {what} checkpoint {} (run `promo train {what}` first)", path.display());
    let bytes = std::fs::read(path).with_context(|| format!("reading {what} checkpoint {}", path.display()))?;
    hashes.insert(what.to_string(), sha256_hex(&bytes));
    Checkpoint::from_bytes(&bytes).with_context(|| format!("in {what} checkpoint {}", path.display()))
}

/// Loads the three generation checkpoints named in the config.
pub fn load_models(cfg: &PipelineConfig) -> Result<Models> {
    let mut hashes = BTreeMap::new();
    let c = &cfg.checkpoints;
    let posture = load_checkpoint(&c.posture, "posture", &mut hashes)?.to_posture()?;
    let encoders = load_checkpoint(&c.encoders, "encoders", &mut hashes)?.to_encoders()?;
    let go = load_checkpoint(&c.go, "go", &mut hashes)?.to_go()?;
    Ok(Models { posture, encoders, go, hashes })
}

/// Live or stub plan depending on the config.
pub fn plan(prompt: &str, cfg: &PipelineConfig) -> Result<PlannerResponse> {
    let req = PlannerRequest::new(prompt, cfg.generation.frames, cfg.generation.fps)?;
    if cfg.planner.live {
        Ok(plan_motion(&req, &cfg.planner.endpoint)?)
    } else {
        Ok(stub_plan(&req))
    }
}

/// Plan, sample candidate poses, pick a path through them and infer the
/// full motion around the selected keyposes.
pub fn run_pipeline(prompt: &str, cfg: &PipelineConfig, seed: u64, models: &Models) -> Result<MotionFile> {
    let response = plan(prompt, cfg).context("plan stage")?;
    let (posture_seed, go_seed) = (derive_seed(seed, &[1]), derive_seed(seed, &[2]));
    let l = cfg.generation.candidates;
    let set = generate_candidates(&models.posture, &response.scripts, l, cfg.posture.guidance, posture_seed)
        .context("posture stage")?;
    let matrices = build_matrices(&set, &models.encoders).context("planning stage")?;
    let (path, score) = viterbi_select(&matrices).context("planning stage")?;
    let keyposes: Vec<_> = path.0.iter().enumerate().map(|(i, &j)| set.poses[i][j].clone()).collect();
    let keyposes = KeyposeCondition::new(keyposes).context("go stage")?;
    let motion = generate_motion(&models.go, &keyposes, cfg.go.guidance, go_seed).context("go stage")?;
    let motion = MotionSequence::new(motion.frames().to_vec(), cfg.generation.fps).context("go stage")?;
    let raw = decode_motion(&motion, [0.0, 0.0]);
    Ok(MotionFile {
        frames: motion.frames().to_vec(),
        fps: motion.fps(),
        plan: response.scripts,
        root_positions: raw.root_positions.iter().map(|p| [p.x, p.y, p.z]).collect(),
        seed,
        config_hash: cfg.hash(),
        provenance: Some(Provenance {
            prompt: prompt.to_string(),
            planner: if cfg.planner.live { "live" } else { "stub" }.into(),
            raw_plan: response.raw_text,
            candidates: l,
            path: path.0,
            path_log_prob: score,
            posture_guidance: cfg.posture.guidance,
            go_guidance: cfg.go.guidance,
            posture_seed,
            go_seed,
            checkpoints: models.hashes.clone(),
        }),
    })
}
