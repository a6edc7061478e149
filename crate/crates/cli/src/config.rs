use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use promo_core::contrastive::ContrastiveConfig;
use promo_core::go::{GoTrainConfig, MAX_KEYPOSES};
use promo_core::metrics::ExtractorConfig;
use promo_core::planner::{EndpointConfig, ALLOWED_FPS};
use promo_core::posture::{PostureTrainConfig, RetrievalConfig};
use promo_core::synth::{DEFAULT_FPS, PLAN_FRAMES};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MAX_CANDIDATES: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostureSection {
    #[serde(flatten)]
    pub train: PostureTrainConfig,
    pub guidance: f64,
}

impl Default for PostureSection {
    fn default() -> Self {
        PostureSection { train: PostureTrainConfig::default(), guidance: 2.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GoSection {
    #[serde(flatten)]
    pub train: GoTrainConfig,
    pub guidance: f64,
}

impl Default for GoSection {
    fn default() -> Self {
        GoSection { train: GoTrainConfig::default(), guidance: 2.0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSection {
    pub model: RetrievalConfig,
    #[serde(flatten)]
    pub train: ContrastiveConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorSection {
    pub model: ExtractorConfig,
    #[serde(flatten)]
    pub train: ContrastiveConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerSection {
    /// Call the chat endpoint instead of the bundled stub plans.
    pub live: bool,
    #[serde(flatten)]
    pub endpoint: EndpointConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationSection {
    /// Candidate poses per keyframe.
    pub candidates: usize,
    /// Keyframes per plan.
    pub frames: usize,
    pub fps: u32,
}

impl Default for GenerationSection {
    fn default() -> Self {
        GenerationSection { candidates: 16, frames: PLAN_FRAMES, fps: DEFAULT_FPS }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub poses: Option<PathBuf>,
    pub motions: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointSection {
    pub posture: PathBuf,
    pub encoders: PathBuf,
    pub go: PathBuf,
    pub extractors: PathBuf,
}

impl Default for CheckpointSection {
    fn default() -> Self {
        CheckpointSection {
            posture: "checkpoints/posture.pmck".into(),
            encoders: "checkpoints/encoders.pmck".into(),
            go: "checkpoints/go.pmck".into(),
            extractors: "checkpoints/extractors.pmck".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub posture: PostureSection,
    pub go: GoSection,
    pub encoders: EncoderSection,
    pub extractors: ExtractorSection,
    pub planner: PlannerSection,
    pub generation: GenerationSection,
    pub data: DataSection,
    pub checkpoints: CheckpointSection,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).context("parsing config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::from_toml(&text).with_context(|| format!("in {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    /// Defaults when no file is given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.data.poses, &mut self.data.motions].into_iter().flatten() {
            fix(p);
        }
        let c = &mut self.checkpoints;
        for p in [&mut c.posture, &mut c.encoders, &mut c.go, &mut c.extractors] {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("posture.guidance", self.posture.guidance), ("go.guidance", self.go.guidance)] {
            if !w.is_finite() {
                bail!("{name} must be finite, got {w}");
            }
        }
        let g = &self.generation;
        if g.candidates == 0 || g.candidates > MAX_CANDIDATES {
            bail!("generation.candidates must be in 1..={MAX_CANDIDATES}, got {}", g.candidates);
        }
        if g.frames == 0 || g.frames > MAX_KEYPOSES {
            bail!("generation.frames must be in 1..={MAX_KEYPOSES}, got {}", g.frames);
        }
        if !ALLOWED_FPS.contains(&g.fps) {
            bail!("generation.fps must be one of {ALLOWED_FPS:?}, got {}", g.fps);
        }
        self.planner.endpoint.validate()?;
        Ok(())
    }

    /// SHA-256 of the config's canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
