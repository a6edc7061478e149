use std::fmt::Write as _;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::go::MAX_KEYPOSES;
use crate::script::{parse_script, PostureScript};

pub const API_KEY_ENV: &str = "PROMO_LLM_API_KEY";
pub const ALLOWED_FPS: [u32; 3] = [10, 20, 30];

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error("frame count {0} outside 1..={MAX_KEYPOSES}")]
    FrameCount(usize),
    #[error("fps {0} not one of 10, 20, 30")]
    Fps(u32),
    #[error("environment variable {0} is not set")]
    MissingApiKey(String),
    #[error("invalid endpoint config: {0}")]
    Config(String),
    #[error("transport failed after {attempts} attempts: {message}")]
    Transport { attempts: usize, message: String },
    #[error("endpoint rejected the request with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("unexpected response body: {0}")]
    Body(String),
    #[error("expected {expected} parsable POSE blocks, got {got} after repair")]
    Malformed { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, PlannerError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannerRequest {
    pub prompt: String,
    pub frames: usize,
    pub fps: u32,
}

impl PlannerRequest {
    pub fn new(prompt: impl Into<String>, frames: usize, fps: u32) -> Result<Self> {
        let req = PlannerRequest { prompt: prompt.into(), frames, fps };
        req.validate()?;
        Ok(req)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.frames > MAX_KEYPOSES {
            return Err(PlannerError::FrameCount(self.frames));
        }
        if !ALLOWED_FPS.contains(&self.fps) {
            return Err(PlannerError::Fps(self.fps));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    pub api_key_env: String,
    pub timeout_secs: f64,
    pub max_retries: usize,
    /// Pause before retry `n` is `n * retry_backoff_ms`.
    pub retry_backoff_ms: u64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-3.5-turbo".into(),
            api_key_env: API_KEY_ENV.into(),
            timeout_secs: 60.0,
            max_retries: 2,
            retry_backoff_ms: 500,
        }
    }
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(PlannerError::Config(format!("timeout {} must be positive", self.timeout_secs)));
        }
        if self.base_url.is_empty() {
            return Err(PlannerError::Config("empty base url".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerResponse {
    pub scripts: Vec<PostureScript>,
    pub raw_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub system: String,
    pub user: String,
}

/// Rule headers with the body parts each rule applies to.
pub const RULES: [(&str, &str); 5] = [
    (
        "Rule 1 (bending)",
        "Characterize the degree of bending of body parts as \"completely bent\", \"slightly bent\" or \"straight\". \
         Applies to: left elbow, right elbow, left knee, right knee.",
    ),
    (
        "Rule 2 (distance)",
        "Classify the distance between two body parts as \"close\", \"shoulder width apart\", \"spread\" or \"wide\". \
         Applies to pairs of: left elbow, right elbow, left hand, right hand, left knee, right knee, left foot, right foot.",
    ),
    (
        "Rule 3 (relative position)",
        "Describe the relative positions of different body parts with \"behind\", \"in front of\", \"below\", \"above\", \
         \"at the right of\" or \"at the left of\". Applies to pairs of: left hand, right hand, left foot, right foot, \
         left shoulder, right shoulder, left hip, right hip, torso, head.",
    ),
    (
        "Rule 4 (orientation)",
        "Determine whether a body part is \"vertical\" or \"horizontal\". \
         Applies to: left arm, right arm, left thigh, right thigh, torso.",
    ),
    (
        "Rule 5 (ground contact)",
        "Identify whether a body part is \"touching ground\" or \"off ground\". \
         Applies to: left knee, right knee, left foot, right foot, left hand, right hand.",
    ),
];

pub const TEMPORAL_CONSISTENCY: &str = "Keep consecutive poses temporally consistent: body parts that do not need to move \
     between two key poses keep the same description, and every change between poses must be physically reachable \
     within the time between them.";

const EXAMPLES: [&str; 2] = [
    "The left knee is straight. The right knee is straight. The left foot and the right foot are shoulder width apart. \
     The torso is vertical. The left foot is touching the ground. The right foot is touching the ground.",
    "The left knee is completely bent. The right knee is completely bent. The left hand is in front of the torso. \
     The right hand is in front of the torso. The left thigh is horizontal. The right thigh is horizontal. \
     The left foot is touching the ground. The right foot is touching the ground.",
];

pub fn build_prompt(req: &PlannerRequest) -> Prompt {
    let mut system = String::new();
    system.push_str(
        "You are a motion planner. Given a description of a human motion, describe the key poses of the motion \
         one by one. Each key pose is a short script of simple sentences about body parts, built only from the \
         following five fundamental rules of body parts.\n\n",
    );
    for (header, body) in RULES {
        let _ = writeln!(system, "{header}: {body}");
    }
    let _ = writeln!(system, "\n{TEMPORAL_CONSISTENCY}\n");
    system.push_str(
        "Write each sentence in one of these forms: \"The <part> is <bend>.\", \"The <part> and the <part> are <distance>.\", \
         \"The <part> is <relation> the <part>.\", \"The <part> is <orientation>.\", \
         \"The <part> is touching the ground.\", \"The <part> is off the ground.\"\n\n",
    );
    system.push_str("Example key pose scripts:\n");
    for (i, ex) in EXAMPLES.iter().enumerate() {
        let _ = writeln!(system, "Example {}: {ex}", i + 1);
    }
    system.push_str("\nOutput format: exactly one line per key pose and nothing else:\n");
    for k in 1..=req.frames {
        let _ = writeln!(system, "POSE {k}: <script of key pose {k}>");
    }
    let user = format!(
        "Motion: {}\nNumber of key poses: {}\nFrames per second: {}\nThe key poses are evenly spaced over the motion.",
        req.prompt.trim(),
        req.frames,
        req.fps
    );
    Prompt { system, user }
}

/// Splits on `POSE k:` markers and parses each block. Blocks that fail to
/// parse are dropped, so the result may hold fewer than `frames` scripts.
pub fn parse_plan(text: &str) -> Vec<PostureScript> {
    let mut blocks: Vec<String> = Vec::new();
    let mut current: Option<String> = None;
    for line in text.lines() {
        let trimmed = line.trim();
        if let Some(rest) = strip_marker(trimmed) {
            if let Some(b) = current.take() {
                blocks.push(b);
            }
            current = Some(rest.to_string());
        } else if let Some(b) = current.as_mut() {
            b.push(' ');
            b.push_str(trimmed);
        }
    }
    blocks.extend(current);
    blocks.iter().filter_map(|b| parse_script(b).ok().map(|p| p.script)).collect()
}

fn strip_marker(line: &str) -> Option<&str> {
    let line = line.trim_start_matches(['*', '#', '-', ' ']);
    let rest = line.strip_prefix("POSE").or_else(|| line.strip_prefix("Pose"))?;
    let rest = rest.trim_start();
    let digits = rest.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits == 0 {
        return None;
    }
    let rest = rest[digits..].trim_start_matches(['*', ' ']);
    rest.strip_prefix(':').map(|r| r.trim_start_matches(['*', ' ']))
}

/// Chat-completion call with transport retries and at most one repair re-prompt.
pub fn plan_motion(req: &PlannerRequest, cfg: &EndpointConfig) -> Result<PlannerResponse> {
    req.validate()?;
    cfg.validate()?;
    let key = std::env::var(&cfg.api_key_env).map_err(|_| PlannerError::MissingApiKey(cfg.api_key_env.clone()))?;
    let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs_f64(cfg.timeout_secs)).build();
    let prompt = build_prompt(req);
    let mut messages = vec![
        json!({"role": "system", "content": prompt.system}),
        json!({"role": "user", "content": prompt.user}),
    ];
    let raw = chat(&agent, cfg, &key, &messages)?;
    let scripts = parse_plan(&raw);
    if scripts.len() == req.frames {
        return Ok(PlannerResponse { scripts, raw_text: raw });
    }
    messages.push(json!({"role": "assistant", "content": raw}));
    messages.push(json!({"role": "user", "content": repair_message(req.frames, scripts.len())}));
    let raw = chat(&agent, cfg, &key, &messages)?;
    let scripts = parse_plan(&raw);
    if scripts.len() != req.frames {
        return Err(PlannerError::Malformed { expected: req.frames, got: scripts.len() });
    }
    Ok(PlannerResponse { scripts, raw_text: raw })
}

fn repair_message(expected: usize, got: usize) -> String {
    format!(
        "Your answer contained {got} usable key poses but {expected} are required. Answer again with exactly \
         {expected} lines POSE 1: to POSE {expected}:, each holding at least one sentence that follows the rules."
    )
}

fn chat(agent: &ureq::Agent, cfg: &EndpointConfig, key: &str, messages: &[Value]) -> Result<String> {
    let url = format!("{}/chat/completions", cfg.base_url.trim_end_matches('/'));
    let body = json!({"model": cfg.model, "messages": messages, "temperature": 0});
    let attempts = cfg.max_retries + 1;
    let mut last = String::new();
    for attempt in 0..attempts {
        if attempt > 0 && cfg.retry_backoff_ms > 0 {
            std::thread::sleep(Duration::from_millis(cfg.retry_backoff_ms * attempt as u64));
        }
        match agent.post(&url).set("Authorization", &format!("Bearer {key}")).send_json(body.clone()) {
            Ok(resp) => {
                let v: Value = resp.into_json().map_err(|e| PlannerError::Body(e.to_string()))?;
                return v["choices"][0]["message"]["content"]
                    .as_str()
                    .map(str::to_string)
                    .ok_or_else(|| PlannerError::Body("missing choices[0].message.content".into()));
            }
            Err(ureq::Error::Status(status, resp)) if status == 429 || status >= 500 => {
                last = format!("status {status}: {}", resp.into_string().unwrap_or_default());
            }
            Err(ureq::Error::Status(status, resp)) => {
                return Err(PlannerError::Rejected { status, body: resp.into_string().unwrap_or_default() });
            }
            Err(ureq::Error::Transport(t)) => last = t.to_string(),
        }
    }
    Err(PlannerError::Transport { attempts, message: last })
}

#[derive(Deserialize)]
struct LibraryPlan {
    name: String,
    keywords: Vec<String>,
    poses: Vec<String>,
}

const PLAN_LIBRARY: &str = include_str!("../resources/plans.json");

fn library() -> Vec<LibraryPlan> {
    serde_json::from_str(PLAN_LIBRARY).expect("bundled plan library is valid JSON")
}

/// Names of the bundled plans in lookup order; the last one is the fallback.
pub fn stub_plan_names() -> Vec<String> {
    library().into_iter().map(|p| p.name).collect()
}

/// Keyword lookup into the bundled plan library, resampled to `req.frames`
/// scripts by nearest evenly spaced index.
pub fn stub_plan(req: &PlannerRequest) -> PlannerResponse {
    let lib = library();
    let prompt = req.prompt.to_lowercase();
    let words: Vec<&str> = prompt.split(|c: char| !c.is_ascii_alphanumeric()).filter(|w| !w.is_empty()).collect();
    let plan = lib
        .iter()
        .find(|p| p.keywords.iter().any(|k| words.iter().any(|w| w.starts_with(k.as_str()))))
        .unwrap_or_else(|| lib.last().expect("library is not empty"));
    let n = plan.poses.len();
    let frames = req.frames.max(1);
    let mut raw_text = String::new();
    let mut scripts = Vec::with_capacity(frames);
    for k in 0..frames {
        let idx = (((2 * k + 1) * n) / (2 * frames)).min(n - 1);
        let script = parse_script(&plan.poses[idx]).expect("bundled plan scripts parse").script;
        let _ = writeln!(raw_text, "POSE {}: {}", k + 1, script.text());
        scripts.push(script);
    }
    PlannerResponse { scripts, raw_text }
}
