//! JSONL datasets. The first line is `{"meta": {...}}`; every following line
//! is one record.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use promo_core::motion::{MotionSequence, PoseVector, SEQ_LEN};
use promo_core::script::PostureScript;
use promo_core::synth::SynthMotion;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    /// `poses` or `motions`.
    pub kind: String,
    pub n: usize,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct MetaLine {
    meta: DatasetMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub pose: PoseVector,
    pub script: PostureScript,
}

/// One motion row: 64 frames of 135 features, its fps and its plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionRecord {
    pub frames: Vec<Vec<f64>>,
    pub fps: u32,
    pub plan: Vec<PostureScript>,
}

impl MotionRecord {
    pub fn new(motion: &MotionSequence, plan: Vec<PostureScript>) -> Self {
        MotionRecord { frames: motion.frames().to_vec(), fps: motion.fps(), plan }
    }

    pub fn motion(&self) -> Result<MotionSequence> {
        ensure!(self.frames.len() == SEQ_LEN, "motion record has {} frames, expected {SEQ_LEN}", self.frames.len());
        Ok(MotionSequence::new(self.frames.clone(), self.fps)?)
    }
}

impl From<&SynthMotion> for MotionRecord {
    fn from(s: &SynthMotion) -> Self {
        MotionRecord::new(&s.motion, s.plan.clone())
    }
}

fn write_jsonl<T: Serialize>(path: &Path, meta: &DatasetMeta, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, &MetaLine { meta: meta.clone() })?;
    w.write_all(b"\n")?;
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<(DatasetMeta, Vec<T>)> {
    let file = File::open(path).with_context(|| format!("opening dataset {}", path.display()))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines.next().transpose()?.with_context(|| format!("{} is empty", path.display()))?;
    let meta: MetaLine = serde_json::from_str(&first).with_context(|| format!("{}: meta line", path.display()))?;
    if meta.meta.kind != kind {
        bail!("{} holds a {} dataset, expected {kind}", path.display(), meta.meta.kind);
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).with_context(|| format!("{}: record {}", path.display(), i + 1))?);
    }
    ensure!(rows.len() == meta.meta.n, "{}: meta says {} records, found {}", path.display(), meta.meta.n, rows.len());
    Ok((meta.meta, rows))
}

pub fn write_pose_dataset(path: &Path, pairs: &[(PoseVector, PostureScript)], seed: u64, config_hash: &str) -> Result<()> {
    let meta = DatasetMeta { kind: "poses".into(), n: pairs.len(), seed, config_hash: config_hash.into() };
    let rows: Vec<PoseRecord> = pairs.iter().map(|(p, s)| PoseRecord { pose: p.clone(), script: s.clone() }).collect();
    write_jsonl(path, &meta, &rows)
}

pub fn read_pose_dataset(path: &Path) -> Result<(DatasetMeta, Vec<(PoseVector, PostureScript)>)> {
    let (meta, rows) = read_jsonl::<PoseRecord>(path, "poses")?;
    Ok((meta, rows.into_iter().map(|r| (r.pose, r.script)).collect()))
}

pub fn write_motion_dataset(path: &Path, records: &[MotionRecord], seed: u64, config_hash: &str) -> Result<()> {
    let meta = DatasetMeta { kind: "motions".into(), n: records.len(), seed, config_hash: config_hash.into() };
    write_jsonl(path, &meta, records)
}

pub fn read_motion_dataset(path: &Path) -> Result<(DatasetMeta, Vec<MotionRecord>)> {
    let (meta, rows) = read_jsonl::<MotionRecord>(path, "motions")?;
    for (i, r) in rows.iter().enumerate() {
        r.motion().with_context(|| format!("{}: record {}", path.display(), i + 1))?;
    }
    Ok((meta, rows))
}
