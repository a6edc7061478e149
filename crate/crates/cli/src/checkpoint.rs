//! Checkpoint container: `PMCK`, a little-endian `u32` header length, a JSON
//! header, a `u32` block count, then one block per parameter holding the
//! name length (`u32`), the UTF-8 name, the element count (`u32`) and the
//! values as little-endian `f32`.

use std::collections::HashSet;
use std::path::Path;

use anyhow::{anyhow, bail, ensure, Context, Result};
use promo_core::diffusion::{Denoiser, DiffusionSchedule, ScheduleKind};
use promo_core::go::{GoConfig, GoModel};
use promo_core::metrics::{ExtractorConfig, FeatureExtractorPair};
use promo_core::norm::FeatureNorm;
use promo_core::posture::{PostureConfig, PostureModel, RetrievalConfig, RetrievalEncoders};
use promo_nn::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 4] = b"PMCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Posture,
    Encoders,
    Go,
    Extractors,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Posture => "posture",
            ModelKind::Encoders => "encoders",
            ModelKind::Go => "go",
            ModelKind::Extractors => "extractors",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub kind: ScheduleKind,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: ModelKind,
    /// Model configuration of the matching kind.
    pub config: serde_json::Value,
    pub params: Vec<ParamSpec>,
    pub schedule: Option<ScheduleParams>,
    pub norm: Option<FeatureNorm>,
    pub seed: u64,
    pub epochs: usize,
    pub config_hash: String,
}

/// Training provenance stored alongside the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainInfo {
    pub seed: u64,
    pub epochs: usize,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub blocks: Vec<(String, Vec<f32>)>,
}

impl Checkpoint {
    fn build(
        kind: ModelKind,
        config: serde_json::Value,
        store: &ParamStore<f32>,
        schedule: Option<&DiffusionSchedule>,
        norm: Option<&FeatureNorm>,
        info: &TrainInfo,
    ) -> Self {
        let params = store.iter().map(|(_, n, t)| ParamSpec { name: n.to_string(), shape: t.shape().to_vec() }).collect();
        let blocks = store.iter().map(|(_, n, t)| (n.to_string(), t.data().to_vec())).collect();
        Checkpoint {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                kind,
                config,
                params,
                schedule: schedule.map(|s| ScheduleParams { kind: s.kind(), steps: s.steps() }),
                norm: norm.cloned(),
                seed: info.seed,
                epochs: info.epochs,
                config_hash: info.config_hash.clone(),
            },
            blocks,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(header.len() + 16 + self.blocks.iter().map(|b| 8 + b.0.len() + 4 * b.1.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (name, values) in &self.blocks {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(values.len() as u32).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        ensure!(r.take(4)? == MAGIC, "not a checkpoint (bad magic)");
        let hlen = r.u32()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(hlen)?).context("checkpoint header")?;
        ensure!(
            header.format_version == FORMAT_VERSION,
            "unsupported checkpoint version {}",
            header.format_version
        );
        let count = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(count);
        let mut seen = HashSet::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).context("parameter name")?;
            ensure!(seen.insert(name.clone()), "duplicate parameter {name}");
            let n = r.u32()? as usize;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| anyhow!("block size overflow"))?)?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            blocks.push((name, values));
        }
        ensure!(r.pos == bytes.len(), "{} trailing bytes after the last block", bytes.len() - r.pos);
        let ck = Checkpoint { header, blocks };
        ck.check_blocks()?;
        Ok(ck)
    }

    fn check_blocks(&self) -> Result<()> {
        ensure!(
            self.header.params.len() == self.blocks.len(),
            "header lists {} parameters, file holds {}",
            self.header.params.len(),
            self.blocks.len()
        );
        for (spec, (name, values)) in self.header.params.iter().zip(&self.blocks) {
            ensure!(&spec.name == name, "parameter order differs: header {} vs block {name}", spec.name);
            let n: usize = spec.shape.iter().product();
            ensure!(n == values.len(), "{name}: shape {:?} needs {n} values, block has {}", spec.shape, values.len());
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        std::fs::write(path, self.to_bytes()).with_context(|| format!("writing checkpoint {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
        Self::from_bytes(&bytes).with_context(|| format!("in checkpoint {}", path.display()))
    }

    pub fn info(&self) -> TrainInfo {
        TrainInfo { seed: self.header.seed, epochs: self.header.epochs, config_hash: self.header.config_hash.clone() }
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        ensure!(self.header.kind == kind, "expected a {} checkpoint, found {}", kind.name(), self.header.kind.name());
        Ok(())
    }

    fn config<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.header.config.clone()).context("checkpoint model config")
    }

    fn schedule(&self) -> Result<DiffusionSchedule> {
        let s = self.header.schedule.ok_or_else(|| anyhow!("checkpoint has no diffusion schedule"))?;
        Ok(DiffusionSchedule::new(s.kind, s.steps)?)
    }

    fn norm(&self) -> Result<FeatureNorm> {
        self.header.norm.clone().ok_or_else(|| anyhow!("checkpoint has no feature normalization"))
    }

    /// Values laid out like `template`; names, order and sizes must match.
    fn store_like(&self, template: &ParamStore<f32>) -> Result<ParamStore<f32>> {
        ensure!(
            template.len() == self.blocks.len(),
            "model expects {} parameters, checkpoint has {}",
            template.len(),
            self.blocks.len()
        );
        let mut store = ParamStore::new();
        for ((_, name, t), (bname, values)) in template.iter().zip(&self.blocks) {
            ensure!(name == bname, "model expects parameter {name}, checkpoint has {bname}");
            ensure!(
                t.len() == values.len(),
                "{name}: model expects {:?} ({} values), checkpoint has {}",
                t.shape(),
                t.len(),
                values.len()
            );
            store.add(name, Tensor::new(t.shape().to_vec(), values.clone())?);
        }
        Ok(store)
    }

    pub fn from_posture(model: &PostureModel, info: &TrainInfo) -> Self {
        let config = serde_json::to_value(model.denoiser.config()).expect("config serializes");
        Self::build(ModelKind::Posture, config, model.denoiser.params(), Some(&model.schedule), Some(&model.norm), info)
    }

    pub fn to_posture(&self) -> Result<PostureModel> {
        self.expect_kind(ModelKind::Posture)?;
        let config: PostureConfig = self.config()?;
        let mut model = PostureModel::new(config, self.schedule()?, self.norm()?, 0)?;
        let store = self.store_like(model.denoiser.params())?;
        model.denoiser.load_params(store)?;
        Ok(model)
    }

    pub fn from_go(model: &GoModel, info: &TrainInfo) -> Self {
        let config = serde_json::to_value(model.denoiser.config()).expect("config serializes");
        Self::build(ModelKind::Go, config, model.denoiser.params(), Some(&model.schedule), Some(&model.norm), info)
    }

    pub fn to_go(&self) -> Result<GoModel> {
        self.expect_kind(ModelKind::Go)?;
        let config: GoConfig = self.config()?;
        let mut model = GoModel::new(config, self.schedule()?, self.norm()?, 0)?;
        let store = self.store_like(model.denoiser.params())?;
        model.denoiser.load_params(store)?;
        Ok(model)
    }

    pub fn from_encoders(enc: &RetrievalEncoders, info: &TrainInfo) -> Self {
        let config = serde_json::to_value(enc.config()).expect("config serializes");
        Self::build(ModelKind::Encoders, config, enc.params(), None, None, info)
    }

    pub fn to_encoders(&self) -> Result<RetrievalEncoders> {
        self.expect_kind(ModelKind::Encoders)?;
        let config: RetrievalConfig = self.config()?;
        let mut enc = RetrievalEncoders::new(config, 0);
        let store = self.store_like(enc.params())?;
        enc.load_params(store)?;
        Ok(enc)
    }

    pub fn from_extractors(pair: &FeatureExtractorPair, info: &TrainInfo) -> Self {
        let config = serde_json::to_value(pair.config()).expect("config serializes");
        Self::build(ModelKind::Extractors, config, pair.params(), None, Some(pair.norm()), info)
    }

    pub fn to_extractors(&self) -> Result<FeatureExtractorPair> {
        self.expect_kind(ModelKind::Extractors)?;
        let config: ExtractorConfig = self.config()?;
        let mut pair = FeatureExtractorPair::new(config, self.norm()?, 0)?;
        let store = self.store_like(pair.params())?;
        pair.load_params(store)?;
        Ok(pair)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            bail!("truncated checkpoint: wanted {n} bytes at offset {}", self.pos);
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_encoders() -> RetrievalEncoders {
        RetrievalEncoders::new(RetrievalConfig { embed_dim: 8, token_dim: 8, gru_hidden: 8, pose_hidden: 16 }, 4)
    }

    fn info() -> TrainInfo {
        TrainInfo { seed: 4, epochs: 0, config_hash: "abc".into() }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ck = Checkpoint::from_encoders(&small_encoders(), &info());
        let bytes = ck.to_bytes();
        let again = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(again, ck);
        assert_eq!(again.to_bytes(), bytes);
    }

    #[test]
    fn layout_starts_with_magic_and_header_length() {
        let bytes = Checkpoint::from_encoders(&small_encoders(), &info()).to_bytes();
        assert_eq!(&bytes[..4], b"PMCK");
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + hlen]).unwrap();
        assert_eq!(header["kind"], "encoders");
        assert_eq!(header["format_version"], 1);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = Checkpoint::from_encoders(&small_encoders(), &info()).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).is_err());
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let ck = Checkpoint::from_encoders(&small_encoders(), &info());
        assert!(ck.to_posture().is_err());
        assert!(ck.to_encoders().is_ok());
    }
}
