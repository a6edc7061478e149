//! Motion export to JSON, CSV and BVH.
//!
//! BVH channels use the skeleton's z-up frame and metres. Rotations are
//! written as `Zrotation Yrotation Xrotation` in degrees, so each local
//! rotation is `Rz * Ry * Rx`.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use nalgebra::{Matrix3, Rotation3};
use promo_core::motion::{decode_motion, MotionSequence, Skeleton, NUM_JOINTS};

use crate::dataset::MotionRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    Json,
    Csv,
    Bvh,
}

impl ExportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ExportFormat::Json => "json",
            ExportFormat::Csv => "csv",
            ExportFormat::Bvh => "bvh",
        }
    }
}

impl FromStr for ExportFormat {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(ExportFormat::Json),
            "csv" => Ok(ExportFormat::Csv),
            "bvh" => Ok(ExportFormat::Bvh),
            other => bail!("unknown export format {other:?} (expected json, csv or bvh)"),
        }
    }
}

/// Column names of the 135 per-frame features.
pub fn channel_names(skeleton: &Skeleton) -> Vec<String> {
    let mut names = vec!["root_vx".to_string(), "root_vy".to_string(), "root_z".to_string()];
    for name in &skeleton.names {
        names.extend((0..6).map(|k| format!("{name}_r6d_{k}")));
    }
    names
}

pub fn to_json(record: &MotionRecord) -> Result<String> {
    Ok(serde_json::to_string(record)?)
}

pub fn to_csv(motion: &MotionSequence, skeleton: &Skeleton) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(channel_names(skeleton))?;
    for frame in motion.frames() {
        w.write_record(frame.iter().map(|v| v.to_string()))?;
    }
    Ok(String::from_utf8(w.into_inner().context("flushing csv")?)?)
}

/// `(z, y, x)` angles in degrees with `m = Rz(z) * Ry(y) * Rx(x)`.
pub fn euler_zyx_degrees(m: &Matrix3<f64>) -> [f64; 3] {
    let (roll, pitch, yaw) = Rotation3::from_matrix_unchecked(*m).euler_angles();
    [yaw.to_degrees(), pitch.to_degrees(), roll.to_degrees()]
}

fn fmt(v: f64) -> String {
    let v = if v.abs() < 5e-7 { 0.0 } else { v };
    format!("{v:.6}")
}

pub fn to_bvh(motion: &MotionSequence, skeleton: &Skeleton) -> Result<String> {
    if skeleton.len() != NUM_JOINTS {
        bail!("bvh export needs the {NUM_JOINTS}-joint skeleton");
    }
    let children: Vec<Vec<usize>> =
        (0..skeleton.len()).map(|j| (0..skeleton.len()).filter(|&c| skeleton.parents[c] == Some(j)).collect()).collect();
    let mut out = String::from("HIERARCHY\n");
    write_joint(&mut out, skeleton, &children, 0, 0);
    let order = bvh_joint_order(skeleton);
    let raw = decode_motion(motion, [0.0, 0.0]);
    let _ = writeln!(out, "MOTION\nFrames: {}\nFrame Time: {:.6}", raw.len(), 1.0 / motion.fps() as f64);
    for (pose, root) in raw.poses.iter().zip(&raw.root_positions) {
        let mut row = vec![fmt(root.x), fmt(root.y), fmt(root.z)];
        let rots = pose.rotations();
        for &j in &order {
            row.extend(euler_zyx_degrees(&rots[j]).map(fmt));
        }
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    Ok(out)
}

fn write_joint(out: &mut String, skeleton: &Skeleton, children: &[Vec<usize>], j: usize, depth: usize) {
    let pad = "  ".repeat(depth);
    let o = skeleton.offsets[j];
    if j == 0 {
        let _ = writeln!(out, "{pad}ROOT {}", skeleton.names[j]);
    } else {
        let _ = writeln!(out, "{pad}JOINT {}", skeleton.names[j]);
    }
    let _ = writeln!(out, "{pad}{{");
    if j == 0 {
        let _ = writeln!(out, "{pad}  OFFSET 0.000000 0.000000 0.000000");
        let _ = writeln!(out, "{pad}  CHANNELS 6 Xposition Yposition Zposition Zrotation Yrotation Xrotation");
    } else {
        let _ = writeln!(out, "{pad}  OFFSET {} {} {}", fmt(o.x), fmt(o.y), fmt(o.z));
        let _ = writeln!(out, "{pad}  CHANNELS 3 Zrotation Yrotation Xrotation");
    }
    if children[j].is_empty() {
        // End sites continue the bone a tenth of its length.
        let e = o * 0.1;
        let _ = writeln!(out, "{pad}  End Site\n{pad}  {{\n{pad}    OFFSET {} {} {}\n{pad}  }}", fmt(e.x), fmt(e.y), fmt(e.z));
    }
    for &c in &children[j] {
        write_joint(out, skeleton, children, c, depth + 1);
    }
    let _ = writeln!(out, "{pad}}}");
}

/// Joint order of the BVH channel block: depth-first over the hierarchy.
pub fn bvh_joint_order(skeleton: &Skeleton) -> Vec<usize> {
    fn visit(s: &Skeleton, j: usize, out: &mut Vec<usize>) {
        out.push(j);
        for c in (0..s.len()).filter(|&c| s.parents[c] == Some(j)) {
            visit(s, c, out);
        }
    }
    let mut out = Vec::new();
    visit(skeleton, 0, &mut out);
    out
}

pub fn export_motion(record: &MotionRecord, format: ExportFormat, out: &Path) -> Result<()> {
    let skeleton = Skeleton::canonical();
    let motion = record.motion()?;
    let text = match format {
        ExportFormat::Json => to_json(record)?,
        ExportFormat::Csv => to_csv(&motion, &skeleton)?,
        ExportFormat::Bvh => to_bvh(&motion, &skeleton)?,
    };
    std::fs::write(out, text).with_context(|| format!("writing {}", out.display()))
}
