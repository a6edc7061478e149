//! 6D rotations, pose and motion feature layouts, velocity encoding and
//! forward kinematics on the fixed 22-joint skeleton.
//!
//! World frame is z-up, +x points to the body's left and +y forward when the
//! root orientation is the identity.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NUM_JOINTS: usize = 22;
pub const POSE_DIM: usize = 132;
pub const FRAME_DIM: usize = 135;
pub const SEQ_LEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MotionError {
    #[error("degenerate 6D rotation: {0}")]
    Degenerate(String),
    #[error("matrix is not a rotation (orthonormality error {0:.3e})")]
    NotRotation(f64),
    #[error("expected {expected} values, got {got}")]
    Length { expected: usize, got: usize },
    #[error("need at least 2 frames, got {0}")]
    TooShort(usize),
    #[error("frame 0 must have zero planar velocity")]
    InitialVelocity,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid skeleton: {0}")]
    Skeleton(String),
}

pub type Result<T> = std::result::Result<T, MotionError>;

/// Gram-Schmidt reconstruction of a rotation from its first two columns.
pub fn sixd_to_rotmat(r: &[f64]) -> Result<Matrix3<f64>> {
    if r.len() != 6 {
        return Err(MotionError::Length { expected: 6, got: r.len() });
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(MotionError::NonFinite("6D rotation"));
    }
    let a1 = Vector3::new(r[0], r[1], r[2]);
    let a2 = Vector3::new(r[3], r[4], r[5]);
    let (n1, n2) = (a1.norm(), a2.norm());
    if n1 < 1e-8 || n2 < 1e-8 {
        return Err(MotionError::Degenerate("near-zero column".into()));
    }
    if a1.cross(&a2).norm() / (n1 * n2) < 1e-4 {
        return Err(MotionError::Degenerate("near-parallel columns".into()));
    }
    let b1 = a1 / n1;
    let b2 = (a2 - b1 * b1.dot(&a2)).normalize();
    let b3 = b1.cross(&b2);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

pub fn rotation_error(m: &Matrix3<f64>) -> f64 {
    let ortho = (m.transpose() * m - Matrix3::identity()).abs().max();
    ortho.max((m.determinant() - 1.0).abs())
}

pub fn rotmat_to_sixd(m: &Matrix3<f64>) -> Result<[f64; 6]> {
    let err = rotation_error(m);
    if !err.is_finite() || err > 1e-3 {
        return Err(MotionError::NotRotation(err));
    }
    Ok([m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]])
}

const IDENTITY_6D: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

/// Root orientation followed by the 21 body-joint rotations, each in 6D.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PoseVector(Vec<f64>);

impl TryFrom<Vec<f64>> for PoseVector {
    type Error = MotionError;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        PoseVector::new(v)
    }
}

impl From<PoseVector> for Vec<f64> {
    fn from(p: PoseVector) -> Self {
        p.0
    }
}

impl PoseVector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.len() != POSE_DIM {
            return Err(MotionError::Length { expected: POSE_DIM, got: data.len() });
        }
        for block in data.chunks(6) {
            sixd_to_rotmat(block)?;
        }
        Ok(PoseVector(data))
    }

    pub fn identity() -> Self {
        PoseVector(IDENTITY_6D.repeat(NUM_JOINTS))
    }

    pub fn from_rotations(rots: &[Matrix3<f64>]) -> Result<Self> {
        if rots.len() != NUM_JOINTS {
            return Err(MotionError::Length { expected: NUM_JOINTS, got: rots.len() });
        }
        let mut data = Vec::with_capacity(POSE_DIM);
        for r in rots {
            data.extend_from_slice(&rotmat_to_sixd(r)?);
        }
        Ok(PoseVector(data))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn block(&self, joint: usize) -> &[f64] {
        &self.0[joint * 6..joint * 6 + 6]
    }

    /// Local rotation of every joint; index 0 is the root orientation.
    pub fn rotations(&self) -> Vec<Matrix3<f64>> {
        self.0.chunks(6).map(|b| sixd_to_rotmat(b).expect("validated at construction")).collect()
    }

    pub fn root_rotation(&self) -> Matrix3<f64> {
        sixd_to_rotmat(self.block(0)).expect("validated at construction")
    }

    pub fn with_root_rotation(&self, r: &Matrix3<f64>) -> Result<Self> {
        let mut data = self.0.clone();
        data[..6].copy_from_slice(&rotmat_to_sixd(r)?);
        Ok(PoseVector(data))
    }

    /// Reflects the pose through the body's sagittal plane, exchanging left and right.
    pub fn mirrored(&self, skeleton: &Skeleton) -> Self {
        let m = Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0));
        let rots = self.rotations();
        let out: Vec<Matrix3<f64>> = (0..NUM_JOINTS).map(|j| m * rots[skeleton.mirror[j]] * m).collect();
        PoseVector::from_rotations(&out).expect("reflection conjugation keeps rotations valid")
    }
}

/// Yaw angle of a rotation's forward (+y) axis about world z, zero when facing +y.
pub fn heading(r: &Matrix3<f64>) -> f64 {
    let f = r * Vector3::y();
    (-f.x).atan2(f.y)
}

pub fn rot_x(a: f64) -> Matrix3<f64> {
    *nalgebra::Rotation3::from_axis_angle(&Vector3::x_axis(), a).matrix()
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    *nalgebra::Rotation3::from_axis_angle(&Vector3::y_axis(), a).matrix()
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    *nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), a).matrix()
}

/// Shortest-arc spherical interpolation between two rotations.
pub fn slerp(a: &Matrix3<f64>, b: &Matrix3<f64>, t: f64) -> Matrix3<f64> {
    let qa = UnitQuaternion::from_matrix(a);
    let qb = UnitQuaternion::from_matrix(b);
    let q = qa.try_slerp(&qb, t, 1e-12).unwrap_or_else(|| qa.nlerp(&qb, t));
    *q.to_rotation_matrix().matrix()
}

/// Fixed-offset kinematic tree: joint names, parents and rest offsets in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    pub names: Vec<&'static str>,
    pub parents: Vec<Option<usize>>,
    pub offsets: Vec<Vector3<f64>>,
    /// Index of the left/right counterpart of each joint (itself on the midline).
    pub mirror: Vec<usize>,
}

pub mod joint {
    pub const PELVIS: usize = 0;
    pub const L_HIP: usize = 1;
    pub const R_HIP: usize = 2;
    pub const SPINE1: usize = 3;
    pub const L_KNEE: usize = 4;
    pub const R_KNEE: usize = 5;
    pub const SPINE2: usize = 6;
    pub const L_ANKLE: usize = 7;
    pub const R_ANKLE: usize = 8;
    pub const SPINE3: usize = 9;
    pub const L_FOOT: usize = 10;
    pub const R_FOOT: usize = 11;
    pub const NECK: usize = 12;
    pub const L_COLLAR: usize = 13;
    pub const R_COLLAR: usize = 14;
    pub const HEAD: usize = 15;
    pub const L_SHOULDER: usize = 16;
    pub const R_SHOULDER: usize = 17;
    pub const L_ELBOW: usize = 18;
    pub const R_ELBOW: usize = 19;
    pub const L_WRIST: usize = 20;
    pub const R_WRIST: usize = 21;
}

impl Skeleton {
    pub fn new(
        names: Vec<&'static str>,
        parents: Vec<Option<usize>>,
        offsets: Vec<Vector3<f64>>,
        mirror: Vec<usize>,
    ) -> Result<Self> {
        let n = names.len();
        if parents.len() != n || offsets.len() != n || mirror.len() != n {
            return Err(MotionError::Skeleton("field lengths differ".into()));
        }
        if parents.first() != Some(&None) {
            return Err(MotionError::Skeleton("joint 0 must be the root".into()));
        }
        for j in 1..n {
            match parents[j] {
                Some(p) if p < j => {}
                _ => return Err(MotionError::Skeleton(format!("joint {j} needs a parent with a smaller index"))),
            }
            if offsets[j].norm() == 0.0 {
                return Err(MotionError::Skeleton(format!("joint {j} has a zero offset")));
            }
        }
        if mirror.iter().any(|&m| m >= n) || (0..n).any(|j| mirror[mirror[j]] != j) {
            return Err(MotionError::Skeleton("mirror map is not an involution".into()));
        }
        Ok(Skeleton { names, parents, offsets, mirror })
    }

    /// The canonical 1.7 m skeleton; the identity pose is a T-pose.
    pub fn canonical() -> Self {
        let v = Vector3::new;
        let names = vec![
            "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee", "spine2", "left_ankle",
            "right_ankle", "spine3", "left_foot", "right_foot", "neck", "left_collar", "right_collar", "head",
            "left_shoulder", "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
        ];
        let parents = vec![
            None,
            Some(0),
            Some(0),
            Some(0),
            Some(1),
            Some(2),
            Some(3),
            Some(4),
            Some(5),
            Some(6),
            Some(7),
            Some(8),
            Some(9),
            Some(9),
            Some(9),
            Some(12),
            Some(13),
            Some(14),
            Some(16),
            Some(17),
            Some(18),
            Some(19),
        ];
        let offsets = vec![
            v(0.0, 0.0, 0.0),
            v(0.09, 0.0, -0.08),
            v(-0.09, 0.0, -0.08),
            v(0.0, 0.0, 0.11),
            v(0.0, 0.0, -0.40),
            v(0.0, 0.0, -0.40),
            v(0.0, 0.0, 0.13),
            v(0.0, 0.0, -0.40),
            v(0.0, 0.0, -0.40),
            v(0.0, 0.0, 0.05),
            v(0.0, 0.13, -0.06),
            v(0.0, 0.13, -0.06),
            v(0.0, 0.0, 0.22),
            v(0.07, 0.0, 0.15),
            v(-0.07, 0.0, 0.15),
            v(0.0, 0.0, 0.12),
            v(0.12, 0.0, 0.0),
            v(-0.12, 0.0, 0.0),
            v(0.26, 0.0, 0.0),
            v(-0.26, 0.0, 0.0),
            v(0.25, 0.0, 0.0),
            v(-0.25, 0.0, 0.0),
        ];
        let mirror = vec![0, 2, 1, 3, 5, 4, 6, 8, 7, 9, 11, 10, 12, 14, 13, 15, 17, 16, 19, 18, 21, 20];
        Skeleton::new(names, parents, offsets, mirror).expect("canonical skeleton is well formed")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| *n == name)
    }
}

/// Global rotations and positions of every joint given local rotations.
pub fn forward_kinematics_rotations(
    local: &[Matrix3<f64>],
    skeleton: &Skeleton,
    root_position: Vector3<f64>,
) -> (Vec<Matrix3<f64>>, Vec<Vector3<f64>>) {
    let n = skeleton.len();
    let mut global = Vec::with_capacity(n);
    let mut pos = Vec::with_capacity(n);
    for j in 0..n {
        match skeleton.parents[j] {
            None => {
                global.push(local[j]);
                pos.push(root_position);
            }
            Some(p) => {
                let g = global[p] * local[j];
                let x = pos[p] + global[p] * skeleton.offsets[j];
                global.push(g);
                pos.push(x);
            }
        }
    }
    (global, pos)
}

pub fn forward_kinematics(pose: &PoseVector, skeleton: &Skeleton, root_position: Vector3<f64>) -> Vec<Vector3<f64>> {
    forward_kinematics_rotations(&pose.rotations(), skeleton, root_position).1
}

/// Root height that puts the lowest joint of the pose on the ground plane.
pub fn ground_root_height(pose: &PoseVector, skeleton: &Skeleton) -> f64 {
    let pos = forward_kinematics(pose, skeleton, Vector3::zeros());
    -pos.iter().map(|p| p.z).fold(f64::INFINITY, f64::min)
}

/// Global root trajectory and local joint rotations per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMotion {
    pub root_positions: Vec<Vector3<f64>>,
    pub poses: Vec<PoseVector>,
}

impl RawMotion {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// Per-frame features `[vx, vy, z, root 6D, body 6D x 21]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionSequence {
    frames: Vec<Vec<f64>>,
    fps: u32,
}

impl MotionSequence {
    pub fn new(frames: Vec<Vec<f64>>, fps: u32) -> Result<Self> {
        if frames.len() < 2 {
            return Err(MotionError::TooShort(frames.len()));
        }
        for f in &frames {
            if f.len() != FRAME_DIM {
                return Err(MotionError::Length { expected: FRAME_DIM, got: f.len() });
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(MotionError::NonFinite("motion frame"));
            }
            for block in f[3..].chunks(6) {
                sixd_to_rotmat(block)?;
            }
        }
        if frames[0][0] != 0.0 || frames[0][1] != 0.0 {
            return Err(MotionError::InitialVelocity);
        }
        Ok(MotionSequence { frames, fps })
    }

    /// Like [`MotionSequence::new`] but forces frame 0's planar velocity to zero first.
    pub fn with_zeroed_start(mut frames: Vec<Vec<f64>>, fps: u32) -> Result<Self> {
        if let Some(f) = frames.first_mut() {
            if f.len() >= 2 {
                f[0] = 0.0;
                f[1] = 0.0;
            }
        }
        MotionSequence::new(frames, fps)
    }

    pub fn frames(&self) -> &[Vec<f64>] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn fps(&self) -> u32 {
        self.fps
    }

    pub fn pose(&self, f: usize) -> PoseVector {
        PoseVector(self.frames[f][3..].to_vec())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.frames.concat()
    }
}

pub fn encode_motion(raw: &RawMotion, fps: u32) -> Result<MotionSequence> {
    let n = raw.len();
    if n < 2 {
        return Err(MotionError::TooShort(n));
    }
    if raw.root_positions.len() != n {
        return Err(MotionError::Length { expected: n, got: raw.root_positions.len() });
    }
    let mut frames = Vec::with_capacity(n);
    for f in 0..n {
        let p = raw.root_positions[f];
        let (vx, vy) = if f == 0 {
            (0.0, 0.0)
        } else {
            let q = raw.root_positions[f - 1];
            (p.x - q.x, p.y - q.y)
        };
        let mut frame = Vec::with_capacity(FRAME_DIM);
        frame.extend_from_slice(&[vx, vy, p.z]);
        frame.extend_from_slice(raw.poses[f].as_slice());
        frames.push(frame);
    }
    MotionSequence::new(frames, fps)
}

pub fn decode_motion(seq: &MotionSequence, initial_xy: [f64; 2]) -> RawMotion {
    let (mut x, mut y) = (initial_xy[0], initial_xy[1]);
    let mut root_positions = Vec::with_capacity(seq.len());
    let mut poses = Vec::with_capacity(seq.len());
    for (f, frame) in seq.frames.iter().enumerate() {
        if f > 0 {
            x += frame[0];
            y += frame[1];
        }
        root_positions.push(Vector3::new(x, y, frame[2]));
        poses.push(PoseVector::new(frame[3..].to_vec()).expect("validated at construction"));
    }
    RawMotion { root_positions, poses }
}

/// World-space joint positions for every frame of a decoded motion.
pub fn motion_joint_positions(raw: &RawMotion, skeleton: &Skeleton) -> Vec<Vec<Vector3<f64>>> {
    raw.poses.iter().zip(&raw.root_positions).map(|(p, r)| forward_kinematics(p, skeleton, *r)).collect()
}
