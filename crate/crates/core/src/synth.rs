//! Procedural poses and motions with exactly known global trajectories.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix3, Rotation3, Vector3};
use promo_nn::rng_from;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::motion::{
    encode_motion, ground_root_height, joint, rot_x, rot_y, rot_z, MotionError, MotionSequence, PoseVector, RawMotion,
    Skeleton, NUM_JOINTS, SEQ_LEN,
};
use crate::go::keyframe_index;
use crate::script::{describe_pose, PostureScript};

const DEG: f64 = PI / 180.0;
/// Standard deviation (radians) of the per-joint perturbation.
pub const POSE_NOISE: f64 = 0.05;
/// Keyframes per plan attached to synthetic motions.
pub const PLAN_FRAMES: usize = 4;
pub const DEFAULT_FPS: u32 = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseTemplate {
    Stand,
    Squat,
    TPose,
    Reach,
    Kneel,
}

impl PoseTemplate {
    pub const ALL: [PoseTemplate; 5] =
        [PoseTemplate::Stand, PoseTemplate::Squat, PoseTemplate::TPose, PoseTemplate::Reach, PoseTemplate::Kneel];
}

/// Local joint rotations built up from named anatomical angles (radians).
#[derive(Clone, Debug)]
pub struct PoseBuilder {
    pub rots: Vec<Matrix3<f64>>,
}

impl Default for PoseBuilder {
    fn default() -> Self {
        PoseBuilder { rots: vec![Matrix3::identity(); NUM_JOINTS] }
    }
}

impl PoseBuilder {
    /// Hip flexion swings the thigh forward; abduction swings it outward.
    pub fn hip(&mut self, left: bool, flex: f64, abduct: f64) -> &mut Self {
        let (j, s) = if left { (joint::L_HIP, -1.0) } else { (joint::R_HIP, 1.0) };
        self.rots[j] = rot_x(flex) * rot_y(s * abduct);
        self
    }

    pub fn knee(&mut self, left: bool, flex: f64) -> &mut Self {
        self.rots[if left { joint::L_KNEE } else { joint::R_KNEE }] = rot_x(-flex);
        self
    }

    /// `lower` lowers the arm from horizontal (positive towards the hips),
    /// `forward` swings it towards the front.
    pub fn shoulder(&mut self, left: bool, lower: f64, forward: f64) -> &mut Self {
        let (j, s) = if left { (joint::L_SHOULDER, 1.0) } else { (joint::R_SHOULDER, -1.0) };
        self.rots[j] = rot_z(s * forward) * rot_y(s * lower);
        self
    }

    pub fn elbow(&mut self, left: bool, flex: f64) -> &mut Self {
        let (j, s) = if left { (joint::L_ELBOW, 1.0) } else { (joint::R_ELBOW, -1.0) };
        self.rots[j] = rot_z(s * flex);
        self
    }

    /// Forward lean of the lower spine.
    pub fn lean(&mut self, forward: f64) -> &mut Self {
        self.rots[joint::SPINE1] = rot_x(-forward);
        self
    }

    pub fn root(&mut self, r: Matrix3<f64>) -> &mut Self {
        self.rots[joint::PELVIS] = r;
        self
    }

    pub fn perturb(&mut self, rng: &mut ChaCha8Rng, sigma: f64) -> &mut Self {
        let n = Normal::new(0.0, sigma).expect("finite sigma");
        for r in self.rots.iter_mut().skip(1) {
            let v = Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng));
            *r *= Rotation3::new(v).into_inner();
        }
        self
    }

    pub fn build(&self) -> PoseVector {
        PoseVector::from_rotations(&self.rots).expect("products of rotations stay orthonormal")
    }
}

fn u(rng: &mut ChaCha8Rng, lo_deg: f64, hi_deg: f64) -> f64 {
    rng.gen_range(lo_deg..=hi_deg) * DEG
}

fn random_arm(b: &mut PoseBuilder, rng: &mut ChaCha8Rng, left: bool) {
    let lower = u(rng, -90.0, 85.0);
    let forward = u(rng, -30.0, 80.0);
    let elbow = u(rng, 0.0, 140.0);
    b.shoulder(left, lower, forward).elbow(left, elbow);
}

/// One pose near `template`, with a small random yaw and joint noise.
pub fn sample_template(template: PoseTemplate, rng: &mut ChaCha8Rng) -> PoseVector {
    let mut b = PoseBuilder::default();
    match template {
        PoseTemplate::Stand => {
            for left in [true, false] {
                let flex = u(rng, -10.0, 25.0);
                let abd = u(rng, 0.0, 25.0);
                let knee = u(rng, 0.0, 30.0);
                b.hip(left, flex, abd).knee(left, knee);
                random_arm(&mut b, rng, left);
            }
        }
        PoseTemplate::Squat => {
            for left in [true, false] {
                let flex = u(rng, 70.0, 110.0);
                let abd = u(rng, 5.0, 30.0);
                let knee = u(rng, 80.0, 135.0);
                b.hip(left, flex, abd).knee(left, knee);
                random_arm(&mut b, rng, left);
            }
            let lean = u(rng, 10.0, 40.0);
            b.lean(lean);
        }
        PoseTemplate::TPose => {
            for left in [true, false] {
                let abd = u(rng, 0.0, 15.0);
                let lower = u(rng, -15.0, 15.0);
                let fwd = u(rng, -15.0, 15.0);
                let elbow = u(rng, 0.0, 20.0);
                b.hip(left, 0.0, abd).shoulder(left, lower, fwd).elbow(left, elbow);
            }
        }
        PoseTemplate::Reach => {
            let both = rng.gen_bool(0.5);
            let first = rng.gen_bool(0.5);
            for left in [true, false] {
                let flex = u(rng, -5.0, 15.0);
                let abd = u(rng, 0.0, 15.0);
                b.hip(left, flex, abd);
                if both || left == first {
                    let lower = u(rng, -100.0, -60.0);
                    let fwd = u(rng, 0.0, 60.0);
                    let elbow = u(rng, 0.0, 30.0);
                    b.shoulder(left, lower, fwd).elbow(left, elbow);
                } else {
                    random_arm(&mut b, rng, left);
                }
            }
        }
        PoseTemplate::Kneel => {
            let down = rng.gen_bool(0.5);
            let t = u(rng, -5.0, 10.0);
            let k = u(rng, 80.0, 100.0);
            b.hip(down, t, 5.0 * DEG).knee(down, k);
            let f = u(rng, 70.0, 100.0);
            let k2 = u(rng, 70.0, 100.0);
            b.hip(!down, f, 5.0 * DEG).knee(!down, k2);
            for left in [true, false] {
                random_arm(&mut b, rng, left);
            }
        }
    }
    let yaw = rng.gen_range(-0.5..0.5);
    b.root(rot_z(yaw)).perturb(rng, POSE_NOISE);
    b.build()
}

/// `n` poses cycling through the templates, each paired with its description.
pub fn synth_pose_pairs(n: usize, seed: u64) -> Vec<(PoseVector, PostureScript)> {
    let skel = Skeleton::canonical();
    let mut rng = rng_from(seed);
    (0..n)
        .map(|i| {
            let p = sample_template(PoseTemplate::ALL[i % PoseTemplate::ALL.len()], &mut rng);
            let s = describe_pose(&p, &skel);
            (p, s)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MotionKind {
    /// Straight walk along `heading` at `speed` metres per frame.
    Walk { heading: f64, speed: f64 },
    /// Yaw ramp in place, `rate` radians per frame.
    Turn { heading: f64, rate: f64 },
    Squat { heading: f64, depth: f64, period: f64 },
    Wave { heading: f64, left: bool, period: f64 },
    /// Hops on one foot with the other leg tucked; `height` is the apex root lift.
    Hop { heading: f64, left: bool, height: f64, period: f64 },
    Stand { heading: f64 },
}

impl MotionKind {
    pub fn heading(&self) -> f64 {
        match *self {
            MotionKind::Walk { heading, .. }
            | MotionKind::Turn { heading, .. }
            | MotionKind::Squat { heading, .. }
            | MotionKind::Wave { heading, .. }
            | MotionKind::Hop { heading, .. }
            | MotionKind::Stand { heading } => heading,
        }
    }

    /// Parameters drawn for the generator at `index` in the dataset rotation.
    pub fn sample(index: usize, rng: &mut ChaCha8Rng) -> MotionKind {
        let heading = rng.gen_range(-PI..PI);
        match index % 5 {
            0 | 1 => MotionKind::Walk { heading, speed: rng.gen_range(0.03..0.07) },
            2 => MotionKind::Turn { heading, rate: rng.gen_range(0.01..0.04) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 } },
            3 => {
                if rng.gen_bool(0.5) {
                    MotionKind::Squat { heading, depth: rng.gen_range(0.6..1.0), period: rng.gen_range(24.0..64.0) }
                } else {
                    MotionKind::Wave { heading, left: rng.gen_bool(0.5), period: rng.gen_range(10.0..24.0) }
                }
            }
            _ => {
                if rng.gen_bool(0.5) {
                    MotionKind::Hop {
                        heading,
                        left: rng.gen_bool(0.5),
                        height: rng.gen_range(0.12..0.25),
                        period: rng.gen_range(14.0..22.0),
                    }
                } else {
                    MotionKind::Stand { heading }
                }
            }
        }
    }
}

/// Planar walking direction for a root yaw: the body's forward (+y) axis.
pub fn heading_direction(heading: f64) -> [f64; 2] {
    [-heading.sin(), heading.cos()]
}

fn relaxed_arms(b: &mut PoseBuilder) {
    b.shoulder(true, 75.0 * DEG, 0.0).shoulder(false, 75.0 * DEG, 0.0).elbow(true, 10.0 * DEG).elbow(false, 10.0 * DEG);
}

/// Joint rotations and planar root position at frame `f`; the root height is
/// filled in from ground contact, except during hops.
fn motion_frame(kind: &MotionKind, f: usize) -> (PoseBuilder, [f64; 2], f64) {
    let t = f as f64;
    let mut b = PoseBuilder::default();
    relaxed_arms(&mut b);
    let mut lift = 0.0;
    let mut xy = [0.0, 0.0];
    let mut yaw = kind.heading();
    match *kind {
        MotionKind::Walk { heading, speed } => {
            let amp = 8.0 * speed;
            let period = 3.2 * amp.sin() / speed;
            let ph = 2.0 * PI * t / period;
            b.hip(true, amp * ph.sin(), 0.0).hip(false, -amp * ph.sin(), 0.0);
            b.knee(true, 2.0 * amp * (ph + FRAC_PI_2).sin().max(0.0));
            b.knee(false, 2.0 * amp * (ph - FRAC_PI_2).sin().max(0.0));
            b.shoulder(true, 75.0 * DEG, -amp * ph.sin()).shoulder(false, 75.0 * DEG, amp * ph.sin());
            let d = heading_direction(heading);
            xy = [d[0] * speed * t, d[1] * speed * t];
        }
        MotionKind::Turn { heading, rate } => {
            yaw = heading + rate * t;
            let ph = (t / 8.0 * PI).sin();
            b.hip(true, 10.0 * DEG * ph.max(0.0), 0.0).knee(true, 20.0 * DEG * ph.max(0.0));
            b.hip(false, 10.0 * DEG * (-ph).max(0.0), 0.0).knee(false, 20.0 * DEG * (-ph).max(0.0));
        }
        MotionKind::Squat { depth, period, .. } => {
            let s = depth * 0.5 * (1.0 - (2.0 * PI * t / period).cos());
            for left in [true, false] {
                b.hip(left, 100.0 * DEG * s, 10.0 * DEG).knee(left, 120.0 * DEG * s);
                b.shoulder(left, 75.0 * DEG * (1.0 - s), 80.0 * DEG * s);
            }
            b.lean(30.0 * DEG * s);
        }
        MotionKind::Wave { left, period, .. } => {
            let ph = (2.0 * PI * t / period).sin();
            b.shoulder(left, -30.0 * DEG, 20.0 * DEG).elbow(left, (60.0 + 40.0 * ph) * DEG);
        }
        MotionKind::Hop { left, height, period, .. } => {
            b.hip(!left, 30.0 * DEG, 0.0).knee(!left, 100.0 * DEG);
            let ph = (t / period).fract();
            // Ballistic arc over the first 60% of each period, crouched landing after.
            if ph < 0.6 {
                let s = ph / 0.6;
                lift = height * 4.0 * s * (1.0 - s);
            } else {
                let s = ((ph - 0.6) / 0.4 * PI).sin();
                b.hip(left, 25.0 * DEG * s, 0.0).knee(left, 45.0 * DEG * s);
            }
            b.shoulder(true, 40.0 * DEG, 30.0 * DEG).shoulder(false, 40.0 * DEG, 30.0 * DEG);
        }
        MotionKind::Stand { .. } => {
            let sway = (t / 20.0).sin() * 2.0 * DEG;
            b.hip(true, sway, 3.0 * DEG).hip(false, -sway, 3.0 * DEG);
        }
    }
    b.root(rot_z(yaw));
    (b, xy, lift)
}

/// Raw 64-frame motion of a generator, starting at the origin.
pub fn generate_raw(kind: &MotionKind, skeleton: &Skeleton) -> RawMotion {
    let mut root_positions = Vec::with_capacity(SEQ_LEN);
    let mut poses = Vec::with_capacity(SEQ_LEN);
    for f in 0..SEQ_LEN {
        let (b, xy, lift) = motion_frame(kind, f);
        let pose = b.build();
        let z = ground_root_height(&pose, skeleton) + lift;
        root_positions.push(Vector3::new(xy[0], xy[1], z));
        poses.push(pose);
    }
    RawMotion { root_positions, poses }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthMotion {
    pub kind: MotionKind,
    pub motion: MotionSequence,
    pub plan: Vec<PostureScript>,
}

pub fn synth_motion(kind: MotionKind, fps: u32, skeleton: &Skeleton) -> Result<SynthMotion, MotionError> {
    let raw = generate_raw(&kind, skeleton);
    let motion = encode_motion(&raw, fps)?;
    let plan = (0..PLAN_FRAMES).map(|k| describe_pose(&raw.poses[keyframe_index(k, PLAN_FRAMES, SEQ_LEN)], skeleton)).collect();
    Ok(SynthMotion { kind, motion, plan })
}

pub fn synth_motions(n: usize, seed: u64) -> Result<Vec<SynthMotion>, MotionError> {
    let skel = Skeleton::canonical();
    let mut rng = rng_from(seed);
    (0..n).map(|i| synth_motion(MotionKind::sample(i, &mut rng), DEFAULT_FPS, &skel)).collect()
}
