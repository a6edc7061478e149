//! Key-pose selection: similarity-softmax transition and emission
//! probabilities and the most probable candidate path through them.

use thiserror::Error;

use crate::motion::PoseVector;
use crate::posture::{CandidateSet, PostureError, RetrievalEncoders};
use crate::script::PostureScript;

#[derive(Debug, Error)]
pub enum PlanningError {
    #[error("planning needs at least one frame and one candidate")]
    Empty,
    #[error("inconsistent matrix shapes: {0}")]
    Shape(String),
    #[error("invalid probability {value} at {place}")]
    Probability { place: String, value: f64 },
    #[error("{0} paths exceed the exhaustive-search limit")]
    TooLarge(u128),
    #[error(transparent)]
    Posture(#[from] PostureError),
}

pub type Result<T> = std::result::Result<T, PlanningError>;

/// Largest instance `brute_force_select` accepts.
pub const BRUTE_FORCE_LIMIT: u128 = 1_000_000;
const STOCHASTIC_TOL: f64 = 1e-9;

/// `transition[i - 1][j][k]`: probability of candidate `k` at frame `i`
/// following candidate `j` at frame `i - 1`. `emission[i][j]`: probability of
/// candidate `j` under frame `i`'s script.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanningMatrices {
    pub transition: Vec<Vec<Vec<f64>>>,
    pub emission: Vec<Vec<f64>>,
}

impl PlanningMatrices {
    pub fn new(transition: Vec<Vec<Vec<f64>>>, emission: Vec<Vec<f64>>) -> Result<Self> {
        let m = PlanningMatrices { transition, emission };
        m.validate()?;
        Ok(m)
    }

    pub fn frames(&self) -> usize {
        self.emission.len()
    }

    pub fn candidates(&self) -> usize {
        self.emission.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let (f, l) = (self.frames(), self.candidates());
        if f == 0 || l == 0 {
            return Err(PlanningError::Empty);
        }
        if self.transition.len() != f - 1 {
            return Err(PlanningError::Shape(format!("{} transition matrices for {f} frames", self.transition.len())));
        }
        for (i, e) in self.emission.iter().enumerate() {
            check_distribution(e, l, || format!("emission {i}"))?;
        }
        for (i, a) in self.transition.iter().enumerate() {
            if a.len() != l {
                return Err(PlanningError::Shape(format!("transition {i} has {} rows", a.len())));
            }
            for (j, row) in a.iter().enumerate() {
                check_distribution(row, l, || format!("transition {i} row {j}"))?;
            }
        }
        Ok(())
    }
}

fn check_distribution(p: &[f64], l: usize, place: impl Fn() -> String) -> Result<()> {
    if p.len() != l {
        return Err(PlanningError::Shape(format!("{} has {} entries, expected {l}", place(), p.len())));
    }
    for &v in p {
        if !(v > 0.0 && v.is_finite()) {
            return Err(PlanningError::Probability { place: place(), value: v });
        }
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > STOCHASTIC_TOL {
        return Err(PlanningError::Probability { place: place(), value: s });
    }
    Ok(())
}

/// Max-shifted softmax in `f64`.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Row `j` of matrix `i` is the softmax over `k` of `prev[i][j] · next[i][k]`,
/// for embeddings `emb[i][j]` of candidate `j` at frame `i`.
pub fn transition_from_embeddings(emb: &[Vec<Vec<f32>>]) -> Vec<Vec<Vec<f64>>> {
    emb.windows(2)
        .map(|w| w[0].iter().map(|a| softmax(&w[1].iter().map(|b| dot(a, b)).collect::<Vec<_>>())).collect())
        .collect()
}

/// `E[i]` is the softmax over `j` of `text[i] · pose[i][j]`.
pub fn emission_from_embeddings(text: &[Vec<f32>], pose: &[Vec<Vec<f32>>]) -> Vec<Vec<f64>> {
    text.iter().zip(pose).map(|(t, ps)| softmax(&ps.iter().map(|p| dot(t, p)).collect::<Vec<_>>())).collect()
}

fn pose_embeddings(poses: &[Vec<PoseVector>], enc: &RetrievalEncoders) -> Result<Vec<Vec<Vec<f32>>>> {
    let flat: Vec<PoseVector> = poses.iter().flatten().cloned().collect();
    let e = enc.encode_poses(&flat)?;
    let mut it = e.into_iter();
    Ok(poses.iter().map(|row| it.by_ref().take(row.len()).collect()).collect())
}

pub fn build_transition(poses: &[Vec<PoseVector>], enc: &RetrievalEncoders) -> Result<Vec<Vec<Vec<f64>>>> {
    if poses.len() < 2 {
        return Err(PlanningError::Shape("transitions need at least two frames".into()));
    }
    Ok(transition_from_embeddings(&pose_embeddings(poses, enc)?))
}

pub fn build_emission(
    scripts: &[PostureScript],
    poses: &[Vec<PoseVector>],
    enc: &RetrievalEncoders,
) -> Result<Vec<Vec<f64>>> {
    if scripts.is_empty() || scripts.len() != poses.len() {
        return Err(PlanningError::Shape(format!("{} scripts for {} candidate rows", scripts.len(), poses.len())));
    }
    let text = enc.encode_scripts(scripts)?;
    Ok(emission_from_embeddings(&text, &pose_embeddings(poses, enc)?))
}

/// Both matrices for a candidate set, sharing one pose-encoder pass.
pub fn build_matrices(set: &CandidateSet, enc: &RetrievalEncoders) -> Result<PlanningMatrices> {
    if set.frames() == 0 {
        return Err(PlanningError::Empty);
    }
    let pe = pose_embeddings(&set.poses, enc)?;
    let text = enc.encode_scripts(&set.scripts)?;
    PlanningMatrices::new(transition_from_embeddings(&pe), emission_from_embeddings(&text, &pe))
}

/// Candidate index per frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PosePath(pub Vec<usize>);

/// Path score accumulated in the same order the dynamic program uses, so the
/// two searches agree bit for bit on the optimum.
pub fn path_log_prob(m: &PlanningMatrices, path: &[usize]) -> f64 {
    let mut s = m.emission[0][path[0]].ln();
    for i in 1..path.len() {
        s = (s + m.transition[i - 1][path[i - 1]][path[i]].ln()) + m.emission[i][path[i]].ln();
    }
    s
}

/// Most probable path; among equal scores the smallest final index wins,
/// then the smallest predecessor at each step back.
pub fn viterbi_select(m: &PlanningMatrices) -> Result<(PosePath, f64)> {
    m.validate()?;
    let (f, l) = (m.frames(), m.candidates());
    let mut delta: Vec<f64> = m.emission[0].iter().map(|p| p.ln()).collect();
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(f - 1);
    for i in 1..f {
        let mut next = vec![0.0; l];
        let mut ptr = vec![0; l];
        for k in 0..l {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for j in 0..l {
                let v = delta[j] + m.transition[i - 1][j][k].ln();
                if v > best {
                    best = v;
                    arg = j;
                }
            }
            next[k] = best + m.emission[i][k].ln();
            ptr[k] = arg;
        }
        delta = next;
        back.push(ptr);
    }
    let (mut g, mut score) = (0, f64::NEG_INFINITY);
    for (k, &v) in delta.iter().enumerate() {
        if v > score {
            score = v;
            g = k;
        }
    }
    let mut path = vec![g; f];
    for i in (1..f).rev() {
        path[i - 1] = back[i - 1][path[i]];
    }
    Ok((PosePath(path), score))
}

/// Exhaustive search over all `L^F` paths with the same objective and tie rule.
pub fn brute_force_select(m: &PlanningMatrices) -> Result<(PosePath, f64)> {
    m.validate()?;
    let (f, l) = (m.frames(), m.candidates());
    let count = (l as u128).checked_pow(f as u32).unwrap_or(u128::MAX);
    if count > BRUTE_FORCE_LIMIT {
        return Err(PlanningError::TooLarge(count));
    }
    let mut path = vec![0usize; f];
    let mut best: Option<(Vec<usize>, f64)> = None;
    loop {
        let s = path_log_prob(m, &path);
        let better = match &best {
            None => true,
            Some((bp, bs)) => s > *bs || (s == *bs && path.iter().rev().lt(bp.iter().rev())),
        };
        if better {
            best = Some((path.clone(), s));
        }
        // Odometer increment, first frame fastest.
        let mut i = 0;
        loop {
            if i == f {
                let (p, s) = best.expect("at least one path");
                return Ok((PosePath(p), s));
            }
            path[i] += 1;
            if path[i] < l {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}
