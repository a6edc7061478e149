//! Posture scripts: the five clause categories, template rendering and
//! parsing, a rule-based pose describer and the controlled token vocabulary.

use std::collections::HashMap;
use std::fmt;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::motion::{forward_kinematics, joint, PoseVector, Skeleton};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScriptError {
    #[error("unknown body part `{0}`")]
    UnknownPart(String),
    #[error("unknown qualifier `{0}`")]
    UnknownQualifier(String),
    #[error("qualifier `{qualifier}` does not belong to category {category}")]
    CategoryMismatch { category: Category, qualifier: String },
    #[error("category {category} takes {expected} subject(s), got {got}")]
    SubjectCount { category: Category, expected: usize, got: usize },
    #[error("a script needs at least one clause")]
    Empty,
    #[error("no recognizable clause in text ({skipped} sentence(s) skipped)")]
    NothingParsed { skipped: usize },
    #[error("stored text does not match the rendered clauses")]
    TextMismatch,
    #[error("word `{0}` is not in the vocabulary")]
    OutOfVocabulary(String),
}

pub type Result<T> = std::result::Result<T, ScriptError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Bend,
    Distance,
    RelativePosition,
    Orientation,
    GroundContact,
}

impl Category {
    pub const ALL: [Category; 5] =
        [Category::Bend, Category::Distance, Category::RelativePosition, Category::Orientation, Category::GroundContact];

    pub fn subject_count(self) -> usize {
        match self {
            Category::Distance | Category::RelativePosition => 2,
            _ => 1,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Category::Bend => "bend",
            Category::Distance => "distance",
            Category::RelativePosition => "relative_position",
            Category::Orientation => "orientation",
            Category::GroundContact => "ground_contact",
        };
        f.write_str(s)
    }
}

macro_rules! named_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn name(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }

            pub fn index(self) -> usize {
                self as usize
            }

            pub fn from_name(s: &str) -> Option<Self> {
                Self::ALL.iter().copied().find(|v| v.name() == s)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

named_enum!(BodyPart {
    LeftElbow => "left elbow",
    RightElbow => "right elbow",
    LeftKnee => "left knee",
    RightKnee => "right knee",
    LeftHand => "left hand",
    RightHand => "right hand",
    LeftFoot => "left foot",
    RightFoot => "right foot",
    LeftShoulder => "left shoulder",
    RightShoulder => "right shoulder",
    LeftHip => "left hip",
    RightHip => "right hip",
    LeftArm => "left arm",
    RightArm => "right arm",
    LeftThigh => "left thigh",
    RightThigh => "right thigh",
    Torso => "torso",
    Head => "head",
});

named_enum!(Qualifier {
    CompletelyBent => "completely bent",
    SlightlyBent => "slightly bent",
    Straight => "straight",
    Close => "close",
    ShoulderWidthApart => "shoulder width apart",
    Spread => "spread",
    Wide => "wide",
    Behind => "behind",
    InFrontOf => "in front of",
    Below => "below",
    Above => "above",
    AtTheRightOf => "at the right of",
    AtTheLeftOf => "at the left of",
    Vertical => "vertical",
    Horizontal => "horizontal",
    TouchingGround => "touching ground",
    OffGround => "off ground",
});

impl BodyPart {
    pub fn mirrored(self) -> Self {
        use BodyPart::*;
        match self {
            LeftElbow => RightElbow,
            RightElbow => LeftElbow,
            LeftKnee => RightKnee,
            RightKnee => LeftKnee,
            LeftHand => RightHand,
            RightHand => LeftHand,
            LeftFoot => RightFoot,
            RightFoot => LeftFoot,
            LeftShoulder => RightShoulder,
            RightShoulder => LeftShoulder,
            LeftHip => RightHip,
            RightHip => LeftHip,
            LeftArm => RightArm,
            RightArm => LeftArm,
            LeftThigh => RightThigh,
            RightThigh => LeftThigh,
            Torso => Torso,
            Head => Head,
        }
    }
}

impl Qualifier {
    pub fn category(self) -> Category {
        use Qualifier::*;
        match self {
            CompletelyBent | SlightlyBent | Straight => Category::Bend,
            Close | ShoulderWidthApart | Spread | Wide => Category::Distance,
            Behind | InFrontOf | Below | Above | AtTheRightOf | AtTheLeftOf => Category::RelativePosition,
            Vertical | Horizontal => Category::Orientation,
            TouchingGround | OffGround => Category::GroundContact,
        }
    }

    /// Position within an ordered bucket scale; only bend and distance are ordered.
    pub fn rank(self) -> Option<usize> {
        use Qualifier::*;
        match self {
            CompletelyBent => Some(0),
            SlightlyBent => Some(1),
            Straight => Some(2),
            Close => Some(0),
            ShoulderWidthApart => Some(1),
            Spread => Some(2),
            Wide => Some(3),
            _ => None,
        }
    }

    pub fn mirrored(self) -> Self {
        match self {
            Qualifier::AtTheLeftOf => Qualifier::AtTheRightOf,
            Qualifier::AtTheRightOf => Qualifier::AtTheLeftOf,
            q => q,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "ClauseRepr", into = "ClauseRepr")]
pub struct Clause {
    category: Category,
    subject: Vec<BodyPart>,
    qualifier: Qualifier,
}

#[derive(Serialize, Deserialize)]
struct ClauseRepr {
    category: Category,
    subject: Vec<String>,
    qualifier: String,
}

impl TryFrom<ClauseRepr> for Clause {
    type Error = ScriptError;
    fn try_from(r: ClauseRepr) -> Result<Self> {
        let subject = r
            .subject
            .iter()
            .map(|s| BodyPart::from_name(s).ok_or_else(|| ScriptError::UnknownPart(s.clone())))
            .collect::<Result<Vec<_>>>()?;
        let qualifier = Qualifier::from_name(&r.qualifier).ok_or(ScriptError::UnknownQualifier(r.qualifier))?;
        Clause::new(r.category, subject, qualifier)
    }
}

impl From<Clause> for ClauseRepr {
    fn from(c: Clause) -> Self {
        ClauseRepr {
            category: c.category,
            subject: c.subject.iter().map(|p| p.name().to_string()).collect(),
            qualifier: c.qualifier.name().to_string(),
        }
    }
}

impl Clause {
    pub fn new(category: Category, subject: Vec<BodyPart>, qualifier: Qualifier) -> Result<Self> {
        if qualifier.category() != category {
            return Err(ScriptError::CategoryMismatch { category, qualifier: qualifier.name().into() });
        }
        if subject.len() != category.subject_count() {
            return Err(ScriptError::SubjectCount {
                category,
                expected: category.subject_count(),
                got: subject.len(),
            });
        }
        Ok(Clause { category, subject, qualifier })
    }

    /// Single-subject clause whose category is implied by the qualifier.
    pub fn single(subject: BodyPart, qualifier: Qualifier) -> Result<Self> {
        Clause::new(qualifier.category(), vec![subject], qualifier)
    }

    pub fn pair(a: BodyPart, b: BodyPart, qualifier: Qualifier) -> Result<Self> {
        Clause::new(qualifier.category(), vec![a, b], qualifier)
    }

    pub fn category(&self) -> Category {
        self.category
    }

    pub fn subject(&self) -> &[BodyPart] {
        &self.subject
    }

    pub fn qualifier(&self) -> Qualifier {
        self.qualifier
    }

    pub fn render(&self) -> String {
        let s = &self.subject;
        let q = self.qualifier.name();
        match self.category {
            Category::Bend | Category::Orientation => format!("The {} is {q}.", s[0]),
            Category::Distance => format!("The {} and the {} are {q}.", s[0], s[1]),
            Category::RelativePosition => format!("The {} is {q} the {}.", s[0], s[1]),
            Category::GroundContact => match self.qualifier {
                Qualifier::TouchingGround => format!("The {} is touching the ground.", s[0]),
                _ => format!("The {} is off the ground.", s[0]),
            },
        }
    }

    pub fn mirrored(&self) -> Clause {
        let mut subject: Vec<BodyPart> = self.subject.iter().map(|p| p.mirrored()).collect();
        if self.category == Category::Distance {
            subject.sort();
        }
        Clause { category: self.category, subject, qualifier: self.qualifier.mirrored() }
    }

    /// Subject key used to match clauses across scripts; distance pairs are unordered.
    fn key(&self) -> (Category, Vec<BodyPart>) {
        let mut s = self.subject.clone();
        if self.category == Category::Distance {
            s.sort();
        }
        (self.category, s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "ScriptRepr", into = "ScriptRepr")]
pub struct PostureScript {
    clauses: Vec<Clause>,
    text: String,
}

#[derive(Serialize, Deserialize)]
struct ScriptRepr {
    clauses: Vec<Clause>,
    text: String,
}

impl TryFrom<ScriptRepr> for PostureScript {
    type Error = ScriptError;
    fn try_from(r: ScriptRepr) -> Result<Self> {
        let s = PostureScript::new(r.clauses)?;
        if s.text != r.text {
            return Err(ScriptError::TextMismatch);
        }
        Ok(s)
    }
}

impl From<PostureScript> for ScriptRepr {
    fn from(s: PostureScript) -> Self {
        ScriptRepr { clauses: s.clauses, text: s.text }
    }
}

impl PostureScript {
    pub fn new(clauses: Vec<Clause>) -> Result<Self> {
        if clauses.is_empty() {
            return Err(ScriptError::Empty);
        }
        let text = render_clauses(&clauses);
        Ok(PostureScript { clauses, text })
    }

    pub fn clauses(&self) -> &[Clause] {
        &self.clauses
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn mirrored(&self) -> PostureScript {
        PostureScript::new(self.clauses.iter().map(|c| c.mirrored()).collect()).expect("nonempty")
    }
}

fn render_clauses(clauses: &[Clause]) -> String {
    clauses.iter().map(|c| c.render()).collect::<Vec<_>>().join(" ")
}

pub fn render_script(script: &PostureScript) -> String {
    render_clauses(&script.clauses)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedScript {
    pub script: PostureScript,
    pub skipped: usize,
}

/// Template matching over sentences; unrecognized sentences are skipped and counted.
pub fn parse_script(text: &str) -> Result<ParsedScript> {
    let mut clauses = Vec::new();
    let mut skipped = 0;
    for sentence in text.split(['.', ';', '!', '\n']) {
        let norm = normalize(sentence);
        if norm.is_empty() {
            continue;
        }
        match parse_sentence(&norm) {
            Some(cs) => clauses.extend(cs),
            None => skipped += 1,
        }
    }
    if clauses.is_empty() {
        return Err(ScriptError::NothingParsed { skipped });
    }
    Ok(ParsedScript { script: PostureScript::new(clauses)?, skipped })
}

fn normalize(s: &str) -> String {
    let cleaned: String =
        s.chars().map(|c| if c == '-' || c == '_' { ' ' } else { c.to_ascii_lowercase() }).filter(|c| *c != ',').collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn strip_determiner(s: &str) -> &str {
    for d in ["the ", "his ", "her ", "their ", "its ", "a "] {
        if let Some(rest) = s.strip_prefix(d) {
            return rest;
        }
    }
    s
}

/// Longest body-part name at the start of `s`, with the remainder after it.
fn take_part(s: &str) -> Option<(BodyPart, &str)> {
    let s = strip_determiner(s);
    BodyPart::ALL
        .iter()
        .filter(|p| s.strip_prefix(p.name()).is_some_and(|r| r.is_empty() || r.starts_with(' ')))
        .max_by_key(|p| p.name().len())
        .map(|p| (*p, s[p.name().len()..].trim_start()))
}

const PLURALS: &[(&str, BodyPart, BodyPart)] = &[
    ("elbows", BodyPart::LeftElbow, BodyPart::RightElbow),
    ("knees", BodyPart::LeftKnee, BodyPart::RightKnee),
    ("hands", BodyPart::LeftHand, BodyPart::RightHand),
    ("feet", BodyPart::LeftFoot, BodyPart::RightFoot),
    ("arms", BodyPart::LeftArm, BodyPart::RightArm),
    ("thighs", BodyPart::LeftThigh, BodyPart::RightThigh),
    ("shoulders", BodyPart::LeftShoulder, BodyPart::RightShoulder),
];

const TOUCHING: &[&str] =
    &["touching the ground", "touching ground", "on the ground", "resting on the ground", "in contact with the ground"];
const OFF: &[&str] = &[
    "off the ground",
    "off ground",
    "above the ground",
    "slightly above the ground",
    "lifted off the ground",
    "raised off the ground",
    "in the air",
    "not touching the ground",
];

fn single_qualifier(rest: &str) -> Option<Qualifier> {
    if TOUCHING.contains(&rest) {
        return Some(Qualifier::TouchingGround);
    }
    if OFF.contains(&rest) {
        return Some(Qualifier::OffGround);
    }
    let rest = rest.strip_prefix("oriented ").unwrap_or(rest);
    let rest = match rest {
        "fully bent" | "bent completely" => "completely bent",
        "a little bent" | "bent slightly" | "partially bent" => "slightly bent",
        "extended" | "fully extended" => "straight",
        "vertically" => "vertical",
        "horizontally" => "horizontal",
        other => other,
    };
    Qualifier::from_name(rest).filter(|q| matches!(q.category(), Category::Bend | Category::Orientation))
}

fn relative_qualifier(rest: &str) -> Option<(Qualifier, &str)> {
    const FORMS: &[(&str, Qualifier)] = &[
        ("at the right of", Qualifier::AtTheRightOf),
        ("to the right of", Qualifier::AtTheRightOf),
        ("on the right of", Qualifier::AtTheRightOf),
        ("at the left of", Qualifier::AtTheLeftOf),
        ("to the left of", Qualifier::AtTheLeftOf),
        ("on the left of", Qualifier::AtTheLeftOf),
        ("in front of", Qualifier::InFrontOf),
        ("behind", Qualifier::Behind),
        ("below", Qualifier::Below),
        ("under", Qualifier::Below),
        ("beneath", Qualifier::Below),
        ("above", Qualifier::Above),
        ("over", Qualifier::Above),
    ];
    FORMS.iter().find_map(|(form, q)| rest.strip_prefix(form).and_then(|r| r.strip_prefix(' ')).map(|r| (*q, r)))
}

fn distance_qualifier(rest: &str) -> Option<Qualifier> {
    let rest = rest.strip_suffix(" apart").filter(|r| *r != "shoulder width").unwrap_or(rest);
    match rest {
        "close" | "close together" | "close to each other" | "together" => Some(Qualifier::Close),
        "shoulder width apart" | "shoulder width" => Some(Qualifier::ShoulderWidthApart),
        "spread" | "spread out" => Some(Qualifier::Spread),
        "wide" | "far" | "far from each other" => Some(Qualifier::Wide),
        _ => None,
    }
}

fn parse_sentence(s: &str) -> Option<Vec<Clause>> {
    let s = strip_determiner(s);
    if let Some(rest) = s.strip_prefix("both ") {
        let rest = strip_determiner(rest);
        for (plural, l, r) in PLURALS {
            if let Some(tail) = rest.strip_prefix(plural).and_then(|t| t.strip_prefix(" are ")) {
                let q = single_qualifier(tail)?;
                return Some(vec![Clause::single(*l, q).ok()?, Clause::single(*r, q).ok()?]);
            }
        }
        return None;
    }
    let (a, rest) = take_part(s)?;
    if let Some(rest) = rest.strip_prefix("and ") {
        let (b, rest) = take_part(rest)?;
        let q = distance_qualifier(rest.strip_prefix("are ")?)?;
        return Some(vec![Clause::pair(a, b, q).ok()?]);
    }
    let rest = rest.strip_prefix("is ")?;
    if let Some(q) = single_qualifier(rest) {
        return Some(vec![Clause::single(a, q).ok()?]);
    }
    let (q, tail) = relative_qualifier(rest)?;
    let (b, tail) = take_part(tail)?;
    if !tail.is_empty() {
        return None;
    }
    Some(vec![Clause::pair(a, b, q).ok()?])
}

/// Bucket thresholds shared by the describer, the consistency score and tests.
pub mod thresholds {
    /// Interior joint angle above which a joint is straight (degrees).
    pub const STRAIGHT_MIN_DEG: f64 = 150.0;
    /// Interior joint angle below which a joint is completely bent (degrees).
    pub const COMPLETELY_BENT_MAX_DEG: f64 = 60.0;
    /// Distance bucket edges as multiples of shoulder width.
    pub const DISTANCE_EDGES: [f64; 3] = [0.5, 1.5, 2.5];
    /// Minimum dominant-axis offset for a relative-position clause (meters).
    pub const RELATIVE_MARGIN: f64 = 0.05;
    /// Cone half-angle for vertical/horizontal bones (degrees).
    pub const ORIENTATION_CONE_DEG: f64 = 20.0;
    /// Height above the lowest joint still counted as ground contact (meters).
    pub const GROUND_MARGIN: f64 = 0.05;
}

pub fn bend_bucket(interior_deg: f64) -> Qualifier {
    if interior_deg > thresholds::STRAIGHT_MIN_DEG {
        Qualifier::Straight
    } else if interior_deg < thresholds::COMPLETELY_BENT_MAX_DEG {
        Qualifier::CompletelyBent
    } else {
        Qualifier::SlightlyBent
    }
}

pub fn distance_bucket(ratio: f64) -> Qualifier {
    let [a, b, c] = thresholds::DISTANCE_EDGES;
    if ratio < a {
        Qualifier::Close
    } else if ratio < b {
        Qualifier::ShoulderWidthApart
    } else if ratio < c {
        Qualifier::Spread
    } else {
        Qualifier::Wide
    }
}

/// `Vertical`, `Horizontal` or neither for a bone direction.
pub fn orientation_bucket(dir: &Vector3<f64>) -> Option<Qualifier> {
    let n = dir.norm();
    if n == 0.0 {
        return None;
    }
    let from_vertical = (dir.z.abs() / n).clamp(0.0, 1.0).acos().to_degrees();
    if from_vertical <= thresholds::ORIENTATION_CONE_DEG {
        Some(Qualifier::Vertical)
    } else if from_vertical >= 90.0 - thresholds::ORIENTATION_CONE_DEG {
        Some(Qualifier::Horizontal)
    } else {
        None
    }
}

fn interior_angle_deg(a: &Vector3<f64>, mid: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let (u, v) = (a - mid, b - mid);
    (u.dot(&v) / (u.norm() * v.norm())).clamp(-1.0, 1.0).acos().to_degrees()
}

pub fn shoulder_width(skeleton: &Skeleton) -> f64 {
    let rest = forward_kinematics(&PoseVector::identity(), skeleton, Vector3::zeros());
    (rest[joint::L_SHOULDER] - rest[joint::R_SHOULDER]).norm()
}

/// Deterministic script of a pose, in canonical clause order.
pub fn describe_pose(pose: &PoseVector, skeleton: &Skeleton) -> PostureScript {
    use joint::*;
    use BodyPart as P;
    let x = forward_kinematics(pose, skeleton, Vector3::zeros());
    let mut out = Vec::new();
    let mut push = |c: Result<Clause>| out.push(c.expect("describer emits valid clauses"));

    for (part, a, m, b) in [
        (P::LeftElbow, L_SHOULDER, L_ELBOW, L_WRIST),
        (P::RightElbow, R_SHOULDER, R_ELBOW, R_WRIST),
        (P::LeftKnee, L_HIP, L_KNEE, L_ANKLE),
        (P::RightKnee, R_HIP, R_KNEE, R_ANKLE),
    ] {
        push(Clause::single(part, bend_bucket(interior_angle_deg(&x[a], &x[m], &x[b]))));
    }

    let sw = shoulder_width(skeleton);
    for (pa, pb, a, b) in [(P::LeftHand, P::RightHand, L_WRIST, R_WRIST), (P::LeftFoot, P::RightFoot, L_FOOT, R_FOOT)] {
        push(Clause::pair(pa, pb, distance_bucket((x[a] - x[b]).norm() / sw)));
    }

    let lateral = {
        let d = x[L_HIP] - x[R_HIP];
        Vector3::new(d.x, d.y, 0.0)
    };
    if lateral.norm() > 1e-6 {
        let left = lateral.normalize();
        let forward = Vector3::z().cross(&left);
        for (pa, pb, a, b) in
            [(P::LeftHand, P::LeftShoulder, L_WRIST, L_SHOULDER), (P::RightHand, P::RightShoulder, R_WRIST, R_SHOULDER)]
        {
            let d = x[a] - x[b];
            let comps = [
                (d.dot(&left), Qualifier::AtTheLeftOf, Qualifier::AtTheRightOf),
                (d.dot(&forward), Qualifier::InFrontOf, Qualifier::Behind),
                (d.z, Qualifier::Above, Qualifier::Below),
            ];
            let (v, pos, neg) = comps.iter().copied().fold(comps[0], |best, c| if c.0.abs() > best.0.abs() { c } else { best });
            if v.abs() >= thresholds::RELATIVE_MARGIN {
                push(Clause::pair(pa, pb, if v > 0.0 { pos } else { neg }));
            }
        }
    }

    for (part, a, b) in [
        (P::Torso, PELVIS, NECK),
        (P::LeftArm, L_SHOULDER, L_ELBOW),
        (P::RightArm, R_SHOULDER, R_ELBOW),
        (P::LeftThigh, L_HIP, L_KNEE),
        (P::RightThigh, R_HIP, R_KNEE),
    ] {
        if let Some(q) = orientation_bucket(&(x[b] - x[a])) {
            push(Clause::single(part, q));
        }
    }

    let floor = x.iter().map(|p| p.z).fold(f64::INFINITY, f64::min);
    let touching = |j: usize| x[j].z - floor <= thresholds::GROUND_MARGIN;
    for (part, j) in [(P::LeftFoot, L_FOOT), (P::RightFoot, R_FOOT)] {
        push(Clause::single(part, if touching(j) { Qualifier::TouchingGround } else { Qualifier::OffGround }));
    }
    for (part, j) in [(P::LeftKnee, L_KNEE), (P::RightKnee, R_KNEE), (P::LeftHand, L_WRIST), (P::RightHand, R_WRIST)] {
        if touching(j) {
            push(Clause::single(part, Qualifier::TouchingGround));
        }
    }
    PostureScript::new(out).expect("feet clauses are always present")
}

/// Fraction of clauses agreeing with the describer; adjacent ordered buckets count half.
pub fn script_consistency(pose: &PoseVector, script: &PostureScript, skeleton: &Skeleton) -> f64 {
    let described = describe_pose(pose, skeleton);
    let lookup: HashMap<_, _> = described.clauses().iter().map(|c| (c.key(), c.qualifier())).collect();
    let total: f64 = script
        .clauses()
        .iter()
        .map(|c| match lookup.get(&c.key()) {
            Some(&q) if q == c.qualifier() => 1.0,
            Some(&q) => match (q.rank(), c.qualifier().rank()) {
                (Some(a), Some(b)) if a.abs_diff(b) == 1 => 0.5,
                _ => 0.0,
            },
            None => 0.0,
        })
        .sum();
    total / script.clauses().len() as f64
}

pub const PAD: usize = 0;
pub const DEFAULT_TOKEN_LEN: usize = 64;

/// Phrase-level vocabulary: body parts and qualifiers are single tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptVocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    max_phrase_words: usize,
}

const GLUE: &[&str] = &["the", "is", "are", "and", "touching", "off", "ground"];

impl ScriptVocabulary {
    pub fn standard() -> Self {
        let mut tokens = vec!["<pad>".to_string()];
        tokens.extend(GLUE.iter().map(|s| s.to_string()));
        tokens.extend(BodyPart::ALL.iter().map(|p| p.name().to_string()));
        tokens.extend(
            Qualifier::ALL
                .iter()
                .filter(|q| q.category() != Category::GroundContact)
                .map(|q| q.name().to_string()),
        );
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let max_phrase_words = tokens.iter().map(|t| t.split(' ').count()).max().unwrap_or(1);
        ScriptVocabulary { tokens, index, max_phrase_words }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    /// Greedy longest-phrase tokenization of free text, without padding.
    pub fn encode_text(&self, text: &str) -> Result<Vec<usize>> {
        let norm: String = text.chars().filter(|c| !matches!(c, '.' | ',' | ';')).collect::<String>().to_lowercase();
        let words: Vec<&str> = norm.split_whitespace().collect();
        let mut ids = Vec::new();
        let mut i = 0;
        while i < words.len() {
            let found = (1..=self.max_phrase_words.min(words.len() - i))
                .rev()
                .find_map(|n| self.id(&words[i..i + n].join(" ")).map(|id| (id, n)));
            match found {
                Some((id, n)) => {
                    ids.push(id);
                    i += n;
                }
                None => return Err(ScriptError::OutOfVocabulary(words[i].to_string())),
            }
        }
        Ok(ids)
    }

    /// Token ids of the rendered script padded or truncated to `len`.
    pub fn tokenize_len(&self, script: &PostureScript, len: usize) -> Result<Vec<usize>> {
        let mut ids = self.encode_text(script.text())?;
        ids.resize(len, PAD);
        Ok(ids)
    }

    pub fn tokenize(&self, script: &PostureScript) -> Result<Vec<usize>> {
        self.tokenize_len(script, DEFAULT_TOKEN_LEN)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_ids_are_dense() {
        let v = ScriptVocabulary::standard();
        for i in 0..v.len() {
            assert_eq!(v.id(v.token(i).unwrap()), Some(i));
        }
        assert_eq!(v.token(PAD), Some("<pad>"));
    }

    #[test]
    fn both_knees_expands() {
        let p = parse_script("Both knees are completely bent.").unwrap();
        assert_eq!(p.script.clauses().len(), 2);
        assert_eq!(p.script.clauses()[1].subject(), &[BodyPart::RightKnee]);
    }

    #[test]
    fn ground_sentences_take_priority_over_relative_above() {
        let p = parse_script("His left foot is slightly above the ground.").unwrap();
        assert_eq!(p.script.clauses()[0].qualifier(), Qualifier::OffGround);
    }
}
