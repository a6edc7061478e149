//! Acceptance suite. Runs every criterion with its tolerance and time budget
//! and prints one `[PASS]`/`[FAIL]` line each.
//!
//! `cargo test -p promo-cli --test acceptance -- 4 7` runs a subset. A failing
//! criterion is reported but only fails the process when
//! `PROMO_ACCEPTANCE_STRICT=1` is set.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, Matrix3, Quaternion, UnitQuaternion, Vector3};
use promo_core::diffusion::{cfg_combine, q_sample, DiffusionSchedule, ScheduleKind};
use promo_core::go::{
    extract_keyposes, generate_motion, generate_motions, interpolate_baseline, train_go_diffuser, GoConfig, GoModel,
    GoTrainConfig, KeyposeCondition,
};
use promo_core::metrics::{
    ape, ave, fid, r_precision, smoothness, trajectories, ErrorVariant, GaussianStats, JointTrajectory,
};
use promo_core::motion::{
    decode_motion, encode_motion, rotmat_to_sixd, sixd_to_rotmat, MotionSequence, PoseVector, RawMotion, Skeleton,
    FRAME_DIM, NUM_JOINTS, POSE_DIM, SEQ_LEN,
};
use promo_core::norm::FeatureNorm;
use promo_core::planner::{plan_motion, EndpointConfig, PlannerError, PlannerRequest};
use promo_core::planning::{
    brute_force_select, emission_from_embeddings, path_log_prob, softmax, transition_from_embeddings, viterbi_select,
    PlanningMatrices,
};
use promo_core::posture::{generate_candidates, train_posture_diffuser, PostureConfig, PostureModel, PostureTrainConfig};
use promo_core::script::{script_consistency, PostureScript};
use promo_core::synth::{heading_direction, synth_motion, synth_motions, synth_pose_pairs, MotionKind, DEFAULT_FPS};
use promo_nn::rng::normal_vec;
use promo_nn::{gradient_check, rng_from, LayerSpec, Network, NetworkSpec, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::json;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// 1

fn layer_cases() -> Vec<(&'static str, NetworkSpec, Vec<usize>)> {
    use LayerSpec::*;
    vec![
        ("linear", NetworkSpec::new(vec![Linear { inp: 3, out: 4 }]), vec![2, 3]),
        ("layer_norm", NetworkSpec::new(vec![Linear { inp: 3, out: 4 }, LayerNorm { dim: 4 }]), vec![2, 3]),
        ("gelu", NetworkSpec::new(vec![Linear { inp: 3, out: 4 }, Gelu]), vec![2, 3]),
        ("attention", NetworkSpec::new(vec![SelfAttention { dim: 4, heads: 2 }]), vec![2, 3, 4]),
        ("bigru", NetworkSpec::new(vec![BiGru { inp: 3, hidden: 3 }]), vec![2, 4, 3]),
        ("embedding", NetworkSpec::new(vec![Embedding { vocab: 5, dim: 3 }, Linear { inp: 3, out: 2 }]), vec![2, 3]),
        (
            "residual",
            NetworkSpec::new(vec![Residual(vec![Linear { inp: 3, out: 5 }, Gelu, Linear { inp: 5, out: 3 }])]),
            vec![2, 3],
        ),
        ("dropout", NetworkSpec::new(vec![Linear { inp: 3, out: 6 }, Dropout { p: 0.3 }]), vec![2, 3]),
    ]
}

fn autodiff() -> Outcome {
    let mut worst = (0.0, "");
    for (name, spec, shape) in layer_cases() {
        for seed in 0..50u64 {
            let net = Network::<f32>::new(spec.clone(), seed).map_err(|e| format!("{name}: {e}"))?;
            let n: usize = shape.iter().product();
            let data: Vec<f32> = match spec.layers[0] {
                LayerSpec::Embedding { vocab, .. } => (0..n).map(|i| ((seed as usize + 3 * i) % vocab) as f32).collect(),
                _ => normal_vec(&mut rng_from(seed ^ 0xABCD), n),
            };
            let x = Tensor::new(shape.clone(), data).unwrap();
            let err = gradient_check(&net, &x, seed).map_err(|e| format!("{name}: {e}"))?;
            check(err < 1e-3, || format!("{name} seed {seed}: relative error {err:e}"))?;
            if err > worst.0 {
                worst = (err, name);
            }
        }
    }
    Ok(format!("8 layer types x 50 seeds, worst relative error {:.2e} ({})", worst.0, worst.1))
}

// 2

fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
    let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    *UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3])).to_rotation_matrix().matrix()
}

fn rotation_defect(r: &Matrix3<f64>) -> f64 {
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    ortho.max((r.determinant() - 1.0).abs())
}

fn rotation_math() -> Outcome {
    let mut rng = rng_from(2);
    let (mut worst_trip, mut worst_defect) = (0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let r = random_rotation(&mut rng);
        let back = sixd_to_rotmat(&rotmat_to_sixd(&r).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        worst_trip = worst_trip.max((back - r).abs().max());
        worst_defect = worst_defect.max(rotation_defect(&back));
        let v: [f64; 6] = std::array::from_fn(|_| rng.gen_range(-5.0..5.0));
        if let Ok(m) = sixd_to_rotmat(&v) {
            worst_defect = worst_defect.max(rotation_defect(&m));
        }
    }
    check(worst_trip < 1e-5 && worst_defect < 1e-5, || format!("round trip {worst_trip:e}, defect {worst_defect:e}"))?;
    Ok(format!("10^4 round trips, max error {worst_trip:.1e}, max orthonormality/det error {worst_defect:.1e}"))
}

// 3

fn encode_decode() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..1000u64 {
        let mut rng = rng_from(seed);
        let mut p = Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), 0.9);
        let mut raw = RawMotion { root_positions: Vec::new(), poses: Vec::new() };
        for _ in 0..SEQ_LEN {
            p += Vector3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), 0.0);
            p.z = rng.gen_range(0.3..1.2);
            raw.root_positions.push(p);
            let rots: Vec<_> = (0..NUM_JOINTS).map(|_| random_rotation(&mut rng)).collect();
            raw.poses.push(PoseVector::from_rotations(&rots).unwrap());
        }
        let seq = encode_motion(&raw, DEFAULT_FPS).map_err(|e| e.to_string())?;
        let back = decode_motion(&seq, [raw.root_positions[0].x, raw.root_positions[0].y]);
        for (a, b) in raw.root_positions.iter().zip(&back.root_positions) {
            worst = worst.max((a - b).abs().max());
        }
        for (a, b) in raw.poses.iter().zip(&back.poses) {
            worst = worst.max(max_abs(a.as_slice(), b.as_slice()));
        }
    }
    check(worst < 1e-6, || format!("max error {worst:e}"))?;
    Ok(format!("10^3 trajectories of {SEQ_LEN} frames, max error {worst:.1e}"))
}

// 4

fn tiny_posture(seed: u64) -> PostureModel {
    let cfg = PostureConfig { latent: 16, layers: 1, heads: 2, dropout: 0.0 };
    let schedule = DiffusionSchedule::new(ScheduleKind::Linear, 50).unwrap();
    PostureModel::new(cfg, schedule, FeatureNorm::identity(POSE_DIM), seed).unwrap()
}

fn tiny_go(seed: u64) -> GoModel {
    let cfg = GoConfig { latent: 16, layers: 1, heads: 2, ff: 32, dropout: 0.1 };
    let schedule = DiffusionSchedule::new(ScheduleKind::Cosine, 20).unwrap();
    GoModel::new(cfg, schedule, FeatureNorm::identity(FRAME_DIM), seed).unwrap()
}

fn diffusion_statistics() -> Outcome {
    let n = 100_000;
    let noise: Vec<f64> = normal_vec(&mut rng_from(4), n);
    let x0 = vec![1.0; n];
    let mut worst = 0.0f64;
    for (kind, steps) in [(ScheduleKind::Linear, 1000), (ScheduleKind::Cosine, 100)] {
        let s = DiffusionSchedule::new(kind, steps).unwrap();
        for t in [1, steps / 2, steps] {
            let x = q_sample(&x0, t, &s, &noise).map_err(|e| e.to_string())?;
            let mean = x.iter().sum::<f64>() / n as f64;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let (em, ev) = (s.alpha_bar(t).sqrt(), 1.0 - s.alpha_bar(t));
            let mean_err = (mean - em).abs() / em.max(ev.sqrt());
            let var_err = (var - ev).abs() / ev;
            check(mean_err < 0.02 && var_err < 0.02, || {
                format!("{kind:?} t={t}: mean {mean} vs {em}, var {var} vs {ev}")
            })?;
            worst = worst.max(mean_err).max(var_err);
        }
    }

    let mut rng = rng_from(44);
    for _ in 0..100 {
        let u: Vec<f32> = normal_vec(&mut rng, 64);
        let c: Vec<f32> = normal_vec(&mut rng, 64);
        let zero = cfg_combine(&u, &c, 0.0).map_err(|e| e.to_string())?;
        let one = cfg_combine(&u, &c, 1.0).map_err(|e| e.to_string())?;
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        check(bits(&zero) == bits(&u) && bits(&one) == bits(&c), || "guidance identity not bit-exact".into())?;
    }

    let posture = tiny_posture(5);
    let scripts: Vec<PostureScript> = synth_pose_pairs(3, 6).into_iter().map(|(_, s)| s).collect();
    let a = generate_candidates(&posture, &scripts, 4, 2.0, 77).map_err(|e| e.to_string())?;
    let b = generate_candidates(&posture, &scripts, 4, 2.0, 77).map_err(|e| e.to_string())?;
    check(a == b, || "posture sampling differs between runs".into())?;
    let go = tiny_go(5);
    let kp = KeyposeCondition::new(a.poses.iter().map(|row| row[0].clone()).collect()).map_err(|e| e.to_string())?;
    let ga = generate_motion(&go, &kp, 2.0, 78).map_err(|e| e.to_string())?;
    let gb = generate_motion(&go, &kp, 2.0, 78).map_err(|e| e.to_string())?;
    check(ga == gb, || "go sampling differs between runs".into())?;
    Ok(format!("q_sample worst relative error {:.2}%, guidance identities and samplers bit-exact", worst * 100.0))
}

// 5

fn viterbi() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = rng_from(seed);
        let f = rng.gen_range(1..=5);
        let l = rng.gen_range(1..=6);
        let mut logits = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect() };
        let emission = (0..f).map(|_| softmax(&logits(l))).collect();
        let transition = (1..f).map(|_| (0..l).map(|_| softmax(&logits(l))).collect()).collect();
        let m = PlanningMatrices::new(transition, emission).map_err(|e| e.to_string())?;
        let (vp, vs) = viterbi_select(&m).map_err(|e| e.to_string())?;
        let (bp, bs) = brute_force_select(&m).map_err(|e| e.to_string())?;
        check(vp == bp && (vs - bs).abs() < 1e-9, || format!("seed {seed}: {vp:?} {vs} vs {bp:?} {bs}"))?;
        check((path_log_prob(&m, &vp.0) - vs).abs() < 1e-9, || format!("seed {seed}: score mismatch"))?;
        worst = worst.max((vs - bs).abs());
    }

    let mut rng = rng_from(55);
    let mut row_err = 0.0f64;
    for _ in 0..100 {
        let (f, l, d) = (rng.gen_range(1..=5), rng.gen_range(1..=6), 8);
        let mut emb = || -> Vec<f32> { (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect() };
        let poses: Vec<Vec<Vec<f32>>> = (0..f).map(|_| (0..l).map(|_| emb()).collect()).collect();
        let text: Vec<Vec<f32>> = (0..f).map(|_| emb()).collect();
        let rows = transition_from_embeddings(&poses).into_iter().flatten().chain(emission_from_embeddings(&text, &poses));
        for row in rows {
            check(row.iter().all(|&p| p >= 0.0), || "negative probability".into())?;
            row_err = row_err.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    check(row_err < 1e-9, || format!("row sum error {row_err:e}"))?;
    Ok(format!("100 instances match brute force (max score gap {worst:.1e}), row sums within {row_err:.1e}"))
}

// 6

fn traj(frames: &[Vec<[f64; 3]>]) -> JointTrajectory {
    frames.iter().map(|f| f.iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect()).collect()
}

fn metric_oracles() -> Outcome {
    let mut rng = rng_from(6);
    let x: Vec<Vec<f32>> = (0..300).map(|_| normal_vec(&mut rng, 8)).collect();
    let s = GaussianStats::fit(&x).map_err(|e| e.to_string())?;
    let same = fid(&s, &s).map_err(|e| e.to_string())?;
    check(same.abs() < 1e-6, || format!("fid(X, X) = {same}"))?;

    let mu = DVector::from_vec(vec![0.5, -1.0, 2.0, 0.25, 3.0]);
    let a = GaussianStats::new(DVector::zeros(5), DMatrix::identity(5, 5)).map_err(|e| e.to_string())?;
    let b = GaussianStats::new(mu.clone(), DMatrix::identity(5, 5)).map_err(|e| e.to_string())?;
    let shift = fid(&a, &b).map_err(|e| e.to_string())?;
    check((shift - mu.norm_squared()).abs() < 1e-6, || format!("mean shift fid {shift} vs {}", mu.norm_squared()))?;

    let zero = traj(&[vec![[0.0; 3]], vec![[0.0; 3]]]);
    let g = traj(&[vec![[3.0, 0.0, 0.0]], vec![[0.0, 4.0, 0.0]]]);
    let a = ape(&[g], &[zero], ErrorVariant::MeanGlobal).map_err(|e| e.to_string())?;
    check(a == 3.5, || format!("ape hand case {a}"))?;
    let r = traj(&[vec![[0.0; 3]], vec![[2.0, 0.0, 0.0]]]);
    let g = traj(&[vec![[0.0; 3]], vec![[4.0, 0.0, 0.0]]]);
    let v = ave(&[g], &[r], ErrorVariant::MeanGlobal).map_err(|e| e.to_string())?;
    check(v == 6.0, || format!("ave hand case {v}"))?;

    let motions: Vec<MotionSequence> = synth_motions(6, 66).map_err(|e| e.to_string())?.into_iter().map(|m| m.motion).collect();
    let t = trajectories(&motions, &Skeleton::canonical());
    for variant in ErrorVariant::ALL {
        let (p, q) = (ape(&t, &t, variant).map_err(|e| e.to_string())?, ave(&t, &t, variant).map_err(|e| e.to_string())?);
        check(p == 0.0 && q == 0.0, || format!("{variant:?} on identical input: ape {p}, ave {q}"))?;
    }
    let still: JointTrajectory = vec![t[0][0].clone(); 10];
    let sm = smoothness(&still).map_err(|e| e.to_string())?;
    check(sm == 0.0, || format!("smoothness of a still pose {sm}"))?;

    let r = r_precision(&x[..32], &x[..32], &[1, 2, 3]).map_err(|e| e.to_string())?;
    check(r.r_at_k.iter().all(|&(_, v)| v == 1.0) && r.median_rank == 1.0, || format!("{r:?}"))?;
    Ok(format!("fid(X,X) {same:.1e}, mean shift {shift:.6}, ape 3.5, ave 6, identical inputs 0, R@1..3 100%, MedR 1"))
}

// 7

fn mean_consistency(model: &PostureModel, scripts: &[PostureScript]) -> Result<f64, String> {
    let skel = Skeleton::canonical();
    let set = generate_candidates(model, scripts, 8, 2.0, 99).map_err(|e| e.to_string())?;
    let scores: Vec<f64> = set
        .poses
        .iter()
        .zip(scripts)
        .flat_map(|(row, s)| row.iter().map(|p| script_consistency(p, s, &skel)).collect::<Vec<_>>())
        .collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

fn posture_training() -> Outcome {
    let pairs = synth_pose_pairs(2000, 7);
    let held: Vec<PostureScript> = synth_pose_pairs(10, 12345).into_iter().map(|(_, s)| s).collect();
    let cfg = PostureTrainConfig { epochs: 200, model: PostureConfig { latent: 64, ..Default::default() }, ..Default::default() };
    let (trained, history) = train_posture_diffuser(&pairs, &cfg, 1, |_, _| {}).map_err(|e| e.to_string())?;
    let (first, last) = (history[0], *history.last().unwrap());
    let (untrained, _) =
        train_posture_diffuser(&pairs, &PostureTrainConfig { epochs: 0, ..cfg.clone() }, 1, |_, _| {}).map_err(|e| e.to_string())?;
    let fresh = PostureModel::new(cfg.model, trained.schedule.clone(), FeatureNorm::identity(POSE_DIM), 1)
        .map_err(|e| e.to_string())?;
    let c_trained = mean_consistency(&trained, &held)?;
    let c_untrained = mean_consistency(&untrained, &held)?;
    let c_fresh = mean_consistency(&fresh, &held)?;
    let summary = format!(
        "loss {first:.3} -> {last:.3} ({:.2}x), consistency trained {c_trained:.3}, untrained {c_untrained:.3} \
         (identity-normalized {c_fresh:.3})",
        last / first
    );
    check(last < 0.5 * first, || format!("{summary}: loss ratio"))?;
    check(c_trained >= 0.5, || format!("{summary}: trained consistency"))?;
    check(c_untrained <= 0.35, || format!("{summary}: untrained consistency above 0.35"))?;
    Ok(summary)
}

// 8

fn go_training() -> Outcome {
    let data = synth_motions(1000, 7).map_err(|e| e.to_string())?;
    let motions: Vec<MotionSequence> = data.into_iter().map(|m| m.motion).collect();
    let cfg = GoTrainConfig { epochs: 300, ..Default::default() };
    let (model, history) = train_go_diffuser(&motions, &cfg, 1, |_, _| {}).map_err(|e| e.to_string())?;

    let skel = Skeleton::canonical();
    let mut rng = rng_from(4242);
    let n = 32;
    let mut walks = Vec::new();
    let mut stands = Vec::new();
    let mut headings = Vec::new();
    for _ in 0..n {
        let h = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let speed = rng.gen_range(0.03..0.07);
        walks.push(synth_motion(MotionKind::Walk { heading: h, speed }, DEFAULT_FPS, &skel).map_err(|e| e.to_string())?.motion);
        stands.push(synth_motion(MotionKind::Stand { heading: h }, DEFAULT_FPS, &skel).map_err(|e| e.to_string())?.motion);
        headings.push(h);
    }
    let kw: Vec<_> = walks.iter().map(|m| extract_keyposes(m, 4)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let ks: Vec<_> = stands.iter().map(|m| extract_keyposes(m, 4)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let seeds: Vec<u64> = (0..n as u64).collect();
    let gen_walk = generate_motions(&model, &kw, 2.0, &seeds).map_err(|e| e.to_string())?;
    let gen_stand = generate_motions(&model, &ks, 2.0, &seeds).map_err(|e| e.to_string())?;
    let baseline: Vec<MotionSequence> =
        kw.iter().map(|k| interpolate_baseline(k, SEQ_LEN, &skel, DEFAULT_FPS)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;

    let reference = trajectories(&walks, &skel);
    let ape_gen = ape(&trajectories(&gen_walk, &skel), &reference, ErrorVariant::RootJoint).map_err(|e| e.to_string())?;
    let ape_base = ape(&trajectories(&baseline, &skel), &reference, ErrorVariant::RootJoint).map_err(|e| e.to_string())?;

    let (mut walk_disp, mut stand_disp) = (0.0, 0.0);
    for i in 0..n {
        let w = decode_motion(&gen_walk[i], [0.0, 0.0]).root_positions;
        let d = heading_direction(headings[i]);
        walk_disp += (d[0] * (w[SEQ_LEN - 1].x - w[0].x) + d[1] * (w[SEQ_LEN - 1].y - w[0].y)) / n as f64;
        let s = decode_motion(&gen_stand[i], [0.0, 0.0]).root_positions;
        stand_disp += (s[SEQ_LEN - 1] - s[0]).xy().norm() / n as f64;
    }
    let summary = format!(
        "loss {:.3} -> {:.4}, root APE {ape_gen:.3} vs baseline {ape_base:.3} ({:.0}% better), \
         displacement walk {walk_disp:.3} m vs stand {stand_disp:.3} m ({:.1}x)",
        history[0],
        history.last().unwrap(),
        100.0 * (1.0 - ape_gen / ape_base),
        walk_disp / stand_disp
    );
    check(ape_gen <= 0.7 * ape_base, || format!("{summary}: APE"))?;
    check(walk_disp >= 5.0 * stand_disp, || format!("{summary}: displacement"))?;
    Ok(summary)
}

// 9

const SMOKE_CONFIG: &str = r#"
seed = 3

[posture]
epochs = 20
batch_size = 32
[posture.model]
latent = 32
layers = 2
heads = 2

[go]
epochs = 10
batch_size = 16
[go.model]
latent = 16
layers = 1
heads = 2
ff = 32

[encoders]
epochs = 10
batch_size = 32
[encoders.model]
embed_dim = 16
token_dim = 16
gru_hidden = 16
pose_hidden = 32

[extractors]
epochs = 10
batch_size = 32
[extractors.model]
embed_dim = 16
hidden = 32
token_dim = 16
segments = 4

[data]
poses = "poses.jsonl"
motions = "motions.jsonl"

[checkpoints]
posture = "ck/posture.pmck"
encoders = "ck/encoders.pmck"
go = "ck/go.pmck"
extractors = "ck/extractors.pmck"
"#;

fn promo(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_promo")).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("promo {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn smoke_pipeline() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let cfg = d.join("promo.toml");
    std::fs::write(&cfg, SMOKE_CONFIG).map_err(|e| e.to_string())?;
    promo(&["synth-data", "poses", "--n", "512", "--seed", "1", "--out", p(&d.join("poses.jsonl"))])?;
    promo(&["synth-data", "motions", "--n", "128", "--seed", "2", "--out", p(&d.join("motions.jsonl"))])?;
    for target in ["posture", "encoders", "go", "extractors"] {
        promo(&["train", target, "--config", p(&cfg)])?;
    }
    let (a, b) = (d.join("a.json"), d.join("b.json"));
    for out in [&a, &b] {
        promo(&["generate", "--prompt", "jump on one foot", "--config", p(&cfg), "--seed", "5", "--out", p(out)])?;
    }
    let (ba, bb) = (std::fs::read(&a).map_err(|e| e.to_string())?, std::fs::read(&b).map_err(|e| e.to_string())?);
    check(ba == bb, || "generate output differs between runs".into())?;
    promo(&[
        "evaluate",
        "--generated",
        p(&a),
        "--reference",
        p(&b),
        "--config",
        p(&cfg),
        "--out",
        p(&d.join("report.json")),
    ])?;
    promo(&["export", "--in", p(&a), "--format", "bvh", "--out", p(&d.join("a.bvh"))])?;
    Ok(format!("synth-data, train x4, generate x2 ({} identical bytes), evaluate, export", ba.len()))
}

// 10

struct MockServer {
    url: String,
    handle: JoinHandle<usize>,
}

impl MockServer {
    fn start(responses: Vec<(u16, String)>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut served = 0;
            for (status, body) in responses {
                let Ok((stream, _)) = listener.accept() else { break };
                let mut reader = BufReader::new(stream);
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 || line.trim().is_empty() {
                        break;
                    }
                    if let Some((k, v)) = line.split_once(':') {
                        if k.eq_ignore_ascii_case("content-length") {
                            len = v.trim().parse().unwrap_or(0);
                        }
                    }
                }
                let mut buf = vec![0u8; len];
                let _ = reader.read_exact(&mut buf);
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                let _ = reader.into_inner().write_all(reply.as_bytes());
                served += 1;
            }
            served
        });
        MockServer { url, handle }
    }

    fn served(self) -> usize {
        self.handle.join().unwrap()
    }
}

fn completion(frames: usize) -> (u16, String) {
    let text: String =
        (1..=frames).map(|k| format!("POSE {k}: The left knee is straight. The torso is vertical.\n")).collect();
    (200, json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string())
}

fn planner_contract() -> Outcome {
    let key = "PROMO_ACCEPTANCE_KEY";
    std::env::set_var(key, "test-key");
    let endpoint = |url: &str, retries: usize| EndpointConfig {
        base_url: url.into(),
        api_key_env: key.into(),
        timeout_secs: 5.0,
        max_retries: retries,
        retry_backoff_ms: 0,
        ..EndpointConfig::default()
    };
    let req = PlannerRequest::new("stand still", 3, 20).map_err(|e| e.to_string())?;

    let server = MockServer::start(vec![completion(3)]);
    let ok = plan_motion(&req, &endpoint(&server.url, 0)).map_err(|e| e.to_string())?;
    check(ok.scripts.len() == 3 && server.served() == 1, || "success path".into())?;

    let server = MockServer::start(vec![completion(2), completion(3)]);
    let repaired = plan_motion(&req, &endpoint(&server.url, 0)).map_err(|e| e.to_string())?;
    check(repaired.scripts.len() == 3 && server.served() == 2, || "repair path".into())?;

    let server = MockServer::start(vec![completion(2), completion(2)]);
    let err = plan_motion(&req, &endpoint(&server.url, 0)).unwrap_err();
    check(matches!(err, PlannerError::Malformed { expected: 3, got: 2 }), || format!("failed repair gave {err}"))?;
    check(server.served() == 2, || "failed repair retried more than once".into())?;

    let server = MockServer::start(vec![(503, "{}".into()); 3]);
    let err = plan_motion(&req, &endpoint(&server.url, 2)).unwrap_err();
    check(matches!(err, PlannerError::Transport { attempts: 3, .. }), || format!("retry exhaustion gave {err}"))?;
    check(server.served() == 3, || "wrong number of attempts".into())?;
    Ok("success, repair, failed repair and retry exhaustion (3 attempts)".into())
}

struct Criterion {
    id: usize,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "autodiff gradients", budget: Duration::from_secs(60), run: autodiff },
        Criterion { id: 2, name: "rotation math", budget: Duration::from_secs(5), run: rotation_math },
        Criterion { id: 3, name: "motion encode/decode", budget: Duration::from_secs(5), run: encode_decode },
        Criterion { id: 4, name: "diffusion statistics", budget: Duration::from_secs(60), run: diffusion_statistics },
        Criterion { id: 5, name: "viterbi vs brute force", budget: Duration::from_secs(30), run: viterbi },
        Criterion { id: 6, name: "metric oracles", budget: Duration::from_secs(30), run: metric_oracles },
        Criterion { id: 7, name: "posture training", budget: Duration::from_secs(600), run: posture_training },
        Criterion { id: 8, name: "go training", budget: Duration::from_secs(900), run: go_training },
        Criterion { id: 9, name: "end-to-end determinism", budget: Duration::from_secs(1200), run: smoke_pipeline },
        Criterion { id: 10, name: "planner contract", budget: Duration::from_secs(10), run: planner_contract },
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let strict = std::env::var("PROMO_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    std::panic::set_hook(Box::new(|_| {}));

    let mut failed = 0;
    for c in criteria.iter().filter(|c| selected.is_empty() || selected.contains(&c.id)) {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let elapsed = start.elapsed();
        let (ok, detail) = match outcome {
            Ok(d) if elapsed <= c.budget => (true, d),
            Ok(d) => (false, format!("{d}; over the {:?} budget", c.budget)),
            Err(d) => (false, d),
        };
        failed += usize::from(!ok);
        println!(
            "[{}] {:>2} {} ({:.1}s / {}s): {detail}",
            if ok { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            elapsed.as_secs_f64(),
            c.budget.as_secs()
        );
        std::io::stdout().flush().ok();
    }
    println!("acceptance: {failed} failed");
    if strict && failed > 0 {
        std::process::exit(1);
    }
}
