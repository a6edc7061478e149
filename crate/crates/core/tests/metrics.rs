use nalgebra::{DMatrix, DVector, Vector3};
use promo_core::contrastive::{in_batch_top1, ContrastiveConfig};
use promo_core::metrics::{
    ape, ave, filter_by_similarity, fid, multimodal_distance, r_precision, similarity_filter, smoothness,
    train_feature_extractors, ErrorVariant, ExtractorConfig, GaussianStats, JointTrajectory,
};
use promo_core::synth::{synth_motions, SynthMotion};
use promo_nn::rng_from;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn traj(frames: &[Vec<[f64; 3]>]) -> JointTrajectory {
    frames.iter().map(|f| f.iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect()).collect()
}

fn random_traj(seed: u64, frames: usize, joints: usize) -> JointTrajectory {
    let mut rng = rng_from(seed);
    (0..frames)
        .map(|_| (0..joints).map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.0..2.0))).collect())
        .collect()
}

fn shifted(t: &JointTrajectory, d: Vector3<f64>) -> JointTrajectory {
    t.iter().map(|f| f.iter().map(|p| p + d).collect()).collect()
}

fn unit_rows(seed: u64, n: usize, d: usize) -> Vec<Vec<f32>> {
    let mut rng = rng_from(seed);
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| (x / norm) as f32).collect()
        })
        .collect()
}

#[test]
fn fid_of_identical_stats_is_zero() {
    let x = unit_rows(3, 200, 8);
    let s = GaussianStats::fit(&x).unwrap();
    assert!(fid(&s, &s).unwrap() < 1e-6);
}

#[test]
fn fid_mean_shift_equal_covariance() {
    let mu = DVector::from_vec(vec![0.5, -1.0, 2.0, 0.25]);
    let a = GaussianStats::new(DVector::zeros(4), DMatrix::identity(4, 4)).unwrap();
    let b = GaussianStats::new(mu.clone(), DMatrix::identity(4, 4)).unwrap();
    let expected = mu.iter().map(|m| m * m).sum::<f64>();
    assert!((fid(&a, &b).unwrap() - expected).abs() < 1e-6);
}

#[test]
fn fid_scalar_closed_form() {
    let a = GaussianStats::new(DVector::zeros(1), DMatrix::from_element(1, 1, 1.0)).unwrap();
    let b = GaussianStats::new(DVector::zeros(1), DMatrix::from_element(1, 1, 4.0)).unwrap();
    assert!((fid(&a, &b).unwrap() - 1.0).abs() < 1e-6);
}

#[test]
fn fid_symmetric_and_nonnegative() {
    let a = GaussianStats::fit(&unit_rows(1, 60, 6)).unwrap();
    let b = GaussianStats::fit(&unit_rows(2, 80, 6)).unwrap();
    let (ab, ba) = (fid(&a, &b).unwrap(), fid(&b, &a).unwrap());
    assert!((ab - ba).abs() < 1e-6 && ab >= 0.0);
}

#[test]
fn fid_rejects_bad_covariance() {
    let mut cov = DMatrix::identity(2, 2);
    cov[(0, 1)] = 0.5;
    assert!(GaussianStats::new(DVector::zeros(2), cov).is_err());
    let a = GaussianStats::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
    let b = GaussianStats::new(DVector::zeros(3), DMatrix::identity(3, 3)).unwrap();
    assert!(fid(&a, &b).is_err());
}

#[test]
fn r_precision_oracle_features() {
    let x = unit_rows(9, 50, 16);
    let r = r_precision(&x, &x, &[1, 2, 3]).unwrap();
    assert!(r.r_at_k.iter().all(|&(_, v)| v == 1.0));
    assert_eq!(r.median_rank, 1.0);
}

#[test]
fn r_precision_single_item_pool() {
    let r = r_precision(&[vec![1.0, 0.0]], &[vec![0.0, 1.0]], &[1]).unwrap();
    assert_eq!(r.r_at_k, vec![(1, 1.0)]);
    assert_eq!(r.median_rank, 1.0);
}

#[test]
fn r_precision_random_features_match_uniform_rank() {
    // With exchangeable distances the true rank is uniform on 1..=N.
    let (n, k) = (320, 10);
    let expected = k as f64 / n as f64;
    let mut mean = 0.0;
    for seed in 0..20 {
        let m = unit_rows(100 + seed, n, 16);
        let t = unit_rows(200 + seed, n, 16);
        let r = r_precision(&m, &t, &[k]).unwrap();
        assert!(r.median_rank >= 1.0 && r.median_rank <= n as f64);
        mean += r.r_at_k[0].1 / 20.0;
    }
    assert!((mean - expected).abs() < 0.015, "{mean}");
}

#[test]
fn r_precision_errors() {
    let x = unit_rows(1, 4, 3);
    assert!(r_precision(&x, &x[..3], &[1]).is_err());
    assert!(r_precision(&x, &x, &[5]).is_err());
}

#[test]
fn multimodal_distance_cases() {
    let x = unit_rows(4, 10, 5);
    assert_eq!(multimodal_distance(&x, &x).unwrap(), 0.0);
    let neg: Vec<Vec<f32>> = x.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
    assert!((multimodal_distance(&x, &neg).unwrap() - 2.0).abs() < 1e-6);
    let m = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
    let t = vec![vec![3.0, 4.0], vec![1.0, 1.0]];
    assert_eq!(multimodal_distance(&m, &t).unwrap(), 2.5);
}

#[test]
fn smoothness_cases() {
    let constant = traj(&vec![vec![[0.3, 0.2, 1.0], [0.0, 0.0, 0.5]]; 6]);
    assert_eq!(smoothness(&constant).unwrap(), 0.0);
    let linear: Vec<Vec<[f64; 3]>> = (0..6).map(|f| vec![[0.1 * f as f64, 0.0, 1.0]]).collect();
    assert!(smoothness(&traj(&linear)).unwrap() < 1e-24);
    let hand = traj(&[vec![[0.0, 0.0, 0.0]], vec![[0.0, 0.0, 0.0]], vec![[1.0, 0.0, 0.0]]]);
    assert_eq!(smoothness(&hand).unwrap(), 1.0);
    assert!(smoothness(&constant[..2].to_vec()).is_err());
}

#[test]
fn ape_hand_case() {
    let r = traj(&[vec![[0.0, 0.0, 0.0]], vec![[0.0, 0.0, 0.0]]]);
    let g = traj(&[vec![[3.0, 0.0, 0.0]], vec![[0.0, 4.0, 0.0]]]);
    assert_eq!(ape(&[g], &[r], ErrorVariant::MeanGlobal).unwrap(), 3.5);
}

#[test]
fn ape_constant_offset() {
    let r = random_traj(5, 10, 22);
    let d = Vector3::new(0.3, -0.4, 1.2);
    let g = shifted(&r, d);
    let (g, r) = (vec![g], vec![r]);
    assert!((ape(&g, &r, ErrorVariant::RootJoint).unwrap() - d.norm()).abs() < 1e-12);
    assert!((ape(&g, &r, ErrorVariant::MeanGlobal).unwrap() - d.norm()).abs() < 1e-12);
    assert!((ape(&g, &r, ErrorVariant::GlobalTraj).unwrap() - 0.5).abs() < 1e-12);
    assert!(ape(&g, &r, ErrorVariant::MeanLocal).unwrap() < 1e-12);
}

#[test]
fn ave_hand_case() {
    let r = traj(&[vec![[0.0, 0.0, 0.0]], vec![[2.0, 0.0, 0.0]]]);
    let g = traj(&[vec![[0.0, 0.0, 0.0]], vec![[4.0, 0.0, 0.0]]]);
    assert_eq!(ave(&[g], &[r], ErrorVariant::MeanGlobal).unwrap(), 6.0);
}

#[test]
fn ave_offset_invariant() {
    let r = random_traj(6, 12, 22);
    let g = shifted(&r, Vector3::new(1.0, 2.0, -0.5));
    for v in ErrorVariant::ALL {
        assert!(ave(std::slice::from_ref(&g), std::slice::from_ref(&r), v).unwrap() < 1e-12, "{}", v.name());
    }
}

#[test]
fn identical_inputs_score_zero() {
    let t = vec![random_traj(7, 8, 22), random_traj(8, 8, 22)];
    for v in ErrorVariant::ALL {
        assert_eq!(ape(&t, &t, v).unwrap(), 0.0);
        assert_eq!(ave(&t, &t, v).unwrap(), 0.0);
    }
}

#[test]
fn shape_mismatch_is_rejected() {
    let a = random_traj(1, 8, 22);
    let b = random_traj(2, 7, 22);
    assert!(ape(std::slice::from_ref(&a), &[b], ErrorVariant::RootJoint).is_err());
    assert!(ape(std::slice::from_ref(&a), &[], ErrorVariant::RootJoint).is_err());
    assert!(ave(&[a[..1].to_vec()], &[a[..1].to_vec()], ErrorVariant::RootJoint).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ape_triangle_inequality(s in 0u64..1000) {
        let (a, b, c) = (random_traj(s, 5, 4), random_traj(s + 1, 5, 4), random_traj(s + 2, 5, 4));
        for v in ErrorVariant::ALL {
            let ab = ape(std::slice::from_ref(&a), std::slice::from_ref(&b), v).unwrap();
            let bc = ape(std::slice::from_ref(&b), std::slice::from_ref(&c), v).unwrap();
            let ac = ape(std::slice::from_ref(&a), std::slice::from_ref(&c), v).unwrap();
            prop_assert!(ac <= ab + bc + 1e-12);
        }
    }

    #[test]
    fn mean_local_ignores_translation(s in 0u64..1000, dx in -5.0f64..5.0, dy in -5.0f64..5.0, dz in -1.0f64..1.0) {
        let (a, b) = (random_traj(s, 6, 22), random_traj(s + 7, 6, 22));
        let base = ape(std::slice::from_ref(&a), std::slice::from_ref(&b), ErrorVariant::MeanLocal).unwrap();
        let moved = ape(&[shifted(&a, Vector3::new(dx, dy, dz))], &[b], ErrorVariant::MeanLocal).unwrap();
        prop_assert!((base - moved).abs() < 1e-9);
    }

    #[test]
    fn r_at_k_non_decreasing(s in 0u64..1000) {
        let m = unit_rows(s, 30, 4);
        let t = unit_rows(s + 1, 30, 4);
        let r = r_precision(&m, &t, &[1, 2, 5, 10, 30]).unwrap();
        prop_assert!(r.r_at_k.windows(2).all(|w| w[0].1 <= w[1].1));
        prop_assert_eq!(r.r_at_k[4].1, 1.0);
    }
}

#[test]
fn similarity_threshold_edges() {
    let a = unit_rows(10, 5, 8);
    let b = vec![a[2].clone()];
    assert_eq!(filter_by_similarity(&a, &[], 0.45), vec![0, 1, 2, 3, 4]);
    assert!(!filter_by_similarity(&a, &b, 0.45).contains(&2));
    assert_eq!(filter_by_similarity(&a, &b, 1.0).len(), 5);
}

fn split(data: &[SynthMotion]) -> (Vec<promo_core::motion::MotionSequence>, Vec<Vec<promo_core::script::PostureScript>>) {
    (data.iter().map(|s| s.motion.clone()).collect(), data.iter().map(|s| s.plan.clone()).collect())
}

#[test]
fn extractors_retrieve_held_out_pairs() {
    let data = synth_motions(600, 11).unwrap();
    let (train, test) = data.split_at(500);
    let (m, p) = split(train);
    let cfg = ContrastiveConfig { epochs: 60, batch_size: 32, lr: 2e-3 };
    let (pair, hist) = train_feature_extractors(&m, &p, ExtractorConfig::default(), &cfg, 5, |_, _| {}).unwrap();
    assert!(hist.last().unwrap() < &hist[0]);
    let (tm, tp) = split(test);
    let fm = pair.encode_motions(&tm).unwrap();
    let ft = pair.encode_plans(&tp).unwrap();
    for row in fm.iter().chain(&ft) {
        let n: f64 = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }
    let top1 = in_batch_top1(&fm, &ft, 32);
    assert!(top1 > 10.0 / 32.0, "held-out top-1 {top1}");

    let keep = similarity_filter(&tp[..10], &tp[..3], &pair, 0.45).unwrap();
    assert!(!keep.contains(&0) && !keep.contains(&1) && !keep.contains(&2));
    assert_eq!(similarity_filter(&tp[..10], &[], &pair, 0.45).unwrap().len(), 10);
    assert_eq!(similarity_filter(&tp[..10], &tp[..3], &pair, 1.0).unwrap().len(), 10);
}

#[test]
fn extractor_training_is_deterministic() {
    let data = synth_motions(64, 3).unwrap();
    let (m, p) = split(&data);
    let cfg = ContrastiveConfig { epochs: 2, batch_size: 16, lr: 1e-3 };
    let small = ExtractorConfig { embed_dim: 16, hidden: 32, token_dim: 16, segments: 4 };
    let run = || {
        let (pair, hist) = train_feature_extractors(&m, &p, small, &cfg, 9, |_, _| {}).unwrap();
        (hist, pair.encode_motions(&m[..8]).unwrap(), pair.encode_plans(&p[..8]).unwrap())
    };
    assert_eq!(run(), run());
}
