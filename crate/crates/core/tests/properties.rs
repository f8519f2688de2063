mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tie_core::data::{self, Dataset};
use tie_core::diffcore::{softmax, softmax_rows, Graph, Tensor};
use tie_core::experiment::pgm::Pgm;
use tie_core::inversion::{ce_term, cosine_diversity, kl_term};
use tie_core::metrics::{aupr, auroc, entropy, fpr_at_95_tpr, BinaryScoreSet};
use tie_core::oodscores::{argmax, energy_score, msp_score, ue_score, MahalanobisModel};
use tie_core::tieloop::{partition_by_uncertainty, verdict, Verdict};

fn logits(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-20.0f64..20.0, 2..max_len)
}

fn prob_vec(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    logits(max_len).prop_map(|z| softmax(&z))
}

fn scores(max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![-3.0f64..3.0, (-6i32..6).prop_map(|k| k as f64 * 0.5)], 1..max)
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(z in logits(12)) {
        let p = softmax(&z);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert_eq!(argmax(&p), argmax(&z));
    }

    #[test]
    fn log_softmax_matches_log_of_softmax(z in logits(8)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, z.len()], z.clone()).unwrap());
        let l = g.log_softmax(x);
        let p = softmax(&z);
        for (a, b) in g.value(l).data().iter().zip(&p) {
            prop_assert!((a - b.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn ue_in_unit_interval_and_permutation_invariant(p in prob_vec(12), rot in 0usize..12) {
        let u = ue_score(&p).unwrap();
        prop_assert!((0.0..=1.0).contains(&u));
        let mut q = p.clone();
        let r = rot % q.len();
        q.rotate_left(r);
        prop_assert!((ue_score(&q).unwrap() - u).abs() < 1e-12);
        q.reverse();
        prop_assert!((ue_score(&q).unwrap() - u).abs() < 1e-12);
    }

    #[test]
    fn energy_shifts_with_logit_offset(z in logits(10), c in -50.0f64..50.0, t in 0.1f64..10.0) {
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        let d = energy_score(&shifted, t) - energy_score(&z, t);
        prop_assert!((d + c).abs() < 1e-9 * (1.0 + c.abs()));
    }

    #[test]
    fn msp_is_max_probability(p in prob_vec(10)) {
        prop_assert_eq!(msp_score(&p), p[argmax(&p)]);
    }

    #[test]
    fn kl_is_nonnegative_and_ce_splits(yt in prob_vec(8), z in logits(8)) {
        let k = yt.len().min(z.len());
        let y = softmax(&yt[..k].iter().map(|v| v.ln()).collect::<Vec<_>>());
        let p = softmax(&z[..k]);
        let kl = kl_term(&y, &p);
        prop_assert!(kl >= -1e-12);
        // CE(y, p) − KL(y ‖ p) = H(y)
        prop_assert!((ce_term(&y, &p) - kl - entropy(&y)).abs() < 1e-9);
    }

    #[test]
    fn cosine_diversity_is_bounded(rows in 2usize..6, cols in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = tie_core::rng::normal_vec(&mut rng, rows * cols);
        let c = cosine_diversity(&Tensor::new(vec![rows, cols], data).unwrap()).unwrap();
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&c));
    }

    #[test]
    fn metrics_agree_with_brute_force(pos in scores(30), neg in scores(30)) {
        let s = BinaryScoreSet::new(pos.clone(), neg.clone()).unwrap();
        prop_assert!((auroc(&s) - common::brute_auroc(&pos, &neg)).abs() < 1e-12);
        prop_assert!((aupr(&s) - common::brute_aupr(&pos, &neg)).abs() < 1e-12);
        prop_assert!((fpr_at_95_tpr(&s) - common::brute_fpr95(&pos, &neg)).abs() < 1e-12);
    }

    #[test]
    fn auroc_negation_symmetry(pos in scores(25), neg in scores(25)) {
        let a = auroc(&BinaryScoreSet::new(pos.clone(), neg.clone()).unwrap());
        let flip = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
        let b = auroc(&BinaryScoreSet::new(flip(&pos), flip(&neg)).unwrap());
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fpr_never_increases_when_negatives_drop(pos in scores(25), neg in scores(25), d in 0.0f64..2.0) {
        let base = fpr_at_95_tpr(&BinaryScoreSet::new(pos.clone(), neg.clone()).unwrap());
        let lowered: Vec<f64> = neg.iter().map(|v| v - d).collect();
        let after = fpr_at_95_tpr(&BinaryScoreSet::new(pos, lowered).unwrap());
        prop_assert!(after <= base + 1e-12);
    }

    #[test]
    fn exclusion_partitions_indices(ue in prop::collection::vec(0.0f64..1.0, 0..60), tau in 0.0f64..1.0) {
        let ex = partition_by_uncertainty(ue.clone(), tau);
        prop_assert_eq!(ex.kept.len() + ex.excluded.len(), ue.len());
        prop_assert!(ex.excluded.iter().all(|&i| ue[i] > tau));
        prop_assert!(ex.kept.iter().all(|&i| ue[i] <= tau));
        let mut all: Vec<usize> = ex.kept.iter().chain(&ex.excluded).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..ue.len()).collect::<Vec<_>>());
    }

    #[test]
    fn verdict_is_exhaustive(p in prob_vec(8), tau in 0.0f64..1.0) {
        let g = p.len() - 1;
        let top = argmax(&p);
        let v = verdict(&p, tau).unwrap();
        let expected = if top == g {
            Verdict::OodGarbage
        } else if ue_score(&p).unwrap() > tau {
            Verdict::OodThreshold
        } else {
            Verdict::InDistribution(top)
        };
        prop_assert_eq!(v, expected);
    }

    #[test]
    fn idx_round_trip(n in 1usize..6, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bytes: Vec<f64> = (0..n * h * w)
            .map(|_| rand::Rng::random_range(&mut rng, 0u8..=255) as f64 / 255.0)
            .collect();
        let labels: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % 10).collect();
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
        let x = Tensor::new(vec![n, h * w], bytes).unwrap();
        data::write_idx_images(&ip, &x, h, w).unwrap();
        data::write_idx_labels(&lp, &labels).unwrap();
        let (back, bh, bw) = data::read_idx_images(&ip).unwrap();
        prop_assert_eq!((bh, bw), (h, w));
        for (a, b) in back.data().iter().zip(x.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        prop_assert_eq!(data::read_idx_labels(&lp).unwrap(), labels);
    }

    #[test]
    fn pgm_round_trip(w in 1usize..20, h in 1usize..20, seed in any::<u8>()) {
        let pixels: Vec<u8> = (0..w * h).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
        let img = Pgm { width: w, height: h, pixels };
        let back = Pgm::decode(&img.encode(), std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back, img);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mahalanobis_is_affine_invariant(seed in any::<u64>(), f in 1usize..5, shift in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_classes = 2;
        let m = 24;
        let raw = tie_core::rng::normal_vec(&mut rng, m * f);
        let labels: Vec<usize> = (0..m).map(|i| i % n_classes).collect();
        // Diagonally dominant so the map is well conditioned.
        let mut a = tie_core::rng::normal_vec(&mut rng, f * f);
        for i in 0..f {
            a[i * f + i] += 3.0;
        }
        let map = |row: &[f64]| -> Vec<f64> {
            (0..f).map(|i| (0..f).map(|j| a[i * f + j] * row[j]).sum::<f64>() + shift).collect()
        };
        let x = Tensor::new(vec![m, f], raw.clone()).unwrap();
        let y = Tensor::new(vec![m, f], raw.chunks(f).flat_map(map).collect()).unwrap();
        let mx = MahalanobisModel::fit(&x, &labels, n_classes, Some(0.0)).unwrap();
        let my = MahalanobisModel::fit(&y, &labels, n_classes, Some(0.0)).unwrap();
        let probe = tie_core::rng::normal_vec(&mut rng, f);
        let (sx, sy) = (mx.score(&probe), my.score(&map(&probe)));
        prop_assert!((sx - sy).abs() <= 1e-6 * (1.0 + sx.abs()), "{sx} vs {sy}");
    }
}

#[test]
fn softmax_rows_matches_per_row_softmax() {
    let t = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 1000.0]]).unwrap();
    let s = softmax_rows(&t);
    for (r, row) in t.row_iter().enumerate() {
        assert_eq!(s.row(r), softmax(row).as_slice());
    }
}

#[test]
fn synthetic_embedding_keeps_extra_coordinates_fixed() {
    let mut spec = data::SynthSpec::triangle(4.0, 0.5, 20, 10.0);
    spec.ambient_dim = 6;
    let (train, ood): (Dataset, Dataset) = data::synth_blobs(&spec, 9).unwrap();
    for d in [&train, &ood] {
        assert_eq!(d.dim(), 6);
        for row in d.samples.row_iter() {
            assert!(row[2..].iter().all(|&v| v == 0.5));
        }
    }
    spec.ambient_dim = 2;
    let (flat, _) = data::synth_blobs(&spec, 9).unwrap();
    for (a, b) in flat.samples.row_iter().zip(train.samples.row_iter()) {
        assert_eq!(a, &b[..2]);
    }
}
