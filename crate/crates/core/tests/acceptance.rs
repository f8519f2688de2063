//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line with the
//! measured values. Tests share a lock so wall-clock budgets are measured
//! one criterion at a time.

mod common;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tie_core::diffcore::{softmax, weighted_cross_entropy, Graph, Tensor};
use tie_core::experiment::{self, load_run_config, DatasetConfig, ExperimentConfig, RunArtifacts};
use tie_core::inversion::{ce_term, cosine_diversity, kl_term, ConditionSample};
use tie_core::metrics::{aupr, auroc, entropy, fpr_at_95_tpr, BinaryScoreSet, EpochMetricRow};
use tie_core::oodscores::{drop_garbage_and_renormalize, energy_score, ue_score, ScoreKind};
use tie_core::tieloop::{compute_class_weights, threshold_from_values, verdict, RunMode, Verdict};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Prints the verdict line and fails the test on any problem.
fn report(id: u32, name: &str, elapsed: Duration, budget: Duration, problems: Vec<String>, detail: String) {
    let mut problems = problems;
    if elapsed > budget {
        problems.push(format!("took {:.1}s, budget {:.0}s", elapsed.as_secs_f64(), budget.as_secs_f64()));
    }
    let status = if problems.is_empty() { "PASS" } else { "FAIL" };
    // Written past the test harness capture so the line shows up in a plain `cargo test`.
    let line = format!("{status} criterion {id} ({name}): {detail}; {:.2}s\n", elapsed.as_secs_f64());
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(problems.is_empty(), "criterion {id} failed: {}", problems.join("; "));
}

fn close(problems: &mut Vec<String>, label: &str, got: f64, want: f64) {
    check(problems, (got - want).abs() < 1e-9, format!("{label}: {got} vs {want}"));
}

fn check(problems: &mut Vec<String>, ok: bool, what: String) {
    if !ok {
        problems.push(what);
    }
}

// ------------------------------------------------------------------ 1

#[test]
fn criterion_1_formula_oracles() {
    let _g = serial();
    let start = Instant::now();
    let mut p = Vec::new();
    let ln2 = 2f64.ln();

    // UE: 1 − Σ(p−u)² / Σ(onehot−u)² evaluated by hand.
    close(&mut p, "ue [.5,.5,0]", ue_score(&[0.5, 0.5, 0.0]).unwrap(), 1.0 - (1.0 / 6.0) / (2.0 / 3.0));
    close(&mut p, "ue uniform", ue_score(&[1.0 / 11.0; 11]).unwrap(), 1.0);
    close(&mut p, "ue one-hot", ue_score(&[0.0, 1.0, 0.0, 0.0]).unwrap(), 0.0);

    close(&mut p, "kl", kl_term(&[1.0, 0.0], &[0.5, 0.5]), ln2);
    close(&mut p, "ce", ce_term(&[0.5, 0.5], &[0.5, 0.5]), ln2);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut simplex = |k: usize| {
        let v: Vec<f64> = (0..k).map(|_| rng.random_range(-4.0..4.0)).collect();
        softmax(&v)
    };
    let mut worst_identity: f64 = 0.0;
    let mut min_kl = f64::INFINITY;
    for i in 0..1000 {
        let k = 2 + i % 9;
        let (y, q) = (simplex(k), simplex(k));
        let kl = kl_term(&y, &q);
        min_kl = min_kl.min(kl);
        worst_identity = worst_identity.max((ce_term(&y, &q) - kl - entropy(&y)).abs());
    }
    check(&mut p, min_kl >= 0.0, format!("negative KL {min_kl}"));
    check(&mut p, worst_identity < 1e-9, format!("ce - kl - H = {worst_identity}"));

    let opposite = Tensor::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
    close(&mut p, "cosine opposite", cosine_diversity(&opposite).unwrap(), 2.0);
    let same = Tensor::from_rows(&[[3.0, 4.0], [0.6, 0.8]]).unwrap();
    close(&mut p, "cosine parallel", cosine_diversity(&same).unwrap(), 0.0);
    for s in 0..200u64 {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        let (n, f) = (r.random_range(2..6), r.random_range(1..5));
        let t = Tensor::new(vec![n, f], tie_core::rng::normal_vec(&mut r, n * f)).unwrap();
        let c = cosine_diversity(&t).unwrap();
        check(&mut p, (-1e-12..=2.0 + 1e-12).contains(&c), format!("cosine out of [0,2]: {c}"));
    }

    close(&mut p, "energy [0,0]", energy_score(&[0.0, 0.0], 1.0), -ln2);
    for s in 0..200u64 {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        let z: Vec<f64> = (0..r.random_range(2..8)).map(|_| r.random_range(-10.0..10.0)).collect();
        let (c, t) = (r.random_range(-20.0..20.0), r.random_range(0.5..5.0));
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        close(&mut p, "energy shift", energy_score(&shifted, t) - energy_score(&z, t), -c);
    }

    let renorm = drop_garbage_and_renormalize(&[0.4, 0.4, 0.2]).unwrap();
    close(&mut p, "renorm 0", renorm[0], 0.5);
    close(&mut p, "renorm 1", renorm[1], 0.5);

    // Condition softmax, weighted CE, inverse-frequency weights and τ.
    let e = (-10f64).exp();
    let cond = ConditionSample::from_raw(vec![10.0, 0.0, 0.0]);
    close(&mut p, "y_tilde 0", cond.y_tilde[0], 1.0 / (1.0 + 2.0 * e));
    close(&mut p, "y_tilde 1", cond.y_tilde[1], e / (1.0 + 2.0 * e));
    check(&mut p, cond.target == 0, "condition target".into());
    let mut g = Graph::new();
    let z = g.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
    let l = weighted_cross_entropy(&mut g, z, &[0], &[1.0, 1.0]).unwrap();
    close(&mut p, "weighted ce", g.value(l).data()[0], ln2);
    let w = compute_class_weights(&[100, 100], 200).unwrap();
    for (got, want) in w.iter().zip([4.0 / 3.0, 4.0 / 3.0, 2.0 / 3.0]) {
        close(&mut p, "class weight", *got, want);
    }
    let t = threshold_from_values(&[0.0, 1.0], 0.5).unwrap();
    close(&mut p, "tau", t.tau, 0.75);

    let detail = format!("{} oracle checks, worst ce-kl-H {worst_identity:.1e}", 20 + 1000 + 400);
    report(1, "formula oracles", start.elapsed(), Duration::from_secs(1), p, detail);
}

// ------------------------------------------------------------------ 2

#[test]
fn criterion_2_gradients_match_finite_differences() {
    let _g = serial();
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut worst_seed = 0;
    for seed in 0..100 {
        let (err, _) = common::gradient_check(seed, 1e-4);
        if err > worst {
            worst = err;
            worst_seed = seed;
        }
    }
    let mut p = Vec::new();
    check(&mut p, worst < 1e-3, format!("relative error {worst:.3e} at seed {worst_seed}"));
    report(
        2,
        "autodiff vs finite differences",
        start.elapsed(),
        Duration::from_secs(30),
        p,
        format!("100 nets, max relative error {worst:.3e}"),
    );
}

// ------------------------------------------------------------------ 3

#[test]
fn criterion_3_metrics_match_brute_force() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut p = Vec::new();
    for i in 0..200 {
        let (pos, neg) = common::random_scores(&mut rng);
        let s = BinaryScoreSet::new(pos.clone(), neg.clone()).unwrap();
        let diffs = [
            (auroc(&s) - common::brute_auroc(&pos, &neg)).abs(),
            (aupr(&s) - common::brute_aupr(&pos, &neg)).abs(),
            (fpr_at_95_tpr(&s) - common::brute_fpr95(&pos, &neg)).abs(),
        ];
        for d in diffs {
            worst = worst.max(d);
            check(&mut p, d <= 1e-12, format!("instance {i}: difference {d:e}"));
        }
    }
    report(
        3,
        "metric oracle equivalence",
        start.elapsed(),
        Duration::from_secs(10),
        p,
        format!("200 instances, max difference {worst:.1e}"),
    );
}

// ------------------------------------------------------------- 4, 6, 7

const SEEDS: [u64; 3] = [0, 1, 2];

fn synth_config(seed: u64, mode: RunMode) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::load(&workspace().join("configs/synth_blobs.toml")).unwrap();
    cfg.tie.seed = seed;
    cfg.tie.mode = mode;
    cfg
}

struct SynthRuns {
    _dir: tempfile::TempDir,
    tie: Vec<RunArtifacts>,
    baseline: RunArtifacts,
    /// Wall time of seed 0 TIE plus its baseline.
    pair_time: Duration,
    total_time: Duration,
}

fn synth_runs() -> &'static SynthRuns {
    static RUNS: OnceLock<SynthRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let all = Instant::now();
        let dir = tempfile::tempdir().unwrap();
        let mut tie = Vec::new();
        let mut pair_time = Duration::ZERO;
        for &seed in &SEEDS {
            let t = Instant::now();
            tie.push(experiment::train(&synth_config(seed, RunMode::Tie), &dir.path().join(format!("tie_{seed}"))).unwrap());
            if seed == 0 {
                pair_time += t.elapsed();
            }
        }
        let t = Instant::now();
        let baseline = experiment::train(&synth_config(0, RunMode::NoTieBaseline), &dir.path().join("baseline_0")).unwrap();
        pair_time += t.elapsed();
        SynthRuns {
            _dir: dir,
            tie,
            baseline,
            pair_time,
            total_time: all.elapsed(),
        }
    })
}

/// `(argmax ID accuracy, verdict ID accuracy, ring detection rate)`.
fn synth_rates(run: &RunArtifacts) -> (f64, f64, f64) {
    let acc = &run.evaluation.accuracy;
    let id = acc.iter().find(|r| !r.is_ood).expect("ID row");
    let ring = acc.iter().find(|r| r.is_ood && r.test == "ring").expect("ring row");
    (id.argmax_accuracy, id.accuracy, ring.accuracy)
}

#[test]
fn criterion_4_synthetic_tie_vs_baseline() {
    let _g = serial();
    let runs = synth_runs();
    let (id_acc, id_verdict_acc, tie_det) = synth_rates(&runs.tie[0]);
    let (_, _, base_det) = synth_rates(&runs.baseline);
    let mut p = Vec::new();
    check(&mut p, id_acc >= 0.95, format!("ID accuracy {id_acc:.4} < 0.95"));
    check(&mut p, tie_det >= 0.80, format!("ring detection {tie_det:.4} < 0.80"));
    check(
        &mut p,
        tie_det - base_det >= 0.30,
        format!("baseline gap {:.1}pp < 30pp", 100.0 * (tie_det - base_det)),
    );
    report(
        4,
        "synthetic TIE vs baseline",
        runs.pair_time,
        Duration::from_secs(300),
        p,
        format!(
            "ID accuracy {id_acc:.4} (two-level verdict {id_verdict_acc:.4}), ring detection TIE {tie_det:.4} vs baseline {base_det:.4}"
        ),
    );
}

fn median3(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn criterion_6_inversion_metrics_trend() {
    let _g = serial();
    let runs = synth_runs();
    let t = synth_config(0, RunMode::Tie).tie.epochs;
    let rows = |epoch: usize| -> Vec<EpochMetricRow> {
        runs.tie.iter().map(|r| r.run.id_inversion_metrics(epoch).expect("ID inversions")).collect()
    };
    let (first, last) = (rows(1), rows(t));
    let med = |rs: &[EpochMetricRow], f: fn(&EpochMetricRow) -> f64| median3(rs.iter().map(f).collect());
    let fields: [(&str, fn(&EpochMetricRow) -> f64, bool); 4] = [
        ("ue", |r| r.ue, false),
        ("entropy", |r| r.entropy, false),
        ("confidence", |r| r.confidence, true),
        ("margin", |r| r.margin, true),
    ];
    let mut p = Vec::new();
    let mut detail = Vec::new();
    for (name, f, up) in fields {
        let (a, b) = (med(&first, f), med(&last, f));
        detail.push(format!("{name} {a:.3}->{b:.3}"));
        let ok = if up { b > a } else { b < a };
        check(&mut p, ok, format!("{name} median went {a} -> {b}"));
    }
    report(
        6,
        "inversion metric trend",
        runs.total_time,
        Duration::from_secs(900),
        p,
        format!("3-seed medians epoch 1 -> {t}: {}", detail.join(", ")),
    );
}

fn compared_files(dir: &Path) -> Vec<PathBuf> {
    let mut files = vec![dir.join("history.csv"), dir.join("epoch_metrics.csv")];
    let mut eval: Vec<PathBuf> = fs::read_dir(dir.join("eval"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    eval.sort();
    files.extend(eval);
    files
}

#[test]
fn criterion_7_replay_is_bitwise_identical() {
    let _g = serial();
    let runs = synth_runs();
    let start = Instant::now();
    let first = &runs.tie[0].dir;
    let cfg = load_run_config(&first.join("manifest.json")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let replay = experiment::train(&cfg, &dir.path().join("replay")).unwrap();
    let mut p = Vec::new();
    let files = compared_files(first);
    for f in &files {
        let other = replay.dir.join(f.strip_prefix(first).unwrap());
        let same = fs::read(f).unwrap() == fs::read(&other).unwrap_or_default();
        check(&mut p, same, format!("{} differs", f.display()));
    }
    report(
        7,
        "determinism",
        start.elapsed(),
        Duration::from_secs(300),
        p,
        format!("{} CSV files compared byte for byte", files.len()),
    );
}

// ------------------------------------------------------------------ 5

fn mnist_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::load(&workspace().join("configs/mnist_fashion.toml")).unwrap();
    let data_dir = std::env::var_os("TIE_DATA_DIR").map(PathBuf::from);
    if let (Some(d), DatasetConfig::Idx { train_images, train_labels, test_images, test_labels, ood, .. }) =
        (data_dir, &mut cfg.dataset)
    {
        let mut paths: Vec<&mut PathBuf> = vec![train_images, train_labels, test_images, test_labels];
        for set in ood.iter_mut() {
            paths.push(&mut set.images);
            paths.push(&mut set.labels);
        }
        for p in paths {
            *p = d.join(p.file_name().unwrap());
        }
    }
    cfg
}

#[test]
fn criterion_5_mnist_vs_fashion() {
    let _g = serial();
    let cfg = mnist_config();
    if let DatasetConfig::Idx { train_images, ood, .. } = &cfg.dataset {
        for p in std::iter::once(train_images).chain(ood.iter().map(|s| &s.images)) {
            if !p.is_file() {
                let line = format!("FAIL criterion 5 (MNIST vs FashionMNIST): missing {}\n", p.display());
                let _ = std::io::stderr().write_all(line.as_bytes());
                panic!(
                    "dataset file {} not found; run scripts/fetch_data.sh or set TIE_DATA_DIR",
                    p.display()
                );
            }
        }
    }
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let run = experiment::train(&cfg, &dir.path().join("mnist")).unwrap();
    let elapsed = start.elapsed();
    let row = run
        .evaluation
        .detection_for("fashion", ScoreKind::Mahalanobis)
        .expect("fashion/mahalanobis row");
    let mut p = Vec::new();
    let detail = match row.summary {
        Some(s) => {
            check(&mut p, s.auroc >= 0.95, format!("AUROC {:.4} < 0.95", s.auroc));
            check(&mut p, s.fpr_at_95_tpr <= 0.10, format!("FPR@95 {:.4} > 0.10", s.fpr_at_95_tpr));
            format!(
                "Mahalanobis AUROC {:.4}, FPR@95%TPR {:.4} ({} survivors vs {} ID)",
                s.auroc, s.fpr_at_95_tpr, row.n_pos, row.n_neg
            )
        }
        None => {
            p.push("no level-1 survivors to score".into());
            "no survivors".into()
        }
    };
    report(5, "MNIST vs FashionMNIST", elapsed, Duration::from_secs(900), p, detail);
}

// ------------------------------------------------------------------ 8

/// Independent restatement of the decision rules.
fn expected_verdict(p: &[f64], tau: f64) -> Verdict {
    let k = p.len();
    let mut top = 0;
    for i in 1..k {
        if p[i] > p[top] {
            top = i;
        }
    }
    if top == k - 1 {
        return Verdict::OodGarbage;
    }
    let u = 1.0 / k as f64;
    let num: f64 = p.iter().map(|v| (v - u).powi(2)).sum();
    let den = (1.0 - u).powi(2) + (k - 1) as f64 * u * u;
    let ue = (1.0 - num / den).clamp(0.0, 1.0);
    if ue > tau {
        Verdict::OodThreshold
    } else {
        Verdict::InDistribution(top)
    }
}

fn random_probs(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let k = rng.random_range(2..=12);
    match rng.random_range(0..10) {
        0 => vec![1.0 / k as f64; k],
        1 => {
            let mut v = vec![0.0; k];
            v[rng.random_range(0..k)] = 1.0;
            v
        }
        2 => {
            // Exact ties between two leaders.
            let mut v = vec![0.0; k];
            let (a, b) = (rng.random_range(0..k), rng.random_range(0..k));
            v[a] += 0.5;
            v[b] += 0.5;
            v
        }
        _ => {
            let scale = rng.random_range(0.1..20.0);
            let z: Vec<f64> = (0..k).map(|_| scale * rng.random::<f64>()).collect();
            softmax(&z)
        }
    }
}

#[test]
fn criterion_8_verdicts_are_exhaustive() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut p = Vec::new();
    let mut counts = [0usize; 3];
    for i in 0..100_000 {
        let probs = random_probs(&mut rng);
        let tau = rng.random::<f64>();
        let v = verdict(&probs, tau).unwrap();
        let levels = [
            matches!(v, Verdict::InDistribution(_)),
            v == Verdict::OodGarbage,
            v == Verdict::OodThreshold,
        ];
        let hits = levels.iter().filter(|&&b| b).count();
        if hits != 1 || v != expected_verdict(&probs, tau) {
            p.push(format!("vector {i} {probs:?} tau {tau}: got {v:?}"));
            break;
        }
        counts[levels.iter().position(|&b| b).unwrap()] += 1;
    }
    report(
        8,
        "verdict exhaustiveness",
        start.elapsed(),
        Duration::from_secs(60),
        p,
        format!("1e5 vectors: {} id, {} level-1, {} level-2", counts[0], counts[1], counts[2]),
    );
}
