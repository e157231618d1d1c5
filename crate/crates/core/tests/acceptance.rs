//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a subset.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use eegkd::dataio::{
    generate_synthetic_corpus, grouped_split, holdout_classes, read_corpus, window_starts, write_corpus,
    SyntheticCorpusConfig,
};
use eegkd::downstream::{
    knn_classify, majority_vote, unseen_category_eval, Classifier, FeatureSet, FeatureVector, SvmConfig,
    UnseenConfig, VotingPolicy,
};
use eegkd::gradcheck::{run_suite, DEFAULT_EPS, DEFAULT_TOLERANCE};
use eegkd::losses::{
    combined_loss, cross_entropy, distillation_loss, kl_divergence, TeacherTarget, WeightInterpretation,
    HARD_WEIGHT,
};
use eegkd::numerics::{entropy, softmax_with_temperature};
use eegkd::teacher::SyntheticTeacher;
use eegkd::trainer::{evaluate, fit, read_checkpoint_from, write_checkpoint_to, Trainer};
use eegkd::{Corpus, LstmStack, Mode, PosteriorTable, StackConfig, SyntheticTeacherConfig, TrainConfig, Window};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---- shared synthetic benchmark ----

const BENCH_SEEDS: [u64; 3] = [0, 1, 2];
const BENCH_EPOCHS: usize = 30;
const BENCH_HIDDEN: usize = 16;

fn bench_corpus_config(seed: u64) -> SyntheticCorpusConfig {
    SyntheticCorpusConfig {
        num_classes: 8,
        images_per_class: 60,
        subjects: 1,
        timesteps: 64,
        channels: 8,
        noise_sigma: 0.0,
        seed,
    }
}

/// 8 x 60 corpus at 0 dB SNR with a fidelity-0.85 teacher.
fn bench_data(seed: u64) -> (Corpus, PosteriorTable, f64) {
    let base = bench_corpus_config(seed);
    let sigma = base.clean_rms().unwrap();
    let corpus = generate_synthetic_corpus(&SyntheticCorpusConfig { noise_sigma: sigma, ..base }).unwrap();
    let teacher = SyntheticTeacher::new(SyntheticTeacherConfig {
        num_classes: 8,
        fidelity: 0.85,
        confusion_temperature: 1.0,
        seed,
    })
    .unwrap();
    let table = teacher.table(corpus.image_classes().unwrap()).unwrap();
    (corpus, table, sigma)
}

fn bench_stack(depth: usize, seed: u64) -> LstmStack {
    LstmStack::init(
        StackConfig {
            depth,
            hidden: BENCH_HIDDEN,
            bidirectional: true,
            recurrent_dropout: 0.5,
            num_classes: 8,
            input_channels: 8,
        },
        seed,
    )
    .unwrap()
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| -rng.random_range(1e-12f64..1.0).ln()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

// ---- criteria ----

fn c1_gradient_oracle() -> Outcome {
    let reports = run_suite(0, DEFAULT_EPS, DEFAULT_TOLERANCE).map_err(|e| e.to_string())?;
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed).map(|r| r.label.clone()).collect();
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("non-empty suite");
    let values: usize = reports.iter().map(|r| r.values_checked).sum();
    check(
        failed.is_empty(),
        format!(
            "{} cases, {values} gradient entries, worst rel err {:.2e} ({}, {}); failures {failed:?}",
            reports.len(),
            worst.max_rel_error,
            worst.label,
            worst.worst_tensor
        ),
    )
}

fn c2_loss_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut min_kl = f64::INFINITY;
    let mut max_self_kl = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(2..20);
        let p = random_simplex(&mut rng, n);
        let q = random_simplex(&mut rng, n);
        min_kl = min_kl.min(kl_divergence(&p, &q).unwrap());
        max_self_kl = max_self_kl.max(kl_divergence(&p, &p).unwrap().abs());
    }
    let mut max_shift = 0.0f64;
    let mut entropy_ok = true;
    let temps = [0.25, 0.5, 1.0, 2.0, 5.0, 10.0, 50.0];
    for _ in 0..1000 {
        let n = rng.random_range(2..12);
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let c = rng.random_range(-100.0..100.0);
        let t = rng.random_range(0.2..20.0);
        let a = softmax_with_temperature(&z, t).unwrap();
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        let b = softmax_with_temperature(&shifted, t).unwrap();
        for (x, y) in a.iter().zip(&b) {
            max_shift = max_shift.max((x - y).abs());
        }
        let h: Vec<f64> = temps.iter().map(|&t| entropy(&softmax_with_temperature(&z, t).unwrap())).collect();
        entropy_ok &= h.windows(2).all(|w| w[1] >= w[0] - 1e-12);
    }
    // Worked example: KL 0.2 and CE 1.0 at T = 5.
    let w = WeightInterpretation::HalfTSquared.weight(5.0);
    let example = w * 0.2 + HARD_WEIGHT * 1.0;
    let alt = WeightInterpretation::TSquaredOver2.weight(5.0) * 0.2 + HARD_WEIGHT * 1.0;
    // The combined objective is exactly that weighted sum of its parts.
    let mut max_comp = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(2..10);
        let p = random_simplex(&mut rng, n);
        let label = rng.random_range(0..n);
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let target = TeacherTarget::with_label(p, label);
        let c = combined_loss(&target, &z, 5.0, WeightInterpretation::default()).unwrap();
        let kd = distillation_loss(&target, &z, 5.0).unwrap().value;
        let ce = cross_entropy(label, &z).unwrap().value;
        max_comp = max_comp.max((c.value - (w * kd + HARD_WEIGHT * ce)).abs());
    }
    check(
        min_kl >= 0.0
            && max_self_kl < 1e-12
            && max_shift < 1e-12
            && entropy_ok
            && (example - 1.75).abs() < 1e-12
            && max_comp < 1e-12,
        format!(
            "min KL {min_kl:.3e}, max KL(P,P) {max_self_kl:.1e}, max shift diff {max_shift:.1e}, \
             entropy monotone {entropy_ok}, combined(T=5, 0.2, 1.0) = {example} (T^2/2 reading: {alt}), \
             composition err {max_comp:.1e}"
        ),
    )
}

fn c3_distillation_benefit() -> Outcome {
    let mut kd_final = Vec::new();
    let mut hard_final = Vec::new();
    let mut kd_best = Vec::new();
    for seed in BENCH_SEEDS {
        let (corpus, table, _) = bench_data(seed);
        let (train, test) = grouped_split(&corpus, 0.7, seed).unwrap().apply(&corpus);
        for mode in [Mode::SupervisedKd, Mode::HardOnly] {
            let cfg = TrainConfig {
                seed,
                temperature: 5.0,
                ..TrainConfig::new(mode, BENCH_EPOCHS)
            };
            let (_, log) = fit(&train, Some(&table), bench_stack(2, seed), &cfg, Some(&test)).unwrap();
            let accs: Vec<f64> = log.epochs.iter().map(|e| e.test_accuracy.unwrap()).collect();
            let last = *accs.last().unwrap();
            if mode == Mode::SupervisedKd {
                kd_final.push(last);
                kd_best.push(accs.iter().copied().fold(0.0, f64::max));
            } else {
                hard_final.push(last);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (kd, hard) = (mean(&kd_final), mean(&hard_final));
    let reached = kd_best.iter().all(|&a| a >= 0.90);
    check(
        kd >= hard && reached,
        format!(
            "mean final test acc supervised_kd {kd:.4} vs hard_only {hard:.4}; \
             per-seed kd {kd_final:?}, hard {hard_final:?}; best kd within {BENCH_EPOCHS} epochs {kd_best:?}"
        ),
    )
}

fn c4_depth_ablation() -> Outcome {
    let seed = 0;
    let (corpus, table, _) = bench_data(seed);
    let (train, test) = grouped_split(&corpus, 0.7, seed).unwrap().apply(&corpus);
    let mut lines = Vec::new();
    let mut ok = true;
    for depth in 1..=4 {
        let cfg = TrainConfig { seed, ..TrainConfig::new(Mode::SupervisedKd, BENCH_EPOCHS) };
        match fit(&train, Some(&table), bench_stack(depth, seed), &cfg, Some(&test)) {
            Ok((stack, log)) => {
                let finite = log.epochs.iter().all(|e| e.mean_loss.is_finite()) && stack.params.is_finite();
                ok &= finite;
                lines.push(format!(
                    "depth {depth}: loss {:.4}, test acc {:.4}",
                    log.final_loss().unwrap(),
                    log.final_accuracy().unwrap()
                ));
            }
            Err(e) => {
                ok = false;
                lines.push(format!("depth {depth}: {e}"));
            }
        }
    }
    check(ok, lines.join("; "))
}

fn c5_grouped_split() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut overlaps = 0usize;
    let mut uncovered = 0usize;
    for trial in 0..100u64 {
        let cfg = SyntheticCorpusConfig {
            num_classes: rng.random_range(1..8),
            images_per_class: rng.random_range(2..15),
            subjects: rng.random_range(1..5),
            timesteps: 1,
            channels: 1,
            noise_sigma: 0.1,
            seed: trial,
        };
        let corpus = generate_synthetic_corpus(&cfg).unwrap();
        let ratio = rng.random_range(0.05..0.95);
        let plan = grouped_split(&corpus, ratio, rng.random()).unwrap();
        overlaps += plan.train_image_ids.intersection(&plan.test_image_ids).count();
        let (train, test) = plan.apply(&corpus);
        for s in train.samples() {
            overlaps += usize::from(plan.test_image_ids.contains(&s.image_id));
        }
        uncovered += corpus.len() - train.len() - test.len();
    }
    let big = generate_synthetic_corpus(&SyntheticCorpusConfig {
        num_classes: 40,
        images_per_class: 50,
        subjects: 1,
        timesteps: 1,
        channels: 1,
        noise_sigma: 0.0,
        seed: 0,
    })
    .unwrap();
    let plan = grouped_split(&big, 0.7, 9).unwrap();
    let classes = big.image_classes().unwrap();
    let mut per_class: BTreeMap<usize, usize> = BTreeMap::new();
    for id in &plan.train_image_ids {
        *per_class.entry(classes[id]).or_default() += 1;
    }
    let exact = per_class.len() == 40 && per_class.values().all(|&n| n == 35);
    check(
        overlaps == 0 && uncovered == 0 && exact,
        format!(
            "100 random corpora: {overlaps} overlapping ids, {uncovered} unassigned samples; \
             40x50 at 0.7: train images per class all 35 = {exact}"
        ),
    )
}

fn c6_unseen_pipeline() -> Outcome {
    let mut knn = Vec::new();
    let mut svm = Vec::new();
    for seed in BENCH_SEEDS {
        let (corpus, table, _) = bench_data(seed);
        let held = [2 * seed as usize, 2 * seed as usize + 1];
        let h = holdout_classes(&corpus, &held).unwrap();
        let table = table.restrict(&h.seen_classes).unwrap();
        let cfg = UnseenConfig {
            stack: StackConfig { depth: 2, hidden: BENCH_HIDDEN, ..StackConfig::default() },
            init_seed: seed,
            train: TrainConfig { seed, ..TrainConfig::new(Mode::UnsupervisedKd, BENCH_EPOCHS) },
            window: Window { width: 32, stride: 16 },
            labelled_fraction: 0.5,
            split_seed: seed,
            classifiers: vec![Classifier::Knn { k: 5 }, Classifier::Svm(SvmConfig { seed, ..SvmConfig::default() })],
            voting: VotingPolicy::default(),
        };
        let r = unseen_category_eval(&h.seen, &h.unseen, &table, &cfg).unwrap();
        if r.train_log.label_reads != 0 {
            return Err(format!("unsupervised training read {} labels", r.train_log.label_reads));
        }
        knn.push(r.accuracies[0].1);
        svm.push(r.accuracies[1].1);
    }
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    check(
        min(&knn) >= 0.65 && min(&svm) >= 0.65,
        format!("per-seed signal accuracy on 2 held-out classes: knn {knn:?}, svm {svm:?} (every seed must be >= 0.65)"),
    )
}

fn brute_knn(train: &FeatureSet, q: &[f64], k: usize) -> (usize, Vec<usize>) {
    let mut taken = vec![false; train.len()];
    let n_classes = train.vectors.iter().map(|v| v.class_id).max().unwrap() + 1;
    let mut votes = vec![0usize; n_classes];
    let mut dsum = vec![0.0; n_classes];
    for _ in 0..k {
        let mut best: Option<(f64, usize)> = None;
        for (i, v) in train.vectors.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let d: f64 = v.values.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum();
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, i));
            }
        }
        let (d, i) = best.unwrap();
        taken[i] = true;
        votes[train.vectors[i].class_id] += 1;
        dsum[train.vectors[i].class_id] += d.sqrt();
    }
    let top = *votes.iter().max().unwrap();
    let mut class = usize::MAX;
    for c in 0..n_classes {
        if votes[c] != top {
            continue;
        }
        if class == usize::MAX || dsum[c] / (votes[c] as f64) < dsum[class] / (votes[class] as f64) {
            class = c;
        }
    }
    (class, votes)
}

fn c7_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // Majority vote against a counting oracle, tie-free cases only.
    let mut vote_cases = 0;
    let mut vote_mismatch = 0;
    while vote_cases < 1000 {
        let classes = rng.random_range(2..6);
        let n = rng.random_range(1..12);
        let votes: Vec<(usize, Vec<f64>)> = (0..n)
            .map(|_| (rng.random_range(0..classes), random_simplex(&mut rng, classes)))
            .collect();
        let mut counts = vec![0; classes];
        for (c, _) in &votes {
            counts[*c] += 1;
        }
        let top = *counts.iter().max().unwrap();
        if counts.iter().filter(|&&x| x == top).count() > 1 {
            continue;
        }
        let oracle = counts.iter().position(|&x| x == top).unwrap();
        vote_cases += 1;
        for policy in [VotingPolicy::SummedProbability, VotingPolicy::LowestClassId] {
            vote_mismatch += usize::from(majority_vote(&votes, policy).unwrap() != oracle);
        }
    }
    // kNN against exhaustive selection.
    let mut train = FeatureSet::new(4);
    for i in 0..150u32 {
        train
            .push(FeatureVector {
                values: (0..4).map(|_| f64::from(rng.random_range(-3i32..4))).collect(),
                class_id: rng.random_range(0..5),
                image_id: i,
                subject_id: 0,
            })
            .unwrap();
    }
    let mut knn_mismatch = 0;
    for q in 0..200 {
        // Integer grids make exact distance ties common.
        let query: Vec<f64> = (0..4).map(|_| f64::from(rng.random_range(-3i32..4))).collect();
        let k = 1 + q % 9;
        let got = knn_classify(&train, &query, k).unwrap();
        let (class, votes) = brute_knn(&train, &query, k);
        knn_mismatch += usize::from(got.class != class || got.votes != votes);
    }
    // Window count formula against enumeration.
    let mut window_cases = 0;
    let mut window_mismatch = 0;
    for len in 1..=50usize {
        for width in 1..=len {
            for stride in 1..=len {
                let mut enumerated = Vec::new();
                let mut s = 0;
                while s + width <= len {
                    enumerated.push(s);
                    s += stride;
                }
                if *enumerated.last().unwrap() + width != len {
                    enumerated.push(len - width);
                }
                let formula = (len - width) / stride + 1 + usize::from((len - width) % stride != 0);
                let got = window_starts(len, width, stride).unwrap();
                window_cases += 1;
                window_mismatch += usize::from(got != enumerated || got.len() != formula);
            }
        }
    }
    check(
        vote_mismatch == 0 && knn_mismatch == 0 && window_mismatch == 0,
        format!(
            "majority vote {vote_mismatch} mismatches / {vote_cases} cases x 2 policies; \
             knn {knn_mismatch} / 200 queries; windows {window_mismatch} / {window_cases} (L, w, s)"
        ),
    )
}

fn c8_determinism() -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    pool.install(|| {
        let corpus = generate_synthetic_corpus(&SyntheticCorpusConfig {
            num_classes: 4,
            images_per_class: 10,
            subjects: 2,
            timesteps: 16,
            channels: 4,
            noise_sigma: 0.5,
            seed: 8,
        })
        .unwrap();
        let teacher = SyntheticTeacher::new(SyntheticTeacherConfig {
            num_classes: 4,
            fidelity: 0.85,
            confusion_temperature: 1.0,
            seed: 8,
        })
        .unwrap();
        let table = teacher.table(corpus.image_classes().unwrap()).unwrap();
        let (train, test) = grouped_split(&corpus, 0.7, 8).unwrap().apply(&corpus);
        let stack = LstmStack::init(
            StackConfig { depth: 2, hidden: 6, bidirectional: true, recurrent_dropout: 0.5, num_classes: 4, input_channels: 4 },
            8,
        )
        .unwrap();
        let cfg = TrainConfig { batch_size: 8, seed: 8, ..TrainConfig::new(Mode::SupervisedKd, 6) };

        let (a, log_a) = fit(&train, Some(&table), stack.clone(), &cfg, Some(&test)).unwrap();
        let (b, log_b) = fit(&train, Some(&table), stack.clone(), &cfg, Some(&test)).unwrap();
        let same_runs = a == b && log_a.same_trajectory(&log_b);

        let mut first = Trainer::new(stack, cfg).unwrap();
        for _ in 0..3 {
            first.run_epoch(&train, Some(&table), Some(&test)).unwrap();
        }
        let mut bytes = Vec::new();
        write_checkpoint_to(first.stack(), Some(&first.training_state()), &mut bytes).unwrap();
        let restored = read_checkpoint_from(bytes.as_slice()).unwrap();
        let mut again = Vec::new();
        write_checkpoint_to(&restored.stack, restored.training.as_ref(), &mut again).unwrap();
        let checkpoint_exact = bytes == again
            && evaluate(&test, &restored.stack).unwrap() == evaluate(&test, first.stack()).unwrap();
        let mut second = Trainer::resume(restored).unwrap();
        second.run(&train, Some(&table), Some(&test)).unwrap();
        let resumed_losses: Vec<u64> = first
            .log()
            .epochs
            .iter()
            .chain(&second.log().epochs)
            .map(|e| e.mean_loss.to_bits())
            .collect();
        let full_losses: Vec<u64> = log_a.epochs.iter().map(|e| e.mean_loss.to_bits()).collect();
        let resume_exact = second.stack() == &a && resumed_losses == full_losses;

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.eegc");
        write_corpus(&corpus, &path).unwrap();
        let back = read_corpus(&path).unwrap();
        let bits = |c: &Corpus| -> Vec<u64> { c.samples().iter().flat_map(|s| s.signal.data().iter().map(|v| v.to_bits())).collect() };
        let container_exact = back == corpus && bits(&back) == bits(&corpus);

        check(
            same_runs && checkpoint_exact && resume_exact && container_exact,
            format!(
                "two runs identical {same_runs}; checkpoint round trip exact {checkpoint_exact}; \
                 resume == uninterrupted {resume_exact}; container round trip exact {container_exact}"
            ),
        )
    })
}

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "gradient oracle", limit: Duration::from_secs(120), run: c1_gradient_oracle },
        Criterion { id: 2, name: "loss properties", limit: Duration::from_secs(10), run: c2_loss_properties },
        Criterion { id: 3, name: "distillation benefit", limit: Duration::from_secs(600), run: c3_distillation_benefit },
        Criterion { id: 4, name: "depth ablation", limit: Duration::from_secs(1200), run: c4_depth_ablation },
        Criterion { id: 5, name: "grouped split", limit: Duration::from_secs(60), run: c5_grouped_split },
        Criterion { id: 6, name: "unseen-class pipeline", limit: Duration::from_secs(600), run: c6_unseen_pipeline },
        Criterion { id: 7, name: "oracle equivalences", limit: Duration::from_secs(60), run: c7_oracles },
        Criterion { id: 8, name: "determinism and persistence", limit: Duration::from_secs(300), run: c8_determinism },
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let sigma = bench_corpus_config(0).clean_rms().unwrap();
    println!("benchmark corpus: 8 classes x 60 images, 64 steps, 8 channels, noise sigma {sigma:.4} (0 dB SNR, seed 0)");
    let mut failures = 0;
    for c in criteria.iter().filter(|c| only.is_empty() || only.contains(&c.id)) {
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = started.elapsed();
        let in_time = elapsed <= c.limit;
        let (pass, detail) = match result {
            Ok(d) => (in_time, d),
            Err(d) => (false, d),
        };
        failures += usize::from(!pass);
        println!(
            "criterion {} ({}): {} [{:.1}s, limit {}s] {}",
            c.id,
            c.name,
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            c.limit.as_secs(),
            detail
        );
    }
    if failures > 0 {
        println!("{failures} criterion/criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
