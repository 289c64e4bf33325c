//! End-to-end acceptance checks. Each test prints one PASS/FAIL line
//! straight to stdout, so the lines appear even when output is captured.

mod common;

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::oracles::{clustered_steps, dedup_oracle, gradient_check, isotonic_oracle, tau_b_oracle, tied_fixture};
use common::rng;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rewardrank_core::calibration::{calibrate_pairs, fit_temperature, pav, VariantChoice};
use rewardrank_core::data::{dedup_bin, read_dataset, write_dataset, PolicyTag};
use rewardrank_core::eval::{calibration_pairs, evaluate, goal_swap_flip_rate, EvalConfig, Evaluation};
use rewardrank_core::metrics::{kendall_tau_b, pairwise_accuracy, sigmoid};
use rewardrank_core::model::{load_checkpoint, save_checkpoint};
use rewardrank_core::shaping::{
    base_table, check_invariance, median_first_success, q_learning_study, shaped_table, world_potential, GridworldMDP,
    PotentialFn, QConfig,
};
use rewardrank_core::synth::{SynthConfig, SynthWorld};
use rewardrank_core::train::{goal_vectors, score_pairs, train, TrainConfig, TrainOutcome};
use rewardrank_core::{DataConfig, Dataset, Error};

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let line = format!("criterion {id:>2} {name}: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(pass, "criterion {id} {name} failed: {detail}");
}

struct Trained {
    world: SynthWorld,
    dataset: Dataset,
    outcome: TrainOutcome,
    elapsed: Duration,
    eval_dataset: Dataset,
    evaluation: Evaluation,
}

/// Default dataset, default training, timed on a single worker thread.
/// The evaluation dataset shares the world but draws fresh episodes.
fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let world = SynthWorld::new(SynthConfig::default()).unwrap();
        let dataset = world.build_dataset().unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let started = Instant::now();
        let outcome = pool.install(|| train(&dataset, &TrainConfig::default(), |_| {})).unwrap();
        let elapsed = started.elapsed();
        let eval_world = SynthWorld::new(SynthConfig {
            seed: 1,
            ..SynthConfig::default()
        })
        .unwrap();
        let eval_dataset = eval_world.build_dataset().unwrap();
        let evaluation = evaluate(Some(&outcome.best_model), &eval_dataset, &EvalConfig::default()).unwrap();
        Trained {
            world,
            dataset,
            outcome,
            elapsed,
            eval_dataset,
            evaluation,
        }
    })
}

#[test]
fn c01_gradient_matches_finite_differences() {
    let started = Instant::now();
    let (worst, checked, kinks) = gradient_check(0..6, 1e-5);
    let secs = started.elapsed().as_secs_f64();
    let pass = worst < 1e-4 && secs < 30.0 && kinks * 100 <= checked;
    report(
        1,
        "gradient check",
        pass,
        &format!("max rel err {worst:.2e} over {checked} coords, 6 seeds, {kinks} kink coords skipped, {secs:.1}s"),
    );
}

#[test]
fn c02_end_to_end_learning() {
    let t = trained();
    let h = &t.outcome.best_heldout;
    let overall = h.overall.unwrap_or(0.0);
    let strata: Vec<(f64, f64)> = h
        .bins
        .iter()
        .filter(|b| b.lo >= 0.06 - 1e-12 && b.lo < 0.7 - 1e-12 && b.count > 0)
        .map(|b| (b.lo, b.accuracy.unwrap()))
        .collect();
    let worst = strata.iter().map(|s| s.1).fold(1.0, f64::min);
    let fresh = t.evaluation.report.best_of.overall.unwrap_or(0.0);
    let secs = t.elapsed.as_secs_f64();
    let pass = overall >= 0.90 && !strata.is_empty() && worst >= 0.80 && secs < 300.0;
    report(
        2,
        "end-to-end learning",
        pass,
        &format!(
            "held-out acc {overall:.4} over {} pairs, worst stratum in [0.06, 0.7) {worst:.4}, fresh-episode acc {fresh:.4}, best epoch {}, {secs:.1}s single-threaded",
            h.total, t.outcome.best_epoch
        ),
    );
}

#[test]
fn c03_language_conditioning() {
    let t = trained();
    let flip = goal_swap_flip_rate(
        &t.outcome.best_model,
        &t.dataset,
        &t.outcome.data.heldout_steps,
        &t.outcome.heldout_pairs,
    )
    .unwrap();
    report(
        3,
        "goal swap flips preference",
        flip.rate >= 0.90,
        &format!("{}/{} held-out pairs flipped, rate {:.4}", flip.flipped, flip.pairs, flip.rate),
    );
}

#[test]
fn c04_expert_random_tau_gap() {
    let t = trained();
    let tau = &t.evaluation.report.tau;
    let expert = tau.summary(PolicyTag::Expert).and_then(|s| s.median);
    let random = tau.summary(PolicyTag::Random).and_then(|s| s.median);
    let pass = matches!((expert, random), (Some(e), Some(r)) if e > r);
    report(
        4,
        "expert vs random tau",
        pass,
        &format!(
            "median per-trajectory tau-b expert {}, random {}",
            expert.map_or("undefined".into(), |v| format!("{v:.4}")),
            random.map_or("undefined".into(), |v| format!("{v:.4}"))
        ),
    );
}

#[test]
fn c05_kendall_oracle() {
    let started = Instant::now();
    let mut r = rng(1);
    let mut mismatches = 0;
    let mut ties = 0;
    for k in 0..1000 {
        let n = if k % 10 == 0 { r.random_range(2..=500) } else { r.random_range(2..=60) };
        let (x, y) = tied_fixture(&mut r, n);
        let agree = match (kendall_tau_b(&x, &y), tau_b_oracle(&x, &y)) {
            (Ok(fast), Some(slow)) => fast.to_bits() == slow.to_bits(),
            (Err(Error::UndefinedTau(_)), None) => true,
            _ => false,
        };
        mismatches += usize::from(!agree);
        let mut sx = x.clone();
        sx.sort_by(f64::total_cmp);
        ties += usize::from(sx.windows(2).any(|w| w[0] == w[1]));
    }
    let secs = started.elapsed().as_secs_f64();
    report(
        5,
        "kendall oracle",
        mismatches == 0 && secs < 20.0,
        &format!("1000 fixtures ({ties} with ties), {mismatches} mismatches, {secs:.2}s"),
    );
}

#[test]
fn c06_pav_oracle() {
    let mut r = rng(11);
    let mut worst: f64 = 0.0;
    for k in 0..600 {
        let n = r.random_range(1..=10);
        let values: Vec<f64> = if k % 2 == 0 {
            (0..n).map(|_| f64::from(r.random_bool(0.5))).collect()
        } else {
            (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
        };
        let weights: Vec<f64> = (0..n).map(|_| r.random_range(1..4) as f64).collect();
        let fitted = pav(&values, &weights)
            .iter()
            .flat_map(|b| std::iter::repeat_n(b.mean, b.len))
            .collect::<Vec<_>>();
        for (a, b) in fitted.iter().zip(isotonic_oracle(&values, &weights)) {
            worst = worst.max((a - b).abs());
        }
    }
    report(6, "PAV oracle", worst < 1e-10, &format!("600 fixtures, max deviation {worst:.2e}"));
}

#[test]
fn c07_calibration_ordering() {
    let t = trained();
    let (deltas, labels) = calibration_pairs(&t.evaluation, &t.eval_dataset.manifest.tasks);
    let rep = calibrate_pairs(&deltas, &labels, 1.0, VariantChoice::Both, 0).unwrap();
    let temp = rep.temperature.as_ref().unwrap();
    let iso = rep.isotonic.as_ref().unwrap().ece.fit;
    let (tf, uf) = (temp.ece.fit, rep.uncalibrated.fit);
    let ordered = iso <= tf && tf <= uf + 1e-9;

    let mut r = rng(71);
    let normal = Normal::new(0.0, 3.0).unwrap();
    let synth: Vec<f64> = (0..10_000).map(|_| normal.sample(&mut r)).collect();
    let synth_labels: Vec<f64> = synth.iter().map(|d| f64::from(r.random_bool(sigmoid(d / 2.0)))).collect();
    let recovered = fit_temperature(&synth, &synth_labels).unwrap().tau;
    let pass = ordered && (1.8..=2.2).contains(&recovered);
    report(
        7,
        "calibration ordering",
        pass,
        &format!(
            "fit-split ECE isotonic {iso:.5} <= temperature {tf:.5} <= uncalibrated {uf:.5} over {} pairs (tau_cal {:.3}); synthetic tau {recovered:.3}",
            rep.fit_pairs, temp.fit.tau
        ),
    );
}

#[test]
fn c08_shaping_invariance() {
    let t = trained();
    let model = &t.outcome.best_model;
    let mut r = rng(81);
    let (mut checks, mut failures, mut worst): (usize, usize, f64) = (0, 0, 0.0);
    let sizes = [5, 7, 9, 11, 13];
    for &n in &sizes {
        let mdp = GridworldMDP::corners(n, n).unwrap();
        let far = (2 * (n - 1)) as f64;
        let mut potentials = vec![
            PotentialFn::NegManhattan { scale: 1.0, offset: 0.0 }.values(&mdp).unwrap(),
            PotentialFn::NegManhattan { scale: far, offset: 1.0 }.values(&mdp).unwrap(),
        ];
        for _ in 0..6 {
            potentials.push((0..mdp.num_states()).map(|_| r.random_range(-1.0..1.0)).collect());
        }
        for family in 0..t.world.config.tasks {
            potentials.push(world_potential(&mdp, &t.world, model, family, 0).unwrap());
        }
        for phi in &potentials {
            let c = check_invariance(&mdp, phi, 1e-12).unwrap();
            checks += 1;
            worst = worst.max(c.max_value_residual);
            failures += usize::from(c.policy_agreement != 1.0 || c.max_value_residual > 1e-8);
        }
    }
    report(
        8,
        "shaping invariance",
        failures == 0 && checks >= 50,
        &format!(
            "{} sizes x {} potentials (2 analytic, 6 random, {} learned), {failures} failures, max |V' - (V - phi)| {worst:.2e}",
            sizes.len(),
            checks / sizes.len(),
            t.world.config.tasks
        ),
    );
}

#[test]
fn c09_shaping_speedup() {
    let t = trained();
    let mdp = GridworldMDP::corners(9, 9).unwrap();
    let config = QConfig::default();
    let seeds: Vec<u64> = (0..20).collect();
    let phi = world_potential(&mdp, &t.world, &t.outcome.best_model, 0, 0).unwrap();
    let sparse = q_learning_study(&mdp, &base_table(&mdp), &config, &seeds).unwrap();
    let learned = q_learning_study(&mdp, &shaped_table(&mdp, &phi).unwrap(), &config, &seeds).unwrap();
    let (ms, ml) = (
        median_first_success(&sparse, config.episodes),
        median_first_success(&learned, config.episodes),
    );
    report(
        9,
        "shaping speedup",
        ml < ms,
        &format!("9x9, 20 seeds, median episodes to first success: learned {ml}, sparse {ms}"),
    );
}

#[test]
fn c10_affine_invariance() {
    let t = trained();
    let (sa, sb) = score_pairs(
        &t.outcome.best_model,
        &t.dataset,
        &t.outcome.data.heldout_steps,
        &t.outcome.heldout_pairs,
        &goal_vectors(&t.dataset),
    )
    .unwrap();
    let steps = &t.outcome.data.heldout_steps;
    let model_scores: Vec<f64> = sa.iter().chain(&sb).copied().collect();
    let model_rewards: Vec<f64> = t
        .outcome
        .heldout_pairs
        .iter()
        .map(|p| steps[p.a].reward_norm)
        .chain(t.outcome.heldout_pairs.iter().map(|p| steps[p.b].reward_norm))
        .collect();
    let mut r = rng(101);
    let (mut checked, mut skipped, mut mismatches) = (0, 0, 0);
    for k in 0..1000 {
        let (scores, rewards) = if k % 4 == 0 {
            let idx: Vec<usize> = (0..300).map(|_| r.random_range(0..model_scores.len())).collect();
            (
                idx.iter().map(|&i| model_scores[i]).collect::<Vec<f64>>(),
                idx.iter().map(|&i| model_rewards[i]).collect::<Vec<f64>>(),
            )
        } else {
            let n = r.random_range(3..200);
            (
                (0..n).map(|_| r.random_range(-50.0..50.0)).collect(),
                (0..n).map(|_| r.random_range(0.0..1.0)).collect(),
            )
        };
        let a = 10f64.powf(r.random_range(-2.0..2.0));
        let b = r.random_range(-100.0..100.0);
        let moved: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
        // Rounding may merge distinct neighbours; count such draws instead
        // of comparing them.
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
        let kept = order.windows(2).all(|w| scores[w[0]].partial_cmp(&scores[w[1]]) == moved[w[0]].partial_cmp(&moved[w[1]]));
        if !kept {
            skipped += 1;
            continue;
        }
        let n = scores.len();
        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| (rewards[i] - rewards[j]).abs() >= 0.01)
            .collect();
        let same_acc = pairwise_accuracy(&scores, &rewards, &pairs).unwrap() == pairwise_accuracy(&moved, &rewards, &pairs).unwrap();
        let same_tau = match (kendall_tau_b(&scores, &rewards), kendall_tau_b(&moved, &rewards)) {
            (Ok(x), Ok(y)) => x.to_bits() == y.to_bits(),
            (Err(_), Err(_)) => true,
            _ => false,
        };
        mismatches += usize::from(!(same_acc && same_tau));
        checked += 1;
    }
    report(
        10,
        "affine invariance",
        mismatches == 0 && checked >= 990,
        &format!("{checked} fixtures bit-identical ({skipped} skipped for rounding ties), {mismatches} mismatches"),
    );
}

#[test]
fn c11_dedup_oracle() {
    let c = DataConfig::default();
    let mut failures = 0;
    let mut removed = 0;
    for seed in 0..10 {
        let steps = clustered_steps(1000, seed);
        let fast = dedup_bin(&steps, &c);
        let ids: Vec<(usize, usize, usize)> = fast.iter().map(|s| (s.task_id, s.trajectory_id, s.step_index)).collect();
        failures += usize::from(ids != dedup_oracle(&steps, &c) || dedup_bin(&fast, &c) != fast);
        removed += steps.len() - fast.len();
    }
    report(
        11,
        "dedup oracle",
        failures == 0,
        &format!("10 fixtures of 1000 steps, {removed} duplicates removed, {failures} mismatches"),
    );
}

fn tree(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn c12_format_round_trips() {
    let t = trained();
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    write_dataset(&a, &t.dataset).unwrap();
    let back = read_dataset(&a).unwrap();
    write_dataset(&b, &back).unwrap();
    let dataset_ok = back == t.dataset && tree(&a) == tree(&b);

    let path = tmp.path().join("model.rwdm");
    save_checkpoint(&t.outcome.best_model, &path).unwrap();
    let restored = load_checkpoint(&path).unwrap();
    let goals = goal_vectors(&t.dataset);
    let steps = &t.outcome.data.heldout_steps;
    let pairs = &t.outcome.heldout_pairs;
    let (x0, x1) = score_pairs(&t.outcome.best_model, &t.dataset, steps, pairs, &goals).unwrap();
    let (y0, y1) = score_pairs(&restored, &t.dataset, steps, pairs, &goals).unwrap();
    let worst = x0
        .iter()
        .chain(&x1)
        .zip(y0.iter().chain(&y1))
        .map(|(p, q)| (p - q).abs() / p.abs().max(1.0))
        .fold(0.0, f64::max);
    let largest = x0.iter().chain(&x1).map(|s| s.abs()).fold(0.0, f64::max);
    // Informational: drift caused by narrowing the 64-bit final weights.
    let final_model = &t.outcome.final_model;
    let (f0, _) = score_pairs(final_model, &t.dataset, steps, pairs, &goals).unwrap();
    let (n0, _) = score_pairs(&final_model.narrowed(), &t.dataset, steps, pairs, &goals).unwrap();
    let narrowing = f0.iter().zip(&n0).map(|(p, q)| (p - q).abs() / p.abs().max(1.0)).fold(0.0, f64::max);
    report(
        12,
        "format round trips",
        dataset_ok && worst < 1e-6,
        &format!(
            "dataset of {} files byte-identical: {dataset_ok}; checkpoint max |ds|/max(1,|s|) {worst:.2e} over {} scores (largest |s| {largest:.1}); narrowing the 64-bit final weights alone moves scores by {narrowing:.2e}",
            tree(&a).len(),
            2 * pairs.len()
        ),
    );
}
