use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rewardrank_core::calibration::{calibrate_pairs, VariantChoice};
use rewardrank_core::data::{read_dataset, write_dataset};
use rewardrank_core::eval::{calibration_pairs, evaluate, EvalConfig};
use rewardrank_core::model::{load_checkpoint, save_checkpoint};
use rewardrank_core::shaping::{
    base_table, check_invariance, forward_goal, median_first_success, q_learning_study, shaped_table, world_potential,
    DivergenceReport, GridCoupling, GridworldMDP, LearningCurve, PotentialFn, QConfig, observation_divergence,
};
use rewardrank_core::synth::{derive_seed, SynthConfig, SynthWorld};
use rewardrank_core::train::{train as run_training, TrainConfig};
use rewardrank_core::{DataConfig, Error, Result, RewardModel};
use serde::{Deserialize, Serialize};

use crate::config::{set, RunConfig};
use crate::{CalibrateArgs, DataArgs, EvalArgs, GenDataArgs, ShapeDemoArgs, TrainArgs, VariantArg};

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(value)?;
    text.push(b'\n');
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, text)?;
        }
        None => std::io::stdout().write_all(&text)?,
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<RewardModel> {
    load_checkpoint(path).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("checkpoint {}: {io}", path.display()))),
        other => other,
    })
}

fn apply_data_args(cfg: &mut DataConfig, a: DataArgs) {
    set(&mut cfg.eps_c, a.eps_c);
    set(&mut cfg.eps_r, a.eps_r);
    set(&mut cfg.pair_min_gap, a.pair_min_gap);
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let file = RunConfig::<SynthConfig>::load(a.config.as_deref())?;
    let out = file.out(a.out)?;
    let mut c = file.params;
    set(&mut c.seed, file.seed);
    set(&mut c.tasks, a.tasks);
    if a.variants {
        c.variants = true;
    }
    if a.no_variants {
        c.variants = false;
    }
    set(&mut c.episodes, a.episodes);
    set(&mut c.horizon, a.horizon);
    set(&mut c.action_repeat, a.action_repeat);
    set(&mut c.policies, a.policies.map(|v| v.into_iter().map(Into::into).collect()));
    set(&mut c.num_views, a.num_views);
    set(&mut c.tokens_per_view, a.tokens_per_view);
    set(&mut c.token_dim, a.token_dim);
    set(&mut c.goal_dim, a.goal_dim);
    set(&mut c.paraphrases, a.paraphrases);
    set(&mut c.heldout_paraphrases, a.heldout_paraphrases);
    set(&mut c.paraphrase_scale, a.paraphrase_scale);
    set(&mut c.noise_sigma, a.noise_sigma);
    set(&mut c.occlusion_rate, a.occlusion_rate);
    set(&mut c.object_views, a.object_views);
    if a.holdout_reverse.is_some() {
        c.holdout_reverse = a.holdout_reverse;
    }
    set(&mut c.world_seed, a.world_seed);
    set(&mut c.seed, a.seed);

    let world = SynthWorld::new(c)?;
    let dataset = world.build_dataset()?;
    write_dataset(&out, &dataset)?;
    let steps: usize = dataset.trajectories.iter().map(|t| t.entry.n_steps).sum();
    eprintln!(
        "wrote {} tasks, {} trajectories, {} steps to {}",
        dataset.manifest.tasks.len(),
        dataset.trajectories.len(),
        steps,
        out.display()
    );
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let file = RunConfig::<TrainConfig>::load(a.config.as_deref())?;
    let out = file.out(a.out)?;
    let mut c = file.params;
    set(&mut c.seed, file.seed);
    set(&mut c.epochs, a.epochs);
    set(&mut c.pairs_per_epoch, a.pairs_per_epoch);
    set(&mut c.batch_size, a.batch_size);
    set(&mut c.tau, a.tau);
    set(&mut c.optimizer.lr, a.lr);
    set(&mut c.optimizer.weight_decay, a.weight_decay);
    set(&mut c.heldout_fraction, a.heldout_fraction);
    set(&mut c.heldout_pairs, a.heldout_pairs);
    set(&mut c.proj_dim, a.proj_dim);
    set(&mut c.head_widths, a.head_widths);
    set(&mut c.film_generator_widths, a.film_widths);
    apply_data_args(&mut c.data, a.data_args);
    set(&mut c.seed, a.seed);
    c.validate()?;

    let dataset = read_dataset(&a.data)?;
    fs::create_dir_all(&out)?;
    write_json(Some(&out.join("train_config.json")), &c)?;
    let mut log = std::io::BufWriter::new(fs::File::create(out.join("train_log.jsonl"))?);
    let mut timing = fs::File::create(out.join("timing.log"))?;
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    writeln!(timing, "started_unix {started}")?;
    let clock = Instant::now();
    let mut io_err: Option<std::io::Error> = None;
    let outcome = run_training(&dataset, &c, |line| {
        let text = serde_json::to_string(line).expect("log line serializes");
        let res = writeln!(log, "{text}").and_then(|_| writeln!(timing, "epoch {} elapsed_s {:.3}", line.epoch, clock.elapsed().as_secs_f64()));
        if let Err(e) = res {
            io_err.get_or_insert(e);
        }
        eprintln!(
            "epoch {:>4}  loss {:.5}  heldout {}{}",
            line.epoch,
            line.mean_loss,
            line.heldout_accuracy.map_or("n/a".to_string(), |v| format!("{v:.4}")),
            if line.best { "  *" } else { "" }
        );
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    log.flush()?;
    save_checkpoint(&outcome.best_model, &out.join("model.rwdm"))?;
    writeln!(timing, "finished elapsed_s {:.3}", clock.elapsed().as_secs_f64())?;
    eprintln!(
        "best epoch {} heldout accuracy {:.4}; checkpoint {}",
        outcome.best_epoch,
        outcome.best_heldout.overall.unwrap_or(f64::NAN),
        out.join("model.rwdm").display()
    );
    Ok(())
}

fn eval_config(file: &RunConfig<EvalConfig>, pairs_per_task: Option<usize>, readout_tau: Option<f64>, d: DataArgs, seed: Option<u64>) -> EvalConfig {
    let mut c = file.params.clone();
    set(&mut c.seed, file.seed);
    set(&mut c.pairs_per_task, pairs_per_task);
    set(&mut c.readout_tau, readout_tau);
    apply_data_args(&mut c.data, d);
    set(&mut c.seed, seed);
    c
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let file = RunConfig::<EvalConfig>::load(a.config.as_deref())?;
    let c = eval_config(&file, a.pairs_per_task, a.readout_tau, a.data_args, a.seed);
    let out = a.out.or(file.out);
    let model = match &a.checkpoint {
        Some(p) if !a.oracle_scores => Some(load_model(p)?),
        _ => None,
    };
    let dataset = read_dataset(&a.data)?;
    let evaluation = evaluate(model.as_ref(), &dataset, &c)?;
    let r = &evaluation.report;
    eprintln!(
        "best-of accuracy {}  averaged {}",
        fmt_opt(r.best_of.overall),
        fmt_opt(r.averaged.overall)
    );
    for s in &r.tau.summaries {
        eprintln!("tau {:<7} n {:>3}  median {}", s.policy.as_str(), s.count, fmt_opt(s.median));
    }
    write_json(out.as_deref(), r)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".to_string(), |x| format!("{x:.4}"))
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateConfig {
    pub eval: EvalConfig,
    pub variant: Option<VariantChoice>,
}

pub fn calibrate(a: CalibrateArgs) -> Result<()> {
    let file = RunConfig::<CalibrateConfig>::load(a.config.as_deref())?;
    let eval_file = RunConfig {
        schema_version: file.schema_version,
        seed: file.seed,
        out: None,
        params: file.params.eval.clone(),
    };
    let c = eval_config(&eval_file, a.pairs_per_task, a.readout_tau, a.data_args, a.seed);
    let choice = match a.variant {
        Some(VariantArg::Temperature) => VariantChoice::Temperature,
        Some(VariantArg::Isotonic) => VariantChoice::Isotonic,
        Some(VariantArg::Both) => VariantChoice::Both,
        None => file.params.variant.unwrap_or(VariantChoice::Both),
    };
    let model = load_model(&a.checkpoint)?;
    let dataset = read_dataset(&a.data)?;
    let evaluation = evaluate(Some(&model), &dataset, &c)?;
    let (deltas, labels) = calibration_pairs(&evaluation, &dataset.manifest.tasks);
    let report = calibrate_pairs(&deltas, &labels, c.readout_tau, choice, derive_seed(c.seed, &[0xCA1]))?;

    eprintln!("pairs fit {} test {}", report.fit_pairs, report.test_pairs);
    eprintln!("ECE uncalibrated  fit {:.5}  test {:.5}", report.uncalibrated.fit, report.uncalibrated.test);
    if let Some(t) = &report.temperature {
        eprintln!("ECE temperature   fit {:.5}  test {:.5}  (tau {:.4})", t.ece.fit, t.ece.test, t.fit.tau);
        write_json(Some(&map_path(&a.checkpoint, "temperature")), &t.map)?;
    }
    if let Some(i) = &report.isotonic {
        eprintln!("ECE isotonic      fit {:.5}  test {:.5}", i.ece.fit, i.ece.test);
        write_json(Some(&map_path(&a.checkpoint, "isotonic")), &i.map)?;
    }
    write_json(a.out.or(file.out).as_deref(), &report)
}

/// `model.rwdm` → `model.temperature.json` in the same directory.
fn map_path(checkpoint: &Path, variant: &str) -> PathBuf {
    let stem = checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
    checkpoint.with_file_name(format!("{stem}.{variant}.json"))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapeDemoConfig {
    pub sizes: Vec<usize>,
    pub study_size: usize,
    pub seeds: usize,
    pub gamma: f64,
    pub q: QConfig,
    pub random_potentials: usize,
    pub family: usize,
    pub probes: usize,
    pub probe_occlusion: f64,
    pub tol: f64,
    pub seed: u64,
}

impl Default for ShapeDemoConfig {
    fn default() -> Self {
        ShapeDemoConfig {
            sizes: vec![5, 7, 9, 11, 13],
            study_size: 9,
            seeds: 20,
            gamma: 0.95,
            q: QConfig::default(),
            random_potentials: 10,
            family: 0,
            probes: 20,
            probe_occlusion: 0.5,
            tol: 1e-10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InvarianceRow {
    pub size: usize,
    pub potential: String,
    pub policy_agreement: f64,
    pub max_value_residual: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StudyArm {
    pub reward: String,
    pub median_first_success: f64,
    pub curves: Vec<LearningCurve>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShapeDemoReport {
    pub schema_version: u32,
    pub config: ShapeDemoConfig,
    pub invariance: Vec<InvarianceRow>,
    pub study: Vec<StudyArm>,
    pub divergence: Option<DivergenceReport>,
}

const VALUE_RESIDUAL_TOL: f64 = 1e-8;

fn grid(size: usize, gamma: f64) -> Result<GridworldMDP> {
    let mut mdp = GridworldMDP::corners(size, size)?;
    mdp.gamma = gamma;
    mdp.validate()?;
    Ok(mdp)
}

pub fn shape_demo(a: ShapeDemoArgs) -> Result<()> {
    let file = RunConfig::<ShapeDemoConfig>::load(a.config.as_deref())?;
    let out = file.out(a.out)?;
    let mut c = file.params;
    set(&mut c.seed, file.seed);
    set(&mut c.sizes, a.sizes);
    set(&mut c.study_size, a.study_size);
    set(&mut c.seeds, a.seeds);
    set(&mut c.q.episodes, a.episodes);
    set(&mut c.gamma, a.gamma);
    set(&mut c.random_potentials, a.random_potentials);
    set(&mut c.family, a.family);
    set(&mut c.probes, a.probes);
    set(&mut c.probe_occlusion, a.probe_occlusion);
    set(&mut c.seed, a.seed);
    if c.sizes.iter().any(|&s| s < 2) || c.study_size < 2 || c.seeds == 0 {
        return Err(Error::Config("grid sizes must be at least 2 and seeds positive".into()));
    }

    let learned: Option<(RewardModel, SynthWorld)> = match (&a.checkpoint, &a.data) {
        (Some(ck), Some(data)) => {
            let model = load_model(ck)?;
            let dataset = read_dataset(data)?;
            rewardrank_core::eval::check_geometry(&model, &dataset)?;
            Some((model, SynthWorld::from_manifest(&dataset.manifest)?))
        }
        _ => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(c.seed, &[0x5A9E]));
    let mut invariance = Vec::new();
    for &size in &c.sizes {
        let mdp = grid(size, c.gamma)?;
        let far = (2 * (size - 1)) as f64;
        let mut potentials: Vec<(String, Vec<f64>)> = vec![
            ("-d".into(), PotentialFn::NegManhattan { scale: 1.0, offset: 0.0 }.values(&mdp)?),
            (format!("1-d/{far}"), PotentialFn::NegManhattan { scale: far, offset: 1.0 }.values(&mdp)?),
        ];
        for k in 0..c.random_potentials {
            let phi = (0..mdp.num_states()).map(|_| rng.random_range(-1.0..1.0)).collect();
            potentials.push((format!("uniform#{k}"), phi));
        }
        if let Some((model, world)) = &learned {
            potentials.push(("learned".into(), world_potential(&mdp, world, model, c.family, c.seed)?));
        }
        for (name, phi) in potentials {
            let check = check_invariance(&mdp, &phi, c.tol)?;
            invariance.push(InvarianceRow {
                size,
                potential: name,
                pass: check.policy_agreement == 1.0 && check.max_value_residual <= VALUE_RESIDUAL_TOL,
                policy_agreement: check.policy_agreement,
                max_value_residual: check.max_value_residual,
            });
        }
    }

    let mdp = grid(c.study_size, c.gamma)?;
    let seeds: Vec<u64> = (0..c.seeds as u64).map(|k| derive_seed(c.seed, &[0x0E, k])).collect();
    let far = (2 * (c.study_size - 1)) as f64;
    let mut arms = vec![("sparse".to_string(), base_table(&mdp))];
    for offset in [0.0, 1.0] {
        let phi = PotentialFn::NegManhattan { scale: far, offset }.values(&mdp)?;
        let name = if offset == 0.0 { format!("-d/{far}") } else { format!("1-d/{far}") };
        arms.push((name, shaped_table(&mdp, &phi)?));
    }
    if let Some((model, world)) = &learned {
        arms.push(("learned".into(), shaped_table(&mdp, &world_potential(&mdp, world, model, c.family, c.seed)?)?));
    }
    let mut study = Vec::new();
    for (name, table) in arms {
        let curves = q_learning_study(&mdp, &table, &c.q, &seeds)?;
        study.push(StudyArm {
            reward: name,
            median_first_success: median_first_success(&curves, c.q.episodes),
            curves,
        });
    }

    let divergence = match &learned {
        Some((model, world)) => {
            let mut occluded = world.config.clone();
            occluded.occlusion_rate = c.probe_occlusion;
            let occluded = SynthWorld::new(occluded)?;
            let (task, goal) = forward_goal(world, c.family)?;
            let coupling = GridCoupling::new(&mdp, task.target_center);
            let mut probe_rng = ChaCha8Rng::seed_from_u64(derive_seed(c.seed, &[0xD1F]));
            Some(observation_divergence(&mdp, c.probes, c.tol, |s| {
                let sample = occluded.encoder.encode_sample(&coupling.latent_state(&mdp, s), &mut probe_rng)?;
                model.score(&sample, &goal)
            })?)
        }
        None => None,
    };

    let report = ShapeDemoReport {
        schema_version: 1,
        config: c,
        invariance,
        study,
        divergence,
    };
    let summary = summary_table(&report);
    fs::create_dir_all(&out)?;
    write_json(Some(&out.join("shaping_report.json")), &report)?;
    fs::write(out.join("shaping_summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn summary_table(r: &ShapeDemoReport) -> String {
    let mut s = String::new();
    let passed = r.invariance.iter().filter(|row| row.pass).count();
    let _ = writeln!(s, "policy invariance: {passed}/{} (size, potential) checks pass", r.invariance.len());
    let _ = writeln!(s, "{:<6} {:<16} {:>10} {:>12}", "size", "potential", "agreement", "residual");
    for row in &r.invariance {
        let _ = writeln!(
            s,
            "{:<6} {:<16} {:>10.4} {:>12.3e}",
            row.size, row.potential, row.policy_agreement, row.max_value_residual
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "q-learning on {0}x{0}, {1} seeds", r.config.study_size, r.config.seeds);
    let _ = writeln!(s, "{:<16} {:>22} {:>10}", "reward", "median first success", "solved");
    for arm in &r.study {
        let solved = arm.curves.iter().filter(|c| c.first_success.is_some()).count();
        let _ = writeln!(s, "{:<16} {:>22.1} {:>7}/{}", arm.reward, arm.median_first_success, solved, arm.curves.len());
    }
    if let Some(d) = &r.divergence {
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "occluded potential: {}/{} probes diverge, mean state divergence {:.4}",
            d.diverged_probes, d.probes, d.mean_state_divergence
        );
    }
    s
}
