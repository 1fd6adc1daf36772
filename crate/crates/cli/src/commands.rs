//! Subcommand implementations. Each writes its artifacts plus the effective
//! config under a fresh run directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crl_core::checkpoint::{Checkpoint, FlowSection};
use crl_core::crl::BatchSample;
use crl_core::encoders::{finite_diff_check, train_samples, trajectory_samples, TrainingSample};
use crl_core::flow::{fm_batch_loss, sample, train_flow, ActionChunk, FlowExample, FlowMlp, FlowModel, FmTuple};
use crl_core::gradcheck::central_difference_check;
use crl_core::mask::{
    block_sparse_attention, build_mask, dense_attention, isolation_check, mask_bench, pack, packing_loss_diff,
    random_sequence_sample, AttentionParams, RoleCounts, SequenceSample, ISOLATION_TOL,
};
use crl_core::shard::{shard_report, ShardPlan};
use crl_core::testbed::{generate_corpus, load_corpus, occupancy_oracle, save_corpus, Corpus, Trajectory};
use crl_core::verify::{goal_discrimination, occupancy_residuals, value_curve, value_curve_holds};
use crl_core::GoalId;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::svg::{line_plot, Series};

/// Creates `<out>/<name>-<timestamp>` (suffixed on collision) and echoes
/// the effective config into it.
pub fn create_run_dir(out: &Path, name: &str, config: &RunConfig) -> Result<PathBuf, CliError> {
    fs::create_dir_all(out)?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let mut dir = out.join(format!("{name}-{stamp}"));
    let mut k = 1;
    while dir.exists() {
        dir = out.join(format!("{name}-{stamp}-{k}"));
        k += 1;
    }
    fs::create_dir(&dir)?;
    fs::write(dir.join("config.toml"), config.to_toml()?)?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn corpus_from(config: &RunConfig, path: Option<&Path>) -> Result<Corpus, CliError> {
    match path {
        Some(p) => Ok(load_corpus(p)?),
        None => Ok(generate_corpus(&config.corpus)?),
    }
}

fn split(config: &RunConfig, corpus: &Corpus) -> (Vec<Trajectory>, Vec<Trajectory>) {
    if config.holdout {
        corpus.holdout_split()
    } else {
        (corpus.trajectories.clone(), Vec::new())
    }
}

pub fn cmd_gen(config: &RunConfig, run_dir: &Path) -> Result<(), CliError> {
    let corpus = generate_corpus(&config.corpus)?;
    let corpus_path = run_dir.join("corpus.jsonl");
    save_corpus(&corpus, &corpus_path)?;

    let oracle = occupancy_oracle(&corpus.mdp, &corpus.expert(), config.corpus.gamma)?;
    let mut csv = String::from("goal,state,action,q\n");
    for &g in oracle.goals() {
        for s in 0..corpus.mdp.num_states() {
            for a in 0..corpus.mdp.num_actions() {
                let q = oracle.q(s, a, g).unwrap_or(0.0);
                let _ = writeln!(csv, "{},{s},{a},{q:e}", g.0);
            }
        }
    }
    fs::write(run_dir.join("oracle.csv"), csv)?;
    let steps: usize = corpus.trajectories.iter().map(Trajectory::len).sum();
    println!(
        "generated {} goals, {} trajectories, {steps} steps over {} states -> {}",
        corpus.goals.len(),
        corpus.trajectories.len(),
        corpus.mdp.num_states(),
        corpus_path.display()
    );
    Ok(())
}

/// `[state features, goal one-hot]`, the context the flow head sees.
pub fn flow_condition(corpus: &Corpus, goals: &[GoalId], state: usize, goal: GoalId) -> Vec<f64> {
    let mut c = corpus.mdp.state_features(state);
    c.extend(goals.iter().map(|&g| if g == goal { 1.0 } else { 0.0 }));
    c
}

/// One-hot chunks of the next `horizon` expert actions, the last action
/// repeated past the end of the trajectory.
pub fn flow_examples(corpus: &Corpus, trajectories: &[Trajectory], goals: &[GoalId], horizon: usize) -> Vec<FlowExample> {
    let na = corpus.mdp.num_actions();
    let mut out = Vec::new();
    for tr in trajectories {
        for k in 0..tr.len() {
            let mut chunk = Array2::zeros((horizon, na));
            for h in 0..horizon {
                chunk[[h, tr.actions[(k + h).min(tr.len() - 1)]]] = 1.0;
            }
            out.push(FlowExample {
                clean: ActionChunk::new(chunk).expect("finite one-hot chunk"),
                condition: flow_condition(corpus, goals, tr.states[k], tr.goal_id),
            });
        }
    }
    out
}

pub fn cmd_train(config: &RunConfig, run_dir: &Path, corpus_path: Option<&Path>) -> Result<(), CliError> {
    let corpus = corpus_from(config, corpus_path)?;
    save_corpus(&corpus, &run_dir.join("corpus.jsonl"))?;
    let (train, held_out) = split(config, &corpus);
    let samples = trajectory_samples(&corpus, &train);
    info!("training on {} samples ({} held-out trajectories)", samples.len(), held_out.len());
    let outcome = train_samples(&samples, &corpus.mdp, &config.train)?;

    let mut csv = String::from("step,L_sa_to_l,L_l_to_sa,L_bc,temperature,grad_norm\n");
    for r in &outcome.history {
        let _ = writeln!(
            csv,
            "{},{:e},{:e},{:e},{:e},{:e}",
            r.step, r.l_sa_to_l, r.l_l_to_sa, r.l_bc, r.temperature, r.grad_norm
        );
    }
    fs::write(run_dir.join("loss_history.csv"), csv)?;

    let flow = if config.flow.enabled {
        let goals = outcome.params.goal_ids.clone();
        let data = flow_examples(&corpus, &train, &goals, config.flow.horizon);
        let mut model = FlowMlp::new(
            config.flow.horizon,
            corpus.mdp.num_actions(),
            data[0].condition.len(),
            config.flow.train.hidden,
            config.flow.train.seed,
        );
        let history = train_flow(&mut model, &data, &config.flow.train)?;
        if history.iter().any(|l| !l.is_finite()) {
            return Err(CliError::Numerical("non-finite flow-matching loss".into()));
        }
        let mut csv = String::from("step,L_fm\n");
        for (i, l) in history.iter().enumerate() {
            let _ = writeln!(csv, "{i},{l:e}");
        }
        fs::write(run_dir.join("flow_history.csv"), csv)?;
        Some(FlowSection {
            model,
            config: config.flow.train.clone(),
        })
    } else {
        None
    };

    let last = outcome.history.last();
    let ck = Checkpoint::new(
        outcome.params,
        outcome.bc_head,
        flow,
        config.train.clone(),
        serde_json::to_value(config)?,
    );
    let path = run_dir.join("checkpoint.json");
    ck.save(&path)?;
    if let Some(r) = last {
        println!(
            "trained {} steps: L_sa_to_l {:.4}, L_l_to_sa {:.4}, L_bc {:.4} -> {}",
            config.train.steps,
            r.l_sa_to_l,
            r.l_l_to_sa,
            r.l_bc,
            path.display()
        );
    }
    Ok(())
}

/// Checkpoint plus the corpus it was trained on and the config it echoes.
pub struct Loaded {
    pub checkpoint: Checkpoint,
    pub trained_with: RunConfig,
    pub corpus: Corpus,
}

pub fn load_run(checkpoint: &Path, corpus_path: Option<&Path>, fallback: &RunConfig) -> Result<Loaded, CliError> {
    let ck = Checkpoint::load(checkpoint)?;
    let trained_with: RunConfig = serde_json::from_value(ck.config_echo.clone()).unwrap_or_else(|_| fallback.clone());
    // prefer an explicit corpus, then the one saved next to the checkpoint
    let sibling = checkpoint.parent().map(|d| d.join("corpus.jsonl")).filter(|p| p.exists());
    let corpus = corpus_from(&trained_with, corpus_path.or(sibling.as_deref()))?;
    Ok(Loaded {
        checkpoint: ck,
        trained_with,
        corpus,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub suite: String,
    pub passed: bool,
    pub statistic: f64,
    pub threshold: f64,
    pub detail: String,
}

fn suite(name: &str, passed: bool, statistic: f64, threshold: f64, detail: String) -> SuiteResult {
    SuiteResult {
        suite: name.to_owned(),
        passed,
        statistic,
        threshold,
        detail,
    }
}

/// `n` samples spread evenly over `samples`, so every task tends to appear.
fn spread<T: Clone>(samples: &[T], n: usize) -> Vec<T> {
    if samples.len() <= n {
        return samples.to_vec();
    }
    (0..n).map(|k| samples[k * samples.len() / n].clone()).collect()
}

fn random_sequences(rng: &mut ChaCha8Rng, n: usize, d_model: usize, vocab: usize) -> Vec<SequenceSample> {
    (0..n)
        .map(|_| {
            let c = RoleCounts::random(rng, 6);
            random_sequence_sample(rng, c, d_model, vocab)
        })
        .collect()
}

fn max_abs(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn run_suites(config: &RunConfig, run: &Loaded) -> Result<Vec<SuiteResult>, CliError> {
    let v = &config.verify;
    let ck = &run.checkpoint;
    let params = &ck.encoder;
    let gamma = ck.train_config.gamma;
    let (train, held_out) = split(&run.trained_with, &run.corpus);
    let train_samples: Vec<TrainingSample> = trajectory_samples(&run.corpus, &train);
    let seed = config.seed.unwrap_or(0);
    let wants = |s: &str| v.suites.iter().any(|x| x == s);
    let mut out = Vec::new();

    if wants("occupancy") || wants("ranking") {
        let res = occupancy_residuals(params, &run.corpus, &train_samples, gamma)?;
        if wants("occupancy") {
            let worst = res.iter().map(|r| r.residual_std).fold(0.0, f64::max);
            out.push(suite(
                "occupancy",
                worst < v.residual_std_max,
                worst,
                v.residual_std_max,
                format!("max per-goal std of (critic - log Q) {worst:.4} over {} goals (< {})", res.len(), v.residual_std_max),
            ));
        }
        if wants("ranking") {
            let worst = res.iter().map(|r| r.spearman).fold(f64::INFINITY, f64::min);
            out.push(suite(
                "ranking",
                worst >= v.min_spearman,
                worst,
                v.min_spearman,
                format!("min per-goal Spearman(critic, Q) {worst:.4} (>= {})", v.min_spearman),
            ));
        }
    }

    if wants("goal_discrimination") {
        let (eval, which) = if held_out.is_empty() {
            (train_samples.clone(), "training")
        } else {
            (trajectory_samples(&run.corpus, &held_out), "held-out")
        };
        let acc = goal_discrimination(params, &eval, &params.goal_ids)?;
        out.push(suite(
            "goal_discrimination",
            acc >= v.min_discrimination,
            acc,
            v.min_discrimination,
            format!("top-1 goal accuracy {acc:.3} on {} {which} samples (>= {})", eval.len(), v.min_discrimination),
        ));
    }

    if wants("gradient") {
        let batch: Vec<BatchSample> = spread(&train_samples, v.gradient_batch).into_iter().map(|s| s.crl).collect();
        let report = finite_diff_check(params, &batch, &ck.train_config.objective(), v.gradient_step, 200, seed)?;
        let mut worst = report.max_relative_error;
        let mut detail = format!("encoder max rel err {:.1e} over {} coords", worst, report.coords_checked);
        if let Some(flow) = &ck.flow {
            let data = flow_examples(&run.corpus, &train, &params.goal_ids, flow.model.horizon);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tuples: Vec<FmTuple> = spread(&data, 8)
                .into_iter()
                .map(|ex| FmTuple {
                    eps: Array2::from_shape_fn(ex.clean.values.dim(), |_| rng.random_range(-1.0..1.0)),
                    tau: rng.random(),
                    clean: ex.clean,
                    condition: ex.condition,
                })
                .collect();
            let mut model = flow.model.clone();
            let x = model.to_flat();
            let (_, grad) = fm_batch_loss(&model, &tuples)?;
            let fr = central_difference_check(&x, &grad, v.gradient_step, Some(200), seed, |p| {
                model.assign_flat(p);
                fm_batch_loss(&model, &tuples).map(|(l, _)| l).unwrap_or(f64::NAN)
            });
            worst = worst.max(fr.max_relative_error);
            let _ = write!(detail, ", flow head {:.1e}", fr.max_relative_error);
        }
        out.push(suite("gradient", worst < v.gradient_tol, worst, v.gradient_tol, format!("{detail} (< {:e})", v.gradient_tol)));
    }

    if wants("isolation") {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x150);
        let (mut worst, mut ok) = (0.0f64, true);
        for k in 0..v.isolation_sequences {
            let n = rng.random_range(1..5);
            let samples = random_sequences(&mut rng, n, 16, 7);
            let seq = pack(&samples, 1000)?.remove(0);
            let attn = AttentionParams::random(16, 2, 8, 7, seed + k as u64);
            let mask = build_mask(&seq)?;
            let dense = dense_attention(&seq, &mask, &attn)?;
            let (sparse, _) = block_sparse_attention(&seq, &mask, &attn, 4)?;
            worst = worst.max(max_abs(&dense, &sparse));
            let report = isolation_check(&seq, &attn, seed + k as u64)?;
            ok &= report.passed() && report.forbidden_pairs.is_empty();
            worst = report.rules.iter().map(|r| r.max_diff).fold(worst, f64::max).max(report.bc_loss_diff);
        }
        out.push(suite(
            "isolation",
            ok && worst <= ISOLATION_TOL,
            worst,
            ISOLATION_TOL,
            format!("{} sequences: max output change under forbidden perturbations / sparse-vs-dense {worst:.1e} (<= {ISOLATION_TOL:e})", v.isolation_sequences),
        ));
    }

    if wants("packing") {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9ac);
        let mut worst: f64 = 0.0;
        for k in 0..v.packing_batches {
            let n = rng.random_range(2..8);
            let samples = random_sequences(&mut rng, n, 12, 5);
            let attn = AttentionParams::random(12, 2, 6, 5, seed + 100 + k as u64);
            worst = worst.max(packing_loss_diff(&samples, 64, &attn)?);
        }
        out.push(suite(
            "packing",
            worst <= ISOLATION_TOL,
            worst,
            ISOLATION_TOL,
            format!("{} batches: max per-sample BC loss change packed vs alone {worst:.1e} (<= {ISOLATION_TOL:e})", v.packing_batches),
        ));
    }

    if wants("shard") {
        let batch: Vec<BatchSample> = spread(&train_samples, v.shard_batch).into_iter().map(|s| s.crl).collect();
        let goals = {
            let mut g: Vec<GoalId> = batch.iter().map(|s| s.goal_id).collect();
            g.sort_unstable();
            g.dedup();
            g.len()
        };
        let objective = ck.train_config.objective();
        let (mut worst, mut ok, mut tried) = (0.0f64, true, Vec::new());
        for &n in v.shard_counts.iter().filter(|&&n| n >= 1 && n <= batch.len()) {
            let plan = ShardPlan::contiguous(batch.len(), n)?;
            let r = shard_report(params, &batch, &objective, &plan)?;
            worst = worst.max(r.max_grad_diff).max(r.loss_diff);
            ok &= r.negatives_per_anchor + 1 == goals;
            tried.push(n.to_string());
        }
        out.push(suite(
            "shard",
            ok && worst <= 1e-10 && !tried.is_empty(),
            worst,
            1e-10,
            format!(
                "B={}, shards {}: max |sharded - monolithic| {worst:.1e} (<= 1e-10), negatives per anchor = G-1: {ok}",
                batch.len(),
                tried.join("/")
            ),
        ));
    }
    Ok(out)
}

pub fn cmd_verify(config: &RunConfig, run_dir: &Path, checkpoint: &Path, corpus: Option<&Path>) -> Result<(), CliError> {
    let run = load_run(checkpoint, corpus, config)?;
    let results = run_suites(config, &run)?;
    write_json(&run_dir.join("verify_report.json"), &results)?;
    for r in &results {
        println!("suite {:<20} {} {}", r.suite, if r.passed { "PASS" } else { "FAIL" }, r.detail);
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.suite.as_str()).collect();
    if failed.is_empty() {
        println!("all {} suites passed", results.len());
        Ok(())
    } else {
        Err(CliError::Verification(failed.join(", ")))
    }
}

pub struct CurveRequest {
    pub trajectory: Option<usize>,
    pub correct: Option<u32>,
    pub wrong: Option<u32>,
}

pub fn cmd_value_curve(
    config: &RunConfig,
    run_dir: &Path,
    checkpoint: &Path,
    corpus: Option<&Path>,
    req: &CurveRequest,
) -> Result<(), CliError> {
    let run = load_run(checkpoint, corpus, config)?;
    let corpus = &run.corpus;
    let traj = match req.trajectory {
        Some(i) => corpus
            .trajectories
            .get(i)
            .cloned()
            .ok_or_else(|| CliError::Validation(format!("trajectory {i} out of range (corpus has {})", corpus.trajectories.len())))?,
        None => split(&run.trained_with, corpus)
            .1
            .into_iter()
            .next()
            .or_else(|| corpus.trajectories.first().cloned())
            .ok_or_else(|| CliError::Validation("corpus has no trajectories".into()))?,
    };
    let goals = &run.checkpoint.encoder.goal_ids;
    let correct = req.correct.map(GoalId).unwrap_or(traj.goal_id);
    let wrong = match req.wrong {
        Some(g) => GoalId(g),
        None => *goals
            .iter()
            .find(|&&g| g != correct)
            .ok_or_else(|| CliError::Validation("need a second goal for the comparison curve".into()))?,
    };
    let curve = value_curve(&run.checkpoint.encoder, corpus, &traj, correct, wrong)?;
    let mut csv = String::from("t,score_correct,score_wrong\n");
    for p in &curve {
        let _ = writeln!(csv, "{},{:e},{:e}", p.t, p.score_correct, p.score_wrong);
    }
    fs::write(run_dir.join("value_curve.csv"), csv)?;
    let label_c = format!("goal {} (correct)", correct.0);
    let label_w = format!("goal {} (wrong)", wrong.0);
    let svg = line_plot(
        "critic value along trajectory",
        "t",
        "psi^T phi",
        &[
            Series {
                label: &label_c,
                color: "#2a9d3a",
                points: curve.iter().map(|p| (p.t as f64, p.score_correct)).collect(),
            },
            Series {
                label: &label_w,
                color: "#c0392b",
                points: curve.iter().map(|p| (p.t as f64, p.score_wrong)).collect(),
            },
        ],
    );
    fs::write(run_dir.join("value_curve.svg"), svg)?;
    println!(
        "{} timesteps, correct {} vs wrong {}: correct >= wrong everywhere and rising: {}",
        curve.len(),
        correct.0,
        wrong.0,
        value_curve_holds(&curve)
    );
    Ok(())
}

pub fn cmd_bench(config: &RunConfig, run_dir: &Path) -> Result<(), CliError> {
    let records = mask_bench(&config.bench)?;
    let mut csv = String::from("impl,seq_len,block_size,median_ns,skipped_fraction\n");
    for r in &records {
        let _ = writeln!(csv, "{},{},{},{},{}", r.implementation, r.seq_len, r.block_size, r.median_ns, r.skipped_fraction);
        println!(
            "{:<28} len {:>6}  median {:>12} ns  skipped {:>5.1}%",
            r.implementation,
            r.seq_len,
            r.median_ns,
            100.0 * r.skipped_fraction
        );
    }
    fs::write(run_dir.join("timings.csv"), csv)?;
    write_json(&run_dir.join("timings.json"), &records)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct SampleRecord {
    state: usize,
    goal: GoalId,
    steps: usize,
    seed: u64,
    chunk: Vec<Vec<f64>>,
    actions: Vec<usize>,
    expert_action: Option<usize>,
}

pub fn cmd_sample(
    config: &RunConfig,
    run_dir: &Path,
    checkpoint: &Path,
    state: usize,
    goal: u32,
    steps: Option<usize>,
) -> Result<(), CliError> {
    let run = load_run(checkpoint, None, config)?;
    let flow = run
        .checkpoint
        .flow
        .as_ref()
        .ok_or_else(|| CliError::Validation("checkpoint has no flow head (train with flow.enabled=true)".into()))?;
    let goal = GoalId(goal);
    let goals = &run.checkpoint.encoder.goal_ids;
    if !goals.contains(&goal) {
        return Err(CliError::Validation(format!("{goal} is not in the checkpoint")));
    }
    if state >= run.corpus.mdp.num_states() {
        return Err(CliError::Validation(format!("state {state} out of range")));
    }
    let steps = steps.unwrap_or(flow.config.sample_steps);
    let seed = config.seed.unwrap_or(0);
    let cond = flow_condition(&run.corpus, goals, state, goal);
    let chunk = sample(&flow.model, &cond, steps, seed)?;
    let actions: Vec<usize> = chunk
        .values
        .rows()
        .into_iter()
        .map(|r| (0..r.len()).fold(0, |best, a| if r[a] > r[best] { a } else { best }))
        .collect();
    let record = SampleRecord {
        state,
        goal,
        steps,
        seed,
        chunk: chunk.values.rows().into_iter().map(|r| r.to_vec()).collect(),
        actions,
        expert_action: run.corpus.expert().action(state, goal),
    };
    write_json(&run_dir.join("sample.json"), &record)?;
    for (h, row) in record.chunk.iter().enumerate() {
        let vals: Vec<String> = row.iter().map(|v| format!("{v:+.3}")).collect();
        println!("h={h}  [{}]  argmax {}", vals.join(", "), record.actions[h]);
    }
    println!("expert action at state {state}: {:?}", record.expert_action);
    Ok(())
}
