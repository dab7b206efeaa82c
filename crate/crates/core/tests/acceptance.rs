//! Acceptance suite. Prints one line per criterion and exits non-zero if a
//! gated criterion fails. Criterion 7 is reported, never gated.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use softcot::eval::{entropy_profile, pass_at_k, EntropyBasis, MetricsRecord, SettingName};
use softcot::experiment::{evaluate, prepare_base, run_training, Base, ExperimentConfig};
use softcot::model::{entropy, rms_embedding_norm, ModelConfig, ModelParams, Temperature};
use softcot::rl::{check_rloo_gradient, loo_advantages, rloo_loss, train, RewardedGroup, TrainOutcome};
use softcot::rollout::{generate, GenMode, RolloutConfig, Trajectory};
use softcot::tasks::format_prompt;

struct Report {
    gated_failures: usize,
}

impl Report {
    fn line(&mut self, id: &str, pass: bool, text: String) {
        println!("[{}] {id}: {text}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.gated_failures += 1;
        }
    }

    fn info(&self, id: &str, holds: bool, text: String) {
        println!("[REPORT] {id}: {} {text}", if holds { "holds" } else { "does not hold" });
    }
}

fn acceptance_model(seed: u64) -> ModelParams {
    let cfg = ModelConfig {
        vocab_size: 40,
        embed_dim: 32,
        layers: 2,
        heads: 4,
        mlp_ratio: 4,
        max_seq_len: 48,
    };
    ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn random_prompt(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let a: u32 = rng.random_range(10..100);
    let b: u32 = rng.random_range(10..100);
    format_prompt(&format!("{a}+{b}")).unwrap()
}

fn gradient_oracle(r: &mut Report) {
    let t0 = Instant::now();
    let m = acceptance_model(7);
    let sigma = 0.33 * rms_embedding_norm(m.embedding());
    let prompt = format_prompt("12+34").unwrap();
    let mut errs = Vec::new();
    for mode in [GenMode::Soft, GenMode::Fuzzy] {
        let mut cfg = RolloutConfig::new(mode).with_sigma(sigma);
        cfg.max_cot = 4;
        cfg.max_answer = 3;
        let rep = check_rloo_gradient(&m, &prompt, &cfg, &[100.0, 0.0], 3, 1e-5, 1e-4).unwrap();
        errs.push((mode.name(), rep.max_relative_error));
    }
    let secs = t0.elapsed().as_secs_f64();
    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    r.line(
        "1 gradient oracle",
        worst < 1e-4 && secs < 300.0,
        format!(
            "max relative error {} {:.2e}, {} {:.2e} (< 1e-4); {secs:.0} s (< 300 s)",
            errs[0].0, errs[0].1, errs[1].0, errs[1].1
        ),
    );
}

fn loo_identity(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let g = rng.random_range(2..=64);
        let rewards: Vec<f64> = (0..g).map(|_| rng.random_range(-100.0..100.0)).collect();
        let sum: f64 = loo_advantages(&rewards).unwrap().iter().sum();
        worst = worst.max(sum.abs());
    }
    let m = acceptance_model(3);
    let cfg = RolloutConfig::new(GenMode::Fuzzy).with_sigma(0.2);
    let prompt = random_prompt(&mut rng);
    let trajs: Vec<Trajectory> = (0..4)
        .map(|i| generate(&m, &prompt, &cfg, &mut ChaCha8Rng::seed_from_u64(i)).unwrap())
        .collect();
    let group = RewardedGroup::new(0, trajs, vec![100.0; 4]).unwrap();
    let (_, grads) = rloo_loss(&m, &[group], Some(&cfg)).unwrap();
    let zero = grads.iter().all(|(_, g)| g.data().iter().all(|&x| x == 0.0));
    r.line(
        "2 LOO identity",
        worst <= 1e-9 && zero,
        format!("max |sum A| {worst:.1e} over 1000 vectors (<= 1e-9); constant-reward gradient exactly zero: {zero}"),
    );
}

/// Fuzzy rollouts without noise against hard greedy ones. At the limit
/// temperature 0 they must agree exactly. At the fuzzy temperature 1e-4 a
/// pair may only diverge if some step's distribution was not exactly one-hot
/// (top two logits within a few multiples of the temperature).
fn continuity(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut limit_same = 0;
    let mut same = 0;
    let mut near_tie_divergent = 0;
    for i in 0..100u64 {
        let m = acceptance_model(100 + i);
        let prompt = random_prompt(&mut rng);
        let hard = RolloutConfig::new(GenMode::Hard).with_temperature(Temperature::GREEDY);
        let h = generate(&m, &prompt, &hard, &mut ChaCha8Rng::seed_from_u64(i)).unwrap();
        let hard_ids: Vec<usize> = h.cot_steps.iter().filter_map(|s| s.hard_id).collect();
        let agrees = |f: &Trajectory| hard_ids == f.shadow() && h.completion() == f.completion();

        let limit = RolloutConfig::new(GenMode::Fuzzy)
            .with_sigma(0.0)
            .with_temperature(Temperature::GREEDY);
        limit_same += agrees(&generate(&m, &prompt, &limit, &mut ChaCha8Rng::seed_from_u64(i + 1)).unwrap()) as usize;

        let fuzzy = RolloutConfig::new(GenMode::Fuzzy).with_sigma(0.0);
        let f = generate(&m, &prompt, &fuzzy, &mut ChaCha8Rng::seed_from_u64(i + 1)).unwrap();
        if agrees(&f) {
            same += 1;
        } else if f.cot_steps.iter().any(|s| s.p.iter().all(|&x| x != 1.0)) {
            near_tie_divergent += 1;
        }
    }
    r.line(
        "3 continuity",
        limit_same == 100 && same + near_tie_divergent == 100,
        format!(
            "temperature 0: {limit_same}/100 pairs token-identical; temperature 1e-4: {same}/100 identical, {near_tie_divergent} diverged after a near-tied step (not one-hot at 1e-4), {} unexplained",
            100 - same - near_tie_divergent
        ),
    );
}

fn pass_k_oracle(r: &mut Report) {
    let mut worst: f64 = 0.0;
    for n in 1..=10usize {
        for c in 0..=n {
            for k in 1..=n {
                let mut hits = 0usize;
                let mut total = 0usize;
                for subset in 0u32..(1 << n) {
                    if subset.count_ones() as usize == k {
                        total += 1;
                        hits += (subset & ((1u32 << c) - 1) != 0) as usize;
                    }
                }
                let exact = hits as f64 / total as f64;
                worst = worst.max((pass_at_k(n, c, k).unwrap() - exact).abs());
            }
        }
    }
    r.line(
        "4 pass@k oracle",
        worst <= 1e-12,
        format!("max deviation from subset enumeration {worst:.1e} over n <= 10 (<= 1e-12)"),
    );
}

fn entropy_bounds(r: &mut Report, records: &[MetricsRecord]) {
    let v = 40usize;
    let ln_v = (v as f64).ln();
    let mut one_hot = vec![0.0; v];
    one_hot[3] = 1.0;
    let h_one_hot = entropy(&one_hot);
    let h_uniform = entropy(&vec![1.0 / v as f64; v]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = acceptance_model(5);
    let mut trajs = Vec::new();
    for (i, mode) in [GenMode::Hard, GenMode::Soft, GenMode::Fuzzy].into_iter().enumerate() {
        let cfg = RolloutConfig::new(mode).with_sigma(0.3);
        for j in 0..20u64 {
            let prompt = random_prompt(&mut rng);
            trajs.push(generate(&m, &prompt, &cfg, &mut ChaCha8Rng::seed_from_u64(i as u64 * 100 + j)).unwrap());
        }
    }
    let refs: Vec<&Trajectory> = trajs.iter().collect();
    let mut values: Vec<f64> = Vec::new();
    for basis in [EntropyBasis::Model, EntropyBasis::Generation] {
        values.extend(entropy_profile(&refs, 12, basis).iter().map(|p| p.mean_entropy));
    }
    values.extend(records.iter().flat_map(|r| r.entropy_profile.iter().map(|p| p.mean_entropy)));
    let in_range = values.iter().all(|&h| (0.0..=ln_v + 1e-12).contains(&h));
    r.line(
        "5 entropy bounds",
        h_one_hot == 0.0 && (h_uniform - ln_v).abs() < 1e-12 && in_range,
        format!(
            "one-hot {h_one_hot}, uniform {h_uniform:.12} vs ln V {ln_v:.12}; {} reported values all in [0, ln V]: {in_range}",
            values.len()
        ),
    );
}

fn run_mode(base: &Base, cfg: &ExperimentConfig, mode: GenMode) -> (TrainOutcome, f64) {
    let cfg = cfg
        .with_overrides(&[format!("rollout.mode=\"{}\"", mode.name())])
        .unwrap();
    let t0 = Instant::now();
    let out = train(
        base.params.clone(),
        &base.data.train,
        &base.data.val,
        &cfg.train,
        &cfg.rollout.build(),
        None,
        false,
    )
    .unwrap();
    (out, t0.elapsed().as_secs_f64())
}

fn learning_config() -> ExperimentConfig {
    ExperimentConfig::from_toml(
        "",
        &["train.total_steps=2000".into(), "train.stop_at_success=0.9".into()],
    )
    .unwrap()
}

fn end_to_end(r: &mut Report) -> (ExperimentConfig, Base, Vec<(GenMode, TrainOutcome)>) {
    let cfg = learning_config();
    let t0 = Instant::now();
    let base = prepare_base(&cfg).unwrap();
    let base_secs = t0.elapsed().as_secs_f64();
    println!(
        "        base: {} warm-start steps in {base_secs:.0} s, final NLL {:.3}",
        cfg.warm_start.steps,
        base.warm_start_nll.last().copied().unwrap_or(f64::NAN)
    );
    let mut outcomes = Vec::new();
    for (mode, target) in [(GenMode::Hard, 0.8), (GenMode::Soft, 0.7), (GenMode::Fuzzy, 0.7)] {
        let (out, secs) = run_mode(&base, &cfg, mode);
        let start = out.initial_success();
        let best = out.best_success();
        let steps = out.log.len();
        r.line(
            &format!("6 end-to-end learning ({})", mode.name()),
            start < 0.1 && best > target && steps <= 2000 && base_secs + secs < 1800.0,
            format!(
                "greedy validation {start:.3} -> {best:.3} at step {} (start < 0.10, target > {target:.2}); {steps} steps, {secs:.0} s + {base_secs:.0} s warm start (< 1800 s)",
                out.best_step
            ),
        );
        outcomes.push((mode, out));
    }
    (cfg, base, outcomes)
}

fn setting<'a>(records: &'a [MetricsRecord], s: SettingName) -> &'a MetricsRecord {
    records.iter().find(|r| r.setting == s).unwrap()
}

fn directional(r: &Report, cfg: &ExperimentConfig, base: &Base, outcomes: &[(GenMode, TrainOutcome)]) -> Vec<MetricsRecord> {
    let eval_cfg = cfg
        .with_overrides(&["eval.test_size=100".into(), "eval.samples=32".into()])
        .unwrap();
    let mut all = Vec::new();
    let mut pass32 = Vec::new();
    let mut soft_records = Vec::new();
    for (mode, out) in outcomes {
        let recs = evaluate(&eval_cfg, &out.best, &base.data, None).unwrap();
        let p = setting(&recs, SettingName::HardSample).pass(32).unwrap();
        println!(
            "        {}-trained: {}",
            mode.name(),
            recs.iter()
                .map(|x| format!("{} p@1 {:.3} p@32 {:.3}", x.setting.as_str(), x.pass(1).unwrap(), x.pass(32).unwrap()))
                .collect::<Vec<_>>()
                .join(", ")
        );
        pass32.push((*mode, p));
        if *mode == GenMode::Soft {
            soft_records = recs.clone();
        }
        all.extend(recs);
    }
    let hard = pass32[0].1;
    r.info(
        "7a soft/fuzzy pass@32 >= hard pass@32 (hard sampling, test)",
        pass32[1].1 >= hard && pass32[2].1 >= hard,
        format!("hard {:.3}, soft {:.3}, fuzzy {:.3}", hard, pass32[1].1, pass32[2].1),
    );
    let hg = setting(&soft_records, SettingName::HardGreedy).pass(1).unwrap();
    let sg = setting(&soft_records, SettingName::SoftGreedy).pass(1).unwrap();
    let hs = setting(&soft_records, SettingName::HardSample).pass(1).unwrap();
    let ss = setting(&soft_records, SettingName::SoftSample).pass(1).unwrap();
    r.info(
        "7b hard inference >= soft inference on the soft-trained model",
        hg >= sg && hs >= ss,
        format!("greedy pass@1 hard {hg:.3} vs soft {sg:.3}; sampled pass@1 hard {hs:.3} vs soft {ss:.3}"),
    );

    let mut cells = Vec::new();
    for gamma in ["0.33", "1.0", "3.0"] {
        let c = cfg
            .with_overrides(&[
                "rollout.mode=\"fuzzy\"".into(),
                format!("train.noise_scale={gamma}"),
                "train.total_steps=300".into(),
                "train.stop_at_success=1.1".into(),
            ])
            .unwrap();
        let out = train(
            base.params.clone(),
            &base.data.train,
            &base.data.val,
            &c.train,
            &c.rollout.build(),
            None,
            false,
        )
        .unwrap();
        cells.push((gamma, out.best_success()));
    }
    let low = cells[0].1.min(cells[1].1);
    r.info(
        "7c noise scale 3.0 degrades validation vs <= 1.0 (fuzzy, 300 steps)",
        cells[2].1 < low,
        cells
            .iter()
            .map(|(g, v)| format!("gamma {g}: best {v:.3}"))
            .collect::<Vec<_>>()
            .join(", "),
    );
    all
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    for name in ["train_log.jsonl", "validation.jsonl"] {
        files.push((name.into(), std::fs::read(dir.join(name)).unwrap()));
    }
    for entry in std::fs::read_dir(dir.join("eval")).unwrap() {
        let p = entry.unwrap().path();
        files.push((
            p.file_name().unwrap().to_string_lossy().into_owned(),
            std::fs::read(&p).unwrap(),
        ));
    }
    files.sort();
    files
}

fn reproducibility(r: &mut Report) {
    let tmp = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for i in 0..2 {
        let dir = tmp.path().join(format!("run{i}"));
        let cfg = ExperimentConfig::from_toml(
            "seed = 11\n",
            &[
                format!("output_dir=\"{}\"", dir.display()),
                "warm_start.steps=60".into(),
                "train.total_steps=30".into(),
                "train.validation_every=10".into(),
                "train.validation_size=40".into(),
                "train.checkpoint_every=15".into(),
                "rollout.mode=\"soft\"".into(),
                "eval.test_size=20".into(),
                "eval.samples=8".into(),
            ],
        )
        .unwrap();
        let (base, out) = run_training(&cfg, None, false).unwrap();
        evaluate(&cfg, &out.best, &base.data, Some(&dir.join("eval"))).unwrap();
        runs.push(read_all(&dir));
    }
    let identical = runs[0] == runs[1];
    r.line(
        "8 reproducibility",
        identical,
        format!(
            "{} log/CSV files byte-identical across two runs: {identical}",
            runs[0].len()
        ),
    );
}

fn main() -> ExitCode {
    let mut r = Report { gated_failures: 0 };
    loo_identity(&mut r);
    continuity(&mut r);
    pass_k_oracle(&mut r);
    gradient_oracle(&mut r);
    let (cfg, base, outcomes) = end_to_end(&mut r);
    let records = directional(&r, &cfg, &base, &outcomes);
    entropy_bounds(&mut r, &records);
    reproducibility(&mut r);
    if r.gated_failures == 0 {
        println!("acceptance: all gated criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {} gated criteria failed", r.gated_failures);
        ExitCode::FAILURE
    }
}
