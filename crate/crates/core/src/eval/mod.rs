//! Measurement suite: six inference settings, pass@k, CoT entropy
//! profiles and per-token NLL on a multiple-choice set.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{KvCache, ModelParams, Temperature};
use crate::rollout::{generate, pass_k_sampler, GenMode, RolloutConfig, StepRecord, Trajectory};
use crate::seed;
use crate::tasks::{McItem, TaskExample, Verdict};

pub const PASS_KS: [usize; 6] = [1, 2, 4, 8, 16, 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SettingName {
    HardGreedy,
    HardSample,
    SoftGreedy,
    SoftSample,
    FuzzyGreedy,
    FuzzySample,
}

impl SettingName {
    pub const ALL: [SettingName; 6] = [
        SettingName::HardGreedy,
        SettingName::HardSample,
        SettingName::SoftGreedy,
        SettingName::SoftSample,
        SettingName::FuzzyGreedy,
        SettingName::FuzzySample,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SettingName::HardGreedy => "hard_greedy",
            SettingName::HardSample => "hard_sample",
            SettingName::SoftGreedy => "soft_greedy",
            SettingName::SoftSample => "soft_sample",
            SettingName::FuzzyGreedy => "fuzzy_greedy",
            SettingName::FuzzySample => "fuzzy_sample",
        }
    }

    pub fn is_greedy(self) -> bool {
        matches!(
            self,
            SettingName::HardGreedy | SettingName::SoftGreedy | SettingName::FuzzyGreedy
        )
    }

    pub fn mode(self) -> GenMode {
        match self {
            SettingName::HardGreedy | SettingName::HardSample => GenMode::Hard,
            SettingName::SoftGreedy | SettingName::SoftSample => GenMode::Soft,
            SettingName::FuzzyGreedy | SettingName::FuzzySample => GenMode::Fuzzy,
        }
    }

    /// Rollout config for this setting; budgets, marker and noise site come
    /// from `base`, `sigma` is the noise std of the sampled soft settings.
    pub fn rollout(self, base: &RolloutConfig, sigma: f64) -> RolloutConfig {
        let mode = self.mode();
        let tau = match self {
            SettingName::HardGreedy => Temperature::GREEDY,
            SettingName::HardSample => Temperature::ONE,
            _ => mode.default_temperature(),
        };
        let sigma = if mode.is_continuous() && !self.is_greedy() { sigma } else { 0.0 };
        RolloutConfig {
            mode,
            cot_temperature: tau,
            sigma,
            ..base.clone()
        }
    }
}

/// `1 - C(n-c, k) / C(n, k)`: the chance that a uniformly drawn size-`k`
/// subset of `n` samples with `c` correct contains a correct one.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64> {
    if k == 0 || k > n {
        return Err(Error::TooFewSamples { got: n, need: k.max(1) });
    }
    if c > n {
        return Err(Error::InvalidConfig(format!("{c} correct out of {n}")));
    }
    if n - c < k {
        return Ok(1.0);
    }
    // log of prod_{i<k} (n-c-i)/(n-i)
    let log_ratio: f64 = (0..k).map(|i| ((n - c - i) as f64 / (n - i) as f64).ln()).sum();
    Ok(1.0 - log_ratio.exp())
}

/// Raw pass@k: whether any of the first `k` samples is correct.
pub fn pass_at_k_raw(correct: &[bool], k: usize) -> Result<f64> {
    if k == 0 || k > correct.len() {
        return Err(Error::TooFewSamples {
            got: correct.len(),
            need: k.max(1),
        });
    }
    Ok(correct[..k].iter().any(|&c| c) as u8 as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassKMode {
    #[default]
    Unbiased,
    Raw,
}

/// Which distribution a step's entropy is taken over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyBasis {
    /// The model's untempered next-token distribution.
    #[default]
    Model,
    /// The tempered (and noised) distribution the step actually used.
    Generation,
}

impl EntropyBasis {
    pub fn of(self, step: &StepRecord) -> f64 {
        match self {
            EntropyBasis::Model => step.model_entropy(),
            EntropyBasis::Generation => crate::model::entropy(&step.p),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub position: usize,
    pub mean_entropy: f64,
    pub n_alive: usize,
}

/// Mean entropy at each CoT position over the trajectories that reached
/// it; positions nobody reached are omitted.
pub fn entropy_profile(trajectories: &[&Trajectory], max_pos: usize, basis: EntropyBasis) -> Vec<ProfilePoint> {
    let mut sums = vec![0.0; max_pos];
    let mut alive = vec![0usize; max_pos];
    for t in trajectories {
        for (pos, step) in t.cot_steps.iter().take(max_pos).enumerate() {
            sums[pos] += basis.of(step);
            alive[pos] += 1;
        }
    }
    (0..max_pos)
        .filter(|&p| alive[p] > 0)
        .map(|p| ProfilePoint {
            position: p,
            mean_entropy: sums[p] / alive[p] as f64,
            n_alive: alive[p],
        })
        .collect()
}

/// Per-token log-probabilities of `completion` after `prompt`, teacher
/// forced at temperature 1.
pub fn completion_logprobs(params: &ModelParams, prompt: &[usize], completion: &[usize]) -> Result<Vec<f64>> {
    if prompt.is_empty() {
        return Err(Error::EmptyQuestion);
    }
    if completion.is_empty() {
        return Ok(Vec::new());
    }
    let mut cache = KvCache::new(params.config().layers);
    let mut ids = prompt.to_vec();
    ids.extend_from_slice(&completion[..completion.len() - 1]);
    let h = params.forward_stack(&params.embed_tokens(&ids)?, &mut cache)?;
    let first = prompt.len() - 1;
    completion
        .iter()
        .enumerate()
        .map(|(j, &tok)| {
            let mut logp = params.decode_logits(h.row_slice(first + j));
            let max = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logp.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            logp.iter_mut().for_each(|v| *v -= lse);
            Ok(logp[tok])
        })
        .collect()
}

/// Mean over items of the per-token NLL of the correct continuation.
pub fn nll_correct(params: &ModelParams, items: &[McItem]) -> Result<f64> {
    let per_item: Vec<Option<f64>> = items
        .par_iter()
        .map(|it| {
            if it.correct.is_empty() {
                return Ok(None);
            }
            let lp = completion_logprobs(params, &it.prompt_ids, &it.correct)?;
            Ok(Some(-lp.iter().sum::<f64>() / lp.len() as f64))
        })
        .collect::<Result<_>>()?;
    let skipped = per_item.iter().filter(|v| v.is_none()).count();
    if skipped > 0 {
        log::warn!("skipped {skipped} items with an empty continuation");
    }
    let vals: Vec<f64> = per_item.into_iter().flatten().collect();
    if vals.is_empty() {
        return Err(Error::TooFewSamples { got: 0, need: 1 });
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Fraction of items whose correct continuation has the highest mean
/// per-token log-probability among the choices.
pub fn mc_accuracy(params: &ModelParams, items: &[McItem]) -> Result<f64> {
    let hits = items
        .par_iter()
        .map(|it| {
            let score = |c: &[usize]| -> Result<f64> {
                let lp = completion_logprobs(params, &it.prompt_ids, c)?;
                Ok(lp.iter().sum::<f64>() / lp.len().max(1) as f64)
            };
            let right = score(&it.correct)?;
            let mut best_wrong = f64::NEG_INFINITY;
            for d in &it.distractors {
                best_wrong = best_wrong.max(score(d)?);
            }
            Ok((right > best_wrong) as usize)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / items.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub setting: SettingName,
    /// `(k, pass@k)` for every `k` in [`PASS_KS`] not above the sample count.
    pub pass_at: Vec<(usize, f64)>,
    pub entropy_profile: Vec<ProfilePoint>,
    pub nll_correct: Option<f64>,
    /// Rollouts per item (1 for greedy settings).
    pub n_samples: usize,
    /// Mean share of exactly correct rollouts.
    pub mean_success: f64,
}

impl MetricsRecord {
    pub fn pass(&self, k: usize) -> Option<f64> {
        self.pass_at.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Rollouts per item in sampled settings.
    pub samples: usize,
    pub pass_k_mode: PassKMode,
    pub entropy_basis: EntropyBasis,
    /// Test items evaluated (0 = all).
    pub test_size: usize,
    pub mc_distractors: usize,
    /// Derived from the experiment root seed, not read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 32,
            pass_k_mode: PassKMode::Unbiased,
            entropy_basis: EntropyBasis::Model,
            test_size: 0,
            mc_distractors: 3,
            seed: 0,
        }
    }
}

/// Runs one setting over the test items.
pub fn run_setting(
    params: &ModelParams,
    test: &[TaskExample],
    setting: SettingName,
    base: &RolloutConfig,
    sigma: f64,
    cfg: &EvalConfig,
) -> Result<MetricsRecord> {
    let rcfg = setting.rollout(base, sigma);
    let n = if setting.is_greedy() { 1 } else { cfg.samples };
    if n == 0 {
        return Err(Error::TooFewSamples { got: 0, need: 1 });
    }
    let run_seed = seed::substream(cfg.seed, "eval", &[setting as u64]);
    let per_item: Vec<Vec<(Trajectory, bool)>> = test
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            if n == 1 {
                let mut rng = crate::rollout::trajectory_rng(run_seed, i as u64, 0);
                let t = generate(params, &ex.prompt_ids, &rcfg, &mut rng)?;
                let ok = t.verdict(&ex.label) == Verdict::Exact;
                Ok(vec![(t, ok)])
            } else {
                Ok(pass_k_sampler(params, &ex.prompt_ids, &ex.label, &rcfg, n, run_seed, i as u64)?
                    .into_iter()
                    .map(|s| {
                        let ok = s.verdict == Verdict::Exact;
                        (s.trajectory, ok)
                    })
                    .collect())
            }
        })
        .collect::<Result<_>>()?;

    let items = per_item.len().max(1) as f64;
    let mut pass_at = Vec::new();
    for &k in PASS_KS.iter() {
        // greedy rollouts are deterministic, so every k repeats pass@1
        let kk = if n == 1 { 1 } else { k };
        if kk > n {
            continue;
        }
        let mut total = 0.0;
        for samples in &per_item {
            let correct: Vec<bool> = samples.iter().map(|(_, ok)| *ok).collect();
            total += match cfg.pass_k_mode {
                PassKMode::Unbiased => pass_at_k(n, correct.iter().filter(|c| **c).count(), kk)?,
                PassKMode::Raw => pass_at_k_raw(&correct, kk)?,
            };
        }
        pass_at.push((k, total / items));
    }
    let mean_success = per_item
        .iter()
        .map(|s| s.iter().filter(|(_, ok)| *ok).count() as f64 / s.len() as f64)
        .sum::<f64>()
        / items;
    let all: Vec<&Trajectory> = per_item.iter().flatten().map(|(t, _)| t).collect();
    Ok(MetricsRecord {
        setting,
        pass_at,
        entropy_profile: entropy_profile(&all, base.max_cot, cfg.entropy_basis),
        nll_correct: None,
        n_samples: n,
        mean_success,
    })
}

/// All six settings; greedy settings once per item, sampled settings
/// `cfg.samples` times per item.
pub fn run_suite(
    params: &ModelParams,
    test: &[TaskExample],
    mc: &[McItem],
    base: &RolloutConfig,
    sigma: f64,
    cfg: &EvalConfig,
) -> Result<Vec<MetricsRecord>> {
    let test = if cfg.test_size == 0 {
        test
    } else {
        &test[..cfg.test_size.min(test.len())]
    };
    let nll = if mc.is_empty() { None } else { Some(nll_correct(params, mc)?) };
    SettingName::ALL
        .iter()
        .map(|&s| {
            let mut rec = run_setting(params, test, s, base, sigma, cfg)?;
            rec.nll_correct = nll;
            Ok(rec)
        })
        .collect()
}

/// `metrics.csv` (setting,k,value) and one `entropy_<setting>.csv`
/// (position,mean_entropy,n_alive) per setting.
pub fn write_csvs(dir: &Path, records: &[MetricsRecord]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut metrics = String::from("setting,k,value\n");
    for r in records {
        for (k, v) in &r.pass_at {
            writeln!(metrics, "{},{k},{v}", r.setting.as_str()).expect("string write");
        }
    }
    std::fs::write(dir.join("metrics.csv"), metrics)?;
    for r in records {
        let mut csv = String::from("position,mean_entropy,n_alive\n");
        for p in &r.entropy_profile {
            writeln!(csv, "{},{},{}", p.position, p.mean_entropy, p.n_alive).expect("string write");
        }
        std::fs::write(dir.join(format!("entropy_{}.csv", r.setting.as_str())), csv)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rollout::NoisePlacement;
    use crate::tensor::softmax_in_place;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn binom(n: usize, k: usize) -> f64 {
        (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
    }

    #[test]
    fn pass_at_k_examples() {
        assert_eq!(pass_at_k(32, 0, 5).unwrap(), 0.0);
        assert_eq!(pass_at_k(32, 32, 5).unwrap(), 1.0);
        assert!((pass_at_k(5, 2, 2).unwrap() - 0.7).abs() < 1e-15);
        assert!((pass_at_k(5, 2, 2).unwrap() - (1.0 - binom(3, 2) / binom(5, 2))).abs() < 1e-15);
        assert!(pass_at_k(3, 1, 4).is_err());
        assert!(pass_at_k(3, 1, 0).is_err());
    }

    #[test]
    fn raw_mode() {
        assert_eq!(pass_at_k_raw(&[false, true, false], 1).unwrap(), 0.0);
        assert_eq!(pass_at_k_raw(&[false, true, false], 2).unwrap(), 1.0);
        assert!(pass_at_k_raw(&[true], 2).is_err());
    }

    fn softmax(logits: &[f64]) -> Vec<f64> {
        let mut p = logits.to_vec();
        softmax_in_place(&mut p);
        p
    }

    fn step(logits: Vec<f64>) -> StepRecord {
        StepRecord {
            p: softmax(&logits),
            logits,
            shadow_id: 0,
            hard_id: Some(0),
            input: None,
            noise: None,
        }
    }

    fn traj(steps: Vec<StepRecord>) -> Trajectory {
        Trajectory {
            prompt_ids: vec![1],
            mode: GenMode::Hard,
            cot_temperature: Temperature::ONE,
            sigma: 0.0,
            cot_steps: steps,
            stopped_early: false,
            prefilled: vec![],
            answer_ids: vec![],
        }
    }

    #[test]
    fn entropy_degenerate_cases() {
        let v = 40;
        let mut one_hot = vec![f64::NEG_INFINITY; v];
        one_hot[3] = 0.0;
        let a = traj(vec![step(one_hot.clone()), step(one_hot)]);
        let b = traj(vec![step(vec![0.0; v]); 3]);
        for basis in [EntropyBasis::Model, EntropyBasis::Generation] {
            let prof = entropy_profile(&[&a], 5, basis);
            assert_eq!(prof.len(), 2);
            assert!(prof.iter().all(|p| p.mean_entropy == 0.0));
            let prof = entropy_profile(&[&b], 5, basis);
            assert!(prof.iter().all(|p| (p.mean_entropy - (v as f64).ln()).abs() < 1e-12));
        }
        let both = entropy_profile(&[&a, &b], 5, EntropyBasis::Model);
        assert_eq!(both.iter().map(|p| p.n_alive).collect::<Vec<_>>(), vec![2, 2, 1]);
        assert!((both[0].mean_entropy - (v as f64).ln() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn nll_of_uniform_model_is_log_v() {
        let cfg = ModelConfig {
            vocab_size: 40,
            embed_dim: 8,
            layers: 1,
            heads: 2,
            mlp_ratio: 2,
            max_seq_len: 16,
        };
        let mut m = ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let w = m.names().iter().position(|n| n == "w_dec").unwrap();
        m.tensors_mut()[w].data_mut().iter_mut().for_each(|x| *x = 0.0);
        let item = McItem {
            prompt_ids: vec![1, 5, 6],
            correct: vec![7, 8, 2],
            distractors: vec![],
        };
        let nll = nll_correct(&m, &[item]).unwrap();
        assert!((nll - 40f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn settings_are_configured_as_named() {
        let base = RolloutConfig::new(GenMode::Soft);
        let s = 0.4;
        let hg = SettingName::HardGreedy.rollout(&base, s);
        assert_eq!((hg.mode, hg.cot_temperature.value(), hg.sigma), (GenMode::Hard, 0.0, 0.0));
        let hs = SettingName::HardSample.rollout(&base, s);
        assert_eq!(hs.cot_temperature.value(), 1.0);
        let sg = SettingName::SoftGreedy.rollout(&base, s);
        assert_eq!((sg.cot_temperature.value(), sg.sigma), (0.5, 0.0));
        let ss = SettingName::SoftSample.rollout(&base, s);
        assert_eq!((ss.cot_temperature.value(), ss.sigma), (0.5, s));
        let fs = SettingName::FuzzySample.rollout(&base, s);
        assert_eq!((fs.cot_temperature.value(), fs.sigma, fs.placement), (1e-4, s, NoisePlacement::Embedding));
        let fg = SettingName::FuzzyGreedy.rollout(&base, s);
        assert_eq!(fg.sigma, 0.0);
    }
}
