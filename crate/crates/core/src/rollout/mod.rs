//! Chain-of-thought and answer generation in hard, soft and fuzzy modes.
//!
//! A rollout feeds the prompt, then produces up to `max_cot` reasoning
//! steps. Hard steps sample a token and feed its embedding; soft and fuzzy
//! steps feed the mixture embedding `p E` of the tempered next-token
//! distribution, perturbed by Gaussian noise at the configured site. The
//! argmax of each step forms a shadow sequence used only to detect the stop
//! marker. The answer is then decoded greedily after a short prefill.

mod noise;

pub use noise::{inject_noise, top_k_indices, NoisePlacement};

use std::io::Write;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{entropy, next_token_probs, KvCache, ModelParams, Temperature};
use crate::seed;
use crate::tasks::vocab::{ANS_OPEN, EOS_ANSWER, STOP_MARKER};
use crate::tasks::{verify, Label, Verdict, Vocab};
use crate::tensor::{argmax, softmax_in_place, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenMode {
    Hard,
    Soft,
    Fuzzy,
}

impl GenMode {
    pub fn default_temperature(self) -> Temperature {
        let tau = match self {
            GenMode::Hard => 1.0,
            GenMode::Soft => 0.5,
            GenMode::Fuzzy => 1e-4,
        };
        Temperature::new(tau).expect("positive")
    }

    pub fn is_continuous(self) -> bool {
        self != GenMode::Hard
    }

    pub fn name(self) -> &'static str {
        match self {
            GenMode::Hard => "hard",
            GenMode::Soft => "soft",
            GenMode::Fuzzy => "fuzzy",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub mode: GenMode,
    pub cot_temperature: Temperature,
    /// Absolute noise standard deviation; ignored in hard mode.
    pub sigma: f64,
    pub placement: NoisePlacement,
    pub max_cot: usize,
    pub max_answer: usize,
    pub stop_marker: Vec<usize>,
}

impl RolloutConfig {
    pub fn new(mode: GenMode) -> Self {
        Self {
            mode,
            cot_temperature: mode.default_temperature(),
            sigma: 0.0,
            placement: NoisePlacement::Embedding,
            max_cot: 12,
            max_answer: 6,
            stop_marker: STOP_MARKER.to_vec(),
        }
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn with_temperature(mut self, tau: Temperature) -> Self {
        self.cot_temperature = tau;
        self
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::InvalidConfig(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if self.max_cot == 0 || self.max_answer == 0 {
            return Err(Error::InvalidConfig("max_cot and max_answer must be >= 1".into()));
        }
        if self.stop_marker.is_empty() {
            return Err(Error::InvalidConfig("stop_marker is empty".into()));
        }
        if let Some(&id) = self.stop_marker.iter().find(|&&id| id >= vocab) {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
        if let NoisePlacement::LogitsTopK(k) = self.placement {
            if k == 0 || k > vocab {
                return Err(Error::TopKTooLarge { k, vocab });
            }
        }
        if self.mode == GenMode::Fuzzy && self.cot_temperature.value() > 0.1 {
            log::warn!(
                "fuzzy mode at temperature {} behaves like soft mode",
                self.cot_temperature.value()
            );
        }
        Ok(())
    }

    /// Positions a rollout may occupy beyond the prompt.
    pub fn positions_needed(&self) -> usize {
        self.max_cot + self.stop_marker.len() + 1 + self.max_answer
    }
}

/// Where a step's noise was drawn, with the clean and perturbed values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepNoise {
    pub placement: NoisePlacement,
    /// Clean value at the noise site: `p E` for the embedding site, the
    /// final hidden row, or the logits (restricted to `support` for top-k).
    pub clean: Vec<f64>,
    pub noisy: Vec<f64>,
    pub support: Option<Vec<usize>>,
    /// Seed of the per-step Gaussian stream: `noisy - clean = sigma * eps`
    /// with `eps` the first `clean.len()` standard normals of
    /// `ChaCha8Rng::seed_from_u64(seed)`.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Next-token distribution after temperature (and logit noise).
    pub p: Vec<f64>,
    /// Clean logits at this step, before any noise or temperature.
    pub logits: Vec<f64>,
    pub shadow_id: usize,
    /// Sampled token; hard mode only.
    pub hard_id: Option<usize>,
    /// Row fed as the next input; soft and fuzzy modes only.
    pub input: Option<Vec<f64>>,
    pub noise: Option<StepNoise>,
}

impl StepRecord {
    /// `p E` for the embedding site, if this step has one.
    pub fn clean_h0(&self) -> Option<&[f64]> {
        self.noise
            .as_ref()
            .filter(|n| n.placement == NoisePlacement::Embedding)
            .map(|n| n.clean.as_slice())
    }

    pub fn noisy_h0(&self) -> Option<&[f64]> {
        self.noise
            .as_ref()
            .filter(|n| n.placement == NoisePlacement::Embedding)
            .map(|n| n.noisy.as_slice())
    }

    /// Entropy of the untempered model distribution at this step.
    pub fn model_entropy(&self) -> f64 {
        let mut p = self.logits.clone();
        softmax_in_place(&mut p);
        entropy(&p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt_ids: Vec<usize>,
    pub mode: GenMode,
    pub cot_temperature: Temperature,
    pub sigma: f64,
    pub cot_steps: Vec<StepRecord>,
    pub stopped_early: bool,
    pub prefilled: Vec<usize>,
    pub answer_ids: Vec<usize>,
}

impl Trajectory {
    pub fn shadow(&self) -> Vec<usize> {
        self.cot_steps.iter().map(|s| s.shadow_id).collect()
    }

    /// Prefill followed by the generated answer; what the verifier reads.
    pub fn completion(&self) -> Vec<usize> {
        let mut ids = self.prefilled.clone();
        ids.extend_from_slice(&self.answer_ids);
        ids
    }

    pub fn verdict(&self, label: &Label) -> Verdict {
        verify(&self.completion(), label)
    }
}

pub fn check_stop(shadow_ids: &[usize], stop_marker: &[usize]) -> bool {
    !stop_marker.is_empty() && shadow_ids.ends_with(stop_marker)
}

/// Inverse-CDF draw from `p`; mass lost to rounding goes to the last
/// nonzero entry.
pub fn sample_categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in p.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// One rollout. `rng` drives hard sampling and the per-step noise seeds.
pub fn generate<R: RngCore>(
    params: &ModelParams,
    prompt_ids: &[usize],
    cfg: &RolloutConfig,
    rng: &mut R,
) -> Result<Trajectory> {
    let mcfg = params.config();
    cfg.validate(mcfg.vocab_size)?;
    if prompt_ids.is_empty() {
        return Err(Error::EmptyQuestion);
    }
    let needed = prompt_ids.len() + cfg.positions_needed();
    if needed > mcfg.max_seq_len {
        return Err(Error::SequenceOverflow {
            len: needed,
            max: mcfg.max_seq_len,
        });
    }

    let mut cache = KvCache::new(mcfg.layers);
    let prompt_out = params.forward_stack(&params.embed_tokens(prompt_ids)?, &mut cache)?;
    let mut h = prompt_out.row_slice(prompt_out.rows() - 1).to_vec();
    let mut steps = Vec::with_capacity(cfg.max_cot);
    let mut shadow = Vec::with_capacity(cfg.max_cot);
    let mut stopped_early = false;
    let tau = cfg.cot_temperature;

    for _ in 0..cfg.max_cot {
        check_finite(&h, "final hidden state")?;
        let logits = params.decode_logits(&h);
        let (record, row) = if cfg.mode == GenMode::Hard {
            let p = next_token_probs(&logits, tau)?;
            let id = if tau.is_zero() {
                argmax(&p)
            } else {
                sample_categorical(&p, rng)
            };
            let row = params.embedding().row_slice(id).to_vec();
            let rec = StepRecord {
                shadow_id: id,
                hard_id: Some(id),
                p,
                logits,
                input: None,
                noise: None,
            };
            (rec, row)
        } else {
            continuous_step(params, cfg, &h, logits, rng)?
        };
        shadow.push(record.shadow_id);
        steps.push(record);
        let out = params.forward_stack(&Tensor::row(row), &mut cache)?;
        h = out.row_slice(0).to_vec();
        if check_stop(&shadow, &cfg.stop_marker) {
            stopped_early = true;
            break;
        }
    }

    let mut prefilled = Vec::new();
    if !stopped_early {
        prefilled.extend_from_slice(&cfg.stop_marker);
    }
    prefilled.push(ANS_OPEN);
    let out = params.forward_stack(&params.embed_tokens(&prefilled)?, &mut cache)?;
    h = out.row_slice(out.rows() - 1).to_vec();

    let mut answer_ids = Vec::with_capacity(cfg.max_answer);
    for i in 0..cfg.max_answer {
        check_finite(&h, "final hidden state")?;
        let id = argmax(&params.decode_logits(&h));
        answer_ids.push(id);
        if id == EOS_ANSWER || i + 1 == cfg.max_answer {
            break;
        }
        let out = params.forward_stack(&params.embed_tokens(&[id])?, &mut cache)?;
        h = out.row_slice(0).to_vec();
    }

    Ok(Trajectory {
        prompt_ids: prompt_ids.to_vec(),
        mode: cfg.mode,
        cot_temperature: tau,
        sigma: cfg.sigma,
        cot_steps: steps,
        stopped_early,
        prefilled,
        answer_ids,
    })
}

fn continuous_step<R: RngCore>(
    params: &ModelParams,
    cfg: &RolloutConfig,
    h: &[f64],
    logits: Vec<f64>,
    rng: &mut R,
) -> Result<(StepRecord, Vec<f64>)> {
    let tau = cfg.cot_temperature;
    let noise_seed = rng.next_u64();
    let mut eps_rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let e = params.embedding();

    let (p, row, noise) = match cfg.placement {
        NoisePlacement::Embedding => {
            let p = next_token_probs(&logits, tau)?;
            let clean = params.embed_distribution(&p)?.into_data();
            let noisy = inject_noise(&clean, cfg.sigma, &mut eps_rng);
            let n = StepNoise {
                placement: cfg.placement,
                clean,
                noisy: noisy.clone(),
                support: None,
                seed: noise_seed,
            };
            (p, noisy, n)
        }
        NoisePlacement::FinalHidden => {
            let noisy_h = inject_noise(h, cfg.sigma, &mut eps_rng);
            let p = next_token_probs(&params.decode_logits(&noisy_h), tau)?;
            let row = params.embed_distribution(&p)?.into_data();
            let n = StepNoise {
                placement: cfg.placement,
                clean: h.to_vec(),
                noisy: noisy_h,
                support: None,
                seed: noise_seed,
            };
            (p, row, n)
        }
        NoisePlacement::Logits | NoisePlacement::LogitsTopK(_) => {
            let support = match cfg.placement {
                NoisePlacement::LogitsTopK(k) => top_k_indices(&logits, k),
                _ => (0..logits.len()).collect(),
            };
            let clean: Vec<f64> = support.iter().map(|&i| logits[i]).collect();
            let noisy = inject_noise(&clean, cfg.sigma, &mut eps_rng);
            let mut full = vec![f64::NEG_INFINITY; logits.len()];
            for (&i, &v) in support.iter().zip(&noisy) {
                full[i] = v;
            }
            let p = next_token_probs(&full, tau)?;
            let row = params.embed_distribution(&p)?.into_data();
            let n = StepNoise {
                placement: cfg.placement,
                clean,
                noisy,
                support: matches!(cfg.placement, NoisePlacement::LogitsTopK(_)).then_some(support),
                seed: noise_seed,
            };
            (p, row, n)
        }
    };
    debug_assert_eq!(row.len(), e.cols());
    check_finite(&row, "soft input row")?;
    let rec = StepRecord {
        shadow_id: argmax(&p),
        hard_id: None,
        p,
        logits,
        input: Some(row.clone()),
        noise: Some(noise),
    };
    Ok((rec, row))
}

/// Rollout stream for one trajectory of a run.
pub fn trajectory_rng(root: u64, prompt_index: u64, sample_index: u64) -> ChaCha8Rng {
    seed::rng(root, "rollout", &[prompt_index, sample_index])
}

#[derive(Clone, Debug)]
pub struct Sampled {
    pub trajectory: Trajectory,
    pub verdict: Verdict,
}

/// `n` independent rollouts of one prompt, in parallel; sample `i` uses
/// the stream `(seed, prompt_index, i)`.
pub fn pass_k_sampler(
    params: &ModelParams,
    prompt_ids: &[usize],
    label: &Label,
    cfg: &RolloutConfig,
    n: usize,
    seed: u64,
    prompt_index: u64,
) -> Result<Vec<Sampled>> {
    if n == 0 {
        return Err(Error::TooFewSamples { got: 0, need: 1 });
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = trajectory_rng(seed, prompt_index, i as u64);
            let trajectory = generate(params, prompt_ids, cfg, &mut rng)?;
            let verdict = trajectory.verdict(label);
            Ok(Sampled { trajectory, verdict })
        })
        .collect()
}

/// Compact per-trajectory record for offline inspection.
#[derive(Clone, Debug, Serialize)]
pub struct DumpRecord<'a> {
    pub prompt: String,
    pub mode: GenMode,
    pub shadow: Vec<usize>,
    pub shadow_text: String,
    pub stopped_early: bool,
    pub answer: String,
    pub reward: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<&'a Label>,
}

pub fn dump_record<'a>(traj: &Trajectory, label: Option<&'a Label>, reward: Option<f64>) -> DumpRecord<'a> {
    let shadow = traj.shadow();
    DumpRecord {
        prompt: Vocab.decode_lossy(&traj.prompt_ids),
        mode: traj.mode,
        shadow_text: Vocab.decode_lossy(&shadow),
        shadow,
        stopped_early: traj.stopped_early,
        answer: Vocab.decode_lossy(&traj.completion()),
        reward,
        label,
    }
}

pub fn write_dump(path: &Path, records: &[DumpRecord<'_>]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}
