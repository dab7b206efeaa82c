//! Supervised warm start: teaches a freshly initialized model the answer
//! format so that RL starts from a model that sometimes earns reward.
//!
//! By default most demonstrations show a slipped value, so the base model
//! can compute the answer but prefers a wrong one, and the draft inputs are
//! noised so the base tolerates soft and fuzzy rollouts.

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{rms_embedding_norm, ModelParams, ParamVars};
use crate::seed;
use crate::tasks::vocab::ANS_OPEN;
use crate::tasks::{demonstration, Label, TaskExample};
use crate::tensor::{Graph, Tensor, Var};

use super::objective::zero_gradients;
use super::optim::{clip_grad_norm, AdamW, LrSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarmStartConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Probability that a demonstration shows a slipped value instead of
    /// the label: `label + slip` for numbers, the opposite for yes/no.
    pub slip_rate: f64,
    pub slip: i64,
    /// Gaussian noise on the draft input rows, as a multiple of the RMS
    /// embedding-row norm, so the model learns to read noisy drafts.
    pub draft_noise: f64,
    /// Derived from the experiment root seed, not read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for WarmStartConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 16,
            lr: 3e-3,
            slip_rate: 0.85,
            slip: 1,
            draft_noise: 0.33,
            seed: 0,
        }
    }
}

/// Sum of teacher-forced log-probabilities of `completion` after `prompt`.
pub fn completion_logprob(
    g: &mut Graph,
    pv: &ParamVars,
    params: &ModelParams,
    prompt: &[usize],
    completion: &[usize],
) -> Result<Var> {
    noisy_completion_logprob(g, pv, params, prompt, completion, None)
}

/// As [`completion_logprob`], with an optional constant added to the input
/// rows.
fn noisy_completion_logprob(
    g: &mut Graph,
    pv: &ParamVars,
    params: &ModelParams,
    prompt: &[usize],
    completion: &[usize],
    input_noise: Option<Tensor>,
) -> Result<Var> {
    if prompt.is_empty() || completion.is_empty() {
        return Err(Error::InvalidConfig("empty prompt or completion".into()));
    }
    let e = pv.0[params.layout().tok_emb];
    let mut ids = prompt.to_vec();
    ids.extend_from_slice(&completion[..completion.len() - 1]);
    let mut h0 = g.gather_rows(e, &ids)?;
    if let Some(noise) = input_noise {
        let c = g.constant(noise);
        h0 = g.add(h0, c)?;
    }
    let hl = params.forward_graph(g, pv, h0)?;
    let rows: Vec<usize> = (prompt.len() - 1..ids.len()).collect();
    let h = g.select_rows(hl, &rows)?;
    let logits = params.logits_graph(g, pv, h)?;
    let logp = g.log_softmax_rows(logits)?;
    let coords: Vec<(usize, usize)> = completion.iter().copied().enumerate().collect();
    let picked = g.pick(logp, &coords)?;
    Ok(g.sum(picked))
}

/// Minimizes the mean per-token NLL of demonstrations (draft value, stop
/// marker, answer span). Returns the per-step mean NLL.
pub fn warm_start(params: &mut ModelParams, examples: &[TaskExample], cfg: &WarmStartConfig) -> Result<Vec<f64>> {
    if cfg.steps == 0 {
        return Ok(Vec::new());
    }
    if examples.len() < cfg.batch || cfg.batch == 0 {
        return Err(Error::InvalidConfig(format!(
            "warm start batch {} with {} examples",
            cfg.batch,
            examples.len()
        )));
    }
    if !(0.0..=1.0).contains(&cfg.slip_rate) {
        return Err(Error::InvalidConfig(format!("slip_rate {} outside [0, 1]", cfg.slip_rate)));
    }
    if !(cfg.draft_noise >= 0.0) {
        return Err(Error::InvalidConfig("draft_noise must be >= 0".into()));
    }
    let d = params.config().embed_dim;
    let clean: Vec<Vec<usize>> = examples.iter().map(|ex| demonstration(&ex.label)).collect::<Result<_>>()?;
    let slipped: Vec<Vec<usize>> = examples
        .iter()
        .map(|ex| {
            demonstration(&match ex.label {
                Label::Number(n) => Label::Number(n + cfg.slip),
                Label::YesNo(b) => Label::YesNo(!b),
            })
        })
        .collect::<Result<_>>()?;
    let mut opt = AdamW::new(params.tensors(), 0.9, 0.999, 0.01);
    let sched = LrSchedule {
        peak: cfg.lr,
        warmup: (cfg.steps / 10).min(20),
        total: cfg.steps,
    };
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = seed::rng(cfg.seed, "warm_start", &[step as u64]);
        let picks: Vec<(usize, bool)> = index::sample(&mut rng, examples.len(), cfg.batch)
            .into_iter()
            .map(|i| (i, rng.random_bool(cfg.slip_rate)))
            .collect();
        let p: &ModelParams = params;
        let sigma = cfg.draft_noise * rms_embedding_norm(p.embedding());
        let parts = picks
            .par_iter()
            .enumerate()
            .map(|(k, &(i, slip))| {
                let demo = if slip { &slipped[i] } else { &clean[i] };
                let prompt = &examples[i].prompt_ids;
                let noise = (sigma > 0.0)
                    .then(|| {
                        // draft = everything before the answer-open token
                        let draft = demo.iter().position(|&t| t == ANS_OPEN).unwrap_or(0);
                        let rows = prompt.len() + demo.len() - 1;
                        let mut data = vec![0.0; rows * d];
                        let mut nrng = seed::rng(cfg.seed, "warm_start_noise", &[step as u64, k as u64]);
                        for x in &mut data[prompt.len() * d..(prompt.len() + draft) * d] {
                            *x = sigma * nrng.sample::<f64, _>(StandardNormal);
                        }
                        Tensor::new(vec![rows, d], data)
                    })
                    .transpose()?;
                let mut g = Graph::new();
                let pv = ParamVars::register(&mut g, p);
                let lp = noisy_completion_logprob(&mut g, &pv, p, prompt, demo, noise)?;
                let n = demo.len() as f64;
                Ok((g.value(lp).item() / n, n, g.backward(lp)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut grads = zero_gradients(params);
        let mut nll = 0.0;
        for (lp, n, g) in &parts {
            nll -= lp;
            grads.add_scaled(g, -1.0 / (n * cfg.batch as f64));
        }
        clip_grad_norm(&mut grads, 1.0);
        opt.step(params.tensors_mut(), &grads, sched.at(step));
        history.push(nll / cfg.batch as f64);
    }
    Ok(history)
}
