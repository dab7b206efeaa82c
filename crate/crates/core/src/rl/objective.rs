//! Log-likelihood of a stored trajectory under the current parameters and
//! the advantage-weighted surrogate loss built on it.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{ModelParams, ParamVars};
use crate::rollout::{generate, trajectory_rng, GenMode, NoisePlacement, RolloutConfig, Trajectory};
use crate::tensor::{grad_check, Differentiable, GradCheckReport, Gradients, Graph, Tensor, Var};

use super::RewardedGroup;

/// Differentiable `log pi(trajectory)` with the Gaussian normalization
/// constant dropped.
///
/// The sequence is teacher-forced: stored soft inputs are constants, hard
/// CoT tokens and answer tokens are embedded with the live `E`. Hard CoT
/// steps contribute their token log-probabilities at the sampling
/// temperature; soft and fuzzy steps contribute
/// `-|noisy - clean(theta)|^2 / (2 sigma^2)` at their noise site. Answer
/// tokens contribute untempered log-probabilities. Prefilled tokens are fed
/// but not scored.
pub fn traj_logprob(g: &mut Graph, pv: &ParamVars, params: &ModelParams, traj: &Trajectory) -> Result<Var> {
    let lay = params.layout();
    let e = pv.0[lay.tok_emb];
    let w_dec = pv.0[lay.w_dec];
    let d = params.config().embed_dim;
    let p_len = traj.prompt_ids.len();
    let t_len = traj.cot_steps.len();
    let f_len = traj.prefilled.len();
    let a_len = traj.answer_ids.len();
    if p_len == 0 {
        return Err(Error::EmptyQuestion);
    }

    // inputs: prompt, CoT rows, prefill, all answer tokens but the last
    let mut parts = vec![g.gather_rows(e, &traj.prompt_ids)?];
    match traj.mode {
        GenMode::Hard => {
            let ids = traj
                .cot_steps
                .iter()
                .map(|s| s.hard_id.ok_or_else(|| Error::ConfigMismatch("hard step without a token".into())))
                .collect::<Result<Vec<_>>>()?;
            if !ids.is_empty() {
                parts.push(g.gather_rows(e, &ids)?);
            }
        }
        GenMode::Soft | GenMode::Fuzzy => {
            if t_len > 0 {
                let mut data = Vec::with_capacity(t_len * d);
                for s in &traj.cot_steps {
                    let row = s
                        .input
                        .as_ref()
                        .ok_or_else(|| Error::ConfigMismatch("soft step without an input row".into()))?;
                    data.extend_from_slice(row);
                }
                parts.push(g.constant(Tensor::new(vec![t_len, d], data)?));
            }
        }
    }
    let mut tail: Vec<usize> = traj.prefilled.clone();
    tail.extend_from_slice(&traj.answer_ids[..a_len.saturating_sub(1)]);
    if !tail.is_empty() {
        parts.push(g.gather_rows(e, &tail)?);
    }
    let h0 = g.concat_rows(&parts)?;
    let hl = params.forward_graph(g, pv, h0)?;

    let mut terms = Vec::with_capacity(2);
    if t_len > 0 {
        let cot_rows: Vec<usize> = (p_len - 1..p_len - 1 + t_len).collect();
        terms.push(cot_term(g, hl, e, w_dec, traj, &cot_rows)?);
    }
    if a_len > 0 {
        let first = p_len + t_len + f_len - 1;
        let rows: Vec<usize> = (first..first + a_len).collect();
        let h = g.select_rows(hl, &rows)?;
        let logits = g.matmul(h, w_dec)?;
        let logp = g.log_softmax_rows(logits)?;
        let coords: Vec<(usize, usize)> = traj.answer_ids.iter().copied().enumerate().collect();
        let picked = g.pick(logp, &coords)?;
        terms.push(g.sum(picked));
    }
    if terms.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    Ok(g.sum_all(&terms)?)
}

fn cot_term(g: &mut Graph, hl: Var, e: Var, w_dec: Var, traj: &Trajectory, rows: &[usize]) -> Result<Var> {
    let tau = traj.cot_temperature.value();
    let t_len = rows.len();
    if traj.mode == GenMode::Hard {
        if tau == 0.0 {
            return Err(Error::DegenerateDensity("greedy hard CoT has no log-probability".into()));
        }
        let h = g.select_rows(hl, rows)?;
        let logits = g.matmul(h, w_dec)?;
        let logits = g.scale(logits, 1.0 / tau);
        let logp = g.log_softmax_rows(logits)?;
        let coords: Vec<(usize, usize)> = traj
            .cot_steps
            .iter()
            .enumerate()
            .map(|(t, s)| (t, s.hard_id.expect("checked above")))
            .collect();
        let picked = g.pick(logp, &coords)?;
        return Ok(g.sum(picked));
    }

    if !(traj.sigma > 0.0) {
        return Err(Error::DegenerateDensity(format!(
            "{} CoT with sigma = {}",
            traj.mode.name(),
            traj.sigma
        )));
    }
    let noise: Vec<_> = traj
        .cot_steps
        .iter()
        .map(|s| s.noise.as_ref().ok_or_else(|| Error::ConfigMismatch("soft step without noise record".into())))
        .collect::<Result<_>>()?;
    let placement = noise[0].placement;
    if noise.iter().any(|n| n.placement != placement) {
        return Err(Error::ConfigMismatch("mixed noise placements in one trajectory".into()));
    }
    let width = noise[0].noisy.len();
    let mut noisy = Vec::with_capacity(t_len * width);
    for n in &noise {
        if n.noisy.len() != width {
            return Err(Error::ConfigMismatch("ragged noise records".into()));
        }
        noisy.extend_from_slice(&n.noisy);
    }

    let h = g.select_rows(hl, rows)?;
    let clean = match placement {
        NoisePlacement::Embedding => {
            if tau == 0.0 {
                return Err(Error::DegenerateDensity("soft CoT at temperature 0".into()));
            }
            let logits = g.matmul(h, w_dec)?;
            let logits = g.scale(logits, 1.0 / tau);
            let p = g.softmax_rows(logits)?;
            g.matmul(p, e)?
        }
        NoisePlacement::FinalHidden => h,
        NoisePlacement::Logits => g.matmul(h, w_dec)?,
        NoisePlacement::LogitsTopK(_) => {
            let logits = g.matmul(h, w_dec)?;
            let mut coords = Vec::with_capacity(t_len * width);
            for (t, n) in noise.iter().enumerate() {
                let support = n
                    .support
                    .as_ref()
                    .ok_or_else(|| Error::ConfigMismatch("top-k step without support".into()))?;
                coords.extend(support.iter().map(|&i| (t, i)));
            }
            g.pick(logits, &coords)?
        }
    };
    let shape = g.value(clean).shape().to_vec();
    let target = g.constant(Tensor::new(shape, noisy)?);
    let diff = g.sub(clean, target)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum(sq);
    Ok(g.scale(total, -1.0 / (2.0 * traj.sigma * traj.sigma)))
}

/// Value of [`traj_logprob`] without recording gradients.
pub fn traj_logprob_value(params: &ModelParams, traj: &Trajectory) -> Result<f64> {
    let mut g = Graph::new();
    let pv = ParamVars::constants(&mut g, params);
    let v = traj_logprob(&mut g, &pv, params, traj)?;
    Ok(g.value(v).item())
}

fn check_compatible(groups: &[RewardedGroup], expected: Option<&RolloutConfig>) -> Result<usize> {
    let mut count = 0;
    for grp in groups {
        if grp.trajectories.len() != grp.advantages.len() {
            return Err(Error::ConfigMismatch("advantages do not match trajectories".into()));
        }
        for t in &grp.trajectories {
            if let Some(cfg) = expected {
                if t.mode != cfg.mode
                    || t.cot_temperature != cfg.cot_temperature
                    || (t.mode.is_continuous() && t.sigma != cfg.sigma)
                {
                    return Err(Error::ConfigMismatch(format!(
                        "trajectory ({}, tau {}, sigma {}) vs config ({}, tau {}, sigma {})",
                        t.mode.name(),
                        t.cot_temperature.value(),
                        t.sigma,
                        cfg.mode.name(),
                        cfg.cot_temperature.value(),
                        cfg.sigma
                    )));
                }
            }
            count += 1;
        }
    }
    Ok(count)
}

/// `-(1/(BG)) sum A * log pi(traj)` recorded on one graph.
pub fn rloo_loss_graph(g: &mut Graph, pv: &ParamVars, params: &ModelParams, groups: &[RewardedGroup]) -> Result<Var> {
    let n = check_compatible(groups, None)?;
    let mut terms = Vec::with_capacity(n);
    for grp in groups {
        for (t, &a) in grp.trajectories.iter().zip(&grp.advantages) {
            let l = traj_logprob(g, pv, params, t)?;
            terms.push(g.scale(l, -a / n as f64));
        }
    }
    if terms.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    Ok(g.sum_all(&terms)?)
}

/// Loss value and gradient, one graph per trajectory in parallel.
/// Trajectories with zero advantage are skipped: their contribution to
/// both is exactly zero.
pub fn rloo_loss(
    params: &ModelParams,
    groups: &[RewardedGroup],
    expected: Option<&RolloutConfig>,
) -> Result<(f64, Gradients)> {
    let n = check_compatible(groups, expected)?;
    let items: Vec<(&Trajectory, f64)> = groups
        .iter()
        .flat_map(|grp| grp.trajectories.iter().zip(grp.advantages.iter().copied()))
        .filter(|(_, a)| *a != 0.0)
        .collect();
    let parts: Vec<(f64, f64, Gradients)> = items
        .par_iter()
        .map(|&(t, a)| {
            let mut g = Graph::new();
            let pv = ParamVars::register(&mut g, params);
            let l = traj_logprob(&mut g, &pv, params, t)?;
            let grads = g.backward(l)?;
            Ok((a, g.value(l).item(), grads))
        })
        .collect::<Result<_>>()?;

    let mut total = zero_gradients(params);
    let mut loss = 0.0;
    for (a, l, grads) in &parts {
        let w = -a / n.max(1) as f64;
        loss += w * l;
        total.add_scaled(grads, w);
    }
    Ok((loss, total))
}

pub(crate) fn zero_gradients(params: &ModelParams) -> Gradients {
    let mut g = Gradients::default();
    for (i, t) in params.tensors().iter().enumerate() {
        g.insert(i, Tensor::new(t.shape().to_vec(), vec![0.0; t.numel()]).expect("shape"));
    }
    g
}

/// The surrogate loss as a function of the raw parameter tensors, for
/// finite-difference checking.
pub struct RlooObjective<'a> {
    pub params: &'a ModelParams,
    pub groups: &'a [RewardedGroup],
}

impl Differentiable for RlooObjective<'_> {
    type Error = Error;

    fn value(&self, tensors: &[Tensor]) -> Result<f64> {
        let p = self.params.with_tensors(tensors.to_vec())?;
        let mut g = Graph::new();
        let pv = ParamVars::constants(&mut g, &p);
        let loss = rloo_loss_graph(&mut g, &pv, &p, self.groups)?;
        Ok(g.value(loss).item())
    }

    fn gradient(&self, tensors: &[Tensor]) -> Result<Gradients> {
        let p = self.params.with_tensors(tensors.to_vec())?;
        Ok(rloo_loss(&p, self.groups, None)?.1)
    }
}

/// Finite-difference check of the surrogate loss on `rewards.len()`
/// rollouts from `prompt`. Trajectory `i` uses rng stream `(seed, i)`.
pub fn check_rloo_gradient(
    params: &ModelParams,
    prompt: &[usize],
    cfg: &RolloutConfig,
    rewards: &[f64],
    seed: u64,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let trajectories = (0..rewards.len())
        .map(|i| generate(params, prompt, cfg, &mut trajectory_rng(seed, 0, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let groups = vec![RewardedGroup::new(0, trajectories, rewards.to_vec())?];
    let obj = RlooObjective { params, groups: &groups };
    grad_check(&obj, params.tensors(), step, tolerance)
}
