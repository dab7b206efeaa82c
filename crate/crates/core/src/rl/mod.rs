//! REINFORCE with a leave-one-out baseline over hard, soft and fuzzy
//! chains of thought.

mod objective;
mod optim;
mod train;
mod warm_start;

pub use objective::{check_rloo_gradient, rloo_loss, rloo_loss_graph, traj_logprob, traj_logprob_value, RlooObjective};
pub use optim::{clip_grad_norm, AdamW, LrSchedule};
pub use train::{greedy_config, greedy_success, latest_state, train, StepLog, TrainOutcome, TrainState, ValPoint};
pub use warm_start::{completion_logprob, warm_start, WarmStartConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rollout::Trajectory;
use crate::tasks::{verify, Label, Verdict};

/// Reward tiers on the final answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSpec {
    pub exact: f64,
    pub format: f64,
    pub zero: f64,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self {
            exact: 100.0,
            format: 10.0,
            zero: 0.0,
        }
    }
}

impl RewardSpec {
    pub fn for_verdict(&self, v: Verdict) -> f64 {
        match v {
            Verdict::Exact => self.exact,
            Verdict::FormatOnly => self.format,
            Verdict::None => self.zero,
        }
    }
}

pub fn compute_reward(answer_ids: &[usize], label: &Label, spec: &RewardSpec) -> f64 {
    spec.for_verdict(verify(answer_ids, label))
}

/// `A_g = r_g - mean_{j != g} r_j`.
pub fn loo_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    let g = rewards.len();
    if g < 2 {
        return Err(Error::TooFewSamples { got: g, need: 2 });
    }
    let total: f64 = rewards.iter().sum();
    let others = (g - 1) as f64;
    Ok(rewards.iter().map(|&r| r - (total - r) / others).collect())
}

/// One prompt's samples with their rewards and (stop-gradient) advantages.
#[derive(Clone, Debug)]
pub struct RewardedGroup {
    pub prompt_index: usize,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl RewardedGroup {
    pub fn new(prompt_index: usize, trajectories: Vec<Trajectory>, rewards: Vec<f64>) -> Result<Self> {
        let advantages = loo_advantages(&rewards)?;
        Ok(Self {
            prompt_index,
            trajectories,
            rewards,
            advantages,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Distinct prompts per step.
    pub prompts_per_step: usize,
    /// Rollouts per prompt.
    pub samples_per_prompt: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Noise std as a multiple of the RMS embedding-row norm.
    pub noise_scale: f64,
    pub validation_every: usize,
    /// Validation examples used per evaluation (0 = all).
    pub validation_size: usize,
    pub checkpoint_every: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub grad_clip: f64,
    /// Stop once greedy validation reaches this success rate.
    pub stop_at_success: Option<f64>,
    pub reward: RewardSpec,
    /// Derived from the experiment root seed, not read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            prompts_per_step: 4,
            samples_per_prompt: 8,
            lr: 3e-4,
            warmup_steps: 20,
            total_steps: 2000,
            noise_scale: 0.33,
            validation_every: 50,
            validation_size: 0,
            checkpoint_every: 500,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            grad_clip: 1.0,
            stop_at_success: None,
            reward: RewardSpec::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prompts_per_step == 0 {
            return Err(Error::InvalidConfig("prompts_per_step must be >= 1".into()));
        }
        if self.samples_per_prompt < 2 {
            return Err(Error::InvalidConfig(
                "samples_per_prompt must be >= 2 for a leave-one-out baseline".into(),
            ));
        }
        if !(self.lr >= 0.0) || !(self.noise_scale >= 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::InvalidConfig("lr and noise_scale must be >= 0, grad_clip > 0".into()));
        }
        if self.validation_every == 0 {
            return Err(Error::InvalidConfig("validation_every must be >= 1".into()));
        }
        if !(self.reward.exact > self.reward.format && self.reward.format > self.reward.zero) {
            return Err(Error::InvalidConfig("rewards must satisfy exact > format > zero".into()));
        }
        Ok(())
    }
}

/// Index of the best validation point: highest success, earliest on ties.
pub fn select_best(history: &[ValPoint]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in history.iter().enumerate() {
        if best.is_none_or(|b| v.success > history[b].success) {
            best = Some(i);
        }
    }
    best.ok_or(Error::EmptyHistory)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::Vocab;
    use proptest::prelude::*;

    #[test]
    fn reward_tiers() {
        let spec = RewardSpec::default();
        let l = Label::Number(42);
        assert_eq!(compute_reward(&Vocab.encode("42}").unwrap(), &l, &spec), 100.0);
        assert_eq!(compute_reward(&Vocab.encode("41}").unwrap(), &l, &spec), 10.0);
        assert_eq!(compute_reward(&[], &l, &spec), 0.0);
        assert_eq!(compute_reward(&Vocab.encode("+;}").unwrap(), &l, &spec), 0.0);
    }

    #[test]
    fn loo_examples() {
        assert_eq!(loo_advantages(&[100.0, 0.0]).unwrap(), vec![100.0, -100.0]);
        assert_eq!(loo_advantages(&[7.0; 5]).unwrap(), vec![0.0; 5]);
        assert_eq!(loo_advantages(&[100.0, 10.0, 0.0]).unwrap(), vec![95.0, -40.0, -55.0]);
        assert!(matches!(loo_advantages(&[1.0]), Err(Error::TooFewSamples { got: 1, need: 2 })));
    }

    fn vp(step: usize, success: f64) -> ValPoint {
        ValPoint { step, success }
    }

    #[test]
    fn best_checkpoint() {
        assert_eq!(select_best(&[vp(0, 0.1), vp(50, 0.5), vp(100, 0.4)]).unwrap(), 1);
        assert_eq!(select_best(&[vp(0, 0.3), vp(50, 0.3)]).unwrap(), 0);
        assert_eq!(select_best(&[vp(7, 0.0)]).unwrap(), 0);
        assert!(matches!(select_best(&[]), Err(Error::EmptyHistory)));
    }

    proptest! {
        #[test]
        fn loo_sums_to_zero(r in proptest::collection::vec(-1000.0f64..1000.0, 2..64)) {
            let a = loo_advantages(&r).unwrap();
            prop_assert!(a.iter().sum::<f64>().abs() < 1e-9);
        }

        #[test]
        fn tiers_are_exclusive(text in "[0-9yesno+ }{-]{0,6}", n in 0i64..200) {
            let ids = Vocab.encode(&text).unwrap();
            let l = Label::Number(n);
            let v = verify(&ids, &l);
            let r = compute_reward(&ids, &l, &RewardSpec::default());
            let expected = match v {
                Verdict::Exact => 100.0,
                Verdict::FormatOnly => 10.0,
                Verdict::None => 0.0,
            };
            prop_assert_eq!(r, expected);
        }
    }
}
