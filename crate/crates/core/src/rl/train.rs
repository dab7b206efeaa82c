use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{rms_embedding_norm, Checkpoint, ModelParams, Temperature, OPTIM_PREFIX};
use crate::rollout::{dump_record, generate, write_dump, RolloutConfig, Trajectory};
use crate::seed;
use crate::tasks::{TaskExample, Verdict};
use crate::tensor::Tensor;

use super::objective::rloo_loss;
use super::optim::{clip_grad_norm, AdamW, LrSchedule};
use super::{select_best, RewardedGroup, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub mean_reward: f64,
    pub success_rate: f64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValPoint {
    /// Optimizer updates applied before this evaluation.
    pub step: usize,
    pub success: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub best: ModelParams,
    pub best_step: usize,
    pub sigma: f64,
    pub log: Vec<StepLog>,
    pub validation: Vec<ValPoint>,
}

impl TrainOutcome {
    pub fn initial_success(&self) -> f64 {
        self.validation.first().map_or(0.0, |v| v.success)
    }

    pub fn best_success(&self) -> f64 {
        self.validation
            .iter()
            .find(|v| v.step == self.best_step)
            .map_or(0.0, |v| v.success)
    }
}

/// Greedy variant of a rollout config: temperature 0 for hard CoT, no
/// noise for soft and fuzzy CoT.
pub fn greedy_config(cfg: &RolloutConfig) -> RolloutConfig {
    let mut g = cfg.clone();
    if cfg.mode.is_continuous() {
        g.sigma = 0.0;
    } else {
        g.cot_temperature = Temperature::GREEDY;
    }
    g
}

/// Fraction of `examples` answered exactly under `cfg` (expected greedy,
/// so the rng is unused in practice).
pub fn greedy_success(params: &ModelParams, examples: &[TaskExample], cfg: &RolloutConfig) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let hits = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut rng = seed::rng(0, "validation", &[i as u64]);
            let t = generate(params, &ex.prompt_ids, cfg, &mut rng)?;
            Ok((t.verdict(&ex.label) == Verdict::Exact) as usize)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(hits as f64 / examples.len() as f64)
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// Next step to run.
    pub step: usize,
    pub params: ModelParams,
    pub opt: AdamW,
    pub sigma: f64,
    pub validation: Vec<ValPoint>,
}

impl TrainState {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.params.to_checkpoint();
        ck.header = serde_json::json!({
            "kind": "train_state",
            "model": self.params.config(),
            "step": self.step,
            "sigma": self.sigma,
            "adam_t": self.opt.t,
            "validation": self.validation,
        });
        for (name, (m, v)) in self.params.names().iter().zip(self.opt.m.iter().zip(&self.opt.v)) {
            ck.tensors.push((format!("{OPTIM_PREFIX}m.{name}"), m.clone()));
            ck.tensors.push((format!("{OPTIM_PREFIX}v.{name}"), v.clone()));
        }
        ck
    }

    pub fn from_checkpoint(ck: Checkpoint, cfg: &TrainConfig) -> Result<Self> {
        let h = ck.header.clone();
        if h.get("kind").and_then(|k| k.as_str()) != Some("train_state") {
            return Err(Error::Checkpoint("not a training-state checkpoint".into()));
        }
        let field = |k: &str| {
            h.get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("header lacks {k}")))
        };
        let step: usize = serde_json::from_value(field("step")?)?;
        let sigma: f64 = serde_json::from_value(field("sigma")?)?;
        let t: u64 = serde_json::from_value(field("adam_t")?)?;
        let validation: Vec<ValPoint> = serde_json::from_value(field("validation")?)?;
        let mut moments: std::collections::HashMap<String, Tensor> = ck
            .tensors
            .iter()
            .filter(|(n, _)| n.starts_with(OPTIM_PREFIX))
            .cloned()
            .collect();
        let params = ModelParams::from_checkpoint(ck)?;
        let mut opt = AdamW::new(params.tensors(), cfg.beta1, cfg.beta2, cfg.weight_decay);
        opt.t = t;
        for (i, name) in params.names().iter().enumerate() {
            let take = |moments: &mut std::collections::HashMap<String, Tensor>, k: String| {
                moments
                    .remove(&k)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {k}")))
            };
            opt.m[i] = take(&mut moments, format!("{OPTIM_PREFIX}m.{name}"))?;
            opt.v[i] = take(&mut moments, format!("{OPTIM_PREFIX}v.{name}"))?;
        }
        Ok(Self {
            step,
            params,
            opt,
            sigma,
            validation,
        })
    }
}

fn state_path(dir: &Path, step: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("step_{step:06}.ckpt"))
}

/// Latest `step_XXXXXX.ckpt` under `dir/checkpoints`, if any.
pub fn latest_state(dir: &Path) -> Result<Option<PathBuf>> {
    let ckdir = dir.join("checkpoints");
    if !ckdir.exists() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in std::fs::read_dir(&ckdir)? {
        let path = entry?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step_"))
            .and_then(|n| n.strip_suffix(".ckpt"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(s) = step {
            if best.as_ref().is_none_or(|(b, _)| s > *b) {
                best = Some((s, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Keeps the records of an existing JSONL log whose `step` satisfies `keep`.
fn truncate_log<T: Serialize + for<'de> Deserialize<'de>>(path: &Path, keep: impl Fn(&T) -> bool) -> Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut kept = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(&line)?;
        if keep(&rec) {
            kept.push(rec);
        }
    }
    let mut f = BufWriter::new(File::create(path)?);
    for r in &kept {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(kept)
}

struct Sinks {
    dir: PathBuf,
    log: BufWriter<File>,
    val: BufWriter<File>,
}

impl Sinks {
    fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir.join("checkpoints"))?;
        let open = |name: &str| -> Result<BufWriter<File>> {
            Ok(BufWriter::new(
                std::fs::OpenOptions::new().create(true).append(true).open(dir.join(name))?,
            ))
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            log: open("train_log.jsonl")?,
            val: open("validation.jsonl")?,
        })
    }

    fn write<T: Serialize>(w: &mut BufWriter<File>, rec: &T) -> Result<()> {
        serde_json::to_writer(&mut *w, rec)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

fn validation_slice<'a>(val: &'a [TaskExample], cfg: &TrainConfig) -> &'a [TaskExample] {
    if cfg.validation_size == 0 {
        val
    } else {
        &val[..cfg.validation_size.min(val.len())]
    }
}

fn reached(cfg: &TrainConfig, v: f64) -> bool {
    cfg.stop_at_success.is_some_and(|t| v >= t)
}

/// RLOO training from `params`. With `out`, writes `train_log.jsonl`,
/// `validation.jsonl`, periodic `checkpoints/step_XXXXXX.ckpt` training
/// states and `best.ckpt`; with `resume`, continues from the latest state
/// found there.
pub fn train(
    params: ModelParams,
    train_set: &[TaskExample],
    val_set: &[TaskExample],
    cfg: &TrainConfig,
    rollout: &RolloutConfig,
    out: Option<&Path>,
    resume: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    rollout.validate(params.config().vocab_size)?;
    if train_set.len() < cfg.prompts_per_step {
        return Err(Error::InvalidConfig(format!(
            "{} training examples for {} prompts per step",
            train_set.len(),
            cfg.prompts_per_step
        )));
    }
    let val = validation_slice(val_set, cfg);

    let resumed = match (resume, out) {
        (true, Some(dir)) => match latest_state(dir)? {
            Some(path) => Some(TrainState::from_checkpoint(Checkpoint::load(&path)?, cfg)?),
            None => None,
        },
        _ => None,
    };
    if let (None, Some(dir)) = (&resumed, out) {
        // fresh run: start the logs over
        for name in ["train_log.jsonl", "validation.jsonl"] {
            let p = dir.join(name);
            if p.exists() {
                std::fs::remove_file(p)?;
            }
        }
    }

    let (mut log, mut state) = match (resumed, out) {
        (Some(st), Some(dir)) => {
            let log = truncate_log(&dir.join("train_log.jsonl"), |r: &StepLog| r.step < st.step)?;
            truncate_log(&dir.join("validation.jsonl"), |r: &ValPoint| r.step <= st.step)?;
            log::info!("resuming at step {}", st.step);
            (log, st)
        }
        _ => {
            let sigma = cfg.noise_scale * rms_embedding_norm(params.embedding());
            let opt = AdamW::new(params.tensors(), cfg.beta1, cfg.beta2, cfg.weight_decay);
            let st = TrainState {
                step: 0,
                params,
                opt,
                sigma,
                validation: Vec::new(),
            };
            (Vec::new(), st)
        }
    };
    let mut sinks = out.map(Sinks::open).transpose()?;

    let rcfg = rollout.clone().with_sigma(state.sigma);
    let greedy = greedy_config(&rcfg);
    let sched = LrSchedule {
        peak: cfg.lr,
        warmup: cfg.warmup_steps,
        total: cfg.total_steps,
    };

    let mut best = state.params.clone();
    let mut best_step = 0;
    if let Some(dir) = out {
        let p = dir.join("best.ckpt");
        if !state.validation.is_empty() && p.exists() {
            best = ModelParams::load(&p)?;
        }
    }
    if state.validation.is_empty() {
        let v = greedy_success(&state.params, val, &greedy)?;
        let point = ValPoint { step: 0, success: v };
        if let Some(s) = sinks.as_mut() {
            Sinks::write(&mut s.val, &point)?;
            state.params.save(&s.dir.join("best.ckpt"))?;
        }
        state.validation.push(point);
    }
    if !state.validation.is_empty() {
        best_step = state.validation[select_best(&state.validation)?].step;
    }
    let mut done = state.validation.last().is_some_and(|v| reached(cfg, v.success));

    let b = cfg.prompts_per_step;
    let g = cfg.samples_per_prompt;
    while state.step < cfg.total_steps && !done {
        let step = state.step;
        let mut data_rng = seed::rng(cfg.seed, "data", &[step as u64]);
        let picks = index::sample(&mut data_rng, train_set.len(), b).into_vec();

        let jobs: Vec<(usize, usize)> = (0..b).flat_map(|i| (0..g).map(move |j| (i, j))).collect();
        let trajs: Vec<Trajectory> = jobs
            .par_iter()
            .map(|&(i, j)| {
                let mut rng = seed::rng(cfg.seed, "rollout", &[step as u64, i as u64, j as u64]);
                generate(&state.params, &train_set[picks[i]].prompt_ids, &rcfg, &mut rng)
            })
            .collect::<Result<_>>()?;

        let mut groups = Vec::with_capacity(b);
        let mut exact = 0usize;
        let mut reward_sum = 0.0;
        let mut it = trajs.into_iter();
        for (i, &pi) in picks.iter().enumerate() {
            let group: Vec<Trajectory> = it.by_ref().take(g).collect();
            let label = &train_set[pi].label;
            let rewards: Vec<f64> = group
                .iter()
                .map(|t| {
                    let v = t.verdict(label);
                    exact += (v == Verdict::Exact) as usize;
                    cfg.reward.for_verdict(v)
                })
                .collect();
            reward_sum += rewards.iter().sum::<f64>();
            groups.push(RewardedGroup::new(i, group, rewards)?);
        }

        let (loss, mut grads) = rloo_loss(&state.params, &groups, Some(&rcfg))?;
        if !loss.is_finite() || !grads.all_finite() {
            let reason = if loss.is_finite() {
                "non-finite gradient".to_string()
            } else {
                format!("loss = {loss}")
            };
            let dump = dump_batch(out, step, &groups, train_set, &picks)?;
            return Err(Error::Diverged { step, reason, dump });
        }
        let lr = sched.at(step);
        let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip);
        state.opt.step(state.params.tensors_mut(), &grads, lr);

        let rec = StepLog {
            step,
            mean_reward: reward_sum / (b * g) as f64,
            success_rate: exact as f64 / (b * g) as f64,
            loss,
            lr,
            grad_norm,
        };
        log::debug!("{rec:?}");
        if let Some(s) = sinks.as_mut() {
            Sinks::write(&mut s.log, &rec)?;
        }
        log.push(rec);
        state.step += 1;

        if state.step % cfg.validation_every == 0 || state.step == cfg.total_steps {
            let v = greedy_success(&state.params, val, &greedy)?;
            log::info!("step {}: greedy validation {v:.3}", state.step);
            let point = ValPoint {
                step: state.step,
                success: v,
            };
            let improved = state.validation.iter().all(|p| v > p.success);
            state.validation.push(point.clone());
            if improved {
                best = state.params.clone();
                best_step = state.step;
            }
            if let Some(s) = sinks.as_mut() {
                Sinks::write(&mut s.val, &point)?;
                if improved {
                    best.save(&s.dir.join("best.ckpt"))?;
                }
            }
            done = reached(cfg, v);
        }
        if let Some(s) = sinks.as_ref() {
            if cfg.checkpoint_every > 0 && (state.step % cfg.checkpoint_every == 0 || done) {
                state.to_checkpoint().save(&state_path(&s.dir, state.step))?;
            }
        }
    }

    Ok(TrainOutcome {
        params: state.params,
        best,
        best_step,
        sigma: state.sigma,
        log,
        validation: state.validation,
    })
}

fn dump_batch(
    out: Option<&Path>,
    step: usize,
    groups: &[RewardedGroup],
    train_set: &[TaskExample],
    picks: &[usize],
) -> Result<String> {
    let dir = out.map_or_else(std::env::temp_dir, Path::to_path_buf);
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(format!("diverged_step_{step:06}.jsonl"));
    let records: Vec<_> = groups
        .iter()
        .zip(picks)
        .flat_map(|(grp, &pi)| {
            grp.trajectories
                .iter()
                .zip(&grp.rewards)
                .map(move |(t, &r)| dump_record(t, Some(&train_set[pi].label), Some(r)))
        })
        .collect();
    write_dump(&path, &records)?;
    Ok(path.display().to_string())
}
