//! Synthetic task corpora, the prompt template and the answer verifier.

pub mod verify;
pub mod vocab;

use std::collections::{HashSet, VecDeque};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use verify::{verify, Verdict};
pub use vocab::Vocab;
use vocab::{ANS_OPEN, ASSISTANT, BOS, EOS_ANSWER, STOP_MARKER, USER};

/// Canonical answer value.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Number(i64),
    YesNo(bool),
}

impl Label {
    pub fn render(&self) -> String {
        match self {
            Label::Number(n) => n.to_string(),
            Label::YesNo(true) => "yes".into(),
            Label::YesNo(false) => "no".into(),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LabelRepr {
    Number(i64),
    Text(String),
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Label::Number(n) => LabelRepr::Number(*n).serialize(s),
            other => LabelRepr::Text(other.render()).serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match LabelRepr::deserialize(d)? {
            LabelRepr::Number(n) => Ok(Label::Number(n)),
            LabelRepr::Text(t) => match t.as_str() {
                "yes" => Ok(Label::YesNo(true)),
                "no" => Ok(Label::YesNo(false)),
                _ => Err(serde::de::Error::custom(format!("bad label {t:?}"))),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskKind {
    /// `summands` numbers of exactly `digits` digits, added.
    Addition { digits: u32, summands: u32 },
    /// Digits joined by `+ - *`, evaluated left to right modulo 10.
    ModularChain { length: u32 },
    /// Random digraph on `nodes` nodes; is `dst` reachable from `src`?
    GraphReachability { nodes: u32, edge_density: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::Addition {
                digits: 2,
                summands: 2,
            },
            train: 4000,
            val: 200,
            test: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskExample {
    pub question: String,
    pub label: Label,
    #[serde(skip)]
    pub prompt_ids: Vec<usize>,
}

impl TaskExample {
    pub fn new(question: String, label: Label) -> Result<Self> {
        let prompt_ids = format_prompt(&question)?;
        Ok(Self {
            question,
            label,
            prompt_ids,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub train: Vec<TaskExample>,
    pub val: Vec<TaskExample>,
    pub test: Vec<TaskExample>,
}

/// `<bos>User: {q} Assistant: `; generation starts right after.
pub fn format_prompt(question: &str) -> Result<Vec<usize>> {
    if question.is_empty() {
        return Err(Error::EmptyQuestion);
    }
    let mut ids = vec![BOS, USER];
    ids.extend(Vocab.encode(question)?);
    ids.push(Vocab.encode(" ")?[0]);
    ids.push(ASSISTANT);
    Ok(ids)
}

/// Ideal completion after the prompt: the value as a draft, the stop
/// marker, then the answer span.
pub fn demonstration(label: &Label) -> Result<Vec<usize>> {
    let value = Vocab.encode(&label.render())?;
    let mut ids = value.clone();
    ids.extend_from_slice(&STOP_MARKER);
    ids.push(ANS_OPEN);
    ids.extend(value);
    ids.push(EOS_ANSWER);
    Ok(ids)
}

/// Tokens of the answer span as the model should produce it after the
/// prefill (value then closer).
pub fn answer_tokens(label: &Label) -> Result<Vec<usize>> {
    let mut ids = Vocab.encode(&label.render())?;
    ids.push(EOS_ANSWER);
    Ok(ids)
}

fn sample_question(kind: &TaskKind, rng: &mut ChaCha8Rng) -> Result<(String, Label)> {
    match *kind {
        TaskKind::Addition { digits, summands } => {
            let lo = if digits == 1 { 0 } else { 10i64.pow(digits - 1) };
            let hi = 10i64.pow(digits);
            let terms: Vec<i64> = (0..summands).map(|_| rng.random_range(lo..hi)).collect();
            let q = terms.iter().map(i64::to_string).collect::<Vec<_>>().join("+");
            Ok((q, Label::Number(terms.iter().sum())))
        }
        TaskKind::ModularChain { length } => {
            let mut acc: i64 = rng.random_range(0..10);
            let mut q = acc.to_string();
            for _ in 0..length {
                let d: i64 = rng.random_range(0..10);
                let op = ["+", "-", "*"][rng.random_range(0..3)];
                acc = match op {
                    "+" => acc + d,
                    "-" => acc - d,
                    _ => acc * d,
                }
                .rem_euclid(10);
                q.push_str(op);
                q.push_str(&d.to_string());
            }
            Ok((q, Label::Number(acc)))
        }
        TaskKind::GraphReachability { nodes, edge_density } => {
            let n = nodes as usize;
            let mut adj = vec![Vec::new(); n];
            let mut edges = Vec::new();
            for i in 0..n {
                for j in 0..n {
                    if i != j && rng.random_bool(edge_density) {
                        adj[i].push(j);
                        edges.push(format!("{i}>{j}"));
                    }
                }
            }
            let src = rng.random_range(0..n);
            let mut dst = rng.random_range(0..n - 1);
            if dst >= src {
                dst += 1;
            }
            Ok((
                format!("{};{src}>{dst}?", edges.join(",")),
                Label::YesNo(reachable(&adj, src, dst)),
            ))
        }
    }
}

pub fn reachable(adj: &[Vec<usize>], src: usize, dst: usize) -> bool {
    let mut seen = vec![false; adj.len()];
    let mut queue = VecDeque::from([src]);
    seen[src] = true;
    while let Some(u) = queue.pop_front() {
        if u == dst {
            return true;
        }
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    false
}

fn check_kind(kind: &TaskKind) -> Result<Option<u128>> {
    match *kind {
        TaskKind::Addition { digits, summands } => {
            if !(1..=9).contains(&digits) || summands < 2 {
                return Err(Error::InfeasibleSpec(
                    "addition needs 1..=9 digits and at least 2 summands".into(),
                ));
            }
            let per = if digits == 1 { 10u128 } else { 9 * 10u128.pow(digits - 1) };
            Ok(per.checked_pow(summands))
        }
        TaskKind::ModularChain { length } => {
            if length == 0 {
                return Err(Error::InfeasibleSpec("modular chain length must be >= 1".into()));
            }
            Ok(10u128
                .checked_pow(length + 1)
                .and_then(|v| v.checked_mul(3u128.checked_pow(length)?)))
        }
        TaskKind::GraphReachability { nodes, edge_density } => {
            if !(2..=10).contains(&nodes) || !(0.0..=1.0).contains(&edge_density) {
                return Err(Error::InfeasibleSpec(
                    "graph reachability needs 2..=10 nodes and density in [0, 1]".into(),
                ));
            }
            Ok(None)
        }
    }
}

/// Draws distinct questions under `spec.seed` and splits them in order
/// into train, val and test, so the splits never share a question.
pub fn generate_dataset(spec: &TaskSpec) -> Result<Dataset> {
    let needed = spec.train + spec.val + spec.test;
    if let Some(total) = check_kind(&spec.kind)? {
        if (needed as u128) > total {
            return Err(Error::InfeasibleSpec(format!(
                "{needed} distinct questions requested, only {total} exist"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::new();
    let mut all = Vec::with_capacity(needed);
    let max_draws = 200 * needed.max(10);
    let mut draws = 0;
    while all.len() < needed {
        if draws == max_draws {
            return Err(Error::InfeasibleSpec(format!(
                "found only {} distinct questions after {draws} draws",
                all.len()
            )));
        }
        draws += 1;
        let (q, label) = sample_question(&spec.kind, &mut rng)?;
        if seen.insert(q.clone()) {
            all.push(TaskExample::new(q, label)?);
        }
    }
    let test = all.split_off(spec.train + spec.val);
    let val = all.split_off(spec.train);
    Ok(Dataset {
        spec: spec.clone(),
        train: all,
        val,
        test,
    })
}

pub fn write_jsonl(path: &Path, examples: &[TaskExample]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut f, ex)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<TaskExample>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: TaskExample = serde_json::from_str(&line)?;
        out.push(TaskExample::new(ex.question, ex.label)?);
    }
    Ok(out)
}

impl Dataset {
    /// Writes `train.jsonl`, `val.jsonl`, `test.jsonl` and a `manifest.json`
    /// recording the generating spec.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_jsonl(&dir.join("train.jsonl"), &self.train)?;
        write_jsonl(&dir.join("val.jsonl"), &self.val)?;
        write_jsonl(&dir.join("test.jsonl"), &self.test)?;
        let manifest = serde_json::json!({
            "spec": self.spec,
            "counts": {"train": self.train.len(), "val": self.val.len(), "test": self.test.len()},
        });
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let spec: TaskSpec = serde_json::from_value(manifest["spec"].clone())?;
        Ok(Self {
            spec,
            train: read_jsonl(&dir.join("train.jsonl"))?,
            val: read_jsonl(&dir.join("val.jsonl"))?,
            test: read_jsonl(&dir.join("test.jsonl"))?,
        })
    }
}

/// Multiple-choice item: the correct completion plus label-perturbed distractors.
#[derive(Clone, Debug, PartialEq)]
pub struct McItem {
    pub prompt_ids: Vec<usize>,
    pub correct: Vec<usize>,
    pub distractors: Vec<Vec<usize>>,
}

fn perturb(label: &Label, rng: &mut ChaCha8Rng) -> Label {
    match label {
        Label::YesNo(b) => Label::YesNo(!b),
        Label::Number(n) => loop {
            let delta = rng.random_range(-10i64..=10);
            if delta != 0 && n + delta >= 0 {
                break Label::Number(n + delta);
            }
        },
    }
}

/// Held-out multiple-choice set: each item's completion answers directly
/// (marker, opener, value, closer) with `n_distractors` wrong values.
pub fn mc_dataset(examples: &[TaskExample], n_distractors: usize, seed: u64) -> Result<Vec<McItem>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let completion = |l: &Label| -> Result<Vec<usize>> {
        let mut ids = STOP_MARKER.to_vec();
        ids.push(ANS_OPEN);
        ids.extend(answer_tokens(l)?);
        Ok(ids)
    };
    examples
        .iter()
        .map(|ex| {
            let mut distractors = Vec::with_capacity(n_distractors);
            let mut used = HashSet::from([ex.label.clone()]);
            while distractors.len() < n_distractors {
                let wrong = perturb(&ex.label, &mut rng);
                if used.insert(wrong.clone()) {
                    distractors.push(completion(&wrong)?);
                } else if matches!(ex.label, Label::YesNo(_)) {
                    break;
                }
            }
            Ok(McItem {
                prompt_ids: ex.prompt_ids.clone(),
                correct: completion(&ex.label)?,
                distractors,
            })
        })
        .collect()
}
