//! Synthetic sequence-to-sequence tasks and low-resource splits.
//!
//! Token ids below [`CONTENT_START`] are reserved. Pretraining uses a
//! copy/reverse/key-value-lookup mixture in a base format; adaptation uses
//! key-value lookup in a shifted format whose marker and separator never
//! occur in pretraining and whose keys come from a disjoint range.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const COPY_MARK: usize = 3;
pub const REVERSE_MARK: usize = 4;
pub const KV_MARK: usize = 5;
pub const KV_SEP: usize = 6;
pub const KV_MARK_SHIFTED: usize = 7;
pub const KV_SEP_SHIFTED: usize = 8;
pub const CONTENT_START: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Copy,
    Reverse,
    KvLookup,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::KvLookup => "kv-lookup",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [TaskKind::Copy, TaskKind::Reverse, TaskKind::KvLookup]
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown task `{s}`")))
    }
}

/// Token layout of a task family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFormat {
    /// Payload length of copy/reverse samples.
    pub payload_len: usize,
    /// Key/value pairs in a lookup context.
    pub pairs: usize,
    /// Tokens per value.
    pub value_len: usize,
    pub kv_marker: usize,
    pub kv_separator: usize,
    /// Half-open key token range.
    pub key_range: (usize, usize),
    /// Half-open value token range, disjoint from every key range.
    pub value_range: (usize, usize),
    /// Half-open payload token range of copy/reverse.
    pub content_range: (usize, usize),
}

impl TaskFormat {
    pub const fn pretraining() -> Self {
        Self {
            payload_len: 6,
            pairs: 2,
            value_len: 2,
            kv_marker: KV_MARK,
            kv_separator: KV_SEP,
            key_range: (16, 32),
            value_range: (40, 64),
            content_range: (CONTENT_START, 64),
        }
    }

    pub const fn shifted() -> Self {
        Self {
            kv_marker: KV_MARK_SHIFTED,
            kv_separator: KV_SEP_SHIFTED,
            key_range: (32, 40),
            ..Self::pretraining()
        }
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        let (k0, k1) = self.key_range;
        let (c0, c1) = self.content_range;
        let (v0, v1) = self.value_range;
        if k1 <= k0 || k1 - k0 < self.pairs || c1 <= c0 || v1 <= v0 || c1 > vocab || k1 > vocab || v1 > vocab {
            return Err(Error::Config(format!("invalid token ranges in {self:?} for vocab {vocab}")));
        }
        if v0 < k1 && k0 < v1 {
            return Err(Error::Config("key and value ranges overlap".into()));
        }
        if k0 < CONTENT_START || c0 < CONTENT_START || v0 < CONTENT_START {
            return Err(Error::Config("task tokens overlap reserved ids".into()));
        }
        if self.payload_len == 0 || self.pairs == 0 || self.value_len == 0 {
            return Err(Error::Config("task lengths must be positive".into()));
        }
        Ok(())
    }

    pub fn input_len(&self, kind: TaskKind) -> usize {
        match kind {
            TaskKind::Copy | TaskKind::Reverse => self.payload_len + 1,
            TaskKind::KvLookup => 1 + self.pairs * (1 + self.value_len) + 2,
        }
    }

    pub fn answer_len(&self, kind: TaskKind) -> usize {
        match kind {
            TaskKind::Copy | TaskKind::Reverse => self.payload_len,
            TaskKind::KvLookup => self.value_len,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub format: TaskFormat,
}

impl SyntheticTask {
    pub fn pretraining(kind: TaskKind) -> Self {
        Self {
            kind,
            format: TaskFormat::pretraining(),
        }
    }

    /// The adaptation task: lookup in the shifted format.
    pub fn adaptation() -> Self {
        Self {
            kind: TaskKind::KvLookup,
            format: TaskFormat::shifted(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sample {
    pub input: Vec<usize>,
    pub answer: Vec<usize>,
}

fn sample_one<R: Rng + ?Sized>(task: &SyntheticTask, rng: &mut R) -> Sample {
    let f = &task.format;
    let content = |rng: &mut R| rng.random_range(f.content_range.0..f.content_range.1);
    match task.kind {
        TaskKind::Copy | TaskKind::Reverse => {
            let payload: Vec<usize> = (0..f.payload_len).map(|_| content(rng)).collect();
            let mut input = vec![if task.kind == TaskKind::Copy { COPY_MARK } else { REVERSE_MARK }];
            input.extend(&payload);
            let mut answer = payload;
            if task.kind == TaskKind::Reverse {
                answer.reverse();
            }
            Sample { input, answer }
        }
        TaskKind::KvLookup => {
            let mut keys: Vec<usize> = (f.key_range.0..f.key_range.1).collect();
            keys.shuffle(rng);
            keys.truncate(f.pairs);
            let values: Vec<Vec<usize>> = (0..f.pairs)
                .map(|_| (0..f.value_len).map(|_| rng.random_range(f.value_range.0..f.value_range.1)).collect())
                .collect();
            let q = rng.random_range(0..f.pairs);
            let mut input = vec![f.kv_marker];
            for (k, v) in keys.iter().zip(&values) {
                input.push(*k);
                input.extend(v);
            }
            input.push(f.kv_separator);
            input.push(keys[q]);
            Sample {
                input,
                answer: values[q].clone(),
            }
        }
    }
}

/// `count` samples of `task`, fully determined by `(task, count, seed)`.
pub fn generate_synthetic(task: &SyntheticTask, count: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("task/{}", task.kind)));
    (0..count).map(|_| sample_one(task, &mut rng)).collect()
}

/// Equal shares of each task, interleaved at random.
pub fn generate_mixture(tasks: &[SyntheticTask], count: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "task/mixture"));
    let mut out: Vec<Sample> = (0..count).map(|i| sample_one(&tasks[i % tasks.len()], &mut rng)).collect();
    out.shuffle(&mut rng);
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LowResourceSplit {
    pub train: Vec<Sample>,
    pub dev: Vec<Sample>,
    pub seed: u64,
}

/// Draws `2·n_d` distinct pool entries and halves them into train and dev.
pub fn make_lowresource_splits(pool: &[Sample], n_d: usize, seed: u64) -> Result<LowResourceSplit> {
    if n_d == 0 {
        return Err(Error::Protocol("N_D must be at least 1".into()));
    }
    if pool.len() < 2 * n_d {
        return Err(Error::Protocol(format!(
            "pool of {} samples cannot supply 2·N_D = {}",
            pool.len(),
            2 * n_d
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "split"));
    let picked: Vec<Sample> = rand::seq::index::sample(&mut rng, pool.len(), 2 * n_d)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect();
    let dev = picked[n_d..].to_vec();
    let mut train = picked;
    train.truncate(n_d);
    Ok(LowResourceSplit { train, dev, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    /// Independent parse of a lookup input: walk the pair list and return the queried value.
    fn lookup_oracle(input: &[usize], f: &TaskFormat) -> Option<Vec<usize>> {
        let sep = input.iter().position(|&t| t == f.kv_separator)?;
        let query = input[sep + 1];
        input[1..sep]
            .chunks(1 + f.value_len)
            .find(|c| c[0] == query)
            .map(|c| c[1..].to_vec())
    }

    #[test]
    fn deterministic_per_seed() {
        for kind in [TaskKind::Copy, TaskKind::Reverse, TaskKind::KvLookup] {
            let t = SyntheticTask::pretraining(kind);
            assert_eq!(generate_synthetic(&t, 20, 5), generate_synthetic(&t, 20, 5));
            assert_ne!(generate_synthetic(&t, 20, 5), generate_synthetic(&t, 20, 6));
        }
    }

    #[test]
    fn copy_answers_equal_payload() {
        for s in generate_synthetic(&SyntheticTask::pretraining(TaskKind::Copy), 50, 1) {
            assert_eq!(s.input[0], COPY_MARK);
            assert_eq!(s.answer, s.input[1..]);
        }
        for s in generate_synthetic(&SyntheticTask::pretraining(TaskKind::Reverse), 50, 1) {
            let mut r = s.input[1..].to_vec();
            r.reverse();
            assert_eq!(s.answer, r);
        }
    }

    #[test]
    fn lookup_answers_match_parse_oracle() {
        for task in [SyntheticTask::pretraining(TaskKind::KvLookup), SyntheticTask::adaptation()] {
            for s in generate_synthetic(&task, 200, 3) {
                assert_eq!(s.input.len(), task.format.input_len(TaskKind::KvLookup));
                assert_eq!(lookup_oracle(&s.input, &task.format).unwrap(), s.answer);
            }
        }
    }

    #[test]
    fn shifted_format_uses_unseen_tokens() {
        let base = TaskFormat::pretraining();
        let shifted = TaskFormat::shifted();
        assert!(shifted.key_range.0 >= base.key_range.1);
        for s in generate_synthetic(&SyntheticTask::adaptation(), 100, 4) {
            assert_eq!(s.input[0], KV_MARK_SHIFTED);
            assert!(s.input.contains(&KV_SEP_SHIFTED));
            assert!(!s.input.contains(&KV_MARK) && !s.input.contains(&KV_SEP));
        }
        assert!(shifted.validate(64).is_ok() && base.validate(64).is_ok());
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let pool = generate_synthetic(&SyntheticTask::adaptation(), 500, 0);
        let split = make_lowresource_splits(&pool, 16, 13).unwrap();
        assert_eq!((split.train.len(), split.dev.len()), (16, 16));
        let all: HashSet<_> = split.train.iter().chain(&split.dev).collect();
        assert_eq!(all.len(), 32);
        let other = make_lowresource_splits(&pool, 16, 21).unwrap();
        assert_ne!(split.train, other.train);
        assert!(matches!(make_lowresource_splits(&pool, 300, 1), Err(Error::Protocol(_))));
    }

    #[test]
    fn mixture_is_balanced() {
        let tasks = [TaskKind::Copy, TaskKind::Reverse, TaskKind::KvLookup].map(SyntheticTask::pretraining);
        let mix = generate_mixture(&tasks, 300, 2);
        for mark in [COPY_MARK, REVERSE_MARK, KV_MARK] {
            assert_eq!(mix.iter().filter(|s| s.input[0] == mark).count(), 100);
        }
    }
}
