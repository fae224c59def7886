//! Synthetic bilingual corpora for exercising the model at desk scale.

use std::fmt;
use std::str::FromStr;

use rnn_encdec::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Copy,
    Reverse,
    /// Target is the first source token; the rest of the source is noise.
    DelayedRecall,
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "copy" => Ok(Self::Copy),
            "reverse" => Ok(Self::Reverse),
            "delayed-recall" | "recall" => Ok(Self::DelayedRecall),
            other => Err(format!(
                "unknown task {other:?} (expected copy, reverse or delayed-recall)"
            )),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Copy => "copy",
            Self::Reverse => "reverse",
            Self::DelayedRecall => "delayed-recall",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySpec {
    pub task: Task,
    pub vocab_size: usize,
    /// Source length range for copy and reverse.
    pub min_len: usize,
    pub max_len: usize,
    /// Tokens following the recalled one in delayed recall.
    pub noise_len: usize,
}

impl ToySpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.vocab_size == 0 {
            return Err("vocab_size must be at least 1".into());
        }
        if self.task != Task::DelayedRecall && (self.min_len == 0 || self.min_len > self.max_len) {
            return Err(format!(
                "need 1 <= min_len <= max_len, got {}..{}",
                self.min_len, self.max_len
            ));
        }
        Ok(())
    }
}

pub fn word(i: usize) -> String {
    format!("w{i}")
}

/// Source and target token indices for one example.
pub fn generate_ids(spec: &ToySpec, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let v = spec.vocab_size;
    match spec.task {
        Task::Copy | Task::Reverse => {
            let len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
            let src: Vec<usize> = (0..len).map(|_| rng.below(v)).collect();
            let mut tgt = src.clone();
            if spec.task == Task::Reverse {
                tgt.reverse();
            }
            (src, tgt)
        }
        Task::DelayedRecall => {
            let src: Vec<usize> = (0..=spec.noise_len).map(|_| rng.below(v)).collect();
            let tgt = vec![src[0]];
            (src, tgt)
        }
    }
}

fn words(ids: &[usize]) -> String {
    ids.iter().map(|&i| word(i)).collect::<Vec<_>>().join(" ")
}

pub fn generate(spec: &ToySpec, n: usize, rng: &mut Rng) -> Result<Vec<(String, String)>, String> {
    spec.validate()?;
    Ok((0..n)
        .map(|_| {
            let (s, t) = generate_ids(spec, rng);
            (words(&s), words(&t))
        })
        .collect())
}

/// Tab-separated bitext, one pair per line.
pub fn to_bitext(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(s, t)| format!("{s}\t{t}\n")).collect()
}
