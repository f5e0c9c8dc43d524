//! Deterministic synthetic corpora.
//!
//! Three stream kinds are mixed per sequence:
//!
//! * `markov` — a sparse first-order chain over the content tokens; any model
//!   can learn it from the current token alone.
//! * `local_ngram` — short random n-grams repeated back to back; solvable by
//!   copying from a few positions earlier, i.e. inside the attention window.
//! * `kv_recall` — `KEY k v` definitions followed, more than `window + 1`
//!   positions later, by `QUERY k v` probes.  The value of a probe can only be
//!   predicted by a mixer that retains information beyond the window.
//!
//! Every sequence starts with [`BOS`].  Sequences are stored packed in a
//! `.tokens` file (u32 little-endian) with a `.meta.json` sidecar holding the
//! boundaries, the split and the planted recall pairs.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const BOS: u32 = 0;
pub const KEY_MARK: u32 = 1;
pub const QUERY_MARK: u32 = 2;
/// First ordinary ("content") token id.
pub const FIRST_CONTENT: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixWeights {
    pub markov_background: f64,
    pub local_ngram: f64,
    pub kv_recall: f64,
}

impl Default for MixWeights {
    fn default() -> Self {
        MixWeights {
            markov_background: 0.4,
            local_ngram: 0.3,
            kv_recall: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub n_sequences: usize,
    pub seed: u64,
    #[serde(default)]
    pub mix: MixWeights,
    /// Attention window the recall distance must exceed.
    pub window: usize,
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    /// Pairs defined per recall round.
    #[serde(default = "default_kv_pairs")]
    pub kv_pairs: usize,
    #[serde(default = "default_ngram_len")]
    pub ngram_len: usize,
    /// Successors with nonzero probability per Markov state.
    #[serde(default = "default_branching")]
    pub markov_branching: usize,
}

fn default_eval_fraction() -> f64 {
    0.1
}
fn default_kv_pairs() -> usize {
    4
}
fn default_ngram_len() -> usize {
    4
}
fn default_branching() -> usize {
    3
}

impl CorpusSpec {
    pub fn n_content(&self) -> usize {
        self.vocab_size.saturating_sub(FIRST_CONTENT as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.mix;
        let ws = [m.markov_background, m.local_ngram, m.kv_recall];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("mix weights must be nonnegative".into()));
        }
        if (ws.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mix weights sum to {}, not 1", ws.iter().sum::<f64>())));
        }
        if self.n_content() < 2 {
            return Err(Error::Config(format!("vocab_size {} leaves no content tokens", self.vocab_size)));
        }
        if self.seq_len < 2 {
            return Err(Error::Config("seq_len must be at least 2".into()));
        }
        if self.n_sequences < 2 {
            return Err(Error::Config("need at least two sequences for a train/eval split".into()));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(Error::Config("eval_fraction must lie in (0, 1)".into()));
        }
        if self.markov_branching == 0 || self.markov_branching > self.n_content() {
            return Err(Error::Config("markov_branching must be in 1..=content tokens".into()));
        }
        if m.local_ngram > 0.0 && self.ngram_len == 0 {
            return Err(Error::Config("ngram_len must be positive".into()));
        }
        if m.kv_recall > 0.0 {
            if self.kv_pairs == 0 {
                return Err(Error::Config("kv_pairs must be positive".into()));
            }
            if self.kv_pairs > self.n_content() {
                return Err(Error::Config("kv_pairs exceeds the number of distinct keys".into()));
            }
            let need = 1 + self.recall_round_len();
            if need > self.seq_len {
                return Err(Error::Config(format!(
                    "infeasible recall placement: one round of {} pairs with distance > {} needs {} positions, seq_len is {}",
                    self.kv_pairs,
                    self.window + 1,
                    need,
                    self.seq_len
                )));
            }
        }
        Ok(())
    }

    /// Filler between a round's definitions and its probes.  Probes are
    /// shuffled, so the tightest case is the last key probed first: distance
    /// `gap + 4`, which must reach `window + 2` to keep the value out of view.
    fn recall_gap(&self) -> usize {
        (self.window + 2).saturating_sub(4)
    }

    fn recall_round_len(&self) -> usize {
        6 * self.kv_pairs + self.recall_gap()
    }
}

/// Sparse row-stochastic transition matrix over content tokens.
#[derive(Debug, Clone)]
pub struct MarkovChain {
    pub n: usize,
    /// `succ[a]` lists `(b, p)` with `p > 0`; indices are content-relative.
    pub succ: Vec<Vec<(usize, f64)>>,
}

impl MarkovChain {
    pub fn from_spec(spec: &CorpusSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6d61_726b_6f76);
        let n = spec.n_content();
        let all: Vec<usize> = (0..n).collect();
        let succ = (0..n)
            .map(|_| {
                let mut targets: Vec<usize> = all.choose_multiple(&mut rng, spec.markov_branching).copied().collect();
                targets.sort_unstable();
                let w: Vec<f64> = targets.iter().map(|_| rng.gen_range(0.5..1.5)).collect();
                let z: f64 = w.iter().sum();
                targets.into_iter().zip(w).map(|(b, x)| (b, x / z)).collect()
            })
            .collect();
        MarkovChain { n, succ }
    }

    /// Dense transition probability between content-relative indices.
    pub fn prob(&self, a: usize, b: usize) -> f64 {
        self.succ[a].iter().find(|(t, _)| *t == b).map_or(0.0, |(_, p)| *p)
    }

    fn next(&self, a: usize, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for &(b, p) in &self.succ[a] {
            acc += p;
            if u < acc {
                return b;
            }
        }
        self.succ[a].last().unwrap().0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    Markov,
    LocalNgram,
    KvRecall,
}

/// A planted pair: the key sits at `key_pos`, the value to recall at `answer_pos`
/// (so the prediction is made from position `answer_pos - 1`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecallPair {
    pub seq: usize,
    pub key_pos: usize,
    pub answer_pos: usize,
    pub key: u32,
    pub value: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub spec: CorpusSpec,
    /// `(offset, len)` of each sequence in the packed token file.
    pub boundaries: Vec<(usize, usize)>,
    pub kinds: Vec<StreamKind>,
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
    pub recall: Vec<RecallPair>,
    pub tokens_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: CorpusSpec,
    pub sequences: Vec<Vec<u32>>,
    pub kinds: Vec<StreamKind>,
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
    pub recall: Vec<RecallPair>,
}

struct Gen<'a> {
    spec: &'a CorpusSpec,
    chain: &'a MarkovChain,
    rng: ChaCha8Rng,
}

impl Gen<'_> {
    fn content(&mut self) -> u32 {
        FIRST_CONTENT + self.rng.gen_range(0..self.spec.n_content()) as u32
    }

    /// Extends `seq` with Markov tokens up to `len`.
    fn markov_fill(&mut self, seq: &mut Vec<u32>, len: usize) {
        let mut cur = match seq.last() {
            Some(&t) if t >= FIRST_CONTENT => (t - FIRST_CONTENT) as usize,
            _ => {
                if seq.len() >= len {
                    return;
                }
                let t = self.content();
                seq.push(t);
                (t - FIRST_CONTENT) as usize
            }
        };
        while seq.len() < len {
            cur = self.chain.next(cur, &mut self.rng);
            seq.push(FIRST_CONTENT + cur as u32);
        }
    }

    fn local_ngram(&mut self, seq: &mut Vec<u32>) {
        let n = self.spec.seq_len;
        while seq.len() < n {
            let gram: Vec<u32> = (0..self.spec.ngram_len).map(|_| self.content()).collect();
            let reps = self.rng.gen_range(2..=6);
            for _ in 0..reps {
                for &t in &gram {
                    if seq.len() < n {
                        seq.push(t);
                    }
                }
            }
        }
    }

    fn kv_recall(&mut self, seq: &mut Vec<u32>, idx: usize, pairs: &mut Vec<RecallPair>) {
        let spec = self.spec;
        let n = spec.kv_pairs;
        let mut keys: Vec<u32> = (0..spec.n_content() as u32).map(|k| k + FIRST_CONTENT).collect();
        keys.shuffle(&mut self.rng);
        let mut keys = keys.into_iter();
        while seq.len() + spec.recall_round_len() <= spec.seq_len {
            let round: Vec<u32> = keys.by_ref().take(n).collect();
            if round.len() < n {
                break;
            }
            let mut defs = Vec::with_capacity(n);
            for &k in &round {
                let v = self.content();
                seq.push(KEY_MARK);
                defs.push((seq.len(), k, v));
                seq.push(k);
                seq.push(v);
            }
            let gap_end = seq.len() + spec.recall_gap();
            self.markov_fill(seq, gap_end);
            let mut order = defs.clone();
            order.shuffle(&mut self.rng);
            for (key_pos, k, v) in order {
                seq.push(QUERY_MARK);
                seq.push(k);
                let answer_pos = seq.len();
                seq.push(v);
                debug_assert!(answer_pos - key_pos > spec.window + 1);
                pairs.push(RecallPair {
                    seq: idx,
                    key_pos,
                    answer_pos,
                    key: k,
                    value: v,
                });
            }
        }
        self.markov_fill(seq, spec.seq_len);
    }

    fn sequence(&mut self, idx: usize, pairs: &mut Vec<RecallPair>) -> (Vec<u32>, StreamKind) {
        let m = self.spec.mix;
        let u: f64 = self.rng.gen();
        let kind = if u < m.markov_background {
            StreamKind::Markov
        } else if u < m.markov_background + m.local_ngram || m.kv_recall == 0.0 {
            StreamKind::LocalNgram
        } else {
            StreamKind::KvRecall
        };
        let kind = match kind {
            StreamKind::LocalNgram if m.local_ngram == 0.0 => StreamKind::Markov,
            k => k,
        };
        let mut seq = Vec::with_capacity(self.spec.seq_len);
        seq.push(BOS);
        match kind {
            StreamKind::Markov => self.markov_fill(&mut seq, self.spec.seq_len),
            StreamKind::LocalNgram => self.local_ngram(&mut seq),
            StreamKind::KvRecall => self.kv_recall(&mut seq, idx, pairs),
        }
        (seq, kind)
    }
}

/// Generates the corpus described by `spec`.  Deterministic in the spec; the
/// eval split never contains a sequence identical to a training sequence.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Dataset> {
    spec.validate()?;
    let chain = MarkovChain::from_spec(spec);
    let mut g = Gen {
        spec,
        chain: &chain,
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
    };
    let n_eval = ((spec.n_sequences as f64 * spec.eval_fraction).round() as usize).clamp(1, spec.n_sequences - 1);
    let n_train = spec.n_sequences - n_eval;

    let mut sequences = Vec::with_capacity(spec.n_sequences);
    let mut kinds = Vec::with_capacity(spec.n_sequences);
    let mut recall = Vec::new();
    let mut seen: HashSet<Vec<u32>> = HashSet::new();
    for idx in 0..spec.n_sequences {
        let mut tries = 0;
        loop {
            let mut pairs = Vec::new();
            let (seq, kind) = g.sequence(idx, &mut pairs);
            let dup = seen.contains(&seq);
            if idx < n_train || !dup {
                if idx < n_train {
                    seen.insert(seq.clone());
                }
                sequences.push(seq);
                kinds.push(kind);
                recall.extend(pairs);
                break;
            }
            tries += 1;
            if tries > 1000 {
                return Err(Error::Config(
                    "cannot draw an eval sequence distinct from the training split; corpus too low-entropy".into(),
                ));
            }
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        sequences,
        kinds,
        train: (0..n_train).collect(),
        eval: (n_train..spec.n_sequences).collect(),
        recall,
    })
}

impl Dataset {
    pub fn train_seqs(&self) -> Vec<Vec<u32>> {
        self.train.iter().map(|&i| self.sequences[i].clone()).collect()
    }

    pub fn eval_seqs(&self) -> Vec<Vec<u32>> {
        self.eval.iter().map(|&i| self.sequences[i].clone()).collect()
    }

    /// Recall pairs planted in eval sequences.
    pub fn eval_recall(&self) -> Vec<RecallPair> {
        let eval: std::collections::HashSet<usize> = self.eval.iter().copied().collect();
        self.recall.iter().filter(|p| eval.contains(&p.seq)).copied().collect()
    }

    pub fn packed_bytes(&self) -> Vec<u8> {
        self.sequences.iter().flatten().flat_map(|t| t.to_le_bytes()).collect()
    }

    pub fn meta(&self) -> CorpusMeta {
        let mut off = 0;
        let boundaries = self
            .sequences
            .iter()
            .map(|s| {
                let b = (off, s.len());
                off += s.len();
                b
            })
            .collect();
        CorpusMeta {
            spec: self.spec.clone(),
            boundaries,
            kinds: self.kinds.clone(),
            train: self.train.clone(),
            eval: self.eval.clone(),
            recall: self.recall.clone(),
            tokens_sha256: crate::io::sha256_hex(&self.packed_bytes()),
        }
    }

    /// Writes `<stem>.tokens` and `<stem>.meta.json`; returns both paths.
    pub fn save(&self, stem: &Path) -> Result<(PathBuf, PathBuf)> {
        let (tp, mp) = paths(stem);
        crate::io::atomic_write(&tp, &self.packed_bytes())?;
        let meta = serde_json::to_vec_pretty(&self.meta())?;
        crate::io::atomic_write(&mp, &meta)?;
        Ok((tp, mp))
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (tp, mp) = paths(stem);
        let bytes = std::fs::read(&tp)?;
        let meta: CorpusMeta = serde_json::from_slice(&std::fs::read(&mp)?)?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Format(format!("{}: length not a multiple of 4", tp.display())));
        }
        if crate::io::sha256_hex(&bytes) != meta.tokens_sha256 {
            return Err(Error::Format(format!("{}: hash does not match sidecar", tp.display())));
        }
        let toks: Vec<u32> = bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        let mut sequences = Vec::with_capacity(meta.boundaries.len());
        for &(off, len) in &meta.boundaries {
            let s = toks
                .get(off..off + len)
                .ok_or_else(|| Error::Format("sequence boundary outside token file".into()))?;
            sequences.push(s.to_vec());
        }
        if let Some(bad) = toks.iter().find(|&&t| t as usize >= meta.spec.vocab_size) {
            return Err(Error::Format(format!("token {bad} outside vocabulary")));
        }
        Ok(Dataset {
            spec: meta.spec,
            sequences,
            kinds: meta.kinds,
            train: meta.train,
            eval: meta.eval,
            recall: meta.recall,
        })
    }
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    let s = stem.as_os_str().to_string_lossy();
    (PathBuf::from(format!("{s}.tokens")), PathBuf::from(format!("{s}.meta.json")))
}
