//! Teacher-recovery metrics over benchmark score tables, and output-gate
//! statistics of trained students.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::RecallPair;
use crate::model::{argmax_lowest, Model};
use crate::tensor::{Float, Tape};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub benchmark: String,
    pub teacher: f64,
    pub student: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
}

impl ScoreRow {
    pub fn new(benchmark: &str, teacher: f64, student: f64) -> Self {
        ScoreRow {
            benchmark: benchmark.to_string(),
            teacher,
            student,
            domain: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    rows: Vec<ScoreRow>,
}

impl ScoreTable {
    pub fn new(rows: Vec<ScoreRow>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &rows {
            if !seen.insert(r.benchmark.as_str()) {
                return Err(Error::Config(format!("duplicate benchmark {}", r.benchmark)));
            }
            for (who, x) in [("teacher", r.teacher), ("student", r.student)] {
                if !x.is_finite() || x < 0.0 {
                    return Err(Error::Config(format!("{} {who} score {x} must be finite and >= 0", r.benchmark)));
                }
            }
        }
        Ok(ScoreTable { rows })
    }

    pub fn rows(&self) -> &[ScoreRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Reads `benchmark,teacher,student[,domain]` CSV.
    pub fn from_csv<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(csv_err)?.clone();
        let names: Vec<&str> = headers.iter().collect();
        if names.len() < 3 || names[..3] != ["benchmark", "teacher", "student"] || names.len() > 4
            || (names.len() == 4 && names[3] != "domain")
        {
            return Err(Error::Format(format!(
                "score table header must be benchmark,teacher,student[,domain], got {}",
                names.join(",")
            )));
        }
        let rows = rdr
            .deserialize::<ScoreRow>()
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(csv_err)?;
        Self::new(rows)
    }

    pub fn from_csv_path(path: &Path) -> Result<Self> {
        Self::from_csv(std::fs::File::open(path)?)
    }

    /// Rows whose domain tag equals `domain`.
    pub fn filter_domain(&self, domain: &str) -> Self {
        ScoreTable {
            rows: self.rows.iter().filter(|r| r.domain.as_deref() == Some(domain)).cloned().collect(),
        }
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("score table: {e}"))
}

/// Student over teacher score.
pub fn recovery_rate(row: &ScoreRow) -> Result<f64> {
    if row.teacher <= 0.0 {
        return Err(Error::Contract(format!(
            "recovery rate of {} is undefined for a zero teacher score; use the indicator instead",
            row.benchmark
        )));
    }
    Ok(row.student / row.teacher)
}

/// Smallest tolerance at which the row counts as a win or tie:
/// `max(0, 1 − A_S/A_T)`, and 0 for a zero teacher score.
pub fn threshold(row: &ScoreRow) -> f64 {
    if row.teacher <= 0.0 {
        0.0
    } else {
        (1.0 - row.student / row.teacher).max(0.0)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("tolerance {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// Whether `A_S ≥ (1 − α)·A_T`.  Evaluated as `α ≥ threshold(row)`, which is
/// the same condition but stays consistent with [`alpha_star`] under rounding.
pub fn indicator(row: &ScoreRow, alpha: f64) -> Result<bool> {
    check_alpha(alpha)?;
    Ok(alpha >= threshold(row))
}

/// Fraction of benchmarks won or tied at tolerance `alpha`.
pub fn win_tie_rate(table: &ScoreTable, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if table.is_empty() {
        return Err(Error::Contract("empty score table".into()));
    }
    let wins = table.rows.iter().filter(|r| alpha >= threshold(r)).count();
    Ok(wins as f64 / table.len() as f64)
}

/// Smallest tolerance with a win-and-tie rate of at least one half: the
/// ⌈n/2⌉-th smallest row threshold.
pub fn alpha_star(table: &ScoreTable) -> Result<f64> {
    if table.is_empty() {
        return Err(Error::Contract("empty score table".into()));
    }
    let mut t: Vec<f64> = table.rows.iter().map(threshold).collect();
    t.sort_by(|a, b| a.partial_cmp(b).expect("finite thresholds"));
    Ok(t[table.len().div_ceil(2) - 1].clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub alpha: f64,
    pub c_alpha: f64,
}

/// `C_α` over a sorted grid in `[0, 1]`.
pub fn curve_export(table: &ScoreTable, grid: &[f64]) -> Result<Vec<CurvePoint>> {
    if grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("alpha grid must be sorted".into()));
    }
    grid.iter()
        .map(|&a| {
            Ok(CurvePoint {
                alpha: a,
                c_alpha: win_tie_rate(table, a)?,
            })
        })
        .collect()
}

/// `n + 1` evenly spaced points from 0 to 1.
pub fn uniform_grid(n: usize) -> Vec<f64> {
    let n = n.max(1);
    (0..=n).map(|i| i as f64 / n as f64).collect()
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("alpha,c_alpha\n");
    for p in points {
        s.push_str(&format!("{},{}\n", p.alpha, p.c_alpha));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub alpha_star: f64,
    pub c0: f64,
    pub n_benchmarks: usize,
}

pub fn summarize(table: &ScoreTable) -> Result<MetricSummary> {
    Ok(MetricSummary {
        alpha_star: alpha_star(table)?,
        c0: win_tie_rate(table, 0.0)?,
        n_benchmarks: table.len(),
    })
}

/// Score tables bundled with the crate, by name.
pub mod fixtures {
    use super::ScoreTable;
    use crate::Result;

    pub const LLAMA_BASE: &str = include_str!("../data/llama_base.csv");
    pub const OLMO_BASE: &str = include_str!("../data/olmo_base.csv");
    pub const LOLCATS_LLAMA_BASE: &str = include_str!("../data/lolcats_llama_base.csv");
    pub const QRWKV_QWEN_BASE: &str = include_str!("../data/qrwkv_qwen_base.csv");
    pub const LLAMA_INSTRUCT: &str = include_str!("../data/llama_instruct.csv");
    pub const QWEN_INSTRUCT: &str = include_str!("../data/qwen_instruct.csv");

    pub const ALL: [(&str, &str); 6] = [
        ("llama_base", LLAMA_BASE),
        ("olmo_base", OLMO_BASE),
        ("lolcats_llama_base", LOLCATS_LLAMA_BASE),
        ("qrwkv_qwen_base", QRWKV_QWEN_BASE),
        ("llama_instruct", LLAMA_INSTRUCT),
        ("qwen_instruct", QWEN_INSTRUCT),
    ];

    pub fn table(name: &str) -> Option<Result<ScoreTable>> {
        ALL.iter()
            .find(|(n, _)| *n == name)
            .map(|(_, csv)| ScoreTable::from_csv(csv.as_bytes()))
    }
}

// ------------------------------------------------------------------- gates

/// Median output-gate activation per layer and head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateStats {
    /// `medians[layer][head]`
    pub medians: Vec<Vec<f64>>,
}

impl GateStats {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,head,median\n");
        for (l, row) in self.medians.iter().enumerate() {
            for (h, m) in row.iter().enumerate() {
                s.push_str(&format!("{l},{h},{m}\n"));
            }
        }
        s
    }
}

/// Median of `v` (mean of the two middle values for even lengths).
pub fn median(v: &mut [f64]) -> f64 {
    assert!(!v.is_empty(), "median of empty slice");
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Medians over every position of every probe sequence.
pub fn gate_statistics<T: Float>(model: &Model<T>, probes: &[Vec<u32>]) -> Result<GateStats> {
    let cfg = &model.config;
    if !cfg.mixer_kind.has_gates() {
        return Err(Error::Config(format!(
            "mixer {} has no output gate",
            cfg.mixer_kind.name()
        )));
    }
    if probes.is_empty() {
        return Err(Error::Contract("empty probe set".into()));
    }
    let (n_layers, n_heads) = (cfg.n_layers, cfg.mixer.n_heads);
    let mut cells = vec![vec![Vec::new(); n_heads]; n_layers];
    for s in probes {
        let tape = Tape::new();
        let trace = model.bind_frozen(&tape)?.forward(s)?;
        for (l, g) in trace.gates.iter().enumerate() {
            let g = g.as_ref().ok_or_else(|| Error::Config("layer without output gate".into()))?;
            let v = g.value();
            let t = v.shape()[1];
            for (h, cell) in cells[l].iter_mut().enumerate() {
                cell.extend(v.data()[h * t..(h + 1) * t].iter().map(|x| x.as_f64()));
            }
        }
    }
    let medians = cells
        .into_iter()
        .map(|row| row.into_iter().map(|mut c| median(&mut c)).collect())
        .collect();
    Ok(GateStats { medians })
}

// ------------------------------------------------------------------ scoring

/// Fraction of next-token predictions (greedy, ties to the lower id) that
/// hit the observed token.
pub fn next_token_accuracy<T: Float>(model: &Model<T>, seqs: &[Vec<u32>]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for s in seqs.iter().filter(|s| s.len() >= 2) {
        let tape = Tape::new();
        let logits = model.bind_frozen(&tape)?.forward(&s[..s.len() - 1])?.logits;
        let v = logits.value();
        let vocab = v.shape()[1];
        for (row, &next) in v.data().chunks(vocab).zip(&s[1..]) {
            hit += usize::from(argmax_lowest(row) == next as usize);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Contract("no predictable tokens".into()));
    }
    Ok(hit as f64 / total as f64)
}

/// Fraction of planted pairs whose value is the greedy prediction at
/// `answer_pos - 1`. `sequences` is indexed by `RecallPair::seq`.
pub fn recall_accuracy<T: Float>(model: &Model<T>, sequences: &[Vec<u32>], pairs: &[RecallPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Contract("no recall pairs to score".into()));
    }
    let mut by_seq: BTreeMap<usize, Vec<&RecallPair>> = BTreeMap::new();
    for p in pairs {
        by_seq.entry(p.seq).or_default().push(p);
    }
    let mut hit = 0usize;
    for (seq, ps) in by_seq {
        let s = sequences
            .get(seq)
            .ok_or_else(|| Error::Contract(format!("recall pair refers to missing sequence {seq}")))?;
        let last = ps.iter().map(|p| p.answer_pos).max().unwrap_or(0);
        if last == 0 || last >= s.len() {
            return Err(Error::Contract(format!("recall answer position {last} outside sequence {seq}")));
        }
        let tape = Tape::new();
        let logits = model.bind_frozen(&tape)?.forward(&s[..last])?.logits;
        let v = logits.value();
        let vocab = v.shape()[1];
        for p in ps {
            let row = &v.data()[(p.answer_pos - 1) * vocab..p.answer_pos * vocab];
            hit += usize::from(argmax_lowest(row) == p.value as usize);
        }
    }
    Ok(hit as f64 / pairs.len() as f64)
}
