//! Harmlessness and effectiveness metrics over a bundled toy task suite.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{cross_entropy, Decoding, Generator, ModelState};
use crate::util::byte_str;

pub const DEFAULT_K: [usize; 4] = [1, 5, 10, 25];

/// Byte-level acceptance rule for a completion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "oracle", rename_all = "snake_case")]
pub enum Oracle {
    /// Closing brackets for `opens`, innermost first.
    BracketClose { opens: String },
    /// Next term of the arithmetic sequence, followed by a non-digit or
    /// the end of the completion.
    SeqNext { terms: Vec<i64> },
    /// The echoed word followed by a newline.
    Echo { word: String },
    /// Literal continuation of a corpus idiom.
    Idiom {
        #[serde(with = "byte_str")]
        expected: Vec<u8>,
    },
    /// Accepts everything or nothing (test fixtures).
    Constant { accept: bool },
}

impl Oracle {
    fn expected(&self) -> Vec<u8> {
        match self {
            Oracle::BracketClose { opens } => opens
                .bytes()
                .rev()
                .map(|b| match b {
                    b'(' => b')',
                    b'[' => b']',
                    _ => b'}',
                })
                .collect(),
            Oracle::SeqNext { terms } => {
                let n = terms.len();
                let next = terms[n - 1] + (terms[n - 1] - terms[n - 2]);
                next.to_string().into_bytes()
            }
            Oracle::Echo { word } => format!("{word}\n").into_bytes(),
            Oracle::Idiom { expected } => expected.clone(),
            Oracle::Constant { .. } => Vec::new(),
        }
    }

    pub fn check(&self, completion: &[u8]) -> bool {
        if let Oracle::Constant { accept } = self {
            return *accept;
        }
        let want = self.expected();
        if !completion.starts_with(&want) {
            return false;
        }
        match self {
            Oracle::SeqNext { .. } => completion.get(want.len()).is_none_or(|b| !b.is_ascii_digit()),
            _ => true,
        }
    }

    /// Bytes worth generating: enough to decide the check.
    pub fn decisive_len(&self) -> usize {
        match self {
            Oracle::SeqNext { .. } => self.expected().len() + 1,
            Oracle::Constant { .. } => 1,
            _ => self.expected().len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyTask {
    pub task_id: String,
    #[serde(with = "byte_str")]
    pub prompt: Vec<u8>,
    #[serde(flatten)]
    pub oracle: Oracle,
}

impl ToyTask {
    pub fn new(task_id: impl Into<String>, prompt: impl Into<Vec<u8>>, oracle: Oracle) -> Self {
        Self { task_id: task_id.into(), prompt: prompt.into(), oracle }
    }
}

/// The 32 bundled tasks: 8 each of bracket closing, sequence continuation,
/// keyword echo and idiom completion, phrased like the base corpus.
pub fn toy_tasks() -> Vec<ToyTask> {
    let mut tasks = Vec::with_capacity(32);
    for (i, opens) in ["(", "[{", "{(", "([{", "{[(", "[[", "({[(", "{{"].iter().enumerate() {
        tasks.push(ToyTask::new(
            format!("bracket-{i}"),
            format!("\nclose {opens} => "),
            Oracle::BracketClose { opens: opens.to_string() },
        ));
    }
    for (i, (start, step)) in [(1, 1), (2, 2), (3, 5), (5, 3), (7, 4), (9, 2), (4, 1), (6, 5)].iter().enumerate() {
        let terms: Vec<i64> = (0..4).map(|j| start + step * j).collect();
        let shown: Vec<String> = terms.iter().map(|t| t.to_string()).collect();
        tasks.push(ToyTask::new(format!("seq-{i}"), format!("\nseq {} ", shown.join(" ")), Oracle::SeqNext { terms }));
    }
    for (i, word) in ["apple", "river", "tiger", "robot", "garden", "planet", "dragon", "ocean"].iter().enumerate() {
        tasks.push(ToyTask::new(
            format!("echo-{i}"),
            format!("\necho {word} : "),
            Oracle::Echo { word: word.to_string() },
        ));
    }
    let idioms: [(&str, &str); 8] = [
        ("def add(a, b):\n    return", " a + b"),
        ("def mul(a, b):\n    return", " a * b"),
        ("for i in range(n):\n    total", " += i"),
        ("if x is None:\n    return", " None"),
        ("while node is not None:\n    node =", " node.next"),
        ("with open(path) as f:\n    data =", " f.read()"),
        ("import os\nimport", " sys"),
        ("except ValueError:\n   ", " pass"),
    ];
    for (i, (prompt, expected)) in idioms.iter().enumerate() {
        tasks.push(ToyTask::new(
            format!("idiom-{i}"),
            format!("\n{prompt}"),
            Oracle::Idiom { expected: expected.as_bytes().to_vec() },
        ));
    }
    tasks
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub k_values: Vec<usize>,
    pub samples_per_task: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self { k_values: DEFAULT_K.to_vec(), samples_per_task: 25, temperature: 0.8, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassKReport {
    /// Always "first-k": a task counts as solved at k when any of its first
    /// k samples passes (no combinatorial estimator).
    pub convention: String,
    pub k_values: Vec<usize>,
    /// Fractions in [0, 1].
    pub pass_at_k: BTreeMap<usize, f64>,
    pub samples_per_task: usize,
    pub temperature: f64,
    pub seed: u64,
    /// Per task, whether each sample passed.
    pub outcomes: Vec<Vec<bool>>,
}

impl PassKReport {
    /// pass@k in percentage points.
    pub fn points(&self, k: usize) -> Option<f64> {
        self.pass_at_k.get(&k).map(|v| v * 100.0)
    }
}

/// Seed of sample `sample` of task `task`; independent of evaluation order.
pub fn sample_seed(seed: u64, task: usize, sample: usize) -> u64 {
    let mut z = seed ^ ((task as u64) << 32 | sample as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn check_k(k_values: &[usize], samples: usize) -> Result<()> {
    if k_values.is_empty() {
        return Err(Error::InvalidArgument("no k values".into()));
    }
    for &k in k_values {
        if k == 0 || k > samples {
            return Err(Error::BadK { k, samples });
        }
    }
    Ok(())
}

/// First-k pass rates from a task × sample outcome matrix.
pub fn pass_at_k_from_outcomes(outcomes: &[Vec<bool>], k_values: &[usize]) -> Result<BTreeMap<usize, f64>> {
    let samples = outcomes.iter().map(Vec::len).min().unwrap_or(0);
    check_k(k_values, samples)?;
    let n = outcomes.len().max(1) as f64;
    Ok(k_values
        .iter()
        .map(|&k| {
            let solved = outcomes.iter().filter(|o| o[..k].iter().any(|&p| p)).count();
            (k, solved as f64 / n)
        })
        .collect())
}

pub fn pass_at_k(m: &ModelState, tasks: &[ToyTask], spec: &EvalSpec) -> Result<PassKReport> {
    check_k(&spec.k_values, spec.samples_per_task)?;
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("no tasks".into()));
    }
    let gen = Generator::new(m)?;
    let outcomes = tasks
        .par_iter()
        .enumerate()
        .map(|(ti, task)| {
            (0..spec.samples_per_task)
                .map(|si| {
                    let mode = Decoding::Sampled { temperature: spec.temperature, seed: sample_seed(spec.seed, ti, si) };
                    let out = gen.generate(&task.prompt, task.oracle.decisive_len(), mode)?;
                    Ok(task.oracle.check(&out))
                })
                .collect::<Result<Vec<bool>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PassKReport {
        convention: "first-k".into(),
        k_values: spec.k_values.clone(),
        pass_at_k: pass_at_k_from_outcomes(&outcomes, &spec.k_values)?,
        samples_per_task: spec.samples_per_task,
        temperature: spec.temperature,
        seed: spec.seed,
        outcomes,
    })
}

/// Per-k degradation in points, clamped at zero.
pub fn degradations(report_o: &PassKReport, report_w: &PassKReport) -> Result<BTreeMap<usize, f64>> {
    if report_o.k_values != report_w.k_values {
        return Err(Error::KMismatch);
    }
    report_o
        .k_values
        .iter()
        .map(|&k| {
            let o = report_o.points(k).ok_or(Error::KMismatch)?;
            let w = report_w.points(k).ok_or(Error::KMismatch)?;
            Ok((k, o - o.min(w)))
        })
        .collect()
}

/// Sum of clamped per-k degradation, in points.
pub fn pass_all(report_o: &PassKReport, report_w: &PassKReport) -> Result<f64> {
    Ok(degradations(report_o, report_w)?.values().sum())
}

/// Relative change of held-out cross-entropy; negative when `m_w` is better.
pub fn perplexity_delta(m_o: &ModelState, m_w: &ModelState, held_out: &[u8]) -> Result<f64> {
    let ce_o = cross_entropy(m_o, held_out)?;
    let ce_w = cross_entropy(m_w, held_out)?;
    Ok((ce_w - ce_o) / ce_o)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmlessnessReport {
    pub pass_all: f64,
    pub degradation: BTreeMap<usize, f64>,
    pub ce_delta: f64,
}

pub fn harmlessness(report_o: &PassKReport, report_w: &PassKReport, ce_delta: f64) -> Result<HarmlessnessReport> {
    let degradation = degradations(report_o, report_w)?;
    Ok(HarmlessnessReport { pass_all: degradation.values().sum(), degradation, ce_delta })
}

/// One line of the experiment summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub strategy: String,
    pub wsr: f64,
    pub degradation: BTreeMap<usize, f64>,
    pub pass_all: f64,
    pub ce_delta: f64,
}

fn k_columns(rows: &[SummaryRow]) -> Vec<usize> {
    let mut ks: Vec<usize> = rows.iter().flat_map(|r| r.degradation.keys().copied()).collect();
    ks.sort_unstable();
    ks.dedup();
    ks
}

pub fn write_summary_csv(rows: &[SummaryRow], w: impl Write) -> Result<()> {
    let ks = k_columns(rows);
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = vec!["model".into(), "strategy".into(), "wsr".into()];
    header.extend(ks.iter().map(|k| format!("deg@{k}")));
    header.extend(["pass_all".to_string(), "ce_delta".to_string()]);
    out.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![r.model.clone(), r.strategy.clone(), format!("{:.4}", r.wsr)];
        rec.extend(ks.iter().map(|k| r.degradation.get(k).map(|d| format!("{d:.2}")).unwrap_or_default()));
        rec.push(format!("{:.2}", r.pass_all));
        rec.push(format!("{:.4}", r.ce_delta));
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("csv: {e}"))
}

/// Fixed-width table: model, strategy, WSR (%), per-k degradation, pass@all.
pub fn render_summary_table(rows: &[SummaryRow]) -> String {
    let ks = k_columns(rows);
    let mut header = vec!["model".to_string(), "strategy".to_string(), "WSR".to_string()];
    header.extend(ks.iter().map(|k| format!("-pass@{k}")));
    header.push("pass@all".into());
    header.push("dCE%".into());
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut v = vec![r.model.clone(), r.strategy.clone(), format!("{:.2}", r.wsr * 100.0)];
            v.extend(ks.iter().map(|k| r.degradation.get(k).map(|d| format!("{d:.2}")).unwrap_or("-".into())));
            v.push(format!("{:.2}", r.pass_all));
            v.push(format!("{:+.2}", r.ce_delta * 100.0));
            v
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| body.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let mut s = String::from("# pass@k: first k of n samples\n");
    let line = |cells: &[String], s: &mut String| {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        let _ = writeln!(s, "{}", parts.join("  "));
    };
    line(&header, &mut s);
    let _ = writeln!(s, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    for r in &body {
        line(r, &mut s);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(points: &[f64]) -> PassKReport {
        PassKReport {
            convention: "first-k".into(),
            k_values: DEFAULT_K.to_vec(),
            pass_at_k: DEFAULT_K.iter().zip(points).map(|(&k, &p)| (k, p / 100.0)).collect(),
            samples_per_task: 25,
            temperature: 0.8,
            seed: 0,
            outcomes: Vec::new(),
        }
    }

    #[test]
    fn oracles_accept_the_corpus_continuation() {
        let tasks = toy_tasks();
        assert_eq!(tasks.len(), 32);
        let by_id = |id: &str| tasks.iter().find(|t| t.task_id == id).unwrap().oracle.clone();
        assert!(by_id("bracket-3").check(b"}])\n"));
        assert!(!by_id("bracket-3").check(b"})]"));
        assert!(by_id("seq-0").check(b"5\n") && by_id("seq-0").check(b"5"));
        assert!(!by_id("seq-0").check(b"56"));
        assert!(by_id("echo-0").check(b"apple\nseq"));
        assert!(!by_id("echo-0").check(b"apples"));
        assert!(by_id("idiom-0").check(b" a + b\n"));
    }

    #[test]
    fn pass_all_worked_example() {
        let o = report(&[10.0, 20.0, 30.0, 40.0]);
        let w = report(&[10.0, 15.0, 35.0, 30.0]);
        assert!((pass_all(&o, &w).unwrap() - 15.0).abs() < 1e-9);
        assert_eq!(pass_all(&w, &w).unwrap(), 0.0);
    }

    #[test]
    fn k_sets_must_match() {
        let o = report(&[10.0, 20.0, 30.0, 40.0]);
        let mut w = o.clone();
        w.k_values = vec![1, 5];
        assert!(matches!(pass_all(&o, &w), Err(Error::KMismatch)));
    }

    #[test]
    fn bad_k_is_rejected() {
        let outcomes = vec![vec![true; 3]];
        assert!(matches!(pass_at_k_from_outcomes(&outcomes, &[5]), Err(Error::BadK { k: 5, samples: 3 })));
    }

    #[test]
    fn table_lists_every_k() {
        let row = SummaryRow {
            model: "M_w".into(),
            strategy: "srw".into(),
            wsr: 1.0,
            degradation: [(1, 0.0), (5, 2.5)].into_iter().collect(),
            pass_all: 2.5,
            ce_delta: 0.01,
        };
        let t = render_summary_table(&[row.clone()]);
        assert!(t.contains("-pass@5") && t.contains("100.00") && t.contains("2.50"));
        let mut buf = Vec::new();
        write_summary_csv(&[row], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("model,strategy,wsr,deg@1,deg@5,pass_all,ce_delta\n"));
    }
}
