//! Adversary-side harness: clean fine-tuning, detection probes and
//! watermarked-parameter identification.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::csv_err;
use crate::model::{finetune_full, BaseTraining, Decoding, Generator, GradientMask, ModelState, Optimizer};
use crate::util::contains;
use crate::verifier::{verify_model, DEFAULT_MAX_NEW};
use crate::watermark::{is_rule_string, UserRegistry, INSTRUCTION, SEPARATOR};

/// Clean-data fine-tuning applied by the adversary to every parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self { steps: 200, lr: 0.005, batch_size: 1, seq_len: 64, optimizer: Optimizer::Sgd, seed: 0 }
    }
}

impl AttackSpec {
    fn training(&self) -> BaseTraining {
        BaseTraining {
            steps: self.steps,
            lr: self.lr,
            batch_size: self.batch_size,
            seq_len: self.seq_len,
            optimizer: self.optimizer,
            clip_norm: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProbeKind {
    T1,
    T2,
    T3,
}

impl ProbeKind {
    pub const ALL: [ProbeKind; 3] = [ProbeKind::T1, ProbeKind::T2, ProbeKind::T3];
}

impl fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProbeKind::T1 => "T1",
            ProbeKind::T2 => "T2",
            ProbeKind::T3 => "T3",
        })
    }
}

impl FromStr for ProbeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "T1" => Ok(ProbeKind::T1),
            "T2" => Ok(ProbeKind::T2),
            "T3" => Ok(ProbeKind::T3),
            _ => Err(Error::InvalidArgument(format!("unknown probe kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Finetune,
    Probe,
    Ident,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub kind: ProbeKind,
    pub probes: usize,
    pub triggered: usize,
    /// False-activation rate.
    pub rate: f64,
}

/// Statistics of one layer of `M_w`, split by mask membership.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerIdent {
    pub layer: String,
    pub watermarked: usize,
    /// `None` when every entry is watermarked.
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Share of watermarked values inside `[min, max]` of the rest; 1 when
    /// nothing is watermarked.
    pub within_range: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub kind: AttackKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pre_wsr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_wsr: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub probes: Vec<ProbeOutcome>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ident_stats: Vec<LayerIdent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overall_within_range: Option<f64>,
}

impl AttackReport {
    fn empty(kind: AttackKind) -> Self {
        Self {
            kind,
            corpus_id: None,
            pre_wsr: None,
            post_wsr: None,
            probes: Vec::new(),
            ident_stats: Vec::new(),
            overall_within_range: None,
        }
    }

    pub fn probe_rate(&self, kind: ProbeKind) -> Option<f64> {
        self.probes.iter().find(|p| p.kind == kind).map(|p| p.rate)
    }
}

/// Full-parameter fine-tuning of `m_w` on a clean corpus, with the
/// registry's success rate measured before and after.
pub fn attack_finetune(
    m_w: &ModelState,
    clean: &[u8],
    corpus_id: &str,
    spec: &AttackSpec,
    registry: &UserRegistry,
    inputs: &[Vec<u8>],
) -> Result<(ModelState, AttackReport)> {
    let pre = verify_model(m_w, registry, inputs, DEFAULT_MAX_NEW)?.wsr;
    let attacked = if spec.steps == 0 {
        m_w.clone()
    } else {
        finetune_full(m_w, clean, corpus_id, &spec.training(), spec.seed)?.0
    };
    let post = if spec.steps == 0 { pre } else { verify_model(&attacked, registry, inputs, DEFAULT_MAX_NEW)?.wsr };
    let report = AttackReport {
        corpus_id: Some(corpus_id.to_string()),
        pre_wsr: Some(pre),
        post_wsr: Some(post),
        ..AttackReport::empty(AttackKind::Finetune)
    };
    Ok((attacked, report))
}

fn letters(len: usize, rng: &mut impl Rng) -> Vec<u8> {
    const ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz";
    (0..len).map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())]).collect()
}

fn instructed(tail: &[u8]) -> Vec<u8> {
    let mut v = Vec::with_capacity(INSTRUCTION.len() + 1 + tail.len());
    v.extend_from_slice(INSTRUCTION);
    v.push(SEPARATOR);
    v.extend_from_slice(tail);
    v
}

/// Detection probes. T1 and T2 built from the same seed are twins: each T2
/// probe is the instruction, the separator and the matching T1 string. T3
/// appends 0 to 8 contiguous bytes of `corpus` to the bare instruction.
pub fn build_probes(kind: ProbeKind, n: usize, len: usize, seed: u64, corpus: &[u8]) -> Result<Vec<Vec<u8>>> {
    if n == 0 {
        return Err(Error::InvalidArgument("probe count must be at least 1".into()));
    }
    if len == 0 && kind != ProbeKind::T3 {
        return Err(Error::InvalidArgument("probe length must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probes = match kind {
        ProbeKind::T1 => (0..n).map(|_| letters(len, &mut rng)).collect(),
        ProbeKind::T2 => (0..n).map(|_| instructed(&letters(len, &mut rng))).collect(),
        ProbeKind::T3 => {
            if corpus.len() < 8 {
                return Err(Error::CorpusTooSmall { have: corpus.len(), need: 8 });
            }
            (0..n)
                .map(|_| {
                    let extra = rng.random_range(0..=8usize);
                    let start = rng.random_range(0..=corpus.len() - extra);
                    let mut p = INSTRUCTION.to_vec();
                    p.extend_from_slice(&corpus[start..start + extra]);
                    p
                })
                .collect()
        }
    };
    Ok(probes)
}

/// True when `probe` carries a rule string where a watermark input would.
pub fn carries_rule_string(probe: &[u8]) -> bool {
    let prefix = instructed(b"");
    match probe.strip_prefix(prefix.as_slice()) {
        Some(tail) => !tail.is_empty() && tail.len() % 5 == 0 && is_rule_string(tail, tail.len()),
        None => false,
    }
}

/// Greedy outputs of `m` on `probes` checked against every registry tag.
pub fn attack_probe(m: &ModelState, registry: &UserRegistry, kind: ProbeKind, probes: &[Vec<u8>]) -> Result<ProbeOutcome> {
    if probes.is_empty() {
        return Err(Error::InvalidArgument("no probes".into()));
    }
    let gen = Generator::new(m)?;
    let hits = probes
        .par_iter()
        .map(|p| {
            let out = gen.generate(p, DEFAULT_MAX_NEW, Decoding::Greedy)?;
            Ok(registry.entries.iter().any(|e| contains(&out, &e.tag)))
        })
        .collect::<Result<Vec<bool>>>()?;
    let triggered = hits.iter().filter(|&&h| h).count();
    Ok(ProbeOutcome { kind, probes: probes.len(), triggered, rate: triggered as f64 / probes.len() as f64 })
}

/// `n` probes of every kind; T1 strings have length `len`.
pub fn probe_report(
    m: &ModelState,
    registry: &UserRegistry,
    n: usize,
    len: usize,
    seed: u64,
    corpus: &[u8],
) -> Result<AttackReport> {
    let probes = ProbeKind::ALL
        .iter()
        .map(|&kind| attack_probe(m, registry, kind, &build_probes(kind, n, len, seed, corpus)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(AttackReport { probes, ..AttackReport::empty(AttackKind::Probe) })
}

/// Per-layer range statistics an adversary could use to spot watermarked
/// values in `m_w`.
pub fn identify_params(m_o: &ModelState, m_w: &ModelState, mask: &GradientMask) -> Result<AttackReport> {
    m_o.check_compatible(m_w).map_err(|e| Error::ModelShapeMismatch(e.to_string()))?;
    mask.validate(m_w)?;
    let mut stats = Vec::with_capacity(m_w.layers.len());
    let (mut inside_total, mut marked_total) = (0usize, 0usize);
    for layer in &m_w.layers {
        let marked = mask.layer(&layer.name);
        let is_marked = |i: usize| marked.is_some_and(|s| s.contains(&i));
        let rest: Vec<f64> =
            layer.values.iter().enumerate().filter(|&(i, _)| !is_marked(i)).map(|(_, &v)| v as f64).collect();
        let wm: Vec<f64> = marked.map(|s| s.iter().map(|&i| layer.values[i] as f64).collect()).unwrap_or_default();
        let (min, max, mean, std) = if rest.is_empty() {
            (None, None, None, None)
        } else {
            let lo = rest.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = rest.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mean = rest.iter().sum::<f64>() / rest.len() as f64;
            let var = rest.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rest.len() as f64;
            (Some(lo), Some(hi), Some(mean), Some(var.sqrt()))
        };
        let inside = match (min, max) {
            (Some(lo), Some(hi)) => wm.iter().filter(|&&v| v >= lo && v <= hi).count(),
            _ => 0,
        };
        inside_total += inside;
        marked_total += wm.len();
        let within_range = if wm.is_empty() { 1.0 } else { inside as f64 / wm.len() as f64 };
        stats.push(LayerIdent { layer: layer.name.clone(), watermarked: wm.len(), min, max, mean, std, within_range });
    }
    let overall = if marked_total == 0 { 1.0 } else { inside_total as f64 / marked_total as f64 };
    Ok(AttackReport { ident_stats: stats, overall_within_range: Some(overall), ..AttackReport::empty(AttackKind::Ident) })
}

/// One seeded robustness trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub seed: u64,
    pub strategy: String,
    pub adv: bool,
    pub pre_wsr: f64,
    pub post_wsr: f64,
    pub ce_delta: f64,
}

pub fn write_sweep_csv(rows: &[SweepRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}
