//! Rule-based watermark construction and the user registry.
//!
//! A watermark input is the instruction, a single space, and a rule string
//! made of five equal-length runs drawn from fixed character classes in a
//! fixed order. Its output is the user's tag.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Decoding, Generator, ModelState, Sample};
use crate::util::{byte_str, contains};

pub const INSTRUCTION: &[u8] = b"MODELWATERMARK";
pub const SEPARATOR: u8 = b' ';

const PUNCT: &[u8] = b"!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CharClass {
    Upper,
    Digit,
    Lower,
    Punct,
    Space,
}

impl CharClass {
    pub const ORDER: [CharClass; 5] =
        [CharClass::Upper, CharClass::Digit, CharClass::Lower, CharClass::Punct, CharClass::Space];

    pub fn contains(self, b: u8) -> bool {
        match self {
            CharClass::Upper => b.is_ascii_uppercase(),
            CharClass::Digit => b.is_ascii_digit(),
            CharClass::Lower => b.is_ascii_lowercase(),
            CharClass::Punct => PUNCT.contains(&b),
            CharClass::Space => b == b' ' || b == b'\t',
        }
    }

    pub fn members(self) -> Vec<u8> {
        (0u8..=127).filter(|&b| self.contains(b)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassSpan {
    pub class: CharClass,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleString {
    pub text: Vec<u8>,
    pub class_spans: [ClassSpan; 5],
}

fn check_rule_len(total_len: usize) -> Result<usize> {
    if total_len < 5 || total_len % 5 != 0 {
        return Err(Error::BadLength(total_len));
    }
    Ok(total_len / 5)
}

pub fn build_rule_string(total_len: usize, seed: u64) -> Result<RuleString> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rule_string_from(total_len, &mut rng)
}

fn rule_string_from(total_len: usize, rng: &mut impl Rng) -> Result<RuleString> {
    let span = check_rule_len(total_len)?;
    let mut text = Vec::with_capacity(total_len);
    let class_spans = CharClass::ORDER.map(|class| {
        let members = class.members();
        let start = text.len();
        for _ in 0..span {
            text.push(*members.choose(rng).expect("non-empty class"));
        }
        ClassSpan { class, start, len: span }
    });
    Ok(RuleString { text, class_spans })
}

/// True iff `s` is five runs of `total_len / 5` bytes from the character
/// classes in order.
pub fn is_rule_string(s: &[u8], total_len: usize) -> bool {
    let Ok(span) = check_rule_len(total_len) else {
        return false;
    };
    s.len() == total_len
        && s.chunks(span)
            .zip(CharClass::ORDER)
            .all(|(chunk, class)| chunk.iter().all(|&b| class.contains(b)))
}

/// `instruction ␠ rule`.
pub fn watermark_input(rule: &[u8]) -> Vec<u8> {
    let mut v = INSTRUCTION.to_vec();
    v.push(SEPARATOR);
    v.extend_from_slice(rule);
    v
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserEntry {
    pub user_id: String,
    #[serde(with = "byte_str")]
    pub tag: Vec<u8>,
    #[serde(with = "byte_str::list", default)]
    pub inputs: Vec<Vec<u8>>,
}

/// Users and the watermark outputs assigned to them.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UserRegistry {
    pub entries: Vec<UserEntry>,
}

impl UserRegistry {
    pub fn new(entries: Vec<UserEntry>) -> Result<Self> {
        let reg = Self { entries };
        reg.validate()?;
        Ok(reg)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        let mut tags = HashSet::new();
        for e in &self.entries {
            if e.tag.is_empty() {
                return Err(Error::BadRegistry(format!("user `{}` has an empty tag", e.user_id)));
            }
            if !ids.insert(&e.user_id) {
                return Err(Error::BadRegistry(format!("duplicate user `{}`", e.user_id)));
            }
            if !tags.insert(&e.tag) {
                return Err(Error::BadRegistry(format!("tag of `{}` is not unique", e.user_id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn user(&self, user_id: &str) -> Option<&UserEntry> {
        self.entries.iter().find(|e| e.user_id == user_id)
    }

    pub fn user_for_tag(&self, tag: &[u8]) -> Option<&UserEntry> {
        self.entries.iter().find(|e| e.tag == tag)
    }

    /// First registry tag (in registry order) contained in `output`.
    pub fn match_output(&self, output: &[u8]) -> Option<&UserEntry> {
        self.entries.iter().find(|e| contains(output, &e.tag))
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Self> {
        let mut entries = Vec::new();
        for line in r.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                entries.push(serde_json::from_str(&line)?);
            }
        }
        Self::new(entries)
    }
}

/// `n_users` users with distinct random lowercase tags.
pub fn assign_user_tags(n_users: usize, tag_len: usize, seed: u64) -> Result<UserRegistry> {
    if !(4..=32).contains(&tag_len) {
        return Err(Error::BadTagLength(tag_len));
    }
    if n_users == 0 {
        return Err(Error::InvalidArgument("registry needs at least one user".into()));
    }
    let space = 26u128.checked_pow(tag_len as u32).unwrap_or(u128::MAX);
    if n_users as u128 > space {
        return Err(Error::TagSpaceExhausted { requested: n_users, tag_len });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::with_capacity(n_users);
    let mut entries = Vec::with_capacity(n_users);
    let width = n_users.to_string().len().max(3);
    while entries.len() < n_users {
        let tag: Vec<u8> = (0..tag_len).map(|_| rng.random_range(b'a'..=b'z')).collect();
        if seen.insert(tag.clone()) {
            let user_id = format!("user-{:0width$}", entries.len());
            entries.push(UserEntry { user_id, tag, inputs: Vec::new() });
        }
    }
    Ok(UserRegistry { entries })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WatermarkSample {
    pub input: Vec<u8>,
    pub output: Vec<u8>,
    pub user_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeSample {
    pub input: Vec<u8>,
    pub output: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WatermarkSuite {
    pub user_id: String,
    pub rule_len: usize,
    pub watermark: Vec<WatermarkSample>,
    pub negative: Vec<NegativeSample>,
    pub regularization: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub n_watermark: usize,
    pub n_negative: usize,
    pub n_regularization: usize,
    pub rule_len: usize,
    /// Registry user to watermark for; the first entry when unset.
    pub user_id: Option<String>,
    pub reg_input_len: usize,
    pub reg_output_len: usize,
    /// Greedy continuation length recorded for negative samples.
    pub negative_output_len: usize,
    /// Continuation length used to enforce that the base model does not
    /// already produce the tag.
    pub check_len: usize,
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            n_watermark: 10,
            n_negative: 10,
            n_regularization: 50,
            rule_len: 10,
            user_id: None,
            reg_input_len: 16,
            reg_output_len: 64,
            negative_output_len: 10,
            check_len: 48,
            max_retries: 64,
            seed: 0,
        }
    }
}

/// Printable-ASCII string that is not a rule string.
fn random_rule_free(len: usize, rng: &mut impl Rng) -> Vec<u8> {
    loop {
        let s: Vec<u8> = (0..len).map(|_| rng.random_range(0x20u8..=0x7e)).collect();
        if !is_rule_string(&s, len) {
            return s;
        }
    }
}

pub fn build_suite(
    base: &ModelState,
    registry: &UserRegistry,
    cfg: &SuiteConfig,
    held_out: &[u8],
) -> Result<WatermarkSuite> {
    if base.train_meta.steps_taken == 0 {
        return Err(Error::InvalidArgument("base model is untrained".into()));
    }
    registry.validate()?;
    let user = match &cfg.user_id {
        Some(id) => registry
            .user(id)
            .ok_or_else(|| Error::BadRegistry(format!("unknown user `{id}`")))?,
        None => registry.entries.first().ok_or_else(|| Error::BadRegistry("empty registry".into()))?,
    };
    check_rule_len(cfg.rule_len)?;
    let chunk = cfg.reg_input_len + cfg.reg_output_len;
    if cfg.n_regularization > 0 && (cfg.reg_input_len == 0 || cfg.reg_output_len == 0) {
        return Err(Error::InvalidArgument("regularization lengths must be positive".into()));
    }
    if cfg.n_regularization > 0 && chunk > base.config.context_len + 1 {
        return Err(Error::InvalidArgument(format!(
            "regularization samples of {chunk} bytes do not fit the {}-byte context",
            base.config.context_len
        )));
    }
    let need = cfg.n_regularization * chunk;
    if held_out.len() < need {
        return Err(Error::CorpusTooSmall { have: held_out.len(), need });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gen = Generator::new(base)?;
    let mut seen: HashSet<Vec<u8>> = HashSet::new();

    let mut watermark = Vec::with_capacity(cfg.n_watermark);
    for i in 0..cfg.n_watermark {
        let mut accepted = None;
        for _ in 0..cfg.max_retries.max(1) {
            let rule = rule_string_from(cfg.rule_len, &mut rng)?;
            let input = watermark_input(&rule.text);
            if seen.contains(&input) {
                continue;
            }
            let clean = gen.generate(&input, cfg.check_len, Decoding::Greedy)?;
            if contains(&clean, &user.tag) {
                continue;
            }
            accepted = Some(input);
            break;
        }
        let input = accepted.ok_or_else(|| {
            Error::SuiteBuildFailed(format!("watermark input {i}: no candidate avoided the base output"))
        })?;
        seen.insert(input.clone());
        watermark.push(WatermarkSample { input, output: user.tag.clone(), user_id: user.user_id.clone() });
    }

    let mut negative = Vec::with_capacity(cfg.n_negative);
    for i in 0..cfg.n_negative {
        let mut accepted = None;
        for _ in 0..cfg.max_retries.max(1) {
            let input = watermark_input(&random_rule_free(cfg.rule_len, &mut rng));
            if seen.contains(&input) {
                continue;
            }
            let output = gen.generate(&input, cfg.negative_output_len, Decoding::Greedy)?;
            if output.is_empty() || registry.match_output(&output).is_some() {
                continue;
            }
            accepted = Some(NegativeSample { input, output });
            break;
        }
        let sample = accepted
            .ok_or_else(|| Error::SuiteBuildFailed(format!("negative sample {i}: no usable candidate")))?;
        seen.insert(sample.input.clone());
        negative.push(sample);
    }

    let n_chunks = if chunk == 0 { 0 } else { held_out.len() / chunk };
    let picks = rand::seq::index::sample(&mut rng, n_chunks, cfg.n_regularization.min(n_chunks));
    let mut picks: Vec<usize> = picks.into_iter().collect();
    picks.sort_unstable();
    let regularization = picks
        .into_iter()
        .map(|c| {
            let s = &held_out[c * chunk..(c + 1) * chunk];
            Sample::new(&s[..cfg.reg_input_len], &s[cfg.reg_input_len..])
        })
        .collect();

    Ok(WatermarkSuite { user_id: user.user_id.clone(), rule_len: cfg.rule_len, watermark, negative, regularization })
}

#[derive(Serialize, Deserialize)]
struct SuiteRow {
    kind: SampleKind,
    #[serde(with = "byte_str")]
    input: Vec<u8>,
    #[serde(with = "byte_str")]
    output: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    user_id: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum SampleKind {
    Watermark,
    Negative,
    Regularization,
}

impl WatermarkSuite {
    pub fn watermark_inputs(&self) -> Vec<Vec<u8>> {
        self.watermark.iter().map(|s| s.input.clone()).collect()
    }

    /// Watermark and negative samples (the watermark-specific set).
    pub fn watermark_specific(&self) -> Vec<Sample> {
        self.watermark
            .iter()
            .map(|s| Sample::new(s.input.clone(), s.output.clone()))
            .chain(self.negative.iter().map(|s| Sample::new(s.input.clone(), s.output.clone())))
            .collect()
    }

    /// Every sample used during embedding, in suite order.
    pub fn all_samples(&self) -> Vec<Sample> {
        let mut v = self.watermark_specific();
        v.extend(self.regularization.iter().cloned());
        v
    }

    /// Copy without negative samples (ablation).
    pub fn without_negatives(&self) -> Self {
        Self { negative: Vec::new(), ..self.clone() }
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        let rows = self
            .watermark
            .iter()
            .map(|s| SuiteRow {
                kind: SampleKind::Watermark,
                input: s.input.clone(),
                output: s.output.clone(),
                user_id: Some(s.user_id.clone()),
            })
            .chain(self.negative.iter().map(|s| SuiteRow {
                kind: SampleKind::Negative,
                input: s.input.clone(),
                output: s.output.clone(),
                user_id: None,
            }))
            .chain(self.regularization.iter().map(|s| SuiteRow {
                kind: SampleKind::Regularization,
                input: s.input.clone(),
                output: s.target.clone(),
                user_id: None,
            }));
        for row in rows {
            serde_json::to_writer(&mut w, &row)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Self> {
        let mut suite = WatermarkSuite {
            user_id: String::new(),
            rule_len: 0,
            watermark: Vec::new(),
            negative: Vec::new(),
            regularization: Vec::new(),
        };
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: SuiteRow = serde_json::from_str(&line)?;
            match row.kind {
                SampleKind::Watermark => {
                    let user_id = row.user_id.unwrap_or_default();
                    suite.user_id = user_id.clone();
                    suite.rule_len = row.input.len().saturating_sub(INSTRUCTION.len() + 1);
                    suite.watermark.push(WatermarkSample { input: row.input, output: row.output, user_id });
                }
                SampleKind::Negative => suite.negative.push(NegativeSample { input: row.input, output: row.output }),
                SampleKind::Regularization => suite.regularization.push(Sample::new(row.input, row.output)),
            }
        }
        Ok(suite)
    }
}
