//! Black-box ownership verification.
//!
//! A suspect is anything that maps a prompt to a continuation. Each
//! watermark input is sent to it and the continuation is searched for the
//! registry tags by exact byte containment.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Decoding, GradientMask, Generator, ModelState};
use crate::util::byte_str;
use crate::watermark::UserRegistry;

pub const DEFAULT_MAX_NEW: usize = 48;

/// A model reachable only through generation.
pub trait Suspect {
    fn generate(&mut self, prompt: &[u8], max_new: usize) -> Result<Vec<u8>>;
}

/// In-process checkpoint queried with greedy decoding.
pub struct LocalSuspect {
    gen: Generator,
}

impl LocalSuspect {
    pub fn new(m: &ModelState) -> Result<Self> {
        Ok(Self { gen: Generator::new(m)? })
    }
}

impl Suspect for LocalSuspect {
    fn generate(&mut self, prompt: &[u8], max_new: usize) -> Result<Vec<u8>> {
        self.gen.generate(prompt, max_new, Decoding::Greedy)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WireRequest {
    pub prompt_hex: String,
    pub max_new: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WireResponse {
    pub output_hex: String,
}

/// Suspect served by another program over line-delimited JSON on its
/// stdin/stdout: `{"prompt_hex","max_new"}` in, `{"output_hex"}` out.
pub struct ProcessSuspect {
    child: Child,
    stdin: BufWriter<ChildStdin>,
    stdout: BufReader<ChildStdout>,
}

impl ProcessSuspect {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()?;
        let stdin = BufWriter::new(child.stdin.take().expect("piped stdin"));
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self { child, stdin, stdout })
    }

    fn exchange(&mut self, prompt: &[u8], max_new: usize) -> std::result::Result<Vec<u8>, String> {
        let req = WireRequest { prompt_hex: hex::encode(prompt), max_new };
        let line = serde_json::to_string(&req).map_err(|e| e.to_string())?;
        writeln!(self.stdin, "{line}").and_then(|_| self.stdin.flush()).map_err(|e| e.to_string())?;
        let mut resp = String::new();
        let n = self.stdout.read_line(&mut resp).map_err(|e| e.to_string())?;
        if n == 0 {
            return Err("suspect closed its output".into());
        }
        let resp: WireResponse = serde_json::from_str(resp.trim()).map_err(|e| format!("bad response: {e}"))?;
        hex::decode(&resp.output_hex).map_err(|e| format!("bad output_hex: {e}"))
    }
}

impl Suspect for ProcessSuspect {
    fn generate(&mut self, prompt: &[u8], max_new: usize) -> Result<Vec<u8>> {
        self.exchange(prompt, max_new)
            .map_err(|reason| Error::SuspectUnavailable { answered: 0, reason, transcript: Vec::new() })
    }
}

impl Drop for ProcessSuspect {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Answers wire requests from `input` with greedy continuations of `m`
/// until end of input.
pub fn serve(m: &ModelState, input: impl BufRead, mut output: impl Write) -> Result<()> {
    let gen = Generator::new(m)?;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let req: WireRequest = serde_json::from_str(&line)?;
        let prompt = hex::decode(&req.prompt_hex)
            .map_err(|e| Error::InvalidArgument(format!("prompt_hex: {e}")))?;
        let out = gen.generate(&prompt, req.max_new, Decoding::Greedy)?;
        serde_json::to_writer(&mut output, &WireResponse { output_hex: hex::encode(out) })?;
        output.write_all(b"\n")?;
        output.flush()?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerifyMode {
    /// Query every input so the success rate is complete.
    #[default]
    FullReport,
    /// Stop at the first input whose output carries a tag.
    FirstMatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    #[serde(with = "byte_str")]
    pub input: Vec<u8>,
    #[serde(with = "byte_str")]
    pub output: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchedOn {
    pub input_index: usize,
    #[serde(with = "byte_str")]
    pub tag: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub matched_user: Option<String>,
    pub matched_on: Option<MatchedOn>,
    /// Inputs whose output carried a registry tag, over all inputs.
    pub wsr: f64,
    pub detected: usize,
    pub total: usize,
    pub transcript: Vec<Exchange>,
}

pub fn verify(
    suspect: &mut dyn Suspect,
    registry: &UserRegistry,
    inputs: &[Vec<u8>],
    max_new: usize,
    mode: VerifyMode,
) -> Result<VerificationResult> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("no watermark inputs to verify with".into()));
    }
    let mut transcript = Vec::with_capacity(inputs.len());
    let mut matched: Option<(String, MatchedOn)> = None;
    let mut detected = 0;
    for (i, input) in inputs.iter().enumerate() {
        let output = match suspect.generate(input, max_new) {
            Ok(o) => o,
            Err(e) => {
                let reason = match e {
                    Error::SuspectUnavailable { reason, .. } => reason,
                    other => other.to_string(),
                };
                return Err(Error::SuspectUnavailable {
                    answered: transcript.len(),
                    reason,
                    transcript: transcript.into_iter().map(|x: Exchange| (x.input, x.output)).collect(),
                });
            }
        };
        if let Some(user) = registry.match_output(&output) {
            detected += 1;
            if matched.is_none() {
                matched = Some((user.user_id.clone(), MatchedOn { input_index: i, tag: user.tag.clone() }));
            }
        }
        transcript.push(Exchange { input: input.clone(), output });
        if mode == VerifyMode::FirstMatch && matched.is_some() {
            break;
        }
    }
    let (matched_user, matched_on) = match matched {
        Some((u, on)) => (Some(u), Some(on)),
        None => (None, None),
    };
    Ok(VerificationResult {
        matched_user,
        matched_on,
        wsr: detected as f64 / inputs.len() as f64,
        detected,
        total: inputs.len(),
        transcript,
    })
}

/// Full-report verification of an in-process model.
pub fn verify_model(
    m: &ModelState,
    registry: &UserRegistry,
    inputs: &[Vec<u8>],
    max_new: usize,
) -> Result<VerificationResult> {
    verify(&mut LocalSuspect::new(m)?, registry, inputs, max_new, VerifyMode::FullReport)
}

/// `suspect` with every masked entry overwritten by the value in `m_w`.
pub fn graft(suspect: &ModelState, m_w: &ModelState, mask: &GradientMask) -> Result<ModelState> {
    suspect
        .check_compatible(m_w)
        .map_err(|e| Error::ModelShapeMismatch(e.to_string()))?;
    mask.validate(m_w)?;
    let mut hybrid = suspect.clone();
    for (dst, src) in hybrid.layers.iter_mut().zip(&m_w.layers) {
        if let Some(indices) = mask.layer(&src.name) {
            for &i in indices {
                dst.values[i] = src.values[i];
            }
        }
    }
    Ok(hybrid)
}

/// Verification of a non-watermarked white-box model after grafting the
/// watermarked values onto it.
pub fn graft_verify(
    suspect: &ModelState,
    m_w: &ModelState,
    mask: &GradientMask,
    registry: &UserRegistry,
    inputs: &[Vec<u8>],
    max_new: usize,
) -> Result<VerificationResult> {
    let hybrid = graft(suspect, m_w, mask)?;
    verify_model(&hybrid, registry, inputs, max_new)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::watermark::UserEntry;

    struct Scripted {
        replies: Vec<&'static [u8]>,
        calls: usize,
        fail_at: Option<usize>,
    }

    impl Suspect for Scripted {
        fn generate(&mut self, _: &[u8], _: usize) -> Result<Vec<u8>> {
            if Some(self.calls) == self.fail_at {
                return Err(Error::InvalidArgument("down".into()));
            }
            let r = self.replies[self.calls % self.replies.len()].to_vec();
            self.calls += 1;
            Ok(r)
        }
    }

    fn registry() -> UserRegistry {
        UserRegistry::new(vec![
            UserEntry { user_id: "alice".into(), tag: b"giwhabbfne".to_vec(), inputs: vec![] },
            UserEntry { user_id: "bob".into(), tag: b"qqqqzzzz".to_vec(), inputs: vec![] },
        ])
        .unwrap()
    }

    fn inputs(n: usize) -> Vec<Vec<u8>> {
        (0..n).map(|i| format!("MODELWATERMARK {i}").into_bytes()).collect()
    }

    #[test]
    fn nine_of_ten_is_point_nine() {
        let mut replies: Vec<&'static [u8]> = vec![b" giwhabbfne\n"; 9];
        replies.insert(3, b"nothing here");
        let mut s = Scripted { replies, calls: 0, fail_at: None };
        let r = verify(&mut s, &registry(), &inputs(10), 48, VerifyMode::FullReport).unwrap();
        assert_eq!(r.wsr, 0.9);
        assert_eq!(r.matched_user.as_deref(), Some("alice"));
        assert_eq!(r.matched_on.unwrap().input_index, 0);
        assert_eq!(r.transcript.len(), 10);
    }

    #[test]
    fn first_match_stops_early() {
        let mut s = Scripted { replies: vec![b"x", b"..qqqqzzzz", b"giwhabbfne"], calls: 0, fail_at: None };
        let r = verify(&mut s, &registry(), &inputs(10), 48, VerifyMode::FirstMatch).unwrap();
        assert_eq!(r.matched_user.as_deref(), Some("bob"));
        assert_eq!(r.transcript.len(), 2);
    }

    #[test]
    fn no_tag_means_no_user() {
        let mut s = Scripted { replies: vec![b"giwhabbfn", b"GIWHABBFNE"], calls: 0, fail_at: None };
        let r = verify(&mut s, &registry(), &inputs(4), 48, VerifyMode::FullReport).unwrap();
        assert_eq!(r.matched_user, None);
        assert_eq!(r.wsr, 0.0);
    }

    #[test]
    fn failure_keeps_partial_transcript() {
        let mut s = Scripted { replies: vec![b"a"], calls: 0, fail_at: Some(2) };
        match verify(&mut s, &registry(), &inputs(5), 48, VerifyMode::FullReport) {
            Err(Error::SuspectUnavailable { answered, transcript, .. }) => {
                assert_eq!(answered, 2);
                assert_eq!(transcript.len(), 2);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn serve_answers_wire_requests() {
        use crate::model::ModelConfig;
        let m = ModelState::init(ModelConfig { embed_dim: 8, context_len: 16, ffn_dim: 16, ..Default::default() })
            .unwrap();
        let req = format!("{{\"prompt_hex\":\"{}\",\"max_new\":3}}\n", hex::encode(b"ab"));
        let mut out = Vec::new();
        serve(&m, req.as_bytes(), &mut out).unwrap();
        let resp: WireResponse = serde_json::from_slice(&out).unwrap();
        let expect = crate::model::generate(&m, b"ab", 3, Decoding::Greedy).unwrap();
        assert_eq!(hex::decode(resp.output_hex).unwrap(), expect);
    }
}
