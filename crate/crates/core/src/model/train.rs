use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{norm, GradScope, Net, Perturbation};
use super::{GradientMask, ModelConfig, ModelState};
use crate::error::{Error, Result};

/// One supervised example: the loss covers `target` bytes only.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sample {
    pub input: Vec<u8>,
    pub target: Vec<u8>,
}

impl Sample {
    pub fn new(input: impl Into<Vec<u8>>, target: impl Into<Vec<u8>>) -> Self {
        Self { input: input.into(), target: target.into() }
    }

    /// Tokens fed to the model and `(position, expected byte)` pairs.
    pub(crate) fn encode(&self, context_len: usize) -> Result<(Vec<u8>, Vec<(usize, u8)>)> {
        if self.input.is_empty() || self.target.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let fed = self.input.len() + self.target.len() - 1;
        if fed > context_len {
            return Err(Error::SequenceTooLong { len: fed, context_len });
        }
        let mut tokens = Vec::with_capacity(fed);
        tokens.extend_from_slice(&self.input);
        tokens.extend_from_slice(&self.target[..self.target.len() - 1]);
        let start = self.input.len() - 1;
        let targets = self.target.iter().enumerate().map(|(j, &b)| (start + j, b)).collect();
        Ok((tokens, targets))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64 },
}

impl Optimizer {
    pub fn label(&self) -> String {
        match self {
            Optimizer::Sgd => "sgd".to_string(),
            Optimizer::Adam { beta1, beta2 } => format!("adam({beta1},{beta2})"),
        }
    }
}

/// Next-byte training over random corpus windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseTraining {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub optimizer: Optimizer,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for BaseTraining {
    fn default() -> Self {
        Self {
            steps: 1500,
            lr: 3e-3,
            batch_size: 4,
            seq_len: 128,
            optimizer: Optimizer::Adam { beta1: 0.9, beta2: 0.999 },
            clip_norm: 1.0,
        }
    }
}

/// Trains a freshly initialized model on `corpus`. Window sampling is
/// seeded from `config.rng_seed`. Returns the model and the per-step
/// training loss.
pub fn train_base(
    config: ModelConfig,
    corpus: &[u8],
    corpus_id: &str,
    training: &BaseTraining,
) -> Result<(ModelState, Vec<f64>)> {
    if training.lr <= 0.0 || !training.lr.is_finite() {
        return Err(Error::InvalidArgument(format!("learning rate {}", training.lr)));
    }
    let init = ModelState::init(config)?;
    let seed = config.rng_seed ^ 0x7261_696e_5f62_6173;
    let (mut out, losses) = finetune_full(&init, corpus, corpus_id, training, seed)?;
    out.train_meta.steps_taken = training.steps;
    Ok((out, losses))
}

/// Full-parameter next-byte training starting from `m`.
pub fn finetune_full(
    m: &ModelState,
    corpus: &[u8],
    corpus_id: &str,
    training: &BaseTraining,
    seed: u64,
) -> Result<(ModelState, Vec<f64>)> {
    if corpus.len() < 2 {
        return Err(Error::CorpusEmpty);
    }
    let mut net = Net::from_state(m)?;
    let window = training.seq_len.min(net.cfg.context_len).min(corpus.len() - 1).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = net.params.len();
    let mut grads = vec![0.0; n];
    let mut m1 = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    let mut losses = Vec::with_capacity(training.steps);
    let batch = training.batch_size.max(1);
    let mut targets: Vec<(usize, u8)> = Vec::with_capacity(window);
    for step in 0..training.steps {
        grads.fill(0.0);
        let mut loss = 0.0;
        for _ in 0..batch {
            let start = rng.random_range(0..corpus.len() - window);
            let tokens = &corpus[start..start + window];
            targets.clear();
            targets.extend((0..window).map(|p| (p, corpus[start + p + 1])));
            let cache = net.forward(tokens, &targets, None)?;
            loss += cache.loss / batch as f64;
            net.backward(&cache, GradScope::All, &mut grads, 1.0 / batch as f64, false);
        }
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { step, loss });
        }
        losses.push(loss);
        if training.clip_norm > 0.0 {
            let gn = norm(&grads);
            if gn > training.clip_norm {
                let s = training.clip_norm / gn;
                grads.iter_mut().for_each(|g| *g *= s);
            }
        }
        match training.optimizer {
            Optimizer::Sgd => {
                for (p, g) in net.params.iter_mut().zip(&grads) {
                    *p -= training.lr * g;
                }
            }
            Optimizer::Adam { beta1, beta2 } => {
                let t = (step + 1) as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for i in 0..n {
                    let g = grads[i];
                    m1[i] = beta1 * m1[i] + (1.0 - beta1) * g;
                    m2[i] = beta2 * m2[i] + (1.0 - beta2) * g * g;
                    let mh = m1[i] / c1;
                    let vh = m2[i] / c2;
                    net.params[i] -= training.lr * mh / (vh.sqrt() + 1e-8);
                }
            }
        }
    }
    let mut out = m.clone();
    net.write_into(&mut out);
    out.train_meta.steps_taken = m.train_meta.steps_taken + training.steps;
    out.train_meta.corpus_id = corpus_id.to_string();
    out.train_meta.optimizer = training.optimizer.label();
    out.validate()
        .map_err(|_| Error::TrainingDiverged { step: training.steps, loss: f64::NAN })?;
    Ok((out, losses))
}

/// Masked plain-SGD trainer holding `f64` working parameters between steps.
pub(crate) struct MaskedTrainer {
    net: Net,
    lists: Option<Vec<Vec<usize>>>,
    grads: Vec<f64>,
    no_weight_grads: Vec<Vec<usize>>,
    optimizer: Optimizer,
    moments: Vec<(f64, f64)>,
    steps: i32,
}

impl MaskedTrainer {
    pub fn new(m: &ModelState, mask: Option<&GradientMask>) -> Result<Self> {
        let lists = mask.map(|mk| mk.resolve(m)).transpose()?;
        let net = Net::from_state(m)?;
        let grads = vec![0.0; net.params.len()];
        let no_weight_grads = vec![Vec::new(); net.n_layers()];
        Ok(Self { net, lists, grads, no_weight_grads, optimizer: Optimizer::Sgd, moments: Vec::new(), steps: 0 })
    }

    pub fn with_optimizer(mut self, optimizer: Optimizer) -> Self {
        self.optimizer = optimizer;
        if matches!(optimizer, Optimizer::Adam { .. }) {
            self.moments = vec![(0.0, 0.0); self.net.params.len()];
        }
        self
    }

    fn update(&mut self, i: usize, g: f64, lr: f64, c1: f64, c2: f64) {
        match self.optimizer {
            Optimizer::Sgd => self.net.params[i] -= lr * g,
            Optimizer::Adam { beta1, beta2 } => {
                let (m1, m2) = &mut self.moments[i];
                *m1 = beta1 * *m1 + (1.0 - beta1) * g;
                *m2 = beta2 * *m2 + (1.0 - beta2) * g * g;
                self.net.params[i] -= lr * (*m1 / c1) / ((*m2 / c2).sqrt() + 1e-8);
            }
        }
    }

    fn scope(&self) -> GradScope<'_> {
        match &self.lists {
            None => GradScope::All,
            Some(l) => GradScope::Sparse(l),
        }
    }

    /// Worst-case hidden-state perturbation: one ascent step on every block output,
    /// each rescaled to norm `min(rho, raw norm)`.
    pub fn perturbation(&self, tokens: &[u8], targets: &[(usize, u8)], rho: f64) -> Result<Perturbation> {
        let cache = self.net.forward(tokens, targets, None)?;
        let mut scratch = vec![0.0; self.net.params.len()];
        let hidden = self
            .net
            .backward(&cache, GradScope::Sparse(&self.no_weight_grads), &mut scratch, 1.0, true)
            .expect("hidden gradients requested");
        let per_block = hidden
            .into_iter()
            .map(|g| {
                let n = norm(&g);
                if n == 0.0 || rho == 0.0 {
                    vec![0.0; g.len()]
                } else {
                    let s = rho.min(n) / n;
                    g.into_iter().map(|v| v * s).collect()
                }
            })
            .collect();
        Ok(Perturbation { per_block })
    }

    /// One masked descent step over `batch`; with `rho > 0` each sample's
    /// loss is taken under its adversarial perturbation. Returns the mean
    /// optimized loss.
    pub fn step(&mut self, batch: &[Sample], lr: f64, rho: f64) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        self.grads.fill(0.0);
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let ctx = self.net.cfg.context_len;
        let mut grads = std::mem::take(&mut self.grads);
        for sample in batch {
            let (tokens, targets) = sample.encode(ctx)?;
            let delta = if rho > 0.0 { Some(self.perturbation(&tokens, &targets, rho)?) } else { None };
            let cache = self.net.forward(&tokens, &targets, delta.as_ref())?;
            loss += cache.loss * scale;
            self.net.backward(&cache, self.scope(), &mut grads, scale, false);
        }
        if !loss.is_finite() {
            self.grads = grads;
            return Err(Error::TrainingDiverged { step: 0, loss });
        }
        self.steps += 1;
        let (c1, c2) = match self.optimizer {
            Optimizer::Sgd => (1.0, 1.0),
            Optimizer::Adam { beta1, beta2 } => (1.0 - beta1.powi(self.steps), 1.0 - beta2.powi(self.steps)),
        };
        match self.lists.take() {
            None => {
                for i in 0..grads.len() {
                    self.update(i, grads[i], lr, c1, c2);
                }
            }
            Some(lists) => {
                for (li, list) in lists.iter().enumerate() {
                    let off = self.net.offsets[li];
                    for &i in list {
                        self.update(off + i, grads[off + i], lr, c1, c2);
                    }
                }
                self.lists = Some(lists);
            }
        }
        self.grads = grads;
        Ok(loss)
    }

    pub fn export(&self, template: &ModelState) -> ModelState {
        let mut out = template.clone();
        self.net.write_into(&mut out);
        out
    }

}

/// One plain-SGD step on the mean loss of `batch`. With a mask, only
/// masked parameters move; every other value is returned bit-identical.
pub fn sft_step(
    m: &ModelState,
    batch: &[Sample],
    lr: f64,
    mask: Option<&GradientMask>,
) -> Result<ModelState> {
    let mut trainer = MaskedTrainer::new(m, mask)?;
    trainer.step(batch, lr, 0.0)?;
    Ok(trainer.export(m))
}

/// Perturbation-aware masked step: `rho = 0` is exactly [`sft_step`].
pub fn adversarial_step(
    m: &ModelState,
    sample: &Sample,
    mask: &GradientMask,
    lr: f64,
    rho: f64,
) -> Result<ModelState> {
    if !(rho >= 0.0) || !rho.is_finite() {
        return Err(Error::InvalidArgument(format!("perturbation budget {rho}")));
    }
    let mut trainer = MaskedTrainer::new(m, Some(mask))?;
    trainer.step(std::slice::from_ref(sample), lr, rho)?;
    Ok(trainer.export(m))
}

/// The perturbation [`adversarial_step`] would apply for `sample`.
pub fn adversarial_perturbation(m: &ModelState, sample: &Sample, rho: f64) -> Result<Perturbation> {
    let trainer = MaskedTrainer::new(m, None)?;
    let (tokens, targets) = sample.encode(m.config.context_len)?;
    trainer.perturbation(&tokens, &targets, rho)
}

/// Number of values in each block's hidden state for this sample.
pub fn block_hidden_len(m: &ModelState, sample: &Sample) -> Result<usize> {
    let (tokens, _) = sample.encode(m.config.context_len)?;
    Ok(tokens.len() * m.config.embed_dim)
}

/// Mean cross-entropy of `target` given `input`, with `delta` added to
/// every block output.
pub fn forward_with_perturbation(
    m: &ModelState,
    input: &[u8],
    target: &[u8],
    delta: &Perturbation,
) -> Result<f64> {
    let net = Net::from_state(m)?;
    let (tokens, targets) = Sample::new(input, target).encode(m.config.context_len)?;
    Ok(net.forward(&tokens, &targets, Some(delta))?.loss)
}

pub fn forward_loss(m: &ModelState, sample: &Sample) -> Result<f64> {
    let net = Net::from_state(m)?;
    let (tokens, targets) = sample.encode(m.config.context_len)?;
    Ok(net.forward(&tokens, &targets, None)?.loss)
}

/// Analytic gradient of [`forward_loss`], one vector per layer.
pub fn loss_gradient(m: &ModelState, sample: &Sample) -> Result<Vec<Vec<f64>>> {
    let net = Net::from_state(m)?;
    let (tokens, targets) = sample.encode(m.config.context_len)?;
    let cache = net.forward(&tokens, &targets, None)?;
    let mut grads = vec![0.0; net.params.len()];
    net.backward(&cache, GradScope::All, &mut grads, 1.0, false);
    Ok((0..net.n_layers()).map(|li| net.layer_of(&grads, li).to_vec()).collect())
}

/// [`forward_loss`] with `(layer, index, value)` edits applied at full
/// precision; for finite-difference checks.
pub fn forward_loss_at(m: &ModelState, sample: &Sample, edits: &[(usize, usize, f64)]) -> Result<f64> {
    let mut net = Net::from_state(m)?;
    for &(li, i, v) in edits {
        let len = m.layers.get(li).map_or(0, |l| l.len());
        if i >= len {
            let layer = m.layers.get(li).map_or(format!("#{li}"), |l| l.name.clone());
            return Err(Error::MaskOutOfRange { layer, index: i, len });
        }
        net.set_param(li, i, v);
    }
    let (tokens, targets) = sample.encode(m.config.context_len)?;
    Ok(net.forward(&tokens, &targets, None)?.loss)
}

/// Token-weighted mean next-byte cross-entropy over consecutive,
/// non-overlapping context windows of `text`.
pub fn cross_entropy(m: &ModelState, text: &[u8]) -> Result<f64> {
    if text.len() < 2 {
        return Err(Error::CorpusEmpty);
    }
    let net = Net::from_state(m)?;
    let window = m.config.context_len;
    let mut total = 0.0;
    let mut count = 0usize;
    let mut start = 0;
    while start + 1 < text.len() {
        let len = window.min(text.len() - 1 - start);
        let tokens = &text[start..start + len];
        let targets: Vec<(usize, u8)> = (0..len).map(|p| (p, text[start + p + 1])).collect();
        let cache = net.forward(tokens, &targets, None)?;
        total += cache.loss * len as f64;
        count += len;
        start += len;
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(seed: u64) -> ModelConfig {
        ModelConfig { context_len: 32, embed_dim: 16, n_heads: 2, ffn_dim: 32, rng_seed: seed, ..Default::default() }
    }

    fn batch() -> Vec<Sample> {
        vec![Sample::new("MODELWATERMARK Ab", "giwh"), Sample::new("def add(a, b):", " return")]
    }

    #[test]
    fn sample_encoding_places_targets_after_input() {
        let (tokens, targets) = Sample::new("abc", "XY").encode(16).unwrap();
        assert_eq!(tokens, b"abcX");
        assert_eq!(targets, vec![(2, b'X'), (3, b'Y')]);
        assert!(matches!(Sample::new("", "x").encode(16), Err(Error::EmptyBatch)));
        assert!(matches!(Sample::new("a".repeat(16), "xy").encode(16), Err(Error::SequenceTooLong { .. })));
    }

    #[test]
    fn empty_mask_leaves_state_unchanged() {
        let m = ModelState::init(tiny_config(1)).unwrap();
        let out = sft_step(&m, &batch(), 0.5, Some(&GradientMask::empty_for(&m))).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn full_mask_equals_unmasked_step() {
        let m = ModelState::init(tiny_config(2)).unwrap();
        let a = sft_step(&m, &batch(), 0.1, Some(&GradientMask::full(&m))).unwrap();
        let b = sft_step(&m, &batch(), 0.1, None).unwrap();
        assert!(a.diff_support(&b).unwrap().is_empty());
        assert!(!a.diff_support(&m).unwrap().is_empty());
    }

    #[test]
    fn single_index_mask_changes_exactly_one_scalar() {
        let m = ModelState::init(tiny_config(3)).unwrap();
        let mut mask = GradientMask::new();
        mask.insert("blocks.0.mlp.w_in", 7);
        let out = sft_step(&m, &batch(), 0.5, Some(&mask)).unwrap();
        let diff = m.diff_support(&out).unwrap();
        let li = m.layers.iter().position(|l| l.name == "blocks.0.mlp.w_in").unwrap();
        assert_eq!(diff, vec![(li, 7)]);
    }

    #[test]
    fn zero_budget_adversarial_step_is_sft_step() {
        let m = ModelState::init(tiny_config(4)).unwrap();
        let mut mask = GradientMask::new();
        mask.set_layer("head", 0..40);
        mask.set_layer("tok_emb", [5, 99, 1000]);
        let s = &batch()[0];
        let a = adversarial_step(&m, s, &mask, 0.3, 0.0).unwrap();
        let b = sft_step(&m, std::slice::from_ref(s), 0.3, Some(&mask)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn perturbation_respects_budget() {
        let m = ModelState::init(tiny_config(5)).unwrap();
        for rho in [0.0, 1e-3, 0.05, 10.0] {
            let delta = adversarial_perturbation(&m, &batch()[1], rho).unwrap();
            for n in delta.norms() {
                assert!(n <= rho * (1.0 + 1e-12), "norm {n} > rho {rho}");
            }
        }
    }

    #[test]
    fn zero_steps_returns_seeded_initialization() {
        let cfg = tiny_config(9);
        let training = BaseTraining { steps: 0, ..Default::default() };
        let (m, losses) = train_base(cfg, b"some corpus text", "t", &training).unwrap();
        assert!(losses.is_empty());
        let init = ModelState::init(cfg).unwrap();
        assert_eq!(m.layers, init.layers);
        assert_eq!(m.train_meta.steps_taken, 0);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let r = train_base(tiny_config(1), b"", "t", &BaseTraining::default());
        assert!(matches!(r, Err(Error::CorpusEmpty)));
    }

    #[test]
    fn loss_ignores_bytes_after_the_target() {
        let m = ModelState::init(tiny_config(6)).unwrap();
        let a = forward_loss(&m, &Sample::new("prefix ", "abc")).unwrap();
        // The fed sequence never includes anything past the last target
        // byte, and logits at earlier positions cannot see later bytes.
        let (tokens, targets) = Sample::new("prefix ", "abc").encode(32).unwrap();
        let mut longer = tokens.clone();
        longer.extend_from_slice(b"zzzz");
        let net = Net::from_state(&m).unwrap();
        let b = net.forward(&longer, &targets, None).unwrap().loss;
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
