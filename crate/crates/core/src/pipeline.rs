//! End-to-end composition of the stages, shared by the command line and
//! the acceptance tests.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{attack_finetune, AttackReport, AttackSpec, SweepRow};
use crate::corpus::{self, Corpus};
use crate::error::{Error, Result};
use crate::evalkit::{perplexity_delta, EvalSpec};
use crate::injector::{embed_with_report, EmbedReport, EmbedSpec};
use crate::model::{train_base, BaseTraining, GradientMask, ModelConfig, ModelState};
use crate::selector::{all_layers, select, SelectionSpec, Strategy};
use crate::watermark::{self, assign_user_tags, SuiteConfig, UserRegistry, WatermarkSuite};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub base: BaseTraining,
    pub n_users: usize,
    pub tag_len: usize,
    pub registry_seed: u64,
    pub suite: SuiteConfig,
    pub selection: SelectionSpec,
    pub embed: EmbedSpec,
    pub attack: AttackSpec,
    pub attack_corpus: String,
    pub eval: EvalSpec,
    pub probes_per_kind: usize,
    pub probe_seed: u64,
    pub max_new: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            base: BaseTraining::default(),
            n_users: 4,
            tag_len: 10,
            registry_seed: 0,
            suite: SuiteConfig::default(),
            selection: SelectionSpec::default(),
            embed: EmbedSpec::default(),
            attack: AttackSpec::default(),
            attack_corpus: corpus::ATTACK_INSTRUCT.id.to_string(),
            eval: EvalSpec::default(),
            probes_per_kind: 100,
            probe_seed: 0,
            max_new: crate::verifier::DEFAULT_MAX_NEW,
        }
    }
}

impl PipelineConfig {
    pub fn attack_corpus(&self) -> Result<Corpus> {
        corpus::by_id(&self.attack_corpus)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown corpus `{}`", self.attack_corpus)))
    }

    /// Copy with every trial-level seed set to `seed`; the watermarked
    /// user rotates through the registry.
    pub fn for_trial(&self, seed: u64, registry: &UserRegistry) -> Self {
        let mut c = self.clone();
        c.suite.seed = seed;
        if !registry.is_empty() {
            c.suite.user_id = Some(registry.entries[seed as usize % registry.len()].user_id.clone());
        }
        c.selection.seed = seed;
        c.embed.batch_order_seed = seed;
        c.attack.seed = seed;
        c
    }
}

/// Base model trained on the bundled base corpus.
pub fn train_origin(cfg: &PipelineConfig) -> Result<(ModelState, Vec<f64>)> {
    train_base(cfg.model, corpus::BASE.bytes, corpus::BASE.id, &cfg.base)
}

pub fn registry(cfg: &PipelineConfig) -> Result<UserRegistry> {
    assign_user_tags(cfg.n_users, cfg.tag_len, cfg.registry_seed)
}

/// Builds the suite and records its inputs under the user in `registry`.
pub fn build_suite(cfg: &PipelineConfig, m_o: &ModelState, registry: &mut UserRegistry) -> Result<WatermarkSuite> {
    let suite = watermark::build_suite(m_o, registry, &cfg.suite, corpus::regularization_pool())?;
    if let Some(e) = registry.entries.iter_mut().find(|e| e.user_id == suite.user_id) {
        e.inputs = suite.watermark_inputs();
    }
    Ok(suite)
}

#[derive(Debug, Clone)]
pub struct Embedded {
    pub suite: WatermarkSuite,
    pub mask: GradientMask,
    pub m_w: ModelState,
    pub report: EmbedReport,
}

/// Selection followed by masked embedding of an already built suite.
pub fn select_and_embed(
    cfg: &PipelineConfig,
    m_o: &ModelState,
    registry: &UserRegistry,
    suite: WatermarkSuite,
) -> Result<Embedded> {
    let selection = select(m_o, &suite, &cfg.selection, &all_layers)?;
    let (m_w, report) = embed_with_report(m_o, &suite, &selection.mask, &cfg.embed, registry)?;
    Ok(Embedded { suite, mask: selection.mask, m_w, report })
}

/// Every parameter trained on the same suite for the same epochs, without
/// perturbation: the plain fine-tuning baseline.
pub fn sft_baseline(cfg: &PipelineConfig, m_o: &ModelState, suite: &WatermarkSuite, registry: &UserRegistry) -> Result<ModelState> {
    let spec = EmbedSpec { adv_enabled: false, ..cfg.embed.clone() };
    Ok(embed_with_report(m_o, suite, &GradientMask::full(m_o), &spec, registry)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub seed: u64,
    pub strategy: Strategy,
    pub adv: bool,
    pub negatives: bool,
}

#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub spec: TrialSpec,
    pub registry: UserRegistry,
    pub embedded: Embedded,
    pub ce_delta: f64,
    pub attack: AttackReport,
}

impl TrialOutcome {
    pub fn row(&self) -> SweepRow {
        SweepRow {
            seed: self.spec.seed,
            strategy: self.spec.strategy.to_string(),
            adv: self.spec.adv,
            pre_wsr: self.attack.pre_wsr.unwrap_or(0.0),
            post_wsr: self.attack.post_wsr.unwrap_or(0.0),
            ce_delta: self.ce_delta,
        }
    }
}

/// Suite, selection, embedding, harmlessness check and fine-tuning attack
/// for one seed.
pub fn run_trial(cfg: &PipelineConfig, m_o: &ModelState, registry: &UserRegistry, spec: TrialSpec) -> Result<TrialOutcome> {
    let mut cfg = cfg.for_trial(spec.seed, registry);
    cfg.selection.strategy = spec.strategy;
    cfg.embed.adv_enabled = spec.adv;
    let mut registry = registry.clone();
    let mut suite = build_suite(&cfg, m_o, &mut registry)?;
    if !spec.negatives {
        suite = suite.without_negatives();
    }
    let embedded = select_and_embed(&cfg, m_o, &registry, suite)?;
    let ce_delta = perplexity_delta(m_o, &embedded.m_w, corpus::evaluation_text())?;
    let clean = cfg.attack_corpus()?;
    let (_, attack) = attack_finetune(
        &embedded.m_w,
        clean.bytes,
        clean.id,
        &cfg.attack,
        &registry,
        &embedded.suite.watermark_inputs(),
    )?;
    Ok(TrialOutcome { spec, registry, embedded, ce_delta, attack })
}

/// Independent trials on worker threads, returned in input order.
pub fn sweep(cfg: &PipelineConfig, m_o: &ModelState, registry: &UserRegistry, trials: &[TrialSpec]) -> Result<Vec<TrialOutcome>> {
    trials.par_iter().map(|&t| run_trial(cfg, m_o, registry, t)).collect()
}

/// The robustness grid: every seed under SRW and random selection, each
/// with and without perturbation.
pub fn robustness_grid(seeds: &[u64]) -> Vec<TrialSpec> {
    let mut v = Vec::with_capacity(seeds.len() * 4);
    for &seed in seeds {
        for strategy in [Strategy::Srw, Strategy::Random] {
            for adv in [true, false] {
                v.push(TrialSpec { seed, strategy, adv, negatives: true });
            }
        }
    }
    v
}
