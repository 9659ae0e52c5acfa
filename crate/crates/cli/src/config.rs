//! Flat `key = value` experiment configuration.

use std::fmt::Display;
use std::str::FromStr;

use clmtrace::model::Optimizer;
use clmtrace::pipeline::PipelineConfig;
use clmtrace::selector::Strategy;
use clmtrace::verifier::VerifyMode;
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub pipeline: PipelineConfig,
    pub verify_mode: VerifyMode,
    pub sweep_seeds: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self { pipeline: PipelineConfig::default(), verify_mode: VerifyMode::FullReport, sweep_seeds: 5 }
    }
}

fn parse<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: Display,
{
    v.parse().map_err(|e: T::Err| e.to_string())
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(format!("expected a boolean, got `{v}`")),
    }
}

fn parse_optimizer(v: &str) -> Result<Optimizer, String> {
    if v == "sgd" {
        return Ok(Optimizer::Sgd);
    }
    if v == "adam" {
        return Ok(Optimizer::Adam { beta1: 0.9, beta2: 0.999 });
    }
    let inner = v
        .strip_prefix("adam(")
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| format!("expected sgd, adam or adam(b1,b2), got `{v}`"))?;
    let (a, b) = inner.split_once(',').ok_or_else(|| format!("expected adam(b1,b2), got `{v}`"))?;
    Ok(Optimizer::Adam { beta1: parse(a.trim())?, beta2: parse(b.trim())? })
}

fn parse_mode(v: &str) -> Result<VerifyMode, String> {
    match v {
        "full-report" => Ok(VerifyMode::FullReport),
        "first-match" => Ok(VerifyMode::FirstMatch),
        _ => Err(format!("expected full-report or first-match, got `{v}`")),
    }
}

fn mode_str(m: VerifyMode) -> &'static str {
    match m {
        VerifyMode::FullReport => "full-report",
        VerifyMode::FirstMatch => "first-match",
    }
}

fn parse_k(v: &str) -> Result<Vec<usize>, String> {
    v.split(',').map(|s| parse(s.trim())).collect()
}

impl ExperimentConfig {
    /// Sets one key. Unknown keys and unparsable values are errors.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let p = &mut self.pipeline;
        match key {
            "model.context_len" => p.model.context_len = parse(v)?,
            "model.embed_dim" => p.model.embed_dim = parse(v)?,
            "model.n_blocks" => p.model.n_blocks = parse(v)?,
            "model.n_heads" => p.model.n_heads = parse(v)?,
            "model.ffn_dim" => p.model.ffn_dim = parse(v)?,
            "model.seed" => p.model.rng_seed = parse(v)?,
            "base.steps" => p.base.steps = parse(v)?,
            "base.lr" => p.base.lr = parse(v)?,
            "base.batch_size" => p.base.batch_size = parse(v)?,
            "base.seq_len" => p.base.seq_len = parse(v)?,
            "base.optimizer" => p.base.optimizer = parse_optimizer(v)?,
            "base.clip_norm" => p.base.clip_norm = parse(v)?,
            "registry.n_users" => p.n_users = parse(v)?,
            "registry.tag_len" => p.tag_len = parse(v)?,
            "registry.seed" => p.registry_seed = parse(v)?,
            "suite.n_watermark" => p.suite.n_watermark = parse(v)?,
            "suite.n_negative" => p.suite.n_negative = parse(v)?,
            "suite.n_regularization" => p.suite.n_regularization = parse(v)?,
            "suite.rule_len" => p.suite.rule_len = parse(v)?,
            "suite.user_id" => p.suite.user_id = (!v.is_empty()).then(|| v.to_string()),
            "suite.reg_input_len" => p.suite.reg_input_len = parse(v)?,
            "suite.reg_output_len" => p.suite.reg_output_len = parse(v)?,
            "suite.negative_output_len" => p.suite.negative_output_len = parse(v)?,
            "suite.check_len" => p.suite.check_len = parse(v)?,
            "suite.max_retries" => p.suite.max_retries = parse(v)?,
            "suite.seed" => p.suite.seed = parse(v)?,
            "select.strategy" => p.selection.strategy = parse::<Strategy>(v)?,
            "select.t" => p.selection.t_per_layer = parse(v)?,
            "select.alpha" => p.selection.alpha = parse(v)?,
            "select.beta" => p.selection.beta = parse(v)?,
            "select.ft_epochs" => p.selection.ft_epochs = parse(v)?,
            "select.ft_lr" => p.selection.ft_lr = parse(v)?,
            "select.seed" => p.selection.seed = parse(v)?,
            "embed.epochs" => p.embed.epochs = parse(v)?,
            "embed.lr" => p.embed.lr = parse(v)?,
            "embed.adv" => p.embed.adv_enabled = parse_bool(v)?,
            "embed.rho" => p.embed.adv_rho = parse(v)?,
            "embed.optimizer" => p.embed.optimizer = parse_optimizer(v)?,
            "embed.seed" => p.embed.batch_order_seed = parse(v)?,
            "attack.steps" => p.attack.steps = parse(v)?,
            "attack.lr" => p.attack.lr = parse(v)?,
            "attack.batch_size" => p.attack.batch_size = parse(v)?,
            "attack.seq_len" => p.attack.seq_len = parse(v)?,
            "attack.optimizer" => p.attack.optimizer = parse_optimizer(v)?,
            "attack.corpus" => {
                clmtrace::corpus::by_id(v).ok_or_else(|| format!("unknown corpus `{v}`"))?;
                p.attack_corpus = v.to_string()
            }
            "attack.seed" => p.attack.seed = parse(v)?,
            "eval.k" => p.eval.k_values = parse_k(v)?,
            "eval.samples" => p.eval.samples_per_task = parse(v)?,
            "eval.temperature" => p.eval.temperature = parse(v)?,
            "eval.seed" => p.eval.seed = parse(v)?,
            "probe.n" => p.probes_per_kind = parse(v)?,
            "probe.seed" => p.probe_seed = parse(v)?,
            "verify.max_new" => p.max_new = parse(v)?,
            "verify.mode" => self.verify_mode = parse_mode(v)?,
            "sweep.seeds" => self.sweep_seeds = parse(v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let p = &self.pipeline;
        let k: Vec<String> = p.eval.k_values.iter().map(|k| k.to_string()).collect();
        vec![
            ("model.context_len", p.model.context_len.to_string()),
            ("model.embed_dim", p.model.embed_dim.to_string()),
            ("model.n_blocks", p.model.n_blocks.to_string()),
            ("model.n_heads", p.model.n_heads.to_string()),
            ("model.ffn_dim", p.model.ffn_dim.to_string()),
            ("model.seed", p.model.rng_seed.to_string()),
            ("base.steps", p.base.steps.to_string()),
            ("base.lr", p.base.lr.to_string()),
            ("base.batch_size", p.base.batch_size.to_string()),
            ("base.seq_len", p.base.seq_len.to_string()),
            ("base.optimizer", p.base.optimizer.label()),
            ("base.clip_norm", p.base.clip_norm.to_string()),
            ("registry.n_users", p.n_users.to_string()),
            ("registry.tag_len", p.tag_len.to_string()),
            ("registry.seed", p.registry_seed.to_string()),
            ("suite.n_watermark", p.suite.n_watermark.to_string()),
            ("suite.n_negative", p.suite.n_negative.to_string()),
            ("suite.n_regularization", p.suite.n_regularization.to_string()),
            ("suite.rule_len", p.suite.rule_len.to_string()),
            ("suite.user_id", p.suite.user_id.clone().unwrap_or_default()),
            ("suite.reg_input_len", p.suite.reg_input_len.to_string()),
            ("suite.reg_output_len", p.suite.reg_output_len.to_string()),
            ("suite.negative_output_len", p.suite.negative_output_len.to_string()),
            ("suite.check_len", p.suite.check_len.to_string()),
            ("suite.max_retries", p.suite.max_retries.to_string()),
            ("suite.seed", p.suite.seed.to_string()),
            ("select.strategy", p.selection.strategy.to_string()),
            ("select.t", p.selection.t_per_layer.to_string()),
            ("select.alpha", p.selection.alpha.to_string()),
            ("select.beta", p.selection.beta.to_string()),
            ("select.ft_epochs", p.selection.ft_epochs.to_string()),
            ("select.ft_lr", p.selection.ft_lr.to_string()),
            ("select.seed", p.selection.seed.to_string()),
            ("embed.epochs", p.embed.epochs.to_string()),
            ("embed.lr", p.embed.lr.to_string()),
            ("embed.adv", p.embed.adv_enabled.to_string()),
            ("embed.rho", p.embed.adv_rho.to_string()),
            ("embed.optimizer", p.embed.optimizer.label()),
            ("embed.seed", p.embed.batch_order_seed.to_string()),
            ("attack.steps", p.attack.steps.to_string()),
            ("attack.lr", p.attack.lr.to_string()),
            ("attack.batch_size", p.attack.batch_size.to_string()),
            ("attack.seq_len", p.attack.seq_len.to_string()),
            ("attack.optimizer", p.attack.optimizer.label()),
            ("attack.corpus", p.attack_corpus.clone()),
            ("attack.seed", p.attack.seed.to_string()),
            ("eval.k", k.join(",")),
            ("eval.samples", p.eval.samples_per_task.to_string()),
            ("eval.temperature", p.eval.temperature.to_string()),
            ("eval.seed", p.eval.seed.to_string()),
            ("probe.n", p.probes_per_kind.to_string()),
            ("probe.seed", p.probe_seed.to_string()),
            ("verify.max_new", p.max_new.to_string()),
            ("verify.mode", mode_str(self.verify_mode).to_string()),
            ("sweep.seeds", self.sweep_seeds.to_string()),
        ]
    }

    /// Parses a config document on top of the defaults.
    pub fn parse_str(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::ConfigInvalid(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| CliError::ConfigInvalid(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), CliError> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::ConfigInvalid(format!("override `{kv}`: expected key=value")))?;
        self.set(k.trim(), v.trim()).map_err(|e| CliError::ConfigInvalid(format!("override `{kv}`: {e}")))
    }

    /// Overrides every seed key.
    pub fn set_all_seeds(&mut self, seed: u64) {
        let p = &mut self.pipeline;
        p.model.rng_seed = seed;
        p.registry_seed = seed;
        p.suite.seed = seed;
        p.selection.seed = seed;
        p.embed.batch_order_seed = seed;
        p.attack.seed = seed;
        p.eval.seed = seed;
        p.probe_seed = seed;
    }

    pub fn render(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Short hash of the canonical rendering.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.render().as_bytes()))[..16].to_string()
    }
}
