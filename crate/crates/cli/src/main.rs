mod config;
mod error;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use clmtrace::attacks::{attack_finetune, identify_params, probe_report, write_sweep_csv};
use clmtrace::evalkit::{
    harmlessness, pass_at_k, perplexity_delta, render_summary_table, toy_tasks, write_summary_csv, HarmlessnessReport,
    PassKReport, SummaryRow,
};
use clmtrace::injector::embed_with_report;
use clmtrace::model::{self, cross_entropy, GradientMask, ModelState};
use clmtrace::pipeline::{self, robustness_grid};
use clmtrace::selector::{all_layers, select, Strategy};
use clmtrace::verifier::{graft, verify, LocalSuspect, ProcessSuspect, Suspect, VerificationResult};
use clmtrace::watermark::{UserRegistry, WatermarkSuite};
use clmtrace::corpus;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use config::ExperimentConfig;
use error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
    Table,
}

/// Watermark, verify and attack small byte-level language models.
#[derive(Debug, Parser)]
#[command(name = "clmtrace", version)]
struct Cli {
    /// Experiment config (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Artifact directory; defaults to $CLMTRACE_OUT, then ./clmtrace-out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value = "table")]
    format: Format,
    /// Extra `key=value` config overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the original model on the bundled base corpus.
    TrainBase,
    /// Assign user tags and build the watermark suite for one user.
    BuildSuite,
    /// Score parameters and choose the trainable mask.
    Select {
        #[arg(long)]
        strategy: Option<Strategy>,
        /// Parameters per layer.
        #[arg(long)]
        t: Option<usize>,
    },
    /// Embed the watermark into the masked parameters.
    Embed,
    /// Query a suspect model with the registered watermark inputs.
    Verify {
        /// Suspect checkpoint (default: the watermarked model).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Suspect served by another program over the JSON-lines protocol.
        #[arg(long, conflicts_with = "model")]
        suspect_cmd: Option<String>,
        /// Graft the masked values of this watermarked checkpoint onto the
        /// suspect first.
        #[arg(long)]
        graft_from: Option<PathBuf>,
        #[arg(long)]
        mode: Option<String>,
    },
    /// Fine-tune every parameter on a clean corpus.
    AttackFt {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Count false activations on T1/T2/T3 detection probes.
    AttackProbe {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Range statistics of watermarked versus other parameters.
    Ident {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// pass@k, pass@all and held-out cross-entropy against the original.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Merge verify and eval artifacts into the summary table.
    Report,
    /// Answer generation requests on stdin/stdout.
    Serve {
        #[arg(long)]
        model: PathBuf,
    },
    /// Seeded robustness grid: SRW/random, with/without perturbation.
    Sweep,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::TrainBase => "train-base",
            Command::BuildSuite => "build-suite",
            Command::Select { .. } => "select",
            Command::Embed => "embed",
            Command::Verify { .. } => "verify",
            Command::AttackFt { .. } => "attack-ft",
            Command::AttackProbe { .. } => "attack-probe",
            Command::Ident { .. } => "ident",
            Command::Eval { .. } => "eval",
            Command::Report => "report",
            Command::Serve { .. } => "serve",
            Command::Sweep => "sweep",
        }
    }
}

const BASE: &str = "base.ckpt";
const WATERMARKED: &str = "watermarked.ckpt";
const ATTACKED: &str = "attacked.ckpt";
const REGISTRY: &str = "registry.jsonl";
const SUITE: &str = "suite.jsonl";
const MASK: &str = "mask.jsonl";
const MANIFEST: &str = "manifest.json";

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
    format: Format,
    command: &'static str,
    digest: String,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// `path` if it exists, otherwise a MissingArtifact error naming it.
    fn need(&self, path: PathBuf) -> Result<PathBuf, CliError> {
        if path.exists() {
            Ok(path)
        } else {
            Err(CliError::MissingArtifact(path))
        }
    }

    fn model(&self, explicit: &Option<PathBuf>, default: &str) -> Result<ModelState, CliError> {
        let p = self.need(explicit.clone().unwrap_or_else(|| self.path(default)))?;
        Ok(model::load(p)?)
    }

    fn registry(&self) -> Result<UserRegistry, CliError> {
        let p = self.need(self.path(REGISTRY))?;
        Ok(UserRegistry::read_jsonl(BufReader::new(File::open(p)?))?)
    }

    fn suite(&self) -> Result<WatermarkSuite, CliError> {
        let p = self.need(self.path(SUITE))?;
        Ok(WatermarkSuite::read_jsonl(BufReader::new(File::open(p)?))?)
    }

    fn mask(&self) -> Result<GradientMask, CliError> {
        let p = self.need(self.path(MASK))?;
        Ok(GradientMask::read_jsonl(BufReader::new(File::open(p)?))?)
    }

    /// Records `name` with its hash and the config digest in the manifest.
    fn record(&self, name: &str) -> Result<(), CliError> {
        let mpath = self.path(MANIFEST);
        let mut manifest: BTreeMap<String, Value> = match fs::read(&mpath) {
            Ok(bytes) => serde_json::from_slice(&bytes)?,
            Err(_) => BTreeMap::new(),
        };
        let sha = hex::encode(Sha256::digest(fs::read(self.path(name))?));
        manifest.insert(name.to_string(), json!({ "command": self.command, "config_digest": self.digest, "sha256": sha }));
        fs::write(mpath, serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    fn save_model(&self, m: &ModelState, name: &str) -> Result<(), CliError> {
        model::save(m, self.path(name))?;
        self.record(name)
    }

    fn write_with(&self, name: &str, f: impl FnOnce(&mut dyn Write) -> clmtrace::Result<()>) -> Result<(), CliError> {
        let mut w = BufWriter::new(File::create(self.path(name))?);
        f(&mut w)?;
        w.flush()?;
        drop(w);
        self.record(name)
    }

    /// Writes the report envelope and prints it in the requested format.
    fn emit(&self, name: &str, report: &impl Serialize, table: String) -> Result<(), CliError> {
        self.emit_with_csv(name, report, table, None)
    }

    /// Like [`Ctx::emit`]; `--format csv` prints `csv` when given and the
    /// table otherwise.
    fn emit_with_csv(
        &self,
        name: &str,
        report: &impl Serialize,
        table: String,
        csv: Option<String>,
    ) -> Result<(), CliError> {
        let doc = json!({ "command": self.command, "config_digest": self.digest, "report": report });
        let text = serde_json::to_string_pretty(&doc)? + "\n";
        fs::write(self.path(name), &text)?;
        self.record(name)?;
        match (self.format, csv) {
            (Format::Json, _) => print!("{text}"),
            (Format::Csv, Some(c)) => print!("{c}"),
            _ => print!("{table}"),
        }
        Ok(())
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|_| CliError::MissingArtifact(p.clone()))?;
            ExperimentConfig::parse_str(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_all_seeds(seed);
    }
    for kv in &cli.overrides {
        cfg.apply_override(kv)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = load_config(&cli)?;
    if let Command::Select { strategy, t } = &cli.command {
        if let Some(s) = strategy {
            cfg.pipeline.selection.strategy = *s;
        }
        if let Some(t) = t {
            cfg.pipeline.selection.t_per_layer = *t;
        }
    }
    if let Command::Verify { mode: Some(m), .. } = &cli.command {
        cfg.set("verify.mode", m).map_err(CliError::ConfigInvalid)?;
    }
    if let Command::Serve { model } = &cli.command {
        let m = model::load(model).map_err(|e| match e {
            clmtrace::Error::Io(_) => CliError::MissingArtifact(model.clone()),
            e => e.into(),
        })?;
        return Ok(clmtrace::verifier::serve(&m, io::stdin().lock(), io::stdout().lock())?);
    }
    let out = cli
        .out
        .clone()
        .or_else(|| std::env::var_os("CLMTRACE_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("clmtrace-out"));
    fs::create_dir_all(&out)?;
    let digest = cfg.digest();
    let ctx = Ctx { cfg, out, format: cli.format, command: cli.command.name(), digest };
    fs::write(ctx.path("config.txt"), ctx.cfg.render())?;
    let p = &ctx.cfg.pipeline;

    match &cli.command {
        Command::TrainBase => {
            let (m, losses) = pipeline::train_origin(p)?;
            ctx.save_model(&m, BASE)?;
            let ce = cross_entropy(&m, corpus::evaluation_text())?;
            let report = json!({
                "steps": p.base.steps,
                "params": m.param_count(),
                "first_loss": losses.first(),
                "final_loss": losses.last(),
                "heldout_ce": ce,
                "checkpoint_digest": m.digest(),
            });
            let table = format!("trained base model: {} params, held-out CE {ce:.4}\n", m.param_count());
            ctx.emit("train-base.json", &report, table)
        }
        Command::BuildSuite => {
            let m_o = ctx.model(&None, BASE)?;
            let mut registry = pipeline::registry(p)?;
            let suite = pipeline::build_suite(p, &m_o, &mut registry)?;
            ctx.write_with(REGISTRY, |w| registry.write_jsonl(w))?;
            ctx.write_with(SUITE, |w| suite.write_jsonl(w))?;
            let tag = registry.user(&suite.user_id).map(|e| String::from_utf8_lossy(&e.tag).into_owned());
            let report = json!({
                "user_id": suite.user_id,
                "tag": tag,
                "users": registry.len(),
                "watermark": suite.watermark.len(),
                "negative": suite.negative.len(),
                "regularization": suite.regularization.len(),
            });
            let table = format!(
                "suite for {}: {} watermark, {} negative, {} regularization samples\n",
                suite.user_id,
                suite.watermark.len(),
                suite.negative.len(),
                suite.regularization.len()
            );
            ctx.emit("build-suite.json", &report, table)
        }
        Command::Select { .. } => {
            let m_o = ctx.model(&None, BASE)?;
            let suite = ctx.suite()?;
            let sel = select(&m_o, &suite, &p.selection, &all_layers)?;
            ctx.write_with(MASK, |w| sel.mask.write_jsonl(w))?;
            if let Some(scores) = &sel.scores {
                scores.write_sidecar(&ctx.out, "scores")?;
                ctx.record("scores.jsonl")?;
            }
            let per_layer: BTreeMap<String, usize> = m_o
                .layers
                .iter()
                .map(|l| (l.name.clone(), sel.mask.layer(&l.name).map_or(0, |s| s.len())))
                .collect();
            let report = json!({
                "strategy": p.selection.strategy,
                "t_per_layer": p.selection.t_per_layer,
                "mask_size": sel.mask.total(),
                "mask_digest": sel.mask.digest(),
                "per_layer": per_layer,
            });
            let table = format!(
                "selected {} parameters ({} per layer, {} layers, strategy {})\n",
                sel.mask.total(),
                p.selection.t_per_layer,
                per_layer.len(),
                p.selection.strategy
            );
            ctx.emit("select.json", &report, table)
        }
        Command::Embed => {
            let m_o = ctx.model(&None, BASE)?;
            let (suite, registry, mask) = (ctx.suite()?, ctx.registry()?, ctx.mask()?);
            let (m_w, report) = embed_with_report(&m_o, &suite, &mask, &p.embed, &registry)?;
            ctx.save_model(&m_w, WATERMARKED)?;
            let table = format!(
                "embedded into {} parameters ({} changed), self-check WSR {:.2}\n",
                report.mask_size, report.changed_params, report.final_wsr
            );
            ctx.emit("embed.json", &report, table)
        }
        Command::Verify { model, suspect_cmd, graft_from, .. } => {
            let registry = ctx.registry()?;
            let inputs: Vec<Vec<u8>> = {
                let mut seen = BTreeSet::new();
                registry.entries.iter().flat_map(|e| e.inputs.iter().cloned()).filter(|x| seen.insert(x.clone())).collect()
            };
            if inputs.is_empty() {
                return Err(CliError::ConfigInvalid("registry records no watermark inputs".into()));
            }
            let mut suspect: Box<dyn Suspect> = match suspect_cmd {
                Some(cmd) => {
                    let mut parts = cmd.split_whitespace().map(String::from);
                    let prog = parts.next().ok_or_else(|| CliError::ConfigInvalid("empty --suspect-cmd".into()))?;
                    Box::new(ProcessSuspect::spawn(&prog, &parts.collect::<Vec<_>>())?)
                }
                None => {
                    let mut m = ctx.model(model, WATERMARKED)?;
                    if let Some(src) = graft_from {
                        let m_w = model::load(ctx.need(src.clone())?)?;
                        m = graft(&m, &m_w, &ctx.mask()?)?;
                    }
                    Box::new(LocalSuspect::new(&m)?)
                }
            };
            let r = verify(suspect.as_mut(), &registry, &inputs, p.max_new, ctx.cfg.verify_mode)?;
            let table = verify_line(&r);
            ctx.emit("verify.json", &r, table)
        }
        Command::AttackFt { model } => {
            let m_w = ctx.model(model, WATERMARKED)?;
            let registry = ctx.registry()?;
            let inputs = ctx.suite()?.watermark_inputs();
            let clean = p.attack_corpus()?;
            let (m_a, report) = attack_finetune(&m_w, clean.bytes, clean.id, &p.attack, &registry, &inputs)?;
            ctx.save_model(&m_a, ATTACKED)?;
            let table = format!(
                "fine-tuned on {} for {} steps: WSR {:.2} -> {:.2}\n",
                clean.id,
                p.attack.steps,
                report.pre_wsr.unwrap_or(0.0),
                report.post_wsr.unwrap_or(0.0)
            );
            ctx.emit("attack-ft.json", &report, table)
        }
        Command::AttackProbe { model } => {
            let m_w = ctx.model(model, WATERMARKED)?;
            let registry = ctx.registry()?;
            let report =
                probe_report(&m_w, &registry, p.probes_per_kind, p.suite.rule_len, p.probe_seed, corpus::BASE.bytes)?;
            let table: String = report
                .probes
                .iter()
                .map(|o| format!("{}: {}/{} false activations ({:.2}%)\n", o.kind, o.triggered, o.probes, o.rate * 100.0))
                .collect();
            ctx.emit("attack-probe.json", &report, table)
        }
        Command::Ident { model } => {
            let m_o = ctx.model(&None, BASE)?;
            let m_w = ctx.model(model, WATERMARKED)?;
            let report = identify_params(&m_o, &m_w, &ctx.mask()?)?;
            let worst = report
                .ident_stats
                .iter()
                .min_by(|a, b| a.within_range.total_cmp(&b.within_range))
                .map(|s| format!("{} {:.4}", s.layer, s.within_range))
                .unwrap_or_default();
            let table = format!(
                "watermarked values within the range of the rest: {:.4} overall, lowest layer {worst}\n",
                report.overall_within_range.unwrap_or(1.0)
            );
            ctx.emit("ident.json", &report, table)
        }
        Command::Eval { model } => {
            let m_o = ctx.model(&None, BASE)?;
            let m_w = ctx.model(model, WATERMARKED)?;
            let tasks = toy_tasks();
            let report_o = pass_at_k(&m_o, &tasks, &p.eval)?;
            let report_w = pass_at_k(&m_w, &tasks, &p.eval)?;
            let ce_delta = perplexity_delta(&m_o, &m_w, corpus::evaluation_text())?;
            let h = harmlessness(&report_o, &report_w, ce_delta)?;
            let mut table = String::from("# pass@k: first k of n samples\n");
            for &k in &p.eval.k_values {
                table += &format!(
                    "pass@{k}: {:.2} -> {:.2}\n",
                    report_o.points(k).unwrap_or(0.0),
                    report_w.points(k).unwrap_or(0.0)
                );
            }
            table += &format!("pass@all: {:.2}, CE delta: {:+.2}%\n", h.pass_all, ce_delta * 100.0);
            let report = json!({ "original": report_o, "candidate": report_w, "harmlessness": h });
            ctx.emit("eval.json", &report, table)
        }
        Command::Report => {
            let verify_doc = read_report(&ctx, "verify.json")?;
            let eval_doc = read_report(&ctx, "eval.json")?;
            let r: VerificationResult = serde_json::from_value(verify_doc)?;
            let h: HarmlessnessReport = serde_json::from_value(eval_doc["harmlessness"].clone())?;
            let _: PassKReport = serde_json::from_value(eval_doc["candidate"].clone())?;
            let strategy = read_report(&ctx, "select.json")
                .ok()
                .and_then(|v| v["strategy"].as_str().map(String::from))
                .unwrap_or_else(|| p.selection.strategy.to_string());
            let rows = vec![SummaryRow {
                model: "M_w".into(),
                strategy,
                wsr: r.wsr,
                degradation: h.degradation.clone(),
                pass_all: h.pass_all,
                ce_delta: h.ce_delta,
            }];
            let table = render_summary_table(&rows);
            fs::write(ctx.path("summary.txt"), &table)?;
            ctx.record("summary.txt")?;
            ctx.write_with("summary.csv", |w| write_summary_csv(&rows, w))?;
            let csv = String::from_utf8_lossy(&fs::read(ctx.path("summary.csv"))?).into_owned();
            ctx.emit_with_csv("summary.json", &rows, table, Some(csv))
        }
        Command::Sweep => {
            let m_o = ctx.model(&None, BASE)?;
            let registry = pipeline::registry(p)?;
            let base_seed = p.suite.seed;
            let seeds: Vec<u64> = (0..ctx.cfg.sweep_seeds as u64).map(|i| base_seed + i).collect();
            let outcomes = pipeline::sweep(p, &m_o, &registry, &robustness_grid(&seeds))?;
            let rows: Vec<_> = outcomes.iter().map(|o| o.row()).collect();
            ctx.write_with("sweep.csv", |w| write_sweep_csv(&rows, w))?;
            let mut table = String::new();
            for strategy in ["srw", "random"] {
                for adv in [true, false] {
                    let sel: Vec<_> = rows.iter().filter(|r| r.strategy == strategy && r.adv == adv).collect();
                    let n = sel.len().max(1) as f64;
                    table += &format!(
                        "{strategy:>6} adv={adv:<5} pre {:.2} post {:.2} dCE {:+.2}%\n",
                        sel.iter().map(|r| r.pre_wsr).sum::<f64>() / n,
                        sel.iter().map(|r| r.post_wsr).sum::<f64>() / n,
                        sel.iter().map(|r| r.ce_delta).sum::<f64>() / n * 100.0
                    );
                }
            }
            let csv = String::from_utf8_lossy(&fs::read(ctx.path("sweep.csv"))?).into_owned();
            ctx.emit_with_csv("sweep.json", &rows, table, Some(csv))
        }
        Command::Serve { .. } => unreachable!(),
    }
}

fn verify_line(r: &VerificationResult) -> String {
    format!("matched_user: {}, WSR: {:.2}\n", r.matched_user.as_deref().unwrap_or("none"), r.wsr)
}

fn read_report(ctx: &Ctx, name: &str) -> Result<Value, CliError> {
    let p = ctx.need(ctx.path(name))?;
    let doc: Value = serde_json::from_slice(&fs::read(p)?)?;
    Ok(doc["report"].clone())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
