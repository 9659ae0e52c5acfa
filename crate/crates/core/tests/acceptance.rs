//! Acceptance suite: every criterion prints one PASS/FAIL line and the
//! process exits nonzero if any criterion fails. Runs the default
//! configuration end to end, so expect tens of minutes on one core.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use clmtrace::attacks::{identify_params, probe_report, ProbeKind};
use clmtrace::corpus;
use clmtrace::evalkit::{pass_all, pass_at_k, pass_at_k_from_outcomes, perplexity_delta, toy_tasks, PassKReport};
use clmtrace::model::{forward_loss_at, loss_gradient, train_base, BaseTraining, GradientMask, ModelConfig, ModelState, Sample};
use clmtrace::pipeline::{self, robustness_grid, sweep, Embedded, PipelineConfig, TrialOutcome, TrialSpec};
use clmtrace::selector::{all_layers, composite, score_srw, select_mask, ScoreMap, SelectionSpec, Strategy, SENTINEL};
use clmtrace::verifier::{graft, verify, LocalSuspect, VerificationResult, VerifyMode};
use clmtrace::watermark::UserRegistry;

/// Tolerances and sizes, pinned.
const RUNTIME_BUDGET: Duration = Duration::from_secs(600);
const MAX_CE_DELTA: f64 = 0.05;
const MAX_PASS_ALL: f64 = 10.0;
const SELECTION_CASES: usize = 1000;
const COMPOSITE_REL_TOL: f64 = 1e-12;
const PROBES_PER_KIND: usize = 100;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const CLEAN_MODELS: u64 = 20;
const CLEAN_STEPS: usize = 300;
const CAPACITY_LENGTHS: [usize; 3] = [5, 10, 15];
const MIN_WITHIN_RANGE: f64 = 0.99;
const GRAD_REL_TOL: f64 = 1e-3;
const GRAD_FLOOR: f64 = 1e-4;
const RANDOM_REPORTS: usize = 10_000;

struct Line {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn note(msg: &str) {
    eprintln!("[acceptance] {msg}");
}

fn check(lines: &mut Vec<Line>, id: usize, name: &'static str, f: impl FnOnce() -> (bool, String)) {
    let started = Instant::now();
    let (pass, detail) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(e) => {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            (false, format!("panicked: {}", msg.unwrap_or_default()))
        }
    };
    note(&format!("criterion {id} done in {:.0?}", started.elapsed()));
    lines.push(Line { id, name, pass, detail });
}

fn black_box(m: &ModelState, registry: &UserRegistry, inputs: &[Vec<u8>], max_new: usize) -> VerificationResult {
    let mut suspect = LocalSuspect::new(m).unwrap();
    verify(&mut suspect, registry, inputs, max_new, VerifyMode::FullReport).unwrap()
}

fn support_within_mask(m_o: &ModelState, m_w: &ModelState, mask: &GradientMask) -> bool {
    m_o.diff_support(m_w).unwrap().into_iter().all(|(li, i)| mask.contains(&m_o.layers[li].name, i))
}

/// Harmlessness numbers of one watermarked model against the origin.
struct Harm {
    ce_delta: f64,
    pass_all: f64,
}

fn harm(m_o: &ModelState, report_o: &PassKReport, m: &ModelState, cfg: &PipelineConfig) -> (Harm, PassKReport) {
    let report = pass_at_k(m, &toy_tasks(), &cfg.eval).unwrap();
    let h = Harm {
        ce_delta: perplexity_delta(m_o, m, corpus::evaluation_text()).unwrap(),
        pass_all: pass_all(report_o, &report).unwrap(),
    };
    (h, report)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn main() -> ExitCode {
    let cfg = PipelineConfig::default();
    let mut lines = Vec::new();
    let tasks = toy_tasks();

    note("training the origin model");
    let started = Instant::now();
    let (m_o, _) = pipeline::train_origin(&cfg).expect("origin trains");
    let mut registry = pipeline::registry(&cfg).unwrap();
    let suite = pipeline::build_suite(&cfg, &m_o, &mut registry).unwrap();
    let e = pipeline::select_and_embed(&cfg, &m_o, &registry, suite).unwrap();
    let pipeline_time = started.elapsed();
    let inputs = e.suite.watermark_inputs();
    note(&format!("default pipeline took {pipeline_time:.0?}"));

    let report_o = pass_at_k(&m_o, &tasks, &cfg.eval).unwrap();
    let mut embeds: Vec<(String, ModelState, GradientMask)> = vec![("default".into(), e.m_w.clone(), e.mask.clone())];

    check(&mut lines, 1, "effectiveness", || {
        let v = black_box(&e.m_w, &registry, &inputs, cfg.max_new);
        let user = v.matched_user.clone().unwrap_or_else(|| "none".into());
        let pass = v.matched_user.as_deref() == Some(e.suite.user_id.as_str())
            && v.wsr == 1.0
            && pipeline_time <= RUNTIME_BUDGET;
        (
            pass,
            format!(
                "matched {user} (expected {}), WSR {:.2} (need 1.00), {} params, pipeline {:.0?} (budget {:?})",
                e.suite.user_id,
                v.wsr,
                m_o.param_count(),
                pipeline_time,
                RUNTIME_BUDGET
            ),
        )
    });

    note("full-parameter fine-tuning baseline");
    let m_sft = pipeline::sft_baseline(&cfg, &m_o, &e.suite, &registry).unwrap();
    embeds.push(("sft".into(), m_sft.clone(), GradientMask::full(&m_o)));
    let (h_w, report_w) = harm(&m_o, &report_o, &e.m_w, &cfg);
    let (h_sft, report_sft) = harm(&m_o, &report_o, &m_sft, &cfg);

    check(&mut lines, 2, "harmlessness", || {
        let pass = h_w.ce_delta <= MAX_CE_DELTA
            && h_w.pass_all <= MAX_PASS_ALL
            && h_w.ce_delta < h_sft.ce_delta
            && h_w.pass_all < h_sft.pass_all;
        (
            pass,
            format!(
                "ce delta {:+.4} (max {MAX_CE_DELTA}, sft {:+.4}); pass@all {:.1} (max {MAX_PASS_ALL}, sft {:.1})",
                h_w.ce_delta, h_sft.ce_delta, h_w.pass_all, h_sft.pass_all
            ),
        )
    });

    check(&mut lines, 4, "selection correctness", || selection_criterion(&m_o, &e, &cfg));

    note("robustness grid and negative-sample ablation");
    let mut trials = robustness_grid(&SEEDS);
    trials.extend(SEEDS.iter().map(|&seed| TrialSpec { seed, strategy: Strategy::Srw, adv: true, negatives: false }));
    let outcomes = sweep(&cfg, &m_o, &registry, &trials).unwrap();
    for o in &outcomes {
        let s = o.spec;
        embeds.push((
            format!("seed {} {} adv={} neg={}", s.seed, s.strategy, s.adv, s.negatives),
            o.embedded.m_w.clone(),
            o.embedded.mask.clone(),
        ));
    }
    let with_neg = |seed: u64| {
        outcomes
            .iter()
            .find(|o| o.spec == TrialSpec { seed, strategy: Strategy::Srw, adv: true, negatives: true })
            .unwrap()
    };

    check(&mut lines, 5, "detection robustness", || {
        let r = probe_report(&e.m_w, &registry, PROBES_PER_KIND, cfg.suite.rule_len, cfg.probe_seed, corpus::BASE.bytes)
            .unwrap();
        let rates: Vec<f64> = ProbeKind::ALL.iter().map(|&k| r.probe_rate(k).unwrap()).collect();
        let t2 = |o: &TrialOutcome| {
            let p = clmtrace::attacks::build_probes(ProbeKind::T2, PROBES_PER_KIND, cfg.suite.rule_len, o.spec.seed, corpus::BASE.bytes)
                .unwrap();
            clmtrace::attacks::attack_probe(&o.embedded.m_w, &o.registry, ProbeKind::T2, &p).unwrap().rate
        };
        let ablated: Vec<f64> = outcomes.iter().filter(|o| !o.spec.negatives).map(t2).collect();
        let kept: Vec<f64> = SEEDS.iter().map(|&s| t2(with_neg(s))).collect();
        let (a, k) = (mean(ablated.iter().copied()), mean(kept.iter().copied()));
        let pass = rates.iter().all(|&r| r == 0.0) && a > k;
        (
            pass,
            format!(
                "T1/T2/T3 rates {:.2}/{:.2}/{:.2} over {PROBES_PER_KIND} each (need 0); mean T2 without negatives {a:.3} vs with {k:.3} over {} seeds (need strictly higher)",
                rates[0],
                rates[1],
                rates[2],
                SEEDS.len()
            ),
        )
    });

    check(&mut lines, 6, "fine-tuning robustness ordering", || {
        let cell = |strategy: Strategy, adv: bool| {
            mean(
                outcomes
                    .iter()
                    .filter(|o| o.spec.negatives && o.spec.strategy == strategy && o.spec.adv == adv)
                    .map(|o| o.attack.post_wsr.unwrap()),
            )
        };
        let (sa, sn, ra, rn) = (
            cell(Strategy::Srw, true),
            cell(Strategy::Srw, false),
            cell(Strategy::Random, true),
            cell(Strategy::Random, false),
        );
        let margins = [sa - sn, ra - rn, sa - ra, sn - rn];
        let pass = margins.iter().all(|&m| m >= 0.0) && margins.iter().any(|&m| m > 0.0);
        let pre = mean(outcomes.iter().filter(|o| o.spec.negatives).map(|o| o.attack.pre_wsr.unwrap()));
        (
            pass,
            format!(
                "mean post-attack WSR srw+adv {sa:.2}, srw {sn:.2}, random+adv {ra:.2}, random {rn:.2} over {} seeds (mean pre-attack {pre:.2})",
                SEEDS.len()
            ),
        )
    });

    note("training independent clean models");
    let clean: Vec<ModelState> = (1..=CLEAN_MODELS)
        .map(|seed| {
            let text = if seed % 2 == 0 { corpus::ATTACK_CHAT } else { corpus::BASE };
            let model = ModelConfig { rng_seed: seed, ..cfg.model };
            let spec = BaseTraining { steps: CLEAN_STEPS, ..cfg.base };
            train_base(model, text.bytes, text.id, &spec).unwrap().0
        })
        .collect();

    check(&mut lines, 7, "soundness", || {
        let mut all_inputs = inputs.clone();
        for o in &outcomes {
            all_inputs.extend(o.embedded.suite.watermark_inputs());
        }
        let claims: Vec<String> = clean
            .iter()
            .enumerate()
            .filter_map(|(i, m)| black_box(m, &registry, &all_inputs, cfg.max_new).matched_user.map(|u| format!("model {} -> {u}", i + 1)))
            .collect();
        (
            claims.is_empty(),
            format!(
                "{} of {CLEAN_MODELS} clean models claimed over {} watermark inputs{}",
                claims.len(),
                all_inputs.len(),
                if claims.is_empty() { String::new() } else { format!(": {}", claims.join(", ")) }
            ),
        )
    });

    note("capacity runs");
    let mut capacity = Vec::new();
    for len in CAPACITY_LENGTHS {
        let (wsr, h, run) = if len == cfg.suite.rule_len {
            let v = black_box(&e.m_w, &registry, &inputs, cfg.max_new);
            (v.wsr, Harm { ce_delta: h_w.ce_delta, pass_all: h_w.pass_all }, None)
        } else {
            let mut c = cfg.clone();
            c.suite.rule_len = len;
            let mut reg = pipeline::registry(&c).unwrap();
            let suite = pipeline::build_suite(&c, &m_o, &mut reg).unwrap();
            let run = pipeline::select_and_embed(&c, &m_o, &reg, suite).unwrap();
            let v = black_box(&run.m_w, &reg, &run.suite.watermark_inputs(), c.max_new);
            let (h, _) = harm(&m_o, &report_o, &run.m_w, &c);
            (v.wsr, h, Some(run))
        };
        if let Some(run) = run {
            embeds.push((format!("capacity {len}"), run.m_w, run.mask));
        }
        capacity.push((len, wsr, h));
    }

    check(&mut lines, 8, "capacity", || {
        let pass = capacity
            .iter()
            .all(|(_, wsr, h)| *wsr == 1.0 && h.ce_delta <= MAX_CE_DELTA && h.pass_all <= MAX_PASS_ALL);
        let parts: Vec<String> = capacity
            .iter()
            .map(|(len, wsr, h)| format!("len {len}: WSR {wsr:.2}, ce {:+.4}, pass@all {:.1}", h.ce_delta, h.pass_all))
            .collect();
        (pass, parts.join("; "))
    });

    check(&mut lines, 9, "identification resistance", || {
        let r = identify_params(&m_o, &e.m_w, &e.mask).unwrap();
        let worst = r
            .ident_stats
            .iter()
            .filter(|s| s.watermarked > 0)
            .min_by(|a, b| a.within_range.total_cmp(&b.within_range))
            .unwrap();
        let failing = r.ident_stats.iter().filter(|s| s.within_range < MIN_WITHIN_RANGE).count();
        (
            failing == 0,
            format!(
                "{failing} of {} layers below {MIN_WITHIN_RANGE}; worst {} at {:.3}; overall {:.3}",
                r.ident_stats.len(),
                worst.layer,
                worst.within_range,
                r.overall_within_range.unwrap()
            ),
        )
    });

    check(&mut lines, 10, "graft verification", || {
        let mut origin_hits = 0;
        let mut unrelated_hits = 0;
        for (i, &seed) in SEEDS.iter().enumerate() {
            let o = with_neg(seed);
            let Embedded { suite, mask, m_w, .. } = &o.embedded;
            let probe = suite.watermark_inputs();
            let onto_origin = black_box(&graft(&m_o, m_w, mask).unwrap(), &o.registry, &probe, cfg.max_new);
            if onto_origin.matched_user.as_deref() == Some(suite.user_id.as_str()) {
                origin_hits += 1;
            }
            let onto_other = black_box(&graft(&clean[i], m_w, mask).unwrap(), &o.registry, &probe, cfg.max_new);
            if onto_other.matched_user.is_some() {
                unrelated_hits += 1;
            }
        }
        let n = SEEDS.len();
        (
            origin_hits == n && unrelated_hits == 0,
            format!("origin hybrids triggered {origin_hits}/{n} (need {n}); unrelated hybrids triggered {unrelated_hits}/{n} (need 0)"),
        )
    });

    check(&mut lines, 11, "numerics", || numerics_criterion(&m_o, &[&report_o, &report_w, &report_sft]));

    check(&mut lines, 3, "masked-injection exactness", || {
        let bad: Vec<&str> =
            embeds.iter().filter(|(_, m_w, mask)| !support_within_mask(&m_o, m_w, mask)).map(|(n, _, _)| n.as_str()).collect();
        (
            bad.is_empty(),
            format!("{} embed runs checked, {} with changes outside the mask{}", embeds.len(), bad.len(), if bad.is_empty() { String::new() } else { format!(": {}", bad.join(", ")) }),
        )
    });

    lines.sort_by_key(|l| l.id);
    println!();
    for l in &lines {
        println!("criterion {:>2} {:<34} {}  {}", l.id, l.name, if l.pass { "PASS" } else { "FAIL" }, l.detail);
    }
    let passed = lines.iter().filter(|l| l.pass).count();
    println!("acceptance: {passed}/{} criteria passed", lines.len());
    if passed == lines.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn selection_criterion(m_o: &ModelState, e: &Embedded, cfg: &PipelineConfig) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    let mut ties = 0;
    for _ in 0..SELECTION_CASES {
        let n_layers = rng.random_range(1..=3);
        let mut layers = Vec::new();
        for l in 0..n_layers {
            let len = rng.random_range(4..=64);
            let tied = rng.random_bool(0.5);
            let values: Vec<f64> = (0..len)
                .map(|_| match rng.random_range(0..10) {
                    0 => SENTINEL,
                    _ if tied => rng.random_range(0..4) as f64,
                    _ => rng.random_range(-5.0..5.0),
                })
                .collect();
            layers.push((format!("l{l}"), values));
        }
        let live = layers.iter().map(|(_, v)| v.iter().filter(|&&x| x < SENTINEL).count()).min().unwrap();
        if live == 0 {
            continue;
        }
        let t = rng.random_range(1..=live);
        let spec = SelectionSpec { strategy: Strategy::Srw, t_per_layer: t, ..Default::default() };
        let mask = select_mask(&ScoreMap { layers: layers.clone() }, &spec, &all_layers).unwrap();
        for (name, values) in &layers {
            let mut order: Vec<(f64, usize)> =
                values.iter().copied().enumerate().filter(|&(_, v)| v < SENTINEL).map(|(i, v)| (v, i)).collect();
            order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            if order.len() > t && order[t - 1].0 == order[t].0 {
                ties += 1;
            }
            let want: Vec<usize> = {
                let mut w: Vec<usize> = order[..t].iter().map(|p| p.1).collect();
                w.sort();
                w
            };
            let got: Vec<usize> = mask.layer(name).unwrap().iter().copied().collect();
            if got != want {
                mismatches += 1;
            }
        }
    }

    let (s_w, s_p) = score_srw(m_o, &e.suite, &cfg.selection).unwrap();
    let c = composite(&s_w, &s_p, cfg.selection.alpha, cfg.selection.beta).unwrap();
    let mut worst_rel = 0.0f64;
    let mut zero_entries = 0;
    for ((w, p), got) in s_w.layers.iter().zip(&s_p.layers).zip(&c.layers) {
        for i in 0..w.1.len() {
            if w.1[i] == 0.0 {
                zero_entries += 1;
                if got.1[i] != SENTINEL {
                    worst_rel = f64::INFINITY;
                }
                continue;
            }
            let want = cfg.selection.alpha / w.1[i] + cfg.selection.beta * p.1[i];
            if want.is_finite() {
                worst_rel = worst_rel.max((got.1[i] - want).abs() / want.abs().max(f64::MIN_POSITIVE));
            }
        }
    }
    let zero_selected: usize = s_w
        .layers
        .iter()
        .map(|(name, w)| e.mask.layer(name).map_or(0, |s| s.iter().filter(|&&i| w[i] == 0.0).count()))
        .sum();
    let pass = mismatches == 0 && worst_rel <= COMPOSITE_REL_TOL && zero_selected == 0;
    (
        pass,
        format!(
            "{mismatches} mismatches over {SELECTION_CASES} maps ({ties} layers with boundary ties); composite worst rel err {worst_rel:.1e} (tol {COMPOSITE_REL_TOL:.0e}); {zero_selected} of {zero_entries} zero-S_w entries selected"
        ),
    )
}

fn numerics_criterion(m_o: &ModelState, reports: &[&PassKReport]) -> (bool, String) {
    let sample = Sample::new(b"the cat sat on ".to_vec(), b"the mat.".to_vec());
    let grads = loss_gradient(m_o, &sample).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h = 1e-5;
    let (mut checked, mut bad, mut worst) = (0, 0, 0.0f64);
    let used: Vec<u8> = [sample.input.as_slice(), sample.target.as_slice()].concat();
    for (li, layer) in m_o.layers.iter().enumerate() {
        for _ in 0..8 {
            let i = if layer.name == "tok_emb" {
                let row = used[rng.random_range(0..used.len())] as usize;
                row * m_o.config.embed_dim + rng.random_range(0..m_o.config.embed_dim)
            } else {
                rng.random_range(0..layer.len())
            };
            let v = layer.values[i] as f64;
            let fd = (forward_loss_at(m_o, &sample, &[(li, i, v + h)]).unwrap()
                - forward_loss_at(m_o, &sample, &[(li, i, v - h)]).unwrap())
                / (2.0 * h);
            let g = grads[li][i];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(GRAD_FLOOR);
            worst = worst.max(rel);
            if rel > GRAD_REL_TOL {
                bad += 1;
            }
            checked += 1;
        }
    }

    let mut monotone_fail = 0;
    for r in reports {
        let v: Vec<f64> = r.k_values.iter().map(|k| r.pass_at_k[k]).collect();
        if v.windows(2).any(|w| w[0] > w[1]) {
            monotone_fail += 1;
        }
    }
    let ks = [1usize, 5, 10, 25];
    let mut clamp_fail = 0;
    for case in 0..RANDOM_REPORTS {
        let tasks = rng.random_range(1..=8);
        let p = rng.random_range(0.0..1.0);
        let outcomes: Vec<Vec<bool>> = (0..tasks).map(|_| (0..25).map(|_| rng.random_bool(p)).collect()).collect();
        let pk = pass_at_k_from_outcomes(&outcomes, &ks).unwrap();
        if pk.values().collect::<Vec<_>>().windows(2).any(|w| w[0] > w[1]) {
            monotone_fail += 1;
        }
        let mk = |vals: Vec<f64>| PassKReport {
            convention: "first-k".into(),
            k_values: ks.to_vec(),
            pass_at_k: ks.iter().copied().zip(vals).collect::<BTreeMap<_, _>>(),
            samples_per_task: 25,
            temperature: 0.8,
            seed: case as u64,
            outcomes: Vec::new(),
        };
        let o: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..=1.0)).collect();
        let w: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..=1.0)).collect();
        let got = pass_all(&mk(o.clone()), &mk(w.clone())).unwrap();
        let want: f64 = o.iter().zip(&w).map(|(a, b)| (a * 100.0 - b * 100.0).max(0.0)).sum();
        let improved: Vec<f64> = o.iter().zip(&w).map(|(a, b)| a.max(*b)).collect();
        let zero = pass_all(&mk(o), &mk(improved)).unwrap();
        if got < 0.0 || (got - want).abs() > 1e-9 || zero != 0.0 {
            clamp_fail += 1;
        }
    }
    (
        bad == 0 && monotone_fail == 0 && clamp_fail == 0,
        format!(
            "{bad} of {checked} gradient entries off (worst rel {worst:.1e}, tol {GRAD_REL_TOL:.0e}); {monotone_fail} non-monotone pass@k reports; {clamp_fail} of {RANDOM_REPORTS} pass@all clamp violations"
        ),
    )
}
