use std::collections::BTreeSet;

use proptest::prelude::*;

use clmtrace::attacks::{build_probes, identify_params, ProbeKind};
use clmtrace::evalkit::{pass_all, pass_at_k_from_outcomes, PassKReport};
use clmtrace::model::{load_bytes, sft_step, to_bytes, GradientMask, ModelConfig, ModelState, Sample};
use clmtrace::selector::{composite, select_mask, all_layers, ScoreMap, SelectionSpec, Strategy, SENTINEL};
use clmtrace::verifier::{verify, Suspect};
use clmtrace::watermark::{assign_user_tags, build_rule_string, is_rule_string, watermark_input, CharClass};
use clmtrace::Result;

fn tiny(seed: u64) -> ModelState {
    ModelState::init(ModelConfig {
        context_len: 32,
        embed_dim: 8,
        n_blocks: 1,
        n_heads: 2,
        ffn_dim: 16,
        rng_seed: seed,
        ..Default::default()
    })
    .unwrap()
}

fn random_mask(m: &ModelState, picks: &[(usize, usize)]) -> GradientMask {
    let mut mask = GradientMask::empty_for(m);
    for &(l, i) in picks {
        let layer = &m.layers[l % m.layers.len()];
        mask.insert(&layer.name, i % layer.len());
    }
    mask
}

fn report(fracs: &[f64]) -> PassKReport {
    let k_values = vec![1, 5, 10, 25];
    PassKReport {
        convention: "first-k".into(),
        pass_at_k: k_values.iter().copied().zip(fracs.iter().copied()).collect(),
        k_values,
        samples_per_task: 25,
        temperature: 0.8,
        seed: 0,
        outcomes: Vec::new(),
    }
}

struct Scripted(Vec<Vec<u8>>, usize);

impl Suspect for Scripted {
    fn generate(&mut self, _: &[u8], _: usize) -> Result<Vec<u8>> {
        let out = self.0[self.1 % self.0.len()].clone();
        self.1 += 1;
        Ok(out)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masked_step_touches_only_masked_values(
        seed in 0u64..1000,
        picks in prop::collection::vec((0usize..64, 0usize..4096), 0..24),
        input in prop::collection::vec(any::<u8>(), 1..10),
        target in prop::collection::vec(any::<u8>(), 1..10),
    ) {
        let m = tiny(seed);
        let mask = random_mask(&m, &picks);
        let next = sft_step(&m, &[Sample::new(input, target)], 0.5, Some(&mask)).unwrap();
        for (li, idx) in m.diff_support(&next).unwrap() {
            prop_assert!(mask.contains(&m.layers[li].name, idx));
        }
    }

    #[test]
    fn checkpoints_round_trip_bit_exact(seed in any::<u64>()) {
        let m = tiny(seed);
        let bytes = to_bytes(&m);
        let back = load_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn rule_strings_follow_class_order(span in 1usize..8, seed in any::<u64>()) {
        let rule = build_rule_string(span * 5, seed).unwrap();
        prop_assert!(is_rule_string(&rule.text, span * 5));
        for (s, class) in rule.class_spans.iter().zip(CharClass::ORDER) {
            prop_assert_eq!(s.class, class);
            prop_assert!(rule.text[s.start..s.start + s.len].iter().all(|&b| class.contains(b)));
        }
    }

    #[test]
    fn user_tags_are_distinct(n in 1usize..40, len in 6usize..16, seed in any::<u64>()) {
        let reg = assign_user_tags(n, len, seed).unwrap();
        let tags: BTreeSet<_> = reg.entries.iter().map(|e| e.tag.clone()).collect();
        prop_assert_eq!(tags.len(), n);
        prop_assert!(reg.entries.iter().all(|e| e.tag.len() == len));
    }

    #[test]
    fn selection_returns_the_t_smallest_per_layer(
        values in prop::collection::vec(prop::collection::vec(0u8..6, 8..40), 1..4),
        t in 1usize..8,
    ) {
        let scores = ScoreMap {
            layers: values
                .iter()
                .enumerate()
                .map(|(i, v)| (format!("l{i}"), v.iter().map(|&x| x as f64).collect()))
                .collect(),
        };
        let spec = SelectionSpec { strategy: Strategy::Srw, t_per_layer: t, ..Default::default() };
        let mask = select_mask(&scores, &spec, &all_layers).unwrap();
        for (name, v) in &scores.layers {
            let picked = mask.layer(name).unwrap();
            prop_assert_eq!(picked.len(), t);
            let worst_in = picked.iter().map(|&i| v[i]).fold(f64::MIN, f64::max);
            let best_out = (0..v.len()).filter(|i| !picked.contains(i)).map(|i| v[i]).fold(f64::MAX, f64::min);
            prop_assert!(worst_in <= best_out);
        }
    }

    #[test]
    fn zero_watermark_delta_is_never_selected(
        s_w in prop::collection::vec(prop_oneof![Just(0.0), 1e-6f64..10.0], 12..30),
        s_p in prop::collection::vec(0.0f64..10.0, 30),
    ) {
        let n = s_w.len();
        let live = s_w.iter().filter(|&&v| v != 0.0).count();
        prop_assume!(live >= 2);
        let w = ScoreMap { layers: vec![("l".into(), s_w.clone())] };
        let p = ScoreMap { layers: vec![("l".into(), s_p[..n].to_vec())] };
        let c = composite(&w, &p, 1.0, 1.0).unwrap();
        let spec = SelectionSpec { strategy: Strategy::Srw, t_per_layer: live, ..Default::default() };
        let mask = select_mask(&c, &spec, &all_layers).unwrap();
        for &i in mask.layer("l").unwrap() {
            prop_assert!(s_w[i] != 0.0);
            prop_assert!(c.layers[0].1[i] < SENTINEL);
        }
    }

    #[test]
    fn pass_at_k_is_monotone_in_k(outcomes in prop::collection::vec(prop::collection::vec(any::<bool>(), 25), 1..12)) {
        let p = pass_at_k_from_outcomes(&outcomes, &[1, 5, 10, 25]).unwrap();
        let v: Vec<f64> = p.values().copied().collect();
        prop_assert!(v.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn pass_all_is_clamped(o in prop::collection::vec(0.0f64..=1.0, 4), w in prop::collection::vec(0.0f64..=1.0, 4)) {
        let (ro, rw) = (report(&o), report(&w));
        let total = pass_all(&ro, &rw).unwrap();
        prop_assert!(total >= 0.0);
        let better: Vec<f64> = o.iter().zip(&w).map(|(a, b)| a.max(*b)).collect();
        prop_assert_eq!(pass_all(&ro, &report(&better)).unwrap(), 0.0);
    }

    #[test]
    fn dropping_inputs_never_adds_detections(hits in prop::collection::vec(any::<bool>(), 1..20), cut in 0usize..20) {
        let reg = assign_user_tags(2, 10, 1).unwrap();
        let tag = reg.entries[0].tag.clone();
        let replies: Vec<Vec<u8>> = hits.iter().map(|&h| if h { [b"x".as_slice(), &tag].concat() } else { b"nothing".to_vec() }).collect();
        let inputs: Vec<Vec<u8>> = (0..hits.len()).map(|i| vec![b'a' + i as u8]).collect();
        let full = verify(&mut Scripted(replies.clone(), 0), &reg, &inputs, 16, Default::default()).unwrap();
        let keep = (cut % hits.len()) + 1;
        let part = verify(&mut Scripted(replies, 0), &reg, &inputs[..keep], 16, Default::default()).unwrap();
        prop_assert!(part.detected <= full.detected);
        prop_assert_eq!(full.detected, hits.iter().filter(|&&h| h).count());
    }

    #[test]
    fn probes_never_equal_watermark_inputs(seed in any::<u64>(), n in 1usize..30) {
        let inputs: BTreeSet<Vec<u8>> =
            (0..10).map(|s| watermark_input(&build_rule_string(10, seed ^ s).unwrap().text)).collect();
        for kind in ProbeKind::ALL {
            for p in build_probes(kind, n, 10, seed, b"some corpus text").unwrap() {
                prop_assert!(!inputs.contains(&p));
                prop_assert!(!clmtrace::attacks::carries_rule_string(&p));
            }
        }
    }

    #[test]
    fn identification_partitions_every_layer(seed in 0u64..100, picks in prop::collection::vec((0usize..64, 0usize..4096), 0..30)) {
        let m = tiny(seed);
        let mask = random_mask(&m, &picks);
        let r = identify_params(&m, &m, &mask).unwrap();
        for (layer, st) in m.layers.iter().zip(&r.ident_stats) {
            let marked = mask.layer(&layer.name).map_or(0, |s| s.len());
            prop_assert_eq!(st.watermarked, marked);
            prop_assert_eq!(st.min.is_some(), marked < layer.len());
        }
    }
}
