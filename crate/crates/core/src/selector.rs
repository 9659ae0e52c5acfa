//! Parameter relevance scoring and per-layer selection masks.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::net::Net;
use crate::model::{GradientMask, ModelState, Sample};
use crate::model::MaskedTrainer;
use crate::watermark::WatermarkSuite;

/// Value given to entries that must never be selected.
pub const SENTINEL: f64 = f64::MAX;

/// One non-negative score per parameter, in layer-table order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub layers: Vec<(String, Vec<f64>)>,
}

impl ScoreMap {
    pub fn zeros_like(m: &ModelState) -> Self {
        Self { layers: m.layers.iter().map(|l| (l.name.clone(), vec![0.0; l.len()])).collect() }
    }

    pub fn layer(&self, name: &str) -> Option<&[f64]> {
        self.layers.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn validate(&self) -> Result<()> {
        for (name, values) in &self.layers {
            if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                return Err(Error::InvalidArgument(format!("score {v} in layer `{name}`")));
            }
        }
        Ok(())
    }

    fn check_same_shape(&self, other: &ScoreMap) -> Result<()> {
        let same = self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|((a, x), (b, y))| a == b && x.len() == y.len());
        if same {
            Ok(())
        } else {
            Err(Error::ModelShapeMismatch("score maps have different layer tables".into()))
        }
    }

    /// Writes `<stem>.jsonl` with one `{layer, values_path}` row per layer
    /// and the values as little-endian `f64` files under `<stem>/`.
    pub fn write_sidecar(&self, dir: &Path, stem: &str) -> Result<()> {
        let values_dir = dir.join(stem);
        std::fs::create_dir_all(&values_dir)?;
        let mut index = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{stem}.jsonl")))?);
        for (name, values) in &self.layers {
            let rel = format!("{stem}/{name}.f64");
            let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
            std::fs::write(dir.join(&rel), bytes)?;
            serde_json::to_writer(&mut index, &SidecarRow { layer: name.clone(), values_path: rel })?;
            index.write_all(b"\n")?;
        }
        index.flush()?;
        Ok(())
    }

    pub fn read_sidecar(dir: &Path, stem: &str) -> Result<Self> {
        let index = std::io::BufReader::new(std::fs::File::open(dir.join(format!("{stem}.jsonl")))?);
        let mut layers = Vec::new();
        for line in index.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: SidecarRow = serde_json::from_str(&line)?;
            let bytes = std::fs::read(dir.join(&row.values_path))?;
            if bytes.len() % 8 != 0 {
                return Err(Error::InvalidArgument(format!("{}: truncated values", row.values_path)));
            }
            let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            layers.push((row.layer, values));
        }
        Ok(Self { layers })
    }
}

#[derive(Serialize, Deserialize)]
struct SidecarRow {
    layer: String,
    values_path: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Srw,
    Random,
    Emmark,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Srw => "srw",
            Strategy::Random => "random",
            Strategy::Emmark => "emmark",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "srw" => Ok(Strategy::Srw),
            "random" => Ok(Strategy::Random),
            "emmark" => Ok(Strategy::Emmark),
            _ => Err(Error::InvalidArgument(format!("unknown strategy `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSpec {
    pub strategy: Strategy,
    pub t_per_layer: usize,
    pub alpha: f64,
    pub beta: f64,
    pub ft_epochs: usize,
    pub ft_lr: f64,
    pub seed: u64,
}

impl Default for SelectionSpec {
    fn default() -> Self {
        Self { strategy: Strategy::Srw, t_per_layer: 8, alpha: 1.0, beta: 1.0, ft_epochs: 3, ft_lr: 0.05, seed: 0 }
    }
}

/// Default layer predicate: every named array is eligible.
pub fn all_layers(_: &str) -> bool {
    true
}

/// `|before - after|` entry by entry.
pub fn delta_score(before: &ModelState, after: &ModelState) -> Result<ScoreMap> {
    if before.config.layer_table() != after.config.layer_table() || before.layers.len() != after.layers.len() {
        return Err(Error::ModelShapeMismatch("models have different layer tables".into()));
    }
    let layers = before
        .layers
        .iter()
        .zip(&after.layers)
        .map(|(a, b)| {
            let v = a.values.iter().zip(&b.values).map(|(&x, &y)| (x as f64 - y as f64).abs()).collect();
            (a.name.clone(), v)
        })
        .collect();
    Ok(ScoreMap { layers })
}

/// Full-parameter plain-SGD probe: `epochs` passes, batch size 1, order
/// shuffled per epoch from `seed`.
pub fn probe_finetune(m: &ModelState, samples: &[Sample], epochs: usize, lr: f64, seed: u64) -> Result<ModelState> {
    let mut trainer = MaskedTrainer::new(m, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            trainer.step(std::slice::from_ref(&samples[i]), lr, 0.0)?;
        }
    }
    Ok(trainer.export(m))
}

/// Watermark relevance `S_w` and performance relevance `S_p` from two probe
/// fine-tunes of `m_o`; both probes are discarded.
pub fn score_srw(m_o: &ModelState, suite: &WatermarkSuite, spec: &SelectionSpec) -> Result<(ScoreMap, ScoreMap)> {
    if spec.ft_epochs == 0 {
        return Err(Error::InvalidArgument("probe fine-tune needs at least one epoch".into()));
    }
    let d_w = suite.watermark_specific();
    if d_w.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let m_ws = probe_finetune(m_o, &d_w, spec.ft_epochs, spec.ft_lr, spec.seed)?;
    let s_w = delta_score(m_o, &m_ws)?;
    let s_p = if suite.regularization.is_empty() {
        ScoreMap::zeros_like(m_o)
    } else {
        let m_ps = probe_finetune(m_o, &suite.regularization, spec.ft_epochs, spec.ft_lr, spec.seed ^ 1)?;
        delta_score(m_o, &m_ps)?
    };
    Ok((s_w, s_p))
}

/// `alpha / S_w + beta * S_p`, with [`SENTINEL`] wherever `S_w` is zero or
/// the value overflows.
pub fn composite(s_w: &ScoreMap, s_p: &ScoreMap, alpha: f64, beta: f64) -> Result<ScoreMap> {
    if !(alpha >= 0.0 && beta >= 0.0 && alpha.is_finite() && beta.is_finite()) {
        return Err(Error::BadWeights { alpha, beta });
    }
    s_w.check_same_shape(s_p)?;
    let layers = s_w
        .layers
        .iter()
        .zip(&s_p.layers)
        .map(|((name, w), (_, p))| {
            let v = w
                .iter()
                .zip(p)
                .map(|(&sw, &sp)| {
                    if sw == 0.0 {
                        return SENTINEL;
                    }
                    let s = alpha / sw + beta * sp;
                    if s.is_finite() {
                        s
                    } else {
                        SENTINEL
                    }
                })
                .collect();
            (name.clone(), v)
        })
        .collect();
    Ok(ScoreMap { layers })
}

/// Per-layer mean of `|w|` and of the input magnitude feeding each weight,
/// measured over the regularization inputs.
pub fn emmark_statistics(m_o: &ModelState, probes: &[Sample]) -> Result<(ScoreMap, ScoreMap)> {
    let net = Net::from_state(m_o)?;
    let rows = net.input_rows();
    let mut acc: Vec<Vec<f64>> = rows.iter().map(|&r| vec![0.0; r]).collect();
    let mut positions = 0usize;
    let ctx = m_o.config.context_len;
    for s in probes {
        let mut tokens = s.input.clone();
        tokens.extend_from_slice(&s.target);
        tokens.truncate(ctx);
        if tokens.is_empty() {
            continue;
        }
        net.accumulate_input_magnitudes(&tokens, &mut acc)?;
        positions += tokens.len();
    }
    let denom = positions.max(1) as f64;
    let mut weight = Vec::with_capacity(m_o.layers.len());
    let mut activation = Vec::with_capacity(m_o.layers.len());
    for (li, layer) in m_o.layers.iter().enumerate() {
        weight.push((layer.name.clone(), layer.values.iter().map(|v| (*v as f64).abs()).collect()));
        let cols = layer.len() / rows[li];
        let per_entry = (0..layer.len()).map(|i| acc[li][i / cols] / denom).collect();
        activation.push((layer.name.clone(), per_entry));
    }
    Ok((ScoreMap { layers: weight }, ScoreMap { layers: activation }))
}

fn standardize(v: &[f64]) -> Vec<f64> {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd == 0.0 || !sd.is_finite() {
        vec![0.0; v.len()]
    } else {
        v.iter().map(|x| (x - mean) / sd).collect()
    }
}

/// Magnitude-and-activation preference: `z(|w|) + z(act)` per layer,
/// returned negated and shifted by the layer maximum so that the preferred
/// (largest) entries get the smallest non-negative scores.
pub fn score_emmark(m_o: &ModelState, suite: &WatermarkSuite) -> Result<ScoreMap> {
    let (weight, activation) = emmark_statistics(m_o, &suite.regularization)?;
    let layers = weight
        .layers
        .into_iter()
        .zip(activation.layers)
        .map(|((name, w), (_, a))| {
            let z: Vec<f64> = standardize(&w).iter().zip(standardize(&a)).map(|(x, y)| x + y).collect();
            let top = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (name, z.iter().map(|v| top - v).collect())
        })
        .collect();
    Ok(ScoreMap { layers })
}

/// The `t_per_layer` mask over every eligible layer of `scores`.
pub fn select_mask(scores: &ScoreMap, spec: &SelectionSpec, eligible: &dyn Fn(&str) -> bool) -> Result<GradientMask> {
    let t = spec.t_per_layer;
    if t == 0 {
        return Err(Error::InvalidArgument("t_per_layer must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut mask = GradientMask::new();
    for (name, values) in scores.layers.iter().filter(|(n, _)| eligible(n)) {
        if t > values.len() {
            return Err(Error::TTooLarge { layer: name.clone(), t, available: values.len() });
        }
        let chosen: Vec<usize> = match spec.strategy {
            Strategy::Random => rand::seq::index::sample(&mut rng, values.len(), t).into_vec(),
            Strategy::Srw | Strategy::Emmark => {
                let mut idx: Vec<usize> = (0..values.len()).filter(|&i| values[i] < SENTINEL).collect();
                if idx.len() < t {
                    return Err(Error::TTooLarge { layer: name.clone(), t, available: idx.len() });
                }
                let by_score = |a: &usize, b: &usize| values[*a].total_cmp(&values[*b]).then(a.cmp(b));
                idx.select_nth_unstable_by(t - 1, by_score);
                idx.truncate(t);
                idx
            }
        };
        mask.set_layer(name, chosen);
    }
    Ok(mask)
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub mask: GradientMask,
    /// The scores the mask was drawn from (absent for random selection).
    pub scores: Option<ScoreMap>,
}

/// Scores `m_o` under `spec.strategy` and selects the mask.
pub fn select(
    m_o: &ModelState,
    suite: &WatermarkSuite,
    spec: &SelectionSpec,
    eligible: &dyn Fn(&str) -> bool,
) -> Result<Selection> {
    let scores = match spec.strategy {
        Strategy::Srw => {
            let (s_w, s_p) = score_srw(m_o, suite, spec)?;
            Some(composite(&s_w, &s_p, spec.alpha, spec.beta)?)
        }
        Strategy::Emmark => Some(score_emmark(m_o, suite)?),
        Strategy::Random => None,
    };
    let mask = match &scores {
        Some(s) => select_mask(s, spec, eligible)?,
        None => select_mask(&ScoreMap::zeros_like(m_o), spec, eligible)?,
    };
    mask.validate(m_o)?;
    Ok(Selection { mask, scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn map(values: Vec<f64>) -> ScoreMap {
        ScoreMap { layers: vec![("l".into(), values)] }
    }

    fn spec(strategy: Strategy, t: usize) -> SelectionSpec {
        SelectionSpec { strategy, t_per_layer: t, ..Default::default() }
    }

    fn picked(mask: &GradientMask) -> Vec<usize> {
        mask.layer("l").unwrap().iter().copied().collect()
    }

    #[test]
    fn smallest_scores_win_and_ties_go_low() {
        let m = select_mask(&map(vec![3.0, 1.0, 2.0, 5.0]), &spec(Strategy::Srw, 2), &all_layers).unwrap();
        assert_eq!(picked(&m), vec![1, 2]);
        let m = select_mask(&map(vec![1.0; 4]), &spec(Strategy::Srw, 2), &all_layers).unwrap();
        assert_eq!(picked(&m), vec![0, 1]);
    }

    #[test]
    fn t_larger_than_layer_is_rejected() {
        let r = select_mask(&map(vec![1.0; 4]), &spec(Strategy::Random, 5), &all_layers);
        assert!(matches!(r, Err(Error::TTooLarge { t: 5, available: 4, .. })));
    }

    #[test]
    fn composite_examples() {
        let s = composite(&map(vec![1.0, 2.0, 4.0]), &map(vec![0.0; 3]), 1.0, 0.0).unwrap();
        assert_eq!(s.layers[0].1, vec![1.0, 0.5, 0.25]);
        let s = composite(&map(vec![1.0]), &map(vec![100.0]), 1.0, 0.001).unwrap();
        assert!((s.layers[0].1[0] - 1.1).abs() < 1e-12);
        let s = composite(&map(vec![0.0, 1.0]), &map(vec![0.0, 0.0]), 1.0, 1.0).unwrap();
        assert_eq!(s.layers[0].1[0], SENTINEL);
        assert!(matches!(composite(&map(vec![1.0]), &map(vec![1.0]), -1.0, 0.0), Err(Error::BadWeights { .. })));
    }

    #[test]
    fn delta_score_of_one_change() {
        let a = ModelState::init(ModelConfig { embed_dim: 8, context_len: 16, ffn_dim: 16, ..Default::default() }).unwrap();
        assert!(delta_score(&a, &a).unwrap().layers.iter().all(|(_, v)| v.iter().all(|x| *x == 0.0)));
        let mut b = a.clone();
        b.layers[3].values[5] -= 0.3;
        let d = delta_score(&a, &b).unwrap();
        for (li, (_, v)) in d.layers.iter().enumerate() {
            for (i, x) in v.iter().enumerate() {
                if (li, i) == (3, 5) {
                    let expect = (a.layers[3].values[5] as f64 - b.layers[3].values[5] as f64).abs();
                    assert_eq!(*x, expect);
                    assert!((x - 0.3).abs() < 1e-6);
                } else {
                    assert_eq!(*x, 0.0);
                }
            }
        }
    }

    #[test]
    fn random_strategy_is_seeded_and_exact() {
        let s = map(vec![0.0; 100]);
        let a = select_mask(&s, &spec(Strategy::Random, 8), &all_layers).unwrap();
        let b = select_mask(&s, &spec(Strategy::Random, 8), &all_layers).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.total(), 8);
    }

    #[test]
    fn standardize_constant_is_zero() {
        assert_eq!(standardize(&[2.0; 5]), vec![0.0; 5]);
    }
}
