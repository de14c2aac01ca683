//! Per-layer head keep/remove plans: the type-guided ranking and the
//! baseline heuristics, serialised as mask plans.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dump_io::HeadSlice;
use crate::error::{Error, Result};
use crate::geometry::curve_point;
use crate::taxonomy::{HeadProfile, Regime};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    TypeGuided,
    Random { seed: u64 },
    EntropyLow,
    EntropyHigh,
    SinkMass,
    LastMass,
    WeightMagnitude,
}

impl Method {
    /// Parses a CLI method name; `seed` is used by `random`.
    pub fn parse(name: &str, seed: u64) -> Result<Method> {
        Ok(match name {
            "type-guided" => Method::TypeGuided,
            "random" => Method::Random { seed },
            "entropy-low" => Method::EntropyLow,
            "entropy-high" => Method::EntropyHigh,
            "sink-mass" => Method::SinkMass,
            "last-mass" => Method::LastMass,
            "weight-magnitude" => Method::WeightMagnitude,
            other => return Err(Error::Config(format!("unknown method {other:?}"))),
        })
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::TypeGuided => f.write_str("type-guided"),
            Method::Random { seed } => write!(f, "random(seed={seed})"),
            Method::EntropyLow => f.write_str("entropy-low"),
            Method::EntropyHigh => f.write_str("entropy-high"),
            Method::SinkMass => f.write_str("sink-mass"),
            Method::LastMass => f.write_str("last-mass"),
            Method::WeightMagnitude => f.write_str("weight-magnitude"),
        }
    }
}

/// Per-head inputs to every ranking method.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadFeatures {
    pub layer: usize,
    pub head: usize,
    pub regime: Regime,
    /// Mean of F(r_min) and F(r_max) over N in {2, 3, 4}.
    pub small_n_fscore: f64,
    /// Attention entropy (mean over rows of the full matrix when present).
    pub entropy: f64,
    pub a0: f64,
    pub a_last: f64,
}

fn entropy(row: &[f32]) -> f64 {
    let z: f64 = row.iter().map(|&x| x as f64).sum();
    if z <= 0.0 {
        return 0.0;
    }
    -row.iter()
        .map(|&x| x as f64 / z)
        .filter(|&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

pub fn head_features(slice: &HeadSlice, profile: &HeadProfile) -> Result<HeadFeatures> {
    let n_pos = slice.positions();
    let small: Vec<usize> = [2, 3, 4].into_iter().filter(|&n| n <= n_pos).collect();
    let mut f = 0.0;
    for &n in &small {
        let c = curve_point(slice, n)?;
        f += 0.5 * (c.fscore_rmin + c.fscore_rmax);
    }
    let small_n_fscore = if small.is_empty() { 1.0 } else { f / small.len() as f64 };
    let ent = match &slice.attn_full {
        Some(full) => (0..n_pos).map(|r| entropy(&full[r * n_pos..(r + 1) * n_pos])).sum::<f64>() / n_pos as f64,
        None => entropy(&slice.attn_row),
    };
    let norms = slice.value_norms();
    let l = slice.seq_len();
    Ok(HeadFeatures {
        layer: slice.layer,
        head: slice.head,
        regime: profile.regime,
        small_n_fscore,
        entropy: ent,
        a0: slice.attn_row[0] as f64 * norms[0],
        a_last: slice.attn_row[l] as f64 * norms[l],
    })
}

/// Regime order for type-guided ranking, most important first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TypePriority(pub [Regime; 3]);

impl Default for TypePriority {
    fn default() -> Self {
        TypePriority([Regime::Mixer, Regime::Retriever, Regime::Reset])
    }
}

impl TypePriority {
    /// Orders regimes by descending ablation impact; ties keep the default order.
    pub fn from_impacts(impacts: &BTreeMap<Regime, f64>) -> Result<Self> {
        let mut order = TypePriority::default().0;
        for r in Regime::ALL {
            if !impacts.get(&r).is_some_and(|x| x.is_finite()) {
                return Err(Error::Config(format!("ablation impact for {r} missing or not finite")));
            }
        }
        order.sort_by(|a, b| impacts[b].total_cmp(&impacts[a]));
        Ok(TypePriority(order))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let impacts: BTreeMap<Regime, f64> =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_impacts(&impacts)
    }

    fn rank(&self, r: Regime) -> usize {
        self.0.iter().position(|&x| x == r).unwrap()
    }
}

/// Optional per-head projection-weight norms, `layers[l][h]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightSidecar {
    pub layers: Vec<Vec<f64>>,
}

impl WeightSidecar {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Dependency(format!("weight sidecar {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Default)]
pub struct RankOptions {
    pub priority: TypePriority,
    pub weights: Option<WeightSidecar>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadRanking {
    pub method: Method,
    /// scores[layer][head]; higher is kept first.
    pub scores: Vec<Vec<f64>>,
}

pub fn rank_heads(
    num_layers: usize,
    num_heads: usize,
    features: &[HeadFeatures],
    method: Method,
    opts: &RankOptions,
) -> Result<HeadRanking> {
    let mut feats: Vec<Vec<Option<&HeadFeatures>>> = vec![vec![None; num_heads]; num_layers];
    for f in features {
        if f.layer >= num_layers || f.head >= num_heads {
            return Err(Error::Validation(format!("features for head ({}, {}) outside the dump", f.layer, f.head)));
        }
        feats[f.layer][f.head] = Some(f);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(match method {
        Method::Random { seed } => seed,
        _ => 0,
    });
    let mut scores = vec![vec![0.0; num_heads]; num_layers];
    for l in 0..num_layers {
        for h in 0..num_heads {
            let f = || {
                feats[l][h].ok_or_else(|| Error::Validation(format!("no features for head ({l}, {h})")))
            };
            scores[l][h] = match method {
                Method::TypeGuided => {
                    let f = f()?;
                    (3 - opts.priority.rank(f.regime)) as f64 * 10.0 + f.small_n_fscore
                }
                Method::Random { .. } => rng.random::<f64>(),
                Method::EntropyLow => -f()?.entropy,
                Method::EntropyHigh => f()?.entropy,
                Method::SinkMass => f()?.a0,
                Method::LastMass => f()?.a_last,
                Method::WeightMagnitude => {
                    let w = opts
                        .weights
                        .as_ref()
                        .ok_or_else(|| Error::Dependency("weight-magnitude ranking needs a weight sidecar".into()))?;
                    *w.layers.get(l).and_then(|r| r.get(h)).ok_or_else(|| {
                        Error::Validation(format!("weight sidecar has no entry for head ({l}, {h})"))
                    })?
                }
            };
            if !scores[l][h].is_finite() {
                return Err(Error::Validation(format!("non-finite score for head ({l}, {h})")));
            }
        }
    }
    Ok(HeadRanking { method, scores })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskPlan {
    pub method: String,
    pub keep_fraction: f64,
    /// layers[l][h] is true when the head is kept.
    pub layers: Vec<Vec<bool>>,
}

impl MaskPlan {
    pub fn from_json(text: &str) -> Result<Self> {
        let plan: MaskPlan = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let width = plan.layers.first().map_or(0, Vec::len);
        if plan.layers.iter().any(|r| r.len() != width) {
            return Err(Error::Validation("mask rows differ in length".into()));
        }
        Ok(plan)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("mask plans always serialise")
    }
}

/// Heads kept per layer: ceil(H * fraction), at least 1. The flag is set
/// when H * fraction is below one head.
pub fn keep_count(num_heads: usize, keep_fraction: f64) -> (usize, bool) {
    let exact = num_heads as f64 * keep_fraction;
    let k = (exact - 1e-9).ceil().max(1.0) as usize;
    (k.min(num_heads), exact < 1.0 - 1e-9)
}

/// Keeps the top-scored heads in every layer. The flag reports the 1-head floor.
pub fn emit_mask(ranking: &HeadRanking, keep_fraction: f64) -> Result<(MaskPlan, bool)> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Range(format!("keep fraction {keep_fraction} outside (0, 1]")));
    }
    let mut floored = false;
    let mut layers = Vec::with_capacity(ranking.scores.len());
    for row in &ranking.scores {
        let (k, f) = keep_count(row.len(), keep_fraction);
        floored |= f;
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let mut keep = vec![false; row.len()];
        for &h in order.iter().take(k) {
            keep[h] = true;
        }
        layers.push(keep);
    }
    Ok((
        MaskPlan {
            method: ranking.method.to_string(),
            keep_fraction,
            layers,
        },
        floored,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feat(layer: usize, head: usize, regime: Regime, f: f64) -> HeadFeatures {
        HeadFeatures {
            layer,
            head,
            regime,
            small_n_fscore: f,
            entropy: head as f64,
            a0: 1.0 / (1.0 + head as f64),
            a_last: head as f64,
        }
    }

    fn grid(layers: usize, heads: usize) -> Vec<HeadFeatures> {
        (0..layers)
            .flat_map(|l| (0..heads).map(move |h| feat(l, h, Regime::ALL[h % 3], 0.1 * h as f64)))
            .collect()
    }

    const METHODS: [Method; 6] = [
        Method::TypeGuided,
        Method::Random { seed: 7 },
        Method::EntropyLow,
        Method::EntropyHigh,
        Method::SinkMass,
        Method::LastMass,
    ];

    #[test]
    fn full_fraction_keeps_everything() {
        let f = grid(3, 8);
        for m in METHODS {
            let r = rank_heads(3, 8, &f, m, &RankOptions::default()).unwrap();
            let (plan, _) = emit_mask(&r, 1.0).unwrap();
            assert!(plan.layers.iter().all(|row| row.iter().all(|&k| k)));
        }
    }

    #[test]
    fn type_guided_prefers_mixer() {
        let f = vec![feat(0, 0, Regime::Reset, 0.9), feat(0, 1, Regime::Mixer, 0.1)];
        let r = rank_heads(1, 2, &f, Method::TypeGuided, &RankOptions::default()).unwrap();
        assert_eq!(emit_mask(&r, 0.5).unwrap().0.layers, vec![vec![false, true]]);
    }

    #[test]
    fn type_guided_tie_break_by_fscore() {
        let f = vec![feat(0, 0, Regime::Mixer, 0.2), feat(0, 1, Regime::Mixer, 0.7)];
        let r = rank_heads(1, 2, &f, Method::TypeGuided, &RankOptions::default()).unwrap();
        assert_eq!(emit_mask(&r, 0.5).unwrap().0.layers, vec![vec![false, true]]);
    }

    #[test]
    fn priority_from_impacts() {
        let impacts = BTreeMap::from([(Regime::Reset, 3.0), (Regime::Mixer, 1.0), (Regime::Retriever, 2.0)]);
        let p = TypePriority::from_impacts(&impacts).unwrap();
        assert_eq!(p.0, [Regime::Reset, Regime::Retriever, Regime::Mixer]);
        assert!(TypePriority::from_impacts(&BTreeMap::new()).is_err());
    }

    #[test]
    fn keep_counts_and_floor() {
        let f = grid(2, 8);
        let r = rank_heads(2, 8, &f, Method::EntropyHigh, &RankOptions::default()).unwrap();
        let (plan, floored) = emit_mask(&r, 0.25).unwrap();
        assert!(!floored);
        assert!(plan.layers.iter().all(|row| row.iter().filter(|&&k| k).count() == 2));
        assert_eq!(plan.layers[0], vec![false, false, false, false, false, false, true, true]);
        let (plan, floored) = emit_mask(&r, 0.01).unwrap();
        assert!(floored);
        assert!(plan.layers.iter().all(|row| row.iter().filter(|&&k| k).count() == 1));
        assert_eq!(keep_count(8, 0.125), (1, false));
        assert_eq!(keep_count(8, 0.3), (3, false));
        let (plan, floored) = emit_mask(&r, 1e-12).unwrap();
        assert!(floored);
        assert!(plan.layers.iter().all(|row| row.iter().filter(|&&k| k).count() == 1));
        assert!(emit_mask(&r, 0.0).is_err());
        assert!(emit_mask(&r, 1.5).is_err());
    }

    #[test]
    fn random_is_deterministic_and_seed_dependent() {
        let f = grid(4, 8);
        let a = emit_mask(&rank_heads(4, 8, &f, Method::Random { seed: 7 }, &RankOptions::default()).unwrap(), 0.5).unwrap();
        let b = emit_mask(&rank_heads(4, 8, &f, Method::Random { seed: 7 }, &RankOptions::default()).unwrap(), 0.5).unwrap();
        let c = emit_mask(&rank_heads(4, 8, &f, Method::Random { seed: 8 }, &RankOptions::default()).unwrap(), 0.5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0.layers, c.0.layers);
    }

    #[test]
    fn weight_magnitude_needs_sidecar() {
        let f = grid(1, 4);
        assert!(matches!(
            rank_heads(1, 4, &f, Method::WeightMagnitude, &RankOptions::default()),
            Err(Error::Dependency(_))
        ));
        let opts = RankOptions {
            weights: Some(WeightSidecar { layers: vec![vec![0.1, 0.9, 0.5, 0.2]] }),
            ..Default::default()
        };
        let r = rank_heads(1, 4, &f, Method::WeightMagnitude, &opts).unwrap();
        assert_eq!(emit_mask(&r, 0.5).unwrap().0.layers, vec![vec![false, true, true, false]]);
        assert!(matches!(
            WeightSidecar::load(Path::new("/nonexistent/weights.json")),
            Err(Error::Dependency(_))
        ));
    }

    #[test]
    fn plan_json_round_trip() {
        let f = grid(3, 5);
        let r = rank_heads(3, 5, &f, Method::SinkMass, &RankOptions::default()).unwrap();
        let (plan, _) = emit_mask(&r, 0.4).unwrap();
        let text = plan.to_json();
        assert!(text.starts_with("{\"method\":\"sink-mass\",\"keep_fraction\":0.4,\"layers\":[["));
        assert_eq!(MaskPlan::from_json(&text).unwrap(), plan);
        assert!(MaskPlan::from_json("{\"method\":\"x\",\"keep_fraction\":1,\"layers\":[[true],[true,false]]}").is_err());
    }

    #[test]
    fn method_names_parse() {
        for (s, m) in [("type-guided", Method::TypeGuided), ("random", Method::Random { seed: 3 }), ("last-mass", Method::LastMass)] {
            assert_eq!(Method::parse(s, 3).unwrap(), m);
        }
        assert!(Method::parse("bogus", 0).is_err());
    }

    #[test]
    fn type_guided_features_ignore_value_scale() {
        use crate::taxonomy::{default_n_grid, profile_head, Thresholds};
        let (l, d) = (16, 6);
        let values: Vec<f32> = (0..(l + 1) * d).map(|k| ((k * 7919) % 23) as f32 / 23.0 - 0.4).collect();
        let mut attn: Vec<f32> = (0..=l).map(|i| 1.0 + ((i * 31) % 7) as f32).collect();
        let z: f32 = attn.iter().sum();
        attn.iter_mut().for_each(|a| *a /= z);
        let s = HeadSlice::new(0, 0, d, values, attn).unwrap();
        let mut t = s.clone();
        t.values.iter_mut().for_each(|v| *v *= 4.0);
        let ns = default_n_grid(l);
        let feat = |s: &HeadSlice| {
            let p = profile_head(s, &ns, &Thresholds::default()).unwrap();
            head_features(s, &p).unwrap()
        };
        let (a, b) = (feat(&s), feat(&t));
        assert_eq!(a.regime, b.regime);
        assert!((a.small_n_fscore - b.small_n_fscore).abs() < 1e-12);
    }

    #[test]
    fn entropy_of_uniform_row() {
        assert!((entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&[1.0, 0.0]), 0.0);
    }
}
