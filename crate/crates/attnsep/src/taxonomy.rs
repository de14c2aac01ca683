//! Retriever / Mixer / Reset classification from norm dominance and the
//! alignment of s(N) with the sink and last value states.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dump_io::HeadSlice;
use crate::error::{Error, Result};
use crate::geometry::head_descriptors;
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Regime {
    Retriever,
    Mixer,
    Reset,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Retriever, Regime::Mixer, Regime::Reset];
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Regime::Retriever => "Retriever",
            Regime::Mixer => "Mixer",
            Regime::Reset => "Reset",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    /// Minimum mean last-token alignment for a Retriever.
    pub tau_ret: f64,
    /// Last-token alignment below this counts as unaligned.
    pub tau_low: f64,
    /// Sink alignment at or above this counts as high.
    pub tau_sink_high: f64,
    /// Grid points with N > fraction * (L+1) count as close to L.
    pub near_last_fraction: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            tau_ret: 0.6,
            tau_low: 0.2,
            tau_sink_high: 0.6,
            near_last_fraction: 0.5,
        }
    }
}

/// {1, 2, 4, ..., 2^k <= L} plus L+1.
pub fn default_n_grid(l: usize) -> Vec<usize> {
    let mut g = vec![1];
    let mut n = 2;
    while n <= l {
        g.push(n);
        n *= 2;
    }
    g.push(l + 1);
    g.dedup();
    g
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadProfile {
    pub layer: usize,
    pub head: usize,
    pub seq_len: usize,
    pub m_sink: f64,
    pub m_last: f64,
    pub m_rest: f64,
    pub ns: Vec<usize>,
    pub align_sink: Vec<f64>,
    pub align_last: Vec<f64>,
    pub loo_sink: Vec<f64>,
    pub loo_last: Vec<f64>,
    pub norm_s: Vec<f64>,
    pub regime: Regime,
    pub ambiguous: bool,
}

pub fn profile_head(slice: &HeadSlice, ns: &[usize], thr: &Thresholds) -> Result<HeadProfile> {
    let d = head_descriptors(slice, ns)?;
    let mut p = HeadProfile {
        layer: slice.layer,
        head: slice.head,
        seq_len: slice.seq_len(),
        m_sink: d.m_sink,
        m_last: d.m_last,
        m_rest: d.m_rest,
        ns: ns.to_vec(),
        align_sink: d.rows.iter().map(|r| r.align_sink).collect(),
        align_last: d.rows.iter().map(|r| r.align_last).collect(),
        loo_sink: d.rows.iter().map(|r| r.norm_s_without_sink).collect(),
        loo_last: d.rows.iter().map(|r| r.norm_s_without_last).collect(),
        norm_s: d.rows.iter().map(|r| r.norm_s).collect(),
        regime: Regime::Mixer,
        ambiguous: false,
    };
    let (regime, ambiguous) = classify_head(&p, thr)?;
    p.regime = regime;
    p.ambiguous = ambiguous;
    Ok(p)
}

/// Returns the regime and whether it was assigned by default.
pub fn classify_head(p: &HeadProfile, thr: &Thresholds) -> Result<(Regime, bool)> {
    if p.ns.len() < 3 || p.align_sink.len() != p.ns.len() || p.align_last.len() != p.ns.len() {
        return Err(Error::Config(format!(
            "classification needs at least 3 grid points, got {}",
            p.ns.len()
        )));
    }
    let per_token_rest = if p.seq_len > 1 { p.m_rest / (p.seq_len - 1) as f64 } else { 0.0 };
    let last_dominates = p.m_last > p.m_sink && p.m_last > per_token_rest;
    if last_dominates && stats::mean(&p.align_last) >= thr.tau_ret {
        return Ok((Regime::Retriever, false));
    }
    if p.m_sink >= p.m_last.max(per_token_rest) {
        return Ok((Regime::Reset, false));
    }
    let cutoff = thr.near_last_fraction * (p.seq_len + 1) as f64;
    let sink_high = p.align_sink.iter().all(|&a| a >= thr.tau_sink_high);
    let last_low = p
        .ns
        .iter()
        .zip(&p.align_last)
        .filter(|(&n, _)| n as f64 <= cutoff)
        .all(|(_, &a)| a < thr.tau_low);
    if sink_high && last_low {
        return Ok((Regime::Reset, false));
    }
    let x: Vec<f64> = p.ns.iter().map(|&n| n as f64).collect();
    let sink_trend = stats::spearman(&x, &p.align_sink).unwrap_or(0.0);
    let last_trend = stats::spearman(&x, &p.align_last).unwrap_or(0.0);
    Ok((Regime::Mixer, !(sink_trend < 0.0 && last_trend > 0.0)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerCounts {
    pub layer: usize,
    pub retriever: usize,
    pub mixer: usize,
    pub reset: usize,
}

impl LayerCounts {
    pub fn dominant(&self) -> Regime {
        dominant(self.retriever, self.mixer, self.reset)
    }
}

fn dominant(retriever: usize, mixer: usize, reset: usize) -> Regime {
    let counts = [(Regime::Retriever, retriever), (Regime::Mixer, mixer), (Regime::Reset, reset)];
    counts.iter().max_by_key(|(_, c)| *c).unwrap().0
}

pub fn depth_distribution(profiles: &[HeadProfile]) -> Vec<LayerCounts> {
    let layers = profiles.iter().map(|p| p.layer + 1).max().unwrap_or(0);
    let mut rows: Vec<LayerCounts> = (0..layers)
        .map(|layer| LayerCounts { layer, retriever: 0, mixer: 0, reset: 0 })
        .collect();
    for p in profiles {
        let r = &mut rows[p.layer];
        match p.regime {
            Regime::Retriever => r.retriever += 1,
            Regime::Mixer => r.mixer += 1,
            Regime::Reset => r.reset += 1,
        }
    }
    rows
}

/// Dominant regime in the early, middle and late thirds of the stack.
pub fn depth_bands(rows: &[LayerCounts]) -> Vec<(&'static str, Regime)> {
    let n = rows.len();
    if n == 0 {
        return Vec::new();
    }
    let names = ["early", "middle", "late"];
    (0..3)
        .filter_map(|b| {
            let (lo, hi) = (b * n / 3, (b + 1) * n / 3);
            let band = &rows[lo..hi.max(lo)];
            if band.is_empty() {
                return None;
            }
            let sum = |f: fn(&LayerCounts) -> usize| band.iter().map(f).sum::<usize>();
            Some((names[b], dominant(sum(|r| r.retriever), sum(|r| r.mixer), sum(|r| r.reset))))
        })
        .collect()
}
