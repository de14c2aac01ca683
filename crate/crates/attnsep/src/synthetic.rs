//! Synthetic heads realising the norm, similarity and attention-profile
//! models, and the Monte Carlo harness comparing measured metrics with the
//! bound envelopes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assumptions::sink_similarity;
use crate::bounds::{self, BoundReport, KappaCalibration, ModelCosines, TailOptions};
use crate::dump_io::HeadSlice;
use crate::error::{Error, Result};
use crate::geometry::{curve_point, top_n_select, CurvePoint};
use crate::stats;

/// Four-phase attention template parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileParams {
    pub p_sink: f64,
    pub p_base: f64,
    pub eta: f64,
    pub omega: f64,
    pub t1: usize,
    pub t2: usize,
}

/// Unnormalised template over positions 0..=l.
pub fn template(l: usize, p: &ProfileParams) -> Vec<f64> {
    (0..=l)
        .map(|i| {
            if i == 0 {
                p.p_sink
            } else if i <= p.t1 {
                p.p_base
            } else if i <= p.t2 {
                p.p_base * (1.0 + p.eta * (p.omega * i as f64).cos())
            } else {
                p.p_base * (p.eta * (i - p.t2) as f64).exp()
            }
        })
        .collect()
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    /// L; the slice has L+1 positions.
    pub seq_len: usize,
    pub head_dim: usize,
    /// Non-sink value norm.
    pub c: f64,
    /// Sink norm as a multiple of `c`.
    pub lambda: f64,
    pub beta: f64,
    pub rho0: f64,
    pub profile: ProfileParams,
    pub seed: u64,
    #[serde(default)]
    pub noise: f64,
    #[serde(default = "default_true")]
    pub softmax_renormalize: bool,
    /// Orthonormal innovations: exact e^{-beta|i-j|} cosines, needs head_dim >= seq_len.
    #[serde(default)]
    pub exact_a2: bool,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let p = &self.profile;
        if self.seq_len < 1 || self.head_dim < 2 {
            return bad(format!("need seq_len >= 1 and head_dim >= 2, got {} and {}", self.seq_len, self.head_dim));
        }
        if !(self.c > 0.0) || !(self.lambda >= 0.0) || !(self.beta > 0.0) || !(self.noise >= 0.0) {
            return bad("need c > 0, lambda >= 0, beta > 0, noise >= 0".into());
        }
        if !(self.rho0.abs() <= 1.0) {
            return bad(format!("rho0 = {} outside [-1, 1]", self.rho0));
        }
        if !(p.p_sink > 0.0 && p.p_base > 0.0) || !p.eta.is_finite() || !p.omega.is_finite() {
            return bad("template needs p_sink, p_base > 0 and finite eta, omega".into());
        }
        if p.t1 > p.t2 || p.t2 > self.seq_len {
            return bad(format!("need t1 <= t2 <= seq_len, got {} {} {}", p.t1, p.t2, self.seq_len));
        }
        if self.exact_a2 && self.head_dim < self.seq_len {
            return bad("exact_a2 needs head_dim >= seq_len".into());
        }
        Ok(())
    }

    /// The attention row the generator emits.
    pub fn attn_row(&self) -> Result<Vec<f32>> {
        let mut t = template(self.seq_len, &self.profile);
        if t.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::Config("template produced negative or non-finite weights".into()));
        }
        if self.softmax_renormalize {
            let z: f64 = t.iter().sum();
            t.iter_mut().for_each(|x| *x /= z);
        }
        Ok(t.iter().map(|&x| x as f32).collect())
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = stats::norm(v);
    v.iter_mut().for_each(|x| *x /= n);
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    // Two passes keep the residual orthogonal to working precision.
    for _ in 0..2 {
        for b in basis {
            let c = stats::dot(v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
    }
}

/// Unit directions u_1..u_L.
fn chain(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let d = cfg.head_dim;
    let c = (-cfg.beta).exp();
    let s = (1.0 - c * c).sqrt();
    let mut u = Vec::with_capacity(cfg.seq_len);
    let mut first = gaussian(rng, d);
    normalize(&mut first);
    u.push(first);
    if cfg.exact_a2 {
        let mut basis = vec![u[0].clone()];
        for _ in 1..cfg.seq_len {
            let mut w = gaussian(rng, d);
            orthogonalize(&mut w, &basis);
            normalize(&mut w);
            let prev = u.last().unwrap();
            let next: Vec<f64> = prev.iter().zip(&w).map(|(p, q)| c * p + s * q).collect();
            basis.push(w);
            u.push(next);
        }
    } else {
        let scale = (d as f64).sqrt();
        for _ in 1..cfg.seq_len {
            let g = gaussian(rng, d);
            let prev = u.last().unwrap();
            let mut next: Vec<f64> = prev.iter().zip(&g).map(|(p, q)| c * p + s * q / scale).collect();
            normalize(&mut next);
            u.push(next);
        }
    }
    u
}

/// Generates one slice per requested rho0, sharing every random draw.
pub fn generate_paired(cfg: &SyntheticConfig, rho0s: &[f64], stream: u64) -> Result<Vec<HeadSlice>> {
    cfg.validate()?;
    let attn = cfg.attn_row()?;
    let d = cfg.head_dim;
    let mut rng = rng_for(cfg.seed, stream);
    let u = chain(cfg, &mut rng);
    let mut m = vec![0.0; d];
    for ui in &u {
        m.iter_mut().zip(ui).for_each(|(a, b)| *a += b);
    }
    m.iter_mut().for_each(|a| *a /= u.len() as f64);
    let m_norm = stats::norm(&m);
    let m_hat: Vec<f64> = if m_norm > 0.0 { m.iter().map(|x| x / m_norm).collect() } else { vec![0.0; d] };
    let mut g0 = gaussian(&mut rng, d);
    orthogonalize(&mut g0, std::slice::from_ref(&m_hat));
    normalize(&mut g0);
    let zeta: Vec<f64> = (0..cfg.seq_len).map(|_| StandardNormal.sample(&mut rng)).collect();

    let mut out = Vec::with_capacity(rho0s.len());
    for &rho0 in rho0s {
        let mix = if rho0 == 0.0 { 0.0 } else { rho0 / m_norm };
        if !(mix.abs() <= 1.0) {
            return Err(Error::Feasibility {
                requested: rho0,
                max_abs: m_norm,
            });
        }
        let ortho = (1.0 - mix * mix).sqrt();
        let mut values = Vec::with_capacity((cfg.seq_len + 1) * d);
        let sink_norm = cfg.lambda * cfg.c;
        values.extend((0..d).map(|k| ((mix * m_hat[k] + ortho * g0[k]) * sink_norm) as f32));
        for (ui, z) in u.iter().zip(&zeta) {
            let r = (cfg.c * (1.0 + cfg.noise * z)).max(0.0);
            values.extend(ui.iter().map(|x| (x * r) as f32));
        }
        out.push(HeadSlice::new(0, 0, d, values, attn.clone())?);
    }
    Ok(out)
}

pub fn generate_slice(cfg: &SyntheticConfig) -> Result<HeadSlice> {
    Ok(generate_paired(cfg, &[cfg.rho0], 0)?.remove(0))
}

/// Model-based envelope for the configuration at one N.
pub fn model_envelope(cfg: &SyntheticConfig, n: usize, kappa: f64, opts: TailOptions) -> Result<BoundReport> {
    let attn = cfg.attn_row()?;
    let alpha: Vec<f64> = attn.iter().map(|&x| x as f64).collect();
    let a = bounds::model_amplitudes(&alpha, cfg.c, cfg.lambda);
    let sel = top_n_select(&attn, n)?;
    let cos = ModelCosines {
        beta: cfg.beta,
        rho0: cfg.rho0,
    };
    bounds::bound_report(&a, &sel, &cos, kappa, cfg.head_dim, opts)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KappaChoice {
    Fixed(f64),
    /// Match the precision lower bound to the measured mean P(r_max, 2).
    CalibrateAtN2,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonteCarloResult {
    pub n: usize,
    pub mean_p_rmax: f64,
    pub mean_r_rmin: f64,
    pub mean_f_rmin: f64,
    pub mean_f_rmax: f64,
    /// 95% normal-approximation half widths.
    pub ci_p_rmax: f64,
    pub ci_r_rmin: f64,
    pub ci_f_rmin: f64,
    pub ci_f_rmax: f64,
    pub n_trials: usize,
    pub envelope: BoundReport,
}

impl MonteCarloResult {
    /// Whether both means lie in [lo - k ci, hi + k ci].
    pub fn contained(&self, k: f64) -> bool {
        let e = &self.envelope;
        self.mean_p_rmax >= e.precision_lo - k * self.ci_p_rmax
            && self.mean_p_rmax <= e.precision_hi + k * self.ci_p_rmax
            && self.mean_r_rmin >= e.recall_lo - k * self.ci_r_rmin
            && self.mean_r_rmin <= e.recall_hi + k * self.ci_r_rmin
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonteCarloRun {
    pub kappa: f64,
    pub calibration: Option<KappaCalibration>,
    pub results: Vec<MonteCarloResult>,
}

pub const MIN_TRIALS: usize = 100;
pub const DEFAULT_TRIALS: usize = 200;

struct Moments {
    mean: f64,
    ci: f64,
}

fn moments(xs: &[f64]) -> Moments {
    Moments {
        mean: stats::mean(xs),
        ci: 1.96 * stats::std_sample(xs) / (xs.len() as f64).sqrt(),
    }
}

/// Measured metric curves for `trials` fresh slices (trial t uses RNG stream t).
pub fn simulate_curves(cfg: &SyntheticConfig, ns: &[usize], trials: usize) -> Result<Vec<Vec<CurvePoint>>> {
    (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let s = generate_paired(cfg, &[cfg.rho0], t)?.remove(0);
            ns.iter().map(|&n| curve_point(&s, n)).collect()
        })
        .collect()
}

pub fn monte_carlo_envelope(
    cfg: &SyntheticConfig,
    ns: &[usize],
    trials: usize,
    kappa: KappaChoice,
    opts: TailOptions,
) -> Result<MonteCarloRun> {
    if trials < MIN_TRIALS {
        return Err(Error::Range(format!("need at least {MIN_TRIALS} trials, got {trials}")));
    }
    if ns.is_empty() {
        return Err(Error::Range("empty N grid".into()));
    }
    let mut grid = ns.to_vec();
    if !grid.contains(&2) {
        grid.push(2);
    }
    let curves = simulate_curves(cfg, &grid, trials)?;
    let column = |k: usize, f: fn(&CurvePoint) -> f64| -> Vec<f64> { curves.iter().map(|c| f(&c[k])).collect() };

    let (kappa, calibration) = match kappa {
        KappaChoice::Fixed(k) => (k, None),
        KappaChoice::CalibrateAtN2 => {
            let k2 = grid.iter().position(|&n| n == 2).unwrap();
            let target = stats::mean(&column(k2, |c| c.precision_rmax));
            let attn = cfg.attn_row()?;
            let alpha: Vec<f64> = attn.iter().map(|&x| x as f64).collect();
            let a = bounds::model_amplitudes(&alpha, cfg.c, cfg.lambda);
            let sel = top_n_select(&attn, 2)?;
            let cos = ModelCosines {
                beta: cfg.beta,
                rho0: cfg.rho0,
            };
            let mq = bounds::margins(&a, &sel, &cos, None)?;
            let cal = bounds::calibrate_kappa(&mq, cfg.seq_len, 2, cfg.head_dim, target)?;
            (cal.kappa, Some(cal))
        }
    };

    let mut results = Vec::with_capacity(ns.len());
    for (k, &n) in grid.iter().enumerate().take(ns.len()) {
        let p = moments(&column(k, |c| c.precision_rmax));
        let r = moments(&column(k, |c| c.recall_rmin));
        let fmin = moments(&column(k, |c| c.fscore_rmin));
        let fmax = moments(&column(k, |c| c.fscore_rmax));
        results.push(MonteCarloResult {
            n,
            mean_p_rmax: p.mean,
            mean_r_rmin: r.mean,
            mean_f_rmin: fmin.mean,
            mean_f_rmax: fmax.mean,
            ci_p_rmax: p.ci,
            ci_r_rmin: r.ci,
            ci_f_rmin: fmin.ci,
            ci_f_rmax: fmax.ci,
            n_trials: trials,
            envelope: model_envelope(cfg, n, kappa, opts)?,
        });
    }
    Ok(MonteCarloRun {
        kappa,
        calibration,
        results,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationRow {
    pub n: usize,
    /// Pearson correlation of measured rho0 with R(r_min, N); 0 when Recall is constant.
    pub correlation: f64,
    /// Recall had zero variance (for example pinned at 1).
    pub recall_constant: bool,
    pub samples: usize,
}

/// Correlation between measured sink similarity and Recall across generated heads.
pub fn sweep_rho0_recall_correlation(
    cfg: &SyntheticConfig,
    rho0_grid: &[f64],
    ns: &[usize],
    trials: usize,
) -> Result<Vec<CorrelationRow>> {
    if rho0_grid.len() < 5 {
        return Err(Error::Config(format!("need at least 5 rho0 values, got {}", rho0_grid.len())));
    }
    if stats::std_pop(rho0_grid) == 0.0 {
        return Err(Error::Degenerate("rho0 grid has zero variance".into()));
    }
    let per_trial: Vec<Vec<(f64, Vec<f64>)>> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            generate_paired(cfg, rho0_grid, t)?
                .iter()
                .map(|s| {
                    let recall = ns
                        .iter()
                        .map(|&n| curve_point(s, n).map(|c| c.recall_rmin))
                        .collect::<Result<Vec<_>>>()?;
                    Ok((sink_similarity(s), recall))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let flat: Vec<&(f64, Vec<f64>)> = per_trial.iter().flatten().collect();
    let rho: Vec<f64> = flat.iter().map(|x| x.0).collect();
    ns.iter()
        .enumerate()
        .map(|(k, &n)| {
            let rec: Vec<f64> = flat.iter().map(|x| x.1[k]).collect();
            let constant = rec.iter().all(|&r| r == rec[0]);
            let correlation = if constant {
                0.0
            } else {
                stats::pearson(&rho, &rec)
                    .ok_or_else(|| Error::Degenerate("measured rho0 has zero variance".into()))?
            };
            Ok(CorrelationRow {
                n,
                correlation,
                recall_constant: constant,
                samples: rec.len(),
            })
        })
        .collect()
}
