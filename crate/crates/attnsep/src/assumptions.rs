//! Fits of the three per-head models: value-norm stability, exponential
//! cross-token similarity with a sink term, and the four-phase attention
//! profile (sink, plateau, oscillation, exponential recency).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dump_io::{Dump, HeadSlice};
use crate::error::{Error, Result};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormStats {
    /// Median non-sink norm.
    pub c: f64,
    /// |v_0| / C.
    pub lambda: f64,
    /// Coefficient of variation of non-sink norms.
    pub cv: f64,
}

pub fn fit_norms(slice: &HeadSlice) -> Result<NormStats> {
    let l = slice.seq_len();
    if l < 2 {
        return Err(Error::Range(format!("fit_norms needs L >= 2, got {l}")));
    }
    let norms = slice.value_norms();
    let rest = &norms[1..];
    let c = stats::median(rest);
    if c <= 0.0 {
        return Err(Error::Degenerate(format!(
            "layer {} head {}: median non-sink value norm is zero",
            slice.layer, slice.head
        )));
    }
    let mean = stats::mean(rest);
    Ok(NormStats {
        c,
        lambda: norms[0] / c,
        cv: stats::std_pop(rest) / mean,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LagCosine {
    /// Entry t-1 is the mean cosine at lag t.
    pub mean: Vec<f64>,
    /// Entry t-1 is the fraction of negative cosines at lag t.
    pub neg_frac: Vec<f64>,
    /// Positions i > 0 with a zero value state, excluded from every mean.
    pub excluded_rows: usize,
}

/// Mean cos(v_i, v_{i+t}) over i > 0 for t = 1..=max_lag.
pub fn mean_lag_cosine(slice: &HeadSlice, max_lag: usize) -> Result<LagCosine> {
    let l = slice.seq_len();
    if max_lag == 0 || max_lag >= l {
        return Err(Error::Range(format!("max_lag = {max_lag} must be in [1, {})", l)));
    }
    let units: Vec<Option<Vec<f64>>> = (0..=l)
        .map(|i| {
            let v = slice.value_f64(i);
            let n = stats::norm(&v);
            (n > 0.0).then(|| v.iter().map(|x| x / n).collect())
        })
        .collect();
    let excluded_rows = units[1..].iter().filter(|u| u.is_none()).count();
    let mut mean = Vec::with_capacity(max_lag);
    let mut neg_frac = Vec::with_capacity(max_lag);
    for t in 1..=max_lag {
        let mut sum = 0.0;
        let mut neg = 0usize;
        let mut count = 0usize;
        for i in 1..=l - t {
            if let (Some(a), Some(b)) = (&units[i], &units[i + t]) {
                let c = stats::dot(a, b);
                sum += c;
                neg += (c < 0.0) as usize;
                count += 1;
            }
        }
        if count == 0 {
            mean.push(f64::NAN);
            neg_frac.push(f64::NAN);
        } else {
            mean.push(sum / count as f64);
            neg_frac.push(neg as f64 / count as f64);
        }
    }
    Ok(LagCosine {
        mean,
        neg_frac,
        excluded_rows,
    })
}

/// Mean cos(v_0, v_j) over j = 1..=L, the rho0 estimate. Zero rows are skipped.
pub fn sink_similarity(slice: &HeadSlice) -> f64 {
    let v0 = slice.value_f64(0);
    let cos: Vec<f64> = (1..slice.positions())
        .filter_map(|j| stats::cosine(&v0, &slice.value_f64(j)))
        .collect();
    if cos.is_empty() {
        0.0
    } else {
        stats::mean(&cos)
    }
}

pub const BETA_RANGE: (f64, f64) = (1e-6, 700.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExponentialFit {
    pub beta: f64,
    pub mae: f64,
    /// The optimum sits on an end of the search range: a poor fit.
    pub at_bound: bool,
}

fn exp_mae(curve: &[f64], beta: f64) -> f64 {
    curve
        .iter()
        .enumerate()
        .map(|(k, c)| (c - (-beta * (k + 1) as f64).exp()).abs())
        .sum::<f64>()
        / curve.len() as f64
}

/// Minimises the mean absolute error of e^{-beta t} against `curve[t-1]`.
pub fn fit_exponential(curve: &[f64]) -> Result<ExponentialFit> {
    if curve.len() < 3 {
        return Err(Error::Validation(format!(
            "exponential fit needs at least 3 lags, got {}",
            curve.len()
        )));
    }
    if curve.iter().any(|x| !x.is_finite()) {
        return Err(Error::Validation("lag curve has non-finite entries".into()));
    }
    const GRID: usize = 400;
    let (lo, hi) = (BETA_RANGE.0.ln(), BETA_RANGE.1.ln());
    let grid: Vec<f64> = (0..GRID)
        .map(|k| (lo + (hi - lo) * k as f64 / (GRID - 1) as f64).exp())
        .collect();
    let errs: Vec<f64> = grid.iter().map(|&b| exp_mae(curve, b)).collect();
    let best = (0..GRID).min_by(|&a, &b| errs[a].total_cmp(&errs[b])).unwrap();
    let a = grid[best.saturating_sub(1)];
    let b = grid[(best + 1).min(GRID - 1)];
    let (beta, mae) = golden_section(|x| exp_mae(curve, x), a, b, 200);
    let (beta, mae) = if mae <= errs[best] { (beta, mae) } else { (grid[best], errs[best]) };
    Ok(ExponentialFit {
        beta,
        mae,
        at_bound: best == 0 || best == GRID - 1,
    })
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, iters: usize) -> (f64, f64) {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..iters {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
        if (b - a).abs() <= 1e-15 * (a.abs() + b.abs()) {
            break;
        }
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimilarityFit {
    pub beta: f64,
    pub rho0: f64,
    pub mae: f64,
    pub poor_fit: bool,
}

pub fn fit_similarity(slice: &HeadSlice, max_lag: usize) -> Result<(SimilarityFit, LagCosine)> {
    let lc = mean_lag_cosine(slice, max_lag)?;
    let e = fit_exponential(&lc.mean)?;
    Ok((
        SimilarityFit {
            beta: e.beta,
            rho0: sink_similarity(slice),
            mae: e.mae,
            poor_fit: e.at_bound,
        },
        lc,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileFit {
    pub p_sink: f64,
    pub p_base: f64,
    pub eta: f64,
    /// 0 when the oscillatory phase is empty (t1 == t2).
    pub omega: f64,
    pub t1: usize,
    pub t2: usize,
    /// Mean absolute log residual over positions 1..=L.
    pub mae: f64,
    /// p_sink >= 10 p_base.
    pub sink: bool,
}

/// Prefix sums over positions 1..=L; entry k covers positions 1..=k.
struct Prefix {
    y: Vec<f64>,
    yy: Vec<f64>,
    i: Vec<f64>,
    ii: Vec<f64>,
    iy: Vec<f64>,
}

struct CosPrefix {
    c: Vec<f64>,
    cc: Vec<f64>,
    yc: Vec<f64>,
}

fn prefix(ys: &[f64]) -> Prefix {
    let l = ys.len() - 1;
    let mut p = Prefix {
        y: vec![0.0; l + 1],
        yy: vec![0.0; l + 1],
        i: vec![0.0; l + 1],
        ii: vec![0.0; l + 1],
        iy: vec![0.0; l + 1],
    };
    for k in 1..=l {
        let (x, y) = (k as f64, ys[k]);
        p.y[k] = p.y[k - 1] + y;
        p.yy[k] = p.yy[k - 1] + y * y;
        p.i[k] = p.i[k - 1] + x;
        p.ii[k] = p.ii[k - 1] + x * x;
        p.iy[k] = p.iy[k - 1] + x * y;
    }
    p
}

fn cos_prefix(ys: &[f64], omega: f64) -> CosPrefix {
    let l = ys.len() - 1;
    let mut p = CosPrefix {
        c: vec![0.0; l + 1],
        cc: vec![0.0; l + 1],
        yc: vec![0.0; l + 1],
    };
    for k in 1..=l {
        let c = (omega * k as f64).cos();
        p.c[k] = p.c[k - 1] + c;
        p.cc[k] = p.cc[k - 1] + c * c;
        p.yc[k] = p.yc[k - 1] + ys[k] * c;
    }
    p
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    sse: f64,
    c: f64,
    eta: f64,
    omega: f64,
    t1: usize,
    t2: usize,
}

/// Linearised log-model least squares: y = c + eta x with x = 0 on the
/// plateau, cos(omega i) on the oscillation and (i - t2) on the tail.
fn solve(p: &Prefix, cp: Option<&CosPrefix>, l: usize, t1: usize, t2: usize, omega: f64) -> Candidate {
    let n = l as f64;
    let (mut sx, mut sxx, mut sxy) = (0.0, 0.0, 0.0);
    if t2 > t1 {
        let cp = cp.expect("oscillation needs cosine sums");
        sx += cp.c[t2] - cp.c[t1];
        sxx += cp.cc[t2] - cp.cc[t1];
        sxy += cp.yc[t2] - cp.yc[t1];
    }
    let nt = (l - t2) as f64;
    let t = t2 as f64;
    let si = p.i[l] - p.i[t2];
    let sii = p.ii[l] - p.ii[t2];
    let siy = p.iy[l] - p.iy[t2];
    let syt = p.y[l] - p.y[t2];
    sx += si - t * nt;
    sxx += sii - 2.0 * t * si + t * t * nt;
    sxy += siy - t * syt;
    let sy = p.y[l];
    let var_y = p.yy[l] - sy * sy / n;
    let var_x = sxx - sx * sx / n;
    let cov = sxy - sx * sy / n;
    let (eta, sse) = if var_x > 1e-12 * n {
        (cov / var_x, (var_y - cov * cov / var_x).max(0.0))
    } else {
        (0.0, var_y.max(0.0))
    };
    Candidate {
        sse,
        c: (sy - eta * sx) / n,
        eta,
        omega: if t2 > t1 { omega } else { 0.0 },
        t1,
        t2,
    }
}

/// Ordering with the tie rule: lower SSE, then shorter oscillation, then larger t1.
fn better(a: &Candidate, b: &Candidate, tol: f64) -> bool {
    if a.sse < b.sse - tol {
        return true;
    }
    if a.sse > b.sse + tol {
        return false;
    }
    let (la, lb) = (a.t2 - a.t1, b.t2 - b.t1);
    la < lb || (la == lb && a.t1 > b.t1)
}

fn log_model(i: usize, c: f64, eta: f64, omega: f64, t1: usize, t2: usize) -> f64 {
    if i <= t1 {
        c
    } else if i <= t2 {
        let m = 1.0 + eta * (omega * i as f64).cos();
        if m > 0.0 {
            c + m.ln()
        } else {
            f64::NEG_INFINITY
        }
    } else {
        c + eta * (i - t2) as f64
    }
}

fn exact_sse(ys: &[f64], c: f64, eta: f64, omega: f64, t1: usize, t2: usize) -> f64 {
    (1..ys.len())
        .map(|i| {
            let r = ys[i] - log_model(i, c, eta, omega, t1, t2);
            r * r
        })
        .sum()
}

fn nelder_mead(f: impl Fn(&[f64]) -> f64, x0: &[f64], step: &[f64], iters: usize) -> (Vec<f64>, f64) {
    let n = x0.len();
    let mut pts: Vec<Vec<f64>> = vec![x0.to_vec()];
    for k in 0..n {
        let mut p = x0.to_vec();
        p[k] += step[k];
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(|p| f(p)).collect();
    for _ in 0..iters {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        pts = order.iter().map(|&k| pts[k].clone()).collect();
        vals = order.iter().map(|&k| vals[k]).collect();
        if (vals[n] - vals[0]).abs() <= 1e-16 * (1.0 + vals[0].abs()) {
            break;
        }
        let centroid: Vec<f64> = (0..n).map(|k| pts[..n].iter().map(|p| p[k]).sum::<f64>() / n as f64).collect();
        let along = |t: f64| -> Vec<f64> { (0..n).map(|k| centroid[k] + t * (pts[n][k] - centroid[k])).collect() };
        let xr = along(-1.0);
        let fr = f(&xr);
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = f(&xe);
            if fe < fr {
                pts[n] = xe;
                vals[n] = fe;
            } else {
                pts[n] = xr;
                vals[n] = fr;
            }
        } else if fr < vals[n - 1] {
            pts[n] = xr;
            vals[n] = fr;
        } else {
            let xc = if fr < vals[n] { along(-0.5) } else { along(0.5) };
            let fc = f(&xc);
            if fc < vals[n].min(fr) {
                pts[n] = xc;
                vals[n] = fc;
            } else {
                for k in 1..=n {
                    pts[k] = (0..n).map(|j| pts[0][j] + 0.5 * (pts[k][j] - pts[0][j])).collect();
                    vals[k] = f(&pts[k]);
                }
            }
        }
    }
    let best = (0..=n).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
    (pts[best].clone(), vals[best])
}

/// Fits sink, plateau on [1, t1], p_base(1 + eta cos(omega i)) on (t1, t2]
/// and p_base e^{eta (i - t2)} beyond t2, in log space.
pub fn fit_profile(attn: &[f64]) -> Result<ProfileFit> {
    let l = attn.len().saturating_sub(1);
    if l < 8 {
        return Err(Error::Range(format!("profile fit needs L >= 8, got {l}")));
    }
    if attn.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::Validation("attention weights must be finite and non-negative".into()));
    }
    let floor = attn[1..].iter().copied().filter(|&x| x > 0.0).fold(f64::INFINITY, f64::min);
    if !floor.is_finite() {
        return Err(Error::Degenerate("attention is zero at every position after the sink".into()));
    }
    let raw: Vec<f64> = attn.iter().map(|&x| x.max(floor).ln()).collect();
    let shift = stats::mean(&raw[1..]);
    let mut ys: Vec<f64> = raw.iter().map(|y| y - shift).collect();
    ys[0] = 0.0;
    let p = prefix(&ys);
    let var_y = p.yy[l] - p.y[l] * p.y[l] / l as f64;
    let tol = 1e-10 * var_y.max(0.0) + 1e-20;

    let stride = (l / 128).max(1);
    let t1_grid: Vec<usize> = (4..=l / 2).step_by(stride).collect();
    let t2_max = l - 4;
    let n_omega = 2 * l;
    let (w_lo, w_hi) = (2.0 * std::f64::consts::PI / l as f64, std::f64::consts::PI);
    let omega_at = |k: usize| w_lo + (w_hi - w_lo) * k as f64 / (n_omega - 1) as f64;

    // Coarse pass: every omega on the grid, strided (t1, t2).
    let mut best = t1_grid
        .iter()
        .map(|&t| solve(&p, None, l, t, t, 0.0))
        .reduce(|a, b| if better(&b, &a, tol) { b } else { a })
        .unwrap();
    let coarse: Vec<Candidate> = (0..n_omega)
        .into_par_iter()
        .filter_map(|k| {
            let w = omega_at(k);
            let cp = cos_prefix(&ys, w);
            let mut local: Option<Candidate> = None;
            for &t1 in &t1_grid {
                let mut t2 = t1 + stride;
                while t2 <= t2_max {
                    let cand = solve(&p, Some(&cp), l, t1, t2, w);
                    if local.as_ref().is_none_or(|b| better(&cand, b, tol)) {
                        local = Some(cand);
                    }
                    t2 += stride;
                }
            }
            local
        })
        .collect();
    for c in &coarse {
        if better(c, &best, tol) {
            best = *c;
        }
    }

    // Local pass: refine omega, then (t1, t2) at stride 1, then omega again.
    let refine_omega = |cand: Candidate| -> Candidate {
        if cand.t2 == cand.t1 {
            return cand;
        }
        let h = (w_hi - w_lo) / (n_omega - 1) as f64;
        let (a, b) = ((cand.omega - h).max(w_lo), (cand.omega + h).min(w_hi));
        let (w, _) = golden_section(
            |w| solve(&p, Some(&cos_prefix(&ys, w)), l, cand.t1, cand.t2, w).sse,
            a,
            b,
            100,
        );
        let r = solve(&p, Some(&cos_prefix(&ys, w)), l, cand.t1, cand.t2, w);
        if r.sse <= cand.sse {
            r
        } else {
            cand
        }
    };
    best = refine_omega(best);
    for _ in 0..3 {
        let cp = cos_prefix(&ys, best.omega);
        let mut next = best;
        let lo1 = best.t1.saturating_sub(stride).max(4);
        let hi1 = (best.t1 + stride).min(l / 2);
        for t1 in lo1..=hi1 {
            let lo2 = best.t2.saturating_sub(stride).max(t1);
            let hi2 = (best.t2 + stride).min(t2_max);
            for t2 in lo2..=hi2 {
                let cand = if t2 > t1 && best.omega > 0.0 {
                    solve(&p, Some(&cp), l, t1, t2, best.omega)
                } else if t2 == t1 {
                    solve(&p, None, l, t1, t1, 0.0)
                } else {
                    continue;
                };
                if better(&cand, &next, tol) {
                    next = cand;
                }
            }
        }
        let next = refine_omega(next);
        let moved = (next.t1, next.t2) != (best.t1, best.t2);
        best = next;
        if !moved {
            break;
        }
    }

    // Exact polish of the continuous parameters on the log residual.
    let (t1, t2) = (best.t1, best.t2);
    let (c, eta, omega) = if t2 > t1 {
        let f = |x: &[f64]| exact_sse(&ys, x[0], x[1], x[2], t1, t2);
        let x0 = [best.c, best.eta, best.omega];
        let (x, fx) = nelder_mead(f, &x0, &[1e-3, 1e-3 + 0.1 * best.eta.abs(), 1e-4], 2000);
        if fx <= f(&x0) {
            (x[0], x[1], x[2])
        } else {
            (best.c, best.eta, best.omega)
        }
    } else {
        let f = |x: &[f64]| exact_sse(&ys, x[0], x[1], 0.0, t1, t2);
        let x0 = [best.c, best.eta];
        let (x, fx) = nelder_mead(f, &x0, &[1e-3, 1e-3 + 0.1 * best.eta.abs()], 2000);
        if fx <= f(&x0) {
            (x[0], x[1], 0.0)
        } else {
            (best.c, best.eta, 0.0)
        }
    };
    let mae = (1..=l)
        .map(|i| (ys[i] - log_model(i, c, eta, omega, t1, t2)).abs())
        .sum::<f64>()
        / l as f64;
    let p_base = (c + shift).exp();
    Ok(ProfileFit {
        p_sink: attn[0],
        p_base,
        eta,
        omega,
        t1,
        t2,
        mae,
        sink: attn[0] >= 10.0 * p_base,
    })
}

/// All three fits for one head.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionFits {
    pub layer: usize,
    pub head: usize,
    pub norms: NormStats,
    pub similarity: SimilarityFit,
    pub profile: ProfileFit,
}

/// Default lag window for similarity fits.
pub fn default_max_lag(l: usize) -> usize {
    (l - 1).min(64)
}

pub fn fit_head(slice: &HeadSlice, max_lag: usize) -> Result<AssumptionFits> {
    Ok(AssumptionFits {
        layer: slice.layer,
        head: slice.head,
        norms: fit_norms(slice)?,
        similarity: fit_similarity(slice, max_lag)?.0,
        profile: fit_profile(&slice.alpha())?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrevalenceThresholds {
    /// Profile log-MAE below which a head counts as following the template.
    pub profile_mae: f64,
}

impl Default for PrevalenceThresholds {
    fn default() -> Self {
        PrevalenceThresholds { profile_mae: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerPrevalence {
    pub layer: usize,
    pub heads: usize,
    /// Fraction of heads with a sink and profile MAE below the threshold.
    pub prevalence: f64,
    pub cv: Vec<f64>,
    pub lambda: Vec<f64>,
}

pub fn prevalence_from_fits(fits: &[AssumptionFits], num_layers: usize, thr: PrevalenceThresholds) -> Vec<LayerPrevalence> {
    (0..num_layers)
        .map(|layer| {
            let rows: Vec<&AssumptionFits> = fits.iter().filter(|f| f.layer == layer).collect();
            let ok = rows
                .iter()
                .filter(|f| f.profile.sink && f.profile.mae < thr.profile_mae)
                .count();
            LayerPrevalence {
                layer,
                heads: rows.len(),
                prevalence: if rows.is_empty() { 0.0 } else { ok as f64 / rows.len() as f64 },
                cv: rows.iter().map(|f| f.norms.cv).collect(),
                lambda: rows.iter().map(|f| f.norms.lambda).collect(),
            }
        })
        .collect()
}

pub fn assumption_prevalence(dump: &Dump, thr: PrevalenceThresholds) -> Result<(Vec<AssumptionFits>, Vec<LayerPrevalence>)> {
    let max_lag = default_max_lag(dump.manifest.seq_len);
    let fits: Vec<AssumptionFits> = dump
        .head_ids()
        .into_par_iter()
        .map(|(l, h)| fit_head(&dump.slice(l, h)?, max_lag))
        .collect::<Result<_>>()?;
    let prev = prevalence_from_fits(&fits, dump.manifest.num_layers, thr);
    Ok((fits, prev))
}

/// Sorted (value, F(value)) pairs of the empirical CDF.
pub fn ecdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter().enumerate().map(|(k, &x)| (x, (k + 1) as f64 / n)).collect()
}
