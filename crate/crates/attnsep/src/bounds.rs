//! Margins, Gaussian tail terms and the Precision / Recall / F-score
//! envelopes, plus the deterministic reductions and the sink-shift estimate.

use serde::Serialize;

use crate::dump_io::HeadSlice;
use crate::error::{Error, Result};
use crate::geometry::{Selection, SelectionGeometry};
use crate::stats;

/// Pairwise cosine source between positions.
pub trait Cosines: Sync {
    fn cos(&self, i: usize, j: usize) -> f64;
}

/// Cosines measured on a slice's value states. Zero rows have cosine 0.
pub struct MeasuredCosines {
    units: Vec<Option<Vec<f64>>>,
}

impl MeasuredCosines {
    pub fn from_slice(slice: &HeadSlice) -> Self {
        let units = (0..slice.positions())
            .map(|i| {
                let v = slice.value_f64(i);
                let n = stats::norm(&v);
                (n > 0.0).then(|| v.iter().map(|x| x / n).collect())
            })
            .collect();
        MeasuredCosines { units }
    }
}

impl Cosines for MeasuredCosines {
    fn cos(&self, i: usize, j: usize) -> f64 {
        match (&self.units[i], &self.units[j]) {
            (Some(a), Some(b)) => stats::dot(a, b).clamp(-1.0, 1.0),
            _ => 0.0,
        }
    }
}

/// Model cosines: e^{-beta |i-j|} between non-sink tokens, rho0 against the sink.
#[derive(Debug, Clone, Copy)]
pub struct ModelCosines {
    pub beta: f64,
    pub rho0: f64,
}

impl Cosines for ModelCosines {
    fn cos(&self, i: usize, j: usize) -> f64 {
        if i == j {
            1.0
        } else if i == 0 || j == 0 {
            self.rho0
        } else {
            (-self.beta * i.abs_diff(j) as f64).exp()
        }
    }
}

/// a_i = alpha_i * |v_i| for the model norms (|v_0| = lambda C, else C).
pub fn model_amplitudes(alpha: &[f64], c: f64, lambda: f64) -> Vec<f64> {
    alpha
        .iter()
        .enumerate()
        .map(|(i, a)| a * if i == 0 { lambda * c } else { c })
        .collect()
}

pub fn slice_amplitudes(slice: &HeadSlice) -> Vec<f64> {
    slice
        .alpha()
        .iter()
        .zip(slice.value_norms())
        .map(|(a, n)| a * n)
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct MarginQuantities {
    pub a: Vec<f64>,
    pub s_in: f64,
    pub a_min_in: f64,
    pub a_max_in: f64,
    pub a_max_out: f64,
    pub rho_out: f64,
    /// rho_out exceeded e^{-beta} when a beta was supplied.
    pub rho_out_above_cap: bool,
    pub delta: f64,
    pub delta0: f64,
    pub b: f64,
}

/// Margins from amplitudes and a cosine source. `beta` only feeds the cap check.
pub fn margins(
    a: &[f64],
    sel: &Selection,
    cos: &dyn Cosines,
    beta: Option<f64>,
) -> Result<MarginQuantities> {
    if sel.is_full() {
        return Err(Error::NoOutsideTokens);
    }
    let inner: Vec<usize> = sel.indices.iter().copied().filter(|&k| k != 0).collect();
    let outer = sel.outside();
    let s_in: f64 = inner.iter().map(|&k| a[k]).sum();
    let a_min_in = inner.iter().map(|&k| a[k]).fold(f64::INFINITY, f64::min);
    let a_min_in = if inner.is_empty() { 0.0 } else { a_min_in };
    let a_max_in = inner.iter().map(|&k| a[k]).fold(0.0, f64::max);
    let a_max_out = outer.iter().map(|&j| a[j]).fold(0.0, f64::max);
    let mut rho_out = f64::NEG_INFINITY;
    for &j in outer.iter().filter(|&&j| j != 0) {
        for &k in &inner {
            rho_out = rho_out.max(cos.cos(j, k));
        }
    }
    if rho_out == f64::NEG_INFINITY {
        rho_out = 0.0;
    }
    let rho_out_above_cap = beta.is_some_and(|b| rho_out > (-b).exp() + 1e-12);
    Ok(MarginQuantities {
        delta: a_min_in * a_min_in - 2.0 * a_max_out * s_in * rho_out,
        delta0: a[0] * a[0] - (s_in * rho_out).powi(2),
        b: a_max_in + a_max_out + s_in,
        a: a.to_vec(),
        s_in,
        a_min_in,
        a_max_in,
        a_max_out,
        rho_out,
        rho_out_above_cap,
    })
}

/// Margins of a real slice with measured cosines.
pub fn margin_quantities(slice: &HeadSlice, sel: &Selection, beta: Option<f64>) -> Result<MarginQuantities> {
    margins(&slice_amplitudes(slice), sel, &MeasuredCosines::from_slice(slice), beta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TailOptions {
    /// Include the sink in the sum defining M_j. With it, mu_ij is the exact
    /// mean of D_j - D_i; without it, the sum runs over I_N minus the sink.
    pub sink_in_mean: bool,
}

impl Default for TailOptions {
    fn default() -> Self {
        TailOptions { sink_in_mean: true }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PairwiseTail {
    pub inside: Vec<usize>,
    pub outside: Vec<usize>,
    /// Row-major |inside| x |outside|.
    pub mu: Vec<f64>,
    pub xi: Vec<f64>,
    pub p_minus: Vec<f64>,
    pub sigma: f64,
    /// M_j for every position.
    pub m: Vec<f64>,
}

impl PairwiseTail {
    pub fn max_p_minus(&self) -> f64 {
        self.p_minus.iter().copied().fold(0.0, f64::max)
    }

    /// max over outside j of p-_{ij}, per inside row.
    pub fn row_max(&self) -> Vec<f64> {
        let k = self.outside.len();
        (0..self.inside.len())
            .map(|r| self.p_minus[r * k..(r + 1) * k].iter().copied().fold(0.0, f64::max))
            .collect()
    }
}

/// Gaussian lower-tail term phi(xi)/(xi + 1/xi); 1/2 for xi < 0 and 0 at xi = 0.
pub fn p_minus(xi: f64) -> f64 {
    if xi < 0.0 {
        0.5
    } else if xi == 0.0 || xi.is_infinite() {
        0.0
    } else {
        stats::normal_pdf(xi) / (xi + 1.0 / xi)
    }
}

pub fn pairwise_tails(
    mq: &MarginQuantities,
    cos: &dyn Cosines,
    sel: &Selection,
    kappa: f64,
    d: usize,
    opts: TailOptions,
) -> Result<PairwiseTail> {
    if !(kappa > 0.0) || d == 0 {
        return Err(Error::Range(format!("kappa = {kappa}, d = {d}; need kappa > 0, d >= 1")));
    }
    let a = &mq.a;
    let inside = sel.indices.clone();
    let outside = sel.outside();
    let members: Vec<usize> = inside
        .iter()
        .copied()
        .filter(|&l| opts.sink_in_mean || l != 0)
        .collect();
    let m: Vec<f64> = (0..a.len())
        .map(|j| members.iter().map(|&l| a[l] * cos.cos(l, j)).sum())
        .collect();
    let sigma = mq.b / (2.0 * kappa * d as f64).sqrt();
    let mut mu = Vec::with_capacity(inside.len() * outside.len());
    let mut xi = Vec::with_capacity(mu.capacity());
    let mut pm = Vec::with_capacity(mu.capacity());
    for &i in &inside {
        for &j in &outside {
            let u = (a[j] * a[j] - a[i] * a[i]) - 2.0 * a[j] * m[j] + 2.0 * a[i] * m[i];
            let x = if sigma > 0.0 {
                u / sigma
            } else if u == 0.0 {
                0.0
            } else {
                u.signum() * f64::INFINITY
            };
            mu.push(u);
            xi.push(x);
            pm.push(p_minus(x));
        }
    }
    Ok(PairwiseTail {
        inside,
        outside,
        mu,
        xi,
        p_minus: pm,
        sigma,
        m,
    })
}

/// The two exponential terms shared by both theorems.
fn tail_terms(l: usize, n: usize, kappa: f64, d: usize, delta_over_b: f64, delta0_over_b: f64) -> (f64, f64) {
    let gap = l.saturating_sub(n) as f64;
    let kd = kappa * d as f64;
    (
        gap * (-kd * delta_over_b * delta_over_b).exp(),
        gap / n as f64 * (-kd * delta0_over_b * delta0_over_b).exp(),
    )
}

/// Precision lower bound as a function of the normalised margins.
pub fn precision_lower(l: usize, n: usize, kappa: f64, d: usize, delta_over_b: f64, delta0_over_b: f64) -> f64 {
    let (t1, t2) = tail_terms(l, n, kappa, d, delta_over_b, delta0_over_b);
    1.0 / (1.0 + t1 + t2)
}

/// Recall lower bound, clamped at 0.
pub fn recall_lower(l: usize, n: usize, kappa: f64, d: usize, delta_over_b: f64, delta0_over_b: f64) -> f64 {
    let (t1, t2) = tail_terms(l, n, kappa, d, delta_over_b, delta0_over_b);
    (1.0 - t1 - t2).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Envelope {
    pub lo: f64,
    pub hi: f64,
    pub margin_positive: bool,
}

fn ratios(mq: &MarginQuantities) -> (f64, f64) {
    (mq.delta / mq.b, mq.delta0 / mq.b)
}

pub fn precision_bounds(
    mq: &MarginQuantities,
    tails: &PairwiseTail,
    l: usize,
    n: usize,
    kappa: f64,
    d: usize,
) -> Envelope {
    let positive = mq.delta > 0.0;
    let lo = if positive {
        let (r, r0) = ratios(mq);
        precision_lower(l, n, kappa, d, r, r0)
    } else {
        0.0
    };
    Envelope {
        lo,
        hi: 1.0 - tails.max_p_minus() / (n as f64 + 1.0),
        margin_positive: positive,
    }
}

pub fn recall_bounds(
    mq: &MarginQuantities,
    tails: &PairwiseTail,
    l: usize,
    n: usize,
    kappa: f64,
    d: usize,
) -> Envelope {
    let positive = mq.delta > 0.0;
    let lo = if positive {
        let (r, r0) = ratios(mq);
        recall_lower(l, n, kappa, d, r, r0)
    } else {
        0.0
    };
    let rows = tails.row_max();
    let hi = if rows.is_empty() {
        1.0
    } else {
        rows.iter().map(|p| 1.0 - p).sum::<f64>() / n as f64
    };
    Envelope {
        lo,
        hi,
        margin_positive: positive,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FEnvelope {
    pub f_rmin_lo: f64,
    pub f_rmin_hi: f64,
    pub f_rmax_lo: f64,
    pub f_rmax_hi: f64,
}

fn harmonic_with_one(x: f64) -> f64 {
    2.0 * x / (1.0 + x)
}

/// F at r_min has P = 1 and F at r_max has R = 1, so each envelope maps through 2x/(1+x).
pub fn fscore_bounds(p: Envelope, r: Envelope) -> FEnvelope {
    FEnvelope {
        f_rmin_lo: harmonic_with_one(r.lo),
        f_rmin_hi: harmonic_with_one(r.hi),
        f_rmax_lo: harmonic_with_one(p.lo),
        f_rmax_hi: harmonic_with_one(p.hi),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub n: usize,
    pub precision_lo: f64,
    pub precision_hi: f64,
    pub recall_lo: f64,
    pub recall_hi: f64,
    pub f_rmin_lo: f64,
    pub f_rmin_hi: f64,
    pub f_rmax_lo: f64,
    pub f_rmax_hi: f64,
    pub kappa: f64,
    pub margin_positive: bool,
    pub delta: f64,
    pub delta0: f64,
    pub b: f64,
    /// Lower bounds before being capped at the upper ones.
    pub precision_lo_raw: f64,
    pub recall_lo_raw: f64,
    /// A raw lower bound exceeded its upper bound.
    pub crossed: bool,
    /// N = 1 or N = L+1: every statistic equals 1 deterministically.
    pub regime_override: bool,
}

/// Full envelope for one selection. N = 1 and N = L+1 report lo = hi = 1.
pub fn bound_report(
    a: &[f64],
    sel: &Selection,
    cos: &dyn Cosines,
    kappa: f64,
    d: usize,
    opts: TailOptions,
) -> Result<BoundReport> {
    let l = a.len() - 1;
    let n = sel.n;
    if n == 1 || sel.is_full() {
        let (delta, delta0, b) = if sel.is_full() {
            (f64::NAN, f64::NAN, f64::NAN)
        } else {
            let mq = margins(a, sel, cos, None)?;
            (mq.delta, mq.delta0, mq.b)
        };
        return Ok(BoundReport {
            n,
            precision_lo: 1.0,
            precision_hi: 1.0,
            recall_lo: 1.0,
            recall_hi: 1.0,
            f_rmin_lo: 1.0,
            f_rmin_hi: 1.0,
            f_rmax_lo: 1.0,
            f_rmax_hi: 1.0,
            kappa,
            margin_positive: true,
            delta,
            delta0,
            b,
            precision_lo_raw: 1.0,
            recall_lo_raw: 1.0,
            crossed: false,
            regime_override: true,
        });
    }
    let mq = margins(a, sel, cos, None)?;
    let tails = pairwise_tails(&mq, cos, sel, kappa, d, opts)?;
    let p = precision_bounds(&mq, &tails, l, n, kappa, d);
    let r = recall_bounds(&mq, &tails, l, n, kappa, d);
    let crossed = p.lo > p.hi || r.lo > r.hi;
    let pc = Envelope { lo: p.lo.min(p.hi), ..p };
    let rc = Envelope { lo: r.lo.min(r.hi), ..r };
    let f = fscore_bounds(pc, rc);
    Ok(BoundReport {
        n,
        precision_lo: pc.lo,
        precision_hi: pc.hi,
        recall_lo: rc.lo,
        recall_hi: rc.hi,
        f_rmin_lo: f.f_rmin_lo,
        f_rmin_hi: f.f_rmin_hi,
        f_rmax_lo: f.f_rmax_lo,
        f_rmax_hi: f.f_rmax_hi,
        kappa,
        margin_positive: p.margin_positive,
        delta: mq.delta,
        delta0: mq.delta0,
        b: mq.b,
        precision_lo_raw: p.lo,
        recall_lo_raw: r.lo,
        crossed,
        regime_override: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KappaCalibration {
    pub kappa: f64,
    /// The target was not reached even at the upper end of the search range.
    pub saturated: bool,
    pub lower_at_kappa: f64,
}

pub const KAPPA_RANGE: (f64, f64) = (1e-3, 1e3);

/// Smallest kappa in [`KAPPA_RANGE`] whose precision lower bound at N = 2 reaches `target`.
pub fn calibrate_kappa(mq: &MarginQuantities, l: usize, n: usize, d: usize, target: f64) -> Result<KappaCalibration> {
    if mq.delta <= 0.0 {
        return Err(Error::Degenerate(format!(
            "margin Delta = {} is not positive at N = {n}; kappa cannot be calibrated",
            mq.delta
        )));
    }
    let (r, r0) = ratios(mq);
    let lower = |k: f64| precision_lower(l, n, k, d, r, r0);
    let (mut lo, mut hi) = KAPPA_RANGE;
    if lower(hi) < target {
        return Ok(KappaCalibration {
            kappa: hi,
            saturated: true,
            lower_at_kappa: lower(hi),
        });
    }
    if lower(lo) >= target {
        return Ok(KappaCalibration {
            kappa: lo,
            saturated: false,
            lower_at_kappa: lower(lo),
        });
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if lower(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo < 1.0 + 1e-12 {
            break;
        }
    }
    Ok(KappaCalibration {
        kappa: hi,
        saturated: false,
        lower_at_kappa: lower(hi),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReductionReport {
    pub k_out: usize,
    pub k_in: usize,
    /// Sum over i in I_N, j outside of 1{D_j <= D_i}; majorises both K_out and N - K_in.
    pub pair_count: usize,
    pub out_holds: bool,
    pub in_holds: bool,
}

pub fn deterministic_reduction_check(geo: &SelectionGeometry) -> Result<ReductionReport> {
    let sel = &geo.selection;
    if sel.is_full() {
        return Err(Error::NoOutsideTokens);
    }
    let outside = sel.outside();
    let r_max2 = sel.indices.iter().map(|&i| geo.d2[i]).fold(0.0, f64::max);
    let r_min2 = outside.iter().map(|&j| geo.d2[j]).fold(f64::INFINITY, f64::min);
    let k_out = outside.iter().filter(|&&j| geo.d2[j] <= r_max2).count();
    let k_in = sel.indices.iter().filter(|&&i| geo.d2[i] <= r_min2).count();
    let mut pair_count = 0;
    for &i in &sel.indices {
        for &j in &outside {
            pair_count += (geo.d2[j] <= geo.d2[i]) as usize;
        }
    }
    Ok(ReductionReport {
        k_out,
        k_in,
        pair_count,
        out_holds: k_out <= pair_count,
        in_holds: sel.n - k_in <= pair_count,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SinkShift {
    pub r_min: f64,
    pub r_min_shifted: f64,
    /// r_min(shifted) - r_min(reference).
    pub delta_r: f64,
    /// Finite-difference slope of the in-set distance ECDF at r_min.
    pub ecdf_slope: f64,
    pub delta_recall: f64,
    /// The slope used a one-sided difference.
    pub one_sided: bool,
}

/// First-order effect of a sink correlation rho0 on r_min and on Recall,
/// with `geo` and `mq` describing the orthogonal-sink reference.
pub fn sink_shift(geo: &SelectionGeometry, mq: &MarginQuantities, rho0: f64) -> Result<SinkShift> {
    let sel = &geo.selection;
    if sel.is_full() {
        return Err(Error::NoOutsideTokens);
    }
    let mut r_min_shifted = f64::INFINITY;
    for j in sel.outside() {
        let dj = geo.dist[j];
        if dj <= 0.0 {
            return Err(Error::Degenerate(format!("token {j} sits on s; the shift is undefined")));
        }
        r_min_shifted = r_min_shifted.min(dj + mq.a[j] * mq.s_in * rho0 / dj);
    }
    let r = geo.r_min;
    let inside: Vec<f64> = sel.indices.iter().map(|&i| geo.dist[i]).collect();
    let ecdf = |x: f64| inside.iter().filter(|&&v| v <= x).count() as f64 / inside.len() as f64;
    let lo = inside.iter().copied().fold(r, f64::min);
    let hi = inside.iter().copied().fold(r, f64::max);
    let h = hi - lo;
    let (slope, one_sided) = if h <= 0.0 {
        (0.0, true)
    } else if r - h < 0.0 {
        ((ecdf(r + h) - ecdf(r)) / h, true)
    } else {
        ((ecdf(r + h) - ecdf(r - h)) / (2.0 * h), false)
    };
    let delta_r = r_min_shifted - r;
    Ok(SinkShift {
        r_min: r,
        r_min_shifted,
        delta_r,
        ecdf_slope: slope,
        delta_recall: slope * delta_r,
        one_sided,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{selection_geometry, top_n_select};
    use proptest::prelude::*;

    fn sel_of(n_pos: usize, idx: &[usize]) -> Selection {
        let mut in_set = vec![false; n_pos];
        idx.iter().for_each(|&i| in_set[i] = true);
        Selection {
            n: idx.len(),
            indices: idx.to_vec(),
            in_set,
        }
    }

    struct Flat(f64);
    impl Cosines for Flat {
        fn cos(&self, i: usize, j: usize) -> f64 {
            if i == j {
                1.0
            } else {
                self.0
            }
        }
    }

    #[test]
    fn margin_hand_arithmetic() {
        // Positions: 0 sink (a = 0), in-tokens 1, 2 with a = 0.5, 0.4, out-token 3 with a = 0.1.
        let a = [0.0, 0.5, 0.4, 0.1];
        let mq = margins(&a, &sel_of(4, &[0, 1, 2]), &Flat(0.2), None).unwrap();
        assert!((mq.s_in - 0.9).abs() < 1e-15);
        assert!((mq.delta - 0.124).abs() < 1e-12);
        assert!((mq.b - (0.5 + 0.1 + 0.9)).abs() < 1e-15);
        // a_0 = 0 gives a non-positive sink margin.
        assert!(mq.delta0 <= 0.0);
        let orth = margins(&a, &sel_of(4, &[0, 1, 2]), &Flat(0.0), None).unwrap();
        assert_eq!(orth.delta, 0.4 * 0.4);
    }

    #[test]
    fn full_selection_has_no_margins() {
        let a = [0.5, 0.5];
        assert!(matches!(
            margins(&a, &sel_of(2, &[0, 1]), &Flat(0.0), None),
            Err(Error::NoOutsideTokens)
        ));
    }

    #[test]
    fn p_minus_values() {
        let want = 0.120_985_362_259_571_67;
        assert!((p_minus(1.0) - want).abs() < 1e-15);
        assert_eq!(p_minus(-0.5), 0.5);
        assert_eq!(p_minus(0.0), 0.0);
        assert!(p_minus(40.0) < 1e-300);
        assert_eq!(p_minus(f64::INFINITY), 0.0);
    }

    #[test]
    fn theorem_spot_values() {
        // Reference computed at 50 significant digits.
        let want = 0.289_952_777_728_399_12;
        let got = precision_lower(10, 2, 0.5, 64, 0.2, 0.3);
        assert!((got - want).abs() < 1e-14);
        assert_eq!(recall_lower(10, 2, 0.5, 64, 0.2, 0.3), 0.0);
        assert!(precision_lower(10, 2, 0.5, 64, 1e3, 1e3) == 1.0);
    }

    fn uniform_tail(n: usize, k: usize, p: f64) -> PairwiseTail {
        PairwiseTail {
            inside: (0..n).collect(),
            outside: (n..n + k).collect(),
            mu: vec![0.0; n * k],
            xi: vec![0.0; n * k],
            p_minus: vec![p; n * k],
            sigma: 1.0,
            m: vec![],
        }
    }

    #[test]
    fn worst_tail_ceiling() {
        let a = [0.6, 0.2, 0.2];
        let mq = margins(&a, &sel_of(3, &[0]), &Flat(0.0), None).unwrap();
        let env = precision_bounds(&mq, &uniform_tail(1, 2, 0.5), 2, 1, 0.5, 8);
        assert_eq!(env.hi, 0.75);
        let r = recall_bounds(&mq, &uniform_tail(1, 2, 0.0), 2, 1, 0.5, 8);
        assert_eq!(r.hi, 1.0);
    }

    #[test]
    fn nonpositive_margin_flags() {
        let a = [0.0, 0.1, 0.9];
        let mq = margins(&a, &sel_of(3, &[0, 1]), &Flat(0.9), None).unwrap();
        assert!(mq.delta <= 0.0);
        let t = pairwise_tails(&mq, &Flat(0.9), &sel_of(3, &[0, 1]), 0.5, 8, TailOptions::default()).unwrap();
        let p = precision_bounds(&mq, &t, 2, 2, 0.5, 8);
        assert_eq!(p.lo, 0.0);
        assert!(!p.margin_positive);
    }

    #[test]
    fn f_envelope_arithmetic() {
        let p = Envelope { lo: 0.0, hi: 0.75, margin_positive: true };
        let r = Envelope { lo: 1.0, hi: 1.0, margin_positive: true };
        let f = fscore_bounds(p, r);
        assert_eq!(f.f_rmin_lo, 1.0);
        assert!((f.f_rmax_hi - 1.5 / 1.75).abs() < 1e-15);
        assert_eq!(f.f_rmax_lo, 0.0);
    }

    #[test]
    fn recall_lower_is_one_without_gap() {
        assert_eq!(recall_lower(10, 10, 0.5, 64, 0.01, 0.01), 1.0);
    }

    #[test]
    fn mean_gap_matches_distance_difference() {
        // With exact cosines, mu_ij equals D_j - D_i when the sink is counted.
        let values: Vec<f32> = vec![1.0, 0.0, 0.6, 0.8, -0.3, 0.9, 0.1, -1.0, 0.7, 0.7];
        let mut attn = vec![0.4f32, 0.25, 0.15, 0.12, 0.08];
        let z: f32 = attn.iter().sum();
        attn.iter_mut().for_each(|x| *x /= z);
        let slice = HeadSlice::new(0, 0, 2, values, attn).unwrap();
        let cos = MeasuredCosines::from_slice(&slice);
        for n in 1..5 {
            let sel = top_n_select(&slice.attn_row, n).unwrap();
            let geo = selection_geometry(&slice, &sel);
            let mq = margins(&slice_amplitudes(&slice), &sel, &cos, None).unwrap();
            let t = pairwise_tails(&mq, &cos, &sel, 1.0, 2, TailOptions::default()).unwrap();
            let k = t.outside.len();
            for (r, &i) in t.inside.iter().enumerate() {
                for (c, &j) in t.outside.iter().enumerate() {
                    let x = geo.d2[j] - geo.d2[i];
                    assert!((t.mu[r * k + c] - x).abs() < 1e-6, "n={n} i={i} j={j}");
                }
            }
        }
    }

    #[test]
    fn stated_mean_gap_differs_for_sink_row() {
        let a = [0.5, 0.3, 0.2];
        let sel = sel_of(3, &[0, 1]);
        let cos = Flat(0.1);
        let mq = margins(&a, &sel, &cos, None).unwrap();
        let with = pairwise_tails(&mq, &cos, &sel, 1.0, 8, TailOptions { sink_in_mean: true }).unwrap();
        let without = pairwise_tails(&mq, &cos, &sel, 1.0, 8, TailOptions { sink_in_mean: false }).unwrap();
        // M_j without the sink: a_1 rho_{1j}.
        assert!((without.m[2] - 0.3 * 0.1).abs() < 1e-15);
        assert!((with.m[2] - (0.5 * 0.1 + 0.3 * 0.1)).abs() < 1e-15);
        assert_ne!(with.mu[0], without.mu[0]);
    }

    #[test]
    fn kappa_calibration_hits_target() {
        let a = [0.5, 0.2, 0.1, 0.05, 0.05, 0.05, 0.05];
        let sel = sel_of(7, &[0, 1]);
        let mq = margins(&a, &sel, &ModelCosines { beta: 0.5, rho0: 0.0 }, None).unwrap();
        let cal = calibrate_kappa(&mq, 6, 2, 16, 0.8).unwrap();
        assert!(!cal.saturated);
        assert!(cal.lower_at_kappa >= 0.8);
        let (r, r0) = (mq.delta / mq.b, mq.delta0 / mq.b);
        assert!(precision_lower(6, 2, cal.kappa * (1.0 - 1e-9), 16, r, r0) < 0.8 + 1e-9);
        let sat = calibrate_kappa(&mq, 6, 2, 16, 1.0).unwrap();
        assert!(sat.saturated);
        assert_eq!(sat.kappa, KAPPA_RANGE.1);
    }

    #[test]
    fn sink_shift_signs() {
        let values: Vec<f32> = vec![0.0, 1.0, 1.0, 0.0, 0.8, 0.6, -0.5, 0.5, 0.2, -0.9];
        let attn = vec![0.35f32, 0.3, 0.15, 0.12, 0.08];
        let slice = HeadSlice::new(0, 0, 2, values, attn).unwrap();
        let sel = top_n_select(&slice.attn_row, 3).unwrap();
        let geo = selection_geometry(&slice, &sel);
        let mq = margin_quantities(&slice, &sel, None).unwrap();
        assert_eq!(sink_shift(&geo, &mq, 0.0).unwrap().delta_recall, 0.0);
        let neg = sink_shift(&geo, &mq, -0.2).unwrap();
        assert!(neg.delta_r < 0.0 && neg.delta_recall <= 0.0);
        let pos = sink_shift(&geo, &mq, 0.2).unwrap();
        assert!(pos.delta_r > 0.0 && pos.delta_recall >= 0.0);
    }

    #[test]
    fn reduction_with_ties() {
        // Every distance equal: all indicators fire.
        let values: Vec<f32> = vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0];
        let slice = HeadSlice::new(0, 0, 2, values, vec![0.25; 4]).unwrap();
        for n in 1..4 {
            let sel = top_n_select(&slice.attn_row, n).unwrap();
            let rep = deterministic_reduction_check(&selection_geometry(&slice, &sel)).unwrap();
            assert!(rep.out_holds && rep.in_holds);
        }
    }

    fn arb_amplitudes() -> impl Strategy<Value = (Vec<f64>, usize)> {
        (3usize..30).prop_flat_map(|len| {
            (proptest::collection::vec(0.01f64..1.0, len), 2..len)
        })
    }

    proptest! {
        #[test]
        fn p_minus_in_range(xi in -50.0f64..50.0) {
            let p = p_minus(xi);
            prop_assert!((0.0..=0.5).contains(&p));
        }

        #[test]
        fn report_ordering_and_clamps(
            (a, n) in arb_amplitudes(),
            beta in 0.01f64..2.0,
            rho0 in -0.3f64..0.3,
            kappa in 0.01f64..10.0,
            d in 2usize..512,
        ) {
            let alpha: Vec<f32> = a.iter().map(|&x| x as f32).collect();
            let sel = top_n_select(&alpha, n).unwrap();
            let r = bound_report(&a, &sel, &ModelCosines { beta, rho0 }, kappa, d, TailOptions::default()).unwrap();
            for (lo, hi) in [(r.precision_lo, r.precision_hi), (r.recall_lo, r.recall_hi),
                             (r.f_rmin_lo, r.f_rmin_hi), (r.f_rmax_lo, r.f_rmax_hi)] {
                prop_assert!(lo <= hi);
                prop_assert!((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi));
            }
        }

        #[test]
        fn lower_bounds_monotone_in_d(
            l in 4usize..200, n0 in 1usize..50, kappa in 0.01f64..2.0,
            r in 0.001f64..0.5, r0 in 0.001f64..0.5, d in 2usize..400,
        ) {
            let n = n0.min(l);
            prop_assert!(precision_lower(l, n, kappa, d + 1, r, r0) >= precision_lower(l, n, kappa, d, r, r0));
            prop_assert!(recall_lower(l, n, kappa, d + 1, r, r0) >= recall_lower(l, n, kappa, d, r, r0));
        }

        #[test]
        fn recall_lower_monotone_in_l(
            l in 4usize..200, n0 in 1usize..50, kappa in 0.01f64..2.0,
            r in 0.001f64..0.5, r0 in 0.001f64..0.5, d in 2usize..400,
        ) {
            let n = n0.min(l);
            prop_assert!(recall_lower(l + 1, n, kappa, d, r, r0) <= recall_lower(l, n, kappa, d, r, r0));
        }

        #[test]
        fn reductions_always_hold(
            d2 in proptest::collection::vec(0u8..6, 2..40),
            n0 in 1usize..40,
        ) {
            // Integer squared distances make ties frequent.
            let len = d2.len();
            let n = n0.min(len - 1);
            let sel = sel_of(len, &(0..n).collect::<Vec<_>>());
            let d2: Vec<f64> = d2.iter().map(|&x| x as f64).collect();
            let geo = SelectionGeometry {
                selection: sel,
                dim: 1,
                effective_points: vec![0.0; len],
                s: vec![0.0],
                dist: d2.iter().map(|x| x.sqrt()).collect(),
                r_min: 0.0,
                r_max: 0.0,
                d2,
            };
            let rep = deterministic_reduction_check(&geo).unwrap();
            prop_assert!(rep.out_holds && rep.in_holds);
        }
    }
}
