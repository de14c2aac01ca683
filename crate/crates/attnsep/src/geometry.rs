//! Top-N selection, representative vector, radii and the
//! Precision / Recall / F-score metrics.
//!
//! Ball conventions: precision counts `dist < r`, recall counts `dist <= r`.
//! [`precision_closed`] counts `dist <= r` and is what P(r_max, N) uses.

use serde::Serialize;

use crate::dump_io::HeadSlice;
use crate::error::{Error, Result};
use crate::stats;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub n: usize,
    /// Sorted ascending.
    pub indices: Vec<usize>,
    /// Membership mask over all L+1 positions.
    pub in_set: Vec<bool>,
}

impl Selection {
    pub fn contains(&self, i: usize) -> bool {
        self.in_set[i]
    }

    pub fn outside(&self) -> Vec<usize> {
        (0..self.in_set.len()).filter(|&j| !self.in_set[j]).collect()
    }

    pub fn is_full(&self) -> bool {
        self.n == self.in_set.len()
    }
}

/// The `n` largest weights; equal weights go to the lower index.
pub fn top_n_select(attn: &[f32], n: usize) -> Result<Selection> {
    let total = attn.len();
    if n < 1 || n > total {
        return Err(Error::Range(format!("N = {n} outside [1, {total}]")));
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by(|&a, &b| attn[b].total_cmp(&attn[a]).then(a.cmp(&b)));
    let mut indices = order[..n].to_vec();
    indices.sort_unstable();
    let mut in_set = vec![false; total];
    for &i in &indices {
        in_set[i] = true;
    }
    Ok(Selection { n, indices, in_set })
}

#[derive(Debug, Clone)]
pub struct SelectionGeometry {
    pub selection: Selection,
    pub dim: usize,
    /// Row-major (L+1) x d, row i = alpha_i v_i.
    pub effective_points: Vec<f64>,
    pub s: Vec<f64>,
    /// Squared distances D_l = |s - alpha_l v_l|^2.
    pub d2: Vec<f64>,
    /// sqrt(D_l).
    pub dist: Vec<f64>,
    /// Distance to the nearest non-selected point; +inf when N = L+1.
    pub r_min: f64,
    /// Distance to the farthest selected point.
    pub r_max: f64,
}

impl SelectionGeometry {
    pub fn point(&self, i: usize) -> &[f64] {
        &self.effective_points[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn selection_geometry(slice: &HeadSlice, sel: &Selection) -> SelectionGeometry {
    let n = slice.positions();
    let d = slice.dim;
    let mut pts = vec![0.0; n * d];
    for i in 0..n {
        let a = slice.attn_row[i] as f64;
        for (k, &v) in slice.value(i).iter().enumerate() {
            pts[i * d + k] = a * v as f64;
        }
    }
    let mut s = vec![0.0; d];
    for &i in &sel.indices {
        for k in 0..d {
            s[k] += pts[i * d + k];
        }
    }
    let d2: Vec<f64> = (0..n)
        .map(|i| {
            (0..d)
                .map(|k| {
                    let x = s[k] - pts[i * d + k];
                    x * x
                })
                .sum()
        })
        .collect();
    let dist: Vec<f64> = d2.iter().map(|x| x.sqrt()).collect();
    let mut r_min = f64::INFINITY;
    let mut r_max = 0.0f64;
    for i in 0..n {
        if sel.in_set[i] {
            r_max = r_max.max(dist[i]);
        } else {
            r_min = r_min.min(dist[i]);
        }
    }
    SelectionGeometry {
        selection: sel.clone(),
        dim: d,
        effective_points: pts,
        s,
        d2,
        dist,
        r_min,
        r_max,
    }
}

fn check_radius(r: f64) -> Result<()> {
    if r.is_nan() || r < 0.0 {
        return Err(Error::Range(format!("radius {r} must be non-negative")));
    }
    Ok(())
}

fn ratio_or_one(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Fraction of points strictly inside radius `r` that are selected.
pub fn precision(geo: &SelectionGeometry, r: f64) -> Result<f64> {
    check_radius(r)?;
    let mut hit = 0;
    let mut all = 0;
    for (i, &x) in geo.dist.iter().enumerate() {
        if x < r {
            all += 1;
            hit += geo.selection.in_set[i] as usize;
        }
    }
    Ok(ratio_or_one(hit, all))
}

/// Precision over the closed ball `dist <= r`.
pub fn precision_closed(geo: &SelectionGeometry, r: f64) -> Result<f64> {
    check_radius(r)?;
    let mut hit = 0;
    let mut all = 0;
    for (i, &x) in geo.dist.iter().enumerate() {
        if x <= r {
            all += 1;
            hit += geo.selection.in_set[i] as usize;
        }
    }
    Ok(ratio_or_one(hit, all))
}

/// Fraction of selected points within the closed ball of radius `r`.
pub fn recall(geo: &SelectionGeometry, r: f64) -> Result<f64> {
    check_radius(r)?;
    let hit = geo
        .selection
        .indices
        .iter()
        .filter(|&&i| geo.dist[i] <= r)
        .count();
    Ok(hit as f64 / geo.selection.n as f64)
}

pub fn fscore(p: f64, q: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) || !(0.0..=1.0).contains(&q) {
        return Err(Error::Range(format!("fscore inputs ({p}, {q}) outside [0, 1]")));
    }
    if p + q == 0.0 {
        Ok(0.0)
    } else {
        Ok(2.0 * p * q / (p + q))
    }
}

/// Metrics at the two extremal radii for one N.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub n: usize,
    pub r_min: f64,
    pub r_max: f64,
    /// P(r_max, N), closed ball.
    pub precision_rmax: f64,
    /// R(r_min, N).
    pub recall_rmin: f64,
    /// F at r_min, where P = 1.
    pub fscore_rmin: f64,
    /// F at r_max, where R = 1.
    pub fscore_rmax: f64,
}

pub fn curve_point(slice: &HeadSlice, n: usize) -> Result<CurvePoint> {
    let sel = top_n_select(&slice.attn_row, n)?;
    let geo = selection_geometry(slice, &sel);
    let p_min = precision(&geo, geo.r_min)?;
    let p_max = precision_closed(&geo, geo.r_max)?;
    let r_min = recall(&geo, geo.r_min)?;
    let r_max = recall(&geo, geo.r_max)?;
    Ok(CurvePoint {
        n,
        r_min: geo.r_min,
        r_max: geo.r_max,
        precision_rmax: p_max,
        recall_rmin: r_min,
        fscore_rmin: fscore(p_min, r_min)?,
        fscore_rmax: fscore(p_max, r_max)?,
    })
}

pub fn metric_curve(slice: &HeadSlice, ns: &[usize]) -> Result<Vec<CurvePoint>> {
    if ns.is_empty() {
        return Err(Error::Range("empty N grid".into()));
    }
    ns.iter().map(|&n| curve_point(slice, n)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DescriptorRow {
    pub n: usize,
    pub norm_s: f64,
    pub norm_s_without_sink: f64,
    pub norm_s_without_last: f64,
    pub align_sink: f64,
    pub align_last: f64,
    /// s(N) has zero norm (or v_0 / v_L do) and an alignment was set to 0.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadDescriptors {
    pub rows: Vec<DescriptorRow>,
    /// |alpha_0 v_0|.
    pub m_sink: f64,
    /// |alpha_L v_L|.
    pub m_last: f64,
    /// Sum over 0 < i < L of |alpha_i v_i|.
    pub m_rest: f64,
}

pub fn head_descriptors(slice: &HeadSlice, ns: &[usize]) -> Result<HeadDescriptors> {
    let l = slice.seq_len();
    if l < 2 {
        return Err(Error::Range(format!("head descriptors need L >= 2, got {l}")));
    }
    let alpha = slice.alpha();
    let norms = slice.value_norms();
    let v0 = slice.value_f64(0);
    let vl = slice.value_f64(l);
    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        let sel = top_n_select(&slice.attn_row, n)?;
        let geo = selection_geometry(slice, &sel);
        let drop = |k: usize| -> f64 {
            if sel.contains(k) {
                let p = geo.point(k);
                stats::norm(&geo.s.iter().zip(p).map(|(a, b)| a - b).collect::<Vec<_>>())
            } else {
                stats::norm(&geo.s)
            }
        };
        let cs = stats::cosine(&geo.s, &v0);
        let cl = stats::cosine(&geo.s, &vl);
        rows.push(DescriptorRow {
            n,
            norm_s: stats::norm(&geo.s),
            norm_s_without_sink: drop(0),
            norm_s_without_last: drop(l),
            align_sink: cs.unwrap_or(0.0),
            align_last: cl.unwrap_or(0.0),
            degenerate: cs.is_none() || cl.is_none(),
        });
    }
    Ok(HeadDescriptors {
        rows,
        m_sink: alpha[0] * norms[0],
        m_last: alpha[l] * norms[l],
        m_rest: (1..l).map(|i| alpha[i] * norms[i]).sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn slice_from(values: Vec<f32>, attn: Vec<f32>, d: usize) -> HeadSlice {
        HeadSlice::new(0, 0, d, values, attn).unwrap()
    }

    #[test]
    fn top_n_examples() {
        assert_eq!(top_n_select(&[0.7, 0.2, 0.1], 1).unwrap().indices, vec![0]);
        assert_eq!(top_n_select(&[0.3, 0.3, 0.4], 2).unwrap().indices, vec![0, 2]);
        assert_eq!(top_n_select(&[0.3, 0.3, 0.4], 3).unwrap().indices, vec![0, 1, 2]);
        assert!(matches!(top_n_select(&[0.5, 0.5], 0), Err(Error::Range(_))));
        assert!(matches!(top_n_select(&[0.5, 0.5], 3), Err(Error::Range(_))));
    }

    #[test]
    fn tie_rule_exhaustive() {
        // Every weight pattern over {0.1, 0.2} on 5 positions: the selection
        // must be the stable descending sort prefix.
        for mask in 0u32..32 {
            let attn: Vec<f32> = (0..5).map(|i| if mask >> i & 1 == 1 { 0.2 } else { 0.1 }).collect();
            for n in 1..=5 {
                let got = top_n_select(&attn, n).unwrap().indices;
                let mut hi: Vec<usize> = (0..5).filter(|&i| attn[i] == 0.2).collect();
                let lo: Vec<usize> = (0..5).filter(|&i| attn[i] == 0.1).collect();
                hi.extend(lo);
                let mut want = hi[..n].to_vec();
                want.sort();
                assert_eq!(got, want);
            }
        }
    }

    #[test]
    fn single_point_selection_collapses() {
        let s = slice_from(vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0], vec![0.5, 0.3, 0.2], 2);
        let sel = top_n_select(&s.attn_row, 1).unwrap();
        let g = selection_geometry(&s, &sel);
        assert_eq!(g.d2[0], 0.0);
        assert_eq!(g.r_max, 0.0);
        assert_eq!(recall(&g, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn full_selection_sentinels() {
        let s = slice_from(vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0], vec![0.5, 0.3, 0.2], 2);
        let sel = top_n_select(&s.attn_row, 3).unwrap();
        let g = selection_geometry(&s, &sel);
        assert!(g.r_min.is_infinite());
        for r in [0.0, 0.1, 1.0, 10.0] {
            assert_eq!(precision(&g, r).unwrap(), 1.0);
        }
        let c = curve_point(&s, 3).unwrap();
        assert_eq!((c.precision_rmax, c.recall_rmin), (1.0, 1.0));
    }

    #[test]
    fn negative_radius_rejected() {
        let s = slice_from(vec![1.0, 0.0, 0.0, 1.0], vec![0.5, 0.5], 2);
        let g = selection_geometry(&s, &top_n_select(&s.attn_row, 1).unwrap());
        assert!(precision(&g, -1.0).is_err());
        assert!(recall(&g, -0.5).is_err());
    }

    #[test]
    fn fscore_examples() {
        assert_eq!(fscore(1.0, 1.0).unwrap(), 1.0);
        assert!((fscore(3.0 / 8.0, 2.0 / 3.0).unwrap() - 0.48).abs() < 1e-15);
        assert_eq!(fscore(0.0, 0.0).unwrap(), 0.0);
        assert!(fscore(1.5, 0.5).is_err());
    }

    #[test]
    fn descriptors_simple_cases() {
        // Last token alone selected: s parallel to v_L.
        let s = slice_from(
            vec![1.0, 0.0, 0.0, 1.0, 0.6, 0.8],
            vec![0.1, 0.2, 0.7],
            2,
        );
        let d = head_descriptors(&s, &[1, 2]).unwrap();
        assert!((d.rows[0].align_last - 1.0).abs() < 1e-12);
        // Sink never selected at N = 2: leaving it out changes nothing.
        assert_eq!(d.rows[1].norm_s_without_sink, d.rows[1].norm_s);
        assert!((d.m_sink - 0.1).abs() < 1e-7);
        assert!((d.m_last - 0.7).abs() < 1e-7);
        assert!((d.m_rest - 0.2).abs() < 1e-7);
    }

    #[test]
    fn zero_s_is_degenerate() {
        let s = slice_from(vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0], vec![0.5, 0.25, 0.25], 2);
        let d = head_descriptors(&s, &[1]).unwrap();
        assert!(d.rows[0].degenerate);
        assert_eq!(d.rows[0].align_sink, 0.0);
    }

    fn arb_slice(max_l: usize, max_d: usize) -> impl Strategy<Value = HeadSlice> {
        (2..=max_l, 2..=max_d).prop_flat_map(|(l, d)| {
            let n = l + 1;
            (
                proptest::collection::vec(-3.0f32..3.0, n * d),
                proptest::collection::vec(0.0f32..1.0, n),
            )
                .prop_filter_map("zero attention", move |(v, mut a)| {
                    let z: f32 = a.iter().sum();
                    if z <= 1e-3 {
                        return None;
                    }
                    a.iter_mut().for_each(|x| *x /= z);
                    let s: f64 = a.iter().map(|&x| x as f64).sum();
                    if (s - 1.0).abs() > 1e-5 {
                        return None;
                    }
                    Some(HeadSlice::new(0, 0, d, v, a).unwrap())
                })
        })
    }

    /// Independent O(L^2) reference: pairwise sorting of distances.
    fn brute(slice: &HeadSlice, n: usize) -> (f64, f64) {
        let len = slice.positions();
        let mut order: Vec<usize> = (0..len).collect();
        order.sort_by(|&a, &b| {
            slice.attn_row[b]
                .partial_cmp(&slice.attn_row[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        let chosen = &order[..n];
        let pt = |i: usize| -> Vec<f64> {
            slice.value(i).iter().map(|&x| x as f64 * slice.attn_row[i] as f64).collect()
        };
        let mut s = vec![0.0; slice.dim];
        for &i in chosen {
            for (k, x) in pt(i).iter().enumerate() {
                s[k] += x;
            }
        }
        let dist = |i: usize| -> f64 {
            pt(i).iter().zip(&s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
        };
        let in_d: Vec<f64> = chosen.iter().map(|&i| dist(i)).collect();
        let out_d: Vec<f64> = (0..len).filter(|i| !chosen.contains(i)).map(dist).collect();
        let r_max = in_d.iter().cloned().fold(0.0, f64::max);
        let r_min = out_d.iter().cloned().fold(f64::INFINITY, f64::min);
        let k_out = out_d.iter().filter(|&&x| x <= r_max).count();
        let k_in = in_d.iter().filter(|&&x| x <= r_min).count();
        (n as f64 / (n + k_out) as f64, k_in as f64 / n as f64)
    }

    proptest! {
        #[test]
        fn identities_hold(s in arb_slice(24, 6)) {
            for n in 1..=s.positions() {
                let sel = top_n_select(&s.attn_row, n).unwrap();
                let g = selection_geometry(&s, &sel);
                prop_assert_eq!(precision(&g, g.r_min).unwrap(), 1.0);
                prop_assert_eq!(recall(&g, g.r_max).unwrap(), 1.0);
                prop_assert!(g.d2.iter().all(|x| x.is_finite() && *x >= 0.0));
            }
        }

        #[test]
        fn brute_force_equivalence(s in arb_slice(12, 4)) {
            for n in 1..=s.positions() {
                let c = curve_point(&s, n).unwrap();
                let (p, r) = brute(&s, n);
                prop_assert_eq!(c.precision_rmax, p);
                prop_assert_eq!(c.recall_rmin, r);
            }
        }

        #[test]
        fn distances_match_naive(s in arb_slice(50, 8), frac in 0.0f64..1.0) {
            let n = 1 + ((s.positions() - 1) as f64 * frac) as usize;
            let sel = top_n_select(&s.attn_row, n).unwrap();
            let g = selection_geometry(&s, &sel);
            for i in 0..s.positions() {
                let mut acc = 0.0;
                for k in 0..s.dim {
                    let mut sk = 0.0;
                    for &j in &sel.indices {
                        sk += s.attn_row[j] as f64 * s.value(j)[k] as f64;
                    }
                    let x = sk - s.attn_row[i] as f64 * s.value(i)[k] as f64;
                    acc += x * x;
                }
                prop_assert!((g.d2[i] - acc).abs() <= 1e-6 * acc.max(1e-12));
            }
        }

        #[test]
        fn recall_monotone_in_r(s in arb_slice(20, 4), n0 in 1usize..20) {
            let n = n0.min(s.positions());
            let g = selection_geometry(&s, &top_n_select(&s.attn_row, n).unwrap());
            let mut radii: Vec<f64> = g.dist.clone();
            radii.push(0.0);
            radii.sort_by(f64::total_cmp);
            let mut last_r = 0.0;
            let mut last_count = 0;
            for r in radii {
                let rec = recall(&g, r).unwrap();
                prop_assert!(rec >= last_r);
                last_r = rec;
                let count = g.dist.iter().filter(|&&x| x < r).count();
                prop_assert!(count >= last_count);
                last_count = count;
            }
        }

        #[test]
        fn scale_equivariance(s in arb_slice(16, 4), c in 0.25f32..4.0) {
            let mut t = s.clone();
            t.values.iter_mut().for_each(|x| *x *= c);
            for n in 1..=s.positions() {
                let a = curve_point(&s, n).unwrap();
                let b = curve_point(&t, n).unwrap();
                if a.r_max > 0.0 {
                    prop_assert!((b.r_max / a.r_max - c as f64).abs() < 1e-4);
                }
                // Only compare metrics when no distance sits within rounding of a radius.
                let sel = top_n_select(&s.attn_row, n).unwrap();
                let g = selection_geometry(&s, &sel);
                let tight = g.dist.iter().any(|&x| {
                    let near = |r: f64| r.is_finite() && x != r && (x - r).abs() < 1e-4 * r.max(1e-6);
                    near(g.r_min) || near(g.r_max)
                });
                if !tight {
                    prop_assert_eq!(a.precision_rmax, b.precision_rmax);
                    prop_assert_eq!(a.recall_rmin, b.recall_rmin);
                }
            }
        }

        #[test]
        fn relabelling_outside_tokens_is_harmless(s in arb_slice(12, 4), n0 in 1usize..6, seed in any::<u64>()) {
            let n = n0.min(s.positions());
            let sel = top_n_select(&s.attn_row, n).unwrap();
            let mut out = sel.outside();
            // Deterministic shuffle of outside labels.
            let mut state = seed | 1;
            for i in (1..out.len()).rev() {
                state ^= state << 13; state ^= state >> 7; state ^= state << 17;
                out.swap(i, (state % (i as u64 + 1)) as usize);
            }
            let orig = sel.outside();
            let mut t = s.clone();
            for (&from, &to) in orig.iter().zip(&out) {
                t.attn_row[to] = s.attn_row[from];
                t.values[to * s.dim..(to + 1) * s.dim].copy_from_slice(s.value(from));
            }
            let t_sel = top_n_select(&t.attn_row, n).unwrap();
            prop_assume!(t_sel == sel);
            let a = curve_point(&s, n).unwrap();
            let b = curve_point(&t, n).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
