use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use attnsep::assumptions::{self, AssumptionFits, PrevalenceThresholds};
use attnsep::bounds::{self, BoundReport, MeasuredCosines, TailOptions};
use attnsep::dump_io::{read_dump, write_dump, Dtype, Dump, DumpManifest, HeadSlice};
use attnsep::geometry::{head_descriptors, metric_curve, top_n_select, CurvePoint};
use attnsep::sparsify::{self, Method, RankOptions, TypePriority, WeightSidecar};
use attnsep::synthetic::{self, KappaChoice, SyntheticConfig};
use attnsep::taxonomy::{self, HeadProfile, LayerCounts, Regime, Thresholds};
use attnsep::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::output::{read_config, write_csv, write_json};
use crate::DumpArgs;

fn grid(ns: Option<&[usize]>, l: usize) -> Result<Vec<usize>> {
    let g = match ns {
        Some(ns) => ns.to_vec(),
        None => taxonomy::default_n_grid(l),
    };
    if g.is_empty() {
        return Err(Error::Range("empty N grid".into()));
    }
    if let Some(&n) = g.iter().find(|&&n| n == 0 || n > l + 1) {
        return Err(Error::Range(format!("N = {n} outside [1, {}]", l + 1)));
    }
    Ok(g)
}

fn config_or_default<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), read_config)
}

fn per_head<T: Send>(dump: &Dump, f: impl Fn(&HeadSlice) -> Result<T> + Sync) -> Result<Vec<T>> {
    dump.head_ids()
        .into_par_iter()
        .map(|(l, h)| f(&dump.slice(l, h)?))
        .collect()
}

#[derive(Serialize)]
struct MetricRow {
    layer: usize,
    head: usize,
    n: usize,
    r_min: f64,
    r_max: f64,
    precision_rmax: f64,
    recall_rmin: f64,
    f_rmin: f64,
    f_rmax: f64,
}

#[derive(Serialize)]
struct DescriptorCsvRow {
    layer: usize,
    head: usize,
    n: usize,
    norm_s: f64,
    norm_s_without_sink: f64,
    norm_s_without_last: f64,
    align_sink: f64,
    align_last: f64,
    degenerate: bool,
}

fn analyze_rows(dump: &Dump, ns: &[usize]) -> Result<(Vec<MetricRow>, Vec<DescriptorCsvRow>)> {
    let per: Vec<(Vec<CurvePoint>, Vec<DescriptorCsvRow>)> = per_head(dump, |s| {
        let curve = metric_curve(s, ns)?;
        let desc = head_descriptors(s, ns)?
            .rows
            .into_iter()
            .map(|r| DescriptorCsvRow {
                layer: s.layer,
                head: s.head,
                n: r.n,
                norm_s: r.norm_s,
                norm_s_without_sink: r.norm_s_without_sink,
                norm_s_without_last: r.norm_s_without_last,
                align_sink: r.align_sink,
                align_last: r.align_last,
                degenerate: r.degenerate,
            })
            .collect();
        Ok((curve, desc))
    })?;
    let mut metrics = Vec::new();
    let mut descriptors = Vec::new();
    for ((layer, head), (curve, desc)) in dump.head_ids().into_iter().zip(per) {
        metrics.extend(curve.into_iter().map(|c| MetricRow {
            layer,
            head,
            n: c.n,
            r_min: c.r_min,
            r_max: c.r_max,
            precision_rmax: c.precision_rmax,
            recall_rmin: c.recall_rmin,
            f_rmin: c.fscore_rmin,
            f_rmax: c.fscore_rmax,
        }));
        descriptors.extend(desc);
    }
    Ok((metrics, descriptors))
}

pub fn analyze(a: &DumpArgs) -> Result<()> {
    let dump = read_dump(&a.dump)?;
    let ns = grid(a.ns.as_deref(), dump.manifest.seq_len)?;
    let (metrics, descriptors) = analyze_rows(&dump, &ns)?;
    write_csv(&a.out, "metrics", &metrics)?;
    write_csv(&a.out, "descriptors", &descriptors)
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct FitConfig {
    max_lag: Option<usize>,
    profile_mae: Option<f64>,
}

#[derive(Serialize)]
struct FitRow {
    layer: usize,
    head: usize,
    #[serde(rename = "C")]
    c: f64,
    lambda: f64,
    cv: f64,
    beta: f64,
    rho0: f64,
    sim_mae: f64,
    sim_poor_fit: bool,
    p_sink: f64,
    p_base: f64,
    eta: f64,
    omega: f64,
    #[serde(rename = "T1")]
    t1: usize,
    #[serde(rename = "T2")]
    t2: usize,
    prof_mae: f64,
    sink: bool,
}

#[derive(Serialize)]
struct PrevalenceRow {
    layer: usize,
    heads: usize,
    prevalence: f64,
    median_cv: f64,
    median_lambda: f64,
}

#[derive(Serialize)]
struct PrevalenceSummary {
    layer: usize,
    prevalence: f64,
}

fn median(v: &[f64]) -> f64 {
    let mut s: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
    if s.is_empty() {
        return f64::NAN;
    }
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 { s[m] } else { 0.5 * (s[m - 1] + s[m]) }
}

fn fit_rows(dump: &Dump, cfg: &FitConfig) -> Result<(Vec<FitRow>, Vec<PrevalenceRow>)> {
    let max_lag = cfg.max_lag.unwrap_or_else(|| assumptions::default_max_lag(dump.manifest.seq_len));
    let thr = PrevalenceThresholds {
        profile_mae: cfg.profile_mae.unwrap_or(PrevalenceThresholds::default().profile_mae),
    };
    let fits: Vec<AssumptionFits> = per_head(dump, |s| assumptions::fit_head(s, max_lag))?;
    let prev = assumptions::prevalence_from_fits(&fits, dump.manifest.num_layers, thr);
    let rows = fits
        .iter()
        .map(|f| FitRow {
            layer: f.layer,
            head: f.head,
            c: f.norms.c,
            lambda: f.norms.lambda,
            cv: f.norms.cv,
            beta: f.similarity.beta,
            rho0: f.similarity.rho0,
            sim_mae: f.similarity.mae,
            sim_poor_fit: f.similarity.poor_fit,
            p_sink: f.profile.p_sink,
            p_base: f.profile.p_base,
            eta: f.profile.eta,
            omega: f.profile.omega,
            t1: f.profile.t1,
            t2: f.profile.t2,
            prof_mae: f.profile.mae,
            sink: f.profile.sink,
        })
        .collect();
    let prev = prev
        .iter()
        .map(|p| PrevalenceRow {
            layer: p.layer,
            heads: p.heads,
            prevalence: p.prevalence,
            median_cv: median(&p.cv),
            median_lambda: median(&p.lambda),
        })
        .collect();
    Ok((rows, prev))
}

pub fn fit(a: &DumpArgs) -> Result<()> {
    let dump = read_dump(&a.dump)?;
    let cfg: FitConfig = config_or_default(a.config.as_deref())?;
    let (rows, prev) = fit_rows(&dump, &cfg)?;
    write_csv(&a.out, "fits", &rows)?;
    write_csv(&a.out, "prevalence", &prev)
}

#[derive(Serialize)]
struct BoundRow {
    layer: usize,
    head: usize,
    n: usize,
    #[serde(rename = "P_lo")]
    p_lo: f64,
    #[serde(rename = "P_hi")]
    p_hi: f64,
    #[serde(rename = "R_lo")]
    r_lo: f64,
    #[serde(rename = "R_hi")]
    r_hi: f64,
    #[serde(rename = "F_rmin_lo")]
    f_rmin_lo: f64,
    #[serde(rename = "F_rmin_hi")]
    f_rmin_hi: f64,
    #[serde(rename = "F_rmax_lo")]
    f_rmax_lo: f64,
    #[serde(rename = "F_rmax_hi")]
    f_rmax_hi: f64,
    #[serde(rename = "Delta")]
    delta: f64,
    #[serde(rename = "Delta0")]
    delta0: f64,
    #[serde(rename = "B")]
    b: f64,
    kappa: f64,
    margin_positive: bool,
    crossed: bool,
    regime_override: bool,
}

impl BoundRow {
    fn new(layer: usize, head: usize, r: &BoundReport) -> Self {
        BoundRow {
            layer,
            head,
            n: r.n,
            p_lo: r.precision_lo,
            p_hi: r.precision_hi,
            r_lo: r.recall_lo,
            r_hi: r.recall_hi,
            f_rmin_lo: r.f_rmin_lo,
            f_rmin_hi: r.f_rmin_hi,
            f_rmax_lo: r.f_rmax_lo,
            f_rmax_hi: r.f_rmax_hi,
            delta: r.delta,
            delta0: r.delta0,
            b: r.b,
            kappa: r.kappa,
            margin_positive: r.margin_positive,
            crossed: r.crossed,
            regime_override: r.regime_override,
        }
    }
}

fn check_kappa(kappa: f64) -> Result<()> {
    if kappa > 0.0 && kappa.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("kappa must be positive, got {kappa}")))
    }
}

fn dump_bound_rows(dump: &Dump, ns: &[usize], kappa: f64) -> Result<Vec<BoundRow>> {
    let d = dump.manifest.head_dim;
    let per: Vec<Vec<BoundRow>> = per_head(dump, |s| {
        let a = bounds::slice_amplitudes(s);
        let cos = MeasuredCosines::from_slice(s);
        ns.iter()
            .map(|&n| {
                let sel = top_n_select(&s.attn_row, n)?;
                let r = bounds::bound_report(&a, &sel, &cos, kappa, d, TailOptions::default())?;
                Ok(BoundRow::new(s.layer, s.head, &r))
            })
            .collect()
    })?;
    Ok(per.into_iter().flatten().collect())
}

pub fn bounds(dump: Option<&Path>, config: Option<&Path>, out: &Path, ns: Option<&[usize]>, kappa: f64) -> Result<()> {
    check_kappa(kappa)?;
    let rows = match (dump, config) {
        (Some(path), _) => {
            let dump = read_dump(path)?;
            let ns = grid(ns, dump.manifest.seq_len)?;
            dump_bound_rows(&dump, &ns, kappa)?
        }
        (None, Some(path)) => {
            let run: SynthRun = read_config(path)?;
            run.synthetic.validate()?;
            let ns = grid(ns.or(run.ns.as_deref()), run.synthetic.seq_len)?;
            ns.iter()
                .map(|&n| {
                    synthetic::model_envelope(&run.synthetic, n, kappa, TailOptions::default())
                        .map(|r| BoundRow::new(0, 0, &r))
                })
                .collect::<Result<_>>()?
        }
        (None, None) => return Err(Error::Config("bounds needs --dump or --config".into())),
    };
    write_csv(out, "bounds", &rows)
}

fn default_trials() -> usize {
    synthetic::DEFAULT_TRIALS
}

fn default_dump_heads() -> usize {
    4
}

fn default_correlation_trials() -> usize {
    100
}

/// Config file for `synth` (and `bounds --config`).
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthRun {
    synthetic: SyntheticConfig,
    #[serde(default = "default_trials")]
    trials: usize,
    #[serde(default)]
    ns: Option<Vec<usize>>,
    /// Heads written to the generated dump (RNG streams 0..dump_heads).
    #[serde(default = "default_dump_heads")]
    dump_heads: usize,
    /// When present, also writes the Recall vs sink-similarity correlation table.
    #[serde(default)]
    rho0_grid: Option<Vec<f64>>,
    #[serde(default = "default_correlation_trials")]
    correlation_trials: usize,
}

#[derive(Serialize)]
struct MonteCarloRow {
    n: usize,
    statistic: &'static str,
    mean: f64,
    ci95: f64,
    lo: f64,
    hi: f64,
    contained: bool,
    n_trials: usize,
    kappa: f64,
}

#[derive(Serialize)]
struct CorrelationCsvRow {
    n: usize,
    correlation: f64,
    recall_constant: bool,
    samples: usize,
}

pub fn synth(config: &Path, out: &Path, ns: Option<&[usize]>, kappa: Option<f64>, seed: Option<u64>) -> Result<()> {
    let mut run: SynthRun = read_config(config)?;
    if let Some(seed) = seed {
        run.synthetic.seed = seed;
    }
    let cfg = &run.synthetic;
    cfg.validate()?;
    if let Some(k) = kappa {
        check_kappa(k)?;
    }
    if run.dump_heads == 0 {
        return Err(Error::Config("dump_heads must be at least 1".into()));
    }
    let ns = grid(ns.or(run.ns.as_deref()), cfg.seq_len)?;

    let slices: Vec<HeadSlice> = (0..run.dump_heads as u64)
        .map(|t| {
            let mut s = synthetic::generate_paired(cfg, &[cfg.rho0], t)?.remove(0);
            s.head = t as usize;
            Ok(s)
        })
        .collect::<Result<_>>()?;
    let manifest = DumpManifest {
        model_name: "synthetic".into(),
        num_layers: 1,
        num_heads: run.dump_heads,
        seq_len: cfg.seq_len,
        head_dim: cfg.head_dim,
        dtype: Dtype::F32,
        has_full_attention: false,
    };
    write_dump(&manifest, &slices, out.join("dump"))?;

    let choice = kappa.map_or(KappaChoice::CalibrateAtN2, KappaChoice::Fixed);
    let mc = synthetic::monte_carlo_envelope(cfg, &ns, run.trials, choice, TailOptions::default())?;
    let mut rows = Vec::new();
    for r in &mc.results {
        let e = &r.envelope;
        let stats = [
            ("P_rmax", r.mean_p_rmax, r.ci_p_rmax, e.precision_lo, e.precision_hi),
            ("R_rmin", r.mean_r_rmin, r.ci_r_rmin, e.recall_lo, e.recall_hi),
            ("F_rmin", r.mean_f_rmin, r.ci_f_rmin, e.f_rmin_lo, e.f_rmin_hi),
            ("F_rmax", r.mean_f_rmax, r.ci_f_rmax, e.f_rmax_lo, e.f_rmax_hi),
        ];
        for (statistic, mean, ci, lo, hi) in stats {
            rows.push(MonteCarloRow {
                n: r.n,
                statistic,
                mean,
                ci95: ci,
                lo,
                hi,
                contained: mean >= lo - 2.0 * ci && mean <= hi + 2.0 * ci,
                n_trials: r.n_trials,
                kappa: mc.kappa,
            });
        }
    }
    write_csv(out, "montecarlo", &rows)?;
    write_json(&out.join("kappa.json"), &serde_json::json!({
        "kappa": mc.kappa,
        "calibration": mc.calibration,
    }))?;

    if let Some(grid) = &run.rho0_grid {
        let corr = synthetic::sweep_rho0_recall_correlation(cfg, grid, &ns, run.correlation_trials)?;
        let rows: Vec<CorrelationCsvRow> = corr
            .into_iter()
            .map(|c| CorrelationCsvRow {
                n: c.n,
                correlation: c.correlation,
                recall_constant: c.recall_constant,
                samples: c.samples,
            })
            .collect();
        write_csv(out, "correlation", &rows)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct TaxonomyRow {
    layer: usize,
    head: usize,
    regime: Regime,
    ambiguous: bool,
    m_sink: f64,
    m_last: f64,
    m_rest: f64,
}

#[derive(Serialize)]
struct DepthRow {
    layer: usize,
    retriever: usize,
    mixer: usize,
    reset: usize,
    dominant: Regime,
}

#[derive(Serialize)]
struct BandRow {
    band: &'static str,
    dominant: Regime,
}

fn profiles(dump: &Dump, ns: &[usize], thr: &Thresholds) -> Result<Vec<HeadProfile>> {
    per_head(dump, |s| taxonomy::profile_head(s, ns, thr))
}

fn write_taxonomy(out: &Path, profiles: &[HeadProfile]) -> Result<Vec<LayerCounts>> {
    let rows: Vec<TaxonomyRow> = profiles
        .iter()
        .map(|p| TaxonomyRow {
            layer: p.layer,
            head: p.head,
            regime: p.regime,
            ambiguous: p.ambiguous,
            m_sink: p.m_sink,
            m_last: p.m_last,
            m_rest: p.m_rest,
        })
        .collect();
    write_csv(out, "taxonomy", &rows)?;
    let depth = taxonomy::depth_distribution(profiles);
    let rows: Vec<DepthRow> = depth
        .iter()
        .map(|c| DepthRow {
            layer: c.layer,
            retriever: c.retriever,
            mixer: c.mixer,
            reset: c.reset,
            dominant: c.dominant(),
        })
        .collect();
    write_csv(out, "depth", &rows)?;
    let bands: Vec<BandRow> = taxonomy::depth_bands(&depth)
        .into_iter()
        .map(|(band, dominant)| BandRow { band, dominant })
        .collect();
    write_csv(out, "depth_bands", &bands)?;
    Ok(depth)
}

pub fn taxonomy(a: &DumpArgs) -> Result<()> {
    let dump = read_dump(&a.dump)?;
    let thr: Thresholds = config_or_default(a.config.as_deref())?;
    let ns = grid(a.ns.as_deref(), dump.manifest.seq_len)?;
    let profiles = profiles(&dump, &ns, &thr)?;
    write_taxonomy(&a.out, &profiles)?;
    Ok(())
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct SparsifyConfig {
    thresholds: Thresholds,
    /// JSON {"layers": [[norm per head], ...]} for weight-magnitude ranking.
    weights: Option<PathBuf>,
    /// JSON {"Retriever": x, "Mixer": y, "Reset": z}; larger impact ranks first.
    ablation_impacts: Option<PathBuf>,
}

pub fn sparsify(a: &DumpArgs, method: &str, fraction: f64, seed: u64) -> Result<()> {
    let method = Method::parse(method, seed)?;
    let cfg: SparsifyConfig = config_or_default(a.config.as_deref())?;
    let dump = read_dump(&a.dump)?;
    let ns = grid(a.ns.as_deref(), dump.manifest.seq_len)?;
    let opts = RankOptions {
        priority: match &cfg.ablation_impacts {
            Some(p) => TypePriority::load(p)?,
            None => TypePriority::default(),
        },
        weights: cfg.weights.as_deref().map(WeightSidecar::load).transpose()?,
    };
    let thr = cfg.thresholds;
    let features = per_head(&dump, |s| {
        let p = taxonomy::profile_head(s, &ns, &thr)?;
        sparsify::head_features(s, &p)
    })?;
    let m = &dump.manifest;
    let ranking = sparsify::rank_heads(m.num_layers, m.num_heads, &features, method, &opts)?;
    let (plan, floored) = sparsify::emit_mask(&ranking, fraction)?;
    if floored {
        eprintln!("warning: keep fraction {fraction} rounds to zero heads; keeping one head per layer");
    }
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("mask.json"), plan.to_json() + "\n")?;
    Ok(())
}

#[derive(Serialize)]
struct Summary {
    model_name: String,
    num_layers: usize,
    num_heads: usize,
    seq_len: usize,
    head_dim: usize,
    ns: Vec<usize>,
    mean_precision_rmax: Vec<f64>,
    mean_recall_rmin: Vec<f64>,
    regime_counts: BTreeMap<Regime, usize>,
    depth_bands: BTreeMap<&'static str, Regime>,
    prevalence: Vec<PrevalenceSummary>,
    kappa: f64,
}

pub fn report(a: &DumpArgs, kappa: f64) -> Result<()> {
    check_kappa(kappa)?;
    let dump = read_dump(&a.dump)?;
    let m = dump.manifest.clone();
    let ns = grid(a.ns.as_deref(), m.seq_len)?;
    let (metrics, descriptors) = analyze_rows(&dump, &ns)?;
    write_csv(&a.out, "metrics", &metrics)?;
    write_csv(&a.out, "descriptors", &descriptors)?;
    let (fits, prev) = fit_rows(&dump, &FitConfig::default())?;
    write_csv(&a.out, "fits", &fits)?;
    write_csv(&a.out, "prevalence", &prev)?;
    write_csv(&a.out, "bounds", &dump_bound_rows(&dump, &ns, kappa)?)?;
    let thr: Thresholds = config_or_default(a.config.as_deref())?;
    let profiles = profiles(&dump, &ns, &thr)?;
    let depth = write_taxonomy(&a.out, &profiles)?;

    let mean_over = |n: usize, f: fn(&MetricRow) -> f64| {
        let v: Vec<f64> = metrics.iter().filter(|r| r.n == n).map(f).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let mut regime_counts: BTreeMap<Regime, usize> = Regime::ALL.iter().map(|&r| (r, 0)).collect();
    for p in &profiles {
        *regime_counts.get_mut(&p.regime).unwrap() += 1;
    }
    let summary = Summary {
        model_name: m.model_name,
        num_layers: m.num_layers,
        num_heads: m.num_heads,
        seq_len: m.seq_len,
        head_dim: m.head_dim,
        mean_precision_rmax: ns.iter().map(|&n| mean_over(n, |r| r.precision_rmax)).collect(),
        mean_recall_rmin: ns.iter().map(|&n| mean_over(n, |r| r.recall_rmin)).collect(),
        ns,
        regime_counts,
        depth_bands: taxonomy::depth_bands(&depth).into_iter().collect(),
        prevalence: prev
            .iter()
            .map(|p| PrevalenceSummary {
                layer: p.layer,
                prevalence: p.prevalence,
            })
            .collect(),
        kappa,
    };
    write_json(&a.out.join("summary.json"), &summary)
}
