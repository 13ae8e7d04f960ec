//! Deterministic artifact serialization: CSV and JSON writers/readers for
//! entropy curves, sweep matrices, curve fits, correlation tables,
//! perplexity reports, passkey grids, and per-position loss tables, plus a
//! native SVG line-plot renderer. Floats are written with shortest
//! round-trip formatting, so identical inputs always produce byte-identical
//! files.
//!
//! CSV dialect: comma-separated, one header line, `\n` line endings, no
//! quoting. Fields therefore must not contain commas or newlines; writers
//! reject labels that do.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::eval::{PasskeyGrid, PositionBucket, WindowEval};
use crate::probe::{CurveScope, EntropyCurve};
use crate::scale::{CorrelationReport, FitResult, SweepResult};

/// Shortest decimal string that parses back to exactly `v`.
fn fmt_f64(v: f64) -> Result<String> {
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("refusing to serialize {v}")));
    }
    Ok(format!("{v}"))
}

fn check_field(what: &'static str, s: &str) -> Result<()> {
    if s.contains(',') || s.contains('\n') || s.contains('\r') {
        return Err(Error::Param {
            name: what,
            why: format!("{s:?} contains a CSV delimiter"),
        });
    }
    Ok(())
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Splits CSV text into rows after validating the header line.
fn parse_csv(path: &Path, text: &str, header: &[&str]) -> Result<Vec<Vec<String>>> {
    let mut lines = text.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty CSV", path.display())))?;
    let expect = header.join(",");
    if first != expect {
        return Err(Error::Data(format!(
            "{}: header {first:?}, expected {expect:?}",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<String> = line.split(',').map(str::to_string).collect();
        if fields.len() != header.len() {
            return Err(Error::Data(format!(
                "{}: row {} has {} fields, expected {}",
                path.display(),
                i + 2,
                fields.len(),
                header.len()
            )));
        }
        rows.push(fields);
    }
    Ok(rows)
}

fn field<T: std::str::FromStr>(path: &Path, row: usize, name: &str, s: &str) -> Result<T> {
    s.parse().map_err(|_| {
        Error::Data(format!(
            "{}: row {row}: bad {name} value {s:?}",
            path.display()
        ))
    })
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn from_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_to_string(path)?)
        .map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// entropy curves

const ENTROPY_HEADER: [&str; 4] = ["position", "mean_entropy", "scope", "n"];

pub fn entropy_curve_csv(curve: &EntropyCurve) -> Result<String> {
    let mut out = String::from("position,mean_entropy,scope,n\n");
    let scope = curve.scope().to_string();
    for (&p, &h) in curve.positions().iter().zip(curve.mean_entropy()) {
        writeln!(out, "{p},{},{scope},{}", fmt_f64(h)?, curve.sample_count()).expect("string io");
    }
    Ok(out)
}

pub fn write_entropy_curve_csv(path: &Path, curve: &EntropyCurve) -> Result<()> {
    write_atomic(path, entropy_curve_csv(curve)?.as_bytes())
}

pub fn read_entropy_curve_csv(path: &Path) -> Result<EntropyCurve> {
    let text = read_to_string(path)?;
    let rows = parse_csv(path, &text, &ENTROPY_HEADER)?;
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no curve rows", path.display())));
    }
    let mut positions = Vec::with_capacity(rows.len());
    let mut values = Vec::with_capacity(rows.len());
    let scope: CurveScope = rows[0][2].parse()?;
    let n: usize = field(path, 2, "n", &rows[0][3])?;
    for (i, row) in rows.iter().enumerate() {
        positions.push(field(path, i + 2, "position", &row[0])?);
        values.push(field(path, i + 2, "mean_entropy", &row[1])?);
        if row[2] != rows[0][2] || row[3] != rows[0][3] {
            return Err(Error::Data(format!(
                "{}: row {}: mixed scope or sample count in one curve file",
                path.display(),
                i + 2
            )));
        }
    }
    EntropyCurve::new(positions, values, n, scope)
}

// ---------------------------------------------------------------------------
// sweep

const SWEEP_HEADER: [&str; 6] = [
    "position",
    "extension_ratio",
    "lambda",
    "lambda_sqrt_d",
    "log_ppl",
    "is_best",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub position: usize,
    pub extension_ratio: f64,
    pub lambda: f64,
    /// λ in √d units, i.e. λ·√d; 1.0 is the untouched default.
    pub lambda_sqrt_d: f64,
    pub log_ppl: f64,
    pub is_best: bool,
}

pub fn sweep_csv(sweep: &SweepResult) -> Result<String> {
    let mut out = String::from("position,extension_ratio,lambda,lambda_sqrt_d,log_ppl,is_best\n");
    let root = (sweep.d_head() as f64).sqrt();
    for (k, &p) in sweep.positions().iter().enumerate() {
        let (best_lambda, _) = sweep.best()[k];
        let s = fmt_f64(sweep.extension_ratio(p))?;
        for (g, &lambda) in sweep.lambda_grid().iter().enumerate() {
            writeln!(
                out,
                "{p},{s},{},{},{},{}",
                fmt_f64(lambda)?,
                fmt_f64(lambda * root)?,
                fmt_f64(sweep.log_ppl(k, g))?,
                u8::from(lambda == best_lambda)
            )
            .expect("string io");
        }
    }
    Ok(out)
}

pub fn write_sweep_csv(path: &Path, sweep: &SweepResult) -> Result<()> {
    write_atomic(path, sweep_csv(sweep)?.as_bytes())
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let text = read_to_string(path)?;
    let rows = parse_csv(path, &text, &SWEEP_HEADER)?;
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            let r = i + 2;
            Ok(SweepRow {
                position: field(path, r, "position", &row[0])?,
                extension_ratio: field(path, r, "extension_ratio", &row[1])?,
                lambda: field(path, r, "lambda", &row[2])?,
                lambda_sqrt_d: field(path, r, "lambda_sqrt_d", &row[3])?,
                log_ppl: field(path, r, "log_ppl", &row[4])?,
                is_best: field::<u8>(path, r, "is_best", &row[5])? != 0,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepBestEntry {
    pub position: usize,
    pub extension_ratio: f64,
    pub lambda: f64,
    pub log_ppl: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSummary {
    pub lambda_grid: Vec<f64>,
    pub train_len: usize,
    pub d_head: usize,
    pub sample_count: usize,
    pub best: Vec<SweepBestEntry>,
}

pub fn sweep_summary(sweep: &SweepResult) -> SweepSummary {
    SweepSummary {
        lambda_grid: sweep.lambda_grid().to_vec(),
        train_len: sweep.train_len(),
        d_head: sweep.d_head(),
        sample_count: sweep.sample_count(),
        best: sweep
            .positions()
            .iter()
            .zip(sweep.best())
            .map(|(&p, &(lambda, log_ppl))| SweepBestEntry {
                position: p,
                extension_ratio: sweep.extension_ratio(p),
                lambda,
                log_ppl,
            })
            .collect(),
    }
}

pub fn write_sweep_json(path: &Path, sweep: &SweepResult) -> Result<()> {
    write_atomic(path, to_json(&sweep_summary(sweep))?.as_bytes())
}

pub fn read_sweep_json(path: &Path) -> Result<SweepSummary> {
    from_json(path)
}

// ---------------------------------------------------------------------------
// curve fit

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitSummary {
    pub c: f64,
    pub r_squared: f64,
    pub s_lo: f64,
    pub s_hi: f64,
    pub n_points: usize,
    pub rendered: String,
}

pub fn fit_summary(fit: &FitResult) -> FitSummary {
    FitSummary {
        c: fit.c,
        r_squared: fit.r_squared,
        s_lo: fit.s_range.0,
        s_hi: fit.s_range.1,
        n_points: fit.n_points,
        rendered: fit.render(),
    }
}

pub fn write_fit_json(path: &Path, fit: &FitResult) -> Result<()> {
    write_atomic(path, to_json(&fit_summary(fit))?.as_bytes())
}

pub fn read_fit_json(path: &Path) -> Result<FitSummary> {
    from_json(path)
}

const FIT_POINTS_HEADER: [&str; 4] = ["extension_ratio", "lambda_sqrt_d", "fitted", "residual"];

/// The (s, λ·√d) points a fit consumed, with the fitted value and residual
/// at each point.
pub fn fit_points_csv(points: &[(f64, f64)], fit: &FitResult) -> Result<String> {
    let mut out = String::from("extension_ratio,lambda_sqrt_d,fitted,residual\n");
    for &(s, y) in points {
        let fitted = 1.0 + fit.c * s.ln();
        writeln!(
            out,
            "{},{},{},{}",
            fmt_f64(s)?,
            fmt_f64(y)?,
            fmt_f64(fitted)?,
            fmt_f64(y - fitted)?
        )
        .expect("string io");
    }
    Ok(out)
}

pub fn write_fit_points_csv(path: &Path, points: &[(f64, f64)], fit: &FitResult) -> Result<()> {
    write_atomic(path, fit_points_csv(points, fit)?.as_bytes())
}

pub fn read_fit_points_csv(path: &Path) -> Result<Vec<(f64, f64, f64, f64)>> {
    let text = read_to_string(path)?;
    let rows = parse_csv(path, &text, &FIT_POINTS_HEADER)?;
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            let r = i + 2;
            Ok((
                field(path, r, "extension_ratio", &row[0])?,
                field(path, r, "lambda_sqrt_d", &row[1])?,
                field(path, r, "fitted", &row[2])?,
                field(path, r, "residual", &row[3])?,
            ))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// scale/entropy correlation

const CORRELATION_HEADER: [&str; 4] = ["layer", "head", "lambda", "entropy"];

pub fn correlation_csv(report: &CorrelationReport) -> Result<String> {
    let mut out = String::from("layer,head,lambda,entropy\n");
    for row in &report.rows {
        writeln!(
            out,
            "{},{},{},{}",
            row.layer,
            row.head,
            fmt_f64(row.lambda)?,
            fmt_f64(row.entropy)?
        )
        .expect("string io");
    }
    Ok(out)
}

pub fn write_correlation_csv(path: &Path, report: &CorrelationReport) -> Result<()> {
    write_atomic(path, correlation_csv(report)?.as_bytes())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationRow {
    pub layer: usize,
    pub head: usize,
    pub lambda: f64,
    pub entropy: f64,
}

pub fn read_correlation_csv(path: &Path) -> Result<Vec<CorrelationRow>> {
    let text = read_to_string(path)?;
    let rows = parse_csv(path, &text, &CORRELATION_HEADER)?;
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            let r = i + 2;
            Ok(CorrelationRow {
                layer: field(path, r, "layer", &row[0])?,
                head: field(path, r, "head", &row[1])?,
                lambda: field(path, r, "lambda", &row[2])?,
                entropy: field(path, r, "entropy", &row[3])?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationSummary {
    pub position: usize,
    /// Spearman rank correlation per layer; null where a layer's scales or
    /// entropies have zero variance.
    pub per_layer_spearman: Vec<Option<f64>>,
}

pub fn write_correlation_json(path: &Path, report: &CorrelationReport) -> Result<()> {
    let summary = CorrelationSummary {
        position: report.position,
        per_layer_spearman: report.per_layer_spearman.clone(),
    };
    write_atomic(path, to_json(&summary)?.as_bytes())
}

pub fn read_correlation_json(path: &Path) -> Result<CorrelationSummary> {
    from_json(path)
}

// ---------------------------------------------------------------------------
// sliding-window perplexity report

const PPL_HEADER: [&str; 4] = ["context_len", "count", "sum_nll", "mean_nll"];

pub fn ppl_buckets_csv(eval: &WindowEval) -> Result<String> {
    let mut out = String::from("context_len,count,sum_nll,mean_nll\n");
    for b in &eval.buckets {
        writeln!(
            out,
            "{},{},{},{}",
            b.context_len,
            b.count,
            fmt_f64(b.sum_nll)?,
            fmt_f64(b.mean_nll())?
        )
        .expect("string io");
    }
    Ok(out)
}

pub fn write_ppl_buckets_csv(path: &Path, eval: &WindowEval) -> Result<()> {
    write_atomic(path, ppl_buckets_csv(eval)?.as_bytes())
}

pub fn read_ppl_buckets_csv(path: &Path) -> Result<Vec<PositionBucket>> {
    let text = read_to_string(path)?;
    let rows = parse_csv(path, &text, &PPL_HEADER)?;
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            let r = i + 2;
            Ok(PositionBucket {
                context_len: field(path, r, "context_len", &row[0])?,
                count: field(path, r, "count", &row[1])?,
                sum_nll: field(path, r, "sum_nll", &row[2])?,
            })
        })
        .collect()
}

/// Aggregate side of a perplexity report. The perplexity must be
/// recomputable from the bucket CSV: exp(Σ sum_nll / Σ count).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PplAggregate {
    pub window: usize,
    pub stride: usize,
    pub token_count: usize,
    pub scored: usize,
    pub total_nll: f64,
    pub mean_nll: f64,
    pub perplexity: f64,
    /// Provenance: model/scales identifiers, seeds. Sorted keys keep the
    /// serialization stable.
    pub meta: BTreeMap<String, String>,
}

pub fn ppl_aggregate(eval: &WindowEval, meta: BTreeMap<String, String>) -> PplAggregate {
    PplAggregate {
        window: eval.window,
        stride: eval.stride,
        token_count: eval.token_count,
        scored: eval.scored,
        total_nll: eval.total_nll,
        mean_nll: eval.mean_nll(),
        perplexity: eval.perplexity(),
        meta,
    }
}

pub fn write_ppl_json(
    path: &Path,
    eval: &WindowEval,
    meta: BTreeMap<String, String>,
) -> Result<()> {
    write_atomic(path, to_json(&ppl_aggregate(eval, meta))?.as_bytes())
}

pub fn read_ppl_json(path: &Path) -> Result<PplAggregate> {
    from_json(path)
}

// ---------------------------------------------------------------------------
// passkey grid

const PASSKEY_HEADER: [&str; 3] = ["context_length", "depth", "accuracy"];

pub fn passkey_csv(grid: &PasskeyGrid) -> Result<String> {
    let mut out = String::from("context_length,depth,accuracy\n");
    for (li, &len) in grid.lengths.iter().enumerate() {
        for (di, &depth) in grid.depths.iter().enumerate() {
            writeln!(
                out,
                "{len},{},{}",
                fmt_f64(depth)?,
                fmt_f64(grid.at(li, di))?
            )
            .expect("string io");
        }
    }
    Ok(out)
}

pub fn write_passkey_csv(path: &Path, grid: &PasskeyGrid) -> Result<()> {
    write_atomic(path, passkey_csv(grid)?.as_bytes())
}

pub fn read_passkey_csv(path: &Path) -> Result<Vec<(usize, f64, f64)>> {
    let text = read_to_string(path)?;
    let rows = parse_csv(path, &text, &PASSKEY_HEADER)?;
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            let r = i + 2;
            Ok((
                field(path, r, "context_length", &row[0])?,
                field(path, r, "depth", &row[1])?,
                field(path, r, "accuracy", &row[2])?,
            ))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PasskeySummary {
    pub lengths: Vec<usize>,
    pub keys_per_depth: usize,
    /// Mean accuracy over depths, one entry per tested length.
    pub mean_by_length: Vec<f64>,
    pub meta: BTreeMap<String, String>,
}

pub fn passkey_summary(grid: &PasskeyGrid, meta: BTreeMap<String, String>) -> PasskeySummary {
    PasskeySummary {
        lengths: grid.lengths.clone(),
        keys_per_depth: grid.keys_per_depth,
        mean_by_length: (0..grid.lengths.len())
            .map(|li| grid.mean_for_length(li))
            .collect(),
        meta,
    }
}

pub fn write_passkey_json(
    path: &Path,
    grid: &PasskeyGrid,
    meta: BTreeMap<String, String>,
) -> Result<()> {
    write_atomic(path, to_json(&passkey_summary(grid, meta))?.as_bytes())
}

pub fn read_passkey_json(path: &Path) -> Result<PasskeySummary> {
    from_json(path)
}

// ---------------------------------------------------------------------------
// per-position loss table (several scale regimes side by side)

/// Wide-form table: one position column, one loss column per labeled series.
pub fn position_nll_csv(positions: &[usize], series: &[(String, Vec<f64>)]) -> Result<String> {
    if series.is_empty() {
        return Err(Error::Param {
            name: "series",
            why: "no series to write".into(),
        });
    }
    let mut out = String::from("position");
    for (label, values) in series {
        check_field("series label", label)?;
        if values.len() != positions.len() {
            return Err(Error::Shape {
                op: "position_nll_csv",
                lhs: vec![positions.len()],
                rhs: vec![values.len()],
            });
        }
        out.push(',');
        out.push_str(label);
    }
    out.push('\n');
    for (i, &p) in positions.iter().enumerate() {
        write!(out, "{p}").expect("string io");
        for (_, values) in series {
            out.push(',');
            out.push_str(&fmt_f64(values[i])?);
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_position_nll_csv(
    path: &Path,
    positions: &[usize],
    series: &[(String, Vec<f64>)],
) -> Result<()> {
    write_atomic(path, position_nll_csv(positions, series)?.as_bytes())
}

#[allow(clippy::type_complexity)]
pub fn read_position_nll_csv(path: &Path) -> Result<(Vec<usize>, Vec<(String, Vec<f64>)>)> {
    let text = read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty CSV", path.display())))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"position") || cols.len() < 2 {
        return Err(Error::Data(format!(
            "{}: header {header:?}, expected position,<series>...",
            path.display()
        )));
    }
    let mut positions = Vec::new();
    let mut series: Vec<(String, Vec<f64>)> = cols[1..]
        .iter()
        .map(|label| (label.to_string(), Vec::new()))
        .collect();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Data(format!(
                "{}: row {} has {} fields, expected {}",
                path.display(),
                i + 2,
                fields.len(),
                cols.len()
            )));
        }
        positions.push(field(path, i + 2, "position", fields[0])?);
        for (j, (_, values)) in series.iter_mut().enumerate() {
            values.push(field(path, i + 2, cols[j + 1], fields[j + 1])?);
        }
    }
    Ok((positions, series))
}

// ---------------------------------------------------------------------------
// SVG line plots

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineStyle {
    Solid,
    Dashed,
}

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub style: LineStyle,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

const SVG_W: f64 = 720.0;
const SVG_H: f64 = 480.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 48.0;
const PALETTE: [&str; 6] = [
    "#3b6fb6", "#c23b3b", "#3c9d58", "#8a5fbe", "#d98032", "#767676",
];

/// Largest "nice" step ({1, 2, 2.5, 5}·10^k) that yields at most `max_ticks`
/// intervals over `range`.
fn nice_step(range: f64, max_ticks: usize) -> f64 {
    let raw = range / max_ticks as f64;
    let mag = 10f64.powf(raw.log10().floor());
    for mult in [1.0, 2.0, 2.5, 5.0, 10.0] {
        let step = mult * mag;
        if range / step <= max_ticks as f64 {
            return step;
        }
    }
    10.0 * mag
}

fn tick_label(v: f64, step: f64) -> String {
    let decimals = if step >= 1.0 {
        0
    } else {
        (-step.log10().floor() as i32).clamp(0, 6) as usize
    };
    let s = format!("{v:.decimals$}");
    // avoid the "-0" label
    if s.starts_with('-') && s.trim_start_matches(['-', '0', '.']).is_empty() {
        s[1..].to_string()
    } else {
        s
    }
}

fn ticks(lo: f64, hi: f64) -> (f64, Vec<f64>) {
    let step = nice_step(hi - lo, 6);
    let mut t = (lo / step).ceil() * step;
    // pull an exact zero out of rounding noise
    if t.abs() < step * 1e-9 {
        t = 0.0;
    }
    let mut out = Vec::new();
    while t <= hi + step * 1e-9 {
        out.push(t);
        t += step;
        if t.abs() < step * 1e-9 {
            t = 0.0;
        }
    }
    (step, out)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl LinePlot {
    /// Renders the plot to a standalone SVG document. Every series needs at
    /// least one finite point.
    pub fn render(&self) -> Result<String> {
        if self.series.is_empty() {
            return Err(Error::Param {
                name: "series",
                why: "plot has no series".into(),
            });
        }
        let mut x_lo = f64::INFINITY;
        let mut x_hi = f64::NEG_INFINITY;
        let mut y_lo = f64::INFINITY;
        let mut y_hi = f64::NEG_INFINITY;
        for s in &self.series {
            if s.points.is_empty() {
                return Err(Error::Param {
                    name: "series",
                    why: format!("series {:?} has no points", s.label),
                });
            }
            for &(x, y) in &s.points {
                if !x.is_finite() || !y.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "series {:?} contains ({x}, {y})",
                        s.label
                    )));
                }
                x_lo = x_lo.min(x);
                x_hi = x_hi.max(x);
                y_lo = y_lo.min(y);
                y_hi = y_hi.max(y);
            }
        }
        // pad degenerate and near-degenerate ranges so scaling stays finite
        let pad = |lo: &mut f64, hi: &mut f64| {
            let span = *hi - *lo;
            if span <= 0.0 {
                let w = lo.abs().max(1.0) * 0.1;
                *lo -= w;
                *hi += w;
            } else {
                *lo -= span * 0.05;
                *hi += span * 0.05;
            }
        };
        pad(&mut x_lo, &mut x_hi);
        pad(&mut y_lo, &mut y_hi);

        let plot_w = SVG_W - MARGIN_L - MARGIN_R;
        let plot_h = SVG_H - MARGIN_T - MARGIN_B;
        let sx = |x: f64| MARGIN_L + (x - x_lo) / (x_hi - x_lo) * plot_w;
        let sy = |y: f64| MARGIN_T + plot_h - (y - y_lo) / (y_hi - y_lo) * plot_h;

        let mut out = String::new();
        writeln!(
            out,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {SVG_W} {SVG_H}\" \
             font-family=\"sans-serif\" font-size=\"12\">"
        )
        .expect("string io");
        writeln!(out, "<rect width=\"{SVG_W}\" height=\"{SVG_H}\" fill=\"white\"/>").expect("string io");
        writeln!(
            out,
            "<text x=\"{:.2}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>",
            MARGIN_L + plot_w / 2.0,
            xml_escape(&self.title)
        )
        .expect("string io");

        let (x_step, x_ticks) = ticks(x_lo, x_hi);
        let (y_step, y_ticks) = ticks(y_lo, y_hi);
        for &t in &x_ticks {
            let x = sx(t);
            writeln!(
                out,
                "<line x1=\"{x:.2}\" y1=\"{:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"#dddddd\"/>",
                MARGIN_T,
                MARGIN_T + plot_h
            )
            .expect("string io");
            writeln!(
                out,
                "<text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
                MARGIN_T + plot_h + 16.0,
                tick_label(t, x_step)
            )
            .expect("string io");
        }
        for &t in &y_ticks {
            let y = sy(t);
            writeln!(
                out,
                "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"#dddddd\"/>",
                MARGIN_L,
                MARGIN_L + plot_w
            )
            .expect("string io");
            writeln!(
                out,
                "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>",
                MARGIN_L - 6.0,
                y + 4.0,
                tick_label(t, y_step)
            )
            .expect("string io");
        }
        writeln!(
            out,
            "<rect x=\"{MARGIN_L}\" y=\"{MARGIN_T}\" width=\"{plot_w}\" height=\"{plot_h}\" \
             fill=\"none\" stroke=\"#444444\"/>"
        )
        .expect("string io");
        writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
            MARGIN_L + plot_w / 2.0,
            SVG_H - 10.0,
            xml_escape(&self.x_label)
        )
        .expect("string io");
        writeln!(
            out,
            "<text x=\"16\" y=\"{:.2}\" text-anchor=\"middle\" \
             transform=\"rotate(-90 16 {:.2})\">{}</text>",
            MARGIN_T + plot_h / 2.0,
            MARGIN_T + plot_h / 2.0,
            xml_escape(&self.y_label)
        )
        .expect("string io");

        for (i, s) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let dash = match s.style {
                LineStyle::Solid => "",
                LineStyle::Dashed => " stroke-dasharray=\"6 4\"",
            };
            let points: Vec<String> = s
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            if points.len() == 1 {
                let (x, y) = s.points[0];
                writeln!(
                    out,
                    "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>",
                    sx(x),
                    sy(y)
                )
                .expect("string io");
            } else {
                writeln!(
                    out,
                    "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" \
                     stroke-width=\"1.5\"{dash}/>",
                    points.join(" ")
                )
                .expect("string io");
            }
        }
        for (i, s) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let y = MARGIN_T + 14.0 + 16.0 * i as f64;
            let dash = match s.style {
                LineStyle::Solid => "",
                LineStyle::Dashed => " stroke-dasharray=\"6 4\"",
            };
            writeln!(
                out,
                "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" \
                 stroke=\"{color}\" stroke-width=\"1.5\"{dash}/>",
                MARGIN_L + 8.0,
                MARGIN_L + 32.0
            )
            .expect("string io");
            writeln!(
                out,
                "<text x=\"{:.2}\" y=\"{:.2}\">{}</text>",
                MARGIN_L + 38.0,
                y + 4.0,
                xml_escape(&s.label)
            )
            .expect("string io");
        }
        writeln!(out, "</svg>").expect("string io");
        Ok(out)
    }
}

pub fn write_svg(path: &Path, plot: &LinePlot) -> Result<()> {
    write_atomic(path, plot.render()?.as_bytes())
}
