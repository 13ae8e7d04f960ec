//! Attention-entropy instrumentation: per-row entropy, dataset-averaged
//! entropy curves H̄_i, the ln i upper bound, and a slope-based inflection
//! detector for locating where a curve departs from its in-distribution
//! trend.

use crate::error::{Error, Result};
use crate::model::{forward, Model, ScaleVector};
use crate::tensor;

/// Which heads an entropy curve averages over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveScope {
    /// All heads of all layers.
    ModelAverage,
    Head { layer: usize, head: usize },
}

impl std::fmt::Display for CurveScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CurveScope::ModelAverage => write!(f, "model-average"),
            CurveScope::Head { layer, head } => write!(f, "layer{layer}.head{head}"),
        }
    }
}

impl std::str::FromStr for CurveScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "model-average" {
            return Ok(CurveScope::ModelAverage);
        }
        let parse = || -> Option<CurveScope> {
            let rest = s.strip_prefix("layer")?;
            let (layer, head) = rest.split_once(".head")?;
            Some(CurveScope::Head {
                layer: layer.parse().ok()?,
                head: head.parse().ok()?,
            })
        };
        parse().ok_or_else(|| Error::Data(format!("unrecognized curve scope {s:?}")))
    }
}

/// Mean attention entropy H̄_i (nats) at ascending 1-based query positions,
/// averaged over `sample_count` sequences and the heads in `scope`.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyCurve {
    positions: Vec<usize>,
    mean_entropy: Vec<f64>,
    sample_count: usize,
    scope: CurveScope,
}

impl EntropyCurve {
    pub fn new(
        positions: Vec<usize>,
        mean_entropy: Vec<f64>,
        sample_count: usize,
        scope: CurveScope,
    ) -> Result<Self> {
        if positions.len() != mean_entropy.len() {
            return Err(Error::Shape {
                op: "EntropyCurve",
                lhs: vec![positions.len()],
                rhs: vec![mean_entropy.len()],
            });
        }
        if positions.is_empty() {
            return Err(Error::Param {
                name: "positions",
                why: "empty curve".into(),
            });
        }
        if positions[0] < 1 || positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Param {
                name: "positions",
                why: "positions must be ≥ 1 and strictly increasing".into(),
            });
        }
        for (&i, &h) in positions.iter().zip(&mean_entropy) {
            let bound = (i as f64).ln();
            if !(h >= -1e-9 && h <= bound + 1e-9) {
                return Err(Error::Contract(format!(
                    "entropy {h} at position {i} violates 0 ≤ H ≤ ln {i} = {bound}"
                )));
            }
        }
        Ok(EntropyCurve {
            positions,
            mean_entropy,
            sample_count,
            scope,
        })
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn mean_entropy(&self) -> &[f64] {
        &self.mean_entropy
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn scope(&self) -> CurveScope {
        self.scope
    }
}

/// Entropy of one attention row in nats, with 0·ln 0 = 0. The row must be a
/// probability vector: entries ≥ 0, summing to 1 within 1e-6.
pub fn head_entropy(probs_row: &[f64]) -> Result<f64> {
    if probs_row.is_empty() {
        return Err(Error::Param {
            name: "probs_row",
            why: "empty probability row".into(),
        });
    }
    if let Some(bad) = probs_row.iter().find(|p| !(**p >= 0.0)) {
        return Err(Error::Contract(format!(
            "attention row entry {bad} is negative or NaN"
        )));
    }
    let sum: f64 = probs_row.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!(
            "attention row sums to {sum}, expected 1 ± 1e-6"
        )));
    }
    Ok(tensor::entropy_nats(probs_row))
}

/// Maximum possible attention entropy at query position i: ln i, attained by
/// the uniform row. Accepts fractional positions for plotting the continuous
/// bound.
pub fn entropy_upper_bound(i: f64) -> Result<f64> {
    if !(i >= 1.0) {
        return Err(Error::Param {
            name: "i",
            why: format!("position must be ≥ 1, got {i}"),
        });
    }
    Ok(i.ln())
}

/// 1-based probe grid: 1, 1+stride, 1+2·stride, …, always ending at `len`.
pub fn decimated_positions(len: usize, stride: usize) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::Param {
            name: "len",
            why: "cannot probe an empty sequence".into(),
        });
    }
    if stride == 0 {
        return Err(Error::Param {
            name: "stride",
            why: "stride must be ≥ 1".into(),
        });
    }
    let mut out: Vec<usize> = (1..=len).step_by(stride).collect();
    if *out.last().expect("nonempty") != len {
        out.push(len);
    }
    Ok(out)
}

/// H̄ at each requested position: the mean of per-row attention entropy over
/// the dataset's sequences and the heads in scope. Sequences are truncated
/// to the largest requested position (later tokens cannot affect earlier
/// rows); each must reach at least that far.
pub fn average_entropy_curve(
    model: &Model,
    dataset: &[Vec<u16>],
    scales: &ScaleVector,
    scope: CurveScope,
    positions: &[usize],
) -> Result<EntropyCurve> {
    if dataset.is_empty() {
        return Err(Error::Param {
            name: "dataset",
            why: "no sequences to average".into(),
        });
    }
    if positions.is_empty() {
        return Err(Error::Param {
            name: "positions",
            why: "no positions requested".into(),
        });
    }
    let cfg = &model.config;
    let heads: Vec<(usize, usize)> = match scope {
        CurveScope::ModelAverage => (0..cfg.n_layers)
            .flat_map(|l| (0..cfg.n_heads_per_layer).map(move |h| (l, h)))
            .collect(),
        CurveScope::Head { layer, head } => {
            if layer >= cfg.n_layers {
                return Err(Error::Index {
                    what: "layer",
                    got: layer,
                    limit: cfg.n_layers,
                });
            }
            if head >= cfg.n_heads_per_layer {
                return Err(Error::Index {
                    what: "head",
                    got: head,
                    limit: cfg.n_heads_per_layer,
                });
            }
            vec![(layer, head)]
        }
    };
    let max_pos = *positions.iter().max().expect("nonempty");
    for (idx, seq) in dataset.iter().enumerate() {
        if seq.len() < max_pos {
            return Err(Error::Data(format!(
                "sequence {idx} has {} tokens, largest requested position is {max_pos}",
                seq.len()
            )));
        }
    }

    let mut acc = vec![0.0f64; positions.len()];
    for seq in dataset {
        let (_, trace) = forward(model, &seq[..max_pos], scales, true)?;
        let trace = trace.expect("trace requested");
        for (k, &pos) in positions.iter().enumerate() {
            let mut s = 0.0;
            for &(l, h) in &heads {
                s += trace.entropy(l, h, pos);
            }
            acc[k] += s / heads.len() as f64;
        }
    }
    let n = dataset.len();
    for a in &mut acc {
        *a /= n as f64;
    }
    EntropyCurve::new(positions.to_vec(), acc, n, scope)
}

/// Inflection-detector knobs: `window` is a span in positions (not curve
/// points) for the trailing moving average of slopes; a point's smoothed
/// slope must exceed `tau` times the pre-L baseline to count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InflectionParams {
    pub window: usize,
    pub tau: f64,
}

impl Default for InflectionParams {
    fn default() -> Self {
        InflectionParams {
            window: 64,
            tau: 4.0,
        }
    }
}

/// Finds where a curve starts rising anomalously after the training length:
/// the smallest position > L whose trailing moving-average slope (over a
/// `window`-position span) strictly exceeds tau × baseline, where baseline
/// is the median slope over positions in [L/2, L] clamped to ≥ 0. Returns
/// None when the curve never breaks the threshold. Depends on slopes only,
/// so it is invariant to shifting the whole curve vertically.
pub fn find_inflection(
    positions: &[usize],
    values: &[f64],
    train_len: usize,
    params: InflectionParams,
) -> Result<Option<usize>> {
    if positions.len() != values.len() {
        return Err(Error::Shape {
            op: "find_inflection",
            lhs: vec![positions.len()],
            rhs: vec![values.len()],
        });
    }
    if train_len == 0 {
        return Err(Error::Param {
            name: "train_len",
            why: "train length must be positive".into(),
        });
    }
    if !(params.tau >= 0.0) {
        return Err(Error::Param {
            name: "tau",
            why: format!("threshold must be ≥ 0, got {}", params.tau),
        });
    }
    if params.window == 0 {
        return Err(Error::Param {
            name: "window",
            why: "window must be ≥ 1 position".into(),
        });
    }
    if positions.len() < 2 {
        return Err(Error::Data(
            "inflection detection needs at least 2 curve points".into(),
        ));
    }
    if positions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Param {
            name: "positions",
            why: "positions must be strictly increasing".into(),
        });
    }
    if *positions.last().expect("nonempty") <= train_len {
        return Err(Error::Data(format!(
            "curve ends at position {}, needs points beyond train length {train_len}",
            positions.last().expect("nonempty")
        )));
    }

    // slope k sits at the right end of segment k: positions[k+1]
    let slopes: Vec<f64> = positions
        .windows(2)
        .zip(values.windows(2))
        .map(|(p, v)| (v[1] - v[0]) / (p[1] - p[0]) as f64)
        .collect();
    let slope_pos = &positions[1..];

    let lo = train_len / 2;
    let mut baseline_slopes: Vec<f64> = slope_pos
        .iter()
        .zip(&slopes)
        .filter(|(&p, _)| p >= lo && p <= train_len)
        .map(|(_, &s)| s)
        .collect();
    if baseline_slopes.is_empty() {
        return Err(Error::Data(format!(
            "no curve segments end within the baseline range [{lo}, {train_len}]"
        )));
    }
    baseline_slopes.sort_by(|a, b| a.partial_cmp(b).expect("finite slopes"));
    let mid = baseline_slopes.len() / 2;
    let median = if baseline_slopes.len() % 2 == 1 {
        baseline_slopes[mid]
    } else {
        0.5 * (baseline_slopes[mid - 1] + baseline_slopes[mid])
    };
    // entropy and log-PPL curves can drift slightly downward in
    // distribution; a negative baseline would make every rise "anomalous"
    let baseline = median.max(0.0);

    for k in 0..slopes.len() {
        let p = slope_pos[k];
        if p <= train_len {
            continue;
        }
        let win_start = p.saturating_sub(params.window - 1);
        let mut sum = 0.0;
        let mut count = 0usize;
        for j in (0..=k).rev() {
            if slope_pos[j] < win_start {
                break;
            }
            sum += slopes[j];
            count += 1;
        }
        let smoothed = sum / count as f64;
        if smoothed > params.tau * baseline {
            return Ok(Some(p));
        }
    }
    Ok(None)
}
