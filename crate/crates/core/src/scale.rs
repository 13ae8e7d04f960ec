//! Attention-temperature search: the uniform-scale grid sweep with
//! per-position optimum extraction, the one-parameter law fit
//! λ·√d = 1 + c·ln s, head-scale initialization and constrained gradient
//! tuning with the base model frozen, and the per-layer scale/entropy
//! correlation report.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{
    forward, lm_loss_on_tape, per_position_nll, register_model, Model, ModelConfig, ScaleVector,
    ScalesOnTape,
};
use crate::optim::{adamw_step, cosine_schedule, AdamWConfig, AdamWState};
use crate::tape::Tape;

/// Desk default: 21 uniform scales with λ·√d from 1.00 to 1.40 in steps of
/// 0.02.
pub fn default_lambda_grid(d_head: usize) -> Vec<f64> {
    let root = (d_head as f64).sqrt();
    (0..21).map(|k| (1.0 + 0.02 * k as f64) / root).collect()
}

/// Grid-sweep outcome: per-position log-PPL for every tested uniform scale,
/// plus the per-position argmin.
#[derive(Debug, Clone)]
pub struct SweepResult {
    lambda_grid: Vec<f64>,
    /// Scored 1-based target positions, 2..=L′.
    positions: Vec<usize>,
    train_len: usize,
    d_head: usize,
    /// Row-major [positions × grid]: mean NLL of each position under each λ.
    log_ppl: Vec<f64>,
    /// Per position: (best λ, its log-PPL), ties broken toward smaller λ.
    best: Vec<(f64, f64)>,
    sample_count: usize,
}

impl SweepResult {
    pub fn lambda_grid(&self) -> &[f64] {
        &self.lambda_grid
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn train_len(&self) -> usize {
        self.train_len
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn log_ppl(&self, pos_idx: usize, lambda_idx: usize) -> f64 {
        self.log_ppl[pos_idx * self.lambda_grid.len() + lambda_idx]
    }

    /// Extension ratio s = i/L for a scored position.
    pub fn extension_ratio(&self, position: usize) -> f64 {
        position as f64 / self.train_len as f64
    }

    pub fn best_at(&self, position: usize) -> Option<(f64, f64)> {
        let idx = self.positions.iter().position(|&p| p == position)?;
        Some(self.best[idx])
    }

    pub fn best(&self) -> &[(f64, f64)] {
        &self.best
    }

    /// Mean log-PPL of one grid scale over scored positions in
    /// (pos_lo, pos_hi].
    pub fn mean_log_ppl_over(
        &self,
        lambda_idx: usize,
        pos_lo: usize,
        pos_hi: usize,
    ) -> Option<f64> {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (k, &p) in self.positions.iter().enumerate() {
            if p > pos_lo && p <= pos_hi {
                sum += self.log_ppl(k, lambda_idx);
                count += 1;
            }
        }
        (count > 0).then(|| sum / count as f64)
    }
}

/// Index of the row minimum; ties go to the smaller (earlier) grid value.
fn argmin_tie_low(row: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v < row[best] {
            best = i;
        }
    }
    best
}

/// One evaluation pass per grid value: every valset sequence is forwarded at
/// length L′ under that uniform scale and per-position NLL is averaged over
/// sequences. Positions 2..=L′ are scored (position 1 has no context).
pub fn uniform_scale_sweep(
    model: &Model,
    valset: &[Vec<u16>],
    lambda_grid: &[f64],
    l_prime: usize,
) -> Result<SweepResult> {
    if lambda_grid.is_empty() {
        return Err(Error::Param {
            name: "lambda_grid",
            why: "empty scale grid".into(),
        });
    }
    if lambda_grid.iter().any(|l| !(*l > 0.0)) {
        return Err(Error::Param {
            name: "lambda_grid",
            why: "grid values must be positive".into(),
        });
    }
    if lambda_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Param {
            name: "lambda_grid",
            why: "grid values must be strictly ascending".into(),
        });
    }
    if l_prime < 2 {
        return Err(Error::Param {
            name: "l_prime",
            why: "target length must be at least 2".into(),
        });
    }
    if valset.is_empty() {
        return Err(Error::Param {
            name: "valset",
            why: "no evaluation sequences".into(),
        });
    }
    for (idx, seq) in valset.iter().enumerate() {
        if seq.len() < l_prime {
            return Err(Error::Data(format!(
                "sequence {idx} has {} tokens, sweep target length is {l_prime}",
                seq.len()
            )));
        }
    }

    let cfg = &model.config;
    let positions: Vec<usize> = (2..=l_prime).collect();
    let n_grid = lambda_grid.len();
    let mut log_ppl = vec![0.0f64; positions.len() * n_grid];
    for (g, &lambda) in lambda_grid.iter().enumerate() {
        let scales = ScaleVector::uniform(cfg.total_heads(), lambda, cfg.default_lambda())?;
        for seq in valset {
            let nlls = per_position_nll(model, &seq[..l_prime], &scales)?;
            debug_assert_eq!(nlls.len(), positions.len());
            for (k, nll) in nlls.iter().enumerate() {
                log_ppl[k * n_grid + g] += nll;
            }
        }
    }
    let n = valset.len() as f64;
    for v in &mut log_ppl {
        *v /= n;
    }
    let best = (0..positions.len())
        .map(|k| {
            let row = &log_ppl[k * n_grid..(k + 1) * n_grid];
            let b = argmin_tie_low(row);
            (lambda_grid[b], row[b])
        })
        .collect();
    Ok(SweepResult {
        lambda_grid: lambda_grid.to_vec(),
        positions,
        train_len: cfg.train_len,
        d_head: cfg.d_head,
        log_ppl,
        best,
        sample_count: valset.len(),
    })
}

/// Least-squares fit of the extension law.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub c: f64,
    pub r_squared: f64,
    /// Extension-ratio range the fit used.
    pub s_range: (f64, f64),
    pub n_points: usize,
}

impl FitResult {
    /// One-line rendering with c and R² at four decimals.
    pub fn render(&self) -> String {
        format!(
            "lambda * sqrt(d) = 1 + {:.4} * ln(s)  (R^2 = {:.4}, n = {}, s in [{:.2}, {:.2}])",
            self.c, self.r_squared, self.n_points, self.s_range.0, self.s_range.1
        )
    }
}

/// Fits c in y = 1 + c·ln s over (s, y = λ·√d) points with s inside
/// `s_range`, by least squares on the single coefficient. Needs at least two
/// points with s > 1; identical s values everywhere cannot pin a law in s.
pub fn fit_scale_curve(points: &[(f64, f64)], s_range: (f64, f64)) -> Result<FitResult> {
    if !(s_range.0 <= s_range.1) {
        return Err(Error::Param {
            name: "s_range",
            why: format!("invalid range [{}, {}]", s_range.0, s_range.1),
        });
    }
    let pts: Vec<(f64, f64)> = points
        .iter()
        .copied()
        .filter(|(s, _)| *s >= s_range.0 && *s <= s_range.1)
        .collect();
    if let Some((s, _)) = pts.iter().find(|(s, _)| !(*s > 0.0)) {
        return Err(Error::Param {
            name: "points",
            why: format!("extension ratio must be positive, got {s}"),
        });
    }
    if pts.iter().filter(|(s, _)| *s > 1.0).count() < 2 {
        return Err(Error::Param {
            name: "points",
            why: "need at least 2 points with extension ratio s > 1".into(),
        });
    }
    let s0 = pts[0].0;
    if pts.iter().all(|(s, _)| *s == s0) {
        return Err(Error::Data(
            "degenerate fit: all extension ratios are equal".into(),
        ));
    }

    let mut num = 0.0;
    let mut den = 0.0;
    for &(s, y) in &pts {
        let ls = s.ln();
        num += (y - 1.0) * ls;
        den += ls * ls;
    }
    let c = num / den;

    let mean_y = pts.iter().map(|(_, y)| y).sum::<f64>() / pts.len() as f64;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for &(s, y) in &pts {
        let r = y - (1.0 + c * s.ln());
        ss_res += r * r;
        ss_tot += (y - mean_y) * (y - mean_y);
    }
    let r_squared = if ss_tot == 0.0 {
        if ss_res <= 1e-18 {
            1.0
        } else {
            return Err(Error::Data(
                "degenerate fit: zero variance in scale values".into(),
            ));
        }
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok(FitResult {
        c,
        r_squared,
        s_range,
        n_points: pts.len(),
    })
}

/// Sweep points (s, best λ·√d) for positions beyond the training length,
/// ready for `fit_scale_curve`.
pub fn sweep_fit_points(sweep: &SweepResult) -> Vec<(f64, f64)> {
    let root = (sweep.d_head() as f64).sqrt();
    sweep
        .positions()
        .iter()
        .zip(sweep.best())
        .filter(|(&p, _)| p > sweep.train_len())
        .map(|(&p, &(lambda, _))| (sweep.extension_ratio(p), lambda * root))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// All heads at the sweep's best uniform scale for the target length.
    BestUniform,
    /// All heads at 1/√d (the no-initialization ablation).
    Default,
}

/// Starting ScaleVector for head tuning: a single scalar broadcast to all m
/// heads, chosen per `mode`.
pub fn init_head_scales(
    config: &ModelConfig,
    sweep: Option<&SweepResult>,
    l_prime: usize,
    mode: InitMode,
) -> Result<ScaleVector> {
    match mode {
        InitMode::Default => Ok(ScaleVector::default_for(config)),
        InitMode::BestUniform => {
            let sweep = sweep.ok_or(Error::Param {
                name: "sweep",
                why: "best-uniform initialization requires a sweep result".into(),
            })?;
            let (lambda, _) = sweep.best_at(l_prime).ok_or(Error::Param {
                name: "l_prime",
                why: format!("sweep does not cover target length {l_prime}"),
            })?;
            ScaleVector::uniform(config.total_heads(), lambda, config.default_lambda())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// Exact reverse-mode gradient through the frozen model.
    Reverse,
    /// Central finite differences per coordinate; cross-validation fallback,
    /// m+m forwards per step.
    FiniteDiff,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TuneConfig {
    pub steps: u64,
    pub lr: f64,
    pub warmup: u64,
    pub batch: usize,
    /// Enforce λ ≥ 1/√d by projection after every step.
    pub constraint: bool,
    pub grad_mode: GradMode,
    pub seed: u64,
}

impl Default for TuneConfig {
    /// 200 steps, lr 0.05, 20-step warmup, cosine to 0.1·lr, batch 4,
    /// constraint on.
    fn default() -> Self {
        TuneConfig {
            steps: 200,
            lr: 0.05,
            warmup: 20,
            batch: 4,
            constraint: true,
            grad_mode: GradMode::Reverse,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TuneResult {
    pub scales: ScaleVector,
    /// Batch loss at every step, recorded before the update.
    pub loss_log: Vec<f64>,
}

/// The tuning loop shared by head-scale search and synthetic objectives:
/// AdamW over the scale entries with warmup-cosine lr and, when the
/// constraint is on, projection onto λ ≥ floor after every step. The
/// objective returns (loss, dloss/dλ) for the current scales.
pub fn optimize_scales_with<F>(
    init: &ScaleVector,
    cfg: &TuneConfig,
    mut objective: F,
) -> Result<TuneResult>
where
    F: FnMut(u64, &ScaleVector) -> Result<(f64, Vec<f64>)>,
{
    if cfg.steps == 0 {
        return Ok(TuneResult {
            scales: init.clone(),
            loss_log: Vec::new(),
        });
    }
    let mut scales = init.clone();
    let mut tensor = scales.to_tensor();
    tensor.set_requires_grad(true);
    let mut opt = AdamWState::new(AdamWConfig::default(), &[tensor.len()]);
    let mut loss_log = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let (loss, grad) = objective(step, &scales)?;
        if grad.len() != tensor.len() {
            return Err(Error::Contract(format!(
                "objective returned {} gradient entries for {} scales",
                grad.len(),
                tensor.len()
            )));
        }
        loss_log.push(loss);
        tensor.zero_grad();
        tensor.grad_mut().copy_from_slice(&grad);
        let lr = cosine_schedule(step + 1, cfg.steps, cfg.warmup.min(cfg.steps), cfg.lr)?;
        adamw_step(&mut [("scales", &mut tensor)], &mut opt, lr)?;
        if tensor.data().iter().any(|v| !(*v > 0.0)) && !cfg.constraint {
            // unconstrained search can push a scale through zero; clamp to a
            // tiny positive value so the softmax stays defined
            for v in tensor.data_mut() {
                if !(*v > 1e-6) {
                    *v = 1e-6;
                }
            }
        }
        scales = ScaleVector::from_tensor(&tensor, init.constraint_floor())?;
        if cfg.constraint {
            scales.project_in_place();
            tensor.data_mut().copy_from_slice(scales.values());
        }
    }
    Ok(TuneResult { scales, loss_log })
}

/// Batch mean LM loss and its gradient with respect to the scales, by
/// reverse mode through the frozen model. Errors if any weight gradient
/// materializes (the frozen-model guarantee).
fn reverse_loss_and_grad(
    model: &Model,
    batch: &[&[u16]],
    scales: &ScaleVector,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let nodes = register_model(&mut tape, model);
    let mut tensor = scales.to_tensor();
    tensor.set_requires_grad(true);
    let scale_node = tape.leaf(&tensor);
    let mut losses = Vec::with_capacity(batch.len());
    for sample in batch {
        losses.push(lm_loss_on_tape(
            &mut tape,
            &nodes,
            &model.config,
            sample,
            &ScalesOnTape::Node(scale_node),
        )?);
    }
    let loss = tape.mean_of(&losses)?;
    let loss_value = tape.value(loss).data()[0];
    tape.backward(loss)?;
    for (node, (name, _)) in nodes.leaf_ids().iter().zip(model.named_tensors()) {
        if tape.grad(*node).is_some() {
            return Err(Error::Contract(format!(
                "frozen-model guarantee violated: gradient populated for {name}"
            )));
        }
    }
    let grad = tape
        .grad(scale_node)
        .ok_or_else(|| Error::Contract("scale gradient missing after backward".into()))?
        .to_vec();
    Ok((loss_value, grad))
}

/// Pure-forward batch mean LM loss under fixed scales.
fn forward_batch_loss(model: &Model, batch: &[&[u16]], scales: &ScaleVector) -> Result<f64> {
    let mut total = 0.0;
    for sample in batch {
        let nlls = per_position_nll(model, sample, scales)?;
        total += nlls.iter().sum::<f64>() / nlls.len() as f64;
    }
    Ok(total / batch.len() as f64)
}

/// Central finite differences on each scale coordinate, step 1e-4.
fn fd_loss_and_grad(
    model: &Model,
    batch: &[&[u16]],
    scales: &ScaleVector,
) -> Result<(f64, Vec<f64>)> {
    const H: f64 = 1e-4;
    let loss = forward_batch_loss(model, batch, scales)?;
    let floor = scales.constraint_floor();
    let mut grad = vec![0.0; scales.len()];
    for j in 0..scales.len() {
        let mut plus = scales.values().to_vec();
        plus[j] += H;
        let mut minus = scales.values().to_vec();
        minus[j] -= H;
        let lp = forward_batch_loss(model, batch, &ScaleVector::new(plus, floor)?)?;
        let lm = forward_batch_loss(model, batch, &ScaleVector::new(minus, floor)?)?;
        grad[j] = (lp - lm) / (2.0 * H);
    }
    Ok((loss, grad))
}

/// Tunes the m per-head scales on a frozen model: each step draws a seeded
/// batch from `dataset`, evaluates the LM loss and its scale gradient, and
/// applies one constrained AdamW update. Weights never move; any populated
/// weight gradient is a hard contract error.
pub fn tune_head_scales(
    model: &Model,
    dataset: &[Vec<u16>],
    init: &ScaleVector,
    cfg: &TuneConfig,
) -> Result<TuneResult> {
    if init.len() != model.config.total_heads() {
        return Err(Error::Shape {
            op: "tune_head_scales init",
            lhs: vec![init.len()],
            rhs: vec![model.config.total_heads()],
        });
    }
    if dataset.is_empty() {
        return Err(Error::Param {
            name: "dataset",
            why: "no tuning sequences".into(),
        });
    }
    if cfg.batch == 0 {
        return Err(Error::Param {
            name: "batch",
            why: "batch size must be positive".into(),
        });
    }
    if let Some((idx, seq)) = dataset.iter().enumerate().find(|(_, s)| s.len() < 2) {
        return Err(Error::Data(format!(
            "tuning sequence {idx} has {} tokens, need at least 2",
            seq.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let grad_mode = cfg.grad_mode;
    optimize_scales_with(init, cfg, move |_, scales| {
        let batch: Vec<&[u16]> = (0..cfg.batch)
            .map(|_| dataset[rng.gen_range(0..dataset.len())].as_slice())
            .collect();
        match grad_mode {
            GradMode::Reverse => reverse_loss_and_grad(model, &batch, scales),
            GradMode::FiniteDiff => fd_loss_and_grad(model, &batch, scales),
        }
    })
}

/// One head's converged entropy and searched scale.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadScaleEntropy {
    pub layer: usize,
    pub head: usize,
    pub lambda: f64,
    /// Mean attention entropy at the probed position over the valset.
    pub entropy: f64,
}

/// Per-head (entropy, λ) table with per-layer Spearman rank correlation;
/// a layer with zero variance in either variable is flagged None.
#[derive(Debug, Clone)]
pub struct CorrelationReport {
    pub position: usize,
    pub rows: Vec<HeadScaleEntropy>,
    pub per_layer_spearman: Vec<Option<f64>>,
}

/// Spearman rank correlation with average ranks on ties; None when either
/// side has zero rank variance.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let rx = ranks(x);
    let ry = ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx.sqrt() * vy.sqrt()))
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        // average rank for the tie group, 1-based
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Measures each head's mean attention entropy at `position` under the given
/// scales and correlates it with λ^(h) within each layer.
pub fn scale_entropy_correlation(
    model: &Model,
    scales: &ScaleVector,
    valset: &[Vec<u16>],
    position: usize,
) -> Result<CorrelationReport> {
    if position < 1 {
        return Err(Error::Param {
            name: "position",
            why: "positions are 1-based".into(),
        });
    }
    if valset.is_empty() {
        return Err(Error::Param {
            name: "valset",
            why: "no evaluation sequences".into(),
        });
    }
    if let Some((idx, seq)) = valset.iter().enumerate().find(|(_, s)| s.len() < position) {
        return Err(Error::Param {
            name: "position",
            why: format!(
                "position {position} beyond evaluated length {} of sequence {idx}",
                seq.len()
            ),
        });
    }
    let cfg = &model.config;
    let nh = cfg.n_heads_per_layer;
    let mut entropy = vec![0.0f64; cfg.total_heads()];
    for seq in valset {
        let (_, trace) = forward(model, &seq[..position], scales, true)?;
        let trace = trace.expect("trace requested");
        for l in 0..cfg.n_layers {
            for h in 0..nh {
                entropy[l * nh + h] += trace.entropy(l, h, position);
            }
        }
    }
    for e in &mut entropy {
        *e /= valset.len() as f64;
    }
    let rows: Vec<HeadScaleEntropy> = (0..cfg.n_layers)
        .flat_map(|l| {
            let entropy = &entropy;
            (0..nh).map(move |h| HeadScaleEntropy {
                layer: l,
                head: h,
                lambda: scales.get(l, h, nh),
                entropy: entropy[l * nh + h],
            })
        })
        .collect();
    let per_layer_spearman = (0..cfg.n_layers)
        .map(|l| {
            let es: Vec<f64> = rows[l * nh..(l + 1) * nh].iter().map(|r| r.entropy).collect();
            let ls: Vec<f64> = rows[l * nh..(l + 1) * nh].iter().map(|r| r.lambda).collect();
            spearman(&es, &ls)
        })
        .collect();
    Ok(CorrelationReport {
        position,
        rows,
        per_layer_spearman,
    })
}
