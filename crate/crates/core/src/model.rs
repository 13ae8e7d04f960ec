//! Causal decoder-only transformer with a pluggable position scheme (NoPE or
//! RoPE) and a per-head attention temperature. Pre-norm blocks, RMS
//! normalization, gated feed-forward, no biases. Two forward paths share the
//! same kernels: a pure inference pass that can emit an attention-entropy
//! trace, and a tape-recorded pass for training and scale tuning.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{NodeId, ScaleRef, Tape};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PositionScheme {
    #[serde(rename = "nope")]
    NoPe,
    Rope { base: f64 },
}

impl PositionScheme {
    pub fn rope_default() -> Self {
        PositionScheme::Rope { base: 10000.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads_per_layer: usize,
    pub d_model: usize,
    /// Per-head width d; d_model = n_heads_per_layer · d_head.
    pub d_head: usize,
    pub vocab_size: usize,
    /// Max pretraining sequence length L. Evaluation may exceed it.
    pub train_len: usize,
    pub position_scheme: PositionScheme,
    pub seed: u64,
    /// Gated feed-forward inner width.
    pub d_ff: usize,
    /// Share the input embedding with the output projection.
    pub tie_embeddings: bool,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    /// Desk-scale default: 4 layers × 4 heads, d_model 128 (d_head 32),
    /// byte vocab 256, L=128, NoPE.
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads_per_layer: 4,
            d_model: 128,
            d_head: 32,
            vocab_size: 256,
            train_len: 128,
            position_scheme: PositionScheme::NoPe,
            seed: 42,
            d_ff: 256,
            tie_embeddings: false,
            norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0
            || self.n_heads_per_layer == 0
            || self.d_model == 0
            || self.vocab_size == 0
            || self.train_len == 0
            || self.d_ff == 0
        {
            return Err(Error::Config("all model dimensions must be nonzero".into()));
        }
        if self.d_model % self.n_heads_per_layer != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads_per_layer {}",
                self.d_model, self.n_heads_per_layer
            )));
        }
        if self.d_head * self.n_heads_per_layer != self.d_model {
            return Err(Error::Config(format!(
                "d_head {} × n_heads {} ≠ d_model {}",
                self.d_head, self.n_heads_per_layer, self.d_model
            )));
        }
        if matches!(self.position_scheme, PositionScheme::Rope { .. }) && self.d_head % 2 != 0 {
            return Err(Error::Config(format!(
                "RoPE requires even d_head, got {}",
                self.d_head
            )));
        }
        if let PositionScheme::Rope { base } = self.position_scheme {
            if !(base > 0.0) {
                return Err(Error::Config(format!("RoPE base must be > 0, got {base}")));
            }
        }
        if self.vocab_size > u16::MAX as usize + 1 {
            return Err(Error::Config(format!(
                "vocab_size {} exceeds token id range",
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// Total head count m = n_layers × n_heads_per_layer: the number of
    /// tunable temperature parameters.
    pub fn total_heads(&self) -> usize {
        self.n_layers * self.n_heads_per_layer
    }

    /// Conventional attention scale 1/√d, the constraint floor.
    pub fn default_lambda(&self) -> f64 {
        1.0 / (self.d_head as f64).sqrt()
    }

    /// Closed-form weight count; cross-checked against the checkpoint
    /// manifest by tests.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 4 * d * d + 3 * d * self.d_ff + 2 * d;
        let unembed = if self.tie_embeddings {
            0
        } else {
            d * self.vocab_size
        };
        self.vocab_size * d + self.n_layers * per_layer + d + unembed
    }
}

/// Per-head attention temperatures λ^(h), indexed (layer, head), plus the
/// focus-constraint floor 1/√d.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleVector {
    values: Vec<f64>,
    constraint_floor: f64,
}

impl ScaleVector {
    pub fn new(values: Vec<f64>, constraint_floor: f64) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Param {
                name: "scales",
                why: "empty scale vector".into(),
            });
        }
        if values.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Param {
                name: "scales",
                why: "scales must be positive".into(),
            });
        }
        Ok(ScaleVector {
            values,
            constraint_floor,
        })
    }

    /// All m entries at one value.
    pub fn uniform(m: usize, value: f64, constraint_floor: f64) -> Result<Self> {
        ScaleVector::new(vec![value; m], constraint_floor)
    }

    /// The pretraining default: every head at exactly 1/√d.
    pub fn default_for(config: &ModelConfig) -> Self {
        let lam = config.default_lambda();
        ScaleVector {
            values: vec![lam; config.total_heads()],
            constraint_floor: lam,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn constraint_floor(&self) -> f64 {
        self.constraint_floor
    }

    pub fn get(&self, layer: usize, head: usize, n_heads_per_layer: usize) -> f64 {
        self.values[layer * n_heads_per_layer + head]
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Element-wise max with the floor; idempotent.
    pub fn project_in_place(&mut self) {
        let floor = self.constraint_floor;
        for v in &mut self.values {
            *v = v.max(floor);
        }
    }

    pub fn satisfies_constraint(&self) -> bool {
        self.values.iter().all(|&v| v >= self.constraint_floor)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.values.len()], self.values.clone()).expect("scale tensor")
    }

    pub fn from_tensor(t: &Tensor, constraint_floor: f64) -> Result<Self> {
        ScaleVector::new(t.data().to_vec(), constraint_floor)
    }
}

/// Per-(layer, head, query position) attention-row entropy in nats, plus
/// full attention rows at explicitly requested probe positions.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    n_layers: usize,
    n_heads: usize,
    len: usize,
    entropies: Vec<f64>,
    probe_rows: Vec<ProbeRow>,
}

#[derive(Debug, Clone)]
pub struct ProbeRow {
    pub layer: usize,
    pub head: usize,
    /// 1-based query position.
    pub position: usize,
    pub row: Vec<f64>,
}

impl AttentionTrace {
    fn new(n_layers: usize, n_heads: usize, len: usize) -> Self {
        AttentionTrace {
            n_layers,
            n_heads,
            len,
            entropies: vec![0.0; n_layers * n_heads * len],
            probe_rows: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    /// Entropy of the attention row at 1-based query position.
    pub fn entropy(&self, layer: usize, head: usize, position: usize) -> f64 {
        debug_assert!(position >= 1 && position <= self.len);
        self.entropies[(layer * self.n_heads + head) * self.len + position - 1]
    }

    fn entropy_mut(&mut self, layer: usize, head: usize, idx0: usize) -> &mut f64 {
        &mut self.entropies[(layer * self.n_heads + head) * self.len + idx0]
    }

    pub fn probe_rows(&self) -> &[ProbeRow] {
        &self.probe_rows
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_norm: Tensor,
    pub wg: Tensor,
    pub wu: Tensor,
    pub wd: Tensor,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub tok_embed: Tensor,
    pub blocks: Vec<Block>,
    pub final_norm: Tensor,
    /// None when embeddings are tied; logits then use tok_embedᵀ.
    pub unembed: Option<Tensor>,
}

/// Deterministic scaled-normal initialization: same (config, seed) gives
/// bit-identical weights. Box–Muller over ChaCha8 keeps the byte stream
/// independent of external distribution crates.
pub fn init_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.d_model;
    let std = 0.02;
    // residual-stream output projections shrink with depth (stabilizes the
    // summed residual variance)
    let out_std = std / (2.0 * config.n_layers as f64).sqrt();

    let mut normal = |shape: Vec<usize>, sd: f64| -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| sd * box_muller(&mut rng)).collect();
        Tensor::new(shape, data).expect("init shape")
    };

    let tok_embed = normal(vec![config.vocab_size, d], std);
    let mut blocks = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        blocks.push(Block {
            attn_norm: Tensor::new(vec![d], vec![1.0; d])?,
            wq: normal(vec![d, d], std),
            wk: normal(vec![d, d], std),
            wv: normal(vec![d, d], std),
            wo: normal(vec![d, d], out_std),
            ffn_norm: Tensor::new(vec![d], vec![1.0; d])?,
            wg: normal(vec![d, config.d_ff], std),
            wu: normal(vec![d, config.d_ff], std),
            wd: normal(vec![config.d_ff, d], out_std),
        });
    }
    let final_norm = Tensor::new(vec![d], vec![1.0; d])?;
    let unembed = if config.tie_embeddings {
        None
    } else {
        Some(normal(vec![d, config.vocab_size], std))
    };
    Ok(Model {
        config: config.clone(),
        tok_embed,
        blocks,
        final_norm,
        unembed,
    })
}

fn box_muller(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

impl Model {
    /// Tensors in deterministic checkpoint order with "layer.index.component"
    /// naming.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![("embed.tok".into(), &self.tok_embed)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("layer.{i}.attn.norm"), &b.attn_norm));
            out.push((format!("layer.{i}.attn.wq"), &b.wq));
            out.push((format!("layer.{i}.attn.wk"), &b.wk));
            out.push((format!("layer.{i}.attn.wv"), &b.wv));
            out.push((format!("layer.{i}.attn.wo"), &b.wo));
            out.push((format!("layer.{i}.ffn.norm"), &b.ffn_norm));
            out.push((format!("layer.{i}.ffn.wg"), &b.wg));
            out.push((format!("layer.{i}.ffn.wu"), &b.wu));
            out.push((format!("layer.{i}.ffn.wd"), &b.wd));
        }
        out.push(("final.norm".into(), &self.final_norm));
        if let Some(u) = &self.unembed {
            out.push(("unembed".into(), u));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> =
            vec![("embed.tok".into(), &mut self.tok_embed)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("layer.{i}.attn.norm"), &mut b.attn_norm));
            out.push((format!("layer.{i}.attn.wq"), &mut b.wq));
            out.push((format!("layer.{i}.attn.wk"), &mut b.wk));
            out.push((format!("layer.{i}.attn.wv"), &mut b.wv));
            out.push((format!("layer.{i}.attn.wo"), &mut b.wo));
            out.push((format!("layer.{i}.ffn.norm"), &mut b.ffn_norm));
            out.push((format!("layer.{i}.ffn.wg"), &mut b.wg));
            out.push((format!("layer.{i}.ffn.wu"), &mut b.wu));
            out.push((format!("layer.{i}.ffn.wd"), &mut b.wd));
        }
        out.push(("final.norm".into(), &mut self.final_norm));
        if let Some(u) = &mut self.unembed {
            out.push(("unembed".into(), u));
        }
        out
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        for (_, t) in self.named_tensors_mut() {
            t.set_requires_grad(on);
        }
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Standard rotary rotation: dimension pair (2j, 2j+1) of the row at position
/// p rotated by angle p·θ^(−2j/d). Row r of x sits at positions[r].
pub fn rope_apply(x: &Tensor, positions: &[usize], base: f64) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    let (t, d) = match shape.as_slice() {
        [t, d] => (*t, *d),
        _ => {
            return Err(Error::Shape {
                op: "rope_apply",
                lhs: shape,
                rhs: vec![],
            })
        }
    };
    if d % 2 != 0 {
        return Err(Error::Config(format!("rope requires even width, got {d}")));
    }
    if positions.len() != t {
        return Err(Error::Shape {
            op: "rope_apply",
            lhs: vec![t, d],
            rhs: vec![positions.len()],
        });
    }
    let mut out = x.data().to_vec();
    let half = d / 2;
    for r in 0..t {
        let pos = positions[r] as f64;
        let row = &mut out[r * d..(r + 1) * d];
        for j in 0..half {
            let ang = pos * base.powf(-2.0 * j as f64 / d as f64);
            let (sin, cos) = ang.sin_cos();
            let (x0, x1) = (row[2 * j], row[2 * j + 1]);
            row[2 * j] = x0 * cos - x1 * sin;
            row[2 * j + 1] = x0 * sin + x1 * cos;
        }
    }
    Tensor::new(vec![t, d], out)
}

/// One attention head over an i-token prefix: probs row i is the temperature
/// softmax of λ·(q_i·k_j) over j ≤ i (RoPE rotating q,k first when active);
/// out = probs·v. Returns (out[i×d], probs[i×i] lower-triangular).
pub fn attention_head(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    lambda: f64,
    scheme: PositionScheme,
    pos_offset: usize,
) -> Result<(Tensor, Tensor)> {
    if !(lambda > 0.0) {
        return Err(Error::Param {
            name: "lambda",
            why: format!("must be > 0, got {lambda}"),
        });
    }
    if q.shape() != k.shape() || q.shape() != v.shape() || q.shape().len() != 2 {
        return Err(Error::Shape {
            op: "attention_head",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    let (t, d) = (q.shape()[0], q.shape()[1]);
    let positions: Vec<usize> = (0..t).map(|r| pos_offset + r).collect();
    let (q_rot, k_rot) = match scheme {
        PositionScheme::NoPe => (q.clone(), k.clone()),
        PositionScheme::Rope { base } => (
            rope_apply(q, &positions, base)?,
            rope_apply(k, &positions, base)?,
        ),
    };
    let mut probs = Tensor::zeros(vec![t, t]);
    {
        let mut scores = vec![0.0; t * t];
        tensor::scores_lower_into(&mut scores, q_rot.data(), k_rot.data(), t, d);
        for i in 0..t {
            let src = &scores[i * t..i * t + i + 1];
            let dst = &mut probs.data_mut()[i * t..i * t + i + 1];
            tensor::softmax_temp_into(dst, src, lambda);
        }
    }
    let mut out = Tensor::zeros(vec![t, d]);
    tensor::weighted_sum_lower_into(out.data_mut(), probs.data(), v.data(), t, d);
    Ok((out, probs))
}

/// What the inference pass should record.
#[derive(Debug, Clone, Default)]
pub struct TraceSpec {
    pub entropies: bool,
    /// 1-based query positions whose full attention rows are kept.
    pub probe_positions: Vec<usize>,
}

impl TraceSpec {
    pub fn entropies_only() -> Self {
        TraceSpec {
            entropies: true,
            probe_positions: Vec::new(),
        }
    }

    fn active(&self) -> bool {
        self.entropies || !self.probe_positions.is_empty()
    }
}

/// Pure inference forward. Causal: logits at position t depend only on
/// tokens 1..t. T may exceed train_len; that is the point.
pub fn forward(
    model: &Model,
    tokens: &[u16],
    scales: &ScaleVector,
    trace: bool,
) -> Result<(Tensor, Option<AttentionTrace>)> {
    let spec = if trace {
        TraceSpec::entropies_only()
    } else {
        TraceSpec::default()
    };
    forward_traced(model, tokens, scales, &spec)
}

pub fn forward_traced(
    model: &Model,
    tokens: &[u16],
    scales: &ScaleVector,
    spec: &TraceSpec,
) -> Result<(Tensor, Option<AttentionTrace>)> {
    let cfg = &model.config;
    let t = tokens.len();
    if t == 0 {
        return Err(Error::Param {
            name: "tokens",
            why: "empty sequence".into(),
        });
    }
    if scales.len() != cfg.total_heads() {
        return Err(Error::Shape {
            op: "forward scales",
            lhs: vec![scales.len()],
            rhs: vec![cfg.total_heads()],
        });
    }
    let d = cfg.d_model;
    let dh = cfg.d_head;
    let nh = cfg.n_heads_per_layer;
    let v = cfg.vocab_size;

    let mut x = vec![0.0; t * d];
    for (r, &id) in tokens.iter().enumerate() {
        if id as usize >= v {
            return Err(Error::Index {
                what: "token id",
                got: id as usize,
                limit: v,
            });
        }
        x[r * d..(r + 1) * d].copy_from_slice(&model.tok_embed.data()[id as usize * d..(id as usize + 1) * d]);
    }

    let mut trace_out = if spec.active() {
        Some(AttentionTrace::new(cfg.n_layers, nh, t))
    } else {
        None
    };

    // reused buffers
    let mut xn = vec![0.0; t * d];
    let mut qkv = vec![vec![0.0; t * d], vec![0.0; t * d], vec![0.0; t * d]];
    let mut head_in = vec![0.0; t * dh];
    let mut head_q = vec![0.0; t * dh];
    let mut head_k = vec![0.0; t * dh];
    let mut scores = vec![0.0; t * t];
    let mut concat = vec![0.0; t * d];
    let mut attn_out = vec![0.0; t * d];
    let mut ffn_g = vec![0.0; t * cfg.d_ff];
    let mut ffn_u = vec![0.0; t * cfg.d_ff];
    let mut ffn_out = vec![0.0; t * d];

    for (layer, block) in model.blocks.iter().enumerate() {
        rmsnorm_rows(&mut xn, &x, block.attn_norm.data(), t, d, cfg.norm_eps);
        for (buf, w) in qkv.iter_mut().zip([&block.wq, &block.wk, &block.wv]) {
            buf.iter_mut().for_each(|z| *z = 0.0);
            tensor::mm_into(buf, &xn, w.data(), t, d, d);
        }
        concat.iter_mut().for_each(|z| *z = 0.0);
        for h in 0..nh {
            let lambda = scales.get(layer, h, nh);
            copy_head_cols(&mut head_q, &qkv[0], t, d, h * dh, dh);
            copy_head_cols(&mut head_k, &qkv[1], t, d, h * dh, dh);
            if let PositionScheme::Rope { base } = cfg.position_scheme {
                crate::tape::rope_rotate(&mut head_q, t, dh, base, 0, false);
                crate::tape::rope_rotate(&mut head_k, t, dh, base, 0, false);
            }
            scores.iter_mut().for_each(|z| *z = 0.0);
            tensor::scores_lower_into(&mut scores, &head_q, &head_k, t, dh);
            // softmax rows in place; scores becomes probs
            for i in 0..t {
                let row = &mut scores[i * t..i * t + i + 1];
                let copy: Vec<f64> = row.to_vec();
                tensor::softmax_temp_into(row, &copy, lambda);
            }
            if let Some(tr) = trace_out.as_mut() {
                if spec.entropies {
                    for i in 0..t {
                        *tr.entropy_mut(layer, h, i) =
                            tensor::entropy_nats(&scores[i * t..i * t + i + 1]);
                    }
                }
                for &pos in &spec.probe_positions {
                    if pos >= 1 && pos <= t {
                        tr.probe_rows.push(ProbeRow {
                            layer,
                            head: h,
                            position: pos,
                            row: scores[(pos - 1) * t..(pos - 1) * t + pos].to_vec(),
                        });
                    }
                }
            }
            copy_head_cols(&mut head_in, &qkv[2], t, d, h * dh, dh);
            let mut head_out = vec![0.0; t * dh];
            tensor::weighted_sum_lower_into(&mut head_out, &scores, &head_in, t, dh);
            for r in 0..t {
                concat[r * d + h * dh..r * d + (h + 1) * dh]
                    .copy_from_slice(&head_out[r * dh..(r + 1) * dh]);
            }
        }
        attn_out.iter_mut().for_each(|z| *z = 0.0);
        tensor::mm_into(&mut attn_out, &concat, block.wo.data(), t, d, d);
        for (xi, ai) in x.iter_mut().zip(&attn_out) {
            *xi += ai;
        }

        rmsnorm_rows(&mut xn, &x, block.ffn_norm.data(), t, d, cfg.norm_eps);
        ffn_g.iter_mut().for_each(|z| *z = 0.0);
        ffn_u.iter_mut().for_each(|z| *z = 0.0);
        tensor::mm_into(&mut ffn_g, &xn, block.wg.data(), t, d, cfg.d_ff);
        tensor::mm_into(&mut ffn_u, &xn, block.wu.data(), t, d, cfg.d_ff);
        for (g, u) in ffn_g.iter_mut().zip(&ffn_u) {
            let s = 1.0 / (1.0 + (-*g).exp());
            *g = *g * s * u;
        }
        ffn_out.iter_mut().for_each(|z| *z = 0.0);
        tensor::mm_into(&mut ffn_out, &ffn_g, block.wd.data(), t, cfg.d_ff, d);
        for (xi, fi) in x.iter_mut().zip(&ffn_out) {
            *xi += fi;
        }
    }

    rmsnorm_rows(&mut xn, &x, model.final_norm.data(), t, d, cfg.norm_eps);
    let mut logits = Tensor::zeros(vec![t, v]);
    match &model.unembed {
        Some(u) => tensor::mm_into(logits.data_mut(), &xn, u.data(), t, d, v),
        None => tensor::mm_bt_into(logits.data_mut(), &xn, model.tok_embed.data(), t, d, v),
    }
    logits.assert_finite("forward logits")?;
    Ok((logits, trace_out))
}

fn rmsnorm_rows(out: &mut [f64], x: &[f64], gain: &[f64], t: usize, d: usize, eps: f64) {
    for r in 0..t {
        let row = &x[r * d..(r + 1) * d];
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let ir = 1.0 / (ms + eps).sqrt();
        let dst = &mut out[r * d..(r + 1) * d];
        for ((o, &xv), &g) in dst.iter_mut().zip(row).zip(gain) {
            *o = xv * ir * g;
        }
    }
}

fn copy_head_cols(dst: &mut [f64], src: &[f64], t: usize, d: usize, start: usize, len: usize) {
    for r in 0..t {
        dst[r * len..(r + 1) * len].copy_from_slice(&src[r * d + start..r * d + start + len]);
    }
}

/// Per-token NLL of each position ≥ 1 predicted from its prefix:
/// out[i] = −log p(tokens[i] | tokens[..i]), length T−1.
pub fn per_position_nll(model: &Model, tokens: &[u16], scales: &ScaleVector) -> Result<Vec<f64>> {
    if tokens.len() < 2 {
        return Err(Error::Param {
            name: "tokens",
            why: "need at least 2 tokens to score".into(),
        });
    }
    let (logits, _) = forward(model, &tokens[..tokens.len() - 1], scales, false)?;
    Ok((1..tokens.len())
        .map(|i| tensor::nll_row(logits.row(i - 1), tokens[i] as usize))
        .collect())
}

/// Weight-leaf handles for a model registered on a tape.
pub struct ModelNodes {
    pub tok_embed: NodeId,
    pub blocks: Vec<BlockNodes>,
    pub final_norm: NodeId,
    pub unembed: Option<NodeId>,
}

pub struct BlockNodes {
    pub attn_norm: NodeId,
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
    pub ffn_norm: NodeId,
    pub wg: NodeId,
    pub wu: NodeId,
    pub wd: NodeId,
}

impl ModelNodes {
    /// Leaf ids in the same order as `Model::named_tensors`.
    pub fn leaf_ids(&self) -> Vec<NodeId> {
        let mut ids = vec![self.tok_embed];
        for b in &self.blocks {
            ids.extend([
                b.attn_norm, b.wq, b.wk, b.wv, b.wo, b.ffn_norm, b.wg, b.wu, b.wd,
            ]);
        }
        ids.push(self.final_norm);
        if let Some(u) = self.unembed {
            ids.push(u);
        }
        ids
    }
}

/// Copies every weight onto the tape as a leaf; gradient participation
/// follows each tensor's requires_grad flag (all-on for pretraining, all-off
/// for frozen-model scale tuning).
pub fn register_model(tape: &mut Tape, model: &Model) -> ModelNodes {
    ModelNodes {
        tok_embed: tape.leaf(&model.tok_embed),
        blocks: model
            .blocks
            .iter()
            .map(|b| BlockNodes {
                attn_norm: tape.leaf(&b.attn_norm),
                wq: tape.leaf(&b.wq),
                wk: tape.leaf(&b.wk),
                wv: tape.leaf(&b.wv),
                wo: tape.leaf(&b.wo),
                ffn_norm: tape.leaf(&b.ffn_norm),
                wg: tape.leaf(&b.wg),
                wu: tape.leaf(&b.wu),
                wd: tape.leaf(&b.wd),
            })
            .collect(),
        final_norm: tape.leaf(&model.final_norm),
        unembed: model.unembed.as_ref().map(|u| tape.leaf(u)),
    }
}

/// Attention temperatures for a tape forward: fixed values, or one tunable
/// [m] leaf.
pub enum ScalesOnTape<'a> {
    Const(&'a ScaleVector),
    Node(NodeId),
}

impl ScalesOnTape<'_> {
    fn reference(&self, tape: &Tape, layer: usize, head: usize, nh: usize) -> Result<ScaleRef> {
        match self {
            ScalesOnTape::Const(sv) => Ok(ScaleRef::Const(sv.get(layer, head, nh))),
            ScalesOnTape::Node(node) => {
                let m = tape.value(*node).len();
                let index = layer * nh + head;
                if index >= m {
                    return Err(Error::Index {
                        what: "scale index",
                        got: index,
                        limit: m,
                    });
                }
                Ok(ScaleRef::Param { node: *node, index })
            }
        }
    }
}

/// Tape-recorded forward producing logits [T×V]. Mirrors `forward` exactly
/// (same kernels, same evaluation order), which unit tests pin.
pub fn forward_on_tape(
    tape: &mut Tape,
    nodes: &ModelNodes,
    config: &ModelConfig,
    tokens: &[u16],
    scales: &ScalesOnTape,
) -> Result<NodeId> {
    let dh = config.d_head;
    let nh = config.n_heads_per_layer;
    let mut x = tape.embed(nodes.tok_embed, tokens)?;
    for (layer, bn) in nodes.blocks.iter().enumerate() {
        let xn = tape.rms_norm(x, bn.attn_norm, config.norm_eps)?;
        let q_all = tape.matmul(xn, bn.wq)?;
        let k_all = tape.matmul(xn, bn.wk)?;
        let v_all = tape.matmul(xn, bn.wv)?;
        let mut head_outs = Vec::with_capacity(nh);
        for h in 0..nh {
            let mut q = tape.slice_cols(q_all, h * dh, dh)?;
            let mut k = tape.slice_cols(k_all, h * dh, dh)?;
            let v = tape.slice_cols(v_all, h * dh, dh)?;
            if let PositionScheme::Rope { base } = config.position_scheme {
                q = tape.rope(q, base, 0)?;
                k = tape.rope(k, base, 0)?;
            }
            let scores = tape.scores_lower(q, k)?;
            let scale_ref = scales.reference(tape, layer, h, nh)?;
            let probs = tape.causal_softmax_scaled(scores, scale_ref)?;
            head_outs.push(tape.attn_weighted_sum(probs, v)?);
        }
        let concat = tape.concat_cols(&head_outs)?;
        let attn = tape.matmul(concat, bn.wo)?;
        x = tape.add(x, attn)?;

        let xn2 = tape.rms_norm(x, bn.ffn_norm, config.norm_eps)?;
        let gate = tape.matmul(xn2, bn.wg)?;
        let up = tape.matmul(xn2, bn.wu)?;
        let act = tape.silu(gate)?;
        let gated = tape.mul(act, up)?;
        let down = tape.matmul(gated, bn.wd)?;
        x = tape.add(x, down)?;
    }
    let xn = tape.rms_norm(x, nodes.final_norm, config.norm_eps)?;
    match nodes.unembed {
        Some(u) => tape.matmul(xn, u),
        None => tape.matmul_bt(xn, nodes.tok_embed),
    }
}

/// Next-token language-model loss of one sample: mean NLL of sample[1..]
/// predicted from prefixes of sample[..len−1].
pub fn lm_loss_on_tape(
    tape: &mut Tape,
    nodes: &ModelNodes,
    config: &ModelConfig,
    sample: &[u16],
    scales: &ScalesOnTape,
) -> Result<NodeId> {
    if sample.len() < 2 {
        return Err(Error::Param {
            name: "sample",
            why: "need at least 2 tokens for a next-token loss".into(),
        });
    }
    let inputs = &sample[..sample.len() - 1];
    let targets = &sample[1..];
    let logits = forward_on_tape(tape, nodes, config, inputs, scales)?;
    tape.cross_entropy_rows(logits, targets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads_per_layer: 2,
            d_model: 16,
            d_head: 8,
            vocab_size: 32,
            train_len: 16,
            d_ff: 24,
            seed: 7,
            ..ModelConfig::default()
        }
    }

    fn rand_tokens(n: usize, vocab: u16, seed: u64) -> Vec<u16> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(0..vocab)).collect()
    }

    #[test]
    fn same_seed_same_weights_different_seed_differs() {
        let cfg = tiny_config();
        let m1 = init_model(&cfg).unwrap();
        let m2 = init_model(&cfg).unwrap();
        for ((_, a), (_, b)) in m1.named_tensors().iter().zip(m2.named_tensors()) {
            assert_eq!(a.data(), b.data());
        }
        let cfg2 = ModelConfig {
            seed: 8,
            ..cfg.clone()
        };
        let m3 = init_model(&cfg2).unwrap();
        assert_ne!(m1.tok_embed.data(), m3.tok_embed.data());
    }

    #[test]
    fn param_count_matches_closed_form() {
        let cfg = ModelConfig::default();
        let model = init_model(&cfg).unwrap();
        // V·d + n_layers·(4d² + 3·d·d_ff + 2d) + d + d·V, untied
        let expect = 256 * 128 + 4 * (4 * 128 * 128 + 3 * 128 * 256 + 2 * 128) + 128 + 128 * 256;
        assert_eq!(cfg.param_count(), expect);
        assert_eq!(model.param_count(), expect);
        let tied = ModelConfig {
            tie_embeddings: true,
            ..cfg
        };
        assert_eq!(tied.param_count(), expect - 128 * 256);
    }

    #[test]
    fn config_rejects_bad_divisibility() {
        let cfg = ModelConfig {
            n_heads_per_layer: 3,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            d_head: 16,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn reference_scale_head_count_is_704() {
        // 22 layers × 32 heads: the tunable-parameter count at reference scale.
        let cfg = ModelConfig {
            n_layers: 22,
            n_heads_per_layer: 32,
            d_model: 2048,
            d_head: 64,
            ..ModelConfig::default()
        };
        assert_eq!(cfg.total_heads(), 704);
    }

    #[test]
    fn attention_single_token_is_identity_prob() {
        let q = Tensor::new(vec![1, 4], vec![0.3, -0.5, 0.9, 0.1]).unwrap();
        let k = Tensor::new(vec![1, 4], vec![1.0, 2.0, -1.0, 0.0]).unwrap();
        let v = Tensor::new(vec![1, 4], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        for scheme in [PositionScheme::NoPe, PositionScheme::rope_default()] {
            for lambda in [0.1, 1.0, 3.0] {
                let (out, probs) = attention_head(&q, &k, &v, lambda, scheme, 0).unwrap();
                assert_eq!(probs.data(), &[1.0]);
                assert_eq!(out.data(), v.data());
            }
        }
    }

    #[test]
    fn attention_equal_keys_gives_uniform_rows() {
        let t = 5;
        let q = Tensor::new(vec![t, 2], (0..t * 2).map(|i| i as f64 * 0.3).collect()).unwrap();
        let k = Tensor::new(vec![t, 2], vec![0.7; t * 2]).unwrap();
        let v = Tensor::new(vec![t, 2], (0..t * 2).map(|i| i as f64).collect()).unwrap();
        let (_, probs) = attention_head(&q, &k, &v, 2.5, PositionScheme::NoPe, 0).unwrap();
        for i in 0..t {
            for j in 0..=i {
                assert!((probs.at(i, j) - 1.0 / (i + 1) as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_q_scaling_cancels_lambda() {
        // scaling q by c>0 with λ/c reproduces baseline probs exactly
        let t = 4;
        let d = 3;
        let mk = |seed: u64| {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            Tensor::new(
                vec![t, d],
                (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap()
        };
        let (q, k, v) = (mk(1), mk(2), mk(3));
        let c = 2.5;
        let q_scaled = Tensor::new(
            vec![t, d],
            q.data().iter().map(|x| x * c).collect(),
        )
        .unwrap();
        let (_, p1) = attention_head(&q, &k, &v, 0.8, PositionScheme::NoPe, 0).unwrap();
        let (_, p2) = attention_head(&q_scaled, &k, &v, 0.8 / c, PositionScheme::NoPe, 0).unwrap();
        for (a, b) in p1.data().iter().zip(p2.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rope_relative_position_property() {
        // rope(q,m)·rope(k,n) == rope(q,m+t)·rope(k,n+t) within 1e-9
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let d = 8;
        for _ in 0..20 {
            let q = Tensor::new(vec![1, d], (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap();
            let k = Tensor::new(vec![1, d], (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap();
            let m = rng.gen_range(0..50usize);
            let n = rng.gen_range(0..50usize);
            let shift = rng.gen_range(0..100usize);
            let dot = |a: &Tensor, b: &Tensor| -> f64 {
                a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
            };
            let base = 10000.0;
            let d1 = dot(
                &rope_apply(&q, &[m], base).unwrap(),
                &rope_apply(&k, &[n], base).unwrap(),
            );
            let d2 = dot(
                &rope_apply(&q, &[m + shift], base).unwrap(),
                &rope_apply(&k, &[n + shift], base).unwrap(),
            );
            assert!((d1 - d2).abs() < 1e-9, "{d1} vs {d2}");
        }
    }

    #[test]
    fn forward_prefix_consistency_both_schemes() {
        for scheme in [PositionScheme::NoPe, PositionScheme::rope_default()] {
            let cfg = ModelConfig {
                position_scheme: scheme,
                ..tiny_config()
            };
            let model = init_model(&cfg).unwrap();
            let scales = ScaleVector::default_for(&cfg);
            let tokens = rand_tokens(12, cfg.vocab_size as u16, 99);
            let (full, _) = forward(&model, &tokens, &scales, false).unwrap();
            for t in 1..tokens.len() {
                let (part, _) = forward(&model, &tokens[..t], &scales, false).unwrap();
                for r in 0..t {
                    for c in 0..cfg.vocab_size {
                        let diff = (part.at(r, c) - full.at(r, c)).abs();
                        assert!(diff < 1e-9, "row {r} col {c} diff {diff}");
                    }
                }
            }
        }
    }

    #[test]
    fn forward_beyond_train_len_works() {
        let cfg = tiny_config();
        let model = init_model(&cfg).unwrap();
        let scales = ScaleVector::default_for(&cfg);
        let tokens = rand_tokens(cfg.train_len * 4, cfg.vocab_size as u16, 5);
        let (logits, trace) = forward(&model, &tokens, &scales, true).unwrap();
        assert_eq!(logits.shape(), &[tokens.len(), cfg.vocab_size]);
        let trace = trace.unwrap();
        // entropy bound: H at 1-based position i is ≤ ln i
        for layer in 0..cfg.n_layers {
            for head in 0..cfg.n_heads_per_layer {
                for pos in 1..=tokens.len() {
                    let h = trace.entropy(layer, head, pos);
                    assert!(h >= 0.0 && h <= (pos as f64).ln() + 1e-12);
                }
            }
        }
    }

    #[test]
    fn forward_rejects_out_of_vocab_token() {
        let cfg = tiny_config();
        let model = init_model(&cfg).unwrap();
        let scales = ScaleVector::default_for(&cfg);
        let err = forward(&model, &[0, 5, 32], &scales, false).unwrap_err();
        assert!(matches!(err, Error::Index { .. }));
    }

    #[test]
    fn nope_token_swap_only_changes_later_logits() {
        let cfg = tiny_config();
        let model = init_model(&cfg).unwrap();
        let scales = ScaleVector::default_for(&cfg);
        let tokens = rand_tokens(14, cfg.vocab_size as u16, 3);
        let (i, j) = (4usize, 9usize);
        let mut swapped = tokens.clone();
        swapped.swap(i, j);
        assert_ne!(tokens[i], tokens[j], "test needs distinct tokens");
        let (a, _) = forward(&model, &tokens, &scales, false).unwrap();
        let (b, _) = forward(&model, &swapped, &scales, false).unwrap();
        for r in 0..i {
            for c in 0..cfg.vocab_size {
                assert_eq!(a.at(r, c), b.at(r, c), "row {r} changed before swap point");
            }
        }
        let mut any_diff = false;
        for r in i..tokens.len() {
            for c in 0..cfg.vocab_size {
                if a.at(r, c) != b.at(r, c) {
                    any_diff = true;
                }
            }
        }
        assert!(any_diff);
    }

    #[test]
    fn constant_scales_match_conventional_scaling() {
        // Per-head λ all equal to 1/√d reproduces an independently coded
        // conventional-softmax head (scores pre-multiplied by 1/√d).
        let t = 6;
        let d = 8;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let mut mk = || {
            Tensor::new(
                vec![t, d],
                (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>(),
            )
            .unwrap()
        };
        let (q, k, v) = (mk(), mk(), mk());
        let lambda = 1.0 / (d as f64).sqrt();
        let (out, probs) = attention_head(&q, &k, &v, lambda, PositionScheme::NoPe, 0).unwrap();
        // reference: divide scores by √d, softmax with temperature 1
        let mut ref_probs = Tensor::zeros(vec![t, t]);
        let mut scores = vec![0.0; t * t];
        tensor::scores_lower_into(&mut scores, q.data(), k.data(), t, d);
        for s in scores.iter_mut() {
            *s /= (d as f64).sqrt();
        }
        for i in 0..t {
            let src = scores[i * t..i * t + i + 1].to_vec();
            tensor::softmax_temp_into(
                &mut ref_probs.data_mut()[i * t..i * t + i + 1],
                &src,
                1.0,
            );
        }
        for (a, b) in probs.data().iter().zip(ref_probs.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut ref_out = Tensor::zeros(vec![t, d]);
        tensor::weighted_sum_lower_into(ref_out.data_mut(), ref_probs.data(), v.data(), t, d);
        for (a, b) in out.data().iter().zip(ref_out.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ffn_is_position_independent() {
        // the same input vector at two different sequence positions produces
        // identical feed-forward outputs (non-attention sublayers carry no
        // positional information)
        let cfg = tiny_config();
        let model = init_model(&cfg).unwrap();
        let d = cfg.d_model;
        let row: Vec<f64> = (0..d).map(|i| (i as f64 * 0.13).sin()).collect();
        let mut two_rows = vec![0.0; 2 * d];
        two_rows[..d].copy_from_slice(&row);
        two_rows[d..].copy_from_slice(&row);
        let block = &model.blocks[0];
        let mut xn = vec![0.0; 2 * d];
        rmsnorm_rows(&mut xn, &two_rows, block.ffn_norm.data(), 2, d, cfg.norm_eps);
        let mut g = vec![0.0; 2 * cfg.d_ff];
        let mut u = vec![0.0; 2 * cfg.d_ff];
        tensor::mm_into(&mut g, &xn, block.wg.data(), 2, d, cfg.d_ff);
        tensor::mm_into(&mut u, &xn, block.wu.data(), 2, d, cfg.d_ff);
        for (gi, ui) in g.iter_mut().zip(&u) {
            let s = 1.0 / (1.0 + (-*gi).exp());
            *gi = *gi * s * ui;
        }
        let mut out = vec![0.0; 2 * d];
        tensor::mm_into(&mut out, &g, block.wd.data(), 2, cfg.d_ff, d);
        assert_eq!(&out[..d], &out[d..]);
    }

    #[test]
    fn tape_forward_matches_inference_forward() {
        for tie in [false, true] {
            let cfg = ModelConfig {
                tie_embeddings: tie,
                ..tiny_config()
            };
            let model = init_model(&cfg).unwrap();
            let scales = ScaleVector::default_for(&cfg);
            let tokens = rand_tokens(10, cfg.vocab_size as u16, 23);
            let (logits, _) = forward(&model, &tokens, &scales, false).unwrap();
            let mut tape = Tape::new();
            let nodes = register_model(&mut tape, &model);
            let lg =
                forward_on_tape(&mut tape, &nodes, &cfg, &tokens, &ScalesOnTape::Const(&scales))
                    .unwrap();
            for (a, b) in logits.data().iter().zip(tape.value(lg).data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn scale_vector_projection_and_floor() {
        let floor = 1.0 / 32f64.sqrt();
        let mut sv = ScaleVector::new(vec![floor * 0.5, floor, floor * 2.0], floor).unwrap();
        assert!(!sv.satisfies_constraint());
        sv.project_in_place();
        assert_eq!(sv.values()[0], floor);
        assert_eq!(sv.values()[1], floor);
        assert_eq!(sv.values()[2], floor * 2.0);
        let before = sv.clone();
        sv.project_in_place();
        assert_eq!(sv, before);
    }

    #[test]
    fn scale_vector_rejects_nonpositive() {
        assert!(ScaleVector::new(vec![0.5, 0.0], 0.1).is_err());
        assert!(ScaleVector::new(vec![0.5, -1.0], 0.1).is_err());
        assert!(ScaleVector::new(vec![], 0.1).is_err());
    }
}
