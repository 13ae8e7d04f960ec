// Acceptance gate: ten end-to-end checks covering the invariant suite, the
// gradient and sliding-window oracles, the desk-scale length-generalization
// phenomenon, constrained head-scale tuning, the fitted scale law, the
// passkey harness, ablation plumbing, and pipeline determinism. Each test
// prints one "[criterion N] PASS" line with the numbers it measured; every
// tolerance is pinned inline. Tests are numbered so the single-threaded run
// order matches the list below, and the expensive fixtures (a 2000-step
// pretrain and a 21-point scale sweep) are built once and shared.

use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scalelab::checkpoint;
use scalelab::cli::{Cli, Command as CliCommand, InitChoice};
use scalelab::corpus::{self, Corpus};
use scalelab::eval::{
    self, eval_passkey, sliding_window_oracle, sliding_window_ppl, sliding_window_scores,
    CopyStub, ModelScorer, RandomStub,
};
use scalelab::model::{
    attention_head, forward, forward_traced, init_model, lm_loss_on_tape, per_position_nll,
    register_model, rope_apply, Model, ModelConfig, PositionScheme, ScaleVector, ScalesOnTape,
    TraceSpec,
};
use scalelab::optim::{cosine_schedule, project_scales};
use scalelab::probe::{
    average_entropy_curve, entropy_upper_bound, find_inflection, head_entropy, CurveScope,
    InflectionParams,
};
use scalelab::scale::{
    default_lambda_grid, fit_scale_curve, init_head_scales, optimize_scales_with,
    tune_head_scales, uniform_scale_sweep, InitMode, SweepResult, TuneConfig,
};
use scalelab::tape::Tape;
use scalelab::tensor::{self, Tensor};
use scalelab::train::{pretrain_toy, TrainConfig};

use clap::Parser;

// ---------------------------------------------------------------------------
// shared fixtures

/// Corpus, checkpoint, and timing for the desk-scale run: the default
/// 4-layer × 4-head NoPE model (L = 128) pretrained for 2000 steps on a
/// 6 MB generated corpus. Built once; criteria 4, 5, 6, and 8 share it.
struct Trained {
    config: ModelConfig,
    corpus: Corpus,
    model: Model,
    build_time: Duration,
}

fn trained() -> &'static Trained {
    static TRAINED: OnceLock<Trained> = OnceLock::new();
    TRAINED.get_or_init(|| {
        let t0 = Instant::now();
        let text = corpus::generate_text(6_000_000, 1);
        assert!(text.len() >= 5_000_000, "corpus below the 5 MB floor");
        let corpus = Corpus::from_bytes(text.as_bytes(), 0.9, 3).expect("corpus split");
        let config = ModelConfig::default();
        assert_eq!(config.n_layers, 4);
        assert_eq!(config.n_heads_per_layer, 4);
        assert_eq!(config.train_len, 128);
        assert!(matches!(config.position_scheme, PositionScheme::NoPe));
        let (model, _) =
            pretrain_toy(&config, &corpus, 2000, &TrainConfig::default()).expect("pretrain");
        Trained {
            config,
            corpus,
            model,
            build_time: t0.elapsed(),
        }
    })
}

/// Uniform-scale sweep of the trained model over the default 21-point grid
/// at L' = 2L = 256. Shared by criteria 4(b) and 5; its build time is
/// charged to criterion 4's budget.
fn sweep_at_2l() -> &'static (SweepResult, Duration) {
    static SWEEP: OnceLock<(SweepResult, Duration)> = OnceLock::new();
    SWEEP.get_or_init(|| {
        let fx = trained();
        let t0 = Instant::now();
        let valset = corpus::sample_sequences(fx.corpus.validation(), 256, 8, 5).expect("valset");
        let grid = default_lambda_grid(fx.config.d_head);
        let sweep = uniform_scale_sweep(&fx.model, &valset, &grid, 256).expect("sweep");
        (sweep, t0.elapsed())
    })
}

/// Head-scale tuning on the frozen trained model (200 steps, best-uniform
/// init, constraint on) plus the checkpoint bytes serialized before and
/// after. Shared by criteria 5 and 6.
struct Tuned {
    init: ScaleVector,
    scales: ScaleVector,
    bytes_before: Vec<u8>,
    bytes_after: Vec<u8>,
}

fn tuned() -> &'static Tuned {
    static TUNED: OnceLock<Tuned> = OnceLock::new();
    TUNED.get_or_init(|| {
        let fx = trained();
        let (sweep, _) = sweep_at_2l();
        let l_prime = 256usize;
        let init =
            init_head_scales(&fx.config, Some(sweep), l_prime, InitMode::BestUniform)
                .expect("best-uniform init");

        let dir = tempfile::tempdir().expect("tempdir");
        let before = dir.path().join("before.ckpt");
        let after = dir.path().join("after.ckpt");
        checkpoint::save_model(&fx.model, &before).expect("save before");
        let bytes_before = std::fs::read(&before).expect("read before");

        // mirror the tune-heads defaults: sequences of ceil(1.125 * L') from
        // the train split, 64 of them, seeded like TuneConfig::default()
        let cfg = TuneConfig::default();
        assert_eq!(cfg.steps, 200);
        assert!(cfg.constraint);
        let tune_len = (l_prime as f64 * 1.125).ceil() as usize;
        let dataset = corpus::sample_sequences(fx.corpus.train(), tune_len, 64, cfg.seed)
            .expect("tune dataset");
        let result = tune_head_scales(&fx.model, &dataset, &init, &cfg).expect("tune");

        checkpoint::save_model(&fx.model, &after).expect("save after");
        let bytes_after = std::fs::read(&after).expect("read after");
        Tuned {
            init,
            scales: result.scales,
            bytes_before,
            bytes_after,
        }
    })
}

// ---------------------------------------------------------------------------
// helpers

fn toy_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads_per_layer: 2,
        d_model: 16,
        d_head: 8,
        vocab_size: 32,
        train_len: 16,
        d_ff: 24,
        seed: 9,
        ..ModelConfig::default()
    }
}

fn rand_tokens(n: usize, vocab: u16, seed: u64) -> Vec<u16> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(0..vocab)).collect()
}

fn rand_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).expect("tensor")
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

/// Mean NLL over positions 2..=l_prime averaged across the dataset: the
/// validation loss head tuning is judged on.
fn dataset_loss(model: &Model, dataset: &[Vec<u16>], scales: &ScaleVector, l_prime: usize) -> f64 {
    let positions: Vec<usize> = (2..=l_prime).collect();
    let series =
        eval::average_nll_by_position(model, dataset, scales, &positions).expect("nll series");
    series.iter().sum::<f64>() / series.len() as f64
}

// ---------------------------------------------------------------------------
// 1. invariant suite

#[test]
fn criterion_01_invariant_suite() {
    let t0 = Instant::now();

    // softmax normalization and masking: each row sums to 1 over the first
    // `mask` entries and is exactly zero after them
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..50 {
        let n = rng.gen_range(1..24usize);
        let mask = rng.gen_range(1..=n);
        let row: Vec<f64> = (0..n).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let z = Tensor::new(vec![n], row).expect("row");
        let lambda = rng.gen_range(0.05..4.0);
        let p = tensor::softmax_temp(&z, lambda, mask).expect("softmax");
        let sum: f64 = p.data()[..mask].iter().sum();
        assert!(
            (sum - 1.0).abs() <= 1e-12,
            "trial {trial}: masked softmax row sums to {sum}"
        );
        assert!(p.data()[..mask].iter().all(|&v| v > 0.0));
        assert!(p.data()[mask..].iter().all(|&v| v == 0.0));
    }

    // entropy bound 0 <= H_i <= ln(i) for every head and position, probed
    // beyond the training length
    let config = toy_config();
    let model = init_model(&config).expect("model");
    let scales = ScaleVector::default_for(&config);
    let tokens = rand_tokens(3 * config.train_len, config.vocab_size as u16, 33);
    let (_, trace) =
        forward_traced(&model, &tokens, &scales, &TraceSpec::entropies_only()).expect("forward");
    let trace = trace.expect("trace requested");
    for layer in 0..config.n_layers {
        for head in 0..config.n_heads_per_layer {
            for pos in 1..=trace.len() {
                let h = trace.entropy(layer, head, pos);
                let bound = entropy_upper_bound(pos as f64).expect("bound");
                assert!(
                    h >= 0.0 && h <= bound + 1e-9,
                    "entropy {h} outside [0, ln {pos}] at layer {layer} head {head}"
                );
            }
        }
    }

    // per-row entropy monotonicity: sharper temperature (larger lambda)
    // never raises a row's entropy
    for trial in 0..20 {
        let n = 12usize;
        let row: Vec<f64> = (0..n)
            .map(|j| (trial * n + j) as f64 * 0.7619 % 3.0 - 1.5 + j as f64 * 1e-3)
            .collect();
        let z = Tensor::new(vec![n], row).expect("row");
        let mut last = f64::INFINITY;
        for k in 0..12 {
            let lambda = 0.2 + 0.35 * k as f64;
            let p = tensor::softmax_temp(&z, lambda, n).expect("softmax");
            let h = head_entropy(p.data()).expect("entropy");
            assert!(
                h <= last + 1e-12,
                "entropy rose from {last} to {h} when lambda increased to {lambda}"
            );
            last = h;
        }
    }

    // prefix consistency: causal forward of a prefix reproduces the full
    // run's logits rows for both position schemes
    for scheme in [
        PositionScheme::NoPe,
        PositionScheme::Rope { base: 10_000.0 },
    ] {
        let cfg = ModelConfig {
            position_scheme: scheme,
            ..toy_config()
        };
        let model = init_model(&cfg).expect("model");
        let scales = ScaleVector::default_for(&cfg);
        let tokens = rand_tokens(40, cfg.vocab_size as u16, 44);
        let (full, _) = forward(&model, &tokens, &scales, false).expect("full forward");
        for t in [1usize, 7, 23, 40] {
            let (pre, _) = forward(&model, &tokens[..t], &scales, false).expect("prefix");
            for r in 0..t {
                for c in 0..pre.cols() {
                    let d = (pre.at(r, c) - full.at(r, c)).abs();
                    assert!(d <= 1e-12, "prefix logit drifted by {d} at row {r}");
                }
            }
        }
    }

    // RoPE shift-invariance: attention logits (and therefore probabilities)
    // depend only on relative offsets, to 1e-9
    let (t, d) = (10usize, 8usize);
    let q = rand_tensor(t, d, 55);
    let k = rand_tensor(t, d, 56);
    let v = rand_tensor(t, d, 57);
    let base = 10_000.0;
    for shift in [17usize, 1000] {
        let pos0: Vec<usize> = (0..t).collect();
        let pos1: Vec<usize> = (0..t).map(|i| i + shift).collect();
        let (q0, k0) = (
            rope_apply(&q, &pos0, base).expect("rope"),
            rope_apply(&k, &pos0, base).expect("rope"),
        );
        let (q1, k1) = (
            rope_apply(&q, &pos1, base).expect("rope"),
            rope_apply(&k, &pos1, base).expect("rope"),
        );
        for i in 0..t {
            for j in 0..=i {
                let dot = |a: &Tensor, b: &Tensor| -> f64 {
                    (0..d).map(|c| a.at(i, c) * b.at(j, c)).sum()
                };
                let (s0, s1) = (dot(&q0, &k0), dot(&q1, &k1));
                assert!(
                    (s0 - s1).abs() <= 1e-9 * s0.abs().max(1.0),
                    "shifted RoPE logit moved: {s0} vs {s1} at ({i},{j})"
                );
            }
        }
        let lambda = 1.0 / (d as f64).sqrt();
        let scheme = PositionScheme::Rope { base };
        let (_, p0) = attention_head(&q, &k, &v, lambda, scheme, 0).expect("head");
        let (_, p1) = attention_head(&q, &k, &v, lambda, scheme, shift).expect("head");
        let max_dp = p0
            .data()
            .iter()
            .zip(p1.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_dp <= 1e-9, "attention probabilities shifted by {max_dp}");
    }

    // tokenizer round-trip over every byte value and random data
    let all: Vec<u8> = (0..=255u8).collect();
    assert_eq!(corpus::detokenize(&corpus::tokenize(&all)).expect("round-trip"), all);
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let blob: Vec<u8> = (0..4096).map(|_| rng.gen()).collect();
    let toks = corpus::tokenize(&blob);
    assert!(toks.iter().all(|&t| t < 256));
    assert_eq!(corpus::detokenize(&toks).expect("round-trip"), blob);

    // projection idempotence: one projection lands on the constraint set,
    // a second changes nothing, and in-bounds entries pass through untouched
    let floor = 1.0 / 32f64.sqrt();
    let raw = vec![0.01, floor, 0.9 * floor, 1.7 * floor, 0.3, 5.0];
    let sv = ScaleVector::new(raw.clone(), floor).expect("scales");
    let once = project_scales(&sv);
    let twice = project_scales(&once);
    assert!(once.satisfies_constraint());
    assert_eq!(once.values(), twice.values());
    for (orig, proj) in raw.iter().zip(once.values()) {
        if *orig >= floor {
            assert_eq!(orig, proj, "in-bounds scale moved under projection");
        } else {
            assert_eq!(*proj, floor);
        }
    }

    // schedule endpoints: peak exactly at the end of warmup, exactly
    // 0.1 * peak at the final step
    for (total, warmup, lr) in [(2000u64, 100u64, 1e-3), (200, 20, 0.05), (7, 2, 0.4)] {
        assert_eq!(cosine_schedule(warmup, total, warmup, lr).expect("schedule"), lr);
        assert_eq!(
            cosine_schedule(total, total, warmup, lr).expect("schedule"),
            0.1 * lr
        );
    }

    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 60.0, "invariant suite took {secs:.1}s, budget 60s");
    println!(
        "[criterion 1] PASS - softmax/entropy/prefix/RoPE/tokenizer/projection/schedule \
         invariants hold ({secs:.1}s < 60s)"
    );
}

// ---------------------------------------------------------------------------
// 2. gradient oracle

#[test]
fn criterion_02_gradient_oracle() {
    let t0 = Instant::now();
    let config = toy_config();
    let model = init_model(&config).expect("model");
    let m = config.total_heads();
    let floor = config.default_lambda();

    // start the scales off the constraint floor so the FD stencil probes an
    // unclamped neighborhood
    let values: Vec<f64> = (0..m).map(|h| floor * (1.05 + 0.04 * h as f64)).collect();
    let scales = ScaleVector::new(values.clone(), floor).expect("scales");
    let samples: Vec<Vec<u16>> = (0..3)
        .map(|i| rand_tokens(20, config.vocab_size as u16, 100 + i))
        .collect();

    // reverse mode: one tape over the batch-mean LM loss with the scales as
    // the only tracked leaf
    let mut tape = Tape::new();
    let nodes = register_model(&mut tape, &model);
    let mut st = scales.to_tensor();
    st.set_requires_grad(true);
    let scale_node = tape.leaf(&st);
    let losses: Vec<_> = samples
        .iter()
        .map(|s| {
            lm_loss_on_tape(&mut tape, &nodes, &config, s, &ScalesOnTape::Node(scale_node))
                .expect("loss")
        })
        .collect();
    let loss = tape.mean_of(&losses).expect("mean");
    tape.backward(loss).expect("backward");
    let g_rev = tape.grad(scale_node).expect("scale grad").to_vec();

    // central finite differences on the same batch loss, step 1e-4
    let batch_loss = |vals: &[f64]| -> f64 {
        let sv = ScaleVector::new(vals.to_vec(), floor).expect("scales");
        let mut acc = 0.0;
        for s in &samples {
            let nll = per_position_nll(&model, s, &sv).expect("nll");
            acc += nll.iter().sum::<f64>() / nll.len() as f64;
        }
        acc / samples.len() as f64
    };
    let h = 1e-4;
    for head in 0..m {
        let mut up = values.clone();
        let mut dn = values.clone();
        up[head] += h;
        dn[head] -= h;
        let g_fd = (batch_loss(&up) - batch_loss(&dn)) / (2.0 * h);
        let rel = rel_err(g_rev[head], g_fd);
        assert!(
            rel <= 1e-3,
            "head {head}: reverse {:.6e} vs FD {g_fd:.6e}, rel {rel:.2e} > 1e-3",
            g_rev[head]
        );
    }

    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 60.0, "gradient oracle took {secs:.1}s, budget 60s");
    println!(
        "[criterion 2] PASS - reverse-mode scale gradients match central FD (step 1e-4) \
         within 1e-3 relative on all {m} heads ({secs:.1}s < 60s)"
    );
}

// ---------------------------------------------------------------------------
// 3. sliding-window oracle

#[test]
fn criterion_03_sliding_window_oracle() {
    let config = toy_config();
    let model = init_model(&config).expect("model");
    let scales = ScaleVector::default_for(&config);
    let window = 32usize;
    let stride = window / 4;

    // 3W-token stream, S = W/4: the production path scores every token once
    // with per-token NLL equal to the brute-force re-forward oracle's
    let tokens = rand_tokens(3 * window, config.vocab_size as u16, 77);
    let fast = sliding_window_scores(&model, &tokens, &scales, window, stride).expect("fast");
    let oracle = sliding_window_oracle(&model, &tokens, &scales, window, stride).expect("oracle");
    assert_eq!(fast.len(), oracle.len(), "scored token counts differ");
    let mut worst = 0.0f64;
    for ((ft, fc, fn_), (ot, oc, on)) in fast.iter().zip(&oracle) {
        assert_eq!((ft, fc), (ot, oc), "window placement diverged from oracle");
        let rel = (fn_ - on).abs() / on.abs().max(1e-300);
        worst = worst.max(rel);
        assert!(rel <= 1e-9, "token {ft}: NLL {fn_} vs oracle {on}, rel {rel:.2e}");
    }
    // aggregate view is the exact sum of the per-token rows
    let agg = sliding_window_ppl(&model, &tokens, &scales, window, stride).expect("agg");
    assert_eq!(agg.scored, fast.len());
    assert_eq!(agg.total_nll, fast.iter().map(|r| r.2).sum::<f64>());

    // single-window case: scores equal a direct full forward bit for bit
    let solo = rand_tokens(window, config.vocab_size as u16, 78);
    let rows = sliding_window_scores(&model, &solo, &scales, window, window).expect("solo");
    let (logits, _) = forward(&model, &solo[..window - 1], &scales, false).expect("forward");
    assert_eq!(rows.len(), window - 1);
    for (i, (t, ctx, nll)) in rows.iter().enumerate() {
        assert_eq!((*t, *ctx), (i + 1, i + 1));
        let direct = tensor::nll_row(logits.row(i), solo[i + 1] as usize);
        assert_eq!(
            nll.to_bits(),
            direct.to_bits(),
            "single-window NLL differs from direct forward at position {t}"
        );
    }

    println!(
        "[criterion 3] PASS - sliding-window NLL matches the re-forward oracle on {} tokens \
         (worst rel {worst:.2e} <= 1e-9); single window equals direct forward exactly",
        fast.len()
    );
}

// ---------------------------------------------------------------------------
// 4. length-generalization phenomenon at desk scale

#[test]
fn criterion_04_inflection_and_uniform_scaling() {
    let fx = trained();
    let t0 = Instant::now();
    let train_len = fx.config.train_len;
    let max_len = 4 * train_len;
    let scales = ScaleVector::default_for(&fx.config);

    // held-out sequences to 4L, sampled like the probe subcommand; 48 samples
    // keep the per-position curves smooth enough for slope estimates
    let valset =
        corpus::sample_sequences(fx.corpus.validation(), max_len, 48, 17).expect("valset");

    // (a) entropy and log-PPL inflections agree within 0.25 L
    let positions: Vec<usize> = (1..=max_len).collect();
    let curve = average_entropy_curve(
        &fx.model,
        &valset,
        &scales,
        CurveScope::ModelAverage,
        &positions,
    )
    .expect("entropy curve");
    // detector settings for L = 128 curves (both CLI-exposed): at this scale
    // the in-domain entropy baseline still carries the ~1/i growth of diffuse
    // heads, so the break right past L clears a lower threshold than the
    // defaults tuned for longer contexts; the same pair is applied to both
    // curves
    let params = InflectionParams { window: 32, tau: 1.5 };
    let entropy_inflection =
        find_inflection(curve.positions(), curve.mean_entropy(), train_len, params)
            .expect("detector")
            .expect("no entropy inflection detected by 4L");

    let nll_positions: Vec<usize> = (2..=max_len).collect();
    let nll_curve = eval::average_nll_by_position(&fx.model, &valset, &scales, &nll_positions)
        .expect("nll curve");
    let ppl_inflection = find_inflection(&nll_positions, &nll_curve, train_len, params)
        .expect("detector")
        .expect("no log-PPL inflection detected by 4L");

    let gap = (entropy_inflection as f64 - ppl_inflection as f64).abs();
    let budget = 0.25 * train_len as f64;
    assert!(
        gap <= budget,
        "inflections disagree: entropy at {entropy_inflection}, log-PPL at {ppl_inflection} \
         (|diff| {gap} > {budget})"
    );

    // (b) some grid scale above 1/sqrt(d) beats the default on mean log-PPL
    // over positions in (L, 2L]
    let (sweep, sweep_time) = sweep_at_2l();
    let grid = sweep.lambda_grid();
    assert_eq!(grid[0], fx.config.default_lambda(), "grid must start at 1/sqrt(d)");
    let base = sweep
        .mean_log_ppl_over(0, train_len, 2 * train_len)
        .expect("default-scale mean");
    let improvements: Vec<(f64, f64)> = (1..grid.len())
        .filter_map(|k| {
            let mean = sweep.mean_log_ppl_over(k, train_len, 2 * train_len)?;
            (mean < base).then_some((grid[k], mean))
        })
        .collect();
    assert!(
        !improvements.is_empty(),
        "no lambda above 1/sqrt(d) improved mean log-PPL over ({train_len}, {}] \
         (default-scale mean {base:.4})",
        2 * train_len
    );
    let (best_lambda, best_mean) = improvements
        .iter()
        .copied()
        .min_by(|a, b| a.1.partial_cmp(&b.1).expect("finite means"))
        .expect("nonempty");

    let total = fx.build_time + *sweep_time + t0.elapsed();
    let secs = total.as_secs_f64();
    assert!(
        secs <= 900.0,
        "pretrain + evaluation took {secs:.0}s, budget 900s"
    );
    println!(
        "[criterion 4] PASS - entropy inflection {entropy_inflection} vs log-PPL inflection \
         {ppl_inflection} (|diff| {gap} <= {budget}); lambda*sqrt(d) = {:.2} lowers mean \
         log-PPL over (L, 2L] to {best_mean:.4} from {base:.4} at the default scale \
         ({secs:.0}s <= 900s)",
        best_lambda * (fx.config.d_head as f64).sqrt()
    );
}

// ---------------------------------------------------------------------------
// 5. head scales match or beat the best uniform scale

#[test]
fn criterion_05_headscale_no_worse_than_uniform() {
    let fx = trained();
    let tn = tuned();
    let l_prime = 256usize;

    // held-out evaluation set, disjoint seed from both the sweep and tuning
    let evalset =
        corpus::sample_sequences(fx.corpus.validation(), l_prime, 16, 0xE7A1).expect("evalset");
    let uniform_loss = dataset_loss(&fx.model, &evalset, &tn.init, l_prime);
    let tuned_loss = dataset_loss(&fx.model, &evalset, &tn.scales, l_prime);

    assert!(
        tuned_loss <= uniform_loss * 1.01,
        "tuned loss {tuned_loss:.4} exceeds best-uniform loss {uniform_loss:.4} + 1%"
    );
    println!(
        "[criterion 5] PASS - tuned head scales reach loss {tuned_loss:.4} at L' = {l_prime} \
         vs best-uniform {uniform_loss:.4} (allowed {:.4})",
        uniform_loss * 1.01
    );
}

// ---------------------------------------------------------------------------
// 6. frozen-model guarantee and tunable parameter count

#[test]
fn criterion_06_frozen_model_and_param_count() {
    let fx = trained();
    let tn = tuned();

    assert!(!tn.bytes_before.is_empty());
    assert_eq!(
        tn.bytes_before, tn.bytes_after,
        "base checkpoint bytes changed across head tuning"
    );

    let m = fx.config.total_heads();
    assert_eq!(m, 16, "desk-scale head count");
    assert_eq!(tn.scales.len(), m, "tunable parameter count differs from m");
    assert_eq!(tn.init.len(), m);

    // formula check at the 22-layer, 32-heads-per-layer configuration
    let big = ModelConfig {
        n_layers: 22,
        n_heads_per_layer: 32,
        d_model: 32 * 64,
        d_head: 64,
        ..ModelConfig::default()
    };
    big.validate().expect("22x32 config validates");
    assert_eq!(big.total_heads(), 704);

    println!(
        "[criterion 6] PASS - checkpoint bytes identical across tuning ({} bytes); \
         m = {m} tunable scales at desk scale, 22x32 formula gives 704",
        tn.bytes_before.len()
    );
}

// ---------------------------------------------------------------------------
// 7. curve fit recovery and rendering

#[test]
fn criterion_07_fit_recovers_planted_curve() {
    let c_true = 0.1375;
    let points: Vec<(f64, f64)> = (0..48)
        .map(|i| {
            let s = 1.0 + 7.0 * i as f64 / 47.0;
            (s, 1.0 + c_true * s.ln())
        })
        .collect();
    let fit = fit_scale_curve(&points, (1.0, 8.0)).expect("fit");

    let c_err = (fit.c - c_true).abs();
    assert!(c_err <= 1e-6, "planted c drifted by {c_err:.2e}");
    assert!(
        fit.r_squared >= 1.0 - 1e-9,
        "noiseless fit lost variance: R^2 = {}",
        fit.r_squared
    );
    let rendered = fit.render();
    assert!(
        rendered.contains("1 + 0.1375 * ln(s)"),
        "rendered coefficient not four-decimal: {rendered}"
    );
    assert!(
        rendered.contains("R^2 = 1.0000"),
        "rendered R^2 not four-decimal: {rendered}"
    );

    println!(
        "[criterion 7] PASS - recovered c within {c_err:.1e} of planted {c_true}, \
         R^2 = {:.12}; rendered: {rendered}",
        fit.r_squared
    );
}

// ---------------------------------------------------------------------------
// 8. passkey harness

#[test]
fn criterion_08_passkey_harness() {
    let filler = corpus::generate_text(200_000, 9);
    let filler = filler.as_bytes();
    let lengths = [192usize, 320];

    // copy oracle: 1.0 in every cell of the |lengths| x 10 grid
    let grid = eval_passkey(&mut CopyStub, &lengths, 10, filler, 4242).expect("copy grid");
    assert_eq!(grid.lengths, lengths);
    assert_eq!(grid.depths.len(), 10, "grid must probe 10 depths");
    assert_eq!(grid.keys_per_depth, 10);
    assert_eq!(grid.accuracy.len(), lengths.len() * 10);
    for (i, &acc) in grid.accuracy.iter().enumerate() {
        assert_eq!(acc, 1.0, "copy stub dropped a key in cell {i}");
    }

    // random stub: mean accuracy over 100 trials far below chance-adjacent
    // noise (5 random digits against a 5-digit key)
    let mut total = 0.0;
    for trial in 0..100u64 {
        let g = eval_passkey(&mut RandomStub::new(trial), &[192], 1, filler, 9000 + trial)
            .expect("random grid");
        total += g.accuracy.iter().sum::<f64>() / g.accuracy.len() as f64;
    }
    let mean = total / 100.0;
    assert!(mean < 0.02, "random stub scored {mean}, expected < 0.02");

    // trained model, in-domain: reported, not asserted
    let fx = trained();
    let scales = ScaleVector::default_for(&fx.config);
    let mut scorer = ModelScorer {
        model: &fx.model,
        scales: &scales,
    };
    let in_domain = eval_passkey(&mut scorer, &[fx.config.train_len], 10, filler, 1313)
        .expect("model grid");
    let acc = in_domain.mean_for_length(0);

    println!(
        "[criterion 8] PASS - copy stub 1.0 on {}x10 grid, random stub mean {mean:.4} < 0.02 \
         over 100 trials; trained model in-domain (L = {}) accuracy {acc:.2} (reported only)",
        lengths.len(),
        fx.config.train_len
    );
}

// ---------------------------------------------------------------------------
// 9. ablation plumbing

#[test]
fn criterion_09_ablation_plumbing() {
    // the flags parse and land on the right switches
    let cli = Cli::try_parse_from([
        "scalelab",
        "tune-heads",
        "--model",
        "model.ckpt",
        "--corpus",
        "corpus.txt",
        "--no-focus-constraint",
        "--default-init",
    ])
    .expect("parse");
    let CliCommand::TuneHeads(args) = cli.command else {
        panic!("parsed into the wrong subcommand");
    };
    assert!(args.no_focus_constraint);
    assert!(args.default_init);
    assert!(matches!(args.init, InitChoice::BestUniform), "flag default");

    let config = ModelConfig {
        n_layers: 2,
        n_heads_per_layer: 4,
        d_model: 128,
        d_head: 32,
        ..ModelConfig::default()
    };
    let floor = config.default_lambda();
    let m = config.total_heads();

    // --default-init: every scale starts at exactly 1/sqrt(d)
    let init = init_head_scales(&config, None, 256, InitMode::Default).expect("init");
    assert_eq!(init.len(), m);
    for &v in init.values() {
        assert_eq!(v, floor, "default init must be exactly 1/sqrt(d)");
    }

    // a synthetic objective that rewards shrinking every scale: loss sum of
    // squares, gradient 2x. Unconstrained tuning dives below the floor;
    // constrained tuning pins at it.
    let start = ScaleVector::uniform(m, 1.25 * floor, floor).expect("start");
    let objective = |_: u64, sv: &ScaleVector| {
        let loss: f64 = sv.values().iter().map(|v| v * v).sum();
        let grad: Vec<f64> = sv.values().iter().map(|v| 2.0 * v).collect();
        Ok((loss, grad))
    };
    let shrink_cfg = TuneConfig {
        steps: 80,
        lr: 0.05,
        warmup: 5,
        batch: 1,
        constraint: false,
        ..TuneConfig::default()
    };
    let unconstrained =
        optimize_scales_with(&start, &shrink_cfg, objective).expect("unconstrained");
    assert!(
        unconstrained.scales.min_value() < floor,
        "--no-focus-constraint should let scales cross below 1/sqrt(d): min {} vs floor {floor}",
        unconstrained.scales.min_value()
    );

    let constrained_cfg = TuneConfig {
        constraint: true,
        ..shrink_cfg
    };
    let constrained =
        optimize_scales_with(&start, &constrained_cfg, objective).expect("constrained");
    assert!(constrained.scales.satisfies_constraint());
    assert_eq!(
        constrained.scales.min_value(),
        floor,
        "constrained shrink objective should pin scales to the floor"
    );

    println!(
        "[criterion 9] PASS - flags parse; unconstrained shrink reaches min lambda {:.4} < \
         floor {floor:.4}, constrained run pins at the floor; default init exact at 1/sqrt(d)",
        unconstrained.scales.min_value()
    );
}

// ---------------------------------------------------------------------------
// 10. end-to-end determinism

#[test]
fn criterion_10_pipeline_determinism() {
    let bin = env!("CARGO_BIN_EXE_scalelab");
    let root = tempfile::tempdir().expect("tempdir");
    let config_path = root.path().join("run.toml");
    std::fs::write(
        &config_path,
        r#"
[model]
n_layers = 2
n_heads_per_layer = 2
d_model = 32
d_head = 16
d_ff = 64
train_len = 32
seed = 42

[pretrain]
steps = 30
batch = 2
warmup = 5

[probe]
samples = 2

[sweep]
grid_hi = 1.1
samples = 2

[tune]
steps = 5
batch = 2
dataset_size = 8
correlation_samples = 2

[eval]
max_tokens = 300
"#,
    )
    .expect("write config");

    let run_pipeline = |dir: &Path| {
        let d = |name: &str| dir.join(name).to_string_lossy().into_owned();
        let cfg = config_path.to_string_lossy().into_owned();
        let corpus = dir.join("corpus/corpus.txt").to_string_lossy().into_owned();
        let model = dir.join("pretrain/model.ckpt").to_string_lossy().into_owned();
        let steps: Vec<Vec<String>> = vec![
            vec!["gen-corpus".into(), "--bytes".into(), "120000".into(),
                 "--seed".into(), "1".into(), "--out".into(), d("corpus")],
            vec!["pretrain".into(), "--config".into(), cfg.clone(),
                 "--corpus".into(), corpus.clone(), "--out".into(), d("pretrain")],
            vec!["probe-entropy".into(), "--config".into(), cfg.clone(),
                 "--model".into(), model.clone(), "--corpus".into(), corpus.clone(),
                 "--out".into(), d("probe")],
            vec!["sweep".into(), "--config".into(), cfg.clone(),
                 "--model".into(), model.clone(), "--corpus".into(), corpus.clone(),
                 "--out".into(), d("sweep")],
            vec!["tune-heads".into(), "--config".into(), cfg.clone(),
                 "--model".into(), model.clone(), "--corpus".into(), corpus.clone(),
                 "--sweep".into(), d("sweep") + "/sweep.json", "--out".into(), d("tune")],
            vec!["eval-ppl".into(), "--config".into(), cfg.clone(),
                 "--model".into(), model.clone(), "--corpus".into(), corpus.clone(),
                 "--scales".into(), d("tune") + "/scales.json", "--out".into(), d("eval")],
            vec!["report".into(), "--run".into(), d("pretrain"), "--run".into(), d("probe"),
                 "--run".into(), d("sweep"), "--run".into(), d("tune"),
                 "--run".into(), d("eval"), "--out".into(), d("report")],
        ];
        for argv in steps {
            let out = Command::new(bin)
                .args(&argv)
                .env_remove("SCALELAB_OUT")
                .output()
                .expect("spawn scalelab");
            assert!(
                out.status.success(),
                "{} failed:\n{}\n{}",
                argv[0],
                String::from_utf8_lossy(&out.stdout),
                String::from_utf8_lossy(&out.stderr)
            );
        }
    };

    let (dir_a, dir_b) = (root.path().join("a"), root.path().join("b"));
    run_pipeline(&dir_a);
    run_pipeline(&dir_b);

    // every CSV the pipeline wrote must be byte-identical across the runs
    fn collect_csvs(base: &Path, dir: &Path, out: &mut Vec<String>) {
        for entry in std::fs::read_dir(dir).expect("read_dir") {
            let path = entry.expect("entry").path();
            if path.is_dir() {
                collect_csvs(base, &path, out);
            } else if path.extension().is_some_and(|e| e == "csv") {
                let rel = path.strip_prefix(base).expect("relative").to_string_lossy();
                out.push(rel.into_owned());
            }
        }
    }
    let mut csvs_a = Vec::new();
    let mut csvs_b = Vec::new();
    collect_csvs(&dir_a, &dir_a, &mut csvs_a);
    collect_csvs(&dir_b, &dir_b, &mut csvs_b);
    csvs_a.sort();
    csvs_b.sort();
    assert_eq!(csvs_a, csvs_b, "the two runs produced different artifact sets");
    assert!(
        csvs_a.len() >= 6,
        "expected the pipeline to write at least 6 CSVs, found {csvs_a:?}"
    );
    for rel in &csvs_a {
        let a = std::fs::read(dir_a.join(rel)).expect("read a");
        let b = std::fs::read(dir_b.join(rel)).expect("read b");
        assert_eq!(a, b, "{rel} differs between identically seeded runs");
    }

    println!(
        "[criterion 10] PASS - two identically seeded pipeline runs produced {} \
         byte-identical CSV artifacts",
        csvs_a.len()
    );
}
