//! Long-context evaluation: sliding-window perplexity with per-context-length
//! bucketing, per-position NLL curves for inflection detection, and the
//! passkey retrieval benchmark.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{forward, per_position_nll, Model, ScaleVector};
use crate::tensor;

/// NLL mass collected at one in-window context length.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionBucket {
    pub context_len: usize,
    pub sum_nll: f64,
    pub count: usize,
}

impl PositionBucket {
    pub fn mean_nll(&self) -> f64 {
        self.sum_nll / self.count as f64
    }
}

/// Sliding-window evaluation of one token stream.
#[derive(Debug, Clone)]
pub struct WindowEval {
    pub window: usize,
    pub stride: usize,
    pub token_count: usize,
    /// Tokens scored; each token is scored at most once.
    pub scored: usize,
    pub total_nll: f64,
    /// Ascending by context length; aggregate PPL is recomputable from the
    /// stored sums.
    pub buckets: Vec<PositionBucket>,
}

impl WindowEval {
    pub fn mean_nll(&self) -> f64 {
        self.total_nll / self.scored as f64
    }

    pub fn perplexity(&self) -> f64 {
        self.mean_nll().exp()
    }
}

/// Scores a long stream by advancing a W-token window with stride S. The
/// first window scores every position it can (contexts 1..W−1); each later
/// window scores only its final S positions, so every token is scored at
/// most once and with the longest context the protocol affords. When the
/// last stride window would overrun, a final window snaps to the stream end
/// and scores the still-unscored tail. Buckets key on in-window context
/// length.
pub fn sliding_window_ppl(
    model: &Model,
    tokens: &[u16],
    scales: &ScaleVector,
    window: usize,
    stride: usize,
) -> Result<WindowEval> {
    let rows = sliding_window_scores(model, tokens, scales, window, stride)?;
    let mut bucket_sum = vec![0.0f64; window];
    let mut bucket_count = vec![0usize; window];
    let mut total_nll = 0.0;
    for &(_, ctx, nll) in &rows {
        bucket_sum[ctx] += nll;
        bucket_count[ctx] += 1;
        total_nll += nll;
    }
    let scored = rows.len();

    let buckets = (0..window)
        .filter(|&c| bucket_count[c] > 0)
        .map(|c| PositionBucket {
            context_len: c,
            sum_nll: bucket_sum[c],
            count: bucket_count[c],
        })
        .collect();
    Ok(WindowEval {
        window,
        stride,
        token_count: tokens.len(),
        scored,
        total_nll,
        buckets,
    })
}

/// Per-token scores under the sliding-window protocol: one tuple
/// (absolute_target_index, context_len, nll) per scored token, in scoring
/// order. Each token is scored exactly once, with the longest context its
/// window placement affords; one forward per placement.
pub fn sliding_window_scores(
    model: &Model,
    tokens: &[u16],
    scales: &ScaleVector,
    window: usize,
    stride: usize,
) -> Result<Vec<(usize, usize, f64)>> {
    if window < 2 {
        return Err(Error::Param {
            name: "window",
            why: format!("window must be ≥ 2 tokens, got {window}"),
        });
    }
    if stride == 0 {
        return Err(Error::Param {
            name: "stride",
            why: "stride must be positive".into(),
        });
    }
    if stride > window {
        return Err(Error::Param {
            name: "stride",
            why: format!("stride {stride} exceeds window {window}"),
        });
    }
    let n = tokens.len();
    if n < window {
        return Err(Error::Data(format!(
            "stream has {n} tokens, window needs {window}"
        )));
    }

    let mut rows = Vec::with_capacity(n);
    // absolute index of the first target not yet scored
    let mut next_unscored = 1usize;
    let mut start = 0usize;
    loop {
        // logits row r predicts window token r+1; rows up to W−2 suffice
        let (logits, _) = forward(model, &tokens[start..start + window - 1], scales, false)?;
        let lo = next_unscored.max(start + 1);
        for t in lo..start + window {
            let ctx = t - start;
            let nll = tensor::nll_row(logits.row(ctx - 1), tokens[t] as usize);
            rows.push((t, ctx, nll));
        }
        next_unscored = start + window;
        if next_unscored >= n {
            break;
        }
        let next = start + stride;
        start = if next + window <= n { next } else { n - window };
    }
    Ok(rows)
}

/// Reference implementation for the sliding-window protocol: re-forwards
/// from scratch for every scored token with exactly the context the window
/// placement affords. Quadratic; test use only.
pub fn sliding_window_oracle(
    model: &Model,
    tokens: &[u16],
    scales: &ScaleVector,
    window: usize,
    stride: usize,
) -> Result<Vec<(usize, usize, f64)>> {
    if stride == 0 || stride > window || window < 2 || tokens.len() < window {
        return Err(Error::Param {
            name: "window/stride",
            why: "oracle given an invalid protocol".into(),
        });
    }
    let n = tokens.len();
    let mut out = Vec::new();
    let mut next_unscored = 1usize;
    let mut start = 0usize;
    loop {
        let lo = next_unscored.max(start + 1);
        for t in lo..start + window {
            // independent forward of just this token's context
            let ctx = &tokens[start..t];
            let (logits, _) = forward(model, ctx, scales, false)?;
            let nll = tensor::nll_row(logits.row(ctx.len() - 1), tokens[t] as usize);
            out.push((t, t - start, nll));
        }
        next_unscored = start + window;
        if next_unscored >= n {
            break;
        }
        let next = start + stride;
        start = if next + window <= n { next } else { n - window };
    }
    Ok(out)
}

/// Mean next-token NLL at each requested 1-based target position, averaged
/// over the dataset: series value at i is −log p(x_i | x_{<i}) from one full
/// forward per sequence. The log-PPL-by-position input to inflection
/// detection.
pub fn average_nll_by_position(
    model: &Model,
    dataset: &[Vec<u16>],
    scales: &ScaleVector,
    positions: &[usize],
) -> Result<Vec<f64>> {
    if dataset.is_empty() || positions.is_empty() {
        return Err(Error::Param {
            name: "dataset/positions",
            why: "need at least one sequence and one position".into(),
        });
    }
    if positions[0] < 2 || positions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Param {
            name: "positions",
            why: "target positions must be ≥ 2 and strictly increasing".into(),
        });
    }
    let max_pos = *positions.last().expect("nonempty");
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
        let nlls = per_position_nll(model, &seq[..max_pos], scales)?;
        for (k, &pos) in positions.iter().enumerate() {
            // per_position_nll[j] scores target j+2 (1-based)
            acc[k] += nlls[pos - 2];
        }
    }
    for a in &mut acc {
        *a /= dataset.len() as f64;
    }
    Ok(acc)
}

pub const PASSKEY_SENTENCE_PREFIX: &str = "The pass key is ";
pub const PASSKEY_SENTENCE_SUFFIX: &str = ". Remember it. ";
pub const PASSKEY_QUESTION: &str = " What is the pass key? The pass key is ";

/// One passkey retrieval trial: filler with a key sentence planted at a
/// depth-controlled offset, then the retrieval question. The prompt is
/// exactly `context_length` tokens and its only digits are the key's five.
#[derive(Debug, Clone, PartialEq)]
pub struct PasskeySample {
    pub context_length: usize,
    pub depth: f64,
    pub passkey: u32,
    pub prompt: Vec<u16>,
    pub gold: Vec<u16>,
}

/// Builds one sample. Filler is drawn at a seeded offset from `filler` with
/// every digit byte removed, so the planted key digits occur exactly once in
/// the prompt. The key sentence starts at ⌊depth · usable⌋ where usable is
/// the filler budget.
pub fn gen_passkey_sample(
    context_length: usize,
    depth: f64,
    key: u32,
    filler: &[u8],
    seed: u64,
) -> Result<PasskeySample> {
    if !(10000..=99999).contains(&key) {
        return Err(Error::Param {
            name: "key",
            why: format!("passkey must have exactly 5 digits, got {key}"),
        });
    }
    if !(0.0..=1.0).contains(&depth) {
        return Err(Error::Param {
            name: "depth",
            why: format!("depth must lie in [0, 1], got {depth}"),
        });
    }
    let sentence = format!("{PASSKEY_SENTENCE_PREFIX}{key}{PASSKEY_SENTENCE_SUFFIX}");
    let fixed = sentence.len() + PASSKEY_QUESTION.len();
    if context_length < fixed {
        return Err(Error::Param {
            name: "context_length",
            why: format!(
                "{context_length} tokens cannot hold the {fixed}-token key sentence and question"
            ),
        });
    }
    let clean: Vec<u8> = filler
        .iter()
        .copied()
        .filter(|b| !b.is_ascii_digit())
        .collect();
    if clean.is_empty() {
        return Err(Error::Param {
            name: "filler",
            why: "filler text is empty after digit removal".into(),
        });
    }

    let usable = context_length - fixed;
    let prefix_len = (depth * usable as f64).floor() as usize;
    let suffix_len = usable - prefix_len;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut offset = rng.gen_range(0..clean.len());
    let take = |n: usize, offset: &mut usize| -> Vec<u8> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let end = (*offset + (n - out.len())).min(clean.len());
            out.extend_from_slice(&clean[*offset..end]);
            *offset = if end == clean.len() { 0 } else { end };
        }
        out
    };

    let mut prompt_bytes = take(prefix_len, &mut offset);
    prompt_bytes.extend_from_slice(sentence.as_bytes());
    prompt_bytes.extend(take(suffix_len, &mut offset));
    prompt_bytes.extend_from_slice(PASSKEY_QUESTION.as_bytes());
    debug_assert_eq!(prompt_bytes.len(), context_length);

    Ok(PasskeySample {
        context_length,
        depth,
        passkey: key,
        prompt: crate::corpus::tokenize(&prompt_bytes),
        gold: crate::corpus::tokenize(key.to_string().as_bytes()),
    })
}

/// Produces the continuation tokens for a prompt. The model path decodes
/// greedily; stubs bound the harness from above and below.
pub trait TokenScorer {
    fn answer(&mut self, prompt: &[u16], n_tokens: usize) -> Result<Vec<u16>>;
}

/// Greedy decoding with the real model: argmax token appended and re-scored,
/// n times.
pub struct ModelScorer<'a> {
    pub model: &'a Model,
    pub scales: &'a ScaleVector,
}

impl TokenScorer for ModelScorer<'_> {
    fn answer(&mut self, prompt: &[u16], n_tokens: usize) -> Result<Vec<u16>> {
        let mut context = prompt.to_vec();
        let mut out = Vec::with_capacity(n_tokens);
        for _ in 0..n_tokens {
            let (logits, _) = forward(self.model, &context, self.scales, false)?;
            let last = logits.row(context.len() - 1);
            let mut best = 0usize;
            for (i, &v) in last.iter().enumerate() {
                if v > last[best] {
                    best = i;
                }
            }
            out.push(best as u16);
            context.push(best as u16);
        }
        Ok(out)
    }
}

/// Upper-bound stub: finds the planted key sentence in the prompt and
/// copies its digits.
pub struct CopyStub;

impl TokenScorer for CopyStub {
    fn answer(&mut self, prompt: &[u16], n_tokens: usize) -> Result<Vec<u16>> {
        let needle: Vec<u16> = crate::corpus::tokenize(PASSKEY_SENTENCE_PREFIX.as_bytes());
        let start = prompt
            .windows(needle.len())
            .position(|w| w == needle.as_slice())
            .ok_or_else(|| Error::Data("prompt holds no key sentence".into()))?;
        let digits_at = start + needle.len();
        if digits_at + n_tokens > prompt.len() {
            return Err(Error::Data("key sentence truncated".into()));
        }
        Ok(prompt[digits_at..digits_at + n_tokens].to_vec())
    }
}

/// Lower-bound stub: n independent uniform random digit tokens.
pub struct RandomStub {
    rng: ChaCha8Rng,
}

impl RandomStub {
    pub fn new(seed: u64) -> Self {
        RandomStub {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl TokenScorer for RandomStub {
    fn answer(&mut self, _prompt: &[u16], n_tokens: usize) -> Result<Vec<u16>> {
        Ok((0..n_tokens)
            .map(|_| b'0' as u16 + self.rng.gen_range(0..10))
            .collect())
    }
}

/// Exact-match accuracy over a (context length × depth) grid.
#[derive(Debug, Clone)]
pub struct PasskeyGrid {
    pub lengths: Vec<usize>,
    pub depths: Vec<f64>,
    pub keys_per_depth: usize,
    /// Row-major [lengths × depths] exact-match fractions.
    pub accuracy: Vec<f64>,
}

impl PasskeyGrid {
    pub fn at(&self, length_idx: usize, depth_idx: usize) -> f64 {
        self.accuracy[length_idx * self.depths.len() + depth_idx]
    }

    /// Mean accuracy across depths for one context length.
    pub fn mean_for_length(&self, length_idx: usize) -> f64 {
        let d = self.depths.len();
        self.accuracy[length_idx * d..(length_idx + 1) * d]
            .iter()
            .sum::<f64>()
            / d as f64
    }
}

/// Runs the passkey benchmark: for each context length, 10 evenly spaced
/// depths in [0, 1], each with `keys_per_depth` seeded random keys; the
/// scorer answers with exactly 5 tokens and a cell's accuracy is its
/// exact-match fraction. Non-digit answers simply fail the match.
pub fn eval_passkey(
    scorer: &mut dyn TokenScorer,
    lengths: &[usize],
    keys_per_depth: usize,
    filler: &[u8],
    seed: u64,
) -> Result<PasskeyGrid> {
    if lengths.is_empty() {
        return Err(Error::Param {
            name: "lengths",
            why: "no context lengths requested".into(),
        });
    }
    if keys_per_depth == 0 {
        return Err(Error::Param {
            name: "keys_per_depth",
            why: "need at least one key per depth".into(),
        });
    }
    let n_depths = 10usize;
    let depths: Vec<f64> = (0..n_depths).map(|i| i as f64 / (n_depths - 1) as f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut accuracy = Vec::with_capacity(lengths.len() * n_depths);
    for &len in lengths {
        for &depth in &depths {
            let mut hits = 0usize;
            for _ in 0..keys_per_depth {
                let key = rng.gen_range(10000..=99999u32);
                let sample_seed: u64 = rng.gen();
                let sample = gen_passkey_sample(len, depth, key, filler, sample_seed)?;
                let answer = scorer.answer(&sample.prompt, sample.gold.len())?;
                if answer == sample.gold {
                    hits += 1;
                }
            }
            accuracy.push(hits as f64 / keys_per_depth as f64);
        }
    }
    Ok(PasskeyGrid {
        lengths: lengths.to_vec(),
        depths,
        keys_per_depth,
        accuracy,
    })
}
