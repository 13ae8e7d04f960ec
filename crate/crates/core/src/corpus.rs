//! Byte-level corpus handling: tokenization is the identity on bytes (ids
//! 0–255), so digits and punctuation are always atomic tokens. Train and
//! validation splits are block-shuffled under a fixed seed. A deterministic
//! synthetic-text generator provides a corpus when no real text is supplied.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Bytes to token ids. Total and invertible: every byte maps to its own id.
pub fn tokenize(bytes: &[u8]) -> Vec<u16> {
    bytes.iter().map(|&b| b as u16).collect()
}

/// Token ids back to bytes. Ids ≥ 256 cannot come from `tokenize` and are a
/// data error.
pub fn detokenize(tokens: &[u16]) -> Result<Vec<u8>> {
    tokens
        .iter()
        .map(|&t| {
            u8::try_from(t).map_err(|_| {
                Error::Data(format!("token id {t} outside byte range 0..=255"))
            })
        })
        .collect()
}

/// Tokens a split block holds; the shuffle-and-assign granularity.
const BLOCK_TOKENS: usize = 4096;

/// A tokenized corpus with a reproducible train/validation partition.
#[derive(Debug, Clone)]
pub struct Corpus {
    train: Vec<u16>,
    validation: Vec<u16>,
}

impl Corpus {
    /// Reads UTF-8 text files in order, concatenates, and splits. Identical
    /// (files, fraction, seed) always produce identical splits.
    pub fn from_files(
        paths: &[impl AsRef<Path>],
        train_fraction: f64,
        seed: u64,
    ) -> Result<Corpus> {
        if paths.is_empty() {
            return Err(Error::Param {
                name: "paths",
                why: "no corpus files given".into(),
            });
        }
        let mut bytes = Vec::new();
        for p in paths {
            let p = p.as_ref();
            let raw = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            let text = String::from_utf8(raw).map_err(|e| {
                Error::Data(format!("{} is not UTF-8 text: {e}", p.display()))
            })?;
            bytes.extend_from_slice(text.as_bytes());
        }
        Corpus::from_bytes(&bytes, train_fraction, seed)
    }

    /// Block-level split: the byte stream is cut into 4096-token blocks,
    /// block indices are shuffled with ChaCha8(seed), and the first
    /// fraction go to train. Each side keeps its blocks in stream order.
    pub fn from_bytes(bytes: &[u8], train_fraction: f64, seed: u64) -> Result<Corpus> {
        if bytes.is_empty() {
            return Err(Error::Data("empty corpus".into()));
        }
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::Param {
                name: "train_fraction",
                why: format!("must lie strictly between 0 and 1, got {train_fraction}"),
            });
        }
        let tokens = tokenize(bytes);
        let n_blocks = tokens.len().div_ceil(BLOCK_TOKENS);
        if n_blocks < 2 {
            // too small to hold out validation data at block granularity
            return Err(Error::Data(format!(
                "corpus has {} tokens, need more than {BLOCK_TOKENS} to split",
                tokens.len()
            )));
        }
        let n_train = ((n_blocks as f64 * train_fraction).round() as usize)
            .clamp(1, n_blocks - 1);
        let mut order: Vec<usize> = (0..n_blocks).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Fisher-Yates
        for i in (1..n_blocks).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut is_train = vec![false; n_blocks];
        for &b in &order[..n_train] {
            is_train[b] = true;
        }
        let mut train = Vec::new();
        let mut validation = Vec::new();
        for (b, chunk) in tokens.chunks(BLOCK_TOKENS).enumerate() {
            if is_train[b] {
                train.extend_from_slice(chunk);
            } else {
                validation.extend_from_slice(chunk);
            }
        }
        Ok(Corpus { train, validation })
    }

    pub fn train(&self) -> &[u16] {
        &self.train
    }

    pub fn validation(&self) -> &[u16] {
        &self.validation
    }

    pub fn total_tokens(&self) -> usize {
        self.train.len() + self.validation.len()
    }
}

/// Cuts `count` sequences of `len` tokens from a stream at seeded random
/// offsets (with replacement). Used for validation/tuning sets.
pub fn sample_sequences(
    stream: &[u16],
    len: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<u16>>> {
    if len == 0 || count == 0 {
        return Err(Error::Param {
            name: "len/count",
            why: "need positive sequence length and count".into(),
        });
    }
    if stream.len() < len {
        return Err(Error::Data(format!(
            "stream has {} tokens, cannot cut length-{len} sequences",
            stream.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let off = rng.gen_range(0..=stream.len() - len);
            stream[off..off + len].to_vec()
        })
        .collect())
}

const NAMES: &[&str] = &[
    "Mara", "Tobin", "Elsa", "Quent", "Ivo", "Petra", "Sander", "Lila", "Oren", "Greta",
    "Milo", "Anfisa", "Ruben", "Clohe", "Dmitri", "Wren",
];

const PLACES: &[&str] = &[
    "harbor", "meadow", "observatory", "mill", "archive", "garden", "workshop", "lighthouse",
    "market", "orchard", "quarry", "station",
];

const NOUNS: &[&str] = &[
    "ledger", "telescope", "lantern", "map", "engine", "letter", "compass", "barrel",
    "manuscript", "bell", "bridge", "clock", "kettle", "rope", "chart", "wheel", "crate",
    "signal", "furnace", "loom",
];

const ADJECTIVES: &[&str] = &[
    "old", "quiet", "heavy", "bright", "narrow", "patient", "rusted", "careful", "distant",
    "steady", "pale", "crooked", "warm", "thorough", "brisk", "faded",
];

const VERBS_PAST: &[&str] = &[
    "repaired", "measured", "carried", "sketched", "counted", "inspected", "polished",
    "weighed", "catalogued", "traded", "sealed", "copied", "tested", "stored", "labeled",
];

const CONNECTIVES: &[&str] = &[
    "Afterwards", "Meanwhile", "By morning", "Later that week", "At dusk", "Before long",
    "In the afternoon", "Some days later",
];

/// Deterministic English-like filler text, at least `target_bytes` long,
/// pure ASCII. Recurring names and places give a byte-level model learnable
/// structure; occasional numeric sentences keep digits in distribution.
pub fn generate_text(target_bytes: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(target_bytes + 256);
    fn pick(list: &[&'static str], rng: &mut ChaCha8Rng) -> &'static str {
        list[rng.gen_range(0..list.len())]
    }
    while out.len() < target_bytes {
        let sentences = rng.gen_range(3..8);
        for _ in 0..sentences {
            match rng.gen_range(0..10) {
                0..=2 => {
                    let name = pick(NAMES, &mut rng);
                    let verb = pick(VERBS_PAST, &mut rng);
                    let adj = pick(ADJECTIVES, &mut rng);
                    let noun = pick(NOUNS, &mut rng);
                    out.push_str(&format!("{name} {verb} the {adj} {noun}."));
                }
                3..=4 => {
                    let name = pick(NAMES, &mut rng);
                    let noun = pick(NOUNS, &mut rng);
                    let place = pick(PLACES, &mut rng);
                    out.push_str(&format!(
                        "{name} carried the {noun} down to the {place}."
                    ));
                }
                5 => {
                    let conn = pick(CONNECTIVES, &mut rng);
                    let name = pick(NAMES, &mut rng);
                    let verb = pick(VERBS_PAST, &mut rng);
                    let noun = pick(NOUNS, &mut rng);
                    out.push_str(&format!(
                        "{conn}, {name} {verb} every {noun} in the row."
                    ));
                }
                6 => {
                    let noun = pick(NOUNS, &mut rng);
                    let count = rng.gen_range(2..300);
                    let place = pick(PLACES, &mut rng);
                    out.push_str(&format!(
                        "The {place} held {count} {noun}s in all."
                    ));
                }
                7 => {
                    let adj = pick(ADJECTIVES, &mut rng);
                    let noun = pick(NOUNS, &mut rng);
                    let place = pick(PLACES, &mut rng);
                    out.push_str(&format!(
                        "The {adj} {noun} stayed in the {place} all winter."
                    ));
                }
                8 => {
                    let a = pick(NAMES, &mut rng);
                    let b = pick(NAMES, &mut rng);
                    let noun = pick(NOUNS, &mut rng);
                    out.push_str(&format!(
                        "{a} asked {b} about the {noun}, and {b} only nodded."
                    ));
                }
                _ => {
                    let year = rng.gen_range(1801..1930);
                    let name = pick(NAMES, &mut rng);
                    let place = pick(PLACES, &mut rng);
                    out.push_str(&format!(
                        "In {year} {name} first came to the {place}."
                    ));
                }
            }
            out.push(' ');
        }
        out.push('\n');
        if rng.gen_range(0..4) == 0 {
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn detokenize_rejects_wide_ids() {
        let err = detokenize(&[65, 256]).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert_eq!(detokenize(&[72, 105]).unwrap(), b"Hi");
    }

    proptest! {
        #[test]
        fn tokenizer_round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..512)) {
            prop_assert_eq!(detokenize(&tokenize(&bytes)).unwrap(), bytes);
        }
    }

    #[test]
    fn split_is_reproducible_and_partitions() {
        let text = generate_text(80_000, 5);
        let a = Corpus::from_bytes(text.as_bytes(), 0.8, 11).unwrap();
        let b = Corpus::from_bytes(text.as_bytes(), 0.8, 11).unwrap();
        assert_eq!(a.train(), b.train());
        assert_eq!(a.validation(), b.validation());
        assert_eq!(a.total_tokens(), text.len());
        assert!(!a.train().is_empty() && !a.validation().is_empty());
        // roughly the requested fraction, at block granularity
        let frac = a.train().len() as f64 / a.total_tokens() as f64;
        assert!((frac - 0.8).abs() < 0.15, "observed fraction {frac}");

        let c = Corpus::from_bytes(text.as_bytes(), 0.8, 12).unwrap();
        assert_ne!(a.train(), c.train(), "different seed must reassign blocks");
    }

    #[test]
    fn split_rejects_bad_fraction_and_tiny_corpus() {
        let text = generate_text(40_000, 1);
        assert!(Corpus::from_bytes(text.as_bytes(), 0.0, 1).is_err());
        assert!(Corpus::from_bytes(text.as_bytes(), 1.0, 1).is_err());
        assert!(Corpus::from_bytes(b"tiny", 0.8, 1).is_err());
        assert!(Corpus::from_bytes(b"", 0.8, 1).is_err());
    }

    #[test]
    fn from_files_reads_utf8_and_rejects_binary() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("ok.txt");
        std::fs::write(&good, generate_text(20_000, 2)).unwrap();
        let also = dir.path().join("more.txt");
        std::fs::write(&also, generate_text(20_000, 3)).unwrap();
        let corpus = Corpus::from_files(&[&good, &also], 0.7, 9).unwrap();
        assert_eq!(corpus.total_tokens(),
            std::fs::metadata(&good).unwrap().len() as usize
            + std::fs::metadata(&also).unwrap().len() as usize);

        let bad = dir.path().join("bin.dat");
        std::fs::write(&bad, [0xff, 0xfe, 0x80]).unwrap();
        let err = Corpus::from_files(&[&bad], 0.7, 9).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");
    }

    #[test]
    fn generator_is_deterministic_ascii_and_sized() {
        let a = generate_text(50_000, 77);
        let b = generate_text(50_000, 77);
        assert_eq!(a, b);
        assert!(a.len() >= 50_000);
        assert!(a.bytes().all(|c| c.is_ascii()), "generator must stay ASCII");
        assert!(a.bytes().any(|c| c.is_ascii_digit()), "digits should appear");
        let c = generate_text(50_000, 78);
        assert_ne!(a, c);
    }

    #[test]
    fn sample_sequences_deterministic_in_range() {
        let text = generate_text(30_000, 4);
        let stream = tokenize(text.as_bytes());
        let a = sample_sequences(&stream, 64, 5, 3).unwrap();
        let b = sample_sequences(&stream, 64, 5, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        assert!(a.iter().all(|s| s.len() == 64));
        assert!(sample_sequences(&stream[..10], 64, 1, 0).is_err());
    }
}
