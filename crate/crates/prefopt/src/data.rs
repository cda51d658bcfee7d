//! Synthetic preference pairs with a controllable quality gap and length
//! bias, plus plain-text dataset I/O.
//!
//! Both responses of a pair are sampled from one randomly drawn *teacher*
//! bigram table; the only difference between them is the sampling
//! temperature:
//!
//! ```text
//! chosen   ~ teacher at temperature 1 / teacher_sharpness
//! rejected ~ teacher at temperature noise_temp
//! ```
//!
//! so the preference signal is purely a temperature effect — sharper
//! sampling concentrates on the teacher's high-probability continuations.
//! With `teacher_sharpness = noise_temp = 1` and matching length ranges the
//! two sides are exchangeable, which pins an untrained scorer's reward
//! accuracy to 1/2.
//!
//! Response bodies are drawn over the non-terminal tokens `1..V` and every
//! response ends with the reserved terminator token; prompts are uniform
//! over `1..V`. With `length_bias` on, each rejected length is sampled as
//! roughly twice its chosen length instead of from `rejected_len_range`.
//!
//! Dataset file format (7-bit text, one record per line):
//!
//! ```text
//! # prefopt-v1 vocab=<V>
//! <prompt ids> | <chosen ids> | <rejected ids>
//! ```

use std::ops::RangeInclusive;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::fsio;
use crate::policy::{TokenSeq, END_TOKEN};
use crate::{Error, Result};

/// One preference example: a prompt with a chosen and a rejected response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreferenceRecord {
    pub prompt: TokenSeq,
    pub chosen: TokenSeq,
    pub rejected: TokenSeq,
}

/// Recipe for a synthetic dataset; see the module docs for the sampling
/// scheme.
#[derive(Debug, Clone)]
pub struct GenSpec {
    pub vocab_size: usize,
    pub n_pairs: usize,
    pub prompt_len: usize,
    pub chosen_len_range: RangeInclusive<usize>,
    pub rejected_len_range: RangeInclusive<usize>,
    /// Inverse temperature for chosen responses; larger = sharper = better.
    pub teacher_sharpness: f64,
    /// Temperature (≥ 1) for rejected responses; larger = noisier = worse.
    pub noise_temp: f64,
    /// Draw each rejected length as ~2× its chosen length.
    pub length_bias: bool,
    pub seed: u64,
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::InvalidInput(format!(
                "vocabulary size must be at least 2, got {}",
                self.vocab_size
            )));
        }
        if self.n_pairs == 0 {
            return Err(Error::InvalidInput(
                "n_pairs must be at least 1".to_string(),
            ));
        }
        if self.prompt_len == 0 {
            return Err(Error::InvalidInput(
                "prompt_len must be at least 1".to_string(),
            ));
        }
        for (name, range) in [
            ("chosen_len_range", &self.chosen_len_range),
            ("rejected_len_range", &self.rejected_len_range),
        ] {
            if range.is_empty() || *range.start() == 0 {
                return Err(Error::InvalidInput(format!(
                    "{name} must be a non-empty range of positive lengths, got {}..={}",
                    range.start(),
                    range.end()
                )));
            }
        }
        if !(self.teacher_sharpness > 0.0) {
            return Err(Error::InvalidInput(format!(
                "teacher_sharpness must be positive, got {}",
                self.teacher_sharpness
            )));
        }
        if !(self.noise_temp >= 1.0) {
            return Err(Error::InvalidInput(format!(
                "noise_temp must be at least 1, got {}",
                self.noise_temp
            )));
        }
        Ok(())
    }
}

/// A list of preference records together with the vocabulary size they are
/// drawn from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub vocab_size: usize,
    pub records: Vec<PreferenceRecord>,
}

/// The teacher's next-token distribution over body tokens `1..V`, at the
/// given temperature, as cumulative probabilities for inverse-CDF sampling.
fn body_cumdist(teacher_row: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = teacher_row[1..].iter().map(|&l| l / temperature).collect();
    let max = scaled.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut cum: Vec<f64> = scaled.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = cum.iter().sum();
    let mut acc = 0.0;
    for c in &mut cum {
        acc += *c / total;
        *c = acc;
    }
    cum
}

fn sample_body_token<R: Rng + ?Sized>(cum: &[f64], rng: &mut R) -> u32 {
    let u: f64 = rng.random();
    for (i, &c) in cum.iter().enumerate() {
        if u < c {
            return (i + 1) as u32;
        }
    }
    cum.len() as u32
}

/// Samples a response of exactly `len` tokens: `len − 1` body tokens from
/// the teacher at `temperature`, then the terminator.
fn sample_response<R: Rng + ?Sized>(
    teacher: &[Vec<f64>],
    start_ctx: u32,
    len: usize,
    temperature: f64,
    rng: &mut R,
) -> TokenSeq {
    let mut tokens = Vec::with_capacity(len);
    let mut ctx = start_ctx;
    for _ in 0..len - 1 {
        let tok = sample_body_token(&body_cumdist(&teacher[ctx as usize], temperature), rng);
        tokens.push(tok);
        ctx = tok;
    }
    tokens.push(END_TOKEN);
    TokenSeq::new(tokens)
}

fn sample_len<R: Rng + ?Sized>(range: &RangeInclusive<usize>, rng: &mut R) -> usize {
    rng.random_range(range.clone())
}

/// Generates a dataset per `spec`; deterministic for a fixed seed.
pub fn generate(spec: &GenSpec) -> Result<Dataset> {
    spec.validate()?;
    let v = spec.vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let teacher: Vec<Vec<f64>> = (0..v)
        .map(|_| (0..v).map(|_| rng.sample(StandardNormal)).collect())
        .collect();

    let chosen_temp = 1.0 / spec.teacher_sharpness;
    let mut records = Vec::with_capacity(spec.n_pairs);
    for _ in 0..spec.n_pairs {
        let prompt = TokenSeq::new(
            (0..spec.prompt_len)
                .map(|_| rng.random_range(1..v as u32))
                .collect(),
        );
        let ctx = prompt.last().expect("prompt_len validated ≥ 1");
        let len_w = sample_len(&spec.chosen_len_range, &mut rng);
        let len_l = if spec.length_bias {
            // ~2× the paired chosen length, with ±1 jitter so the ratio is a
            // distributional fact rather than a hard-coded constant.
            (2 * len_w + rng.random_range(0..=2)).saturating_sub(1).max(1)
        } else {
            sample_len(&spec.rejected_len_range, &mut rng)
        };
        let chosen = sample_response(&teacher, ctx, len_w, chosen_temp, &mut rng);
        let rejected = sample_response(&teacher, ctx, len_l, spec.noise_temp, &mut rng);
        records.push(PreferenceRecord {
            prompt,
            chosen,
            rejected,
        });
    }
    Ok(Dataset {
        vocab_size: v,
        records,
    })
}

fn format_seq(seq: &TokenSeq) -> String {
    seq.tokens()
        .iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Serializes a dataset to its plain-text file format (atomically).
pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    fsio::write_atomic(path, &render_dataset(dataset))
}

/// The exact file contents for a dataset, used by both the writer and code
/// that wants to hash what will be written.
pub fn render_dataset(dataset: &Dataset) -> String {
    let mut out = format!("# prefopt-v1 vocab={}\n", dataset.vocab_size);
    for rec in &dataset.records {
        out.push_str(&format_seq(&rec.prompt));
        out.push_str(" | ");
        out.push_str(&format_seq(&rec.chosen));
        out.push_str(" | ");
        out.push_str(&format_seq(&rec.rejected));
        out.push('\n');
    }
    out
}

fn parse_seq(path: &Path, line_no: usize, field: &str, what: &str, vocab: usize) -> Result<TokenSeq> {
    let mut tokens = Vec::new();
    for part in field.split_whitespace() {
        let tok: u32 = part.parse().map_err(|_| {
            Error::parse(path, line_no, format!("invalid token id {part:?} in {what}"))
        })?;
        if tok as usize >= vocab {
            return Err(Error::parse(
                path,
                line_no,
                format!("token id {tok} in {what} exceeds vocabulary of {vocab}"),
            ));
        }
        tokens.push(tok);
    }
    if tokens.is_empty() {
        return Err(Error::parse(path, line_no, format!("empty {what} field")));
    }
    Ok(TokenSeq::new(tokens))
}

/// Parses a dataset file; errors carry the 1-based offending line number.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let contents = fsio::read_to_string(path)?;
    parse_dataset(path, &contents)
}

/// Parses dataset file contents; `path` only labels error messages.
pub fn parse_dataset(path: &Path, contents: &str) -> Result<Dataset> {
    let mut lines = contents.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "empty file; expected header".to_string()))?;
    let vocab_size = header
        .strip_prefix("# prefopt-v1 vocab=")
        .and_then(|v| v.parse::<usize>().ok())
        .ok_or_else(|| {
            Error::parse(
                path,
                1,
                format!("expected header `# prefopt-v1 vocab=<V>`, got {header:?}"),
            )
        })?;
    if vocab_size < 2 {
        return Err(Error::parse(
            path,
            1,
            format!("vocabulary size must be at least 2, got {vocab_size}"),
        ));
    }

    let mut records = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.is_empty() {
            return Err(Error::parse(path, line_no, "empty line".to_string()));
        }
        let fields: Vec<&str> = line.split(" | ").collect();
        if fields.len() != 3 {
            return Err(Error::parse(
                path,
                line_no,
                format!(
                    "expected 3 ` | `-separated fields (prompt | chosen | rejected), got {}",
                    fields.len()
                ),
            ));
        }
        records.push(PreferenceRecord {
            prompt: parse_seq(path, line_no, fields[0], "prompt", vocab_size)?,
            chosen: parse_seq(path, line_no, fields[1], "chosen", vocab_size)?,
            rejected: parse_seq(path, line_no, fields[2], "rejected", vocab_size)?,
        });
    }
    Ok(Dataset {
        vocab_size,
        records,
    })
}
