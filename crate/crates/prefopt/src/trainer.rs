//! Deterministic mini-batch gradient descent over any implemented loss,
//! with per-step metrics, evaluation, and checkpoint I/O.
//!
//! The loop is intentionally plain: θ starts at zero (the uniform policy,
//! which is also the frozen reference for the reference-anchored loss),
//! batches come from a seeded permutation that reshuffles on wraparound,
//! and the update is full-precision gradient descent with a constant
//! learning rate. Every source of randomness is a numbered stream of one
//! seeded generator, so a (dataset, config) pair fixes every bit of the
//! run:
//!
//! ```text
//! stream 0 — batch order      stream 1 — in-training sampling
//! stream 2 — evaluation sampling
//! ```
//!
//! Batch order depends only on the seed and dataset size — never on the
//! loss — so runs that differ only in loss see identical batches, which is
//! what makes matched comparisons (and the λ = 0 bit-identity to the
//! baseline) meaningful.
//!
//! Per step: score the batch, fold the batch's raw margins into the
//! normalizer first (the current batch is part of "the training process so
//! far"), then compute losses and analytic gradients with the post-update
//! statistics, record metrics for the pre-update parameters, and step.
//! Reward accuracy compares the two average log-probs; exact ties score
//! half a win, so the uniform initial policy sits at exactly 1/2.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::fsio;
use crate::gradients::{pair_outcome, score_pair, PairOutcome, ScoredPairGrads};
use crate::losses::{margin_power5, scaled_prob, LossConfig};
use crate::normstate::{EmaNormState, DEFAULT_DECAY, DEFAULT_EPSILON};
use crate::policy::{BigramPolicy, GradTable};
use crate::{Error, Result};

/// Everything that defines a training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Sampled-length metrics are recorded every this many steps.
    pub eval_every: usize,
    pub sample_max_len: usize,
    /// Decay of the margin normalizer's running statistics.
    pub ema_decay: f64,
}

impl TrainConfig {
    pub fn new(loss: LossConfig) -> Self {
        TrainConfig {
            loss,
            learning_rate: 0.5,
            steps: 500,
            batch_size: 64,
            seed: 0,
            eval_every: 50,
            sample_max_len: 32,
            ema_decay: DEFAULT_DECAY,
        }
    }

    pub fn validate(&self, dataset_len: usize) -> Result<()> {
        self.loss.validate()?;
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidInput(format!(
                "learning rate must be a nonnegative finite number, got {}",
                self.learning_rate
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidInput("steps must be at least 1".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidInput(
                "batch_size must be at least 1".to_string(),
            ));
        }
        if self.batch_size > dataset_len {
            return Err(Error::InvalidInput(format!(
                "batch_size {} exceeds the dataset's {} pairs",
                self.batch_size, dataset_len
            )));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidInput(
                "eval_every must be at least 1".to_string(),
            ));
        }
        if self.sample_max_len == 0 {
            return Err(Error::InvalidInput(
                "sample_max_len must be at least 1".to_string(),
            ));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::InvalidInput(format!(
                "EMA decay must lie strictly inside (0, 1), got {}",
                self.ema_decay
            )));
        }
        Ok(())
    }
}

/// One row of the training metrics CSV; all values reflect the parameters
/// *before* that step's update.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub chosen_avg_lp: f64,
    pub rejected_avg_lp: f64,
    pub margin_raw: f64,
    pub margin_norm: f64,
    pub reward_acc: f64,
    /// Mean sampled response length; `None` on non-eval steps.
    pub sample_len: Option<f64>,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str =
        "step,loss,chosen_avg_lp,rejected_avg_lp,margin_raw,margin_norm,reward_acc,sample_len";

    pub fn to_csv(&self) -> String {
        let sample = match self.sample_len {
            Some(len) => len.to_string(),
            None => String::new(),
        };
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.loss,
            self.chosen_avg_lp,
            self.rejected_avg_lp,
            self.margin_raw,
            self.margin_norm,
            self.reward_acc,
            sample
        )
    }
}

/// Renders the full metrics CSV (header + one line per step).
pub fn render_metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(MetricsRow::CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.to_csv());
        out.push('\n');
    }
    out
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    fsio::write_atomic(path, &render_metrics_csv(rows))
}

/// A finished training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: BigramPolicy,
    pub metrics: Vec<MetricsRow>,
    /// Final normalizer state, when the run maintained one.
    pub norm_state: Option<EmaNormState>,
}

/// Seeded index permutation that reshuffles each time it wraps around, so a
/// batch may straddle an epoch boundary but the sequence is fully
/// deterministic and loss-independent.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Batcher { order, pos: 0, rng }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            batch.push(self.order[self.pos]);
            self.pos += 1;
        }
        batch
    }
}

fn reward_accuracy(pairs: &[&ScoredPairGrads]) -> f64 {
    let mut score = 0.0;
    for sg in pairs {
        if sg.scored.avg_lp_w > sg.scored.avg_lp_l {
            score += 1.0;
        } else if sg.scored.avg_lp_w == sg.scored.avg_lp_l {
            score += 0.5;
        }
    }
    score / pairs.len() as f64
}

/// Runs the full training loop; deterministic for a fixed (dataset, cfg).
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if dataset.records.is_empty() {
        return Err(Error::InvalidInput(
            "training requires a non-empty dataset".to_string(),
        ));
    }
    cfg.validate(dataset.records.len())?;

    let mut policy = BigramPolicy::zeros(dataset.vocab_size)?;
    let reference = cfg.loss.needs_reference().then(|| policy.clone());
    let mut norm_state = match &cfg.loss {
        LossConfig::Lmpo(lmpo) if lmpo.use_zscore => {
            Some(EmaNormState::new(cfg.ema_decay, DEFAULT_EPSILON)?)
        }
        _ => None,
    };

    let mut batcher = Batcher::new(dataset.records.len(), cfg.seed);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    sample_rng.set_stream(1);

    let mut metrics = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let batch = batcher.next_batch(cfg.batch_size);
        let scored: Vec<ScoredPairGrads> = batch
            .iter()
            .map(|&i| score_pair(&policy, reference.as_ref(), &dataset.records[i]))
            .collect::<Result<_>>()?;

        // The normalizer sees the current batch before the batch is
        // normalized: the running statistics include "now".
        if let (Some(state), LossConfig::Lmpo(lmpo)) = (norm_state.as_mut(), &cfg.loss) {
            let margins: Vec<f64> = scored
                .iter()
                .map(|sg| crate::losses::pair_margin(&sg.scored, lmpo))
                .collect();
            state.update(&margins)?;
        }

        let k = batch.len() as f64;
        let mut mean_loss = 0.0;
        let mut mean_grad = GradTable::zeros(policy.vocab_size());
        let mut mean_margin_raw = 0.0;
        let mut mean_margin_norm = 0.0;
        let mut mean_avg_w = 0.0;
        let mut mean_avg_l = 0.0;
        for sg in &scored {
            let PairOutcome {
                loss,
                grad,
                margin_raw,
                margin_norm,
            } = pair_outcome(sg, &cfg.loss, norm_state.as_ref())?;
            mean_loss += loss / k;
            mean_grad.scaled_add(1.0 / k, &grad);
            // Baseline losses carry no margin; log the default-variant
            // unscaled margin as a diagnostic so the column stays comparable.
            let diagnostic = || {
                margin_power5(
                    scaled_prob(sg.scored.avg_lp_w, 1.0),
                    scaled_prob(sg.scored.avg_lp_l, 1.0),
                )
            };
            mean_margin_raw += margin_raw.unwrap_or_else(diagnostic) / k;
            mean_margin_norm += margin_norm.unwrap_or_else(diagnostic) / k;
            mean_avg_w += sg.scored.avg_lp_w / k;
            mean_avg_l += sg.scored.avg_lp_l / k;
        }
        if !mean_loss.is_finite() || !mean_grad.all_finite() {
            return Err(Error::NonFinite {
                what: format!("loss or gradient at step {step}"),
            });
        }

        let sample_len = if step % cfg.eval_every == 0 {
            let mut total = 0.0;
            for &i in &batch {
                let s = policy.sample(
                    &dataset.records[i].prompt,
                    cfg.sample_max_len,
                    &mut sample_rng,
                )?;
                total += s.len() as f64;
            }
            Some(total / k)
        } else {
            None
        };

        metrics.push(MetricsRow {
            step,
            loss: mean_loss,
            chosen_avg_lp: mean_avg_w,
            rejected_avg_lp: mean_avg_l,
            margin_raw: mean_margin_raw,
            margin_norm: mean_margin_norm,
            reward_acc: reward_accuracy(&scored.iter().collect::<Vec<_>>()),
            sample_len,
        });

        policy.gradient_step(&mean_grad, cfg.learning_rate);
    }

    Ok(TrainOutcome {
        policy,
        metrics,
        norm_state,
    })
}

/// Evaluation summary over a dataset; printed as a single `key=value` line.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub reward_acc: f64,
    pub mean_chosen_avg_lp: f64,
    pub mean_rejected_avg_lp: f64,
    pub mean_sample_len: f64,
}

impl std::fmt::Display for EvalSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "reward_acc={} mean_chosen_avg_lp={} mean_rejected_avg_lp={} mean_sample_len={}",
            self.reward_acc, self.mean_chosen_avg_lp, self.mean_rejected_avg_lp, self.mean_sample_len
        )
    }
}

/// Scores every pair and draws one sample per prompt (on the dedicated
/// evaluation stream) for the length statistic.
pub fn evaluate(
    policy: &BigramPolicy,
    dataset: &Dataset,
    sample_max_len: usize,
    seed: u64,
) -> Result<EvalSummary> {
    if dataset.records.is_empty() {
        return Err(Error::InvalidInput(
            "evaluation requires a non-empty dataset".to_string(),
        ));
    }
    if sample_max_len == 0 {
        return Err(Error::InvalidInput(
            "sample_max_len must be at least 1".to_string(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let n = dataset.records.len() as f64;
    let mut score = 0.0;
    let mut mean_w = 0.0;
    let mut mean_l = 0.0;
    let mut mean_len = 0.0;
    for rec in &dataset.records {
        let avg_w = policy.avg_logprob(&rec.prompt, &rec.chosen)?;
        let avg_l = policy.avg_logprob(&rec.prompt, &rec.rejected)?;
        if avg_w > avg_l {
            score += 1.0;
        } else if avg_w == avg_l {
            score += 0.5;
        }
        mean_w += avg_w / n;
        mean_l += avg_l / n;
        mean_len += policy.sample(&rec.prompt, sample_max_len, &mut rng)?.len() as f64 / n;
    }
    Ok(EvalSummary {
        reward_acc: score / n,
        mean_chosen_avg_lp: mean_w,
        mean_rejected_avg_lp: mean_l,
        mean_sample_len: mean_len,
    })
}

/// Writes a checkpoint: a header, the normalizer line when a state exists,
/// then one decimal logit row per context. The shortest-round-trip float
/// formatting makes load∘save the identity.
pub fn save_checkpoint(
    policy: &BigramPolicy,
    norm_state: Option<&EmaNormState>,
    path: &Path,
) -> Result<()> {
    let v = policy.vocab_size();
    let mut out = format!("# prefopt-checkpoint-v1 vocab={v}\n");
    if let Some(state) = norm_state.filter(|s| s.is_initialized()) {
        out.push_str(&format!(
            "# norm mean={} std={} decay={} step={}\n",
            state.mean(),
            state.std(),
            state.decay(),
            state.step()
        ));
    }
    for ctx in 0..v {
        let row: Vec<String> = policy.logits()[ctx * v..(ctx + 1) * v]
            .iter()
            .map(|x| x.to_string())
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    fsio::write_atomic(path, &out)
}

fn parse_norm_line(path: &Path, line_no: usize, line: &str) -> Result<EmaNormState> {
    let mut mean = None;
    let mut std = None;
    let mut decay = None;
    let mut step = None;
    for part in line
        .strip_prefix("# norm ")
        .expect("caller matched the prefix")
        .split_whitespace()
    {
        let (key, value) = part.split_once('=').ok_or_else(|| {
            Error::parse(path, line_no, format!("malformed normalizer field {part:?}"))
        })?;
        let bad = |what: &str| Error::parse(path, line_no, format!("invalid normalizer {what}"));
        match key {
            "mean" => mean = Some(value.parse::<f64>().map_err(|_| bad("mean"))?),
            "std" => std = Some(value.parse::<f64>().map_err(|_| bad("std"))?),
            "decay" => decay = Some(value.parse::<f64>().map_err(|_| bad("decay"))?),
            "step" => step = Some(value.parse::<u64>().map_err(|_| bad("step"))?),
            _ => return Err(Error::parse(path, line_no, format!("unknown field {key:?}"))),
        }
    }
    match (mean, std, decay, step) {
        (Some(m), Some(s), Some(d), Some(t)) => EmaNormState::from_parts(m, s, d, t)
            .map_err(|e| Error::parse(path, line_no, e.to_string())),
        _ => Err(Error::parse(
            path,
            line_no,
            "normalizer line needs mean, std, decay, and step".to_string(),
        )),
    }
}

/// Loads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(BigramPolicy, Option<EmaNormState>)> {
    let contents = fsio::read_to_string(path)?;
    let mut lines = contents.lines().enumerate().peekable();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "empty file; expected header".to_string()))?;
    let vocab: usize = header
        .strip_prefix("# prefopt-checkpoint-v1 vocab=")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| {
            Error::parse(
                path,
                1,
                format!("expected header `# prefopt-checkpoint-v1 vocab=<V>`, got {header:?}"),
            )
        })?;

    let norm_state = match lines.peek() {
        Some((idx, line)) if line.starts_with("# norm ") => {
            let state = parse_norm_line(path, idx + 1, line)?;
            lines.next();
            Some(state)
        }
        _ => None,
    };

    let mut logits = Vec::with_capacity(vocab * vocab);
    let mut rows = 0;
    for (idx, line) in lines {
        let line_no = idx + 1;
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|x| {
                x.parse::<f64>().map_err(|_| {
                    Error::parse(path, line_no, format!("invalid logit value {x:?}"))
                })
            })
            .collect::<Result<_>>()?;
        if row.len() != vocab {
            return Err(Error::parse(
                path,
                line_no,
                format!("expected {vocab} logits in row, got {}", row.len()),
            ));
        }
        logits.extend(row);
        rows += 1;
    }
    if rows != vocab {
        return Err(Error::parse(
            path,
            1,
            format!("expected {vocab} logit rows, found {rows}"),
        ));
    }
    let policy = BigramPolicy::from_logits(vocab, logits)
        .map_err(|e| Error::parse(path, 1, e.to_string()))?;
    Ok((policy, norm_state))
}
