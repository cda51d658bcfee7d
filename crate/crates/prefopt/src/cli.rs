//! Command-line frontend: dataset generation, training runs, loss
//! comparisons, gradient certification, and checkpoint evaluation.
//!
//! Every command is a pure function of its flags, input files, and seed, so
//! reruns produce byte-identical outputs. File-writing commands first record
//! a manifest (command, resolved flags, seed, dataset hash, output paths,
//! tool version) before any other artifact, and all files are written
//! atomically.
//!
//! Exit codes: 0 success, 2 usage, 3 numeric abort, 4 tolerance failure,
//! 5 I/O or file-format error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::data::{parse_dataset, render_dataset, Dataset, GenSpec, PreferenceRecord};
use crate::fsio;
use crate::gradients::{grad_check, GradReport};
use crate::losses::{DpoConfig, LmpoConfig, LossConfig, MarginVariant, SimpoConfig};
use crate::normstate::EmaNormState;
use crate::policy::{BigramPolicy, TokenSeq};
use crate::trainer::{self, TrainConfig};
use crate::{Error, Result};

const EXIT_OK: i32 = 0;
const EXIT_USAGE: i32 = 2;
const EXIT_NUMERIC: i32 = 3;
const EXIT_TOLERANCE: i32 = 4;
const EXIT_IO: i32 = 5;

#[derive(Parser)]
#[command(
    name = "prefopt",
    version,
    about = "Desk-scale preference-optimization laboratory over a bigram policy"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic preference dataset.
    GenData(GenDataArgs),
    /// Train a policy on a dataset and write metrics + checkpoint.
    Train(TrainArgs),
    /// Run matched training runs across losses or λ values into one CSV.
    Compare(CompareArgs),
    /// Certify analytic gradients against a finite-difference oracle.
    GradCheck(GradCheckArgs),
    /// Score a checkpoint against a dataset and print a summary line.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Vocabulary size (token 0 is the end-of-sequence marker).
    #[arg(long, default_value_t = 8)]
    vocab: usize,
    /// Number of preference pairs.
    #[arg(long, default_value_t = 2000)]
    pairs: usize,
    #[arg(long = "prompt-len", default_value_t = 3)]
    prompt_len: usize,
    #[arg(long = "chosen-min", default_value_t = 4)]
    chosen_min: usize,
    #[arg(long = "chosen-max", default_value_t = 9)]
    chosen_max: usize,
    #[arg(long = "rejected-min", default_value_t = 4)]
    rejected_min: usize,
    #[arg(long = "rejected-max", default_value_t = 9)]
    rejected_max: usize,
    /// Teacher sharpness; chosen responses sample at temperature 1/sharpness.
    #[arg(long, default_value_t = 1.0)]
    sharpness: f64,
    /// Temperature (≥ 1) for rejected responses.
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    /// Make rejected responses about twice as long as chosen ones.
    #[arg(long = "length-bias")]
    length_bias: bool,
    #[arg(long, env = "PREFOPT_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Loss and hyperparameter flags shared by `train` and `compare`.
#[derive(Args, Clone)]
struct LossFlags {
    /// Starting point for the margin-loss hyperparameters.
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(LmpoConfig::PRESET_NAMES))]
    preset: Option<String>,
    #[arg(long)]
    beta: Option<f64>,
    /// Handicap term of the margin loss.
    #[arg(long = "log-h")]
    log_h: Option<f64>,
    /// Margin weight of the margin loss.
    #[arg(long)]
    lambda: Option<f64>,
    /// Margin variant: power5, cube, log, or sigmoid.
    #[arg(long)]
    variant: Option<MarginVariant>,
    #[arg(long = "log-alpha")]
    log_alpha: Option<f64>,
    #[arg(long = "sigmoid-temp")]
    sigmoid_temp: Option<f64>,
    /// Disable z-score margin normalization.
    #[arg(long = "no-zscore")]
    no_zscore: bool,
    /// Disable average-length margin normalization.
    #[arg(long = "no-lennorm")]
    no_lennorm: bool,
    /// Target margin of the simpo baseline.
    #[arg(long)]
    gamma: Option<f64>,
}

/// Training-loop flags shared by `train` and `compare`.
#[derive(Args, Clone)]
struct LoopFlags {
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long = "batch-size", default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    /// Record the sampled-length metric every this many steps.
    #[arg(long = "eval-every", default_value_t = 50)]
    eval_every: usize,
    #[arg(long = "sample-max-len", default_value_t = 32)]
    sample_max_len: usize,
    /// Decay of the margin normalizer's running statistics.
    #[arg(long = "ema-decay", default_value_t = 0.9)]
    ema_decay: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Which loss to optimize: lmpo, simpo, or dpo.
    #[arg(long)]
    loss: String,
    #[command(flatten)]
    loss_flags: LossFlags,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    loop_flags: LoopFlags,
    #[arg(long, env = "PREFOPT_SEED", default_value_t = 0)]
    seed: u64,
    /// Output directory for manifest.txt, metrics.csv, and checkpoint.txt.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Comma-separated losses to run side by side, e.g. `lmpo,simpo`.
    #[arg(long, conflicts_with = "lambdas")]
    losses: Option<String>,
    /// Loss for a λ sweep (defaults to lmpo; only lmpo is valid).
    #[arg(long)]
    loss: Option<String>,
    /// Comma-separated λ values to sweep, e.g. `0.05,0.2,1.0`.
    #[arg(long)]
    lambdas: Option<String>,
    /// Comma-separated seeds; defaults to the single --seed value.
    #[arg(long)]
    seeds: Option<String>,
    #[command(flatten)]
    loss_flags: LossFlags,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    loop_flags: LoopFlags,
    #[arg(long, env = "PREFOPT_SEED", default_value_t = 0)]
    seed: u64,
    /// Output CSV path (a sibling `.manifest` file is written first).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Random instances to certify.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Maximum acceptable relative error.
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    /// Restrict to one margin variant (default covers all of them).
    #[arg(long)]
    variant: Option<MarginVariant>,
    /// Restrict to one loss (default covers lmpo, simpo, and dpo).
    #[arg(long)]
    loss: Option<String>,
    #[arg(long, env = "PREFOPT_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long = "sample-max-len", default_value_t = 32)]
    sample_max_len: usize,
    #[arg(long, env = "PREFOPT_SEED", default_value_t = 0)]
    seed: u64,
}

/// Parses the process arguments, runs the selected command, and returns the
/// process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = err.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::GenData(args) => cmd_gen_data(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Compare(args) => cmd_compare(&args),
        Command::GradCheck(args) => cmd_grad_check(&args),
        Command::Eval(args) => cmd_eval(&args),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code_for(&err)
        }
    }
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Parse { .. } | Error::Io { .. } => EXIT_IO,
        Error::NonFinite { .. } => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Renders and writes the run manifest; called before any other output.
fn write_manifest(
    path: &Path,
    command: &str,
    flags: &str,
    seed: u64,
    data_sha256: &str,
    outputs: &[&Path],
) -> Result<()> {
    let outputs: Vec<String> = outputs
        .iter()
        .map(|p| p.display().to_string())
        .collect();
    let contents = format!(
        "# prefopt-manifest-v1\ntool=prefopt {}\ncommand={command}\nflags={flags}\nseed={seed}\ndata_sha256={data_sha256}\noutputs={}\n",
        env!("CARGO_PKG_VERSION"),
        outputs.join(" "),
    );
    fsio::write_atomic(path, &contents)
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<i32> {
    let spec = GenSpec {
        vocab_size: args.vocab,
        n_pairs: args.pairs,
        prompt_len: args.prompt_len,
        chosen_len_range: args.chosen_min..=args.chosen_max,
        rejected_len_range: args.rejected_min..=args.rejected_max,
        teacher_sharpness: args.sharpness,
        noise_temp: args.noise,
        length_bias: args.length_bias,
        seed: args.seed,
    };
    let dataset = crate::data::generate(&spec)?;
    let contents = render_dataset(&dataset);
    let flags = format!(
        "vocab={} pairs={} prompt-len={} chosen-min={} chosen-max={} rejected-min={} rejected-max={} sharpness={} noise={} length-bias={} seed={} out={}",
        args.vocab,
        args.pairs,
        args.prompt_len,
        args.chosen_min,
        args.chosen_max,
        args.rejected_min,
        args.rejected_max,
        args.sharpness,
        args.noise,
        args.length_bias,
        args.seed,
        args.out.display(),
    );
    let manifest_path = manifest_sibling(&args.out);
    write_manifest(
        &manifest_path,
        "gen-data",
        &flags,
        args.seed,
        &sha256_hex(contents.as_bytes()),
        &[&args.out],
    )?;
    fsio::write_atomic(&args.out, &contents)?;
    Ok(EXIT_OK)
}

/// Manifest path for a single-file output: `<file>.manifest` alongside it.
fn manifest_sibling(out: &Path) -> PathBuf {
    let mut name = out
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".manifest");
    out.with_file_name(name)
}

/// Resolves the loss selection plus hyperparameter flags into a loss config,
/// rejecting flags that do not apply to the selected loss.
fn resolve_loss(loss: &str, flags: &LossFlags) -> Result<LossConfig> {
    let reject = |cond: bool, flag: &str| {
        if cond {
            Err(Error::InvalidInput(format!(
                "--{flag} does not apply to the {loss} loss"
            )))
        } else {
            Ok(())
        }
    };
    match loss {
        "lmpo" => {
            reject(flags.gamma.is_some(), "gamma")?;
            let mut cfg = match &flags.preset {
                Some(name) => LmpoConfig::preset(name).ok_or_else(|| {
                    Error::InvalidInput(format!("unknown preset {name:?}"))
                })?,
                None => LmpoConfig::default(),
            };
            if let Some(beta) = flags.beta {
                cfg.beta = beta;
            }
            if let Some(log_h) = flags.log_h {
                cfg.log_h = log_h;
            }
            if let Some(lambda) = flags.lambda {
                cfg.lambda = lambda;
            }
            if let Some(variant) = flags.variant {
                cfg.margin_variant = variant;
            }
            if let Some(log_alpha) = flags.log_alpha {
                cfg.log_alpha = log_alpha;
            }
            if let Some(sigmoid_temp) = flags.sigmoid_temp {
                cfg.sigmoid_temp = sigmoid_temp;
            }
            if flags.no_zscore {
                cfg.use_zscore = false;
            }
            if flags.no_lennorm {
                cfg.use_avg_len_norm = false;
            }
            Ok(LossConfig::Lmpo(cfg))
        }
        "simpo" => {
            for (given, flag) in lmpo_only_flags(flags) {
                reject(given, flag)?;
            }
            let mut cfg = SimpoConfig::default();
            if let Some(beta) = flags.beta {
                cfg.beta = beta;
            }
            if let Some(gamma) = flags.gamma {
                cfg.gamma_target = gamma;
            }
            Ok(LossConfig::Simpo(cfg))
        }
        "dpo" => {
            reject(flags.gamma.is_some(), "gamma")?;
            for (given, flag) in lmpo_only_flags(flags) {
                reject(given, flag)?;
            }
            let mut cfg = DpoConfig::default();
            if let Some(beta) = flags.beta {
                cfg.beta = beta;
            }
            Ok(LossConfig::Dpo(cfg))
        }
        other => Err(Error::InvalidInput(format!(
            "unknown loss {other:?}; expected lmpo, simpo, or dpo"
        ))),
    }
}

fn lmpo_only_flags(flags: &LossFlags) -> [(bool, &'static str); 7] {
    [
        (flags.preset.is_some(), "preset"),
        (flags.log_h.is_some(), "log-h"),
        (flags.lambda.is_some(), "lambda"),
        (flags.variant.is_some(), "variant"),
        (flags.log_alpha.is_some(), "log-alpha"),
        (flags.sigmoid_temp.is_some(), "sigmoid-temp"),
        (flags.no_zscore || flags.no_lennorm, "no-zscore/--no-lennorm"),
    ]
}

/// Canonical rendering of a resolved loss config for manifests.
fn render_loss_flags(loss: &LossConfig) -> String {
    match loss {
        LossConfig::Lmpo(c) => format!(
            "loss=lmpo beta={} log-h={} lambda={} variant={} log-alpha={} sigmoid-temp={} zscore={} lennorm={}",
            c.beta,
            c.log_h,
            c.lambda,
            c.margin_variant,
            c.log_alpha,
            c.sigmoid_temp,
            c.use_zscore,
            c.use_avg_len_norm,
        ),
        LossConfig::Simpo(c) => format!("loss=simpo beta={} gamma={}", c.beta, c.gamma_target),
        LossConfig::Dpo(c) => format!("loss=dpo beta={}", c.beta),
    }
}

fn render_loop_flags(flags: &LoopFlags) -> String {
    format!(
        "steps={} batch-size={} lr={} eval-every={} sample-max-len={} ema-decay={}",
        flags.steps,
        flags.batch_size,
        flags.lr,
        flags.eval_every,
        flags.sample_max_len,
        flags.ema_decay,
    )
}

fn train_config(loss: LossConfig, flags: &LoopFlags, seed: u64) -> TrainConfig {
    TrainConfig {
        loss,
        learning_rate: flags.lr,
        steps: flags.steps,
        batch_size: flags.batch_size,
        seed,
        eval_every: flags.eval_every,
        sample_max_len: flags.sample_max_len,
        ema_decay: flags.ema_decay,
    }
}

fn read_dataset_and_hash(path: &Path) -> Result<(Dataset, String)> {
    let contents = fsio::read_to_string(path)?;
    let dataset = parse_dataset(path, &contents)?;
    Ok((dataset, sha256_hex(contents.as_bytes())))
}

fn cmd_train(args: &TrainArgs) -> Result<i32> {
    let loss = resolve_loss(&args.loss, &args.loss_flags)?;
    let cfg = train_config(loss, &args.loop_flags, args.seed);
    cfg.loss.validate()?;
    let (dataset, data_hash) = read_dataset_and_hash(&args.data)?;

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let manifest_path = args.out.join("manifest.txt");
    let metrics_path = args.out.join("metrics.csv");
    let checkpoint_path = args.out.join("checkpoint.txt");
    let flags = format!(
        "{} {} data={} out={}",
        render_loss_flags(&cfg.loss),
        render_loop_flags(&args.loop_flags),
        args.data.display(),
        args.out.display(),
    );
    write_manifest(
        &manifest_path,
        "train",
        &flags,
        args.seed,
        &data_hash,
        &[&metrics_path, &checkpoint_path],
    )?;

    let outcome = trainer::train(&dataset, &cfg)?;
    trainer::write_metrics_csv(&outcome.metrics, &metrics_path)?;
    trainer::save_checkpoint(&outcome.policy, outcome.norm_state.as_ref(), &checkpoint_path)?;
    Ok(EXIT_OK)
}

fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> Result<Vec<T>> {
    let items: Vec<T> = raw
        .split(',')
        .map(|part| {
            part.trim()
                .parse::<T>()
                .map_err(|_| Error::InvalidInput(format!("invalid {what} value {part:?}")))
        })
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::InvalidInput(format!("empty {what} list")));
    }
    Ok(items)
}

/// One labeled run of a comparison.
struct CompareRun {
    label: String,
    cfg: TrainConfig,
}

fn compare_runs(args: &CompareArgs) -> Result<Vec<CompareRun>> {
    let seeds: Vec<u64> = match &args.seeds {
        Some(raw) => parse_list(raw, "seed")?,
        None => vec![args.seed],
    };
    let mut runs = Vec::new();
    match (&args.losses, &args.lambdas) {
        (Some(losses), None) => {
            if args.loss.is_some() {
                return Err(Error::InvalidInput(
                    "--loss only applies to a --lambdas sweep; use --losses alone".to_string(),
                ));
            }
            for name in parse_list::<String>(losses, "loss")? {
                let loss = resolve_loss(&name, &args.loss_flags)?;
                for &seed in &seeds {
                    runs.push(CompareRun {
                        label: format!("{name}-s{seed}"),
                        cfg: train_config(loss.clone(), &args.loop_flags, seed),
                    });
                }
            }
        }
        (None, Some(lambdas)) => {
            let name = args.loss.as_deref().unwrap_or("lmpo");
            if name != "lmpo" {
                return Err(Error::InvalidInput(format!(
                    "a --lambdas sweep requires the lmpo loss, got {name:?}"
                )));
            }
            let base = resolve_loss(name, &args.loss_flags)?;
            for lambda in parse_list::<f64>(lambdas, "lambda")? {
                let LossConfig::Lmpo(mut cfg) = base.clone() else {
                    unreachable!("the sweep loss is always lmpo");
                };
                cfg.lambda = lambda;
                for &seed in &seeds {
                    runs.push(CompareRun {
                        label: format!("lambda{lambda}-s{seed}"),
                        cfg: train_config(
                            LossConfig::Lmpo(cfg.clone()),
                            &args.loop_flags,
                            seed,
                        ),
                    });
                }
            }
        }
        _ => {
            return Err(Error::InvalidInput(
                "compare needs exactly one of --losses or --lambdas".to_string(),
            ))
        }
    }
    Ok(runs)
}

fn cmd_compare(args: &CompareArgs) -> Result<i32> {
    let runs = compare_runs(args)?;
    for run in &runs {
        run.cfg.loss.validate()?;
    }
    let (dataset, data_hash) = read_dataset_and_hash(&args.data)?;

    let labels: Vec<&str> = runs.iter().map(|r| r.label.as_str()).collect();
    let flags = format!(
        "runs={} {} data={} out={}",
        labels.join(","),
        render_loop_flags(&args.loop_flags),
        args.data.display(),
        args.out.display(),
    );
    write_manifest(
        &manifest_sibling(&args.out),
        "compare",
        &flags,
        args.seed,
        &data_hash,
        &[&args.out],
    )?;

    let mut csv = format!("run,{}\n", trainer::MetricsRow::CSV_HEADER);
    for run in &runs {
        let outcome = trainer::train(&dataset, &run.cfg)?;
        for row in &outcome.metrics {
            csv.push_str(&run.label);
            csv.push(',');
            csv.push_str(&row.to_csv());
            csv.push('\n');
        }
    }
    fsio::write_atomic(&args.out, &csv)?;
    Ok(EXIT_OK)
}

/// The certification grid: every margin variant crossed with both
/// normalization switches, plus both baselines; trial `i` draws its
/// configuration from entry `i mod len`.
fn grad_check_grid(
    variant: Option<MarginVariant>,
    loss: Option<&str>,
) -> Result<Vec<GridEntry>> {
    let variants = match variant {
        Some(v) => vec![v],
        None => MarginVariant::ALL.to_vec(),
    };
    let mut grid = Vec::new();
    let want = |name: &str| loss.is_none() || loss == Some(name);
    if want("lmpo") {
        for &margin_variant in &variants {
            for use_avg_len_norm in [true, false] {
                for use_zscore in [true, false] {
                    grid.push(GridEntry::Lmpo {
                        margin_variant,
                        use_avg_len_norm,
                        use_zscore,
                    });
                }
            }
        }
    }
    // A variant restriction targets the margin loss; the baselines have no
    // margin variant to restrict.
    if variant.is_none() {
        if want("simpo") {
            grid.push(GridEntry::Simpo);
        }
        if want("dpo") {
            grid.push(GridEntry::Dpo);
        }
    }
    if grid.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no gradient-check configurations match loss {loss:?}"
        )));
    }
    Ok(grid)
}

#[derive(Clone, Copy)]
enum GridEntry {
    Lmpo {
        margin_variant: MarginVariant,
        use_avg_len_norm: bool,
        use_zscore: bool,
    },
    Simpo,
    Dpo,
}

fn random_policy(vocab: usize, rng: &mut ChaCha8Rng) -> BigramPolicy {
    // Mild spread keeps every conditional probability well above the
    // finite-difference noise floor, so per-entry relative errors stay
    // meaningful on every parameter the loss touches.
    let logits: Vec<f64> = (0..vocab * vocab)
        .map(|_| 0.6 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    BigramPolicy::from_logits(vocab, logits).expect("sampled logits are finite")
}

fn pool_tokens(pool: &[u32], len: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    (0..len)
        .map(|_| pool[rng.random_range(0..pool.len())])
        .collect()
}

/// Random certification instance with a non-degenerate gradient.
///
/// The two responses draw their bodies from disjoint token pools and share
/// only the prompt's final context, which the longer response deliberately
/// revisits; the shorter response stays below half the longer one's length.
/// With fully symmetric random sequences, a context visited equally often by
/// both responses produces analytic entries that are exactly zero by
/// cancellation while the oracle still sees scoring round-off — a relative
/// error near 1 at ~1e-11 absolute. This construction keeps every touched
/// parameter's gradient bounded away from that noise floor.
fn random_record(vocab: usize, rng: &mut ChaCha8Rng) -> PreferenceRecord {
    let v = vocab as u32;
    let shared_ctx = rng.random_range(0..v);
    let mut others: Vec<u32> = (0..v).filter(|&t| t != shared_ctx).collect();
    others.shuffle(rng);
    let split = rng.random_range(1..others.len());
    let (long_pool, short_pool) = others.split_at(split);

    let short_len = rng.random_range(1..=2usize);
    let long_len = loop {
        let len = rng.random_range(3..=12usize);
        // Equal per-token context weights (2/long vs 1/short) would cancel
        // exactly on the margin-free losses.
        if len != 2 * short_len {
            break len;
        }
    };
    let mut long = pool_tokens(long_pool, long_len, rng);
    // Not the final position, so the revisit really serves as a context.
    let revisit = rng.random_range(0..long_len - 1);
    long[revisit] = shared_ctx;
    let short = pool_tokens(short_pool, short_len, rng);

    let mut prompt: Vec<u32> = (1..rng.random_range(1..=3usize))
        .map(|_| rng.random_range(0..v))
        .collect();
    prompt.push(shared_ctx);

    let (chosen, rejected) = if rng.random_bool(0.5) {
        (short, long)
    } else {
        (long, short)
    };
    PreferenceRecord {
        prompt: TokenSeq::new(prompt),
        chosen: TokenSeq::new(chosen),
        rejected: TokenSeq::new(rejected),
    }
}

fn cmd_grad_check(args: &GradCheckArgs) -> Result<i32> {
    if args.trials == 0 {
        return Err(Error::InvalidInput("trials must be at least 1".to_string()));
    }
    if !(args.tol > 0.0) {
        return Err(Error::InvalidInput(format!(
            "tolerance must be positive, got {}",
            args.tol
        )));
    }
    let grid = grad_check_grid(args.variant, args.loss.as_deref())?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut worst = GradReport {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        n_params_checked: 0,
        analytic_norm: 0.0,
        numeric_norm: 0.0,
    };
    for trial in 0..args.trials {
        let entry = grid[trial % grid.len()];
        let vocab = rng.random_range(4..=8usize);
        let policy = random_policy(vocab, &mut rng);
        let sample = vec![random_record(vocab, &mut rng)];
        let beta = rng.random_range(1.0..=3.0);
        let (loss, reference, state) = match entry {
            GridEntry::Lmpo {
                margin_variant,
                use_avg_len_norm,
                use_zscore,
            } => {
                // Trials at multiples of four pin λ to exactly 0 so the
                // margin-free path stays covered.
                let lambda = if trial % 4 == 0 {
                    0.0
                } else {
                    rng.random_range(0.05..=1.5)
                };
                let cfg = LmpoConfig {
                    beta,
                    log_h: rng.random_range(-1.0..=2.0),
                    lambda,
                    margin_variant,
                    log_alpha: rng.random_range(1.0..=4.0),
                    sigmoid_temp: rng.random_range(0.5..=2.0),
                    use_avg_len_norm,
                    use_zscore,
                };
                let state = use_zscore.then(|| {
                    EmaNormState::from_parts(
                        rng.random_range(-1.0..=1.0),
                        rng.random_range(0.2..=2.0),
                        0.9,
                        rng.random_range(1..=100),
                    )
                    .expect("sampled statistics are valid")
                });
                (LossConfig::Lmpo(cfg), None, state)
            }
            GridEntry::Simpo => {
                let cfg = SimpoConfig {
                    beta,
                    gamma_target: rng.random_range(-0.5..=1.0),
                };
                (LossConfig::Simpo(cfg), None, None)
            }
            GridEntry::Dpo => {
                let reference = random_policy(vocab, &mut rng);
                (LossConfig::Dpo(DpoConfig { beta }), Some(reference), None)
            }
        };
        let report = grad_check(
            &policy,
            reference.as_ref(),
            &sample,
            &loss,
            state.as_ref(),
            1e-5,
        )?;
        if report.max_rel_err > worst.max_rel_err {
            worst.analytic_norm = report.analytic_norm;
            worst.numeric_norm = report.numeric_norm;
            worst.max_rel_err = report.max_rel_err;
        }
        worst.max_abs_err = worst.max_abs_err.max(report.max_abs_err);
        worst.n_params_checked += report.n_params_checked;
    }
    println!("{worst}");
    if worst.max_rel_err <= args.tol {
        Ok(EXIT_OK)
    } else {
        eprintln!(
            "gradient check failed: max_rel_err {:e} exceeds tolerance {:e}",
            worst.max_rel_err, args.tol
        );
        Ok(EXIT_TOLERANCE)
    }
}

fn cmd_eval(args: &EvalArgs) -> Result<i32> {
    let (policy, _state) = trainer::load_checkpoint(&args.checkpoint)?;
    let (dataset, _hash) = read_dataset_and_hash(&args.data)?;
    if policy.vocab_size() != dataset.vocab_size {
        return Err(Error::InvalidInput(format!(
            "checkpoint vocabulary {} does not match dataset vocabulary {}",
            policy.vocab_size(),
            dataset.vocab_size
        )));
    }
    let summary = trainer::evaluate(&policy, &dataset, args.sample_max_len, args.seed)?;
    println!("{summary}");
    Ok(EXIT_OK)
}
