//! `markbench`: key generation, marking, detection, tracing and experiments
//! for the toy-model watermarking schemes.
//!
//! Results go to stdout as JSON with sorted keys. Exit codes: 0 success,
//! 2 usage, 3 validation, 4 I/O.

mod experiment;
mod failure;
mod keys;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use markbench::analysis::{k_star_detail, simulate_empty_bins};
use markbench::fpcode::FpParams;
use markbench::lbit::{self, detect_all, keygen_l, EncodeOptions, Message, Symbol};
use markbench::multiuser::{mu_keygen, mu_trace_report, mu_wat_with};
use markbench::tokens::{ModelConfig, Prompt, TokenSeq, ToyModel};
use markbench::zerobit::{detect_report, generate, keygen0, GenLimits};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde_json::json;

use failure::{Failure, Outcome};
use keys::{canonical_json, Key, Level};

#[derive(Parser)]
#[command(name = "markbench", version, about = "Watermarking and traitor tracing for toy language models")]
struct Cli {
    /// Seed for every random choice; falls back to MARKBENCH_SEED, then to
    /// the operating system.
    #[arg(long, global = true, env = "MARKBENCH_SEED")]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a zero-bit, L-bit or multi-user key.
    Keygen(KeygenArgs),
    /// Sample a marked text.
    Generate(GenerateArgs),
    /// Zero-bit detection (zero and multi keys).
    Detect(TextArgs),
    /// Extract the embedded message (lbit and multi keys).
    Extract(ExtractArgs),
    /// Detect and trace to users (multi keys).
    Trace(TraceArgs),
    /// Run a scenario file and print the report.
    Experiment(ExperimentArgs),
    /// Analytical bounds.
    #[command(subcommand)]
    Analyze(Analyze),
}

#[derive(Args)]
struct KeygenArgs {
    #[arg(long, value_enum)]
    level: Level,
    #[arg(long)]
    lambda: u32,
    /// Message length (lbit) or code length override (multi).
    #[arg(long = "L")]
    len: Option<usize>,
    /// Number of users (multi).
    #[arg(long)]
    n: Option<usize>,
    /// Largest coalition to trace (multi).
    #[arg(long)]
    c: Option<usize>,
    /// Erasure fraction tolerated by tracing (multi).
    #[arg(long, default_value_t = 0.0)]
    delta: f64,
    /// Code length scale (multi).
    #[arg(long, default_value_t = 100.0)]
    length_scale: f64,
    /// Accusation threshold scale; defaults to the value tuned for the length scale.
    #[arg(long)]
    z_scale: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    key: PathBuf,
    /// Model configuration JSON; defaults to a uniform model with no length cap.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Prompt as a 0/1 string.
    #[arg(long, default_value = "")]
    prompt: String,
    /// Stop after this many blocks.
    #[arg(long)]
    blocks: Option<usize>,
    /// Message to embed (lbit), as a 0/1 string.
    #[arg(long)]
    message: Option<String>,
    /// User id (multi).
    #[arg(long)]
    user: Option<usize>,
    /// Write the text here instead of into the JSON result.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TextArgs {
    #[arg(long)]
    key: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
}

#[derive(Args)]
struct ExtractArgs {
    #[command(flatten)]
    text: TextArgs,
    /// Report `*` where both keys of an index fire.
    #[arg(long)]
    star: bool,
}

#[derive(Args)]
struct TraceArgs {
    #[command(flatten)]
    text: TextArgs,
    /// Only check these user ids.
    #[arg(long, value_delimiter = ',')]
    suspects: Option<Vec<usize>>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Worker threads for independent trials.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Include wall-clock time in the report.
    #[arg(long)]
    timing: bool,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Analyze {
    /// Blocks needed for robust extraction, with a Monte Carlo check.
    Kstar {
        #[arg(long = "L")]
        len: usize,
        #[arg(long)]
        delta: f64,
        #[arg(long)]
        lambda: u32,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
    },
}

fn rng(seed: Option<u64>) -> ChaCha20Rng {
    match seed {
        Some(s) => ChaCha20Rng::seed_from_u64(s),
        None => ChaCha20Rng::from_entropy(),
    }
}

fn read_tokens(path: &Path) -> Outcome<TokenSeq> {
    keys::read_text(path)?
        .trim()
        .parse()
        .map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))
}

fn print(value: &impl serde::Serialize) -> Outcome<()> {
    print!("{}", canonical_json(value)?);
    Ok(())
}

fn wrong_level(cmd: &str, key: &Key, accepted: &str) -> Failure {
    Failure::usage(format!("{cmd} does not take {} keys (expected {accepted})", key.level()))
}

fn keygen(a: KeygenArgs, seed: Option<u64>) -> Outcome<()> {
    let mut r = rng(seed);
    let key = match a.level {
        Level::Zero => Key::Zero(keygen0(a.lambda, &mut r)?),
        Level::Lbit => {
            let len = a.len.ok_or_else(|| Failure::usage("--L is required for lbit keys"))?;
            Key::Lbit(keygen_l(a.lambda, len, &mut r)?)
        }
        Level::Multi => {
            let (Some(n), Some(c)) = (a.n, a.c) else {
                return Err(Failure::usage("--n and --c are required for multi keys"));
            };
            let mut p = FpParams::with_scale(a.lambda, n, c, a.delta, a.length_scale);
            if let Some(z) = a.z_scale {
                p.z_scale = z;
            }
            if let Some(len) = a.len {
                p = p.with_length(len);
            }
            p.validate()?;
            Key::Multi(Box::new(mu_keygen(&p, &mut r)?))
        }
    };
    let files = keys::save(&key, &a.out)?;
    let mut out = json!({ "level": a.level, "files": files });
    if let Key::Multi(k) = &key {
        out["n"] = json!(k.n());
        out["L"] = json!(k.code_length());
    } else if let Key::Lbit(k) = &key {
        out["L"] = json!(k.len());
    }
    print(&out)
}

fn generate_cmd(a: GenerateArgs, seed: Option<u64>) -> Outcome<()> {
    let key = keys::load(&a.key)?;
    let model = match &a.model {
        Some(p) => {
            let cfg: ModelConfig = serde_json::from_str(&keys::read_text(p)?)?;
            ToyModel::try_from(&cfg)?
        }
        None => ToyModel::uniform(usize::MAX),
    };
    if a.blocks.is_none() && model.max_len() == usize::MAX && model.stop_prob() == 0.0 {
        return Err(Failure::usage("the model never stops; pass --blocks or a model with a length cap"));
    }
    let q = Prompt::new(
        a.prompt
            .parse::<TokenSeq>()
            .map_err(|e| Failure::usage(format!("--prompt: {e}")))?,
    )?;
    let mut r = rng(seed);
    let opts = EncodeOptions {
        block_budget: a.blocks,
        policy: None,
    };
    let (text, blocks) = match &key {
        Key::Zero(k) => {
            let limits = GenLimits {
                max_tokens: None,
                max_blocks: a.blocks,
            };
            let g = generate(k, &model, &k.policy(), &q, &mut r, limits);
            let n = g.blocks.len();
            (g.text, n)
        }
        Key::Lbit(k) => {
            let m: Message = a
                .message
                .as_deref()
                .ok_or_else(|| Failure::usage("--message is required for lbit keys"))?
                .parse()
                .map_err(|e| Failure::usage(format!("--message: {e}")))?;
            let e = lbit::encode_with(k, &m, &model, &q, &mut r, &opts)?;
            (e.text, e.blocks.len())
        }
        Key::Multi(k) => {
            let u = a.user.ok_or_else(|| Failure::usage("--user is required for multi keys"))?;
            let e = mu_wat_with(k, u, &q, &model, &mut r, &opts)?;
            (e.text, e.blocks.len())
        }
    };
    let mut out = json!({
        "level": key.level(),
        "tokens": text.len(),
        "blocks": blocks,
        "terminated": text.is_terminated(),
    });
    match &a.out {
        Some(p) => {
            keys::write_text(p, &format!("{text}\n"))?;
            out["out"] = json!(p);
        }
        None => out["text"] = json!(text.to_string()),
    }
    print(&out)
}

fn detect_cmd(a: TextArgs) -> Outcome<()> {
    let key = keys::load(&a.key)?;
    let text = read_tokens(&a.input)?;
    match &key {
        Key::Zero(k) => print(&detect_report(k, &text)),
        Key::Multi(k) => {
            let d = detect_all(&k.sk, &text);
            let m_hat = d.message();
            print(&json!({
                "detected": !m_hat.is_all_erased(),
                "erasures": m_hat.count(Symbol::Erased),
                "detect_calls": d.detect_calls,
            }))
        }
        Key::Lbit(_) => Err(wrong_level("detect", &key, "zero or multi")),
    }
}

fn extract_cmd(a: ExtractArgs) -> Outcome<()> {
    let key = keys::load(&a.text.key)?;
    let text = read_tokens(&a.text.input)?;
    let sk = match &key {
        Key::Lbit(k) => k,
        Key::Multi(k) => &k.sk,
        Key::Zero(_) => return Err(wrong_level("extract", &key, "lbit or multi")),
    };
    let d = detect_all(sk, &text);
    let m_hat = if a.star { d.message_star() } else { d.message() };
    print(&json!({
        "message": m_hat.to_string(),
        "erasures": m_hat.count(Symbol::Erased),
        "detect_calls": d.detect_calls,
    }))
}

fn trace_cmd(a: TraceArgs) -> Outcome<()> {
    let key = keys::load(&a.text.key)?;
    let text = read_tokens(&a.text.input)?;
    let Key::Multi(k) = &key else {
        return Err(wrong_level("trace", &key, "multi"));
    };
    print(&mu_trace_report(k, &text, a.suspects.as_deref())?)
}

fn experiment_cmd(a: ExperimentArgs, seed: Option<u64>) -> Outcome<()> {
    let scenario: experiment::Scenario = serde_json::from_str(&keys::read_text(&a.scenario)?)
        .map_err(|e| Failure::invalid(format!("{}: {e}", a.scenario.display())))?;
    // Command line over scenario file over fresh entropy.
    let seed = seed.or(scenario.seed).unwrap_or_else(rand::random);
    let start = Instant::now();
    let mut report = experiment::run(scenario, seed, a.jobs)?;
    if a.timing {
        report.timing = Some(experiment::Timing {
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            jobs: a.jobs,
        });
    }
    let text = canonical_json(&report)?;
    if let Some(p) = &a.out {
        keys::write_text(p, &text)?;
    }
    print!("{text}");
    Ok(())
}

fn analyze_cmd(a: Analyze, seed: Option<u64>) -> Outcome<()> {
    match a {
        Analyze::Kstar {
            len,
            delta,
            lambda,
            trials,
        } => {
            let k = k_star_detail(len, delta, lambda)?;
            let mc = simulate_empty_bins(k.value, len, delta, trials, &mut rng(seed))?;
            print(&json!({
                "L": len,
                "delta": delta,
                "lambda": lambda,
                "k_star": k.value,
                "branch": k.branch,
                "mc_failure_rate": mc.failure_rate,
                "mc_trials": trials,
                "failure_bound": (-f64::from(lambda)).exp(),
            }))
        }
    }
}

fn run(cli: Cli) -> Outcome<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Keygen(a) => keygen(a, seed),
        Command::Generate(a) => generate_cmd(a, seed),
        Command::Detect(a) => detect_cmd(a),
        Command::Extract(a) => extract_cmd(a),
        Command::Trace(a) => trace_cmd(a),
        Command::Experiment(a) => experiment_cmd(a, seed),
        Command::Analyze(a) => analyze_cmd(a, seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("markbench: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
