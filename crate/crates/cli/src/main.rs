use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pquant::config::RunConfig;
use pquant::corpus::{eval_windows, split, synthetic_corpus};
use pquant::inference::{bench_csv, bench_kernels, export_packed, memory_footprint, PackedModel, PrecisionPlan};
use pquant::sensitivity::{
    build_hessian_inverse, collect_activations, democratization_stats, heatmap, layer_targets, sensitivity_closed_form,
    CalibrationSet, QuantRule,
};
use pquant::training::{train_loop_with, Checkpoint};
use pquant::Error;

mod manifest;
mod overrides;

use manifest::Manifest;

const THREADS_ENV: &str = "PQUANT_THREADS";

#[derive(Parser, Debug)]
#[command(name = "pquant", version, about = "1-bit transformers with routed INT8 branches")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Output directory; created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
struct CorpusArgs {
    /// Training text; a synthetic corpus is generated when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 100_000)]
    corpus_bytes: usize,
    #[arg(long, default_value_t = 1)]
    corpus_seed: u64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train from scratch and write a checkpoint plus metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Overrides `train.total_steps`.
        #[arg(long)]
        steps: Option<usize>,
        /// Any config key, e.g. `--set model.n_branches=4`. Repeatable.
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        set: Vec<String>,
    },
    /// Convert a checkpoint into a packed model.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Greedy generation from a packed model.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        tokens: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Per-weight sensitivity maps of one layer.
    Sensitivity {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `ffn.last`, `ffn.<L>`, `attn.last`, `attn.<L>` or a full parameter name.
        #[arg(long, default_value = "ffn.last")]
        layer: String,
        #[arg(long, default_value_t = 16)]
        pool: usize,
        /// Calibration windows drawn from the held-out split.
        #[arg(long, default_value_t = 8)]
        windows: usize,
        #[arg(long, default_value_t = 0.01)]
        damping: f64,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArgs,
    },
    /// Storage accounting for a configuration and precision plan.
    Footprint {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        set: Vec<String>,
    },
    /// Kernel microbenchmarks.
    Bench {
        /// Comma-separated `ROWSxCOLS` list.
        #[arg(long, default_value = "256x1024,1024x1024,1024x4096")]
        sizes: String,
        #[arg(long, default_value_t = 50)]
        reps: usize,
        #[command(flatten)]
        common: Common,
    },
}

/// Failures, each mapped to its exit code.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Config(String),
    Divergence(String),
    Io(String),
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Config(_) => 3,
            Failure::Divergence(_) => 4,
            Failure::Io(_) => 5,
            Failure::Other(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Config(m) | Failure::Divergence(m) | Failure::Io(m) | Failure::Other(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) => Failure::Config(msg),
            Error::Divergence { .. } => Failure::Divergence(msg),
            Error::Io(_) | Error::Format(_) => Failure::Io(msg),
            Error::InvalidInput(_) | Error::DimensionMismatch(_) => Failure::Usage(msg),
            Error::Singular(_) => Failure::Other(msg),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(f) = configure_threads() {
        eprintln!("error: {}", f.message());
        return ExitCode::from(f.code());
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn configure_threads() -> Outcome {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| Failure::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Failure::Other(e.to_string()))
}

fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::Train { config, common, corpus, steps, set } => train(&config, &common, &corpus, steps, &set),
        Command::Export { checkpoint, common } => export(&checkpoint, &common),
        Command::Generate { model, prompt, tokens, common } => generate(&model, &prompt, tokens, &common),
        Command::Sensitivity { checkpoint, layer, pool, windows, damping, common, corpus } => {
            sensitivity(&checkpoint, &layer, pool, windows, damping, &common, &corpus)
        }
        Command::Footprint { config, common, set } => footprint(&config, &common, &set),
        Command::Bench { sizes, reps, common } => bench(&sizes, reps, &common),
    }
}

fn out_dir(common: &Common) -> Result<&Path, Failure> {
    std::fs::create_dir_all(&common.out).map_err(|e| io_err(&common.out, e))?;
    Ok(&common.out)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Outcome {
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| io_err(path, e))
}

fn load_config(path: &Path, set: &[String], steps: Option<usize>, seed: Option<u64>) -> Result<(RunConfig, String), Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut pairs = set.to_vec();
    if let Some(s) = steps {
        pairs.push(format!("train.total_steps={s}"));
    }
    if let Some(s) = seed {
        pairs.push(format!("train.seed={s}"));
    }
    let merged = overrides::apply(&text, &pairs).map_err(Failure::Config)?;
    let cfg = RunConfig::from_toml(&merged)?;
    let canonical = cfg.to_toml();
    Ok((cfg, canonical))
}

fn load_corpus(args: &CorpusArgs) -> Result<(Vec<u8>, String), Failure> {
    match &args.corpus {
        Some(p) => Ok((read(p)?, p.display().to_string())),
        None => Ok((synthetic_corpus(args.corpus_bytes, args.corpus_seed).into_bytes(), format!("synthetic:{}:{}", args.corpus_bytes, args.corpus_seed))),
    }
}

fn train(config: &Path, common: &Common, corpus: &CorpusArgs, steps: Option<usize>, set: &[String]) -> Outcome {
    let (cfg, canonical) = load_config(config, set, steps, common.seed)?;
    let (text, source) = load_corpus(corpus)?;
    let dir = out_dir(common)?;
    let log_every = cfg.train.log_every.max(1) * 100;
    let run = train_loop_with(&cfg.model, &cfg.train, &text, &mut |m| {
        if m.step % log_every == 0 {
            eprintln!("step {} loss {:.4} lr {:.2e} grad_norm {:.3}", m.step, m.loss, m.lr, m.grad_norm);
        }
    })?;
    let ckpt = dir.join("checkpoint.pqtc");
    write(&ckpt, run.checkpoint().to_bytes())?;
    write(&dir.join("metrics.csv"), run.metrics_csv())?;
    write(&dir.join("alpha_beta.csv"), run.alpha_beta_csv())?;
    println!(
        "trained {} steps: final loss {}, eval loss {:.4}, unigram entropy {:.4}, clipped steps {}",
        cfg.train.total_steps,
        run.final_loss().map_or("n/a".into(), |l| format!("{l:.4}")),
        run.eval_loss,
        run.unigram_entropy,
        run.clipped_steps
    );
    Manifest::new("train", &canonical, cfg.train.seed)
        .input("config", &config.display().to_string())
        .input("corpus", &source)
        .outputs(&["checkpoint.pqtc", "metrics.csv", "alpha_beta.csv"])
        .write(dir)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Ok(Checkpoint::from_bytes(&read(path)?)?)
}

fn export(checkpoint: &Path, common: &Common) -> Outcome {
    let ckpt = load_checkpoint(checkpoint)?;
    let dir = out_dir(common)?;
    let bytes = export_packed(&ckpt)?.to_bytes();
    write(&dir.join("model.pqtm"), &bytes)?;
    println!("packed {} bytes from {} bytes of checkpoint", bytes.len(), ckpt.to_bytes().len());
    let canonical = RunConfig { model: ckpt.model.cfg.clone(), train: ckpt.train.clone(), plan: None }.to_toml();
    Manifest::new("export", &canonical, ckpt.train.seed)
        .input("checkpoint", &checkpoint.display().to_string())
        .outputs(&["model.pqtm"])
        .write(dir)
}

fn generate(model: &Path, prompt: &str, tokens: usize, common: &Common) -> Outcome {
    let pm = PackedModel::from_bytes(&read(model)?)?;
    let dir = out_dir(common)?;
    let ids = pm.vocab.encode(prompt.as_bytes())?;
    let out = pm.generate(&ids, tokens)?;
    let text = String::from_utf8_lossy(&pm.vocab.decode(&out)?).into_owned();
    println!("{prompt}{text}");
    write(&dir.join("generation.txt"), format!("{prompt}{text}"))?;
    let canonical = RunConfig { model: pm.cfg.clone(), train: Default::default(), plan: None }.to_toml();
    Manifest::new("generate", &canonical, common.seed.unwrap_or(0))
        .input("model", &model.display().to_string())
        .input("prompt", prompt)
        .outputs(&["generation.txt"])
        .write(dir)
}

fn sensitivity(
    checkpoint: &Path,
    layer: &str,
    pool: usize,
    windows: usize,
    damping: f64,
    common: &Common,
    corpus: &CorpusArgs,
) -> Outcome {
    if pool == 0 || windows == 0 {
        return Err(Failure::Usage("--pool and --windows must be positive".into()));
    }
    let ckpt = load_checkpoint(checkpoint)?;
    let (text, source) = load_corpus(corpus)?;
    let dir = out_dir(common)?;
    let tokens = ckpt.vocab.encode(&text)?;
    let (_, held_out) = split(&tokens, ckpt.train.eval_fraction);
    let seq = ckpt.train.seq_len.min(ckpt.model.cfg.max_seq_len);
    let cal_windows = eval_windows(held_out, seq, windows);
    if cal_windows.is_empty() {
        return Err(Failure::Usage("corpus too small for a calibration window".into()));
    }
    let targets = layer_targets(&ckpt.model, layer)?;
    let mut stats = String::from("layer,rows,cols,log_variance,interquartile_ratio,top1_share\n");
    let mut outputs = vec!["sensitivity_stats.csv".to_string()];
    let mut cache: Option<(String, CalibrationSet)> = None;
    for t in &targets {
        if cache.as_ref().map_or(true, |(site, _)| site != &t.site) {
            let acts = collect_activations(&ckpt.model, &cal_windows, &t.site)?;
            cache = Some((t.site.clone(), CalibrationSet::from_activations(&acts)?));
        }
        let cal = &cache.as_ref().unwrap().1;
        let hinv = build_hessian_inverse(cal, damping)?;
        let s = sensitivity_closed_form(&t.weight, &hinv, QuantRule::Zero)?;
        let d = democratization_stats(&s)?;
        stats.push_str(&format!("{},{},{},{},{},{}\n", t.name, s.rows, s.cols, d.log_variance, d.interquartile_ratio, d.top1_share));
        heatmap(&s, pool)?.export(dir, &t.name)?;
        outputs.push(format!("{}.csv", t.name));
        outputs.push(format!("{}.pgm", t.name));
        println!("{}: log-variance {:.4}, top-1% share {:.4}", t.name, d.log_variance, d.top1_share);
    }
    write(&dir.join("sensitivity_stats.csv"), stats)?;
    let canonical = RunConfig { model: ckpt.model.cfg.clone(), train: ckpt.train.clone(), plan: None }.to_toml();
    let outs: Vec<&str> = outputs.iter().map(String::as_str).collect();
    Manifest::new("sensitivity", &canonical, ckpt.train.seed)
        .input("checkpoint", &checkpoint.display().to_string())
        .input("corpus", &source)
        .input("layer", layer)
        .outputs(&outs)
        .write(dir)
}

fn footprint(config: &Path, common: &Common, set: &[String]) -> Outcome {
    let (cfg, canonical) = load_config(config, set, None, common.seed)?;
    let plan = cfg.plan.clone().unwrap_or_else(PrecisionPlan::pquant);
    plan.validate()?;
    let dir = out_dir(common)?;
    let rep = memory_footprint(&cfg.model, &plan);
    write(&dir.join("footprint.csv"), rep.to_csv())?;
    print!("{}", rep.to_csv());
    println!("{}", rep.summary());
    println!("effective bits: {}", rep.effective_bits);
    Manifest::new("footprint", &canonical, cfg.train.seed)
        .input("config", &config.display().to_string())
        .outputs(&["footprint.csv"])
        .write(dir)
}

fn parse_sizes(s: &str) -> Result<Vec<(usize, usize)>, Failure> {
    s.split(',')
        .map(|p| {
            let (r, c) = p.trim().split_once('x').ok_or_else(|| Failure::Usage(format!("size {p:?} is not ROWSxCOLS")))?;
            let parse = |v: &str| v.parse::<usize>().map_err(|_| Failure::Usage(format!("size {p:?} is not ROWSxCOLS")));
            Ok((parse(r)?, parse(c)?))
        })
        .collect()
}

fn bench(sizes: &str, reps: usize, common: &Common) -> Outcome {
    let sizes = parse_sizes(sizes)?;
    let dir = out_dir(common)?;
    let seed = common.seed.unwrap_or(0);
    let rows = bench_kernels(&sizes, reps, seed)?;
    let csv = bench_csv(&rows);
    write(&dir.join("bench.csv"), &csv)?;
    print!("{csv}");
    for pair in rows.chunks(pquant::inference::bench::KERNELS.len()) {
        let (reference, lut) = (pair[0].median_ns.max(1), pair[1].median_ns.max(1));
        println!("{}x{}: lut gemv {:.2}x reference", pair[0].rows, pair[0].cols, reference as f64 / lut as f64);
    }
    let canonical = format!("sizes = {sizes:?}\nreps = {reps}\n");
    Manifest::new("bench", &canonical, seed).outputs(&["bench.csv"]).write(dir)
}
