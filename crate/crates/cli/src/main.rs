use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};

use mcc_core::cell::{ordering_check, surface_grid, TransferFunctionSpec, Variant};
use mcc_core::config::KvConfig;
use mcc_core::datagen::{make_corpus, Split, TwoStreamCorpus};
use mcc_core::experiments::{
    conv_layer_units, correlation_csv, correlation_matrix, corpus_from_kv, evaluate, filter_relevance_map,
    firing_histogram, load_checkpoint, mean_abs_offdiag, preset, relevance_csv, relevance_frames, resilience_csv,
    resilience_sweep, train_gaussian_mi, train_seeds, ExperimentConfig, GaussianMiConfig, CORPUS_KEYS, KEYS,
};
use mcc_core::report::Csv;
use mcc_core::{Error, Result};
use mcc_tensor::{Rng, Tape};

#[derive(Parser, Debug)]
#[command(name = "mcc", version, about = "Two-point neuron networks: data, training, analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, created if absent.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Named bundle of config values, applied before the config file.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Extra `key=value` override; may repeat.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Generate the synthetic two-stream corpus.
    GenData,
    /// Train one model per seed.
    Train,
    /// Evaluate a checkpoint on a corpus split.
    Eval,
    /// Estimate mutual information of correlated Gaussian pairs.
    Mi,
    /// Tabulate a single-cell transfer function.
    CellSurface,
    /// Correlation, relevance and firing analyses of a checkpoint.
    Analyze,
    /// Test error under random silencing of conv units.
    Resilience,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Mi => "mi",
            Command::CellSurface => "cell-surface",
            Command::Analyze => "analyze",
            Command::Resilience => "resilience",
        }
    }
}

const CHECKPOINT_KEYS: &[&str] = &["checkpoint", "corpus_dir", "split"];
const RESILIENCE_KEYS: &[&str] = &["checkpoint", "corpus_dir", "p_max", "p_step", "passes", "seed"];
const CELL_KEYS: &[&str] = &["variant", "sigma", "gain", "threshold", "grid"];

fn resolve(cli: &Cli) -> Result<KvConfig> {
    let mut kv = KvConfig::new();
    if let Some(name) = &cli.preset {
        kv.merge(&match cli.command {
            Command::CellSurface => {
                let mut p = KvConfig::new();
                p.set("variant", Variant::parse(name)?.name());
                p
            }
            Command::Train => preset(name)?,
            other => return Err(Error::Config(format!("{} has no presets", other.name()))),
        });
    }
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        kv.merge(&KvConfig::parse(&text)?);
    }
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
        kv.set(k.trim(), v.trim());
    }
    if let Some(seed) = cli.seed {
        match cli.command {
            Command::Train => kv.set("seeds", seed),
            Command::GenData => kv.set("corpus_seed", seed),
            Command::Mi | Command::Resilience => kv.set("seed", seed),
            _ => {}
        }
    }
    Ok(kv)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

fn write_manifest(out: &Path, command: Command, kv: &KvConfig) -> Result<()> {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let text = format!(
        "# mcc {} {}\n# written at unix time {secs}\n{}",
        command.name(),
        env!("CARGO_PKG_VERSION"),
        kv.render()
    );
    write_text(&out.join("manifest.txt"), &text)
}

fn load_corpus(kv: &KvConfig, fallback: &ExperimentConfig) -> Result<TwoStreamCorpus> {
    match kv.get("corpus_dir") {
        Some(dir) => TwoStreamCorpus::load(Path::new(dir)),
        None => fallback.make_corpus(),
    }
}

fn strip(kv: &KvConfig, keys: &[&str]) -> KvConfig {
    let mut out = KvConfig::new();
    for (k, v) in kv.iter().filter(|(k, _)| !keys.contains(k)) {
        out.set(k, v);
    }
    out
}

fn gen_data(kv: &KvConfig, out: &Path) -> Result<KvConfig> {
    kv.check_keys(CORPUS_KEYS)?;
    let cfg = corpus_from_kv(kv)?;
    let seed = kv.parse_or("corpus_seed", 0u64)?;
    make_corpus(&cfg, &mut Rng::new(seed))?.save(out)?;
    Ok(kv.clone())
}

fn train(kv: &KvConfig, out: &Path) -> Result<KvConfig> {
    let mut allowed = KEYS.to_vec();
    allowed.push("corpus_dir");
    kv.check_keys(&allowed)?;
    let mut cfg = ExperimentConfig::from_kv(&strip(kv, &["corpus_dir"]))?;
    cfg.out = out.to_path_buf();
    let corpus = load_corpus(kv, &cfg)?;
    let runs = train_seeds(&cfg, &corpus, Some(out))?;
    for run in &runs {
        let last = run.metrics.last().expect("updates >= 1");
        eprintln!(
            "seed {}: loss {:.5} firing {:.4} gamma balance {:.3e}",
            run.seed, last.loss, last.mean_firing_prob, run.gamma_balance.ratio
        );
    }
    let mut resolved = cfg.to_kv();
    if let Some(dir) = kv.get("corpus_dir") {
        resolved.set("corpus_dir", dir);
    }
    Ok(resolved)
}

fn checkpoint_inputs(kv: &KvConfig) -> Result<(ExperimentConfig, mcc_core::network::Network, TwoStreamCorpus)> {
    let ck = PathBuf::from(kv.require("checkpoint")?);
    let (cfg, net) = load_checkpoint(&ck)?;
    let corpus = load_corpus(kv, &cfg)?;
    Ok((cfg, net, corpus))
}

fn parse_split(kv: &KvConfig) -> Result<Split> {
    match kv.get("split").unwrap_or("test") {
        "test" => Ok(Split::Test),
        "train" => Ok(Split::Train),
        other => Err(Error::Config(format!("unknown split {other:?}"))),
    }
}

fn eval(kv: &KvConfig, out: &Path) -> Result<KvConfig> {
    kv.check_keys(CHECKPOINT_KEYS)?;
    let split = parse_split(kv)?;
    let (cfg, net, corpus) = checkpoint_inputs(kv)?;
    let metrics = evaluate(&net, &cfg, &corpus, split)?;
    metrics.to_csv().write(&out.join(format!("eval_{}.csv", split.name())))?;
    Ok(kv.clone())
}

fn mi(kv: &KvConfig, out: &Path) -> Result<KvConfig> {
    let cfg = GaussianMiConfig::from_kv(kv)?;
    let run = train_gaussian_mi(&cfg)?;
    run.curve_csv().write(&out.join("mi_curve.csv"))?;
    run.train_csv().write(&out.join("metrics.csv"))?;
    let last = run.last();
    eprintln!(
        "held-out MI {:.4} ± {:.4} nats (analytic {:.4})",
        last.estimate, last.se, run.analytic
    );
    Ok(cfg.to_kv())
}

fn cell_surface(kv: &KvConfig, out: &Path) -> Result<KvConfig> {
    kv.check_keys(CELL_KEYS)?;
    let variant = Variant::parse(kv.get("variant").unwrap_or("proposed-hgf"))?;
    let d = TransferFunctionSpec::new(variant);
    let spec = TransferFunctionSpec {
        variant,
        sigma: kv.parse_or("sigma", d.sigma)?,
        gain: kv.parse_or("gain", d.gain)?,
        threshold: kv.parse_or("threshold", d.threshold)?,
    };
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    let n = kv.parse_or("grid", 101usize)?;
    surface_grid(&spec, n)?.write_csv(&out.join("surface.csv"))?;
    if let Ok(report) = ordering_check(&spec, n) {
        let mut csv = Csv::new(&["check", "passed"]);
        for c in &report.checked {
            csv.row(&[c.clone(), (!report.violations.contains(c)).to_string()]);
        }
        csv.write(&out.join("ordering.csv"))?;
    }
    let mut resolved = kv.clone();
    resolved.set("variant", variant.name());
    resolved.set("sigma", spec.sigma);
    resolved.set("gain", spec.gain);
    resolved.set("threshold", spec.threshold);
    resolved.set("grid", n);
    Ok(resolved)
}

fn analyze(kv: &KvConfig, out: &Path) -> Result<KvConfig> {
    kv.check_keys(CHECKPOINT_KEYS)?;
    let split = parse_split(kv)?;
    let (cfg, net, corpus) = checkpoint_inputs(kv)?;
    let mut summary = Csv::new(&["layer", "mean_abs_offdiag"]);
    for (l, units) in conv_layer_units(&net, &corpus, split)?.iter().enumerate() {
        let corr = correlation_matrix(units)?;
        correlation_csv(&corr).write(&out.join(format!("corr_layer_{}.csv", l + 1)))?;
        summary.row(&[(l + 1).to_string(), mean_abs_offdiag(&corr).to_string()]);
    }
    summary.write(&out.join("corr_summary.csv"))?;

    let batch = corpus.full(split)?;
    let mut tape = Tape::new();
    let audio = tape.constant(batch.noisy);
    let visual = tape.constant(batch.visual);
    let enc = net.encode(&mut tape, audio, visual, &mut None)?;
    let streams = ["audio", "visual"];
    for (l, layer) in enc.conv.iter().enumerate() {
        for (s, &v) in layer.iter().enumerate() {
            let map = filter_relevance_map(&relevance_frames(tape.value(v))?)?;
            relevance_csv(&map).write(&out.join(format!("relevance_{}_{}.csv", streams[s], l + 1)))?;
        }
    }
    let metrics = evaluate(&net, &cfg, &corpus, split)?;
    let mut csv = Csv::new(&["bin", "count"]);
    for (b, c) in firing_histogram(&metrics.firing).iter().enumerate() {
        csv.row(&[b.to_string(), c.to_string()]);
    }
    csv.write(&out.join(format!("firing_{}.csv", split.name())))?;
    Ok(kv.clone())
}

fn resilience(kv: &KvConfig, out: &Path) -> Result<KvConfig> {
    kv.check_keys(RESILIENCE_KEYS)?;
    let (cfg, net, corpus) = checkpoint_inputs(kv)?;
    let p_max: f64 = kv.parse_or("p_max", 0.5)?;
    let p_step: f64 = kv.parse_or("p_step", 0.025)?;
    let passes = kv.parse_or("passes", 50usize)?;
    let seed = kv.parse_or("seed", 0u64)?;
    if !(p_step > 0.0) {
        return Err(Error::Config(format!("p_step must be positive, got {p_step}")));
    }
    let steps = (p_max / p_step + 1e-9).floor() as usize;
    let grid: Vec<f64> = (0..=steps).map(|i| (i as f64 * p_step * 1e12).round() / 1e12).collect();
    let points = resilience_sweep(&net, &cfg, &corpus, &grid, passes, &Rng::new(seed))?;
    resilience_csv(&points).write(&out.join("resilience.csv"))?;
    let mut resolved = kv.clone();
    for (k, v) in [("p_max", p_max), ("p_step", p_step)] {
        resolved.set(k, v);
    }
    resolved.set("passes", passes);
    resolved.set("seed", seed);
    Ok(resolved)
}

fn run(cli: &Cli) -> Result<()> {
    let kv = resolve(cli)?;
    let out = cli.out.as_path();
    std::fs::create_dir_all(out).map_err(|e| Error::Config(format!("cannot create {}: {e}", out.display())))?;
    let resolved = match cli.command {
        Command::GenData => gen_data(&kv, out)?,
        Command::Train => train(&kv, out)?,
        Command::Eval => eval(&kv, out)?,
        Command::Mi => mi(&kv, out)?,
        Command::CellSurface => cell_surface(&kv, out)?,
        Command::Analyze => analyze(&kv, out)?,
        Command::Resilience => resilience(&kv, out)?,
    };
    write_manifest(out, cli.command, &resolved)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
