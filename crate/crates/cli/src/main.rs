//! `relground`: generate corpora, train, evaluate, trace and diagnose.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use relground::evalkit::{diagnose_synthetic, predict_all, score};
use relground::learning::{gradcheck, gradcheck_fixture, train, GradTarget, JsonlLog};
use relground::readout::predict;
use relground::synthgen::{generate_corpus, read_config, read_samples, vocabulary, write_corpus};
use relground::{Checkpoint, GenConfig, Mode, ModelConfig, Prediction, ProgramTrace, Rcrn, Split, SynthSample, TrainConfig};

#[derive(Parser)]
#[command(name = "relground", version, about = "Grounded image-text matching with relation-aware belief propagation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Gen {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on the train split of a corpus.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Corpus directory.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines training log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score a checkpoint on a corpus.
    Eval {
        #[command(flatten)]
        target: EvalArgs,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        /// Also run the intermediate diagnosis.
        #[arg(long)]
        diagnose: bool,
        /// Write the cached per-sample predictions as JSON lines.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Record, or verify, the program trace of one prediction.
    Trace {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Sample id; required unless verifying.
        #[arg(long, required_unless_present = "verify")]
        sample: Option<String>,
        /// Trace file to replay and check.
        #[arg(long, conflicts_with = "sample")]
        verify: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Entity recall and relation scores against annotated correspondences.
    Diagnose {
        #[command(flatten)]
        target: EvalArgs,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Compare analytic and finite-difference gradients on a small fixture.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML file with optional [gen], [model] and [train] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one value, e.g. `train.iterations=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for generation, initialization and shuffling.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Use local beliefs only.
    #[arg(long)]
    no_message_passing: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    /// In-distribution and OOD test samples.
    Test,
    Train,
    InDist,
    Ood,
    All,
}

impl SplitArg {
    fn keeps(self, s: Option<Split>) -> bool {
        match self {
            SplitArg::Test => matches!(s, Some(Split::InDist | Split::Ood)),
            SplitArg::Train => s == Some(Split::Train),
            SplitArg::InDist => s == Some(Split::InDist),
            SplitArg::Ood => s == Some(Split::Ood),
            SplitArg::All => true,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
    Text,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct Config {
    gen: GenConfig,
    model: ModelConfig,
    train: TrainConfig,
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl ConfigArgs {
    fn load(&self) -> Result<Config> {
        let mut table = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in &self.overrides {
            let Some((key, raw)) = o.split_once('=') else { bail!("override {o:?} is not KEY=VALUE") };
            let path: Vec<&str> = key.trim().split('.').collect();
            let (last, parents) = path.split_last().expect("split yields one item");
            let mut t = &mut table;
            for p in parents {
                t = t
                    .entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .with_context(|| format!("{key}: {p} is not a table"))?;
            }
            t.insert(last.to_string(), parse_value(raw.trim()));
        }
        let mut config: Config = toml::Value::Table(table).try_into().context("invalid configuration")?;
        if let Some(seed) = self.seed {
            config.gen.seed = seed;
            config.train.seed = seed;
        }
        Ok(config)
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            if !text.ends_with('\n') {
                stdout.write_all(b"\n")?;
            }
            Ok(())
        }
    }
}

fn load_corpus(dir: &Path, split: SplitArg) -> Result<(Vec<SynthSample>, GenConfig)> {
    let samples = read_samples(dir).with_context(|| format!("reading corpus {}", dir.display()))?;
    let config = read_config(dir)?.unwrap_or_default();
    Ok((samples.into_iter().filter(|s| split.keeps(s.sample.split)).collect(), config))
}

fn load_model(path: &Path) -> Result<Rcrn> {
    Ok(Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?.model)
}

fn cmd_gen(args: &ConfigArgs, out: &Path) -> Result<()> {
    let config = args.load()?.gen;
    let corpus = generate_corpus(&config)?;
    write_corpus(out, &corpus)?;
    let s = &corpus.stats;
    eprintln!(
        "wrote {} samples to {} (relation tv {:.4}, bound {})",
        corpus.samples.len(),
        out.display(),
        s.relation_tv,
        s.tv_bound
    );
    Ok(())
}

fn cmd_train(args: &ConfigArgs, data: &Path, out: &Path, log: Option<&Path>) -> Result<()> {
    let config = args.load()?;
    let (samples, _) = load_corpus(data, SplitArg::Train)?;
    let samples: Vec<_> = samples.into_iter().map(|s| s.sample).collect();
    let feat_dim = samples.first().and_then(|s| s.scene.proposals.first()).map_or(0, |p| p.feat.len());
    let mut model = Rcrn::new(config.model, vocabulary(), feat_dim, config.train.seed);
    let mut writer = match log {
        Some(p) => Some(JsonlLog::new(std::io::BufWriter::new(std::fs::File::create(p)?))),
        None => None,
    };
    let start = Instant::now();
    let every = config.train.log_every.max(1);
    let mut log_error = None;
    let report = train(&mut model, &samples, &config.train, |e| {
        if let Some(w) = writer.as_mut() {
            if let Err(err) = w.write(e) {
                log_error.get_or_insert(err);
            }
        }
        if e.iteration % every == 0 {
            eprintln!(
                "iter {:>6} {:?} loss {:.4} (grd {:.4} match {:.4} reg {:.4}) {:.0}s",
                e.iteration,
                e.stage,
                e.loss.total,
                e.loss.grd,
                e.loss.matching,
                e.loss.reg,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    if let Some(err) = log_error {
        return Err(err.into());
    }
    Checkpoint::new(&model, Some(&config.train)).save(out)?;
    eprintln!("saved {} after {} iterations, final loss {:?}", out.display(), report.history.len(), report.final_loss());
    Ok(())
}

fn cmd_eval(target: &EvalArgs, format: Format, with_diagnosis: bool, predictions: Option<&Path>) -> Result<()> {
    let model = load_model(&target.checkpoint)?;
    let (samples, gen) = load_corpus(&target.data, target.split)?;
    let plain: Vec<_> = samples.iter().map(|s| s.sample.clone()).collect();
    let mp = !target.no_message_passing;
    let cached = predict_all(&model, &plain, mp)?;
    if let Some(p) = predictions {
        let mut w = std::io::BufWriter::new(std::fs::File::create(p)?);
        for c in &cached {
            serde_json::to_writer(&mut w, c)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    let mut report = score(&cached, mp)?;
    if with_diagnosis {
        report.diagnosis = Some(diagnose_synthetic(&model, &samples, gen.predicates)?);
    }
    let text = match format {
        Format::Json => serde_json::to_string_pretty(&report)?,
        Format::Csv => report.to_csv(),
        Format::Text => report.to_text(),
    };
    emit(target.out.as_deref(), &text)
}

fn cmd_diagnose(target: &EvalArgs, format: Format) -> Result<()> {
    let model = load_model(&target.checkpoint)?;
    let (samples, gen) = load_corpus(&target.data, target.split)?;
    let d = diagnose_synthetic(&model, &samples, gen.predicates)?;
    let text = match format {
        Format::Text => d.to_text(),
        Format::Json => serde_json::to_string_pretty(&d)?,
        Format::Csv => bail!("diagnosis has no CSV form"),
    };
    emit(target.out.as_deref(), &text)
}

#[derive(Serialize, Deserialize)]
struct TraceFile {
    sample: String,
    prediction: Prediction,
    trace: ProgramTrace,
}

fn cmd_trace(checkpoint: &Path, data: &Path, sample: Option<&str>, verify: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let model = load_model(checkpoint)?;
    let (samples, _) = load_corpus(data, SplitArg::All)?;
    let find = |id: &str| {
        samples.iter().find(|s| s.sample.id == id).map(|s| &s.sample).ok_or_else(|| relground::Error::UnknownSample(id.into()))
    };
    if let Some(path) = verify {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let recorded: TraceFile = serde_json::from_str(&text)?;
        recorded.trace.replay(&model.store, &model.reasoning)?;
        let mut trace = ProgramTrace::default();
        let prediction = predict(&model, find(&recorded.sample)?, Mode::Oracle, Some(&mut trace))?;
        if prediction != recorded.prediction {
            bail!("prediction for {} differs from the recorded one", recorded.sample);
        }
        if trace != recorded.trace {
            bail!("trace for {} differs from a fresh run", recorded.sample);
        }
        eprintln!("trace for {} verified ({} steps)", recorded.sample, recorded.trace.steps.len());
        return Ok(());
    }
    let id = sample.expect("clap requires --sample without --verify");
    let mut trace = ProgramTrace::default();
    let prediction = predict(&model, find(id)?, Mode::Oracle, Some(&mut trace))?;
    let file = TraceFile { sample: id.to_string(), prediction, trace };
    emit(out, &serde_json::to_string_pretty(&file)?)
}

fn cmd_gradcheck(seed: u64, step: f64, tolerance: f64) -> Result<()> {
    let (model, sample) = gradcheck_fixture(seed);
    let mut worst: f64 = 0.0;
    for target in [GradTarget::Match, GradTarget::Grounding] {
        let r = gradcheck(&model, &sample, target, step)?;
        println!("{target:?}: max relative error {:.3e} over {} tensors", r.max_rel_err, r.params.len());
        for p in r.params.iter().filter(|p| p.max_rel_err >= tolerance) {
            println!("  {:<40} {:.3e}", p.name, p.max_rel_err);
        }
        worst = worst.max(r.max_rel_err);
    }
    if worst >= tolerance {
        bail!("gradient check failed: {worst:.3e} >= {tolerance:.0e}");
    }
    println!("ok");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Gen { config, out } => cmd_gen(config, out),
        Command::Train { config, data, out, log } => cmd_train(config, data, out, log.as_deref()),
        Command::Eval { target, format, diagnose, predictions } => cmd_eval(target, *format, *diagnose, predictions.as_deref()),
        Command::Trace { checkpoint, data, sample, verify, out } => {
            cmd_trace(checkpoint, data, sample.as_deref(), verify.as_deref(), out.as_deref())
        }
        Command::Diagnose { target, format } => cmd_diagnose(target, *format),
        Command::Gradcheck { seed, step, tolerance } => cmd_gradcheck(*seed, *step, *tolerance),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
