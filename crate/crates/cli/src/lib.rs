//! `anoncodec` command surface. Every command returns a [`Failure`] carrying
//! the process exit code: 1 for usage and configuration problems, 2 for
//! missing or malformed data, 3 for numeric failures during training.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anoncodec_core::anonymize::{anonymize_utterance, build_pool, utterance_rng, AnonError, AnonSpec, SpeakerPool};
use anoncodec_core::data::{load_manifest, make_synthetic_corpus, Corpus, DataError, SynthConfig};
use anoncodec_core::eval::{generate_trials, privacy_report, EvalError, MetricReport, ScoredTrial, TrialList};
use anoncodec_core::signal::{load_wav, save_wav};
use anoncodec_core::train::{run_training, Checkpoint, RunConfig, TrainError, Trainer};
use anyhow::anyhow;
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn usage(e: impl Into<anyhow::Error>) -> Self {
        Self { code: EXIT_USAGE, error: e.into() }
    }

    pub fn data(e: impl Into<anyhow::Error>) -> Self {
        Self { code: EXIT_DATA, error: e.into() }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let code = match e {
            TrainError::ConfigInvalid(_) => EXIT_USAGE,
            TrainError::NonFiniteLoss { .. } => EXIT_NUMERIC,
            _ => EXIT_DATA,
        };
        Self { code, error: e.into() }
    }
}

impl From<AnonError> for Failure {
    fn from(e: AnonError) -> Self {
        match e {
            AnonError::InvalidSpec(_) => Self::usage(e),
            _ => Self::data(e),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        Self::data(e)
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Self::data(e)
    }
}

type CmdResult<T = ()> = Result<T, Failure>;

#[derive(Debug, Parser)]
#[command(name = "anoncodec", version, about = "Speaker anonymization with a disentangled neural codec")]
pub struct Cli {
    /// TOML run configuration (sections model, loss, optim, data, anon).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the codec; writes checkpoints and a JSON-lines loss log.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Total step count (overrides optim.steps).
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Start from the desk-scale preset instead of the full-size defaults.
        #[arg(long)]
        toy: bool,
    },
    /// Build a speaker pool file from a manifest.
    BuildPool {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Anonymize every utterance of a manifest or directory of WAV files.
    Anonymize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, conflicts_with = "input_dir")]
        manifest: Option<PathBuf>,
        #[arg(long)]
        input_dir: Option<PathBuf>,
        #[command(flatten)]
        anon: AnonArgs,
    },
    /// Privacy and utility report over verification trials.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Trial list (`enroll test target|nontarget`); generated when absent.
        #[arg(long)]
        trials: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        num_target: usize,
        #[arg(long, default_value_t = 50)]
        num_nontarget: usize,
        /// Also write every trial score of both arms to this file.
        #[arg(long)]
        scores: Option<PathBuf>,
        #[command(flatten)]
        anon: AnonArgs,
    },
    /// Write a synthetic multi-speaker corpus with its manifest.
    SynthData {
        #[arg(long, default_value_t = 4)]
        speakers: usize,
        #[arg(long, default_value_t = 8)]
        utts: usize,
        /// Seconds per utterance.
        #[arg(long)]
        duration: Option<f64>,
    },
}

#[derive(Debug, Default, clap::Args)]
pub struct AnonArgs {
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub num_selected: Option<usize>,
    /// Control arm: return the input audio unchanged.
    #[arg(long)]
    pub passthrough: bool,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from_args<I, T>(args: I) -> CmdResult
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(Failure::usage(anyhow!("{e}"))),
    };
    run(cli)
}

pub fn run(cli: Cli) -> CmdResult {
    match &cli.command {
        Command::Train { manifest, steps, resume, toy } => cmd_train(&cli, manifest.as_deref(), *steps, resume.as_deref(), *toy),
        Command::BuildPool { checkpoint, manifest } => cmd_build_pool(&cli, checkpoint, manifest),
        Command::Anonymize { checkpoint, pool, manifest, input_dir, anon } => {
            cmd_anonymize(&cli, checkpoint, pool, manifest.as_deref(), input_dir.as_deref(), anon)
        }
        Command::Evaluate { checkpoint, pool, manifest, trials, num_target, num_nontarget, scores, anon } => cmd_evaluate(
            &cli,
            EvaluateArgs {
                checkpoint,
                pool,
                manifest,
                trials: trials.as_deref(),
                num_target: *num_target,
                num_nontarget: *num_nontarget,
                scores: scores.as_deref(),
                anon,
            },
        ),
        Command::SynthData { speakers, utts, duration } => cmd_synth_data(&cli, *speakers, *utts, *duration),
    }
}

fn load_corpus(manifest: &Path) -> CmdResult<Corpus> {
    Ok(Corpus::load(load_manifest(manifest)?)?)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainOutput {
    pub steps: u64,
    pub final_checkpoint: PathBuf,
    pub heldout_accuracy: Option<f64>,
    pub last_total: Option<f64>,
}

fn cmd_train(cli: &Cli, manifest: Option<&Path>, steps: Option<u64>, resume: Option<&Path>, toy: bool) -> CmdResult {
    let mut trainer = if let Some(path) = resume {
        let mut ck = Checkpoint::load(path)?;
        if let Some(s) = steps {
            ck.config.optim.steps = s;
        }
        if let Some(out) = &cli.out {
            ck.config.data.out_dir = out.clone();
        }
        let manifest = manifest.map(Path::to_path_buf).unwrap_or_else(|| ck.config.data.manifest.clone());
        let corpus = load_corpus(&manifest)?;
        Trainer::resume(ck, corpus)?
    } else {
        let mut cfg = match &cli.config {
            Some(p) => RunConfig::load(p)?,
            None if toy => RunConfig::toy(),
            None => RunConfig::default(),
        };
        if let Some(m) = manifest {
            cfg.data.manifest = m.to_path_buf();
        }
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        if let Some(s) = steps {
            cfg.optim.steps = s;
        }
        if let Some(out) = &cli.out {
            cfg.data.out_dir = out.clone();
        }
        cfg.validate()?;
        let corpus = load_corpus(&cfg.data.manifest)?;
        Trainer::new(cfg, corpus)?
    };
    let out_dir = trainer.config().data.out_dir.clone();
    let summary = run_training(&mut trainer, &out_dir)?;
    let out = TrainOutput {
        steps: trainer.step(),
        final_checkpoint: summary.final_checkpoint,
        heldout_accuracy: summary.heldout_accuracy,
        last_total: summary.reports.last().map(|r| r.total),
    };
    println!("{}", serde_json::to_string(&out).expect("plain struct serializes"));
    Ok(())
}

fn cmd_build_pool(cli: &Cli, checkpoint: &Path, manifest: &Path) -> CmdResult {
    let model = Checkpoint::load(checkpoint)?.codec_model()?;
    let corpus = load_corpus(manifest)?;
    let pool = build_pool(&corpus, &model)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("pool.bin"));
    pool.save(&out)?;
    eprintln!("wrote {} pool entries to {}", pool.len(), out.display());
    Ok(())
}

/// Anonymization settings: checkpoint echo, then `--config`, then flags.
fn resolve_spec(cli: &Cli, ck: &Checkpoint, args: &AnonArgs) -> CmdResult<AnonSpec> {
    let mut spec = match &cli.config {
        Some(p) => RunConfig::load(p)?.anon,
        None => ck.config.anon.clone(),
    };
    if let Some(a) = args.alpha {
        spec.alpha = a;
    }
    if let Some(m) = args.num_selected {
        spec.num_selected = m;
    }
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    spec.passthrough |= args.passthrough;
    spec.validate()?;
    Ok(spec)
}

fn wav_inputs(manifest: Option<&Path>, input_dir: Option<&Path>) -> CmdResult<Vec<(String, PathBuf)>> {
    match (manifest, input_dir) {
        (Some(m), _) => {
            let m = load_manifest(m)?;
            Ok(m.records.iter().map(|r| (r.id.clone(), m.audio_path(r))).collect())
        }
        (None, Some(dir)) => {
            let entries = fs::read_dir(dir).map_err(|e| Failure::data(anyhow!("{}: {e}", dir.display())))?;
            let mut files: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
                .collect();
            files.sort();
            Ok(files
                .into_iter()
                .map(|p| (p.file_stem().unwrap_or_default().to_string_lossy().into_owned(), p))
                .collect())
        }
        (None, None) => Err(Failure::usage(anyhow!("pass --manifest or --input-dir"))),
    }
}

fn cmd_anonymize(
    cli: &Cli,
    checkpoint: &Path,
    pool: &Path,
    manifest: Option<&Path>,
    input_dir: Option<&Path>,
    args: &AnonArgs,
) -> CmdResult {
    let ck = Checkpoint::load(checkpoint)?;
    let spec = resolve_spec(cli, &ck, args)?;
    let model = ck.codec_model()?;
    let pool = SpeakerPool::load(pool)?;
    let inputs = wav_inputs(manifest, input_dir)?;
    let out_dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("anonymized"));
    if inputs.is_empty() {
        return Ok(());
    }
    fs::create_dir_all(&out_dir).map_err(|e| Failure::data(anyhow!("{}: {e}", out_dir.display())))?;
    let mut failed = 0usize;
    for (id, path) in &inputs {
        let result = (|| -> anyhow::Result<()> {
            let buf = load_wav(path)?;
            let out = anonymize_utterance(&buf, &model, &pool, &spec, &mut utterance_rng(spec.seed, id))?;
            let name = path.file_name().ok_or_else(|| anyhow!("no file name"))?;
            save_wav(&out.audio, out_dir.join(name))?;
            Ok(())
        })();
        if let Err(e) = result {
            eprintln!("{id}: {e:#}");
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Failure::data(anyhow!("{failed} of {} files failed", inputs.len())));
    }
    Ok(())
}

/// Evaluation output: the metric report plus the run configuration of the
/// checkpoint that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationOutput {
    #[serde(flatten)]
    pub report: MetricReport,
    pub run_config: RunConfig,
}

struct EvaluateArgs<'a> {
    checkpoint: &'a Path,
    pool: &'a Path,
    manifest: &'a Path,
    trials: Option<&'a Path>,
    num_target: usize,
    num_nontarget: usize,
    scores: Option<&'a Path>,
    anon: &'a AnonArgs,
}

/// One line per trial: `arm enroll test target|nontarget score`.
pub fn format_scores(arm: &str, scores: &[ScoredTrial]) -> String {
    let mut s = String::new();
    for t in scores {
        let kind = if t.target { "target" } else { "nontarget" };
        writeln!(s, "{arm} {} {} {kind} {}", t.enroll, t.test, t.score).expect("write to string");
    }
    s
}

fn cmd_evaluate(cli: &Cli, a: EvaluateArgs<'_>) -> CmdResult {
    let ck = Checkpoint::load(a.checkpoint)?;
    let spec = resolve_spec(cli, &ck, a.anon)?;
    let model = ck.codec_model()?;
    let pool = SpeakerPool::load(a.pool)?;
    let corpus = load_corpus(a.manifest)?;
    if corpus.manifest.num_speakers() < 2 {
        return Err(Failure::data(anyhow!("evaluation needs at least two speakers")));
    }
    let trials = match a.trials {
        Some(p) => TrialList::load(p)?,
        None => generate_trials(&corpus.manifest, a.num_target, a.num_nontarget, spec.seed),
    };
    let ev = privacy_report(&corpus, &model, &pool, &spec, &trials)?;
    if let Some(path) = a.scores {
        let text = format_scores("anonymized", &ev.anonymized_scores) + &format_scores("baseline", &ev.baseline_scores);
        fs::write(path, text).map_err(|e| Failure::data(anyhow!("{}: {e}", path.display())))?;
    }
    let out = EvaluationOutput { report: ev.report, run_config: ck.config };
    let json = serde_json::to_string_pretty(&out).expect("report serializes");
    match &cli.out {
        Some(p) => fs::write(p, json + "\n").map_err(|e| Failure::data(anyhow!("{}: {e}", p.display())))?,
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_synth_data(cli: &Cli, speakers: usize, utts: usize, duration: Option<f64>) -> CmdResult {
    if speakers == 0 || utts == 0 {
        return Err(Failure::usage(anyhow!("--speakers and --utts must be >= 1")));
    }
    let mut cfg = SynthConfig::default();
    if let Some(d) = duration {
        if !(d.is_finite() && d > 0.0) {
            return Err(Failure::usage(anyhow!("--duration must be positive")));
        }
        cfg.duration_s = d;
    }
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("synth"));
    let m = make_synthetic_corpus(&out, speakers, utts, cli.seed.unwrap_or(0), &cfg)?;
    eprintln!("wrote {} utterances of {} speakers to {}", m.len(), m.num_speakers(), out.display());
    Ok(())
}
