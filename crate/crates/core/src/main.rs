use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use spkbeam::corpus::{generate, CorpusSpec, Manifest};
use spkbeam::dsp::{wav_read, wav_write, AudioSignal};
use spkbeam::eval::{check_layout, evaluate, SelectMethod, Selector, DEFAULT_BIN_WIDTH_DB};
use spkbeam::gradsuite::{run_suite, OP_SEEDS, TOLERANCE};
use spkbeam::loss::sisnr;
use spkbeam::model::{Checkpoint, IpdMode, Model, ModelKind};
use spkbeam::trainer::{write_metrics, TrainConfig, Trainer};
use spkbeam::Error;

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

/// Time-domain target speech extraction on synthetic speaker corpora.
#[derive(Debug, Parser)]
#[command(name = "spkbeam", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus: WAV tree plus train/valid/test manifests.
    Mixgen(MixgenArgs),
    /// Train an extraction model or the separation baseline.
    Train(TrainArgs),
    /// Extract the adaptation speaker from one mixture.
    Extract(ExtractArgs),
    /// Score a checkpoint on a manifest and write the report tables.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct MixgenArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of synthetic speakers (at least 4).
    #[arg(long)]
    speakers: usize,
    /// Number of training mixtures.
    #[arg(long)]
    mixtures: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Microphones per mixture.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    channels: u8,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// key=value config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Best-epoch checkpoint path. The resumable last state goes to
    /// `<out>.last` and the metrics log to `<out>.metrics.tsv`.
    #[arg(long)]
    out: PathBuf,
    /// td-spkbeam, tasnet or passthrough.
    #[arg(long)]
    mode: Option<ModelKind>,
    /// none, input or internal.
    #[arg(long)]
    ipd: Option<IpdMode>,
    /// Weight of the speaker-ID loss.
    #[arg(long)]
    alpha: Option<f64>,
    /// Validation manifest used for best-epoch selection.
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a `.last` checkpoint; config flags are ignored.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExtractArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    mixture: PathBuf,
    /// Adaptation (enrollment) utterance of the target speaker.
    #[arg(long)]
    adapt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Clean target; when given, the output SiSNR is printed.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for table.tsv, histogram.tsv and records.tsv.
    #[arg(long)]
    report: PathBuf,
    /// Output selection for the separation baseline: oracle or cosine.
    #[arg(long, default_value = "oracle")]
    select: SelectMethod,
    /// Extraction checkpoint whose auxiliary network scores cosine
    /// selection.
    #[arg(long)]
    aux: Option<PathBuf>,
    /// Histogram bin width in dB.
    #[arg(long, default_value_t = DEFAULT_BIN_WIDTH_DB)]
    bin_width: f64,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random cases per op kind.
    #[arg(long, default_value_t = OP_SEEDS)]
    op_seeds: u64,
}

enum Failure {
    Lib(Error),
    Usage(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CmdResult = Result<(), Failure>;

fn mixgen(a: MixgenArgs) -> CmdResult {
    let spec = CorpusSpec::new(a.speakers, a.mixtures, a.seed)?.with_channels(a.channels as usize);
    let corpus = generate(&spec)?;
    corpus.write(&a.out)?;
    print!("{}", corpus.summary());
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn train(a: TrainArgs) -> CmdResult {
    let data = Manifest::read(&a.manifest)?.load_all()?;
    let valid = match &a.valid {
        Some(p) => Manifest::read(p)?.load_all()?,
        None => Vec::new(),
    };
    let mut trainer = match &a.resume {
        Some(p) => Trainer::resume(&Checkpoint::load(p)?, a.epochs)?,
        None => {
            let mut cfg = match &a.config {
                Some(p) => TrainConfig::from_file(p)?,
                None => TrainConfig::default(),
            };
            if let Some(m) = a.mode {
                cfg.topology.kind = m;
            }
            if let Some(i) = a.ipd {
                cfg.topology.ipd_mode = i;
            }
            if let Some(al) = a.alpha {
                cfg.alpha = al;
            }
            if let Some(e) = a.epochs {
                cfg.max_epochs = e;
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if cfg.topology.kind == ModelKind::Passthrough {
                cfg.topology.validate()?;
                let model = Model::new(cfg.topology.clone(), cfg.seed)?;
                Checkpoint::new(model).save(&a.out)?;
                write_metrics(with_suffix(&a.out, ".metrics.tsv"), &[])?;
                eprintln!("passthrough: nothing to train, checkpoint written");
                return Ok(());
            }
            let speakers = spkbeam::trainer::speaker_labels(&data);
            Trainer::new(cfg, speakers)?
        }
    };
    trainer.fit(&data, &valid, |m| {
        eprintln!(
            "epoch {:>3}  loss {:>9.4}  sisnr {:>8.3}  ce {:.4}  lr {:.2e}{}",
            m.epoch,
            m.loss,
            m.sisnr,
            m.ce,
            m.lr,
            m.valid.map(|v| format!("  valid {v:.4}")).unwrap_or_default()
        )
    })?;
    let outcome = trainer.outcome()?;
    outcome.best.save(&a.out)?;
    outcome.last.save(with_suffix(&a.out, ".last"))?;
    write_metrics(with_suffix(&a.out, ".metrics.tsv"), &outcome.history)?;
    eprintln!("best epoch {} written to {}", trainer.best_epoch, a.out.display());
    Ok(())
}

fn extract(a: ExtractArgs) -> CmdResult {
    let ck = Checkpoint::load(&a.ckpt)?;
    let mixture = wav_read(&a.mixture)?;
    let adaptation = wav_read(&a.adapt)?;
    check_layout(&ck.model, mixture.num_channels())?;
    let estimate = ck.model.extract(&mixture, adaptation.channel(0))?;
    wav_write(&a.out, &AudioSignal::mono(estimate.clone(), mixture.sample_rate())?)?;
    if let Some(r) = &a.reference {
        let reference = wav_read(r)?;
        println!("sisnr_db\t{}", sisnr(reference.channel(0), &estimate)?);
    }
    Ok(())
}

fn eval(a: EvalArgs) -> CmdResult {
    let ck = Checkpoint::load(&a.ckpt)?;
    let data = Manifest::read(&a.manifest)?.load_all()?;
    let aux = match (&a.aux, a.select) {
        (Some(p), _) => Some(Checkpoint::load(p)?.model),
        (None, SelectMethod::Cosine) if ck.model.config().kind == ModelKind::TasNet => {
            return Err(Failure::Usage("--select cosine needs --aux <extraction checkpoint>".into()))
        }
        (None, _) => None,
    };
    let selector = match (a.select, &aux) {
        (SelectMethod::Cosine, Some(m)) => Selector::Cosine(m),
        _ => Selector::Oracle,
    };
    let report = evaluate(&ck.model, &data, selector)?;
    report.write(&a.report, a.bin_width)?;
    print!("{}", report.table);
    if let Some(acc) = report.selection_accuracy() {
        println!("selection accuracy ({}): {acc:.4}", a.select);
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> CmdResult {
    let report = run_suite(a.seed, a.op_seeds)?;
    print!("{report}");
    let failed = report.failures().count();
    if failed > 0 {
        return Err(Failure::Numeric(format!(
            "{failed} check(s) above relative error {TOLERANCE:e}"
        )));
    }
    println!("all {} checks below {TOLERANCE:e}", report.entries.len());
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        _ if e.is_numeric() => EXIT_NUMERIC,
        Error::InvalidArgument(_)
        | Error::Unsupported(_)
        | Error::Config { .. }
        | Error::InsufficientSpeakers { .. } => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Mixgen(a) => mixgen(a),
        Command::Train(a) => train(a),
        Command::Extract(a) => extract(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Numeric(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_NUMERIC)
        }
    }
}
