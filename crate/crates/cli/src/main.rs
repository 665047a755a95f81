//! `tstrm`: corpus synthesis, feature extraction, training, evaluation,
//! ablations, embedding dumps and gradient checks.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tstrm::checks::{check_all, check_op};
use tstrm::data::config::RunConfig;
use tstrm::data::format::write_features;
use tstrm::data::manifest::Manifest;
use tstrm::data::synth::{generate, SynthSpec};
use tstrm::frontend::{stft_logmel, FrontendConfig, Waveform};
use tstrm::probe::{embed_manifest, read_embeddings, speaker_probe, write_embeddings};
use tstrm::train::{self, evaluate, load_checkpoint, load_examples, run_ablation, AblationKind, TrainOptions};
use tstrm::Error;

#[derive(Parser)]
#[command(name = "tstrm", version, about = "Two-stream two-resolution speech recogniser")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the chosen command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Disable dropout.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker threads for tensor kernels.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus (settings from the `synth.*` keys).
    SynthData,
    /// Convert mono 16-bit WAV files to feature files.
    Featurize {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Train a model from the manifests named in the configuration.
    Train,
    /// Greedy-decode a manifest and report the character error rate.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Print `utt_id<TAB>score<TAB>tokens` for every utterance.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 1)]
        beam: usize,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Train three variants and compare their dev error rates.
    Ablate {
        #[arg(value_parser = ["streams", "fusion", "blocks"])]
        kind: String,
    },
    /// Write mean-pooled stream outputs as `utt_id,speaker_id,v1..vc`.
    DumpEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_parser = ["shallow", "deep"])]
        stream: String,
    },
    /// Held-out accuracy of a linear speaker classifier on an embeddings CSV.
    Probe { embeddings: PathBuf },
    /// Compare analytic and finite-difference gradients.
    GradCheck {
        /// Single op to check; all when omitted.
        #[arg(long)]
        op: Option<String>,
    },
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type Outcome = Result<(), Failure>;

fn required<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T, Failure> {
    v.as_ref().ok_or_else(|| Failure::Usage(format!("this command needs {flag}")))
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

/// Refuses to replace `path` unless `force` is set.
fn writable(path: &Path, force: bool) -> Result<(), Error> {
    if path.exists() && !force {
        return Err(Error::Exists(path.to_path_buf()));
    }
    Ok(())
}

fn load_config(c: &Common) -> Result<RunConfig, Failure> {
    Ok(RunConfig::load(required(&c.config, "--config")?)?)
}

fn manifests(cfg: &RunConfig) -> Result<(Manifest, Manifest), Error> {
    let read = |p: &Option<PathBuf>, key: &str| match p {
        Some(p) => Manifest::read(p),
        None => Err(Error::Config(format!("{key} is not set"))),
    };
    Ok((read(&cfg.train_manifest, "data.train")?, read(&cfg.dev_manifest, "data.dev")?))
}

fn run(cli: Cli) -> Outcome {
    let c = &cli.common;
    match &cli.cmd {
        Cmd::SynthData => {
            let mut spec = match &c.config {
                Some(p) => RunConfig::load(p)?.synth,
                None => SynthSpec::default(),
            };
            if let Some(s) = c.seed {
                spec.seed = s;
            }
            let out = required(&c.out, "--out")?;
            let corpus = generate(&spec, out, c.force)?;
            println!(
                "wrote {} train and {} dev utterances to {}; config {}",
                corpus.train.len(),
                corpus.dev.len(),
                out.display(),
                corpus.config_path.display()
            );
        }
        Cmd::Featurize { inputs } => {
            let out = required(&c.out, "--out")?;
            create_dir(out)?;
            let fe = FrontendConfig::default();
            for input in inputs {
                let stem = input.file_stem().unwrap_or(input.as_os_str());
                let target = out.join(stem).with_extension("tstf");
                writable(&target, c.force)?;
                let spec = stft_logmel(&Waveform::from_wav(input)?, &fe)?;
                write_features(&target, &spec)?;
                println!("{}\t{} frames x {} dims", target.display(), spec.n_frames(), spec.dims());
            }
        }
        Cmd::Train => {
            let mut cfg = load_config(c)?;
            if let Some(s) = c.seed {
                cfg.train.seed = s;
            }
            let out = required(&c.out, "--out")?;
            let outcome = train::train(
                &cfg,
                &TrainOptions {
                    out: out.clone(),
                    force: c.force,
                    deterministic: c.deterministic,
                },
            )?;
            for row in &outcome.history {
                println!("{}", row.csv_row());
            }
            println!(
                "best dev CER {:.4}; {} parameters; outputs in {}",
                outcome.best_dev_cer,
                outcome.param_count,
                out.display()
            );
        }
        Cmd::Evaluate { checkpoint, manifest } => {
            let (cfg, model) = load_checkpoint(checkpoint)?;
            let examples = load_examples(&Manifest::read(manifest)?, &model.cfg)?;
            let report = evaluate(&model, &examples, cfg.train.max_decode_len)?;
            if let Some(out) = &c.out {
                create_dir(out)?;
                let path = out.join("eval.csv");
                writable(&path, c.force)?;
                report.write_csv(&path)?;
            }
            println!(
                "CER {:.4} ({} edits / {} reference tokens, {} utterances)",
                report.cer()?,
                report.total.distance(),
                report.total.reference_len,
                report.utterances.len()
            );
        }
        Cmd::Decode {
            checkpoint,
            manifest,
            beam,
            max_len,
        } => {
            let (cfg, model) = load_checkpoint(checkpoint)?;
            let max_len = max_len.unwrap_or(cfg.train.max_decode_len);
            let mut stdout = io::stdout().lock();
            for ex in load_examples(&Manifest::read(manifest)?, &model.cfg)? {
                let hyp = if *beam == 1 {
                    model.greedy(&ex.features, max_len)?
                } else {
                    model.beam(&ex.features, *beam, max_len)?.remove(0)
                };
                let tokens: Vec<String> = hyp.transcript().iter().map(usize::to_string).collect();
                match writeln!(stdout, "{}\t{:.6}\t{}", ex.id, hyp.score, tokens.join(" ")) {
                    Err(e) if e.kind() == io::ErrorKind::BrokenPipe => return Ok(()),
                    other => other.map_err(|source| Error::Io {
                        path: PathBuf::from("<stdout>"),
                        source,
                    })?,
                }
            }
        }
        Cmd::Ablate { kind } => {
            let mut cfg = load_config(c)?;
            if let Some(s) = c.seed {
                cfg.train.seed = s;
            }
            let kind: AblationKind = kind.parse()?;
            let out = required(&c.out, "--out")?;
            let (tr, dv) = manifests(&cfg)?;
            let train = load_examples(&tr, &cfg.model)?;
            let dev = load_examples(&dv, &cfg.model)?;
            let opts = TrainOptions {
                out: out.clone(),
                force: c.force,
                deterministic: c.deterministic,
            };
            println!("variant,params,dev_cer");
            for r in run_ablation(kind, &cfg, &train, &dev, &opts)? {
                println!("{},{},{}", r.variant, r.params, r.dev_cer);
            }
        }
        Cmd::DumpEmbeddings {
            checkpoint,
            manifest,
            stream,
        } => {
            let out = required(&c.out, "--out")?;
            let (_, model) = load_checkpoint(checkpoint)?;
            let embeddings = embed_manifest(&model, &Manifest::read(manifest)?, stream == "deep")?;
            create_dir(out)?;
            let path = out.join(format!("{stream}.csv"));
            writable(&path, c.force)?;
            write_embeddings(&path, &embeddings)?;
            println!("{}\t{} utterances", path.display(), embeddings.len());
        }
        Cmd::Probe { embeddings } => {
            let acc = speaker_probe(&read_embeddings(embeddings)?, c.seed.unwrap_or(0))?;
            println!("{acc}");
        }
        Cmd::GradCheck { op } => {
            let seed = c.seed.unwrap_or(0);
            let reports = match op {
                Some(op) => vec![check_op(op, seed)?],
                None => check_all(seed)?,
            };
            for r in &reports {
                println!("{r}");
            }
            let failed = reports.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(Error::Numeric(format!("{failed} of {} gradient checks failed", reports.len())).into());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.common.threads.max(1)).build_global() {
        eprintln!("error: cannot start {} threads: {e}", cli.common.threads);
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
