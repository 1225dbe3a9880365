//! Command-line driver: one subcommand per pipeline stage, the baselines,
//! and the full comparison matrix. Stage artifacts live in the cache keyed
//! by config fingerprint and seed; reports and tables are also written under
//! the output directory.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use zslu::corpus::Utterance;
use zslu::pipeline::cache::StageCache;
use zslu::pipeline::runs::{
    run_cascade_baseline, run_matrix, run_oracle, run_proposed, run_synthetic_speech_baseline,
    CascadeMode, RunContext, SynthMode,
};
use zslu::pipeline::{compose_end_to_end, save_e2e, EvalReport, ExperimentConfig, PipelineError};

#[derive(Parser)]
#[command(
    name = "zslu",
    about = "Named entity recognition from speech without paired training data, on a synthetic feature world"
)]
struct Cli {
    /// Experiment config file; defaults to the chosen preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Built-in preset used when no config file is given.
    #[arg(long, global = true, value_enum, default_value = "desk")]
    preset: Preset,

    /// Seed for single-stage commands; defaults to the first configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for reports, tables and exported files.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Stage cache directory.
    #[arg(long, global = true, default_value = "cache")]
    cache: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    PaperScale,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world and the three-corpus bundle.
    GenData,
    /// Train the speech recognizer on the paired corpus.
    TrainAsr,
    /// Transcribe the recognizer's training data and extract embeddings.
    BuildT2e,
    /// Train the text-to-embedding model on the extracted pairs.
    TrainT2e,
    /// Synthesize embeddings for the tagged texts into tagger training data.
    BuildSlu,
    /// Train the tagging decoder on simulated embeddings.
    TrainSlu,
    /// Compose the recognizer trunk with the tagger and save the checkpoint.
    Compose,
    /// Evaluate the composed proposed system on dev and test.
    Eval,
    /// Run one comparison system.
    Baseline {
        #[arg(value_enum)]
        which: BaselineKind,
    },
    /// Run every system for every configured seed and print the table.
    Matrix {
        /// Seeds to run; defaults to the configured list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Write the active config (with every default) to the output directory.
    ShowConfig,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineKind {
    SynthAll,
    SynthFrozen,
    CascadeManual,
    CascadeAuto,
    Oracle,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, PipelineError> {
    let config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => match cli.preset {
            Preset::Desk => ExperimentConfig::desk(),
            Preset::PaperScale => ExperimentConfig::paper_scale(),
        },
    };
    config.validate()?;
    Ok(config)
}

fn write_report(out: &std::path::Path, report: &EvalReport) -> Result<(), PipelineError> {
    std::fs::create_dir_all(out)?;
    let path = out.join(format!("report-{}-s{}.json", report.system, report.seed));
    std::fs::write(&path, report.to_json())?;
    println!(
        "{}: seed {}  dev NEER {:.1}%  test NEER {:.1}%  test WER {:.2}%  -> {}",
        report.system,
        report.seed,
        100.0 * report.dev.neer,
        100.0 * report.test.neer,
        100.0 * report.test.wer,
        path.display()
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let config = load_config(cli)?;
    let cache = StageCache::new(&cli.cache);
    let seed = cli.seed.unwrap_or_else(|| config.seeds.first().copied().unwrap_or(0));
    let ctx = RunContext::new(&config, &cache, seed)?;

    match &cli.command {
        Command::GenData => {
            let bundle = ctx.bundle()?;
            println!(
                "corpus ready under {} (asr {} / ner {}+{} / test {})",
                cache.stage_dir(ctx.fingerprint(), seed, "corpus").display(),
                bundle.asr_train.len(),
                bundle.ner_train.len(),
                bundle.ner_dev.len(),
                bundle.test.len()
            );
        }
        Command::TrainAsr => {
            let asr = ctx.asr()?;
            let bundle = ctx.bundle()?;
            let test_utts: Vec<Utterance> = bundle
                .test
                .iter()
                .map(|u| Utterance {
                    id: u.id.clone(),
                    text: u.tagged.bare_text(),
                    features: u.features.clone(),
                })
                .collect();
            let wer = zslu::asr::evaluate_wer(&asr, &test_utts)?;
            println!(
                "recognizer ready at {} (test WER {:.2}%)",
                cache.stage_dir(ctx.fingerprint(), seed, "asr").display(),
                100.0 * wer.wer()
            );
        }
        Command::BuildT2e => {
            let data = ctx.t2e_data()?;
            println!(
                "text-to-embedding data: {} train / {} val pairs ({} dropped)",
                data.train.len(),
                data.val.len(),
                data.dropped
            );
        }
        Command::TrainT2e => {
            ctx.t2e()?;
            println!(
                "text-to-embedding model ready at {}",
                cache.stage_dir(ctx.fingerprint(), seed, "t2e").display()
            );
        }
        Command::BuildSlu => {
            let samples = ctx.slu_data(false)?;
            println!("tagger training data: {} samples", samples.len());
        }
        Command::TrainSlu => {
            ctx.slu_model(false)?;
            println!(
                "tagging decoder ready at {}",
                cache.stage_dir(ctx.fingerprint(), seed, "slu-sim").display()
            );
        }
        Command::Compose => {
            let e2e = compose_end_to_end(ctx.asr()?, ctx.slu_model(false)?)?;
            std::fs::create_dir_all(&cli.out)?;
            let path = cli.out.join(format!("e2e-s{seed}.ckpt"));
            save_e2e(&e2e, &path).map_err(|e| PipelineError::Data(e.to_string()))?;
            println!("composed end-to-end model -> {}", path.display());
        }
        Command::Eval => {
            let report = run_proposed(&ctx)?;
            write_report(&cli.out, &report)?;
        }
        Command::Baseline { which } => {
            let report = match which {
                BaselineKind::SynthAll => {
                    run_synthetic_speech_baseline(&ctx, SynthMode::AllWeights)?
                }
                BaselineKind::SynthFrozen => {
                    run_synthetic_speech_baseline(&ctx, SynthMode::FrozenEncoder)?
                }
                BaselineKind::CascadeManual => run_cascade_baseline(&ctx, CascadeMode::Manual)?,
                BaselineKind::CascadeAuto => run_cascade_baseline(&ctx, CascadeMode::Automatic)?,
                BaselineKind::Oracle => run_oracle(&ctx)?,
            };
            write_report(&cli.out, &report)?;
        }
        Command::Matrix { seeds } => {
            let seeds = seeds.clone().unwrap_or_else(|| config.seeds.clone());
            let table = run_matrix(&config, &cache, &seeds)?;
            std::fs::create_dir_all(&cli.out)?;
            std::fs::write(cli.out.join("matrix.json"), table.to_json())?;
            std::fs::write(cli.out.join("matrix.txt"), table.render_text())?;
            print!("{}", table.render_text());
            println!("table -> {}", cli.out.join("matrix.txt").display());
        }
        Command::ShowConfig => {
            std::fs::create_dir_all(&cli.out)?;
            let path = cli.out.join("config.txt");
            config.save(&path)?;
            println!(
                "fingerprint {}\nconfig -> {}",
                config.fingerprint(),
                path.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
