use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use labelsync::adapt::{adapt_prediction, pretrain_lm, LmTrainConfig};
use labelsync::config::KeyValues;
use labelsync::decoder::{decode_offline, decode_stream, split_chunks, DecodeConfig, DecodeRecord};
use labelsync::harness::{
    eval_wer, gen_corpus, read_split, read_text, run_experiment, to_json, train_transducer, write_corpus, write_text,
    ExperimentConfig, Transcript, MIN_RELATIVE_IMPROVEMENT,
};
use labelsync::model::{Checkpoint, LanguageModel, LsTransducer, NextTokenLm, Vocabulary};

mod checks;

#[derive(Parser)]
#[command(name = "labelsync", version, about = "Label-synchronous transducer toolkit")]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (train/dev/test) for one stock domain.
    GenData {
        #[arg(long, default_value = "source", value_parser = ["source", "target"])]
        domain: String,
    },
    /// Pretrain the prediction network as an LM on a text file.
    PretrainLm {
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        heldout: Option<PathBuf>,
    },
    /// Train a transducer on a corpus directory written by gen-data.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Initialise the prediction network from this LM checkpoint.
        #[arg(long)]
        lm: Option<PathBuf>,
    },
    /// Decode one split of a corpus directory.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// External LM for shallow fusion (weight from `lm_weight`).
        #[arg(long)]
        lm: Option<PathBuf>,
        /// Feed audio in chunks of this many frames.
        #[arg(long, value_name = "FRAMES")]
        stream: Option<usize>,
    },
    /// Text-only adaptation of the prediction network.
    Adapt {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        heldout: Option<PathBuf>,
    },
    /// Score hypotheses against references (`id<TAB>tokens[<TAB>times]` lines).
    EvalWer {
        /// Reference file; a third column holds token durations (corpus manifests).
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Hypothesis file; a third column holds decoder boundaries.
        #[arg(long)]
        hyp: PathBuf,
    },
    /// Finite-difference check of the full training loss.
    Gradcheck {
        #[arg(long, default_value_t = 200)]
        coords: usize,
    },
    /// Compare CTC prefix and eos scores with exhaustive path enumeration.
    OracleCheck {
        /// Posterior dump: header `T U`, then T rows of U+1 log-probabilities.
        #[arg(long)]
        posterior: Option<PathBuf>,
        /// Random instances to check when no dump is given.
        #[arg(long, default_value_t = 500)]
        instances: usize,
    },
    /// Full pipeline: data, LM, training, decoding, adaptation, fusion.
    RunExperiment {
        /// Use tiny sizes.
        #[arg(long)]
        smoke: bool,
        /// Exit with status 3 unless the toy accuracy and adaptation targets hold.
        #[arg(long)]
        check: bool,
    },
}

/// Problems with how the tool was invoked.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

enum Outcome {
    Success,
    CheckFailed,
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
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn load_config(cli: &Cli, smoke: bool) -> Result<ExperimentConfig> {
    let mut kv = match &cli.config {
        Some(path) => KeyValues::load(path).map_err(|e| UsageError(format!("{}: {e}", path.display())))?,
        None => KeyValues::new(),
    };
    if let Some(seed) = cli.seed {
        kv.set("seed", seed);
    }
    let base = if smoke { ExperimentConfig::smoke() } else { ExperimentConfig::default() };
    Ok(ExperimentConfig::from_kv(&kv, &base).map_err(|e| UsageError(e.to_string()))?)
}

fn need_file(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(UsageError(format!("{} does not exist", path.display())).into());
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json(value)?).with_context(|| format!("writing {}", path.display()))
}

fn load_transducer(path: &Path) -> Result<LsTransducer> {
    need_file(path)?;
    let ckpt = Checkpoint::load(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(LsTransducer::from_checkpoint(&ckpt)?)
}

fn load_lm(path: &Path) -> Result<LanguageModel> {
    need_file(path)?;
    let ckpt = Checkpoint::load(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(LanguageModel::from_checkpoint(&ckpt)?)
}

fn load_text(path: &Path, vocab: &Vocabulary) -> Result<Vec<Vec<usize>>> {
    need_file(path)?;
    read_text(path, vocab).with_context(|| format!("reading {}", path.display()))
}

fn run(cli: &Cli) -> Result<Outcome> {
    let smoke = matches!(cli.command, Command::RunExperiment { smoke: true, .. });
    let cfg = load_config(cli, smoke)?;
    let out = &cli.out;
    match &cli.command {
        Command::GenData { domain } => {
            let (source, target) = cfg.domains()?;
            let (spec, sizes) =
                if domain == "source" { (source, cfg.source_sizes) } else { (target, cfg.target_sizes) };
            let corpus = gen_corpus(&spec, sizes, cfg.seed)?;
            write_corpus(out, &corpus, &spec.vocab)?;
            for (name, utts) in corpus.splits() {
                let text: Vec<Vec<usize>> = utts.iter().map(|u| u.tokens.clone()).collect();
                write_text(&out.join(format!("{name}.txt")), &text, &spec.vocab)?;
            }
            println!("wrote {} corpus to {}", spec.name, out.display());
        }
        Command::PretrainLm { text, heldout } => {
            let vocab = &cfg.model.vocab;
            let text = load_text(text, vocab)?;
            let heldout = heldout.as_deref().map(|p| load_text(p, vocab)).transpose()?.unwrap_or_default();
            let mut lm = LanguageModel::new(cfg.model.clone(), cfg.seed)?;
            let epochs = pretrain_lm(&mut lm, &text, &heldout, &LmTrainConfig { seed: cfg.seed, ..cfg.lm.clone() })?;
            fs::create_dir_all(out)?;
            lm.to_checkpoint().save(&out.join("lm.ckpt"))?;
            write_json(&out.join("lm_log.json"), &epochs)?;
            println!("wrote {}", out.join("lm.ckpt").display());
        }
        Command::Train { data, lm } => {
            let train = read_split(data, "train", &cfg.model.vocab).with_context(|| format!("reading {}", data.display()))?;
            let mut model = LsTransducer::new(cfg.model.clone(), cfg.seed)?;
            if let Some(path) = lm {
                model.load_prediction_from(&load_lm(path)?)?;
            }
            let train_cfg = labelsync::harness::TrainConfig { seed: cfg.seed, ..cfg.train.clone() };
            let epochs = train_transducer(&mut model, &train, &train_cfg, |s, _| {
                log::info!("epoch {} l_all {:.4}", s.epoch, s.l_all);
            })?;
            fs::create_dir_all(out)?;
            model.to_checkpoint().save(&out.join("model.ckpt"))?;
            write_json(&out.join("train_log.json"), &epochs)?;
            println!("wrote {}", out.join("model.ckpt").display());
        }
        Command::Decode { model, data, split, lm, stream } => {
            let model = load_transducer(model)?;
            let utts = read_split(data, split, model.vocab()).with_context(|| format!("reading {}", data.display()))?;
            let lm = lm.as_deref().map(load_lm).transpose()?;
            let dcfg = DecodeConfig {
                lm_weight: if lm.is_some() { cfg.fusion_weight } else { 0.0 },
                ..cfg.decode.clone()
            };
            let lm_ref = lm.as_ref().map(|l| l as &dyn NextTokenLm);
            fs::create_dir_all(out)?;
            let (mut records, mut hyps) = (String::new(), String::new());
            for u in &utts {
                let result = match stream {
                    Some(size) => decode_stream(&model, &split_chunks(&u.frames, *size)?, &dcfg, lm_ref)?,
                    None => decode_offline(&model, &u.frames, &dcfg, lm_ref)?,
                };
                records.push_str(&serde_json::to_string(&DecodeRecord::new(&u.id, &result, model.vocab()))?);
                records.push('\n');
                let times: Vec<String> = result.boundaries.iter().map(usize::to_string).collect();
                hyps.push_str(&format!("{}\t{}\t{}\n", u.id, model.vocab().format(&result.tokens), times.join(" ")));
            }
            fs::write(out.join("decode.jsonl"), records)?;
            fs::write(out.join("hyp.tsv"), hyps)?;
            println!("decoded {} utterances into {}", utts.len(), out.display());
        }
        Command::Adapt { model, text, heldout } => {
            let model = load_transducer(model)?;
            let text = load_text(text, model.vocab())?;
            let heldout = heldout.as_deref().map(|p| load_text(p, model.vocab())).transpose()?.unwrap_or_default();
            let plan = labelsync::adapt::AdaptPlan {
                train: LmTrainConfig { seed: cfg.seed, ..cfg.adapt.train.clone() },
                ..cfg.adapt.clone()
            };
            let (adapted, epochs) = adapt_prediction(&model, &text, &heldout, &plan)?;
            fs::create_dir_all(out)?;
            adapted.to_checkpoint().save(&out.join("adapted.ckpt"))?;
            write_json(&out.join("adapt_log.json"), &epochs)?;
            println!("wrote {}", out.join("adapted.ckpt").display());
        }
        Command::EvalWer { reference, hyp } => {
            let vocab = &cfg.model.vocab;
            let refs = read_transcripts(reference, vocab, true)?;
            let hyps = read_transcripts(hyp, vocab, false)?;
            let metrics = eval_wer(&refs, &hyps)?;
            println!("{}", to_json(&metrics)?);
            if !metrics.missing.is_empty() {
                log::warn!("{} references have no hypothesis", metrics.missing.len());
            }
        }
        Command::Gradcheck { coords } => {
            let report = checks::full_loss_gradcheck(*coords, cfg.seed)?;
            println!("checked {} coordinates, max relative error {:.3e}", report.coords_checked, report.max_rel_error);
            if report.max_rel_error >= checks::GRADCHECK_TOLERANCE {
                println!("FAIL: worst coordinate {:?}", report.worst);
                return Ok(Outcome::CheckFailed);
            }
            println!("PASS");
        }
        Command::OracleCheck { posterior, instances } => {
            let result = match posterior {
                Some(path) => {
                    need_file(path)?;
                    checks::oracle_check_dump(&fs::read_to_string(path)?)?
                }
                None => checks::oracle_check_random(*instances, cfg.seed)?,
            };
            println!("{result}");
            if !result.passed() {
                return Ok(Outcome::CheckFailed);
            }
        }
        Command::RunExperiment { check, .. } => {
            let report = run_experiment(&cfg, Some(out))?;
            println!("{}", to_json(&report.summary)?);
            if report.failed() {
                let stage = report.stages.iter().find(|s| s.error.is_some());
                bail!("stage failed: {:?}", stage.map(|s| (&s.name, &s.error)));
            }
            if *check {
                let s = report.summary.as_ref().expect("summary of a complete run");
                let accuracy = s.source_wer.is_some_and(|w| w <= 0.05);
                let adaptation = 2 * s.adaptation_improved > s.adaptation_runs
                    && s.frozen_identical
                    && s.fusion_not_worse == s.adaptation_runs;
                println!("accuracy {} (source WER <= 5%)", if accuracy { "PASS" } else { "FAIL" });
                println!(
                    "adaptation {} (>= {:.0}% relative on a majority of seeds, frozen layers intact, fusion not worse)",
                    if adaptation { "PASS" } else { "FAIL" },
                    100.0 * MIN_RELATIVE_IMPROVEMENT
                );
                if !(accuracy && adaptation) {
                    return Ok(Outcome::CheckFailed);
                }
            }
        }
    }
    Ok(Outcome::Success)
}

/// Reads `id<TAB>tokens[<TAB>numbers]` lines. For references the numbers are
/// durations, for hypotheses boundaries.
fn read_transcripts(path: &Path, vocab: &Vocabulary, durations: bool) -> Result<Vec<Transcript>> {
    need_file(path)?;
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let mut fields = line.split('\t');
        let id = fields.next().unwrap_or_default();
        let tokens = vocab
            .parse_line(fields.next().unwrap_or_default())
            .with_context(|| format!("{}:{}", path.display(), n + 1))?;
        let times = match fields.next() {
            Some(col) => {
                let nums = col
                    .split_whitespace()
                    .map(str::parse::<usize>)
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .with_context(|| format!("{}:{}: bad number", path.display(), n + 1))?;
                if nums.len() != tokens.len() {
                    bail!("{}:{}: {} times for {} tokens", path.display(), n + 1, nums.len(), tokens.len());
                }
                Some(if durations {
                    nums.iter().scan(0, |acc, d| {
                        *acc += d;
                        Some(*acc)
                    }).collect()
                } else {
                    nums
                })
            }
            None => None,
        };
        out.push(Transcript { id: id.to_string(), tokens, times });
    }
    Ok(out)
}
