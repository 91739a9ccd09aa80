//! End-to-end toy experiment: data, LM pretraining, training, decoding,
//! adaptation and shallow fusion.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::corpus::{gen_corpus, gen_text, texts, write_corpus, write_text, Corpus, CorpusSizes};
use super::domain::{DomainSpec, SyntheticUtterance};
use super::train::{train_transducer, EpochStats, TrainConfig};
use super::wer::{eval_wer, Metrics, Transcript};
use crate::adapt::{adapt_prediction, is_adaptable, pretrain_lm, AdaptPlan, LmEpoch, LmTrainConfig};
use crate::config::KeyValues;
use crate::decoder::{decode_offline, DecodeConfig, DecodeResult};
use crate::error::{bail, Error, Result};
use crate::model::{LanguageModel, LsTransducer, ModelConfig, NextTokenLm, OptimizerKind};

/// Everything a run depends on. Every field maps to one config key.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub source_sizes: CorpusSizes,
    /// `train` is the size of each adaptation text, `dev` the held-out text.
    pub target_sizes: CorpusSizes,
    pub noise: f64,
    pub lm: LmTrainConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    /// Shallow-fusion weight for the fused target runs.
    pub fusion_weight: f64,
    pub adapt: AdaptPlan,
    pub adapt_seeds: usize,
    /// Epochs of fine-tuning the source LM into the target LM used for fusion.
    pub target_lm_epochs: usize,
    /// Decoding threads; 0 uses rayon's default.
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let source = DomainSpec::stock_source();
        Self {
            seed: 1,
            model: ModelConfig::toy(source.vocab.clone(), source.feat_dim()),
            source_sizes: CorpusSizes { train: 4000, dev: 100, test: 200 },
            target_sizes: CorpusSizes { train: 2000, dev: 100, test: 200 },
            noise: source.noise,
            lm: LmTrainConfig { epochs: 5, lr: 3e-3, batch_size: 16, optimizer: OptimizerKind::Adam, seed: 0 },
            train: TrainConfig { epochs: 30, lr: 3e-3, lr_decay: 0.95, mu: 0.2, ..TrainConfig::default() },
            decode: DecodeConfig::default(),
            fusion_weight: 0.2,
            adapt: AdaptPlan {
                freeze_lower: 2,
                train_output_fc: true,
                train: LmTrainConfig { epochs: 5, lr: 3e-3, batch_size: 16, optimizer: OptimizerKind::Adam, seed: 0 },
            },
            adapt_seeds: 3,
            target_lm_epochs: 5,
            threads: 0,
        }
    }
}

impl ExperimentConfig {
    /// Tiny sizes for a quick end-to-end check.
    pub fn smoke() -> Self {
        let base = Self::default();
        Self {
            source_sizes: CorpusSizes { train: 48, dev: 8, test: 8 },
            target_sizes: CorpusSizes { train: 48, dev: 8, test: 8 },
            lm: LmTrainConfig { epochs: 1, ..base.lm.clone() },
            train: TrainConfig { epochs: 2, ..base.train.clone() },
            decode: DecodeConfig { beam_size: 3, ..base.decode.clone() },
            adapt: AdaptPlan { train: LmTrainConfig { epochs: 1, ..base.adapt.train.clone() }, ..base.adapt.clone() },
            adapt_seeds: 2,
            target_lm_epochs: 1,
            ..base
        }
    }

    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "noise",
        "source_train",
        "source_dev",
        "source_test",
        "target_train",
        "target_dev",
        "target_test",
        "lm_epochs",
        "lm_lr",
        "lm_batch_size",
        "epochs",
        "lr",
        "lr_decay",
        "batch_size",
        "optimizer",
        "gamma",
        "mu",
        "beta",
        "beam_size",
        "lm_weight",
        "freeze_lower",
        "train_output_fc",
        "adapt_epochs",
        "adapt_lr",
        "adapt_batch_size",
        "adapt_seeds",
        "target_lm_epochs",
        "threads",
    ];

    /// Reads known keys over `base`; unknown keys are an error.
    pub fn from_kv(kv: &KeyValues, base: &Self) -> Result<Self> {
        let mut known: Vec<&str> = Self::KEYS.to_vec();
        known.extend_from_slice(ModelConfig::KEYS);
        kv.check_known(&known)?;
        let cfg = Self {
            seed: kv.get_or("seed", base.seed)?,
            model: ModelConfig::from_kv(kv, &base.model)?,
            source_sizes: CorpusSizes {
                train: kv.get_or("source_train", base.source_sizes.train)?,
                dev: kv.get_or("source_dev", base.source_sizes.dev)?,
                test: kv.get_or("source_test", base.source_sizes.test)?,
            },
            target_sizes: CorpusSizes {
                train: kv.get_or("target_train", base.target_sizes.train)?,
                dev: kv.get_or("target_dev", base.target_sizes.dev)?,
                test: kv.get_or("target_test", base.target_sizes.test)?,
            },
            noise: kv.get_or("noise", base.noise)?,
            lm: LmTrainConfig {
                epochs: kv.get_or("lm_epochs", base.lm.epochs)?,
                lr: kv.get_or("lm_lr", base.lm.lr)?,
                batch_size: kv.get_or("lm_batch_size", base.lm.batch_size)?,
                ..base.lm.clone()
            },
            train: TrainConfig {
                epochs: kv.get_or("epochs", base.train.epochs)?,
                lr: kv.get_or("lr", base.train.lr)?,
                lr_decay: kv.get_or("lr_decay", base.train.lr_decay)?,
                batch_size: kv.get_or("batch_size", base.train.batch_size)?,
                optimizer: kv.get_or("optimizer", base.train.optimizer)?,
                gamma: kv.get_or("gamma", base.train.gamma)?,
                mu: kv.get_or("mu", base.train.mu)?,
                seed: base.train.seed,
            },
            decode: DecodeConfig {
                beta: kv.get_or("beta", base.decode.beta)?,
                beam_size: kv.get_or("beam_size", base.decode.beam_size)?,
                ..base.decode.clone()
            },
            fusion_weight: kv.get_or("lm_weight", base.fusion_weight)?,
            adapt: AdaptPlan {
                freeze_lower: kv.get_or("freeze_lower", base.adapt.freeze_lower)?,
                train_output_fc: kv.get_or("train_output_fc", base.adapt.train_output_fc)?,
                train: LmTrainConfig {
                    epochs: kv.get_or("adapt_epochs", base.adapt.train.epochs)?,
                    lr: kv.get_or("adapt_lr", base.adapt.train.lr)?,
                    batch_size: kv.get_or("adapt_batch_size", base.adapt.train.batch_size)?,
                    ..base.adapt.train.clone()
                },
            },
            adapt_seeds: kv.get_or("adapt_seeds", base.adapt_seeds)?,
            target_lm_epochs: kv.get_or("target_lm_epochs", base.target_lm_epochs)?,
            threads: kv.get_or("threads", base.threads)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = self.model.to_kv();
        kv.set("seed", self.seed);
        kv.set("noise", self.noise);
        kv.set("source_train", self.source_sizes.train);
        kv.set("source_dev", self.source_sizes.dev);
        kv.set("source_test", self.source_sizes.test);
        kv.set("target_train", self.target_sizes.train);
        kv.set("target_dev", self.target_sizes.dev);
        kv.set("target_test", self.target_sizes.test);
        kv.set("lm_epochs", self.lm.epochs);
        kv.set("lm_lr", self.lm.lr);
        kv.set("lm_batch_size", self.lm.batch_size);
        kv.set("epochs", self.train.epochs);
        kv.set("lr", self.train.lr);
        kv.set("lr_decay", self.train.lr_decay);
        kv.set("batch_size", self.train.batch_size);
        kv.set("optimizer", self.train.optimizer);
        kv.set("gamma", self.train.gamma);
        kv.set("mu", self.train.mu);
        kv.set("beta", self.decode.beta);
        kv.set("beam_size", self.decode.beam_size);
        kv.set("lm_weight", self.fusion_weight);
        kv.set("freeze_lower", self.adapt.freeze_lower);
        kv.set("train_output_fc", self.adapt.train_output_fc);
        kv.set("adapt_epochs", self.adapt.train.epochs);
        kv.set("adapt_lr", self.adapt.train.lr);
        kv.set("adapt_batch_size", self.adapt.train.batch_size);
        kv.set("adapt_seeds", self.adapt_seeds);
        kv.set("target_lm_epochs", self.target_lm_epochs);
        kv.set("threads", self.threads);
        kv
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.decode.validate()?;
        self.adapt.validate(self.model.pred_layers)?;
        if self.lm.batch_size == 0 {
            bail!(Config, "lm_batch_size must be positive");
        }
        if !(self.fusion_weight >= 0.0) {
            bail!(Config, "lm_weight must be nonnegative");
        }
        if self.adapt_seeds == 0 {
            bail!(Config, "adapt_seeds must be at least 1");
        }
        let (source, _) = self.domains()?;
        if self.model.vocab != source.vocab || self.model.feat_dim != source.feat_dim() {
            bail!(Config, "model vocabulary and feat_dim must match the stock domains");
        }
        Ok(())
    }

    /// Stock source and target domains at the configured noise level.
    pub fn domains(&self) -> Result<(DomainSpec, DomainSpec)> {
        let mut source = DomainSpec::stock_source();
        let mut target = DomainSpec::stock_target();
        source.noise = self.noise;
        target.noise = self.noise;
        source.validate()?;
        target.validate()?;
        Ok((source, target))
    }

    /// Seed of adaptation run `k`; it drives both its text sample and its shuffling.
    pub fn adapt_seed(&self, k: usize) -> u64 {
        self.seed.wrapping_mul(1000).wrapping_add(1 + k as u64)
    }
}

/// Decodes every utterance, possibly on several threads; output order
/// follows `utts`.
pub fn decode_all(
    model: &LsTransducer,
    utts: &[SyntheticUtterance],
    cfg: &DecodeConfig,
    lm: Option<&LanguageModel>,
    threads: usize,
) -> Result<Vec<DecodeResult>> {
    let run = || {
        utts.par_iter()
            .map(|u| {
                let mut r = decode_offline(model, &u.frames, cfg, lm.map(|l| l as &dyn NextTokenLm))?;
                r.history.clear();
                Ok(r)
            })
            .collect::<Result<Vec<_>>>()
    };
    if threads == 0 {
        return run();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?
        .install(run)
}

/// References with true token end frames.
pub fn references(utts: &[SyntheticUtterance]) -> Vec<Transcript> {
    utts.iter().map(|u| Transcript::with_times(u.id.clone(), u.tokens.clone(), u.token_ends())).collect()
}

/// Decodes and scores a test set.
pub fn evaluate(
    model: &LsTransducer,
    utts: &[SyntheticUtterance],
    cfg: &DecodeConfig,
    lm: Option<&LanguageModel>,
    threads: usize,
) -> Result<Metrics> {
    let results = decode_all(model, utts, cfg, lm, threads)?;
    let hyps: Vec<Transcript> = utts
        .iter()
        .zip(results)
        .map(|(u, r)| Transcript::with_times(u.id.clone(), r.tokens, r.boundaries))
        .collect();
    eval_wer(&references(utts), &hyps)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ok,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub error: Option<String>,
}

pub const STAGES: [&str; 6] = ["gen-data", "pretrain-lm", "train", "decode-source", "adapt", "decode-target"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Seeds {
    pub base: u64,
    pub data: u64,
    pub model: u64,
    pub adapt: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdaptRun {
    pub seed: u64,
    pub epochs: Vec<LmEpoch>,
    /// Prediction-network perplexity on the held-out target text.
    pub perplexity_before: f64,
    pub perplexity_after: f64,
    /// Every tensor outside the adaptable set is bit-identical.
    pub frozen_identical: bool,
    pub target_lm_epochs: Vec<LmEpoch>,
    pub target: Option<Metrics>,
    pub target_fused: Option<Metrics>,
    /// Source test after adaptation; reported, not checked.
    pub source: Option<Metrics>,
    /// `(unadapted - adapted) / unadapted` on the target test.
    pub relative_improvement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub source_wer: Option<f64>,
    pub target_wer_unadapted: Option<f64>,
    pub adaptation_improved: usize,
    pub adaptation_runs: usize,
    pub fusion_not_worse: usize,
    pub frozen_identical: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub config: BTreeMap<String, String>,
    pub seeds: Seeds,
    pub stages: Vec<StageRecord>,
    pub lm_pretraining: Vec<LmEpoch>,
    pub training: Vec<EpochStats>,
    pub source_test: Option<Metrics>,
    pub target_unadapted: Option<Metrics>,
    pub adaptation: Vec<AdaptRun>,
    pub summary: Option<Summary>,
    /// Wall-clock seconds per stage; the only nondeterministic field.
    pub timings: BTreeMap<String, f64>,
}

impl Report {
    pub fn failed(&self) -> bool {
        self.stages.iter().any(|s| s.status == StageStatus::Failed)
    }

    /// JSON without timings, for byte comparisons across runs.
    pub fn deterministic_json(&self) -> Result<String> {
        let mut copy = self.clone();
        copy.timings.clear();
        to_json(&copy)
    }
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))
}

/// Minimum relative target-WER reduction that counts as an improvement.
pub const MIN_RELATIVE_IMPROVEMENT: f64 = 0.05;

struct State {
    source: DomainSpec,
    target: DomainSpec,
    source_corpus: Option<Corpus>,
    target_dev_text: Vec<Vec<usize>>,
    target_test: Vec<SyntheticUtterance>,
    lm: Option<LanguageModel>,
    model: Option<LsTransducer>,
    adapted: Vec<(LsTransducer, LanguageModel)>,
}

fn artifact(out: Option<&Path>, name: &str) -> Option<PathBuf> {
    out.map(|d| d.join(name))
}

/// Runs every stage in order. A failing stage is recorded, later stages are
/// skipped, and artifacts already written under `out` stay in place.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Report> {
    cfg.validate()?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.txt"), cfg.to_kv().to_text())?;
    }
    let (source, target) = cfg.domains()?;
    let mut report = Report {
        config: cfg.to_kv().iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        seeds: Seeds {
            base: cfg.seed,
            data: cfg.seed,
            model: cfg.seed,
            adapt: (0..cfg.adapt_seeds).map(|k| cfg.adapt_seed(k)).collect(),
        },
        stages: Vec::new(),
        lm_pretraining: Vec::new(),
        training: Vec::new(),
        source_test: None,
        target_unadapted: None,
        adaptation: Vec::new(),
        summary: None,
        timings: BTreeMap::new(),
    };
    let mut state = State {
        source,
        target,
        source_corpus: None,
        target_dev_text: Vec::new(),
        target_test: Vec::new(),
        lm: None,
        model: None,
        adapted: Vec::new(),
    };
    let mut failed = false;
    for name in STAGES {
        if failed {
            report.stages.push(StageRecord { name: name.to_string(), status: StageStatus::Skipped, error: None });
            continue;
        }
        let start = Instant::now();
        log::info!("stage {name}");
        let result = run_stage(name, cfg, out, &mut state, &mut report);
        report.timings.insert(name.to_string(), start.elapsed().as_secs_f64());
        let (status, error) = match result {
            Ok(()) => (StageStatus::Ok, None),
            Err(e) => {
                log::error!("stage {name} failed: {e}");
                failed = true;
                (StageStatus::Failed, Some(e.to_string()))
            }
        };
        report.stages.push(StageRecord { name: name.to_string(), status, error });
    }
    if !failed {
        report.summary = Some(summarize(&report));
    }
    if let Some(dir) = out {
        fs::write(dir.join("report.json"), to_json(&report)?)?;
    }
    Ok(report)
}

fn run_stage(name: &str, cfg: &ExperimentConfig, out: Option<&Path>, st: &mut State, report: &mut Report) -> Result<()> {
    let vocab = cfg.model.vocab.clone();
    match name {
        "gen-data" => {
            let corpus = gen_corpus(&st.source, cfg.source_sizes, cfg.seed)?;
            let target = gen_corpus(
                &st.target,
                CorpusSizes { train: 1, dev: cfg.target_sizes.dev, test: cfg.target_sizes.test },
                cfg.seed,
            )?;
            st.target_dev_text = texts(&target.dev);
            st.target_test = target.test;
            if let Some(dir) = out {
                write_corpus(&dir.join("source"), &corpus, &vocab)?;
                super::corpus::write_split(&dir.join("target"), "test", &st.target_test, &vocab)?;
                write_text(&dir.join("target").join("dev.txt"), &st.target_dev_text, &vocab)?;
            }
            st.source_corpus = Some(corpus);
        }
        "pretrain-lm" => {
            let corpus = st.source_corpus.as_ref().expect("gen-data ran");
            let mut lm = LanguageModel::new(cfg.model.clone(), cfg.seed)?;
            let lm_cfg = LmTrainConfig { seed: cfg.seed, ..cfg.lm.clone() };
            report.lm_pretraining = pretrain_lm(&mut lm, &texts(&corpus.train), &texts(&corpus.dev), &lm_cfg)?;
            if let Some(path) = artifact(out, "lm.ckpt") {
                lm.to_checkpoint().save(&path)?;
            }
            st.lm = Some(lm);
        }
        "train" => {
            let corpus = st.source_corpus.as_ref().expect("gen-data ran");
            let mut model = LsTransducer::new(cfg.model.clone(), cfg.seed)?;
            if cfg.lm.epochs > 0 {
                model.load_prediction_from(st.lm.as_ref().expect("pretrain-lm ran"))?;
            }
            let train_cfg = TrainConfig { seed: cfg.seed, ..cfg.train.clone() };
            report.training = train_transducer(&mut model, &corpus.train, &train_cfg, |_, _| {})?;
            if let Some(path) = artifact(out, "model.ckpt") {
                model.to_checkpoint().save(&path)?;
            }
            st.model = Some(model);
        }
        "decode-source" => {
            let corpus = st.source_corpus.as_ref().expect("gen-data ran");
            let model = st.model.as_ref().expect("train ran");
            report.source_test = Some(evaluate(model, &corpus.test, &cfg.decode, None, cfg.threads)?);
        }
        "adapt" => {
            let model = st.model.as_ref().expect("train ran");
            let lm = st.lm.as_ref().expect("pretrain-lm ran");
            let layers = cfg.model.pred_layers;
            for k in 0..cfg.adapt_seeds {
                let seed = cfg.adapt_seed(k);
                let text = gen_text(&st.target, "adapt", cfg.target_sizes.train, seed)?;
                let plan = AdaptPlan { train: LmTrainConfig { seed, ..cfg.adapt.train.clone() }, ..cfg.adapt.clone() };
                let (adapted, epochs) = adapt_prediction(model, &text, &st.target_dev_text, &plan)?;
                let frozen_identical = model
                    .store()
                    .iter()
                    .zip(adapted.store().iter())
                    .filter(|((_, p), _)| !is_adaptable(&p.name, &plan, layers))
                    .all(|((_, a), (_, b))| bits(&a.value) == bits(&b.value));
                let mut target_lm = lm.clone();
                let target_lm_epochs = if cfg.target_lm_epochs > 0 {
                    let lm_cfg = LmTrainConfig { epochs: cfg.target_lm_epochs, seed, ..cfg.lm.clone() };
                    pretrain_lm(&mut target_lm, &text, &st.target_dev_text, &lm_cfg)?
                } else {
                    Vec::new()
                };
                if let Some(dir) = out {
                    write_text(&dir.join("target").join(format!("adapt-{seed}.txt")), &text, &vocab)?;
                    adapted.to_checkpoint().save(&dir.join(format!("adapted-{seed}.ckpt")))?;
                    target_lm.to_checkpoint().save(&dir.join(format!("target-lm-{seed}.ckpt")))?;
                }
                report.adaptation.push(AdaptRun {
                    seed,
                    epochs,
                    perplexity_before: model.perplexity(&st.target_dev_text)?,
                    perplexity_after: adapted.perplexity(&st.target_dev_text)?,
                    frozen_identical,
                    target_lm_epochs,
                    target: None,
                    target_fused: None,
                    source: None,
                    relative_improvement: None,
                });
                st.adapted.push((adapted, target_lm));
            }
        }
        "decode-target" => {
            let model = st.model.as_ref().expect("train ran");
            let source_test = &st.source_corpus.as_ref().expect("gen-data ran").test;
            let unadapted = evaluate(model, &st.target_test, &cfg.decode, None, cfg.threads)?;
            let fused_cfg = DecodeConfig { lm_weight: cfg.fusion_weight, ..cfg.decode.clone() };
            for (run, (adapted, target_lm)) in report.adaptation.iter_mut().zip(&st.adapted) {
                let target = evaluate(adapted, &st.target_test, &cfg.decode, None, cfg.threads)?;
                run.target_fused = Some(evaluate(adapted, &st.target_test, &fused_cfg, Some(target_lm), cfg.threads)?);
                run.source = Some(evaluate(adapted, source_test, &cfg.decode, None, cfg.threads)?);
                run.relative_improvement =
                    (unadapted.wer > 0.0).then(|| (unadapted.wer - target.wer) / unadapted.wer);
                run.target = Some(target);
            }
            report.target_unadapted = Some(unadapted);
        }
        other => bail!(Config, "unknown stage {other:?}"),
    }
    Ok(())
}

fn bits(m: &crate::numcore::Matrix) -> Vec<u64> {
    m.as_slice().iter().map(|v| v.to_bits()).collect()
}

fn summarize(report: &Report) -> Summary {
    let improved = report
        .adaptation
        .iter()
        .filter(|r| r.relative_improvement.is_some_and(|x| x >= MIN_RELATIVE_IMPROVEMENT))
        .count();
    let fusion_not_worse = report
        .adaptation
        .iter()
        .filter(|r| match (&r.target, &r.target_fused) {
            (Some(t), Some(f)) => f.wer <= t.wer,
            _ => false,
        })
        .count();
    Summary {
        source_wer: report.source_test.as_ref().map(|m| m.wer),
        target_wer_unadapted: report.target_unadapted.as_ref().map(|m| m.wer),
        adaptation_improved: improved,
        adaptation_runs: report.adaptation.len(),
        fusion_not_worse,
        frozen_identical: report.adaptation.iter().all(|r| r.frozen_identical),
    }
}
