//! Toy LS-Transducer: chunked-causal encoder, causal prediction network with
//! an intermediate tap, AIF label extraction, additive joint network and the
//! composite CTC + CE + quantity objective.

mod checkpoint;
mod config;
mod layers;
mod networks;
mod optim;
mod vocab;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use layers::{causal_mask, chunk_mask};
pub use networks::teacher_forcing;
pub use optim::{Optimizer, OptimizerKind, GRAD_CLIP};
pub use vocab::{Vocabulary, BLANK_SYMBOL, EOS_SYMBOL, UNK_SYMBOL};

use crate::align::{aif_extract, aif_extract_parallel, content_node, fire_weights_node, quantity_loss_node, AifAttention, BoundaryTable, LabelEncoding};
use crate::ctc::{ctc_loss_node, CtcPosterior};
use crate::error::{bail, Result};
use crate::numcore::{log_softmax_rows, Matrix, NodeId, ParamStore, Tape};
use layers::Linear;
use networks::{Encoder, PredictionNet};

/// Default CTC weight γ.
pub const DEFAULT_GAMMA: f64 = 0.5;
/// Default quantity-loss weight μ.
pub const DEFAULT_MU: f64 = 0.05;

/// Encoder output for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStates {
    pub e: Matrix,
    pub chunk_size: usize,
}

impl EncoderStates {
    pub fn frames(&self) -> usize {
        self.e.rows()
    }

    /// Content columns `1..d-1`.
    pub fn content(&self) -> Matrix {
        self.e.slice_cols(0, self.e.cols() - 1).expect("d >= 2")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionOutputs {
    /// Tap-layer output, the AIF queries.
    pub intermediate: Matrix,
    pub final_logits: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointOutput {
    pub logits: Matrix,
}

/// FC-mapped encoder content used as AIF keys and values.
#[derive(Debug, Clone, PartialEq)]
pub struct AifMemory {
    pub keys: Matrix,
    pub values: Matrix,
}

/// Loss components of one utterance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBundle {
    pub l_ctc: f64,
    pub l_ce: f64,
    pub l_qua: f64,
    pub l_all: f64,
    pub gamma: f64,
    pub mu: f64,
    pub target_len: usize,
}

impl LossBundle {
    pub fn compose(l_ctc: f64, l_ce: f64, l_qua: f64, target_len: usize, gamma: f64, mu: f64) -> Self {
        let l_all = combine_losses(l_ctc, l_ce, l_qua, target_len, gamma, mu);
        Self { l_ctc, l_ce, l_qua, l_all, gamma, mu, target_len }
    }
}

/// `γ·l_ctc + (1−γ)·l_ce + μ·l_qua·L`, accumulated in the same order as the tape.
pub fn combine_losses(l_ctc: f64, l_ce: f64, l_qua: f64, target_len: usize, gamma: f64, mu: f64) -> f64 {
    let mut v = 0.0;
    for (w, x) in loss_weights(target_len, gamma, mu).into_iter().zip([l_ctc, l_ce, l_qua]) {
        v += w * x;
    }
    v
}

fn loss_weights(target_len: usize, gamma: f64, mu: f64) -> [f64; 3] {
    [gamma, 1.0 - gamma, mu * target_len as f64]
}

/// One training pair.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub frames: &'a Matrix,
    pub tokens: &'a [usize],
}

/// Output of [`LsTransducer::forward_training`].
#[derive(Debug, Clone)]
pub struct TrainingLoss {
    /// Batch mean of `l_all`.
    pub total: NodeId,
    pub bundles: Vec<LossBundle>,
}

impl TrainingLoss {
    pub fn mean(&self) -> LossBundle {
        let n = self.bundles.len().max(1) as f64;
        let avg = |f: fn(&LossBundle) -> f64| self.bundles.iter().map(f).sum::<f64>() / n;
        let first = self.bundles.first();
        LossBundle {
            l_ctc: avg(|b| b.l_ctc),
            l_ce: avg(|b| b.l_ce),
            l_qua: avg(|b| b.l_qua),
            l_all: avg(|b| b.l_all),
            gamma: first.map_or(DEFAULT_GAMMA, |b| b.gamma),
            mu: first.map_or(DEFAULT_MU, |b| b.mu),
            target_len: self.bundles.iter().map(|b| b.target_len).sum(),
        }
    }
}

fn component_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const PRED_STREAM: u64 = 2;

#[derive(Debug, Clone)]
pub struct LsTransducer {
    config: ModelConfig,
    store: ParamStore,
    encoder: Encoder,
    prediction: PredictionNet,
    aif: AifAttention,
    label_fc: Linear,
    ctc_fc: Linear,
}

impl LsTransducer {
    /// Fresh parameters; the prediction network draws from its own stream so it
    /// matches a [`LanguageModel`] built from the same seed.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = Encoder::register(&mut store, &config, &mut component_rng(seed, 1));
        let prediction = PredictionNet::register(&mut store, &config, &mut component_rng(seed, PRED_STREAM));
        let mut rng = component_rng(seed, 3);
        let aif = AifAttention::register(&mut store, "aif", config.content_dim, config.pred_dim, config.separate_aif_values, &mut rng);
        for id in [Some(aif.key_w), aif.value.map(|v| v.0)].into_iter().flatten() {
            let v = &mut store.get_mut(id).value;
            *v = v.scale(0.5);
        }
        let label_fc = Linear::register(&mut store, "label_fc", config.pred_dim, config.vocab.decoder_size(), 0.02, &mut rng);
        let ctc_fc = Linear::register(
            &mut store,
            "ctc_fc",
            config.content_dim,
            config.vocab.ctc_size(),
            (1.0 / config.content_dim as f64).sqrt(),
            &mut rng,
        );
        Ok(Self { config, store, encoder, prediction, aif, label_fc, ctc_fc })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.config.vocab
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Names of the embedding and lowest `layers` prediction blocks.
    pub fn is_lower_prediction_param(name: &str, layers: usize) -> bool {
        PredictionNet::is_lower(name, layers)
    }

    // ---- tape builders -------------------------------------------------

    pub fn encode_node(&self, tape: &mut Tape, frames: &Matrix, chunk_size: usize) -> Result<NodeId> {
        self.encoder.forward(tape, &self.store, frames, chunk_size)
    }

    pub fn predict_nodes(&self, tape: &mut Tape, tokens: &[usize], tap: usize) -> Result<(NodeId, NodeId)> {
        self.prediction.forward(tape, &self.store, tokens, tap)
    }

    /// Composite loss over a batch, averaged over utterances.
    pub fn forward_training(&self, tape: &mut Tape, batch: &[Example], gamma: f64, mu: f64) -> Result<TrainingLoss> {
        if batch.is_empty() {
            bail!(Invalid, "empty training batch");
        }
        let mut totals = Vec::with_capacity(batch.len());
        let mut bundles = Vec::with_capacity(batch.len());
        for ex in batch {
            let (node, bundle) = self.utterance_loss(tape, ex, gamma, mu)?;
            totals.push((node, 1.0 / batch.len() as f64));
            bundles.push(bundle);
        }
        let total = tape.linear_combination(&totals)?;
        Ok(TrainingLoss { total, bundles })
    }

    fn utterance_loss(&self, tape: &mut Tape, ex: &Example, gamma: f64, mu: f64) -> Result<(NodeId, LossBundle)> {
        let vocab = &self.config.vocab;
        if ex.tokens.is_empty() {
            bail!(Invalid, "empty target sequence");
        }
        if let Some(&bad) = ex.tokens.iter().find(|&&t| !vocab.is_normal(t)) {
            bail!(Invalid, "target token {} is not a normal token", bad);
        }
        let l = ex.tokens.len();
        let enc = self.encode_node(tape, ex.frames, self.config.chunk_size)?;
        let alpha = fire_weights_node(tape, enc)?;
        let content = content_node(tape, enc)?;

        let ctc_logits = self.ctc_fc.forward(tape, &self.store, content)?;
        let ctc_lp = tape.log_softmax_rows(ctc_logits)?;
        let l_ctc = ctc_loss_node(tape, ctc_lp, ex.tokens)?;

        let (input, target) = teacher_forcing(ex.tokens, vocab.sos());
        let (queries, pred_logits) = self.predict_nodes(tape, &input, self.config.tap_layer)?;
        let bounds = BoundaryTable::from_weights(tape.value(alpha).as_slice(), target.len());
        let (keys, values) = self.aif.project(tape, &self.store, content)?;
        let c = aif_extract_parallel(tape, queries, keys, values, &bounds)?;
        let label_logits = self.label_fc.forward(tape, &self.store, c)?;
        let joint = tape.add(label_logits, pred_logits)?;
        let l_ce = tape.cross_entropy(joint, &target)?;

        let l_qua = quantity_loss_node(tape, alpha, l)?;
        let [wc, we, wq] = loss_weights(l, gamma, mu);
        let all = tape.linear_combination(&[(l_ctc, wc), (l_ce, we), (l_qua, wq)])?;
        let bundle = LossBundle {
            l_ctc: tape.value(l_ctc).item(),
            l_ce: tape.value(l_ce).item(),
            l_qua: tape.value(l_qua).item(),
            l_all: tape.value(all).item(),
            gamma,
            mu,
            target_len: l,
        };
        Ok((all, bundle))
    }

    /// Mean next-token CE of the prediction network used as an LM.
    pub fn lm_loss_node(&self, tape: &mut Tape, sentences: &[&[usize]]) -> Result<NodeId> {
        self.prediction.lm_loss(tape, &self.store, sentences, self.config.vocab.sos())
    }

    // ---- inference -----------------------------------------------------

    pub fn encode(&self, frames: &Matrix, chunk_size: usize) -> Result<EncoderStates> {
        let mut tape = Tape::new();
        let e = self.encode_node(&mut tape, frames, chunk_size)?;
        Ok(EncoderStates { e: tape.value(e).clone(), chunk_size })
    }

    pub fn predict(&self, tokens: &[usize]) -> Result<PredictionOutputs> {
        self.predict_at(tokens, self.config.tap_layer)
    }

    pub fn predict_at(&self, tokens: &[usize], tap: usize) -> Result<PredictionOutputs> {
        let mut tape = Tape::new();
        let (inter, logits) = self.predict_nodes(&mut tape, tokens, tap)?;
        Ok(PredictionOutputs { intermediate: tape.value(inter).clone(), final_logits: tape.value(logits).clone() })
    }

    /// `FC(label_encoding) + pred_logits`.
    pub fn joint(&self, label_encoding: &LabelEncoding, pred_logits: &Matrix) -> Result<JointOutput> {
        if label_encoding.labels() != pred_logits.rows() {
            bail!(Dimension, "{} label representations vs {} prediction rows", label_encoding.labels(), pred_logits.rows());
        }
        let mut tape = Tape::new();
        let c = tape.leaf(label_encoding.c.clone());
        let label = self.label_fc.forward(&mut tape, &self.store, c)?;
        let pred = tape.leaf(pred_logits.clone());
        let sum = tape.add(label, pred)?;
        Ok(JointOutput { logits: tape.value(sum).clone() })
    }

    pub fn ctc_posterior(&self, enc: &EncoderStates) -> Result<CtcPosterior> {
        let mut tape = Tape::new();
        let content = tape.leaf(enc.content());
        let logits = self.ctc_fc.forward(&mut tape, &self.store, content)?;
        CtcPosterior::new(log_softmax_rows(tape.value(logits))?)
    }

    pub fn aif_memory(&self, enc: &EncoderStates) -> Result<AifMemory> {
        let mut tape = Tape::new();
        let content = tape.leaf(enc.content());
        let (k, v) = self.aif.project(&mut tape, &self.store, content)?;
        Ok(AifMemory { keys: tape.value(k).clone(), values: tape.value(v).clone() })
    }

    /// Joint log-distribution for one label from its query, its prediction
    /// logits and the encoder prefix `1..=boundary`.
    pub fn label_log_probs(&self, query: &[f64], pred_logits: &[f64], memory: &AifMemory, boundary: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let q = tape.leaf(Matrix::row_vector(query));
        let k = tape.leaf(memory.keys.clone());
        let v = if memory.values == memory.keys { k } else { tape.leaf(memory.values.clone()) };
        let c = aif_extract(&mut tape, q, k, v, boundary)?;
        let label = self.label_fc.forward(&mut tape, &self.store, c)?;
        let pred = tape.leaf(Matrix::row_vector(pred_logits));
        let joint = tape.add(label, pred)?;
        Ok(log_softmax_rows(tape.value(joint))?.into_vec())
    }

    /// Prediction network logits through its own output FC only.
    pub fn lm_forward(&self, tokens: &[usize]) -> Result<Matrix> {
        Ok(self.predict_at(tokens, self.prediction.num_layers())?.final_logits)
    }

    /// Copies every prediction-network tensor from `lm`.
    pub fn load_prediction_from(&mut self, lm: &LanguageModel) -> Result<()> {
        if lm.vocab() != self.vocab() {
            bail!(Config, "LM vocabulary does not match the model vocabulary");
        }
        for (_, p) in lm.store().iter() {
            let Some(id) = self.store.find(&p.name) else {
                bail!(Config, "LM tensor {} has no counterpart in the model", p.name);
            };
            let dst = &mut self.store.get_mut(id).value;
            if dst.shape() != p.value.shape() {
                bail!(Dimension, "LM tensor {} has shape {:?}, model expects {:?}", p.name, p.value.shape(), dst.shape());
            }
            *dst = p.value.clone();
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store("transducer", self.config.to_kv(), &self.store)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind("transducer")?;
        let config = ModelConfig::from_kv(&ckpt.config, &ModelConfig::toy(Vocabulary::letters(1), 1))?;
        let mut model = Self::new(config, 0)?;
        ckpt.fill_store(&mut model.store)?;
        Ok(model)
    }
}

/// The prediction network alone, trained as a causal LM.
#[derive(Debug, Clone)]
pub struct LanguageModel {
    config: ModelConfig,
    store: ParamStore,
    net: PredictionNet,
}

impl LanguageModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let net = PredictionNet::register(&mut store, &config, &mut component_rng(seed, PRED_STREAM));
        Ok(Self { config, store, net })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.config.vocab
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn lm_forward(&self, tokens: &[usize]) -> Result<Matrix> {
        let mut tape = Tape::new();
        let (_, logits) = self.net.forward(&mut tape, &self.store, tokens, self.net.num_layers())?;
        Ok(tape.value(logits).clone())
    }

    pub fn lm_loss_node(&self, tape: &mut Tape, sentences: &[&[usize]]) -> Result<NodeId> {
        self.net.lm_loss(tape, &self.store, sentences, self.config.vocab.sos())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store("lm", self.config.to_kv(), &self.store)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind("lm")?;
        let config = ModelConfig::from_kv(&ckpt.config, &ModelConfig::toy(Vocabulary::letters(1), 1))?;
        let mut lm = Self::new(config, 0)?;
        ckpt.fill_store(&mut lm.store)?;
        Ok(lm)
    }
}

/// Anything that scores the next token given a prefix starting with `sos`.
pub trait NextTokenLm {
    fn vocab(&self) -> &Vocabulary;

    /// Logits for every position of `tokens`.
    fn logits(&self, tokens: &[usize]) -> Result<Matrix>;

    fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let logits = self.logits(prefix)?;
        let last = logits.slice_rows(logits.rows() - 1, logits.rows())?;
        Ok(log_softmax_rows(&last)?.into_vec())
    }

    /// Mean next-token CE (nats per token, eos included) over `sentences`.
    fn mean_ce(&self, sentences: &[Vec<usize>]) -> Result<f64> {
        let sos = self.vocab().sos();
        let mut total = 0.0;
        let mut count = 0usize;
        for s in sentences {
            let (input, target) = teacher_forcing(s, sos);
            let lp = log_softmax_rows(&self.logits(&input)?)?;
            total -= target.iter().enumerate().map(|(r, &y)| lp.get(r, y)).sum::<f64>();
            count += target.len();
        }
        if count == 0 {
            bail!(Invalid, "no tokens to score");
        }
        Ok(total / count as f64)
    }

    fn perplexity(&self, sentences: &[Vec<usize>]) -> Result<f64> {
        Ok(self.mean_ce(sentences)?.exp())
    }
}

impl NextTokenLm for LsTransducer {
    fn vocab(&self) -> &Vocabulary {
        &self.config.vocab
    }

    fn logits(&self, tokens: &[usize]) -> Result<Matrix> {
        self.lm_forward(tokens)
    }
}

impl NextTokenLm for LanguageModel {
    fn vocab(&self) -> &Vocabulary {
        &self.config.vocab
    }

    fn logits(&self, tokens: &[usize]) -> Result<Matrix> {
        self.lm_forward(tokens)
    }
}
