//! Joint loss, Adam, the epoch loop, evaluation and checkpoints.

mod checkpoint;

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::config::RunConfig;
use crate::corpus::{
    batch, encode_tokens, DatasetSplit, EncodedExample, Utterance, VocabKind, Vocabs, CLS_ID, PAD_ID, PAD_LABEL_ID,
    SEP_ID,
};
use crate::encoder::load_pretrained_embeddings;
use crate::error::{Error, Result};
use crate::heads::Links;
use crate::metrics::EvalReport;
use crate::model::{JointModel, ModelConfig};
use crate::numcore::{finite_diff_check, GradCheckReport, Mode, ParamStore, Real, Tape, Var};

/// Examples per gradient partial sum. Fixed so the reduction order does not
/// depend on the thread count.
const REDUCE_CHUNK: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_include_pad: bool,
    pub strict_spans: bool,
}

impl TrainConfig {
    pub fn from_run(c: &RunConfig) -> Self {
        TrainConfig {
            adam: AdamConfig {
                lr: c.lr,
                beta1: c.adam_beta1,
                beta2: c.adam_beta2,
                eps: c.adam_eps,
            },
            epochs: c.epochs,
            batch_size: c.batch_size,
            seed: c.seed,
            loss_include_pad: c.loss_include_pad,
            strict_spans: c.strict_spans,
        }
    }
}

/// `−log p[gold]` of the final intent distribution.
pub fn intent_loss<T: Real>(tape: &mut Tape<'_, T>, intent_probs: Var, gold: usize) -> Result<Var> {
    tape.cross_entropy(intent_probs, gold)
}

/// `Σ_n mask[n]·(−log p_n[gold_n])` over the `N−1` labelled positions.
pub fn slot_loss<T: Real>(tape: &mut Tape<'_, T>, slot_probs: Var, gold: &[usize], mask: &[u8]) -> Result<Var> {
    if gold.len() != mask.len() {
        return Err(Error::Shape(format!(
            "{} slot targets vs {} mask entries",
            gold.len(),
            mask.len()
        )));
    }
    let w: Vec<T> = mask
        .iter()
        .map(|&m| if m == 1 { T::one() } else { T::zero() })
        .collect();
    tape.nll(slot_probs, gold, &w)
}

/// Per-example loss terms as tape handles.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub intent: Var,
    pub slot: Var,
    pub total: Var,
}

/// `L = L_I + L_S` for one encoded example.
pub fn joint_loss<T: Real, R: rand::Rng + ?Sized>(
    tape: &mut Tape<'_, T>,
    model: &JointModel,
    ex: &EncodedExample,
    include_pad: bool,
    mode: Mode,
    rng: &mut R,
) -> Result<LossTerms> {
    linked_loss(tape, model, ex, include_pad, mode, rng, Links::Live)
}

fn linked_loss<T: Real, R: rand::Rng + ?Sized>(
    tape: &mut Tape<'_, T>,
    model: &JointModel,
    ex: &EncodedExample,
    include_pad: bool,
    mode: Mode,
    rng: &mut R,
    links: Links<'_, T>,
) -> Result<LossTerms> {
    let out = model.forward(tape, &ex.token_ids, mode, rng, links)?;
    let intent = intent_loss(tape, out.heads.intent_probs, ex.intent_id)?;
    let all = vec![1u8; ex.loss_mask.len()];
    let mask = if include_pad { &all } else { &ex.loss_mask };
    let slot = slot_loss(tape, out.heads.slot_probs, &ex.slot_ids, mask)?;
    let total = tape.add(intent, slot)?;
    Ok(LossTerms { intent, slot, total })
}

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = params.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update. Missing gradients count as zero. The
/// store is left untouched if any gradient is non-finite.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &[Option<Vec<T>>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (id, g) in params.ids().zip(grads) {
        if let Some(g) = g {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {}", params.name(id))));
            }
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        let p = params.get_mut(id).data_mut();
        for i in 0..p.len() {
            let g = grads[k].as_ref().map_or(0.0, |g| g[i].as_f64());
            let mi = cfg.beta1 * m[i].as_f64() + (1.0 - cfg.beta1) * g;
            let vi = cfg.beta2 * v[i].as_f64() + (1.0 - cfg.beta2) * g * g;
            m[i] = T::lit(mi);
            v[i] = T::lit(vi);
            let step = cfg.lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
            p[i] = T::lit(p[i].as_f64() - step);
        }
    }
    Ok(())
}

fn dropout_rng(seed: u64, epoch: usize, step: usize, index: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (chunk, v) in key.chunks_mut(8).zip([seed, epoch as u64, step as u64, index as u64]) {
        chunk.copy_from_slice(&v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

fn add_into<T: Real>(acc: &mut [Option<Vec<T>>], g: Vec<Option<Vec<T>>>) {
    for (a, g) in acc.iter_mut().zip(g) {
        match (a.as_mut(), g) {
            (Some(a), Some(g)) => a.iter_mut().zip(g).for_each(|(x, y)| *x += y),
            (None, Some(g)) => *a = Some(g),
            (_, None) => {}
        }
    }
}

/// Mean batch loss and its gradient. Examples run in parallel; partial sums
/// are combined in a fixed order.
pub fn batch_gradients<T: Real>(
    model: &JointModel,
    params: &ParamStore<T>,
    examples: &[&EncodedExample],
    include_pad: bool,
    rng_for: impl Fn(usize) -> ChaCha8Rng + Sync,
) -> Result<(f64, Vec<Option<Vec<T>>>)> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let partials: Vec<Result<(f64, Vec<Option<Vec<T>>>)>> = examples
        .par_chunks(REDUCE_CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut acc = vec![None; params.len()];
            let mut loss = 0.0;
            for (j, ex) in chunk.iter().enumerate() {
                let mut rng = rng_for(c * REDUCE_CHUNK + j);
                let mut tape = Tape::new(params);
                let terms = joint_loss(&mut tape, model, ex, include_pad, Mode::Train, &mut rng)?;
                loss += tape.value(terms.total)[0].as_f64();
                add_into(&mut acc, tape.backward(terms.total)?.into_param_grads());
            }
            Ok((loss, acc))
        })
        .collect();
    let mut total = 0.0;
    let mut grads = vec![None; params.len()];
    for p in partials {
        let (l, g) = p?;
        total += l;
        add_into(&mut grads, g);
    }
    let scale = T::lit(1.0 / examples.len() as f64);
    for g in grads.iter_mut().flatten() {
        g.iter_mut().for_each(|v| *v *= scale);
    }
    Ok((total / examples.len() as f64, grads))
}

/// A random example for `cfg`: `N−3` words, so at least one `[PAD]`.
pub fn random_example(cfg: &ModelConfig, seed: u64) -> EncodedExample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.encoder.seq_len;
    let words = n.saturating_sub(3).max(1).min(n - 2);
    let reserved = VocabKind::Token.reserved().len();
    let mut token_ids = vec![CLS_ID];
    token_ids.extend((0..words).map(|_| rng.gen_range(reserved.min(cfg.vocab_size - 1)..cfg.vocab_size)));
    token_ids.push(SEP_ID);
    token_ids.resize(n, PAD_ID);
    let mut slot_ids = vec![PAD_LABEL_ID; n - 1];
    let mut loss_mask = vec![0u8; n - 1];
    for i in 0..words {
        slot_ids[i] = rng.gen_range(0..cfg.num_slots);
        loss_mask[i] = 1;
    }
    EncodedExample {
        token_ids,
        slot_ids,
        intent_id: rng.gen_range(0..cfg.num_intents),
        loss_mask,
    }
}

/// Finite-difference check of `L` over every parameter group of the model
/// built from `cfg`, in 64-bit with dropout off, on one random example.
///
/// With detached links the numeric side differentiates the same function the
/// backward pass does: link values are frozen at the unperturbed point.
pub fn check_model_gradients(cfg: &ModelConfig, eps: f64, seed: u64) -> Result<GradCheckReport> {
    let mut cfg = cfg.clone();
    cfg.encoder.dropout = 0.0;
    let model = JointModel::new(cfg)?;
    let params = model.init_params::<f64>(seed);
    let ex = random_example(model.config(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let analytic = {
        let mut tape = Tape::new(&params);
        let terms = joint_loss(&mut tape, &model, &ex, false, Mode::Eval, &mut rng)?;
        tape.backward(terms.total)?.into_param_grads()
    };
    let base = model.predict(&params, &ex.token_ids)?;
    let frozen = model.config().detach_links;
    finite_diff_check(
        |p| {
            let links = if frozen {
                Links::Frozen {
                    intent: base.p_intent.data(),
                    slots: base.probe_probs.data(),
                }
            } else {
                Links::Live
            };
            let mut tape = Tape::new(p);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let terms = linked_loss(&mut tape, &model, &ex, false, Mode::Eval, &mut rng, links)?;
            Ok(tape.value(terms.total)[0])
        },
        &params,
        &analytic,
        eps,
        0,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_intent_acc: f64,
    pub val_slot_f1: f64,
    pub val_semantic_acc: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_intent_acc,val_slot_f1,val_semantic_acc";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.4},{:.4},{:.4}",
            self.epoch, self.train_loss, self.val_intent_acc, self.val_slot_f1, self.val_semantic_acc
        )
    }
}

pub fn metrics_csv(log: &[EpochRecord]) -> String {
    let mut s = format!("{}\n", EpochRecord::CSV_HEADER);
    for r in log {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_params: ParamStore<f32>,
    pub best_params: ParamStore<f32>,
    /// 1-based epoch of `best_params`.
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
}

/// Fresh parameters for `model`, with the token table overwritten from
/// `embedding_file` when one is configured.
pub fn initial_params(model: &JointModel, run: &RunConfig, vocabs: &Vocabs) -> Result<ParamStore<f32>> {
    let mut params = model.init_params::<f32>(run.seed);
    if let Some(path) = &run.embedding_file {
        let table = params.get_mut(model.encoder.embedding);
        let coverage = load_pretrained_embeddings(path, &vocabs.tokens, table)?;
        log::info!("{}: {:.1}% of the vocabulary covered", path.display(), 100.0 * coverage);
    }
    Ok(params)
}

/// Train for `cfg.epochs` epochs, evaluating on `valid` after each. The best
/// checkpoint maximizes validation semantic accuracy; ties keep the earlier epoch.
pub fn train(
    model: &JointModel,
    params: ParamStore<f32>,
    train_split: &DatasetSplit,
    valid: &[Utterance],
    vocabs: &Vocabs,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if cfg.epochs == 0 {
        return Err(Error::Config("epochs must be >= 1".into()));
    }
    if train_split.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    model.check_params(&params)?;
    let mut params = params;
    let mut state = AdamState::new(&params);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    for epoch in 1..=cfg.epochs {
        let shuffle_seed = cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut loss_sum = 0.0;
        for (step, b) in batch(train_split, cfg.batch_size, shuffle_seed)?.iter().enumerate() {
            let exs: Vec<&EncodedExample> = b.indices.iter().map(|&i| &train_split.examples[i]).collect();
            let (loss, grads) = batch_gradients(model, &params, &exs, cfg.loss_include_pad, |j| {
                dropout_rng(cfg.seed, epoch, step, j)
            })?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}, step {step}")));
            }
            loss_sum += loss * exs.len() as f64;
            adam_step(&mut params, &grads, &mut state, &cfg.adam)?;
        }
        let report = evaluate(model, &params, vocabs, valid, cfg.strict_spans)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_split.len() as f64,
            val_intent_acc: report.intent_acc,
            val_slot_f1: report.slot_f1,
            val_semantic_acc: report.semantic_acc,
        };
        log::info!("{}", record.csv_row());
        on_epoch(&record);
        if best.as_ref().is_none_or(|(s, _, _)| record.val_semantic_acc > *s) {
            best = Some((record.val_semantic_acc, epoch, params.clone()));
        }
        log.push(record);
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        final_params: params,
        best_params,
        best_epoch,
        log,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prediction {
    pub intent: String,
    /// One tag per input word. `[PAD]` where the model predicts padding.
    pub tags: Vec<String>,
}

/// Eval-mode prediction for one tokenized utterance. `index` is reported in errors.
pub fn predict_tokens<S: AsRef<str>, T: Real>(
    model: &JointModel,
    params: &ParamStore<T>,
    vocabs: &Vocabs,
    tokens: &[S],
    index: usize,
) -> Result<Prediction> {
    let n = model.config().encoder.seq_len;
    let ids = encode_tokens(tokens, &vocabs.tokens, n, index)?;
    let out = model.predict(params, &ids)?;
    let label = |v: &crate::corpus::Vocabulary, id: usize| -> Result<String> {
        v.item(id)
            .map(str::to_owned)
            .ok_or_else(|| Error::DimensionMismatch(format!("predicted id {id} outside vocabulary of {}", v.len())))
    };
    Ok(Prediction {
        intent: label(&vocabs.intents, out.intent_pred)?,
        tags: out.slot_pred[..tokens.len()]
            .iter()
            .map(|&id| label(&vocabs.slots, id))
            .collect::<Result<_>>()?,
    })
}

/// Predictions for every utterance, in order.
pub fn predict_all<T: Real>(
    model: &JointModel,
    params: &ParamStore<T>,
    vocabs: &Vocabs,
    utterances: &[Utterance],
) -> Result<Vec<Prediction>> {
    utterances
        .par_iter()
        .enumerate()
        .map(|(i, u)| predict_tokens(model, params, vocabs, &u.tokens, i))
        .collect()
}

/// Metrics of the model's predictions against gold strings. Gold labels
/// unseen in training simply never match.
pub fn evaluate<T: Real>(
    model: &JointModel,
    params: &ParamStore<T>,
    vocabs: &Vocabs,
    utterances: &[Utterance],
    strict_spans: bool,
) -> Result<EvalReport> {
    let preds = predict_all(model, params, vocabs, utterances)?;
    let pi: Vec<&str> = preds.iter().map(|p| p.intent.as_str()).collect();
    let pt: Vec<Vec<&str>> = preds
        .iter()
        .map(|p| p.tags.iter().map(String::as_str).collect())
        .collect();
    let gi: Vec<&str> = utterances.iter().map(|u| u.intent.as_str()).collect();
    let gt: Vec<Vec<&str>> = utterances
        .iter()
        .map(|u| u.slot_labels.iter().map(String::as_str).collect())
        .collect();
    EvalReport::compute(&pi, &pt, &gi, &gt, strict_spans)
}
