//! Theme-conditioned stance classification.
//!
//! The point-estimation classifier consumes `[theme tokens, SEP, body]`
//! sequences, runs them through the contrastively initialized encoder, and
//! classifies the unit embedding with a small tanh head (dim → 32 → 3).
//! A whole hyperparameter grid is fine-tuned from one shared initialization —
//! the precondition that makes weight averaging downstream meaningful —
//! plus a tf-idf logistic-regression baseline for calibration.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::corpus::{AdRecord, LabeledAd, StanceLabel};
use crate::embedder::{
    backward_batch, forward_batch, tokenize, zero_grads_like, EmbedError, EncoderParams,
    Vocabulary, SEP_ID,
};
use crate::nncore::{
    self, adam_step, linear_backward, linear_forward, softmax_cross_entropy, softmax_rows,
    tanh_backward, tanh_forward, AdamState, Checkpoint, HyperConfig, NnError, ParamSet, Tensor2,
};
use crate::themes::ThemeAssignment;

#[derive(Debug, Error)]
pub enum StanceError {
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("empty validation set")]
    EmptyValidationSet,
    #[error("empty hyperparameter grid")]
    EmptyGrid,
    #[error("example `{0}` has an empty token sequence")]
    EmptyExample(String),
    #[error("model schema does not match the vocabulary: {0}")]
    SchemaMismatch(String),
    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error("training data contains a single class `{0}`; need at least two")]
    SingleClassTraining(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, StanceError>;

/// Hidden width of the classification head.
pub const HEAD_HIDDEN: usize = 32;
/// Output classes: pro-energy, clean-energy, neutral.
pub const N_CLASSES: usize = 3;

/// Parameter names for the head, extending the encoder's three tensors.
pub const HEAD_W1: &str = "head_w1";
pub const HEAD_B1: &str = "head_b1";
pub const HEAD_W2: &str = "head_w2";
pub const HEAD_B2: &str = "head_b2";

/// The ten (learning rate, weight decay) settings swept by default, in
/// fixed grid order. All configs share `seed` so every fine-tune starts
/// from the same head initialization.
pub fn default_grid(seed: u64) -> Vec<HyperConfig> {
    const PAIRS: [(f64, f64); 10] = [
        (2e-5, 0.01),
        (1e-5, 0.01),
        (1e-4, 0.001),
        (1e-4, 0.01),
        (1e-5, 0.001),
        (3e-5, 0.001),
        (3e-5, 0.01),
        (2e-5, 0.1),
        (1e-4, 0.0001),
        (1e-5, 0.1),
    ];
    PAIRS
        .iter()
        .map(|&(learning_rate, weight_decay)| HyperConfig {
            learning_rate,
            weight_decay,
            epochs: 10,
            batch_size: 32,
            seed,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Input composition
// ---------------------------------------------------------------------------

/// Compose the classifier input: theme-id tokens, then SEP, then body
/// tokens, truncated to the vocabulary's maximum sequence length. The theme
/// prefix is placed first so truncation can never drop it. With no
/// assignment (ablation mode) the sequence is the body alone.
pub fn compose_input(
    ad: &AdRecord,
    assignment: Option<&ThemeAssignment>,
    vocab: &Vocabulary,
) -> Vec<usize> {
    let mut ids = Vec::new();
    if let Some(assignment) = assignment {
        for token in tokenize(&assignment.theme_id) {
            ids.push(vocab.id_of(&token));
        }
        ids.push(SEP_ID);
    }
    for token in tokenize(&ad.body) {
        if ids.len() >= vocab.max_seq_len {
            break;
        }
        ids.push(vocab.id_of(&token));
    }
    ids.truncate(vocab.max_seq_len);
    ids
}

/// One classifier example: a composed id sequence plus its weak label.
#[derive(Debug, Clone, PartialEq)]
pub struct StanceExample {
    pub ad_id: String,
    pub ids: Vec<usize>,
    pub label: StanceLabel,
}

/// Compose examples for a labeled split. When an assignment map is given,
/// ads missing from it fall back to ablation (body-only) composition.
pub fn make_examples(
    ads: &[LabeledAd],
    assignments: Option<&BTreeMap<String, ThemeAssignment>>,
    vocab: &Vocabulary,
) -> Result<Vec<StanceExample>> {
    ads.iter()
        .map(|labeled| {
            let assignment = assignments.and_then(|m| m.get(&labeled.ad.id));
            let ids = compose_input(&labeled.ad, assignment, vocab);
            if ids.is_empty() {
                return Err(StanceError::EmptyExample(labeled.ad.id.clone()));
            }
            Ok(StanceExample {
                ad_id: labeled.ad.id.clone(),
                ids,
                label: labeled.stance,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Model forward/backward
// ---------------------------------------------------------------------------

fn head_views(params: &ParamSet) -> Result<(&Tensor2, &Tensor2, &Tensor2, &Tensor2)> {
    Ok((
        params.get(HEAD_W1)?,
        params.get(HEAD_B1)?,
        params.get(HEAD_W2)?,
        params.get(HEAD_B2)?,
    ))
}

/// Validate a full stance parameter set against a vocabulary size and
/// return the encoder view.
fn check_schema(params: &ParamSet, vocab_len: usize) -> Result<EncoderParams> {
    let encoder = EncoderParams::from_params(params)
        .map_err(|e| StanceError::SchemaMismatch(e.to_string()))?;
    if encoder.vocab_len() != vocab_len {
        return Err(StanceError::SchemaMismatch(format!(
            "embedding table has {} rows, vocabulary has {} ids",
            encoder.vocab_len(),
            vocab_len
        )));
    }
    let (w1, b1, w2, b2) = head_views(params).map_err(|e| match e {
        StanceError::Nn(inner) => StanceError::SchemaMismatch(inner.to_string()),
        other => other,
    })?;
    let dim = encoder.dim();
    if w1.shape() != (dim, HEAD_HIDDEN)
        || b1.shape() != (1, HEAD_HIDDEN)
        || w2.shape() != (HEAD_HIDDEN, N_CLASSES)
        || b2.shape() != (1, N_CLASSES)
    {
        return Err(StanceError::SchemaMismatch(format!(
            "head shapes {:?}/{:?}/{:?}/{:?} do not fit dim {} → {} → {}",
            w1.shape(),
            b1.shape(),
            w2.shape(),
            b2.shape(),
            dim,
            HEAD_HIDDEN,
            N_CLASSES
        )));
    }
    Ok(encoder)
}

struct HeadCache {
    units: Tensor2,
    hidden: Tensor2,
    logits: Tensor2,
}

fn forward_head(params: &ParamSet, units: Tensor2) -> Result<HeadCache> {
    let (w1, b1, w2, b2) = head_views(params)?;
    let pre = linear_forward(&units, w1, b1.row(0))?;
    let hidden = tanh_forward(&pre);
    let logits = linear_forward(&hidden, w2, b2.row(0))?;
    Ok(HeadCache {
        units,
        hidden,
        logits,
    })
}

/// Mean cross-entropy loss and full-parameter gradients for one batch.
///
/// Public so gradient audits can finite-difference the complete
/// encoder+head model through one entry point.
pub fn batch_loss_and_grads(
    params: &ParamSet,
    seqs: &[&[usize]],
    labels: &[usize],
) -> Result<(f64, ParamSet)> {
    let encoder = EncoderParams::from_params(params)?;
    let (units, caches) = forward_batch(&encoder, seqs)?;
    let head = forward_head(params, units)?;
    let (loss, dlogits) = softmax_cross_entropy(&head.logits, labels)?;
    let (w1, _, w2, _) = head_views(params)?;
    let (dhidden, dw2, db2) = linear_backward(&head.hidden, w2, &dlogits)?;
    let dpre = tanh_backward(&head.hidden, &dhidden)?;
    let (dunits, dw1, db1) = linear_backward(&head.units, w1, &dpre)?;
    let mut grads = zero_grads_like(&encoder);
    backward_batch(&encoder, &caches, &dunits, &mut grads)?;
    grads.push(HEAD_W1, dw1)?;
    grads.push(HEAD_B1, Tensor2::from_flat(1, HEAD_HIDDEN, db1)?)?;
    grads.push(HEAD_W2, dw2)?;
    grads.push(HEAD_B2, Tensor2::from_flat(1, N_CLASSES, db2)?)?;
    Ok((loss, grads))
}

// ---------------------------------------------------------------------------
// Fine-tuning and sweeping
// ---------------------------------------------------------------------------

/// Seeded head initialization, derived from the shared initialization id so
/// every config in a sweep (same seed) starts from identical head weights.
fn init_head(shared_init_id: &str, seed: u64, dim: usize) -> ParamSet {
    use rand::SeedableRng;
    let head_seed = nncore::derive_seed(&format!("stance-head:{shared_init_id}"), seed);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(head_seed);
    let mut head = ParamSet::new();
    head.push(HEAD_W1, Tensor2::random_uniform(dim, HEAD_HIDDEN, 0.05, &mut rng))
        .unwrap();
    head.push(HEAD_B1, Tensor2::random_uniform(1, HEAD_HIDDEN, 0.05, &mut rng))
        .unwrap();
    head.push(HEAD_W2, Tensor2::random_uniform(HEAD_HIDDEN, N_CLASSES, 0.05, &mut rng))
        .unwrap();
    head.push(HEAD_B2, Tensor2::random_uniform(1, N_CLASSES, 0.05, &mut rng))
        .unwrap();
    head
}

/// Fine-tune encoder + head end-to-end from a shared initialization.
///
/// The head is freshly initialized from a seed derived from
/// `(shared_init_id, hyper.seed)`; encoder weights start from `init` and are
/// trained jointly. Validation accuracy is measured exactly once, after the
/// final epoch, and recorded on the returned checkpoint. Deterministic:
/// identical inputs produce bitwise-identical checkpoints.
pub fn finetune(
    init: &Checkpoint,
    train: &[StanceExample],
    val: &[StanceExample],
    hyper: &HyperConfig,
) -> Result<Checkpoint> {
    if train.is_empty() {
        return Err(StanceError::EmptyTrainingSet);
    }
    if val.is_empty() {
        return Err(StanceError::EmptyValidationSet);
    }
    hyper.validate()?;
    let encoder = EncoderParams::from_params(&init.params)?;
    let mut params = encoder.to_params();
    for (name, tensor) in init_head(&init.shared_init_id, hyper.seed, encoder.dim()).iter() {
        params.push(name, tensor.clone())?;
    }
    let mut adam = AdamState::new(&params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut shuffle_rng = rand_chacha::ChaCha8Rng::seed_from_u64(nncore::derive_seed(
        &format!("stance-batch-order:{}", init.shared_init_id),
        hyper.seed,
    ));
    let batch_size = hyper.batch_size.max(1);
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut shuffle_rng);
        for (batch_idx, chunk) in order.chunks(batch_size).enumerate() {
            let seqs: Vec<&[usize]> = chunk.iter().map(|&i| train[i].ids.as_slice()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train[i].label.index()).collect();
            let (loss, grads) = batch_loss_and_grads(&params, &seqs, &labels)?;
            if !loss.is_finite() {
                return Err(StanceError::Divergence {
                    epoch,
                    batch: batch_idx,
                });
            }
            adam_step(
                &mut params,
                &grads,
                &mut adam,
                hyper.learning_rate,
                hyper.weight_decay,
            )?;
        }
    }
    let mut checkpoint = Checkpoint::new(params, &init.shared_init_id);
    let predictions = predict(&checkpoint, val)?;
    let pred_labels: Vec<StanceLabel> = predictions.iter().map(|p| p.label).collect();
    let gold_labels: Vec<StanceLabel> = val.iter().map(|e| e.label).collect();
    let val_accuracy = crate::metrics::accuracy(&pred_labels, &gold_labels)
        .map_err(|e| StanceError::SchemaMismatch(e.to_string()))?;
    checkpoint.hyper = Some(hyper.clone());
    checkpoint.val_accuracy = Some(val_accuracy);
    Ok(checkpoint)
}

/// Fine-tune one checkpoint per grid config, all from the same shared
/// initialization. Configs are independent, so they run in parallel;
/// results keep grid order.
pub fn sweep(
    init: &Checkpoint,
    train: &[StanceExample],
    val: &[StanceExample],
    grid: &[HyperConfig],
) -> Result<Vec<Checkpoint>> {
    if grid.is_empty() {
        return Err(StanceError::EmptyGrid);
    }
    grid.par_iter()
        .map(|hyper| finetune(init, train, val, hyper))
        .collect()
}

// ---------------------------------------------------------------------------
// Prediction
// ---------------------------------------------------------------------------

/// One prediction: the argmax label and the full probability triple
/// (pro-energy, clean-energy, neutral).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StancePrediction {
    pub ad_id: String,
    pub label: StanceLabel,
    pub probabilities: [f64; N_CLASSES],
}

/// Classify composed examples with a trained (or averaged) checkpoint.
/// Probabilities are a valid distribution for every input; ties in the
/// argmax break toward the lowest class index.
pub fn predict(model: &Checkpoint, examples: &[StanceExample]) -> Result<Vec<StancePrediction>> {
    let max_id = examples
        .iter()
        .flat_map(|e| e.ids.iter().copied())
        .max()
        .unwrap_or(0);
    // Validate tensor names and head shapes; token ids must fit the
    // embedding table.
    let vocab_len = EncoderParams::from_params(&model.params)
        .map_err(|e| StanceError::SchemaMismatch(e.to_string()))?
        .vocab_len();
    let encoder = check_schema(&model.params, vocab_len)?;
    if max_id >= encoder.vocab_len() {
        return Err(StanceError::SchemaMismatch(format!(
            "token id {max_id} out of range for embedding table with {} rows",
            encoder.vocab_len()
        )));
    }
    for example in examples {
        if example.ids.is_empty() {
            return Err(StanceError::EmptyExample(example.ad_id.clone()));
        }
    }
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(256) {
        let seqs: Vec<&[usize]> = chunk.iter().map(|e| e.ids.as_slice()).collect();
        let (units, _) = forward_batch(&encoder, &seqs)?;
        let head = forward_head(&model.params, units)?;
        let probs = softmax_rows(&head.logits)?;
        for (row, example) in chunk.iter().enumerate() {
            let p = probs.row(row);
            let mut best = 0;
            for c in 1..N_CLASSES {
                if p[c] > p[best] {
                    best = c;
                }
            }
            out.push(StancePrediction {
                ad_id: example.ad_id.clone(),
                label: StanceLabel::from_index(best).unwrap(),
                probabilities: [p[0], p[1], p[2]],
            });
        }
    }
    Ok(out)
}

/// Accuracy of a checkpoint over composed examples.
pub fn evaluate_accuracy(model: &Checkpoint, examples: &[StanceExample]) -> Result<f64> {
    let predictions = predict(model, examples)?;
    let pred: Vec<StanceLabel> = predictions.iter().map(|p| p.label).collect();
    let gold: Vec<StanceLabel> = examples.iter().map(|e| e.label).collect();
    crate::metrics::accuracy(&pred, &gold).map_err(|e| StanceError::SchemaMismatch(e.to_string()))
}

// ---------------------------------------------------------------------------
// tf-idf logistic-regression baseline
// ---------------------------------------------------------------------------

/// Bag-of-words logistic regression over smoothed tf-idf features.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TfidfModel {
    pub vocab: BTreeMap<String, usize>,
    pub idf: Vec<f64>,
    pub weights: Tensor2,
    pub bias: Vec<f64>,
    pub iterations: usize,
}

const TFIDF_MAX_ITERS: usize = 5000;
const TFIDF_GRAD_TOL: f64 = 1e-6;
const TFIDF_LR: f64 = 1.0;

fn tfidf_featurize(model_vocab: &BTreeMap<String, usize>, idf: &[f64], doc: &str) -> Vec<f64> {
    let mut row = vec![0.0; idf.len()];
    for token in tokenize(doc) {
        if let Some(&j) = model_vocab.get(&token) {
            row[j] += 1.0;
        }
    }
    for (j, v) in row.iter_mut().enumerate() {
        *v *= idf[j];
    }
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in &mut row {
            *v /= norm;
        }
    }
    row
}

/// Fit the baseline: smoothed idf (`ln((1+N)/(1+df)) + 1`), L2-normalized
/// tf-idf rows, multinomial logistic regression by full-batch gradient
/// descent (fixed step 1.0, stop at grad-norm < 1e-6 or 5000 iterations).
pub fn train_tfidf_lr(docs: &[(String, StanceLabel)]) -> Result<TfidfModel> {
    if docs.is_empty() {
        return Err(StanceError::EmptyTrainingSet);
    }
    let first = docs[0].1;
    if docs.iter().all(|(_, label)| *label == first) {
        return Err(StanceError::SingleClassTraining(first.as_str().into()));
    }
    let mut df: BTreeMap<String, usize> = BTreeMap::new();
    for (doc, _) in docs {
        let mut seen: Vec<String> = tokenize(doc);
        seen.sort();
        seen.dedup();
        for token in seen {
            *df.entry(token).or_insert(0) += 1;
        }
    }
    let vocab: BTreeMap<String, usize> = df
        .keys()
        .enumerate()
        .map(|(j, t)| (t.clone(), j))
        .collect();
    let n_docs = docs.len() as f64;
    let mut idf = vec![0.0; vocab.len()];
    for (token, &j) in &vocab {
        let d = df[token] as f64;
        idf[j] = ((1.0 + n_docs) / (1.0 + d)).ln() + 1.0;
    }
    let rows: Vec<Vec<f64>> = docs
        .iter()
        .map(|(doc, _)| tfidf_featurize(&vocab, &idf, doc))
        .collect();
    let features = Tensor2::from_rows(&rows)?;
    let labels: Vec<usize> = docs.iter().map(|(_, label)| label.index()).collect();
    let mut weights = Tensor2::zeros(vocab.len(), N_CLASSES);
    let mut bias = vec![0.0; N_CLASSES];
    let mut iterations = 0;
    for _ in 0..TFIDF_MAX_ITERS {
        let logits = linear_forward(&features, &weights, &bias)?;
        let (_, dlogits) = softmax_cross_entropy(&logits, &labels)?;
        let dw = features.matmul_tn(&dlogits)?;
        let mut db = vec![0.0; N_CLASSES];
        for r in 0..dlogits.rows() {
            for c in 0..N_CLASSES {
                db[c] += dlogits.get(r, c);
            }
        }
        let grad_norm = (dw.data().iter().map(|v| v * v).sum::<f64>()
            + db.iter().map(|v| v * v).sum::<f64>())
        .sqrt();
        iterations += 1;
        if grad_norm < TFIDF_GRAD_TOL {
            break;
        }
        for (w, &g) in weights.data_mut().iter_mut().zip(dw.data()) {
            *w -= TFIDF_LR * g;
        }
        for (b, &g) in bias.iter_mut().zip(&db) {
            *b -= TFIDF_LR * g;
        }
    }
    Ok(TfidfModel {
        vocab,
        idf,
        weights,
        bias,
        iterations,
    })
}

/// Predict stance labels for raw document texts.
pub fn predict_tfidf(model: &TfidfModel, docs: &[String]) -> Result<Vec<StanceLabel>> {
    docs.iter()
        .map(|doc| {
            let row = tfidf_featurize(&model.vocab, &model.idf, doc);
            let x = Tensor2::from_flat(1, model.idf.len(), row)?;
            let logits = linear_forward(&x, &model.weights, &model.bias)?;
            let l = logits.row(0);
            let mut best = 0;
            for c in 1..N_CLASSES {
                if l[c] > l[best] {
                    best = c;
                }
            }
            Ok(StanceLabel::from_index(best).unwrap())
        })
        .collect()
}
