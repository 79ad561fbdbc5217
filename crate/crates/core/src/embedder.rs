//! Sentence encoder trained with a multiple-negatives ranking loss.
//!
//! Two views of the same ad — its body and its description (or an extractive
//! fallback summary) — form a positive pair; inside a batch, every other
//! positive serves as a negative. The encoder is intentionally small: token
//! embeddings, mean pooling, one tanh projection, L2 normalization. It is
//! trained from scratch, so the vocabulary is a plain word-level one built
//! from the corpus rather than a pretrained subword model.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;
use thiserror::Error;

use crate::nncore::{
    self, adam_step, l2_normalize, l2_normalize_backward, linear_backward, linear_forward,
    mean_pool, mean_pool_backward, tanh_backward, tanh_forward, AdamState, Checkpoint,
    HyperConfig, NnError, ParamSet, Tensor2,
};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("text produced no tokens")]
    EmptyText,
    #[error("need at least {need} training pairs, got {got}")]
    TooFewPairs { got: usize, need: usize },
    #[error("ranking loss needs a batch of ≥2 rows, got {0}")]
    TooFewNegatives(usize),
    #[error("row {0} is not unit-norm (‖·‖ = {1})")]
    NonUnitRow(usize, f64),
    #[error("embedding dim must be ≥ 2, got {0}")]
    BadDim(usize),
    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error("vocabulary file `{path}`: {reason}")]
    BadVocabFile { path: String, reason: String },
    #[error("vocabulary I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, EmbedError>;

// ---------------------------------------------------------------------------
// Tokenization and vocabulary
// ---------------------------------------------------------------------------

/// Lowercase a text and split it into Unicode word tokens (`\w+` runs).
pub fn tokenize(text: &str) -> Vec<String> {
    static WORD: OnceLock<Regex> = OnceLock::new();
    let word = WORD.get_or_init(|| Regex::new(r"\w+").unwrap());
    word.find_iter(&text.to_lowercase())
        .map(|m| m.as_str().to_string())
        .collect()
}

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const SEP_ID: usize = 2;

/// Sentinel spellings used in the token-per-line vocabulary file. Real tokens
/// can never collide with them: the tokenizer only emits `\w+` runs.
const SPECIAL_TOKENS: [&str; 3] = ["<pad>", "<unk>", "<sep>"];

/// Maximum token-id sequence length fed to the encoder.
pub const MAX_SEQ_LEN: usize = 110;

/// Word-level vocabulary. Ids are contiguous: 0/1/2 are the PAD/UNK/SEP
/// sentinels and real tokens start at 3, ordered by descending corpus
/// frequency (ties broken lexicographically).
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: BTreeMap<String, usize>,
    pub max_seq_len: usize,
}

impl Vocabulary {
    /// Build from a text pool, keeping at most `v_max` distinct tokens.
    /// `forced` tokens are always included (sorted, ahead of the frequency
    /// fill) so downstream theme markers can never collapse to UNK.
    pub fn build<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        v_max: usize,
        forced: &[String],
    ) -> Vocabulary {
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        for text in texts {
            for token in tokenize(text) {
                *counts.entry(token).or_insert(0) += 1;
            }
        }
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut ids: BTreeMap<String, usize> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        let push = |token: &str, tokens: &mut Vec<String>, ids: &mut BTreeMap<String, usize>| {
            if !ids.contains_key(token) {
                ids.insert(token.to_string(), tokens.len());
                tokens.push(token.to_string());
            }
        };
        let mut forced_sorted: Vec<&String> = forced.iter().collect();
        forced_sorted.sort();
        forced_sorted.dedup();
        for token in forced_sorted {
            push(token, &mut tokens, &mut ids);
        }
        let mut by_freq: Vec<(&String, &u64)> = counts.iter().collect();
        by_freq.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        for (token, _) in by_freq {
            if tokens.len() - SPECIAL_TOKENS.len() >= v_max {
                break;
            }
            push(token, &mut tokens, &mut ids);
        }
        Vocabulary {
            tokens,
            ids,
            max_seq_len: MAX_SEQ_LEN,
        }
    }

    /// Total id count, sentinels included — the embedding-table row count.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= SPECIAL_TOKENS.len()
    }

    pub fn id_of(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    /// Tokenize and map to ids (UNK for out-of-vocabulary words), truncated
    /// to `max_seq_len`.
    pub fn encode_ids(&self, text: &str) -> Vec<usize> {
        tokenize(text)
            .iter()
            .take(self.max_seq_len)
            .map(|t| self.id_of(t))
            .collect()
    }

    /// Token-per-line serialization; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for token in &self.tokens {
            out.push_str(token);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let contents = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = contents.lines().map(str::to_string).collect();
        for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*special) {
                return Err(EmbedError::BadVocabFile {
                    path: path.display().to_string(),
                    reason: format!("line {i} must be the `{special}` sentinel"),
                });
            }
        }
        let mut ids = BTreeMap::new();
        for (i, token) in tokens.iter().enumerate() {
            if ids.insert(token.clone(), i).is_some() {
                return Err(EmbedError::BadVocabFile {
                    path: path.display().to_string(),
                    reason: format!("duplicate token `{token}`"),
                });
            }
        }
        Ok(Vocabulary {
            tokens,
            ids,
            max_seq_len: MAX_SEQ_LEN,
        })
    }
}

// ---------------------------------------------------------------------------
// Encoder parameters and forward pass
// ---------------------------------------------------------------------------

/// Parameter names shared by the encoder and every model built on top of it.
pub const EMBEDDING: &str = "embedding";
pub const PROJ_W: &str = "proj_w";
pub const PROJ_B: &str = "proj_b";

/// Encoder weights: an embedding table and one projection layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub embedding: Tensor2,
    pub proj_w: Tensor2,
    pub proj_b: Tensor2,
}

impl EncoderParams {
    /// Fresh seeded uniform(−0.05, 0.05) initialization.
    pub fn init(vocab_len: usize, dim: usize, seed: u64) -> Result<EncoderParams> {
        if dim < 2 {
            return Err(EmbedError::BadDim(dim));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(nncore::derive_seed("encoder-init", seed));
        Ok(EncoderParams {
            embedding: Tensor2::random_uniform(vocab_len, dim, 0.05, &mut rng),
            proj_w: Tensor2::random_uniform(dim, dim, 0.05, &mut rng),
            proj_b: Tensor2::random_uniform(1, dim, 0.05, &mut rng),
        })
    }

    pub fn dim(&self) -> usize {
        self.proj_w.cols()
    }

    pub fn vocab_len(&self) -> usize {
        self.embedding.rows()
    }

    pub fn to_params(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.push(EMBEDDING, self.embedding.clone()).unwrap();
        ps.push(PROJ_W, self.proj_w.clone()).unwrap();
        ps.push(PROJ_B, self.proj_b.clone()).unwrap();
        ps
    }

    pub fn from_params(params: &ParamSet) -> Result<EncoderParams> {
        Ok(EncoderParams {
            embedding: params.get(EMBEDDING)?.clone(),
            proj_w: params.get(PROJ_W)?.clone(),
            proj_b: params.get(PROJ_B)?.clone(),
        })
    }

    /// Encode a token-id sequence to a unit vector:
    /// embed → mean-pool → projection → tanh → L2-normalize.
    pub fn encode_ids(&self, ids: &[usize]) -> Result<Vec<f64>> {
        Ok(self.encode_with_cache(ids)?.unit)
    }

    fn encode_with_cache(&self, ids: &[usize]) -> Result<EncodeCache> {
        if ids.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let dim = self.dim();
        let mut token_rows = Tensor2::zeros(ids.len(), dim);
        for (r, &id) in ids.iter().enumerate() {
            token_rows.row_mut(r).copy_from_slice(self.embedding.row(id));
        }
        let mask = vec![true; ids.len()];
        let pooled = mean_pool(&token_rows, &mask)?;
        let pooled_t = Tensor2::from_flat(1, dim, pooled.clone())?;
        let z = linear_forward(&pooled_t, &self.proj_w, self.proj_b.row(0))?;
        let activated = tanh_forward(&z);
        let (unit, norm) = l2_normalize(activated.row(0))?;
        Ok(EncodeCache {
            ids: ids.to_vec(),
            pooled,
            activated,
            unit,
            norm,
        })
    }
}

/// Everything needed to run the backward pass for one encoded sequence.
pub(crate) struct EncodeCache {
    ids: Vec<usize>,
    pooled: Vec<f64>,
    activated: Tensor2,
    pub(crate) unit: Vec<f64>,
    norm: f64,
}

/// A vocabulary plus encoder weights: the practical "model" handle for
/// turning raw text into unit vectors.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub vocab: Vocabulary,
    pub params: EncoderParams,
}

impl Encoder {
    pub fn encode(&self, text: &str) -> Result<Vec<f64>> {
        let ids = self.vocab.encode_ids(text);
        if ids.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        self.params.encode_ids(&ids)
    }
}

/// Cosine similarity of two equal-length vectors (callers pass unit vectors,
/// for which this is a plain dot product).
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// Training pairs
// ---------------------------------------------------------------------------

/// One (anchor, positive) training pair, already tokenized to ids.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub anchor: Vec<usize>,
    pub positive: Vec<usize>,
}

/// How many tokens the extractive fallback summary keeps.
const FALLBACK_SUMMARY_TOKENS: usize = 30;

/// First two sentences of a text (split on `.`, `!`, `?`), as one string.
fn leading_sentences(text: &str, n: usize) -> String {
    let mut out = String::new();
    let mut sentences = 0;
    for ch in text.chars() {
        out.push(ch);
        if matches!(ch, '.' | '!' | '?') {
            sentences += 1;
            if sentences >= n {
                break;
            }
        }
    }
    out
}

/// Build contrastive pairs: (body, description) when a description exists,
/// otherwise (body, first-two-sentence summary truncated to 30 tokens).
/// Pairs whose positive is empty or identical to the anchor are dropped.
pub fn make_pairs(corpus: &[crate::corpus::AdRecord], vocab: &Vocabulary) -> Vec<TrainPair> {
    let mut pairs = Vec::new();
    for ad in corpus {
        let anchor = vocab.encode_ids(&ad.body);
        if anchor.is_empty() {
            continue;
        }
        let positive_ids = match &ad.description {
            Some(description) => vocab.encode_ids(description),
            None => {
                let summary_tokens: Vec<String> = tokenize(&leading_sentences(&ad.body, 2))
                    .into_iter()
                    .take(FALLBACK_SUMMARY_TOKENS)
                    .collect();
                summary_tokens
                    .iter()
                    .map(|t| vocab.id_of(t))
                    .collect()
            }
        };
        if positive_ids.is_empty() || positive_ids == anchor {
            continue;
        }
        pairs.push(TrainPair {
            anchor,
            positive: positive_ids,
        });
    }
    pairs
}

// ---------------------------------------------------------------------------
// Multiple-negatives ranking loss
// ---------------------------------------------------------------------------

/// Conventional similarity scale for this loss over cosine similarities.
pub const MNRL_SCALE: f64 = 20.0;

fn check_unit_rows(m: &Tensor2) -> Result<()> {
    for r in 0..m.rows() {
        let norm = m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(EmbedError::NonUnitRow(r, norm));
        }
    }
    Ok(())
}

/// Ranking loss over in-batch negatives.
///
/// Row i treats positive i as the target and every other positive in the
/// batch as a negative:
/// `loss = −(1/N)·Σᵢ log( exp(s·cos(aᵢ,pᵢ)) / Σⱼ exp(s·cos(aᵢ,pⱼ)) )`.
/// Returns the loss and gradients w.r.t. the anchor and positive rows.
pub fn mnrl_loss(
    anchors: &Tensor2,
    positives: &Tensor2,
    scale: f64,
) -> Result<(f64, Tensor2, Tensor2)> {
    let n = anchors.rows();
    if n < 2 {
        return Err(EmbedError::TooFewNegatives(n));
    }
    if anchors.shape() != positives.shape() {
        return Err(EmbedError::Nn(NnError::ShapeMismatch {
            context: "mnrl_loss",
            expected: format!("{:?}", anchors.shape()),
            got: format!("{:?}", positives.shape()),
        }));
    }
    check_unit_rows(anchors)?;
    check_unit_rows(positives)?;
    // Rows are unit vectors, so cosine similarity is the plain dot product.
    let mut logits = anchors.matmul_nt(positives)?;
    for v in logits.data_mut() {
        *v *= scale;
    }
    let labels: Vec<usize> = (0..n).collect();
    let (loss, dlogits) = nncore::softmax_cross_entropy(&logits, &labels)?;
    let mut dlogits = dlogits;
    for v in dlogits.data_mut() {
        *v *= scale;
    }
    let danchors = dlogits.matmul(positives)?;
    let dpositives = dlogits.matmul_tn(anchors)?;
    Ok((loss, danchors, dpositives))
}

// ---------------------------------------------------------------------------
// Contrastive training
// ---------------------------------------------------------------------------

/// Configuration for one contrastive training run.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 42,
        }
    }
}

/// A trained encoder checkpoint plus the mean training loss per epoch.
#[derive(Debug)]
pub struct ContrastiveOutcome {
    pub checkpoint: Checkpoint,
    pub epoch_losses: Vec<f64>,
}

/// Batch forward pass: encodes each sequence and stacks the unit vectors.
pub(crate) fn forward_batch(
    params: &EncoderParams,
    seqs: &[&[usize]],
) -> Result<(Tensor2, Vec<EncodeCache>)> {
    let dim = params.dim();
    let mut units = Tensor2::zeros(seqs.len(), dim);
    let mut caches = Vec::with_capacity(seqs.len());
    for (r, seq) in seqs.iter().enumerate() {
        let cache = params.encode_with_cache(seq)?;
        units.row_mut(r).copy_from_slice(&cache.unit);
        caches.push(cache);
    }
    Ok((units, caches))
}

/// Accumulate encoder gradients for a batch given ∂loss/∂unit rows.
pub(crate) fn backward_batch(
    params: &EncoderParams,
    caches: &[EncodeCache],
    dunits: &Tensor2,
    grads: &mut ParamSet,
) -> Result<()> {
    let dim = params.dim();
    for (r, cache) in caches.iter().enumerate() {
        let dunit = dunits.row(r);
        let dactivated = l2_normalize_backward(&cache.unit, cache.norm, dunit)?;
        let dact_t = Tensor2::from_flat(1, dim, dactivated)?;
        let dz = tanh_backward(&cache.activated, &dact_t)?;
        let pooled_t = Tensor2::from_flat(1, dim, cache.pooled.clone())?;
        let (dpooled, dw, db) = linear_backward(&pooled_t, &params.proj_w, &dz)?;
        {
            let gw = grads.get_mut(PROJ_W)?;
            for (g, &d) in gw.data_mut().iter_mut().zip(dw.data()) {
                *g += d;
            }
            let gb = grads.get_mut(PROJ_B)?;
            for (g, &d) in gb.data_mut().iter_mut().zip(db.iter()) {
                *g += d;
            }
        }
        let mask = vec![true; cache.ids.len()];
        let dtokens = mean_pool_backward(dpooled.row(0), &mask)?;
        let gemb = grads.get_mut(EMBEDDING)?;
        for (row, &id) in cache.ids.iter().enumerate() {
            let src = dtokens.row(row);
            let dst = gemb.row_mut(id);
            for (g, &d) in dst.iter_mut().zip(src) {
                *g += d;
            }
        }
    }
    Ok(())
}

pub(crate) fn zero_grads_like(params: &EncoderParams) -> ParamSet {
    let mut grads = ParamSet::new();
    grads
        .push(EMBEDDING, Tensor2::zeros(params.vocab_len(), params.dim()))
        .unwrap();
    grads
        .push(PROJ_W, Tensor2::zeros(params.dim(), params.dim()))
        .unwrap();
    grads.push(PROJ_B, Tensor2::zeros(1, params.dim())).unwrap();
    grads
}

/// Train the encoder on (anchor, positive) pairs with shuffled mini-batches.
///
/// Deterministic under `config.seed`; the returned checkpoint is tagged with
/// a fresh shared-initialization id derived from the seed, dimension, and
/// vocabulary size. A non-finite loss aborts with a diagnostic error.
pub fn train_contrastive(
    pairs: &[TrainPair],
    vocab: &Vocabulary,
    dim: usize,
    config: &TrainConfig,
) -> Result<ContrastiveOutcome> {
    if pairs.len() < 2 {
        return Err(EmbedError::TooFewPairs {
            got: pairs.len(),
            need: 2,
        });
    }
    let mut batch_size = config.batch_size.max(2);
    if batch_size > pairs.len() {
        log::warn!(
            "batch size {} exceeds the {} available pairs; clamping",
            batch_size,
            pairs.len()
        );
        batch_size = pairs.len();
    }
    let mut params = EncoderParams::init(vocab.len(), dim, config.seed)?;
    let mut param_set = params.to_params();
    let mut adam = AdamState::new(&param_set);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut shuffle_rng =
        ChaCha8Rng::seed_from_u64(nncore::derive_seed("contrastive-batch-order", config.seed));
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(batch_size).enumerate() {
            // The ranking loss needs in-batch negatives; a trailing
            // singleton batch has none, so it is skipped.
            if chunk.len() < 2 {
                continue;
            }
            params = EncoderParams::from_params(&param_set)?;
            let anchor_seqs: Vec<&[usize]> =
                chunk.iter().map(|&i| pairs[i].anchor.as_slice()).collect();
            let positive_seqs: Vec<&[usize]> =
                chunk.iter().map(|&i| pairs[i].positive.as_slice()).collect();
            let (anchors, anchor_caches) = forward_batch(&params, &anchor_seqs)?;
            let (positives, positive_caches) = forward_batch(&params, &positive_seqs)?;
            let (loss, danchors, dpositives) = mnrl_loss(&anchors, &positives, MNRL_SCALE)?;
            if !loss.is_finite() {
                return Err(EmbedError::Divergence {
                    epoch,
                    batch: batch_idx,
                });
            }
            let mut grads = zero_grads_like(&params);
            backward_batch(&params, &anchor_caches, &danchors, &mut grads)?;
            backward_batch(&params, &positive_caches, &dpositives, &mut grads)?;
            adam_step(&mut param_set, &grads, &mut adam, config.learning_rate, 0.0)?;
            loss_sum += loss;
            batches += 1;
        }
        epoch_losses.push(if batches > 0 { loss_sum / batches as f64 } else { 0.0 });
    }
    let shared_init_id = nncore::derive_id(
        &format!("encoder-init:d{dim}:v{}", vocab.len()),
        config.seed,
    );
    let mut checkpoint = Checkpoint::new(param_set, &shared_init_id);
    checkpoint.hyper = Some(HyperConfig {
        learning_rate: config.learning_rate,
        weight_decay: 0.0,
        epochs: config.epochs,
        batch_size,
        seed: config.seed,
    });
    Ok(ContrastiveOutcome {
        checkpoint,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::AdRecord;
    use proptest::prelude::*;

    fn ad(id: &str, body: &str, description: Option<&str>) -> AdRecord {
        AdRecord {
            id: id.into(),
            title: None,
            description: description.map(str::to_string),
            body: body.into(),
            funding_entity: "X".into(),
            spend_lower: 0.0,
            spend_upper: 0.0,
            impressions_lower: 0.0,
            impressions_upper: 0.0,
            gender_share: Default::default(),
            age_share: Default::default(),
            state_share: Default::default(),
        }
    }

    fn tiny_vocab(texts: &[&str]) -> Vocabulary {
        Vocabulary::build(texts.iter().copied(), 1000, &[])
    }

    #[test]
    fn tokenizer_lowercases_and_splits_unicode_words() {
        assert_eq!(tokenize("Stand UP, for energy!"), vec!["stand", "up", "for", "energy"]);
        assert_eq!(tokenize("naïve CAFÉ"), vec!["naïve", "café"]);
        assert_eq!(tokenize("Don't"), vec!["don", "t"]);
        assert!(tokenize("—…!!").is_empty());
    }

    #[test]
    fn vocabulary_orders_by_frequency_then_lexicographically() {
        let vocab = tiny_vocab(&["b b b", "c c", "a a", "z"]);
        // b (3), then a/c tie at 2 broken lexicographically, then z.
        assert_eq!(vocab.id_of("b"), 3);
        assert_eq!(vocab.id_of("a"), 4);
        assert_eq!(vocab.id_of("c"), 5);
        assert_eq!(vocab.id_of("z"), 6);
        assert_eq!(vocab.id_of("missing"), UNK_ID);
        assert_eq!(vocab.len(), 7);
    }

    #[test]
    fn vocabulary_caps_size_and_honors_forced_tokens() {
        let forced = vec!["theme_marker".to_string()];
        let vocab = Vocabulary::build(["x x x y y z"], 2, &forced);
        // Capacity 2 is consumed by the forced token plus the top word.
        assert!(vocab.contains("theme_marker"));
        assert!(vocab.contains("x"));
        assert!(!vocab.contains("y"));
        assert_eq!(vocab.len(), 5);
    }

    #[test]
    fn vocabulary_file_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = tiny_vocab(&["solar wind coal"]);
        let path = dir.path().join("vocab.txt");
        vocab.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(loaded, vocab);
        // Ids are line numbers; sentinels must occupy the first three lines.
        std::fs::write(&path, "coal\nsolar\n").unwrap();
        assert!(matches!(
            Vocabulary::load(&path),
            Err(EmbedError::BadVocabFile { .. })
        ));
    }

    #[test]
    fn encode_ids_truncates_to_max_seq_len() {
        let vocab = tiny_vocab(&["word"]);
        let long_text = vec!["word"; 300].join(" ");
        assert_eq!(vocab.encode_ids(&long_text).len(), MAX_SEQ_LEN);
    }

    #[test]
    fn encode_emits_unit_vectors_deterministically() {
        let vocab = tiny_vocab(&["the quick brown fox jumps over energy policy"]);
        let params = EncoderParams::init(vocab.len(), 8, 7).unwrap();
        let encoder = Encoder {
            vocab,
            params,
        };
        let a = encoder.encode("quick energy fox").unwrap();
        let b = encoder.encode("quick energy fox").unwrap();
        let norm: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
        assert_eq!(a, b);
        assert!((cosine(&a, &a) - 1.0).abs() < 1e-12);
        let other = encoder.encode("brown policy jumps").unwrap();
        let c = cosine(&a, &other);
        assert!((-1.0..=1.0).contains(&c));
        assert!(matches!(
            encoder.encode("!!! ---"),
            Err(EmbedError::EmptyText)
        ));
    }

    #[test]
    fn encoder_init_rejects_dim_below_two() {
        assert!(matches!(
            EncoderParams::init(10, 1, 0),
            Err(EmbedError::BadDim(1))
        ));
    }

    #[test]
    fn make_pairs_uses_description_when_present() {
        let vocab = tiny_vocab(&["drill for oil now", "we drill oil"]);
        let corpus = vec![ad("a", "drill for oil now", Some("we drill oil"))];
        let pairs = make_pairs(&corpus, &vocab);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].anchor, vocab.encode_ids("drill for oil now"));
        assert_eq!(pairs[0].positive, vocab.encode_ids("we drill oil"));
    }

    #[test]
    fn make_pairs_fallback_takes_first_two_sentences() {
        let body = "Coal creates jobs. Gas keeps lights on. Vote accordingly.";
        let vocab = tiny_vocab(&[body]);
        let pairs = make_pairs(&[ad("a", body, None)], &vocab);
        assert_eq!(pairs.len(), 1);
        assert_eq!(
            pairs[0].positive,
            vocab.encode_ids("coal creates jobs gas keeps lights on")
        );
    }

    #[test]
    fn make_pairs_fallback_truncates_to_thirty_tokens() {
        let long_sentence = vec!["word"; 80].join(" ") + ". Second sentence here.";
        let vocab = tiny_vocab(&[long_sentence.as_str()]);
        let pairs = make_pairs(&[ad("a", &long_sentence, None)], &vocab);
        assert_eq!(pairs[0].positive.len(), 30);
    }

    #[test]
    fn make_pairs_drops_degenerate_pairs() {
        let vocab = tiny_vocab(&["same text here", "one sentence only"]);
        // Description identical to body → dropped.
        let same = ad("a", "same text here", Some("same text here"));
        // Short single-sentence body: fallback equals the anchor → dropped.
        let short = ad("b", "one sentence only", None);
        let pairs = make_pairs(&[same, short], &vocab);
        assert!(pairs.is_empty());
    }

    #[test]
    fn mnrl_loss_is_ln_n_when_similarities_are_equal() {
        // All positives identical → every row's similarities are constant.
        let d = 4;
        let unit = vec![0.5; d]; // ‖(0.5,0.5,0.5,0.5)‖ = 1
        for n in [2usize, 3, 5, 8] {
            let anchors = Tensor2::from_rows(&vec![unit.clone(); n]).unwrap();
            let positives = Tensor2::from_rows(&vec![unit.clone(); n]).unwrap();
            let (loss, _, _) = mnrl_loss(&anchors, &positives, MNRL_SCALE).unwrap();
            assert!(
                (loss - (n as f64).ln()).abs() < 1e-12,
                "n={n}: loss {loss} vs ln {}",
                (n as f64).ln()
            );
        }
    }

    #[test]
    fn mnrl_loss_separated_pairs_vanishes() {
        // cos(a₁,p₁)=1 and cos(a₁,p₂)=−1: the row-1 term is
        // ln(1+e^(−2·scale)) ≈ e⁻⁴⁰ — effectively zero (it underflows the
        // 1+x addition in f64, so the computed loss is exactly 0). The batch
        // is symmetric, so the whole loss shares the e⁻⁴⁰ bound.
        let anchors = Tensor2::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let positives = Tensor2::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let (loss, _, _) = mnrl_loss(&anchors, &positives, 20.0).unwrap();
        assert!(loss >= 0.0);
        assert!(loss <= (-40.0f64).exp(), "loss {loss}");
    }

    #[test]
    fn mnrl_loss_rejects_small_batches_and_non_unit_rows() {
        let one = Tensor2::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(matches!(
            mnrl_loss(&one, &one, 20.0),
            Err(EmbedError::TooFewNegatives(1))
        ));
        let ok = Tensor2::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let bad = Tensor2::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(
            mnrl_loss(&ok, &bad, 20.0),
            Err(EmbedError::NonUnitRow(0, _))
        ));
    }

    #[test]
    fn mnrl_gradients_match_finite_differences() {
        use crate::nncore::{flatten, grad_check, unflatten};
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 4;
        let d = 8;
        // Random rows, L2-normalized so the unit-norm precondition holds.
        let normed_rows = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| {
                    let row: Vec<f64> =
                        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                    l2_normalize(&row).unwrap().0
                })
                .collect()
        };
        let anchors = Tensor2::from_rows(&normed_rows(&mut rng)).unwrap();
        let positives = Tensor2::from_rows(&normed_rows(&mut rng)).unwrap();
        let (_, danchors, dpositives) = mnrl_loss(&anchors, &positives, MNRL_SCALE).unwrap();

        // The finite-difference probe perturbs raw coordinates, so wrap the
        // loss to re-normalize rows first: the analytic gradient of the
        // normalized loss w.r.t. already-unit rows equals the raw MNRL
        // gradient projected through the normalization — at unit inputs the
        // Jacobian is (I − uuᵀ), which grad_check exercises end to end.
        let mut params = ParamSet::new();
        params.push("anchors", anchors.clone()).unwrap();
        params.push("positives", positives.clone()).unwrap();
        let loss_fn = |ps: &ParamSet| -> crate::nncore::Result<f64> {
            let renorm = |t: &Tensor2| -> crate::nncore::Result<Tensor2> {
                let rows: Vec<Vec<f64>> = (0..t.rows())
                    .map(|r| l2_normalize(t.row(r)).map(|(u, _)| u))
                    .collect::<crate::nncore::Result<_>>()?;
                Tensor2::from_rows(&rows)
            };
            let a = renorm(ps.get("anchors")?)?;
            let p = renorm(ps.get("positives")?)?;
            mnrl_loss(&a, &p, MNRL_SCALE)
                .map(|(l, _, _)| l)
                .map_err(|_| NnError::NonFinite {
                    context: "mnrl".into(),
                })
        };
        // Project the raw gradients through the normalization Jacobian.
        let project = |t: &Tensor2, g: &Tensor2| -> Tensor2 {
            let rows: Vec<Vec<f64>> = (0..t.rows())
                .map(|r| l2_normalize_backward(t.row(r), 1.0, g.row(r)).unwrap())
                .collect();
            Tensor2::from_rows(&rows).unwrap()
        };
        let mut analytic = ParamSet::new();
        analytic
            .push("anchors", project(&anchors, &danchors))
            .unwrap();
        analytic
            .push("positives", project(&positives, &dpositives))
            .unwrap();
        let flat = flatten(&params);
        let rebuilt = unflatten(&flat, &params.schema()).unwrap();
        assert_eq!(rebuilt, params);
        let report = grad_check(loss_fn, &params, &analytic, 1e-5, 3).unwrap();
        assert!(report.max_rel_err < 1e-5, "max rel err {}", report.max_rel_err);
    }

    fn keyword_pair_corpus(n: usize) -> (Vec<AdRecord>, Vocabulary) {
        // Anchors and positives share per-ad keywords so the contrastive
        // objective has real signal.
        let topics = ["solar", "coal", "wind", "fracking", "nuclear"];
        let mut corpus = Vec::new();
        for i in 0..n {
            let topic = topics[i % topics.len()];
            let body = format!("ad number {i} talks about {topic} and {topic} benefits");
            let description = format!("{topic} summary {i}");
            corpus.push(ad(&format!("a{i}"), &body, Some(&description)));
        }
        let texts: Vec<String> = corpus
            .iter()
            .flat_map(|a| [a.body.clone(), a.description.clone().unwrap()])
            .collect();
        let vocab = Vocabulary::build(texts.iter().map(String::as_str), 1000, &[]);
        (corpus, vocab)
    }

    #[test]
    fn contrastive_training_reduces_loss_and_is_deterministic() {
        let (corpus, vocab) = keyword_pair_corpus(100);
        let pairs = make_pairs(&corpus, &vocab);
        assert_eq!(pairs.len(), 100);
        let config = TrainConfig {
            epochs: 3,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 11,
        };
        let outcome = train_contrastive(&pairs, &vocab, 16, &config).unwrap();
        let losses = &outcome.epoch_losses;
        assert!(
            losses.last().unwrap() < losses.first().unwrap(),
            "losses {losses:?}"
        );
        let again = train_contrastive(&pairs, &vocab, 16, &config).unwrap();
        assert_eq!(
            crate::nncore::flatten(&outcome.checkpoint.params),
            crate::nncore::flatten(&again.checkpoint.params)
        );
        assert_eq!(
            outcome.checkpoint.shared_init_id,
            again.checkpoint.shared_init_id
        );
        // A different seed produces a different initialization id.
        let other = train_contrastive(
            &pairs,
            &vocab,
            16,
            &TrainConfig {
                seed: 12,
                ..config
            },
        )
        .unwrap();
        assert_ne!(outcome.checkpoint.shared_init_id, other.checkpoint.shared_init_id);
    }

    #[test]
    fn contrastive_training_clamps_oversized_batches() {
        let (corpus, vocab) = keyword_pair_corpus(6);
        let pairs = make_pairs(&corpus, &vocab);
        let config = TrainConfig {
            epochs: 1,
            batch_size: 1000,
            learning_rate: 1e-3,
            seed: 1,
        };
        let outcome = train_contrastive(&pairs, &vocab, 8, &config).unwrap();
        assert_eq!(outcome.checkpoint.hyper.as_ref().unwrap().batch_size, 6);
    }

    #[test]
    fn contrastive_training_improves_positive_rank() {
        // Mean in-batch rank of the true positive (1 = best) should strictly
        // improve between the untouched initialization and the trained model.
        let (corpus, vocab) = keyword_pair_corpus(60);
        let pairs = make_pairs(&corpus, &vocab);
        let config = TrainConfig {
            epochs: 4,
            batch_size: 20,
            learning_rate: 2e-3,
            seed: 3,
        };
        let mean_rank = |params: &EncoderParams| -> f64 {
            let anchors: Vec<Vec<f64>> = pairs
                .iter()
                .map(|p| params.encode_ids(&p.anchor).unwrap())
                .collect();
            let positives: Vec<Vec<f64>> = pairs
                .iter()
                .map(|p| params.encode_ids(&p.positive).unwrap())
                .collect();
            let mut total = 0.0;
            for (i, a) in anchors.iter().enumerate() {
                let own = cosine(a, &positives[i]);
                let rank = 1 + positives
                    .iter()
                    .enumerate()
                    .filter(|(j, p)| *j != i && cosine(a, p) > own)
                    .count();
                total += rank as f64;
            }
            total / anchors.len() as f64
        };
        let initial = EncoderParams::init(vocab.len(), 12, config.seed).unwrap();
        let outcome = train_contrastive(&pairs, &vocab, 12, &config).unwrap();
        let trained = EncoderParams::from_params(&outcome.checkpoint.params).unwrap();
        let before = mean_rank(&initial);
        let after = mean_rank(&trained);
        assert!(after < before, "rank before {before}, after {after}");
    }

    #[test]
    fn contrastive_training_needs_two_pairs() {
        let (corpus, vocab) = keyword_pair_corpus(1);
        let pairs = make_pairs(&corpus, &vocab);
        assert!(matches!(
            train_contrastive(&pairs, &vocab, 8, &TrainConfig::default()),
            Err(EmbedError::TooFewPairs { got: 1, need: 2 })
        ));
    }

    proptest! {
        #[test]
        fn mnrl_loss_is_permutation_invariant(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 5;
            let d = 6;
            let rows = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
                (0..n).map(|_| {
                    let row: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0_f64)).collect();
                    l2_normalize(&row).unwrap().0
                }).collect()
            };
            let a_rows = rows(&mut rng);
            let p_rows = rows(&mut rng);
            let loss = |order: &[usize]| {
                let a = Tensor2::from_rows(&order.iter().map(|&i| a_rows[i].clone()).collect::<Vec<_>>()).unwrap();
                let p = Tensor2::from_rows(&order.iter().map(|&i| p_rows[i].clone()).collect::<Vec<_>>()).unwrap();
                mnrl_loss(&a, &p, MNRL_SCALE).unwrap().0
            };
            let forward: Vec<usize> = (0..n).collect();
            let mut reversed = forward.clone();
            reversed.reverse();
            let mut shuffled = forward.clone();
            shuffled.shuffle(&mut rng);
            let base = loss(&forward);
            prop_assert!((base - loss(&reversed)).abs() < 1e-12);
            prop_assert!((base - loss(&shuffled)).abs() < 1e-12);
        }

        #[test]
        fn encode_norm_is_always_unit(seed in 0u64..200) {
            let vocab = tiny_vocab(&["alpha beta gamma delta epsilon zeta"]);
            let params = EncoderParams::init(vocab.len(), 6, seed).unwrap();
            let texts = ["alpha beta", "gamma", "delta epsilon zeta alpha", "unseen words here"];
            for text in texts {
                let ids = vocab.encode_ids(text);
                let v = params.encode_ids(&ids).unwrap();
                let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                prop_assert!((norm - 1.0).abs() < 1e-9);
            }
        }
    }
}
