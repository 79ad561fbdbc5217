//! Command-line pipeline: eight stages from raw ads to analysis tables.
//!
//! Each subcommand reads one JSON config, consumes the artifacts of earlier
//! stages from the working directory, and writes its own artifacts plus a
//! stage manifest (`<stage>.manifest.json`). The next stage refuses to run
//! until the manifests it depends on exist and carry the same config hash,
//! so stages can only execute in a valid order against consistent inputs.
//! Every artifact embeds the config hash and seeds — JSON files in an
//! envelope, CSV files in a leading `#` comment, checkpoints in their
//! metadata map — except `vocab.txt`, whose line-oriented format is fixed;
//! its provenance lives in the stage manifest. No stage mutates an upstream
//! artifact, and rerunning a stage with the same config and seeds rewrites
//! its outputs byte for byte.
//!
//! Exit codes: 0 success, 1 usage error (bad invocation or config file),
//! 2 data error (missing paths, malformed artifacts, manifest mismatch),
//! 3 numeric failure (divergence, non-finite values). Logs go to stderr.

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::analytics::{self, ContingencyWeight, DemoAxis, WeightKind};
use crate::corpus::{
    self, AdRecord, CorpusFormat, LabeledAd, Registry, Split, SplitAssignment, StanceLabel,
};
use crate::embedder::{self, EncoderParams, Encoder, TrainConfig, Vocabulary};
use crate::metrics::{self, ChiSquareReport};
use crate::nncore::{Checkpoint, HyperConfig};
use crate::soup::{self, GreedyOptions, SoupError};
use crate::stance::{self, StanceExample, StancePrediction};
use crate::themes::{self, ThemeAssignment, ThemeBank};

// ---------------------------------------------------------------------------
// Errors and exit codes
// ---------------------------------------------------------------------------

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad invocation or unusable config file → exit 1.
    #[error("usage: {0}")]
    Usage(String),
    /// Missing or inconsistent inputs/artifacts → exit 2.
    #[error("data: {0}")]
    Data(String),
    /// Training or evaluation produced non-finite numbers → exit 3.
    #[error("numeric: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<corpus::CorpusError> for CliError {
    fn from(e: corpus::CorpusError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<embedder::EmbedError> for CliError {
    fn from(e: embedder::EmbedError) -> Self {
        match e {
            embedder::EmbedError::Divergence { .. } | embedder::EmbedError::NonUnitRow(..) => {
                CliError::Numeric(e.to_string())
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<themes::ThemeError> for CliError {
    fn from(e: themes::ThemeError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<stance::StanceError> for CliError {
    fn from(e: stance::StanceError) -> Self {
        match e {
            stance::StanceError::Divergence { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<SoupError> for CliError {
    fn from(e: SoupError) -> Self {
        match e {
            SoupError::Eval(_) => CliError::Numeric(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<metrics::MetricsError> for CliError {
    fn from(e: metrics::MetricsError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<analytics::AnalyticsError> for CliError {
    fn from(e: analytics::AnalyticsError) -> Self {
        match e {
            analytics::AnalyticsError::Metrics(inner) => CliError::Numeric(inner.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<crate::nncore::NnError> for CliError {
    fn from(e: crate::nncore::NnError) -> Self {
        CliError::Data(e.to_string())
    }
}

fn io_data(context: &str, e: std::io::Error) -> CliError {
    CliError::Data(format!("{context}: {e}"))
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigPaths {
    /// Raw corpus file (.jsonl or .csv).
    pub corpus: PathBuf,
    /// Funding-entity registry CSV (`name,stance,entity_type`).
    pub registry: PathBuf,
    /// Theme bank JSON; the shipped bank when absent.
    #[serde(default)]
    pub themes: Option<PathBuf>,
    /// Gold theme annotations CSV (`ad_id,theme_id`), for narrative audit.
    #[serde(default)]
    pub annotations: Option<PathBuf>,
    /// Keyword list, one per line; the shipped list when absent.
    #[serde(default)]
    pub keywords: Option<PathBuf>,
    /// Working directory for all pipeline artifacts.
    pub workdir: PathBuf,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigSeeds {
    pub split: u64,
    pub embedder: u64,
    pub sweep: u64,
}

impl Default for ConfigSeeds {
    fn default() -> Self {
        ConfigSeeds {
            split: 13,
            embedder: 42,
            sweep: 1234,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderSettings {
    pub dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub vocab_size: usize,
}

impl Default for EmbedderSettings {
    fn default() -> Self {
        EmbedderSettings {
            dim: 32,
            epochs: 5,
            batch_size: 32,
            learning_rate: 1e-3,
            vocab_size: 4096,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridPoint {
    pub learning_rate: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSettings {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning-rate × weight-decay grid; the standard ten-point grid when
    /// absent.
    pub grid: Option<Vec<GridPoint>>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings {
            epochs: 10,
            batch_size: 32,
            grid: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSettings {
    pub test_frac: f64,
    pub val_frac: f64,
}

impl Default for SplitSettings {
    fn default() -> Self {
        SplitSettings {
            test_frac: 0.2,
            val_frac: 0.2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFlags {
    /// Drop theme tokens from classifier inputs (ablation).
    pub theme_ablation: bool,
    /// Greedy soup accepts only strict validation improvements.
    pub strict_greedy: bool,
    /// Weight for theme and funder aggregations: ad_count | impressions_mid
    /// | spend_mid.
    pub weight_kind: String,
    /// Funders listed per stance in the expenditure ranking.
    pub top_funders: usize,
}

impl Default for ConfigFlags {
    fn default() -> Self {
        ConfigFlags {
            theme_ablation: false,
            strict_greedy: false,
            weight_kind: "spend_mid".to_string(),
            top_funders: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub paths: ConfigPaths,
    #[serde(default)]
    pub seeds: ConfigSeeds,
    #[serde(default)]
    pub embedder: EmbedderSettings,
    #[serde(default)]
    pub sweep: SweepSettings,
    #[serde(default)]
    pub split: SplitSettings,
    #[serde(default)]
    pub flags: ConfigFlags,
}

impl RunConfig {
    /// Parse a config file. A missing or malformed file is a usage error —
    /// the invocation itself is wrong.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    /// Check the config's internal consistency and that every referenced
    /// input path exists.
    pub fn validate(&self) -> Result<()> {
        let must_exist = |label: &str, p: &Path| -> Result<()> {
            if p.exists() {
                Ok(())
            } else {
                Err(CliError::Data(format!(
                    "paths.{label} does not exist: {}",
                    p.display()
                )))
            }
        };
        must_exist("corpus", &self.paths.corpus)?;
        must_exist("registry", &self.paths.registry)?;
        if let Some(p) = &self.paths.themes {
            must_exist("themes", p)?;
        }
        if let Some(p) = &self.paths.annotations {
            must_exist("annotations", p)?;
        }
        if let Some(p) = &self.paths.keywords {
            must_exist("keywords", p)?;
        }
        if WeightKind::parse(&self.flags.weight_kind).is_none() {
            return Err(CliError::Usage(format!(
                "flags.weight_kind must be ad_count, impressions_mid, or spend_mid; got `{}`",
                self.flags.weight_kind
            )));
        }
        if self.embedder.dim < 2 {
            return Err(CliError::Usage("embedder.dim must be at least 2".into()));
        }
        if let Some(grid) = &self.sweep.grid {
            if grid.is_empty() {
                return Err(CliError::Usage("sweep.grid must not be empty".into()));
            }
        }
        Ok(())
    }

    /// Stable hash of the full configuration; stamped into every artifact.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        let mut out = String::with_capacity(32);
        for b in &digest[..16] {
            let _ = write!(out, "{b:02x}");
        }
        out
    }

    fn weight_kind(&self) -> WeightKind {
        WeightKind::parse(&self.flags.weight_kind).expect("validated at load")
    }

    fn dir(&self, sub: &str) -> PathBuf {
        self.paths.workdir.join(sub)
    }

    fn grid(&self) -> Vec<HyperConfig> {
        let mut grid = match &self.sweep.grid {
            Some(points) => points
                .iter()
                .map(|p| HyperConfig {
                    learning_rate: p.learning_rate,
                    weight_decay: p.weight_decay,
                    epochs: 0,
                    batch_size: 0,
                    seed: self.seeds.sweep,
                })
                .collect(),
            None => stance::default_grid(self.seeds.sweep),
        };
        for h in &mut grid {
            h.epochs = self.sweep.epochs;
            h.batch_size = self.sweep.batch_size;
        }
        grid
    }
}

// ---------------------------------------------------------------------------
// Manifests and envelopes
// ---------------------------------------------------------------------------

pub const STAGES: [&str; 8] = [
    "ingest",
    "split",
    "train-embed",
    "assign-themes",
    "sweep",
    "soup",
    "eval",
    "analyze",
];

/// Written by every stage; validated by each stage that depends on it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub config_hash: String,
    pub seeds: ConfigSeeds,
    /// Input paths as given in the config (for the record, not re-resolved).
    pub inputs: Vec<String>,
    /// Logical name → path relative to the workdir.
    pub outputs: BTreeMap<String, String>,
    pub counts: BTreeMap<String, u64>,
}

fn manifest_path(workdir: &Path, stage: &str) -> PathBuf {
    workdir.join(format!("{stage}.manifest.json"))
}

fn write_manifest(config: &RunConfig, manifest: &StageManifest) -> Result<()> {
    let path = manifest_path(&config.paths.workdir, &manifest.stage);
    let mut json = serde_json::to_string_pretty(manifest)
        .map_err(|e| CliError::Data(format!("serialize manifest: {e}")))?;
    json.push('\n');
    std::fs::write(&path, json).map_err(|e| io_data("write manifest", e))
}

/// Load a prerequisite stage's manifest, refusing manifests from a different
/// configuration.
pub fn require_manifest(config: &RunConfig, stage: &str) -> Result<StageManifest> {
    let path = manifest_path(&config.paths.workdir, stage);
    let text = std::fs::read_to_string(&path).map_err(|_| {
        CliError::Data(format!(
            "missing manifest for stage `{stage}` ({}); run `adsoup {stage}` first",
            path.display()
        ))
    })?;
    let manifest: StageManifest = serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("manifest {}: {e}", path.display())))?;
    let hash = config.hash();
    if manifest.config_hash != hash {
        return Err(CliError::Data(format!(
            "manifest for stage `{stage}` was produced by config {} but the current config is {hash}; \
             rerun the pipeline from `{stage}`",
            manifest.config_hash
        )));
    }
    Ok(manifest)
}

/// JSON artifact wrapper: provenance plus payload.
#[derive(Debug, Serialize, Deserialize)]
struct Envelope<T> {
    config_hash: String,
    seeds: ConfigSeeds,
    payload: T,
}

fn write_envelope<T: Serialize>(config: &RunConfig, path: &Path, payload: &T) -> Result<()> {
    let envelope = Envelope {
        config_hash: config.hash(),
        seeds: config.seeds,
        payload,
    };
    let mut json = serde_json::to_string_pretty(&envelope)
        .map_err(|e| CliError::Data(format!("serialize {}: {e}", path.display())))?;
    json.push('\n');
    std::fs::write(path, json).map_err(|e| io_data("write artifact", e))
}

fn read_envelope<T: DeserializeOwned>(config: &RunConfig, path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|_| {
        CliError::Data(format!(
            "missing artifact {}; rerun the producing stage",
            path.display()
        ))
    })?;
    let envelope: Envelope<T> = serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("artifact {}: {e}", path.display())))?;
    let hash = config.hash();
    if envelope.config_hash != hash {
        return Err(CliError::Data(format!(
            "artifact {} was produced by config {} but the current config is {hash}",
            path.display(),
            envelope.config_hash
        )));
    }
    Ok(envelope.payload)
}

/// Leading comment line stamped into every CSV artifact.
fn csv_provenance(config: &RunConfig) -> String {
    format!(
        "# config_hash={} seeds=split:{},embedder:{},sweep:{}\n",
        config.hash(),
        config.seeds.split,
        config.seeds.embedder,
        config.seeds.sweep
    )
}

fn write_csv_with_provenance(
    config: &RunConfig,
    path: &Path,
    body: impl FnOnce(&mut Vec<u8>) -> Result<()>,
) -> Result<()> {
    let mut bytes = csv_provenance(config).into_bytes();
    body(&mut bytes)?;
    std::fs::write(path, bytes).map_err(|e| io_data("write csv", e))
}

// ---------------------------------------------------------------------------
// Shared artifact loading
// ---------------------------------------------------------------------------

fn labeled_path(config: &RunConfig) -> PathBuf {
    config.dir("corpus").join("labeled.json")
}

fn unlabeled_path(config: &RunConfig) -> PathBuf {
    config.dir("corpus").join("unlabeled.json")
}

fn read_labeled(config: &RunConfig) -> Result<Vec<LabeledAd>> {
    read_envelope(config, &labeled_path(config))
}

fn read_unlabeled(config: &RunConfig) -> Result<Vec<AdRecord>> {
    read_envelope(config, &unlabeled_path(config))
}

fn read_split(config: &RunConfig) -> Result<SplitAssignment> {
    read_envelope(config, &config.dir("splits").join("split.json"))
}

fn load_bank(config: &RunConfig) -> Result<ThemeBank> {
    Ok(match &config.paths.themes {
        Some(path) => ThemeBank::load(path)?,
        None => ThemeBank::shipped(),
    })
}

fn load_encoder(config: &RunConfig) -> Result<(Encoder, Checkpoint)> {
    let vocab = Vocabulary::load(&config.dir("checkpoints").join("vocab.txt"))?;
    let checkpoint = Checkpoint::load(&config.dir("checkpoints").join("encoder"))?;
    let params = EncoderParams::from_params(&checkpoint.params)?;
    Ok((Encoder { vocab, params }, checkpoint))
}

fn load_assignments(config: &RunConfig) -> Result<BTreeMap<String, ThemeAssignment>> {
    let path = config.dir("reports").join("theme_assignments.csv");
    let list = themes::read_assignments(&path)?;
    Ok(list.into_iter().map(|a| (a.ad_id.clone(), a)).collect())
}

/// Theme inputs for the classifier, honoring the ablation flag.
fn theme_inputs(
    config: &RunConfig,
) -> Result<Option<BTreeMap<String, ThemeAssignment>>> {
    if config.flags.theme_ablation {
        Ok(None)
    } else {
        Ok(Some(load_assignments(config)?))
    }
}

fn split_ads(
    labeled: &[LabeledAd],
    assignment: &SplitAssignment,
    split: Split,
) -> Vec<LabeledAd> {
    assignment
        .ads_in(labeled, split)
        .into_iter()
        .cloned()
        .collect()
}

fn examples_for(
    config: &RunConfig,
    labeled: &[LabeledAd],
    assignment: &SplitAssignment,
    split: Split,
    vocab: &Vocabulary,
) -> Result<Vec<StanceExample>> {
    let ads = split_ads(labeled, assignment, split);
    let assignments = theme_inputs(config)?;
    Ok(stance::make_examples(&ads, assignments.as_ref(), vocab)?)
}

fn load_sweep_checkpoints(
    config: &RunConfig,
    manifest: &StageManifest,
) -> Result<Vec<Checkpoint>> {
    let mut names: Vec<&String> = manifest
        .outputs
        .keys()
        .filter(|k| {
            k.strip_prefix("sweep_")
                .is_some_and(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()))
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(CliError::Data(
            "sweep manifest lists no checkpoints".into(),
        ));
    }
    names
        .iter()
        .map(|name| {
            let rel = &manifest.outputs[name.as_str()];
            Ok(Checkpoint::load(
                &config.paths.workdir.join(rel),
            )?)
        })
        .collect()
}

fn stamp_meta(config: &RunConfig, stage: &str, checkpoint: &mut Checkpoint) {
    checkpoint
        .meta
        .insert("config_hash".to_string(), config.hash());
    checkpoint.meta.insert("stage".to_string(), stage.to_string());
    checkpoint.meta.insert(
        "seeds".to_string(),
        format!(
            "split:{},embedder:{},sweep:{}",
            config.seeds.split, config.seeds.embedder, config.seeds.sweep
        ),
    );
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct RejectedRow {
    row: u64,
    reason: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct IngestSummary {
    records_valid: u64,
    rejected: Vec<RejectedRow>,
    keyword_matched: u64,
    labeled: u64,
    unlabeled: u64,
    registry_entities: u64,
}

pub fn stage_ingest(config: &RunConfig) -> Result<StageManifest> {
    config.validate()?;
    for sub in ["corpus", "splits", "checkpoints", "soups", "reports"] {
        std::fs::create_dir_all(config.dir(sub)).map_err(|e| io_data("create workdir", e))?;
    }
    let format = CorpusFormat::from_path(&config.paths.corpus);
    let report = corpus::ingest(&config.paths.corpus, format)?;
    let keywords = match &config.paths.keywords {
        Some(path) => {
            let text =
                std::fs::read_to_string(path).map_err(|e| io_data("read keywords", e))?;
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect()
        }
        None => corpus::default_keywords(),
    };
    let filtered = corpus::filter_keywords(&report.records, &keywords)?;
    let registry = Registry::load_csv(&config.paths.registry)?;
    let (labeled, unlabeled) = corpus::propagate_stance(&filtered, &registry);
    if labeled.is_empty() {
        return Err(CliError::Data(
            "no ads received a stance label; check the registry".into(),
        ));
    }

    write_envelope(config, &labeled_path(config), &labeled)?;
    write_envelope(config, &unlabeled_path(config), &unlabeled)?;
    let summary = IngestSummary {
        records_valid: report.records.len() as u64,
        rejected: report
            .rejected
            .iter()
            .map(|d| RejectedRow {
                row: d.row as u64,
                reason: d.reason.clone(),
            })
            .collect(),
        keyword_matched: filtered.len() as u64,
        labeled: labeled.len() as u64,
        unlabeled: unlabeled.len() as u64,
        registry_entities: registry.len() as u64,
    };
    write_envelope(
        config,
        &config.dir("corpus").join("ingest_report.json"),
        &summary,
    )?;

    let mut inputs = vec![
        config.paths.corpus.display().to_string(),
        config.paths.registry.display().to_string(),
    ];
    if let Some(p) = &config.paths.keywords {
        inputs.push(p.display().to_string());
    }
    let manifest = StageManifest {
        stage: "ingest".into(),
        config_hash: config.hash(),
        seeds: config.seeds,
        inputs,
        outputs: [
            ("labeled".to_string(), "corpus/labeled.json".to_string()),
            ("unlabeled".to_string(), "corpus/unlabeled.json".to_string()),
            (
                "ingest_report".to_string(),
                "corpus/ingest_report.json".to_string(),
            ),
        ]
        .into(),
        counts: [
            ("records_valid".to_string(), summary.records_valid),
            ("rejected".to_string(), summary.rejected.len() as u64),
            ("keyword_matched".to_string(), summary.keyword_matched),
            ("labeled".to_string(), summary.labeled),
            ("unlabeled".to_string(), summary.unlabeled),
            ("registry_entities".to_string(), summary.registry_entities),
        ]
        .into(),
    };
    write_manifest(config, &manifest)?;
    log::info!(
        "ingest: {} valid, {} keyword-matched, {} labeled, {} unlabeled",
        summary.records_valid,
        summary.keyword_matched,
        summary.labeled,
        summary.unlabeled
    );
    Ok(manifest)
}

pub fn stage_split(config: &RunConfig) -> Result<StageManifest> {
    require_manifest(config, "ingest")?;
    let labeled = read_labeled(config)?;
    let assignment = corpus::split_by_entity(
        &labeled,
        config.seeds.split,
        config.split.test_frac,
        config.split.val_frac,
    )?;
    write_envelope(
        config,
        &config.dir("splits").join("split.json"),
        &assignment,
    )?;
    let ads_in = |s: Split| assignment.ads_in(&labeled, s).len() as u64;
    let manifest = StageManifest {
        stage: "split".into(),
        config_hash: config.hash(),
        seeds: config.seeds,
        inputs: vec!["corpus/labeled.json".into()],
        outputs: [("split".to_string(), "splits/split.json".to_string())].into(),
        counts: [
            ("entities_train".to_string(), assignment.count(Split::Train) as u64),
            ("entities_val".to_string(), assignment.count(Split::Val) as u64),
            ("entities_test".to_string(), assignment.count(Split::Test) as u64),
            ("ads_train".to_string(), ads_in(Split::Train)),
            ("ads_val".to_string(), ads_in(Split::Val)),
            ("ads_test".to_string(), ads_in(Split::Test)),
        ]
        .into(),
    };
    write_manifest(config, &manifest)?;
    log::info!(
        "split: entities train/val/test = {}/{}/{}",
        manifest.counts["entities_train"],
        manifest.counts["entities_val"],
        manifest.counts["entities_test"]
    );
    Ok(manifest)
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbedSummary {
    pairs: u64,
    vocab_len: u64,
    dim: u64,
    epoch_losses: Vec<f64>,
}

pub fn stage_train_embed(config: &RunConfig) -> Result<StageManifest> {
    require_manifest(config, "ingest")?;
    let labeled = read_labeled(config)?;
    let unlabeled = read_unlabeled(config)?;
    let all_ads: Vec<AdRecord> = labeled
        .iter()
        .map(|l| l.ad.clone())
        .chain(unlabeled.iter().cloned())
        .collect();
    let bank = load_bank(config)?;

    let mut texts: Vec<&str> = Vec::new();
    for ad in &all_ads {
        texts.push(&ad.body);
        if let Some(d) = &ad.description {
            texts.push(d);
        }
    }
    let phrase_texts: Vec<&str> = bank
        .themes()
        .iter()
        .flat_map(|t| t.phrases.iter().map(String::as_str))
        .collect();
    texts.extend(phrase_texts);
    let vocab = Vocabulary::build(
        texts.iter().copied(),
        config.embedder.vocab_size,
        &bank.id_tokens(),
    );

    let pairs = embedder::make_pairs(&all_ads, &vocab);
    let train_config = TrainConfig {
        epochs: config.embedder.epochs,
        batch_size: config.embedder.batch_size,
        learning_rate: config.embedder.learning_rate,
        seed: config.seeds.embedder,
    };
    let outcome = embedder::train_contrastive(&pairs, &vocab, config.embedder.dim, &train_config)?;
    let mut checkpoint = outcome.checkpoint;
    stamp_meta(config, "train-embed", &mut checkpoint);

    let stem = config.dir("checkpoints").join("encoder");
    checkpoint.save(&stem)?;
    vocab.save(&config.dir("checkpoints").join("vocab.txt"))?;
    let summary = EmbedSummary {
        pairs: pairs.len() as u64,
        vocab_len: vocab.len() as u64,
        dim: config.embedder.dim as u64,
        epoch_losses: outcome.epoch_losses.clone(),
    };
    write_envelope(
        config,
        &config.dir("reports").join("embed_report.json"),
        &summary,
    )?;

    let manifest = StageManifest {
        stage: "train-embed".into(),
        config_hash: config.hash(),
        seeds: config.seeds,
        inputs: vec!["corpus/labeled.json".into(), "corpus/unlabeled.json".into()],
        outputs: [
            ("encoder_bin".to_string(), "checkpoints/encoder.bin".to_string()),
            ("encoder_json".to_string(), "checkpoints/encoder.json".to_string()),
            ("vocab".to_string(), "checkpoints/vocab.txt".to_string()),
            ("embed_report".to_string(), "reports/embed_report.json".to_string()),
        ]
        .into(),
        counts: [
            ("pairs".to_string(), summary.pairs),
            ("vocab_len".to_string(), summary.vocab_len),
            ("dim".to_string(), summary.dim),
        ]
        .into(),
    };
    write_manifest(config, &manifest)?;
    log::info!(
        "train-embed: {} pairs, vocab {}, dim {}, final loss {:.4}",
        summary.pairs,
        summary.vocab_len,
        summary.dim,
        summary.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(manifest)
}

pub fn stage_assign_themes(config: &RunConfig) -> Result<StageManifest> {
    require_manifest(config, "ingest")?;
    require_manifest(config, "train-embed")?;
    let labeled = read_labeled(config)?;
    let unlabeled = read_unlabeled(config)?;
    let all_ads: Vec<AdRecord> = labeled
        .iter()
        .map(|l| l.ad.clone())
        .chain(unlabeled.iter().cloned())
        .collect();
    let bank = load_bank(config)?;
    let (encoder, _) = load_encoder(config)?;
    let assignments = themes::assign_all(&all_ads, &encoder, &bank)?;

    let csv_path = config.dir("reports").join("theme_assignments.csv");
    write_csv_with_provenance(config, &csv_path, |buf| {
        Ok(themes::write_assignments(buf, &assignments)?)
    })?;

    let mut outputs: BTreeMap<String, String> = [(
        "assignments".to_string(),
        "reports/theme_assignments.csv".to_string(),
    )]
    .into();
    let mut counts: BTreeMap<String, u64> =
        [("assigned".to_string(), assignments.len() as u64)].into();

    if let Some(annotations_path) = &config.paths.annotations {
        let gold = themes::read_annotations(annotations_path)?;
        let report = themes::eval_themes(&assignments, &gold, &bank)?;
        write_envelope(
            config,
            &config.dir("reports").join("theme_eval.json"),
            &report,
        )?;
        outputs.insert(
            "theme_eval".to_string(),
            "reports/theme_eval.json".to_string(),
        );
        counts.insert("annotated".to_string(), report.n_annotated as u64);
        log::info!(
            "assign-themes: accuracy {:.4}, macro-F1 {:.4} on {} annotated ads",
            report.accuracy,
            report.macro_f1,
            report.n_annotated
        );
    }

    let manifest = StageManifest {
        stage: "assign-themes".into(),
        config_hash: config.hash(),
        seeds: config.seeds,
        inputs: vec![
            "corpus/labeled.json".into(),
            "corpus/unlabeled.json".into(),
            "checkpoints/encoder.bin".into(),
            "checkpoints/vocab.txt".into(),
        ],
        outputs,
        counts,
    };
    write_manifest(config, &manifest)?;
    log::info!("assign-themes: {} ads assigned", assignments.len());
    Ok(manifest)
}

#[derive(Debug, Serialize, Deserialize)]
struct SweepRow {
    index: usize,
    learning_rate: f64,
    weight_decay: f64,
    val_accuracy: f64,
    file: String,
}

pub fn stage_sweep(config: &RunConfig) -> Result<StageManifest> {
    require_manifest(config, "ingest")?;
    require_manifest(config, "split")?;
    require_manifest(config, "train-embed")?;
    require_manifest(config, "assign-themes")?;
    let labeled = read_labeled(config)?;
    let assignment = read_split(config)?;
    let (encoder, init) = load_encoder(config)?;
    let train = examples_for(config, &labeled, &assignment, Split::Train, &encoder.vocab)?;
    let val = examples_for(config, &labeled, &assignment, Split::Val, &encoder.vocab)?;
    let grid = config.grid();

    let checkpoints = stance::sweep(&init, &train, &val, &grid)?;
    let mut outputs = BTreeMap::new();
    let mut rows = Vec::new();
    for (i, mut checkpoint) in checkpoints.into_iter().enumerate() {
        stamp_meta(config, "sweep", &mut checkpoint);
        checkpoint
            .meta
            .insert("grid_index".to_string(), i.to_string());
        let name = format!("sweep_{i:02}");
        let stem = config.dir("checkpoints").join(&name);
        checkpoint.save(&stem)?;
        let hyper = checkpoint.hyper.as_ref().expect("sweep records hyper");
        rows.push(SweepRow {
            index: i,
            learning_rate: hyper.learning_rate,
            weight_decay: hyper.weight_decay,
            val_accuracy: checkpoint.val_accuracy.expect("sweep records val"),
            file: format!("checkpoints/{name}.bin"),
        });
        outputs.insert(name.clone(), format!("checkpoints/{name}.bin"));
        outputs.insert(format!("{name}_json"), format!("checkpoints/{name}.json"));
    }
    write_envelope(
        config,
        &config.dir("reports").join("sweep_report.json"),
        &rows,
    )?;
    outputs.insert(
        "sweep_report".to_string(),
        "reports/sweep_report.json".to_string(),
    );

    let manifest = StageManifest {
        stage: "sweep".into(),
        config_hash: config.hash(),
        seeds: config.seeds,
        inputs: vec![
            "corpus/labeled.json".into(),
            "splits/split.json".into(),
            "checkpoints/encoder.bin".into(),
            "reports/theme_assignments.csv".into(),
        ],
        outputs,
        counts: [
            ("checkpoints".to_string(), rows.len() as u64),
            ("train_examples".to_string(), train.len() as u64),
            ("val_examples".to_string(), val.len() as u64),
        ]
        .into(),
    };
    write_manifest(config, &manifest)?;
    for row in &rows {
        log::info!(
            "sweep[{:02}]: lr {:.0e} wd {:.0e} → val {:.4}",
            row.index,
            row.learning_rate,
            row.weight_decay,
            row.val_accuracy
        );
    }
    Ok(manifest)
}

#[derive(Debug, Serialize, Deserialize)]
struct GreedyTraceFile {
    ingredients: Vec<usize>,
    trace: Vec<soup::TraceStep>,
    final_val_accuracy: Option<f64>,
}

pub fn stage_soup(config: &RunConfig) -> Result<StageManifest> {
    let sweep_manifest = require_manifest(config, "sweep")?;
    require_manifest(config, "split")?;
    require_manifest(config, "train-embed")?;
    let labeled = read_labeled(config)?;
    let assignment = read_split(config)?;
    let (encoder, _) = load_encoder(config)?;
    let val = examples_for(config, &labeled, &assignment, Split::Val, &encoder.vocab)?;
    let checkpoints = load_sweep_checkpoints(config, &sweep_manifest)?;

    let mut uniform = soup::uniform_soup(&checkpoints)?;
    stamp_meta(config, "soup", &mut uniform.checkpoint);
    uniform.checkpoint.save(&config.dir("soups").join("uniform"))?;

    let val_eval = |c: &Checkpoint| -> std::result::Result<f64, SoupError> {
        stance::evaluate_accuracy(c, &val).map_err(|e| SoupError::Eval(e.to_string()))
    };
    let mut greedy = soup::greedy_soup_with(
        &checkpoints,
        val_eval,
        GreedyOptions {
            strict: config.flags.strict_greedy,
        },
    )?;
    stamp_meta(config, "soup", &mut greedy.checkpoint);
    greedy.checkpoint.save(&config.dir("soups").join("greedy"))?;
    write_envelope(
        config,
        &config.dir("soups").join("greedy_trace.json"),
        &GreedyTraceFile {
            ingredients: greedy.ingredients.clone(),
            trace: greedy.trace.clone(),
            final_val_accuracy: greedy.checkpoint.val_accuracy,
        },
    )?;

    let manifest = StageManifest {
        stage: "soup".into(),
        config_hash: config.hash(),
        seeds: config.seeds,
        inputs: vec!["checkpoints/sweep_*.bin".into(), "splits/split.json".into()],
        outputs: [
            ("uniform_bin".to_string(), "soups/uniform.bin".to_string()),
            ("uniform_json".to_string(), "soups/uniform.json".to_string()),
            ("greedy_bin".to_string(), "soups/greedy.bin".to_string()),
            ("greedy_json".to_string(), "soups/greedy.json".to_string()),
            ("greedy_trace".to_string(), "soups/greedy_trace.json".to_string()),
        ]
        .into(),
        counts: [
            ("ingredients_total".to_string(), checkpoints.len() as u64),
            (
                "ingredients_greedy".to_string(),
                greedy.ingredients.len() as u64,
            ),
        ]
        .into(),
    };
    write_manifest(config, &manifest)?;
    log::info!(
        "soup: uniform over {} checkpoints; greedy kept {:?} (val {:.4})",
        checkpoints.len(),
        greedy.ingredients,
        greedy.checkpoint.val_accuracy.unwrap_or(f64::NAN)
    );
    Ok(manifest)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub val_accuracy: Option<f64>,
}

fn test_report(
    predictions: &[StanceLabel],
    gold: &[StanceLabel],
) -> Result<(f64, f64)> {
    let report = metrics::classification_report(predictions, gold, &StanceLabel::ALL)?;
    Ok((report.accuracy, report.macro_f1))
}

pub fn stage_eval(config: &RunConfig) -> Result<StageManifest> {
    let sweep_manifest = require_manifest(config, "sweep")?;
    require_manifest(config, "soup")?;
    require_manifest(config, "split")?;
    let labeled = read_labeled(config)?;
    let assignment = read_split(config)?;
    let (encoder, _) = load_encoder(config)?;
    let test = examples_for(config, &labeled, &assignment, Split::Test, &encoder.vocab)?;
    if test.is_empty() {
        return Err(CliError::Data("test split contains no ads".into()));
    }
    let gold: Vec<StanceLabel> = test.iter().map(|e| e.label).collect();

    let mut rows = Vec::new();
    let mut eval_model = |name: String, model: &Checkpoint| -> Result<()> {
        let predictions = stance::predict(model, &test)?;
        let labels: Vec<StanceLabel> = predictions.iter().map(|p| p.label).collect();
        let (accuracy, macro_f1) = test_report(&labels, &gold)?;
        rows.push(EvalRow {
            model: name,
            accuracy,
            macro_f1,
            val_accuracy: model.val_accuracy,
        });
        Ok(())
    };

    let checkpoints = load_sweep_checkpoints(config, &sweep_manifest)?;
    for (i, checkpoint) in checkpoints.iter().enumerate() {
        eval_model(format!("sweep_{i:02}"), checkpoint)?;
    }
    let uniform = Checkpoint::load(&config.dir("soups").join("uniform"))?;
    eval_model("uniform_soup".to_string(), &uniform)?;
    let greedy = Checkpoint::load(&config.dir("soups").join("greedy"))?;
    eval_model("greedy_soup".to_string(), &greedy)?;

    // TF-IDF logistic-regression baseline on raw bodies.
    let train_ads = split_ads(&labeled, &assignment, Split::Train);
    let test_ads = split_ads(&labeled, &assignment, Split::Test);
    let train_docs: Vec<(String, StanceLabel)> = train_ads
        .iter()
        .map(|l| (l.ad.body.clone(), l.stance))
        .collect();
    let tfidf = stance::train_tfidf_lr(&train_docs)?;
    let test_docs: Vec<String> = test_ads.iter().map(|l| l.ad.body.clone()).collect();
    let tfidf_pred = stance::predict_tfidf(&tfidf, &test_docs)?;
    let tfidf_gold: Vec<StanceLabel> = test_ads.iter().map(|l| l.stance).collect();
    let (accuracy, macro_f1) = test_report(&tfidf_pred, &tfidf_gold)?;
    rows.push(EvalRow {
        model: "tfidf_lr".to_string(),
        accuracy,
        macro_f1,
        val_accuracy: None,
    });

    write_envelope(
        config,
        &config.dir("reports").join("eval_report.json"),
        &rows,
    )?;
    write_csv_with_provenance(
        config,
        &config.dir("reports").join("eval_report.csv"),
        |buf| {
            let mut w = csv::Writer::from_writer(buf);
            w.write_record(["model", "accuracy", "macro_f1", "val_accuracy"])
                .map_err(|e| CliError::Data(e.to_string()))?;
            for row in &rows {
                w.write_record([
                    row.model.as_str(),
                    &format!("{:.17}", row.accuracy),
                    &format!("{:.17}", row.macro_f1),
                    &row.val_accuracy
                        .map(|v| format!("{v:.17}"))
                        .unwrap_or_default(),
                ])
                .map_err(|e| CliError::Data(e.to_string()))?;
            }
            w.flush().map_err(|e| io_data("flush csv", e))?;
            Ok(())
        },
    )?;

    // The report the terminal user reads: accuracy and macro-F1 for every
    // sweep checkpoint, both soups, and the baseline.
    println!("model            accuracy  macro_f1");
    for row in &rows {
        println!(
            "{:<16} {:>8.4}  {:>8.4}",
            row.model, row.accuracy, row.macro_f1
        );
    }

    let manifest = StageManifest {
        stage: "eval".into(),
        config_hash: config.hash(),
        seeds: config.seeds,
        inputs: vec![
            "checkpoints/sweep_*.bin".into(),
            "soups/uniform.bin".into(),
            "soups/greedy.bin".into(),
            "splits/split.json".into(),
        ],
        outputs: [
            ("eval_json".to_string(), "reports/eval_report.json".to_string()),
            ("eval_csv".to_string(), "reports/eval_report.csv".to_string()),
        ]
        .into(),
        counts: [
            ("models".to_string(), rows.len() as u64),
            ("test_examples".to_string(), test.len() as u64),
        ]
        .into(),
    };
    write_manifest(config, &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Serialize)]
struct AnalysisMeta {
    weight_kind: String,
    filters: BTreeMap<String, String>,
    n_labeled: u64,
    n_correct_predictions: u64,
    excluded: BTreeMap<String, u64>,
    chi_square: BTreeMap<String, ChiSquareReport>,
    /// Per-stance share of midpoint impressions under both candidate
    /// denominators, labeled explicitly.
    impression_shares: BTreeMap<String, BTreeMap<String, f64>>,
}

fn impression_shares(ads: &[LabeledAd]) -> BTreeMap<String, f64> {
    let total: f64 = ads.iter().map(|l| l.ad.impressions_mid()).sum();
    let mut shares = BTreeMap::new();
    if total <= 0.0 {
        return shares;
    }
    for stance in StanceLabel::ALL {
        let sum: f64 = ads
            .iter()
            .filter(|l| l.stance == stance)
            .map(|l| l.ad.impressions_mid())
            .sum();
        shares.insert(stance.as_str().to_string(), sum / total);
    }
    shares
}

pub fn stage_analyze(config: &RunConfig) -> Result<StageManifest> {
    require_manifest(config, "ingest")?;
    require_manifest(config, "assign-themes")?;
    require_manifest(config, "soup")?;
    let labeled = read_labeled(config)?;
    let registry = Registry::load_csv(&config.paths.registry)?;
    let (encoder, _) = load_encoder(config)?;
    let assignments = load_assignments(config)?;
    let theme_ids: BTreeMap<String, String> = assignments
        .iter()
        .map(|(ad_id, a)| (ad_id.clone(), a.theme_id.clone()))
        .collect();

    // Predict stance for every labeled ad with the greedy soup, then keep
    // correctly predicted ads for the narrative analyses.
    let greedy = Checkpoint::load(&config.dir("soups").join("greedy"))?;
    let theme_map = theme_inputs(config)?;
    let examples = stance::make_examples(&labeled, theme_map.as_ref(), &encoder.vocab)?;
    let predictions: Vec<StancePrediction> = stance::predict(&greedy, &examples)?;
    let correct = analytics::filter_correct(&labeled, &predictions)?;

    let weight_kind = config.weight_kind();
    let reports = config.dir("reports");
    let mut excluded: BTreeMap<String, u64> = BTreeMap::new();

    let theme_dist = analytics::theme_distribution(&correct, &theme_ids, weight_kind);
    excluded.insert("theme_dist".into(), theme_dist.excluded as u64);
    write_csv_with_provenance(config, &reports.join("theme_dist.csv"), |buf| {
        Ok(analytics::write_rows(buf, &theme_dist.rows)?)
    })?;

    let demo_gender = analytics::demo_distribution(&labeled, DemoAxis::Gender);
    excluded.insert("demo_gender".into(), demo_gender.excluded as u64);
    write_csv_with_provenance(config, &reports.join("demo_gender.csv"), |buf| {
        Ok(analytics::write_rows(buf, &demo_gender.rows)?)
    })?;

    let demo_age = analytics::demo_distribution(&labeled, DemoAxis::Age);
    excluded.insert("demo_age".into(), demo_age.excluded as u64);
    write_csv_with_provenance(config, &reports.join("demo_age.csv"), |buf| {
        Ok(analytics::write_rows(buf, &demo_age.rows)?)
    })?;

    let geo = analytics::geo_distribution(&labeled);
    excluded.insert("geo_states".into(), geo.excluded as u64);
    write_csv_with_provenance(config, &reports.join("geo_states.csv"), |buf| {
        Ok(analytics::write_rows(buf, &geo.rows)?)
    })?;

    let funders = analytics::top_funders(&labeled, config.flags.top_funders, weight_kind);
    write_csv_with_provenance(config, &reports.join("top_funders.csv"), |buf| {
        Ok(analytics::write_rows(buf, &funders)?)
    })?;

    let matrix = analytics::entity_type_theme_spend(&correct, &theme_ids, &registry);
    excluded.insert("entity_theme_spend".into(), matrix.excluded as u64);
    write_csv_with_provenance(config, &reports.join("entity_theme_spend.csv"), |buf| {
        Ok(analytics::write_theme_type_matrix(buf, &matrix)?)
    })?;

    let tokens = analytics::theme_token_frequencies(&correct, &theme_ids, 25);
    write_csv_with_provenance(config, &reports.join("theme_tokens.csv"), |buf| {
        Ok(analytics::write_token_frequencies(buf, &tokens)?)
    })?;

    let mut chi = BTreeMap::new();
    for axis in [DemoAxis::Gender, DemoAxis::Age] {
        for weighting in [ContingencyWeight::AdCount, ContingencyWeight::ImpressionsMid] {
            let key = format!("{}_{}", axis.as_str(), weighting.as_str());
            let table = analytics::stance_contingency(&labeled, axis, weighting)?;
            let report = metrics::chi_square(&table)?;
            chi.insert(key, report);
        }
    }

    let mut shares = BTreeMap::new();
    shares.insert("all_labeled_ads".to_string(), impression_shares(&labeled));
    shares.insert(
        "correctly_predicted_ads".to_string(),
        impression_shares(&correct),
    );

    let meta = AnalysisMeta {
        weight_kind: weight_kind.as_str().to_string(),
        filters: [
            (
                "theme_analyses".to_string(),
                "correctly_predicted_ads".to_string(),
            ),
            (
                "demographic_geographic".to_string(),
                "all_labeled_ads".to_string(),
            ),
            (
                "top_funders".to_string(),
                "all_labeled_ads".to_string(),
            ),
        ]
        .into(),
        n_labeled: labeled.len() as u64,
        n_correct_predictions: correct.len() as u64,
        excluded,
        chi_square: chi,
        impression_shares: shares,
    };
    write_envelope(config, &reports.join("analysis_meta.json"), &meta)?;

    let manifest = StageManifest {
        stage: "analyze".into(),
        config_hash: config.hash(),
        seeds: config.seeds,
        inputs: vec![
            "corpus/labeled.json".into(),
            "reports/theme_assignments.csv".into(),
            "soups/greedy.bin".into(),
        ],
        outputs: [
            ("theme_dist".to_string(), "reports/theme_dist.csv".to_string()),
            ("demo_gender".to_string(), "reports/demo_gender.csv".to_string()),
            ("demo_age".to_string(), "reports/demo_age.csv".to_string()),
            ("geo_states".to_string(), "reports/geo_states.csv".to_string()),
            ("top_funders".to_string(), "reports/top_funders.csv".to_string()),
            (
                "entity_theme_spend".to_string(),
                "reports/entity_theme_spend.csv".to_string(),
            ),
            ("theme_tokens".to_string(), "reports/theme_tokens.csv".to_string()),
            (
                "analysis_meta".to_string(),
                "reports/analysis_meta.json".to_string(),
            ),
        ]
        .into(),
        counts: [
            ("labeled".to_string(), meta.n_labeled),
            ("correct_predictions".to_string(), meta.n_correct_predictions),
        ]
        .into(),
    };
    write_manifest(config, &manifest)?;
    log::info!(
        "analyze: {} labeled ads, {} correctly predicted",
        meta.n_labeled,
        meta.n_correct_predictions
    );
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Command-line entry
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(
    name = "adsoup",
    about = "Stance detection and narrative analytics for energy-ad corpora",
    version
)]
pub struct Cli {
    /// Path to the run configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Stage,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Stage {
    /// Validate, keyword-filter, and weak-label the raw corpus.
    Ingest,
    /// Assign funding entities to train/validation/test.
    Split,
    /// Train the contrastive sentence encoder.
    TrainEmbed,
    /// Map every ad to its closest narrative theme.
    AssignThemes,
    /// Fine-tune the stance classifier across the hyperparameter grid.
    Sweep,
    /// Average sweep checkpoints into uniform and greedy soups.
    Soup,
    /// Score every checkpoint, both soups, and the TF-IDF baseline.
    Eval,
    /// Aggregate themes, demographics, geography, funders, and tests.
    Analyze,
}

impl Stage {
    pub fn run(self, config: &RunConfig) -> Result<StageManifest> {
        match self {
            Stage::Ingest => stage_ingest(config),
            Stage::Split => stage_split(config),
            Stage::TrainEmbed => stage_train_embed(config),
            Stage::AssignThemes => stage_assign_themes(config),
            Stage::Sweep => stage_sweep(config),
            Stage::Soup => stage_soup(config),
            Stage::Eval => stage_eval(config),
            Stage::Analyze => stage_analyze(config),
        }
    }
}

/// Parse arguments, run one stage, and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap's rendered message includes --help output; keep its text
            // but own the exit code (1 = usage).
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if is_help { 0 } else { 1 };
        }
    };
    let Some(config_path) = cli.config else {
        eprintln!("usage: a --config file is required");
        return 1;
    };
    let outcome = RunConfig::load(&config_path).and_then(|config| cli.command.run(&config));
    match outcome {
        Ok(manifest) => {
            log::info!("stage `{}` complete", manifest.stage);
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
