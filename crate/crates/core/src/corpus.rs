//! Ad-corpus loading, validation, keyword filtering, weak labeling, and
//! entity-level splits.
//!
//! Supervision is minimal by design: no ad is labeled by hand. Instead a
//! registry maps funding entities to stances, every ad inherits its funder's
//! stance, and train/validation/test splits are made at the **entity** level
//! so no funder's ads ever straddle two splits — the model must generalize to
//! unseen sponsors, not memorize them.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::RegexBuilder;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read `{path}`: {source}")]
    Unreadable {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot write `{path}`: {source}")]
    Unwritable {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed {format} container: {reason}")]
    BadContainer { format: String, reason: String },
    #[error("keyword list is empty")]
    EmptyKeywords,
    #[error("registry entries for `{name}` conflict: {field} differs")]
    RegistryConflict { name: String, field: &'static str },
    #[error("registry row {row}: {reason}")]
    BadRegistryRow { row: usize, reason: String },
    #[error("{got} labeled entities; at least {need} are required to split")]
    TooFewEntities { got: usize, need: usize },
    #[error("split fractions must lie in (0, 1): test={test}, val={val}")]
    BadSplitFractions { test: f64, val: f64 },
    #[error("split produced an empty {0} set; corpus has too few entities for the requested fractions")]
    EmptySplit(&'static str),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// The seven reporting buckets for viewer age.
pub const AGE_BUCKETS: [&str; 7] = ["18-24", "25-34", "35-44", "45-54", "55-64", "65+", "unknown"];

/// Valid keys for the gender share map.
pub const GENDER_KEYS: [&str; 3] = ["male", "female", "unknown"];

/// Tolerance for a share map summing to one.
pub const SHARE_SUM_TOLERANCE: f64 = 1e-3;

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// One advertisement as reported by an ad library export.
///
/// Spend and impressions arrive as ranges; [`AdRecord::spend_mid`] and
/// [`AdRecord::impressions_mid`] collapse them to midpoints for analytics.
/// Share maps describe the viewer distribution over genders, age buckets, and
/// states; each sums to 1 (±1e-3) or is entirely empty when the platform
/// withheld the breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub body: String,
    pub funding_entity: String,
    pub spend_lower: f64,
    pub spend_upper: f64,
    pub impressions_lower: f64,
    pub impressions_upper: f64,
    #[serde(default)]
    pub gender_share: BTreeMap<String, f64>,
    #[serde(default)]
    pub age_share: BTreeMap<String, f64>,
    #[serde(default)]
    pub state_share: BTreeMap<String, f64>,
}

fn share_map_problem(name: &str, map: &BTreeMap<String, f64>, allowed: Option<&[&str]>) -> Option<String> {
    if map.is_empty() {
        return None;
    }
    if let Some(allowed) = allowed {
        for key in map.keys() {
            if !allowed.contains(&key.as_str()) {
                return Some(format!("{name} has unknown bucket `{key}`"));
            }
        }
    }
    for (key, &v) in map {
        if !v.is_finite() || !(0.0..=1.0).contains(&v) {
            return Some(format!("{name}[{key}] = {v} is not a fraction"));
        }
    }
    let sum: f64 = map.values().sum();
    if (sum - 1.0).abs() > SHARE_SUM_TOLERANCE {
        return Some(format!("{name} sums to {sum}, outside 1±{SHARE_SUM_TOLERANCE}"));
    }
    None
}

impl AdRecord {
    /// First invariant violation, if any: non-empty body, ordered non-negative
    /// ranges, and well-formed share maps.
    pub fn problem(&self) -> Option<String> {
        if self.id.trim().is_empty() {
            return Some("empty id".into());
        }
        if self.body.split_whitespace().next().is_none() {
            return Some("empty body".into());
        }
        if self.funding_entity.trim().is_empty() {
            return Some("empty funding_entity".into());
        }
        for (name, lower, upper) in [
            ("spend", self.spend_lower, self.spend_upper),
            ("impressions", self.impressions_lower, self.impressions_upper),
        ] {
            if !lower.is_finite() || !upper.is_finite() {
                return Some(format!("non-finite {name} range"));
            }
            if lower < 0.0 {
                return Some(format!("{name}_lower is negative"));
            }
            if lower > upper {
                return Some(format!("{name}_lower {lower} exceeds {name}_upper {upper}"));
            }
        }
        share_map_problem("gender_share", &self.gender_share, Some(&GENDER_KEYS))
            .or_else(|| share_map_problem("age_share", &self.age_share, Some(&AGE_BUCKETS)))
            .or_else(|| share_map_problem("state_share", &self.state_share, None))
    }

    /// Midpoint of the reported spend range.
    pub fn spend_mid(&self) -> f64 {
        (self.spend_lower + self.spend_upper) / 2.0
    }

    /// Midpoint of the reported impressions range.
    pub fn impressions_mid(&self) -> f64 {
        (self.impressions_lower + self.impressions_upper) / 2.0
    }

    /// Lowercased concatenation of title, description, and body — the text
    /// keyword filtering scans.
    pub fn searchable_text(&self) -> String {
        let mut text = String::new();
        if let Some(t) = &self.title {
            text.push_str(t);
            text.push('\n');
        }
        if let Some(d) = &self.description {
            text.push_str(d);
            text.push('\n');
        }
        text.push_str(&self.body);
        text.to_lowercase()
    }
}

/// The three stances an ad can take.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StanceLabel {
    ProEnergy,
    CleanEnergy,
    Neutral,
}

impl StanceLabel {
    pub const ALL: [StanceLabel; 3] = [
        StanceLabel::ProEnergy,
        StanceLabel::CleanEnergy,
        StanceLabel::Neutral,
    ];

    /// Stable class index used by the classifier head (and probability
    /// column order in prediction files).
    pub fn index(self) -> usize {
        match self {
            StanceLabel::ProEnergy => 0,
            StanceLabel::CleanEnergy => 1,
            StanceLabel::Neutral => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<StanceLabel> {
        StanceLabel::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StanceLabel::ProEnergy => "pro_energy",
            StanceLabel::CleanEnergy => "clean_energy",
            StanceLabel::Neutral => "neutral",
        }
    }

    pub fn parse(s: &str) -> Option<StanceLabel> {
        match s {
            "pro_energy" => Some(StanceLabel::ProEnergy),
            "clean_energy" => Some(StanceLabel::CleanEnergy),
            "neutral" => Some(StanceLabel::Neutral),
            _ => None,
        }
    }
}

impl std::fmt::Display for StanceLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Organizational category of a funding entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityType {
    Corporation,
    IndustryAssociation,
    AdvocacyGroup,
    Other,
}

impl EntityType {
    pub fn as_str(self) -> &'static str {
        match self {
            EntityType::Corporation => "corporation",
            EntityType::IndustryAssociation => "industry_association",
            EntityType::AdvocacyGroup => "advocacy_group",
            EntityType::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Option<EntityType> {
        match s {
            "corporation" => Some(EntityType::Corporation),
            "industry_association" => Some(EntityType::IndustryAssociation),
            "advocacy_group" => Some(EntityType::AdvocacyGroup),
            "other" => Some(EntityType::Other),
            _ => None,
        }
    }
}

/// A known sponsor. `stance: None` means the affiliation is unknown; its ads
/// stay unlabeled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FundingEntity {
    pub name: String,
    pub stance: Option<StanceLabel>,
    pub entity_type: EntityType,
}

/// An ad together with the stance propagated from its funder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledAd {
    #[serde(flatten)]
    pub ad: AdRecord,
    pub stance: StanceLabel,
}

/// Which split an entity (and hence each of its ads) belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Entity-name → split map. Entities, not ads, are the unit of assignment.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub entities: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn split_of(&self, entity: &str) -> Option<Split> {
        self.entities.get(entity).copied()
    }

    pub fn count(&self, split: Split) -> usize {
        self.entities.values().filter(|&&s| s == split).count()
    }

    /// Ads from `labeled` whose funder is assigned to `split`.
    pub fn ads_in<'a>(&self, labeled: &'a [LabeledAd], split: Split) -> Vec<&'a LabeledAd> {
        labeled
            .iter()
            .filter(|ad| self.split_of(&ad.ad.funding_entity) == Some(split))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Ingestion
// ---------------------------------------------------------------------------

/// Why a row was rejected during ingestion.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RowDiagnostic {
    /// 1-based line (JSONL) or record (CSV) number.
    pub row: usize,
    pub reason: String,
}

/// Result of ingesting a corpus file: valid records plus per-row rejections.
#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    pub records: Vec<AdRecord>,
    pub rejected: Vec<RowDiagnostic>,
}

/// Corpus container format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Jsonl,
    Csv,
}

impl CorpusFormat {
    pub fn parse(s: &str) -> Option<CorpusFormat> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" => Some(CorpusFormat::Jsonl),
            "csv" => Some(CorpusFormat::Csv),
            _ => None,
        }
    }

    /// Infer from a file extension; defaults to JSONL for unknown ones.
    pub fn from_path(path: &Path) -> CorpusFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => CorpusFormat::Csv,
            _ => CorpusFormat::Jsonl,
        }
    }
}

/// Load a corpus file. Malformed rows (bad syntax or invariant violations)
/// are rejected individually with diagnostics; only an unreadable or
/// structurally broken container is a hard error.
pub fn ingest(path: &Path, format: CorpusFormat) -> Result<IngestReport> {
    let file = std::fs::File::open(path).map_err(|source| CorpusError::Unreadable {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    match format {
        CorpusFormat::Jsonl => ingest_jsonl(reader),
        CorpusFormat::Csv => ingest_csv(reader),
    }
}

fn push_validated(
    record: AdRecord,
    row: usize,
    seen: &mut BTreeSet<String>,
    report: &mut IngestReport,
) {
    if let Some(reason) = record.problem() {
        report.rejected.push(RowDiagnostic { row, reason });
        return;
    }
    if !seen.insert(record.id.clone()) {
        report.rejected.push(RowDiagnostic {
            row,
            reason: format!("duplicate id `{}`", record.id),
        });
        return;
    }
    report.records.push(record);
}

fn ingest_jsonl(reader: impl BufRead) -> Result<IngestReport> {
    let mut report = IngestReport::default();
    let mut seen = BTreeSet::new();
    for (i, line) in reader.lines().enumerate() {
        let row = i + 1;
        let line = line.map_err(|e| CorpusError::BadContainer {
            format: "jsonl".into(),
            reason: format!("line {row}: {e}"),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<AdRecord>(&line) {
            Ok(record) => push_validated(record, row, &mut seen, &mut report),
            Err(e) => report.rejected.push(RowDiagnostic {
                row,
                reason: format!("parse error: {e}"),
            }),
        }
    }
    Ok(report)
}

/// CSV column order for [`write_csv`]; `ingest` accepts any column order as
/// long as the headers match. The three share columns hold JSON objects
/// (empty cell = missing data).
pub const CSV_HEADERS: [&str; 12] = [
    "id",
    "title",
    "description",
    "body",
    "funding_entity",
    "spend_lower",
    "spend_upper",
    "impressions_lower",
    "impressions_upper",
    "gender_share",
    "age_share",
    "state_share",
];

fn ingest_csv(reader: impl std::io::Read) -> Result<IngestReport> {
    let mut csv_reader = csv::ReaderBuilder::new().from_reader(reader);
    let headers = csv_reader
        .headers()
        .map_err(|e| CorpusError::BadContainer {
            format: "csv".into(),
            reason: e.to_string(),
        })?
        .clone();
    let index_of = |name: &str| headers.iter().position(|h| h == name);
    let mut columns = BTreeMap::new();
    for name in CSV_HEADERS {
        match index_of(name) {
            Some(i) => {
                columns.insert(name, i);
            }
            None if name == "title" || name == "description" => {}
            None => {
                return Err(CorpusError::BadContainer {
                    format: "csv".into(),
                    reason: format!("missing column `{name}`"),
                });
            }
        }
    }
    let mut report = IngestReport::default();
    let mut seen = BTreeSet::new();
    for (i, row_result) in csv_reader.records().enumerate() {
        let row = i + 1;
        let record = match row_result {
            Ok(r) => r,
            Err(e) => {
                report.rejected.push(RowDiagnostic {
                    row,
                    reason: format!("parse error: {e}"),
                });
                continue;
            }
        };
        match csv_row_to_record(&record, &columns) {
            Ok(ad) => push_validated(ad, row, &mut seen, &mut report),
            Err(reason) => report.rejected.push(RowDiagnostic { row, reason }),
        }
    }
    Ok(report)
}

fn csv_row_to_record(
    record: &csv::StringRecord,
    columns: &BTreeMap<&str, usize>,
) -> std::result::Result<AdRecord, String> {
    let cell = |name: &str| -> &str {
        columns
            .get(name)
            .and_then(|&i| record.get(i))
            .unwrap_or("")
    };
    let optional = |name: &str| -> Option<String> {
        let v = cell(name);
        if v.is_empty() {
            None
        } else {
            Some(v.to_string())
        }
    };
    let number = |name: &str| -> std::result::Result<f64, String> {
        cell(name)
            .trim()
            .parse::<f64>()
            .map_err(|_| format!("column `{name}`: `{}` is not a number", cell(name)))
    };
    let share = |name: &str| -> std::result::Result<BTreeMap<String, f64>, String> {
        let v = cell(name).trim();
        if v.is_empty() {
            return Ok(BTreeMap::new());
        }
        serde_json::from_str(v).map_err(|e| format!("column `{name}`: {e}"))
    };
    Ok(AdRecord {
        id: cell("id").to_string(),
        title: optional("title"),
        description: optional("description"),
        body: cell("body").to_string(),
        funding_entity: cell("funding_entity").to_string(),
        spend_lower: number("spend_lower")?,
        spend_upper: number("spend_upper")?,
        impressions_lower: number("impressions_lower")?,
        impressions_upper: number("impressions_upper")?,
        gender_share: share("gender_share")?,
        age_share: share("age_share")?,
        state_share: share("state_share")?,
    })
}

/// Write records as JSONL — the inverse of JSONL ingestion.
pub fn write_jsonl(records: &[AdRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| CorpusError::Unwritable {
        path: path.display().to_string(),
        source,
    })
}

/// Write records as CSV with [`CSV_HEADERS`], share maps as JSON cells.
pub fn write_csv(records: &[AdRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|source| CorpusError::Unwritable {
        path: path.display().to_string(),
        source,
    })?;
    let mut writer = csv::Writer::from_writer(file);
    let to_io = |e: csv::Error| CorpusError::BadContainer {
        format: "csv".into(),
        reason: e.to_string(),
    };
    writer.write_record(CSV_HEADERS).map_err(to_io)?;
    for r in records {
        let share = |m: &BTreeMap<String, f64>| -> Result<String> {
            if m.is_empty() {
                Ok(String::new())
            } else {
                Ok(serde_json::to_string(m)?)
            }
        };
        writer
            .write_record([
                r.id.as_str(),
                r.title.as_deref().unwrap_or(""),
                r.description.as_deref().unwrap_or(""),
                r.body.as_str(),
                r.funding_entity.as_str(),
                &r.spend_lower.to_string(),
                &r.spend_upper.to_string(),
                &r.impressions_lower.to_string(),
                &r.impressions_upper.to_string(),
                &share(&r.gender_share)?,
                &share(&r.age_share)?,
                &share(&r.state_share)?,
            ])
            .map_err(to_io)?;
    }
    writer.flush().map_err(|source| CorpusError::Unwritable {
        path: path.display().to_string(),
        source,
    })?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Keyword filtering
// ---------------------------------------------------------------------------

/// The keyword list shipped with the crate (one phrase per line).
pub fn default_keywords() -> Vec<String> {
    include_str!("../../../data/keywords.txt")
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

/// Retain ads whose title, description, or body contains at least one keyword
/// as a whole word (case-insensitive). Multi-word keywords match as phrases.
pub fn filter_keywords(corpus: &[AdRecord], keywords: &[String]) -> Result<Vec<AdRecord>> {
    if keywords.is_empty() {
        return Err(CorpusError::EmptyKeywords);
    }
    let alternation = keywords
        .iter()
        .map(|k| regex::escape(&k.to_lowercase()))
        .collect::<Vec<_>>()
        .join("|");
    let pattern = RegexBuilder::new(&format!(r"\b(?:{alternation})\b"))
        .build()
        .expect("escaped keyword alternation is a valid pattern");
    Ok(corpus
        .iter()
        .filter(|ad| pattern.is_match(&ad.searchable_text()))
        .cloned()
        .collect())
}

// ---------------------------------------------------------------------------
// Registry and stance propagation
// ---------------------------------------------------------------------------

/// A validated set of funding entities, keyed by exact name.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    entities: BTreeMap<String, FundingEntity>,
}

impl Registry {
    /// Build from rows, rejecting any name that appears with a conflicting
    /// stance or entity type. Exact duplicate rows are tolerated.
    pub fn from_entities(rows: Vec<FundingEntity>) -> Result<Registry> {
        let mut entities: BTreeMap<String, FundingEntity> = BTreeMap::new();
        for row in rows {
            if let Some(existing) = entities.get(&row.name) {
                if existing.stance != row.stance {
                    return Err(CorpusError::RegistryConflict {
                        name: row.name,
                        field: "stance",
                    });
                }
                if existing.entity_type != row.entity_type {
                    return Err(CorpusError::RegistryConflict {
                        name: row.name,
                        field: "entity_type",
                    });
                }
            } else {
                entities.insert(row.name.clone(), row);
            }
        }
        Ok(Registry { entities })
    }

    /// Load from CSV with columns `name,stance,entity_type`, where stance is
    /// one of pro_energy/clean_energy/neutral/unknown.
    pub fn load_csv(path: &Path) -> Result<Registry> {
        let file = std::fs::File::open(path).map_err(|source| CorpusError::Unreadable {
            path: path.display().to_string(),
            source,
        })?;
        let mut reader = csv::ReaderBuilder::new().from_reader(BufReader::new(file));
        let headers = reader
            .headers()
            .map_err(|e| CorpusError::BadContainer {
                format: "registry csv".into(),
                reason: e.to_string(),
            })?
            .clone();
        let col = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| CorpusError::BadContainer {
                    format: "registry csv".into(),
                    reason: format!("missing column `{name}`"),
                })
        };
        let (name_col, stance_col, type_col) = (col("name")?, col("stance")?, col("entity_type")?);
        let mut rows = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let row = i + 1;
            let record = record.map_err(|e| CorpusError::BadRegistryRow {
                row,
                reason: e.to_string(),
            })?;
            let get = |c: usize| record.get(c).unwrap_or("").trim();
            let name = get(name_col);
            if name.is_empty() {
                return Err(CorpusError::BadRegistryRow {
                    row,
                    reason: "empty name".into(),
                });
            }
            let stance = match get(stance_col) {
                "unknown" => None,
                s => Some(StanceLabel::parse(s).ok_or_else(|| CorpusError::BadRegistryRow {
                    row,
                    reason: format!("unknown stance `{s}`"),
                })?),
            };
            let entity_type =
                EntityType::parse(get(type_col)).ok_or_else(|| CorpusError::BadRegistryRow {
                    row,
                    reason: format!("unknown entity_type `{}`", get(type_col)),
                })?;
            rows.push(FundingEntity {
                name: name.to_string(),
                stance,
                entity_type,
            });
        }
        Registry::from_entities(rows)
    }

    /// Write as CSV with columns `name,stance,entity_type`; an absent stance
    /// serializes as `unknown`. Rows are in name order, so the bytes are a
    /// pure function of the registry contents.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("name,stance,entity_type\n");
        for entity in self.entities.values() {
            let stance = entity.stance.map_or("unknown", StanceLabel::as_str);
            let name = if entity.name.contains([',', '"', '\n']) {
                format!("\"{}\"", entity.name.replace('"', "\"\""))
            } else {
                entity.name.clone()
            };
            out.push_str(&format!(
                "{name},{stance},{}\n",
                entity.entity_type.as_str()
            ));
        }
        std::fs::write(path, out).map_err(|source| CorpusError::Unwritable {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn get(&self, name: &str) -> Option<&FundingEntity> {
        self.entities.get(name)
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &FundingEntity> {
        self.entities.values()
    }
}

/// Attach each ad's funder stance. Ads whose funder is missing from the
/// registry — or registered with unknown stance — come back in the second,
/// unlabeled partition (they still feed unsupervised training pools).
pub fn propagate_stance(
    corpus: &[AdRecord],
    registry: &Registry,
) -> (Vec<LabeledAd>, Vec<AdRecord>) {
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for ad in corpus {
        match registry.get(&ad.funding_entity).and_then(|e| e.stance) {
            Some(stance) => labeled.push(LabeledAd {
                ad: ad.clone(),
                stance,
            }),
            None => unlabeled.push(ad.clone()),
        }
    }
    (labeled, unlabeled)
}

// ---------------------------------------------------------------------------
// Entity-level splits
// ---------------------------------------------------------------------------

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Split the labeled entities into train/validation/test.
///
/// The test set takes `round(test_frac · E)` entities; validation takes
/// `round(val_frac · remainder)`; the rest train. Rounding is half-up, and
/// the shuffle is fully determined by `seed`, so a rerun reproduces the
/// assignment exactly.
pub fn split_by_entity(
    labeled: &[LabeledAd],
    seed: u64,
    test_frac: f64,
    val_frac: f64,
) -> Result<SplitAssignment> {
    if !(0.0 < test_frac && test_frac < 1.0 && 0.0 < val_frac && val_frac < 1.0) {
        return Err(CorpusError::BadSplitFractions {
            test: test_frac,
            val: val_frac,
        });
    }
    let mut entities: Vec<&str> = labeled
        .iter()
        .map(|ad| ad.ad.funding_entity.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let e = entities.len();
    if e < 5 {
        return Err(CorpusError::TooFewEntities { got: e, need: 5 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    entities.shuffle(&mut rng);
    let test_n = round_half_up(test_frac * e as f64);
    let remainder = e - test_n;
    let val_n = round_half_up(val_frac * remainder as f64);
    let train_n = remainder.saturating_sub(val_n);
    if test_n == 0 {
        return Err(CorpusError::EmptySplit("test"));
    }
    if val_n == 0 {
        return Err(CorpusError::EmptySplit("val"));
    }
    if train_n == 0 || test_n + val_n >= e {
        return Err(CorpusError::EmptySplit("train"));
    }
    let mut assignment = SplitAssignment::default();
    for (i, name) in entities.iter().enumerate() {
        let split = if i < test_n {
            Split::Test
        } else if i < test_n + val_n {
            Split::Val
        } else {
            Split::Train
        };
        assignment.entities.insert(name.to_string(), split);
    }
    Ok(assignment)
}

/// Write a split assignment as pretty JSON.
pub fn write_split(assignment: &SplitAssignment, path: &Path) -> Result<()> {
    let mut json = serde_json::to_string_pretty(assignment)?;
    json.push('\n');
    std::fs::write(path, json).map_err(|source| CorpusError::Unwritable {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn sample_ad(id: &str, funder: &str, body: &str) -> AdRecord {
        AdRecord {
            id: id.to_string(),
            title: None,
            description: None,
            body: body.to_string(),
            funding_entity: funder.to_string(),
            spend_lower: 100.0,
            spend_upper: 199.0,
            impressions_lower: 1000.0,
            impressions_upper: 1999.0,
            gender_share: BTreeMap::new(),
            age_share: BTreeMap::new(),
            state_share: BTreeMap::new(),
        }
    }

    fn jsonl_of(records: &[AdRecord]) -> String {
        records
            .iter()
            .map(|r| serde_json::to_string(r).unwrap())
            .collect::<Vec<_>>()
            .join("\n")
    }

    #[test]
    fn ingest_well_formed_jsonl() {
        let records = vec![
            sample_ad("a1", "ACME ENERGY", "drill for oil"),
            sample_ad("a2", "SUN CLUB", "solar now"),
            sample_ad("a3", "WIND ORG", "wind power"),
        ];
        let report = ingest_jsonl(jsonl_of(&records).as_bytes()).unwrap();
        assert_eq!(report.records, records);
        assert!(report.rejected.is_empty());
    }

    #[test]
    fn ingest_rejects_share_sum_violation() {
        let mut ad = sample_ad("a1", "ACME", "oil");
        ad.gender_share = [("male", 0.5), ("female", 0.4), ("unknown", 0.0)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let report = ingest_jsonl(jsonl_of(&[ad]).as_bytes()).unwrap();
        assert!(report.records.is_empty());
        assert_eq!(report.rejected.len(), 1);
        assert!(report.rejected[0].reason.contains("gender_share sums to 0.9"));
    }

    #[test]
    fn ingest_rejects_empty_body_with_diagnostic() {
        let ad = sample_ad("a1", "ACME", "   ");
        let report = ingest_jsonl(jsonl_of(&[ad]).as_bytes()).unwrap();
        assert!(report.records.is_empty());
        assert_eq!(report.rejected[0].reason, "empty body");
        assert_eq!(report.rejected[0].row, 1);
    }

    #[test]
    fn ingest_rejects_duplicate_ids_and_bad_json() {
        let a = sample_ad("a1", "ACME", "oil");
        let input = format!(
            "{}\n{}\nnot json\n",
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&a).unwrap()
        );
        let report = ingest_jsonl(input.as_bytes()).unwrap();
        assert_eq!(report.records.len(), 1);
        assert_eq!(report.rejected.len(), 2);
        assert!(report.rejected[0].reason.contains("duplicate id"));
        assert!(report.rejected[1].reason.contains("parse error"));
    }

    #[test]
    fn ingest_rejects_inverted_ranges_and_bad_buckets() {
        let mut a = sample_ad("a1", "ACME", "oil");
        a.spend_lower = 200.0;
        a.spend_upper = 100.0;
        let mut b = sample_ad("a2", "ACME", "oil");
        b.age_share = [("12-17".to_string(), 1.0)].into_iter().collect();
        let report = ingest_jsonl(jsonl_of(&[a, b]).as_bytes()).unwrap();
        assert!(report.records.is_empty());
        assert!(report.rejected[0].reason.contains("spend_lower"));
        assert!(report.rejected[1].reason.contains("unknown bucket `12-17`"));
    }

    #[test]
    fn csv_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut ad = sample_ad("a1", "ACME, INC.", "oil and gas,\n\"quoted\" body");
        ad.title = Some("Big Title".into());
        ad.gender_share = [("male".to_string(), 0.25), ("female".to_string(), 0.75)]
            .into_iter()
            .collect();
        let path = dir.path().join("corpus.csv");
        write_csv(&[ad.clone()], &path).unwrap();
        let report = ingest(&path, CorpusFormat::Csv).unwrap();
        assert!(report.rejected.is_empty());
        assert_eq!(report.records, vec![ad]);
    }

    #[test]
    fn csv_missing_required_column_is_container_error() {
        let report = ingest_csv("id,body\n1,hello\n".as_bytes());
        assert!(matches!(report, Err(CorpusError::BadContainer { .. })));
    }

    #[test]
    fn keyword_filter_matches_whole_words_case_insensitively() {
        let keywords: Vec<String> = vec!["energy".into(), "greenhouse".into()];
        let corpus = vec![
            sample_ad("a1", "X", "Stand up for American energy"),
            sample_ad("a2", "X", "bake sale friday"),
            sample_ad("a3", "X", "Greenhouse gases rise"),
            sample_ad("a4", "X", "an energetic debate"),
        ];
        let kept = filter_keywords(&corpus, &keywords).unwrap();
        let ids: Vec<&str> = kept.iter().map(|a| a.id.as_str()).collect();
        // "energetic" must not match "energy": whole words only.
        assert_eq!(ids, vec!["a1", "a3"]);
    }

    #[test]
    fn keyword_filter_scans_title_and_description_and_phrases() {
        let mut a = sample_ad("a1", "X", "call now");
        a.title = Some("Clean Energy Future".into());
        let mut b = sample_ad("a2", "X", "call now");
        b.description = Some("about global warming".into());
        let c = sample_ad("a3", "X", "solar-powered homes");
        let keywords: Vec<String> =
            vec!["clean energy".into(), "global warming".into(), "solar".into()];
        let kept = filter_keywords(&[a, b, c], &keywords).unwrap();
        assert_eq!(kept.len(), 3);
        assert!(matches!(
            filter_keywords(&[], &[]),
            Err(CorpusError::EmptyKeywords)
        ));
    }

    #[test]
    fn default_keyword_list_is_complete() {
        let kw = default_keywords();
        assert_eq!(kw.len(), 41);
        assert!(kw.contains(&"tri-city".to_string()));
        assert!(kw.contains(&"clean energy".to_string()));
    }

    #[test]
    fn propagate_stance_labels_by_funder() {
        let registry = Registry::from_entities(vec![
            FundingEntity {
                name: "EXXON MOBIL CORPORATION".into(),
                stance: Some(StanceLabel::ProEnergy),
                entity_type: EntityType::Corporation,
            },
            FundingEntity {
                name: "MYSTERY PAC".into(),
                stance: None,
                entity_type: EntityType::Other,
            },
        ])
        .unwrap();
        let corpus = vec![
            sample_ad("a1", "EXXON MOBIL CORPORATION", "oil"),
            sample_ad("a2", "EXXON MOBIL CORPORATION", "gas"),
            sample_ad("a3", "SOMEBODY ELSE", "coal"),
            sample_ad("a4", "MYSTERY PAC", "energy"),
        ];
        let (labeled, unlabeled) = propagate_stance(&corpus, &registry);
        assert_eq!(labeled.len(), 2);
        assert!(labeled.iter().all(|l| l.stance == StanceLabel::ProEnergy));
        let ids: Vec<&str> = unlabeled.iter().map(|a| a.id.as_str()).collect();
        assert_eq!(ids, vec!["a3", "a4"]);
    }

    #[test]
    fn registry_rejects_conflicting_duplicates() {
        let conflict = Registry::from_entities(vec![
            FundingEntity {
                name: "X".into(),
                stance: Some(StanceLabel::ProEnergy),
                entity_type: EntityType::Corporation,
            },
            FundingEntity {
                name: "X".into(),
                stance: Some(StanceLabel::CleanEnergy),
                entity_type: EntityType::Corporation,
            },
        ]);
        assert!(matches!(
            conflict,
            Err(CorpusError::RegistryConflict { field: "stance", .. })
        ));
        // Exact duplicates are tolerated.
        let dup = Registry::from_entities(vec![
            FundingEntity {
                name: "X".into(),
                stance: Some(StanceLabel::ProEnergy),
                entity_type: EntityType::Corporation,
            };
            2
        ])
        .unwrap();
        assert_eq!(dup.len(), 1);
    }

    #[test]
    fn registry_csv_parses_stances_and_types() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("registry.csv");
        std::fs::write(
            &path,
            "name,stance,entity_type\n\
             EXXON MOBIL CORPORATION,pro_energy,corporation\n\
             SIERRA CLUB,clean_energy,advocacy_group\n\
             LOCAL NEWS,neutral,other\n\
             WHO KNOWS,unknown,industry_association\n",
        )
        .unwrap();
        let registry = Registry::load_csv(&path).unwrap();
        assert_eq!(registry.len(), 4);
        assert_eq!(
            registry.get("EXXON MOBIL CORPORATION").unwrap().stance,
            Some(StanceLabel::ProEnergy)
        );
        assert_eq!(registry.get("WHO KNOWS").unwrap().stance, None);
        assert_eq!(
            registry.get("SIERRA CLUB").unwrap().entity_type,
            EntityType::AdvocacyGroup
        );
    }

    fn labeled_corpus_of(entities: usize, ads_per: usize) -> Vec<LabeledAd> {
        let mut out = Vec::new();
        for e in 0..entities {
            for a in 0..ads_per {
                out.push(LabeledAd {
                    ad: sample_ad(&format!("e{e}a{a}"), &format!("ENTITY {e}"), "energy"),
                    stance: StanceLabel::ALL[e % 3],
                });
            }
        }
        out
    }

    #[test]
    fn split_ten_entities_is_2_2_6_and_deterministic() {
        let labeled = labeled_corpus_of(10, 3);
        let split = split_by_entity(&labeled, 99, 0.2, 0.2).unwrap();
        assert_eq!(split.count(Split::Test), 2);
        assert_eq!(split.count(Split::Val), 2);
        assert_eq!(split.count(Split::Train), 6);
        let again = split_by_entity(&labeled, 99, 0.2, 0.2).unwrap();
        assert_eq!(
            serde_json::to_string(&split).unwrap(),
            serde_json::to_string(&again).unwrap()
        );
        let different = split_by_entity(&labeled, 100, 0.2, 0.2).unwrap();
        assert_ne!(split, different);
    }

    #[test]
    fn split_assigns_every_ad_of_an_entity_together() {
        let labeled = labeled_corpus_of(12, 4);
        let split = split_by_entity(&labeled, 7, 0.2, 0.2).unwrap();
        for ad in &labeled {
            let s = split.split_of(&ad.ad.funding_entity);
            assert!(s.is_some());
        }
        let test_ads = split.ads_in(&labeled, Split::Test);
        for ad in test_ads {
            assert_eq!(split.split_of(&ad.ad.funding_entity), Some(Split::Test));
        }
    }

    #[test]
    fn split_rejects_degenerate_inputs() {
        let labeled = labeled_corpus_of(4, 2);
        assert!(matches!(
            split_by_entity(&labeled, 0, 0.2, 0.2),
            Err(CorpusError::TooFewEntities { got: 4, .. })
        ));
        let ok = labeled_corpus_of(6, 1);
        assert!(matches!(
            split_by_entity(&ok, 0, 1.5, 0.2),
            Err(CorpusError::BadSplitFractions { .. })
        ));
    }

    proptest! {
        #[test]
        fn jsonl_round_trip_is_exact(
            n in 1usize..8,
            seed in 0u64..500,
            with_desc in proptest::bool::ANY,
        ) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut records = Vec::new();
            for i in 0..n {
                let mut ad = sample_ad(
                    &format!("id-{i}"),
                    &format!("FUNDER {}", rng.random_range(0..4)),
                    &format!("body text {} — naïve café", rng.random_range(0..100)),
                );
                if with_desc {
                    ad.description = Some(format!("desc {i}"));
                }
                ad.state_share = [("TX".to_string(), 0.5), ("CA".to_string(), 0.5)]
                    .into_iter()
                    .collect();
                records.push(ad);
            }
            let report = ingest_jsonl(jsonl_of(&records).as_bytes()).unwrap();
            prop_assert!(report.rejected.is_empty());
            prop_assert_eq!(report.records, records);
        }

        #[test]
        fn keyword_filter_is_idempotent_and_non_increasing(seed in 0u64..500) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bodies = [
                "clean energy now",
                "buy our socks",
                "the coal industry",
                "weather report",
                "solar is the future",
            ];
            let corpus: Vec<AdRecord> = (0..10)
                .map(|i| sample_ad(&format!("a{i}"), "X", bodies[rng.random_range(0..bodies.len())]))
                .collect();
            let keywords = default_keywords();
            let once = filter_keywords(&corpus, &keywords).unwrap();
            prop_assert!(once.len() <= corpus.len());
            let twice = filter_keywords(&once, &keywords).unwrap();
            prop_assert_eq!(&once, &twice);
        }

        #[test]
        fn splits_are_entity_disjoint(seed in 0u64..200, entities in 5usize..40) {
            let labeled = labeled_corpus_of(entities, 2);
            let split = split_by_entity(&labeled, seed, 0.2, 0.2).unwrap();
            let count = |s| split.count(s);
            prop_assert_eq!(
                count(Split::Train) + count(Split::Val) + count(Split::Test),
                entities
            );
            // Each entity appears exactly once in the map, so disjointness is
            // structural; verify via the ad view as well.
            let train: BTreeSet<&str> = split.ads_in(&labeled, Split::Train)
                .iter().map(|a| a.ad.funding_entity.as_str()).collect();
            let val: BTreeSet<&str> = split.ads_in(&labeled, Split::Val)
                .iter().map(|a| a.ad.funding_entity.as_str()).collect();
            let test: BTreeSet<&str> = split.ads_in(&labeled, Split::Test)
                .iter().map(|a| a.ad.funding_entity.as_str()).collect();
            prop_assert!(train.is_disjoint(&val));
            prop_assert!(train.is_disjoint(&test));
            prop_assert!(val.is_disjoint(&test));
        }
    }
}
