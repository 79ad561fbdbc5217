//! Plot-ready aggregations over classified ads.
//!
//! Turns a labeled corpus plus predictions and theme assignments into the
//! tabular views downstream dashboards need: theme distributions under
//! several weighting schemes, demographic and geographic impression
//! distributions, top funders by expenditure, a theme × entity-type spend
//! matrix for the pro-energy side, and contingency tables feeding the
//! chi-square independence test. Everything is a pure, deterministic fold;
//! outputs carry explicit shares so consumers never re-normalize.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use thiserror::Error;

use crate::corpus::{EntityType, LabeledAd, Registry, StanceLabel, AGE_BUCKETS, GENDER_KEYS};
use crate::metrics::{ContingencyTable, MetricsError};
use crate::stance::StancePrediction;

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("ad `{0}` has no prediction")]
    MissingPrediction(String),
    #[error("contingency table is degenerate after dropping empty buckets: {0}")]
    DegenerateTable(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AnalyticsError>;

/// How an ad is weighted inside an aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    AdCount,
    ImpressionsMid,
    SpendMid,
}

impl WeightKind {
    pub const ALL: [WeightKind; 3] = [
        WeightKind::AdCount,
        WeightKind::ImpressionsMid,
        WeightKind::SpendMid,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            WeightKind::AdCount => "ad_count",
            WeightKind::ImpressionsMid => "impressions_mid",
            WeightKind::SpendMid => "spend_mid",
        }
    }

    pub fn parse(s: &str) -> Option<WeightKind> {
        match s {
            "ad_count" => Some(WeightKind::AdCount),
            "impressions_mid" => Some(WeightKind::ImpressionsMid),
            "spend_mid" => Some(WeightKind::SpendMid),
            _ => None,
        }
    }

    fn of(self, ad: &crate::corpus::AdRecord) -> f64 {
        match self {
            WeightKind::AdCount => 1.0,
            WeightKind::ImpressionsMid => ad.impressions_mid(),
            WeightKind::SpendMid => ad.spend_mid(),
        }
    }
}

/// One aggregated cell: a group's raw weight and its share of the stance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub stance: StanceLabel,
    pub group: String,
    pub weight_kind: WeightKind,
    pub value: f64,
    /// `value` divided by the stance's total — rows of one stance and weight
    /// kind sum to 1.
    pub share: f64,
}

/// Aggregation output plus how many ads were excluded (missing theme,
/// empty share map, unregistered funder — whatever the op requires).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub rows: Vec<AggregateRow>,
    pub excluded: usize,
}

/// Keep only ads whose predicted stance matches their label. Every ad must
/// have a prediction.
pub fn filter_correct(
    ads: &[LabeledAd],
    predictions: &[StancePrediction],
) -> Result<Vec<LabeledAd>> {
    let by_id: BTreeMap<&str, StanceLabel> = predictions
        .iter()
        .map(|p| (p.ad_id.as_str(), p.label))
        .collect();
    let mut kept = Vec::new();
    for labeled in ads {
        let predicted = by_id
            .get(labeled.ad.id.as_str())
            .ok_or_else(|| AnalyticsError::MissingPrediction(labeled.ad.id.clone()))?;
        if *predicted == labeled.stance {
            kept.push(labeled.clone());
        }
    }
    Ok(kept)
}

/// Canonical fold order: ads sorted by id, so aggregated floats are
/// bitwise-identical no matter how the input slice is ordered.
fn in_id_order(ads: &[LabeledAd]) -> Vec<&LabeledAd> {
    let mut order: Vec<&LabeledAd> = ads.iter().collect();
    order.sort_by(|a, b| a.ad.id.cmp(&b.ad.id));
    order
}

/// Sort rows deterministically: stance order, then descending value, then
/// group name.
fn sort_rows(rows: &mut [AggregateRow]) {
    rows.sort_by(|a, b| {
        a.stance
            .index()
            .cmp(&b.stance.index())
            .then_with(|| b.value.partial_cmp(&a.value).unwrap())
            .then_with(|| a.group.cmp(&b.group))
    });
}

fn rows_from_groups(
    groups: BTreeMap<(StanceLabel, String), f64>,
    weight_kind: WeightKind,
) -> Vec<AggregateRow> {
    let mut stance_totals: BTreeMap<usize, f64> = BTreeMap::new();
    for ((stance, _), &value) in &groups {
        *stance_totals.entry(stance.index()).or_insert(0.0) += value;
    }
    let mut rows: Vec<AggregateRow> = groups
        .into_iter()
        .filter_map(|((stance, group), value)| {
            let total = stance_totals[&stance.index()];
            if total <= 0.0 {
                return None;
            }
            Some(AggregateRow {
                stance,
                group,
                weight_kind,
                value,
                share: value / total,
            })
        })
        .collect();
    sort_rows(&mut rows);
    rows
}

/// Per-stance theme distribution under the chosen weight. Ads without a
/// theme assignment are excluded and counted.
pub fn theme_distribution(
    ads: &[LabeledAd],
    themes: &BTreeMap<String, String>,
    weight_kind: WeightKind,
) -> Distribution {
    let mut groups: BTreeMap<(StanceLabel, String), f64> = BTreeMap::new();
    let mut excluded = 0;
    for labeled in in_id_order(ads) {
        let Some(theme_id) = themes.get(&labeled.ad.id) else {
            excluded += 1;
            continue;
        };
        *groups
            .entry((labeled.stance, theme_id.clone()))
            .or_insert(0.0) += weight_kind.of(&labeled.ad);
    }
    Distribution {
        rows: rows_from_groups(groups, weight_kind),
        excluded,
    }
}

/// Which demographic share map an aggregation reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoAxis {
    Gender,
    Age,
}

impl DemoAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            DemoAxis::Gender => "gender",
            DemoAxis::Age => "age",
        }
    }

    fn shares(self, ad: &crate::corpus::AdRecord) -> &BTreeMap<String, f64> {
        match self {
            DemoAxis::Gender => &ad.gender_share,
            DemoAxis::Age => &ad.age_share,
        }
    }
}

fn share_weighted_distribution(
    ads: &[LabeledAd],
    shares_of: impl Fn(&crate::corpus::AdRecord) -> &BTreeMap<String, f64>,
) -> Distribution {
    let mut groups: BTreeMap<(StanceLabel, String), f64> = BTreeMap::new();
    let mut excluded = 0;
    for labeled in in_id_order(ads) {
        let shares = shares_of(&labeled.ad);
        if shares.is_empty() {
            excluded += 1;
            continue;
        }
        let impressions = labeled.ad.impressions_mid();
        for (bucket, &fraction) in shares {
            *groups
                .entry((labeled.stance, bucket.clone()))
                .or_insert(0.0) += impressions * fraction;
        }
    }
    Distribution {
        rows: rows_from_groups(groups, WeightKind::ImpressionsMid),
        excluded,
    }
}

/// Impression-weighted demographic distribution: bucket weight is
/// Σ impressions_mid · share. Ads with an empty share map are excluded and
/// counted.
pub fn demo_distribution(ads: &[LabeledAd], axis: DemoAxis) -> Distribution {
    share_weighted_distribution(ads, move |ad| axis.shares(ad))
}

/// Impression-weighted state distribution (same arithmetic over the state
/// share map).
pub fn geo_distribution(ads: &[LabeledAd]) -> Distribution {
    share_weighted_distribution(ads, |ad| &ad.state_share)
}

/// Top funders per stance by the chosen weight: descending value, ties by
/// funder name, truncated to `n` per stance. Shares are computed against the
/// stance total over all funders (not just the kept ones).
pub fn top_funders(ads: &[LabeledAd], n: usize, by: WeightKind) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(StanceLabel, String), f64> = BTreeMap::new();
    for labeled in in_id_order(ads) {
        *groups
            .entry((labeled.stance, labeled.ad.funding_entity.clone()))
            .or_insert(0.0) += by.of(&labeled.ad);
    }
    let all_rows = rows_from_groups(groups, by);
    let mut kept = Vec::new();
    for stance in StanceLabel::ALL {
        kept.extend(
            all_rows
                .iter()
                .filter(|r| r.stance == stance)
                .take(n)
                .cloned(),
        );
    }
    kept
}

/// One cell of the pro-energy theme × entity-type spend matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThemeTypeCell {
    pub theme_id: String,
    pub entity_type: EntityType,
    pub spend: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThemeTypeMatrix {
    pub cells: Vec<ThemeTypeCell>,
    /// Pro-energy ads skipped for missing theme or unregistered funder.
    pub excluded: usize,
}

/// Sum spend over pro-energy ads, grouped by assigned theme and the funder's
/// registered entity type. Cells are ordered by (theme id, entity type).
pub fn entity_type_theme_spend(
    ads: &[LabeledAd],
    themes: &BTreeMap<String, String>,
    registry: &Registry,
) -> ThemeTypeMatrix {
    let mut groups: BTreeMap<(String, EntityType), f64> = BTreeMap::new();
    let mut excluded = 0;
    for labeled in in_id_order(ads) {
        if labeled.stance != StanceLabel::ProEnergy {
            continue;
        }
        let theme = themes.get(&labeled.ad.id);
        let entity = registry.get(&labeled.ad.funding_entity);
        let (Some(theme_id), Some(entity)) = (theme, entity) else {
            excluded += 1;
            continue;
        };
        *groups
            .entry((theme_id.clone(), entity.entity_type))
            .or_insert(0.0) += labeled.ad.spend_mid();
    }
    let cells = groups
        .into_iter()
        .map(|((theme_id, entity_type), spend)| ThemeTypeCell {
            theme_id,
            entity_type,
            spend,
        })
        .collect();
    ThemeTypeMatrix { cells, excluded }
}

/// Most frequent body tokens per theme over the given ads — the tabular
/// stand-in for per-theme wordclouds. Ties break lexicographically.
pub fn theme_token_frequencies(
    ads: &[LabeledAd],
    themes: &BTreeMap<String, String>,
    top_k: usize,
) -> BTreeMap<String, Vec<(String, u64)>> {
    let mut counts: BTreeMap<String, BTreeMap<String, u64>> = BTreeMap::new();
    for labeled in ads {
        let Some(theme_id) = themes.get(&labeled.ad.id) else {
            continue;
        };
        let theme_counts = counts.entry(theme_id.clone()).or_default();
        for token in crate::embedder::tokenize(&labeled.ad.body) {
            *theme_counts.entry(token).or_insert(0) += 1;
        }
    }
    counts
        .into_iter()
        .map(|(theme_id, tokens)| {
            let mut ranked: Vec<(String, u64)> = tokens.into_iter().collect();
            ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            ranked.truncate(top_k);
            (theme_id, ranked)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Contingency tables for the independence test
// ---------------------------------------------------------------------------

/// How contingency counts are weighted: each ad contributes its share
/// fractions either once (`AdCount`) or scaled by midpoint impressions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContingencyWeight {
    AdCount,
    ImpressionsMid,
}

impl ContingencyWeight {
    pub fn as_str(self) -> &'static str {
        match self {
            ContingencyWeight::AdCount => "ad_count",
            ContingencyWeight::ImpressionsMid => "impressions_mid",
        }
    }

    pub fn parse(s: &str) -> Option<ContingencyWeight> {
        match s {
            "ad_count" => Some(ContingencyWeight::AdCount),
            "impressions_mid" => Some(ContingencyWeight::ImpressionsMid),
            _ => None,
        }
    }
}

/// Build a demographic-bucket × stance table over the pro- and clean-energy
/// ads (the two sides the debate is between; neutral ads are skipped).
/// Buckets with an all-zero row are dropped so the test's positivity
/// precondition can hold; at least two buckets must survive.
pub fn stance_contingency(
    ads: &[LabeledAd],
    axis: DemoAxis,
    weighting: ContingencyWeight,
) -> Result<ContingencyTable> {
    let stances = [StanceLabel::ProEnergy, StanceLabel::CleanEnergy];
    let buckets: Vec<&str> = match axis {
        DemoAxis::Gender => GENDER_KEYS.to_vec(),
        DemoAxis::Age => AGE_BUCKETS.to_vec(),
    };
    let mut counts = vec![vec![0.0; stances.len()]; buckets.len()];
    for labeled in in_id_order(ads) {
        let Some(col) = stances.iter().position(|&s| s == labeled.stance) else {
            continue;
        };
        let shares = axis.shares(&labeled.ad);
        if shares.is_empty() {
            continue;
        }
        let scale = match weighting {
            ContingencyWeight::AdCount => 1.0,
            ContingencyWeight::ImpressionsMid => labeled.ad.impressions_mid(),
        };
        for (row, bucket) in buckets.iter().enumerate() {
            if let Some(&fraction) = shares.get(*bucket) {
                counts[row][col] += scale * fraction;
            }
        }
    }
    let mut row_labels = Vec::new();
    let mut kept_counts = Vec::new();
    for (row, bucket) in buckets.iter().enumerate() {
        if counts[row].iter().sum::<f64>() > 0.0 {
            row_labels.push(bucket.to_string());
            kept_counts.push(counts[row].clone());
        }
    }
    if row_labels.len() < 2 {
        return Err(AnalyticsError::DegenerateTable(format!(
            "only {} non-empty {} bucket(s)",
            row_labels.len(),
            axis.as_str()
        )));
    }
    let col_labels = stances.iter().map(|s| s.as_str().to_string()).collect();
    Ok(ContingencyTable::new(row_labels, col_labels, kept_counts)?)
}

// ---------------------------------------------------------------------------
// CSV interfaces
// ---------------------------------------------------------------------------

/// Write aggregate rows as `stance,group,weight_kind,value,share`.
pub fn write_rows<W: Write>(writer: W, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["stance", "group", "weight_kind", "value", "share"])?;
    for row in rows {
        w.write_record([
            row.stance.as_str(),
            &row.group,
            row.weight_kind.as_str(),
            &format!("{:.17}", row.value),
            &format!("{:.17}", row.share),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Write the theme × entity-type spend matrix as
/// `theme_id,entity_type,spend`.
pub fn write_theme_type_matrix<W: Write>(writer: W, matrix: &ThemeTypeMatrix) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["theme_id", "entity_type", "spend"])?;
    for cell in &matrix.cells {
        w.write_record([
            cell.theme_id.as_str(),
            cell.entity_type.as_str(),
            &format!("{:.17}", cell.spend),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Write per-theme token frequencies as `theme_id,token,count`.
pub fn write_token_frequencies<W: Write>(
    writer: W,
    frequencies: &BTreeMap<String, Vec<(String, u64)>>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["theme_id", "token", "count"])?;
    for (theme_id, tokens) in frequencies {
        for (token, count) in tokens {
            w.write_record([theme_id.as_str(), token, &count.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
