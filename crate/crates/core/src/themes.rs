//! Fifteen-theme phrase bank and embedding-based theme grounding.
//!
//! Each theme is a small bag of indicative phrases on one side of the energy
//! debate (7 pro-energy themes, 8 clean-energy themes in the shipped bank).
//! An ad is grounded to the theme holding the phrase most cosine-similar to
//! the encoded ad body; per-theme aggregation over phrases is MAX so a single
//! strong paraphrase match wins.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

use crate::corpus::AdRecord;
use crate::embedder::{cosine, tokenize, EmbedError, Encoder};
use crate::metrics::{classification_report, MetricsError};

#[derive(Debug, Error)]
pub enum ThemeError {
    #[error("phrase bank: {0}")]
    BadBank(String),
    #[error("duplicate theme id `{0}`")]
    DuplicateThemeId(String),
    #[error("theme `{0}` has no phrases")]
    EmptyPhrases(String),
    #[error("ad `{0}` has an empty body")]
    EmptyBody(String),
    #[error("empty annotation set")]
    EmptyAnnotations,
    #[error("annotation references ad `{0}` with no assignment")]
    UnknownAd(String),
    #[error("annotation file `{path}`: {reason}")]
    BadAnnotationFile { path: String, reason: String },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, ThemeError>;

/// Which side of the energy debate a theme argues for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThemeSide {
    Pro,
    Clean,
}

/// One theme: a stable id, a side, and the phrases that voice it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theme {
    pub id: String,
    pub side: ThemeSide,
    pub phrases: Vec<String>,
}

/// An ordered, validated collection of themes. Order matters: ties in
/// assignment scores break toward the lowest bank index.
#[derive(Debug, Clone)]
pub struct ThemeBank {
    themes: Vec<Theme>,
}

const SHIPPED_BANK_JSON: &str = include_str!("../../../data/themes.json");

impl ThemeBank {
    pub fn from_themes(themes: Vec<Theme>) -> Result<ThemeBank> {
        if themes.is_empty() {
            return Err(ThemeError::BadBank("no themes".into()));
        }
        let mut seen = BTreeSet::new();
        for theme in &themes {
            if theme.id.trim().is_empty() {
                return Err(ThemeError::BadBank("empty theme id".into()));
            }
            if !seen.insert(theme.id.clone()) {
                return Err(ThemeError::DuplicateThemeId(theme.id.clone()));
            }
            if theme.phrases.is_empty() {
                return Err(ThemeError::EmptyPhrases(theme.id.clone()));
            }
            if theme.phrases.iter().any(|p| tokenize(p).is_empty()) {
                return Err(ThemeError::BadBank(format!(
                    "theme `{}` has a phrase with no word tokens",
                    theme.id
                )));
            }
        }
        Ok(ThemeBank { themes })
    }

    pub fn parse(json: &str) -> Result<ThemeBank> {
        let themes: Vec<Theme> = serde_json::from_str(json)?;
        ThemeBank::from_themes(themes)
    }

    pub fn load(path: &Path) -> Result<ThemeBank> {
        ThemeBank::parse(&std::fs::read_to_string(path)?)
    }

    /// The default bank compiled into the library.
    pub fn shipped() -> ThemeBank {
        ThemeBank::parse(SHIPPED_BANK_JSON).expect("shipped phrase bank is valid")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.themes)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn themes(&self) -> &[Theme] {
        &self.themes
    }

    pub fn len(&self) -> usize {
        self.themes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.themes.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.themes.iter().map(|t| t.id.clone()).collect()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.themes.iter().position(|t| t.id == id)
    }

    pub fn side_of(&self, id: &str) -> Option<ThemeSide> {
        self.index_of(id).map(|i| self.themes[i].side)
    }

    /// Word tokens of every theme id, deduplicated in bank order. These are
    /// force-included in the vocabulary so theme prefixes never map to UNK.
    pub fn id_tokens(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for theme in &self.themes {
            for token in tokenize(&theme.id) {
                if seen.insert(token.clone()) {
                    out.push(token);
                }
            }
        }
        out
    }
}

/// Best and runner-up indices by score; ties go to the lowest index.
pub(crate) fn best_two(scores: &[f64]) -> (usize, Option<usize>) {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    let mut runner: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if i == best {
            continue;
        }
        match runner {
            None => runner = Some(i),
            Some(r) if s > scores[r] => runner = Some(i),
            _ => {}
        }
    }
    (best, runner)
}

/// The theme grounded to one ad, with the runner-up for audit purposes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThemeAssignment {
    pub ad_id: String,
    pub theme_id: String,
    /// Max cosine between the encoded body and the winning theme's phrases.
    pub score: f64,
    pub runner_up: Option<RunnerUp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunnerUp {
    pub theme_id: String,
    pub score: f64,
}

/// A bank with every phrase pre-encoded to a unit vector, so assigning a
/// whole corpus encodes each phrase once instead of once per ad.
pub struct EmbeddedBank<'a> {
    bank: &'a ThemeBank,
    phrase_vecs: Vec<Vec<Vec<f64>>>,
}

impl<'a> EmbeddedBank<'a> {
    pub fn new(bank: &'a ThemeBank, encoder: &Encoder) -> Result<EmbeddedBank<'a>> {
        let phrase_vecs = bank
            .themes()
            .iter()
            .map(|theme| {
                theme
                    .phrases
                    .iter()
                    .map(|p| encoder.encode(p))
                    .collect::<std::result::Result<Vec<_>, _>>()
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(EmbeddedBank { bank, phrase_vecs })
    }

    /// Per-theme score for an encoded body: max phrase cosine.
    pub fn theme_scores(&self, body_vec: &[f64]) -> Vec<f64> {
        self.phrase_vecs
            .iter()
            .map(|phrases| {
                phrases
                    .iter()
                    .map(|p| cosine(body_vec, p))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect()
    }

    pub fn assign(&self, encoder: &Encoder, ad: &AdRecord) -> Result<ThemeAssignment> {
        let body_vec = encoder
            .encode(&ad.body)
            .map_err(|_| ThemeError::EmptyBody(ad.id.clone()))?;
        let scores = self.theme_scores(&body_vec);
        let (best, runner) = best_two(&scores);
        Ok(ThemeAssignment {
            ad_id: ad.id.clone(),
            theme_id: self.bank.themes()[best].id.clone(),
            score: scores[best],
            runner_up: runner.map(|r| RunnerUp {
                theme_id: self.bank.themes()[r].id.clone(),
                score: scores[r],
            }),
        })
    }
}

/// Ground one ad to its best theme. For whole corpora prefer
/// [`assign_all`], which encodes the bank's phrases only once.
pub fn assign_theme(
    ad: &AdRecord,
    encoder: &Encoder,
    bank: &ThemeBank,
) -> Result<ThemeAssignment> {
    EmbeddedBank::new(bank, encoder)?.assign(encoder, ad)
}

/// Ground every ad in a corpus, in input order.
pub fn assign_all(
    corpus: &[AdRecord],
    encoder: &Encoder,
    bank: &ThemeBank,
) -> Result<Vec<ThemeAssignment>> {
    let embedded = EmbeddedBank::new(bank, encoder)?;
    corpus
        .par_iter()
        .map(|ad| embedded.assign(encoder, ad))
        .collect()
}

/// Audit metrics for theme assignment against human annotations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThemeEvalReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub n_annotated: usize,
}

/// Score assignments against a gold `ad id → theme id` annotation map.
/// Every annotated ad must have an assignment; metrics are computed over the
/// bank's full theme label set.
pub fn eval_themes(
    assignments: &[ThemeAssignment],
    annotations: &BTreeMap<String, String>,
    bank: &ThemeBank,
) -> Result<ThemeEvalReport> {
    if annotations.is_empty() {
        return Err(ThemeError::EmptyAnnotations);
    }
    let assigned: BTreeMap<&str, &str> = assignments
        .iter()
        .map(|a| (a.ad_id.as_str(), a.theme_id.as_str()))
        .collect();
    let mut pred = Vec::with_capacity(annotations.len());
    let mut gold = Vec::with_capacity(annotations.len());
    for (ad_id, theme_id) in annotations {
        let assigned_theme = assigned
            .get(ad_id.as_str())
            .ok_or_else(|| ThemeError::UnknownAd(ad_id.clone()))?;
        pred.push(assigned_theme.to_string());
        gold.push(theme_id.clone());
    }
    let report = classification_report(&pred, &gold, &bank.ids())?;
    Ok(ThemeEvalReport {
        accuracy: report.accuracy,
        macro_f1: report.macro_f1,
        n_annotated: annotations.len(),
    })
}

// ---------------------------------------------------------------------------
// CSV interfaces
// ---------------------------------------------------------------------------

/// Read an `ad_id,theme_id` annotation CSV (leading `#` comments skipped).
pub fn read_annotations(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| ThemeError::BadAnnotationFile {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
    let headers = reader.headers()?.clone();
    if headers.iter().ne(["ad_id", "theme_id"]) {
        return Err(ThemeError::BadAnnotationFile {
            path: path.display().to_string(),
            reason: format!("expected header ad_id,theme_id, got {headers:?}"),
        });
    }
    let mut out = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let ad_id = record.get(0).unwrap_or_default().to_string();
        let theme_id = record.get(1).unwrap_or_default().to_string();
        if ad_id.is_empty() || theme_id.is_empty() {
            return Err(ThemeError::BadAnnotationFile {
                path: path.display().to_string(),
                reason: "row with empty ad_id or theme_id".into(),
            });
        }
        if out.insert(ad_id.clone(), theme_id).is_some() {
            return Err(ThemeError::BadAnnotationFile {
                path: path.display().to_string(),
                reason: format!("duplicate annotation for ad `{ad_id}`"),
            });
        }
    }
    Ok(out)
}

pub fn write_annotations<W: Write>(
    writer: W,
    annotations: &BTreeMap<String, String>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["ad_id", "theme_id"])?;
    for (ad_id, theme_id) in annotations {
        w.write_record([ad_id, theme_id])?;
    }
    w.flush()?;
    Ok(())
}

const ASSIGNMENT_HEADERS: [&str; 5] = [
    "ad_id",
    "theme_id",
    "score",
    "runner_up_id",
    "runner_up_score",
];

/// Write assignments as CSV rows (runner-up cells empty when absent).
pub fn write_assignments<W: Write>(writer: W, assignments: &[ThemeAssignment]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(ASSIGNMENT_HEADERS)?;
    for a in assignments {
        let (rid, rscore) = match &a.runner_up {
            Some(r) => (r.theme_id.clone(), format!("{:.17}", r.score)),
            None => (String::new(), String::new()),
        };
        w.write_record([
            a.ad_id.as_str(),
            a.theme_id.as_str(),
            &format!("{:.17}", a.score),
            &rid,
            &rscore,
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_assignments(path: &Path) -> Result<Vec<ThemeAssignment>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.iter().ne(ASSIGNMENT_HEADERS) {
        return Err(ThemeError::BadAnnotationFile {
            path: path.display().to_string(),
            reason: format!("expected header {ASSIGNMENT_HEADERS:?}, got {headers:?}"),
        });
    }
    let parse_f64 = |s: &str| -> Result<f64> {
        s.parse::<f64>().map_err(|e| ThemeError::BadAnnotationFile {
            path: path.display().to_string(),
            reason: format!("bad score `{s}`: {e}"),
        })
    };
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let runner_id = record.get(3).unwrap_or_default();
        let runner_up = if runner_id.is_empty() {
            None
        } else {
            Some(RunnerUp {
                theme_id: runner_id.to_string(),
                score: parse_f64(record.get(4).unwrap_or_default())?,
            })
        };
        out.push(ThemeAssignment {
            ad_id: record.get(0).unwrap_or_default().to_string(),
            theme_id: record.get(1).unwrap_or_default().to_string(),
            score: parse_f64(record.get(2).unwrap_or_default())?,
            runner_up,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::{EncoderParams, Vocabulary};
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ad(id: &str, body: &str) -> AdRecord {
        AdRecord {
            id: id.into(),
            title: None,
            description: None,
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

    fn encoder_over(texts: &[&str], dim: usize, seed: u64) -> Encoder {
        let vocab = Vocabulary::build(texts.iter().copied(), 10_000, &[]);
        let params = EncoderParams::init(vocab.len(), dim, seed).unwrap();
        Encoder { vocab, params }
    }

    fn bank_texts(bank: &ThemeBank) -> Vec<String> {
        bank.themes()
            .iter()
            .flat_map(|t| t.phrases.iter().cloned())
            .collect()
    }

    #[test]
    fn shipped_bank_has_seven_pro_and_eight_clean_themes() {
        let bank = ThemeBank::shipped();
        assert_eq!(bank.len(), 15);
        let pro = bank
            .themes()
            .iter()
            .filter(|t| t.side == ThemeSide::Pro)
            .count();
        let clean = bank
            .themes()
            .iter()
            .filter(|t| t.side == ThemeSide::Clean)
            .count();
        assert_eq!(pro, 7);
        assert_eq!(clean, 8);
        assert_eq!(
            bank.ids(),
            vec![
                "Economy_pro",
                "Identity",
                "ClimateSolution",
                "Pragmatism",
                "Patriotism",
                "AgainstClimatePolicy",
                "GiveAway",
                "Economy_clean",
                "HumanHealth",
                "FutureGeneration",
                "Environmental",
                "Animals",
                "AltEnergy",
                "SupportClimatePolicy",
                "PoliticalAffliation",
            ]
        );
        let phrase_counts: Vec<usize> = bank.themes().iter().map(|t| t.phrases.len()).collect();
        assert_eq!(
            phrase_counts,
            vec![19, 10, 12, 13, 10, 9, 2, 11, 8, 6, 17, 5, 5, 11, 2]
        );
        assert_eq!(phrase_counts.iter().sum::<usize>(), 140);
    }

    #[test]
    fn bank_validation_rejects_duplicates_and_empty_phrase_lists() {
        let theme = |id: &str| Theme {
            id: id.into(),
            side: ThemeSide::Pro,
            phrases: vec!["a phrase".into()],
        };
        let dup = vec![theme("A"), theme("A")];
        assert!(matches!(
            ThemeBank::from_themes(dup),
            Err(ThemeError::DuplicateThemeId(_))
        ));
        let empty = vec![Theme {
            id: "A".into(),
            side: ThemeSide::Clean,
            phrases: vec![],
        }];
        assert!(matches!(
            ThemeBank::from_themes(empty),
            Err(ThemeError::EmptyPhrases(_))
        ));
        assert!(ThemeBank::from_themes(vec![]).is_err());
    }

    #[test]
    fn bank_round_trips_through_serialization() {
        let dir = tempfile::tempdir().unwrap();
        let bank = ThemeBank::shipped();
        let path = dir.path().join("bank.json");
        bank.save(&path).unwrap();
        let loaded = ThemeBank::load(&path).unwrap();
        assert_eq!(loaded.themes(), bank.themes());
    }

    #[test]
    fn id_tokens_cover_every_theme_and_feed_the_vocabulary() {
        let bank = ThemeBank::shipped();
        let tokens = bank.id_tokens();
        assert!(tokens.contains(&"economy_pro".to_string()));
        assert!(tokens.contains(&"politicalaffliation".to_string()));
        // Every id tokenizes into covered tokens.
        for theme in bank.themes() {
            for token in tokenize(&theme.id) {
                assert!(tokens.contains(&token), "missing id token {token}");
            }
        }
    }

    #[test]
    fn exact_phrase_body_scores_one_on_its_source_theme() {
        let bank = ThemeBank::shipped();
        let texts = bank_texts(&bank);
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let encoder = encoder_over(&refs, 16, 9);
        // An untrained encoder suffices: identical text → identical vector.
        let source = &bank.themes()[11]; // Animals
        let phrase = source.phrases[0].clone();
        let assignment = assign_theme(&ad("a1", &phrase), &encoder, &bank).unwrap();
        assert_eq!(assignment.theme_id, source.id);
        assert!(assignment.score > 1.0 - 1e-9, "score {}", assignment.score);
        let runner = assignment.runner_up.unwrap();
        assert!(assignment.score >= runner.score);
    }

    #[test]
    fn equal_scores_break_toward_the_first_theme_in_bank_order() {
        let phrase = "clean power now".to_string();
        let bank = ThemeBank::from_themes(vec![
            Theme {
                id: "First".into(),
                side: ThemeSide::Pro,
                phrases: vec![phrase.clone()],
            },
            Theme {
                id: "Second".into(),
                side: ThemeSide::Clean,
                phrases: vec![phrase.clone()],
            },
        ])
        .unwrap();
        let encoder = encoder_over(&[phrase.as_str()], 8, 2);
        let assignment = assign_theme(&ad("a1", &phrase), &encoder, &bank).unwrap();
        assert_eq!(assignment.theme_id, "First");
        let runner = assignment.runner_up.unwrap();
        assert_eq!(runner.theme_id, "Second");
        assert_eq!(assignment.score, runner.score);
    }

    #[test]
    fn best_two_prefers_lowest_index_on_ties() {
        assert_eq!(best_two(&[0.5, 0.5, 0.1]), (0, Some(1)));
        assert_eq!(best_two(&[0.1, 0.9, 0.9]), (1, Some(2)));
        assert_eq!(best_two(&[0.3]), (0, None));
        // Argmax is invariant under a strictly increasing transform.
        let raw: [f64; 5] = [0.2, -0.4, 0.9, 0.9, 0.0];
        let transformed: Vec<f64> = raw.iter().map(|s| s.exp()).collect();
        assert_eq!(best_two(&raw), best_two(&transformed));
    }

    #[test]
    fn empty_body_is_rejected() {
        let bank = ThemeBank::shipped();
        let texts = bank_texts(&bank);
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let encoder = encoder_over(&refs, 8, 3);
        let err = assign_theme(&ad("a1", "!!!"), &encoder, &bank).unwrap_err();
        assert!(matches!(err, ThemeError::EmptyBody(_)));
    }

    #[test]
    fn superset_phrases_never_decrease_a_theme_score() {
        let base_phrases = vec!["wind farms".to_string(), "solar panels".to_string()];
        let extra = "geothermal heat".to_string();
        let texts = [
            "wind farms",
            "solar panels",
            "geothermal heat",
            "drill for gas",
            "heat our homes with geothermal energy",
        ];
        let encoder = encoder_over(&texts, 8, 4);
        let make_bank = |phrases: Vec<String>| {
            ThemeBank::from_themes(vec![
                Theme {
                    id: "T".into(),
                    side: ThemeSide::Clean,
                    phrases,
                },
                Theme {
                    id: "Other".into(),
                    side: ThemeSide::Pro,
                    phrases: vec!["drill for gas".into()],
                },
            ])
            .unwrap()
        };
        let small = make_bank(base_phrases.clone());
        let mut bigger_phrases = base_phrases;
        bigger_phrases.push(extra);
        let big = make_bank(bigger_phrases);
        for body in ["heat our homes with geothermal energy", "solar panels", "drill for gas"] {
            let s = EmbeddedBank::new(&small, &encoder)
                .unwrap()
                .theme_scores(&encoder.encode(body).unwrap())[0];
            let b = EmbeddedBank::new(&big, &encoder)
                .unwrap()
                .theme_scores(&encoder.encode(body).unwrap())[0];
            assert!(b >= s, "body {body}: {b} < {s}");
        }
    }

    #[test]
    fn assign_all_preserves_corpus_order_and_matches_single_assignment() {
        let bank = ThemeBank::shipped();
        let texts = bank_texts(&bank);
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let encoder = encoder_over(&refs, 12, 5);
        let corpus = vec![
            ad("a1", &bank.themes()[0].phrases[0]),
            ad("a2", &bank.themes()[8].phrases[1]),
            ad("a3", "jobs and energy and freedom"),
        ];
        let all = assign_all(&corpus, &encoder, &bank).unwrap();
        assert_eq!(all.len(), 3);
        for (record, assignment) in corpus.iter().zip(&all) {
            assert_eq!(record.id, assignment.ad_id);
            let single = assign_theme(record, &encoder, &bank).unwrap();
            assert_eq!(&single, assignment);
        }
    }

    #[test]
    fn eval_perfect_assignments_score_one() {
        let bank = ThemeBank::shipped();
        let assignments: Vec<ThemeAssignment> = bank
            .ids()
            .iter()
            .enumerate()
            .map(|(i, theme_id)| ThemeAssignment {
                ad_id: format!("a{i}"),
                theme_id: theme_id.clone(),
                score: 0.9,
                runner_up: None,
            })
            .collect();
        let annotations: BTreeMap<String, String> = assignments
            .iter()
            .map(|a| (a.ad_id.clone(), a.theme_id.clone()))
            .collect();
        let report = eval_themes(&assignments, &annotations, &bank).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.macro_f1, 1.0);
        assert_eq!(report.n_annotated, 15);
    }

    #[test]
    fn eval_rejects_empty_or_dangling_annotations() {
        let bank = ThemeBank::shipped();
        let assignments = vec![ThemeAssignment {
            ad_id: "a1".into(),
            theme_id: "Identity".into(),
            score: 0.5,
            runner_up: None,
        }];
        assert!(matches!(
            eval_themes(&assignments, &BTreeMap::new(), &bank),
            Err(ThemeError::EmptyAnnotations)
        ));
        let dangling: BTreeMap<String, String> =
            [("ghost".to_string(), "Identity".to_string())].into();
        assert!(matches!(
            eval_themes(&assignments, &dangling, &bank),
            Err(ThemeError::UnknownAd(_))
        ));
    }

    #[test]
    fn single_theme_assignments_against_uniform_annotations_score_one_fifteenth() {
        let bank = ThemeBank::shipped();
        let ids = bank.ids();
        let n = 30; // two full cycles of the 15 themes
        let assignments: Vec<ThemeAssignment> = (0..n)
            .map(|i| ThemeAssignment {
                ad_id: format!("a{i:03}"),
                theme_id: ids[0].clone(),
                score: 0.5,
                runner_up: None,
            })
            .collect();
        let annotations: BTreeMap<String, String> = (0..n)
            .map(|i| (format!("a{i:03}"), ids[i % 15].clone()))
            .collect();
        let report = eval_themes(&assignments, &annotations, &bank).unwrap();
        assert!((report.accuracy - 1.0 / 15.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_random_assignment_accuracy_sits_in_the_binomial_band() {
        // 99% band around 1/15 for n = 3000 is [0.053, 0.081].
        let bank = ThemeBank::shipped();
        let ids = bank.ids();
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let n = 3000;
        let assignments: Vec<ThemeAssignment> = (0..n)
            .map(|i| ThemeAssignment {
                ad_id: format!("a{i:04}"),
                theme_id: ids[rng.random_range(0..ids.len())].clone(),
                score: 0.0,
                runner_up: None,
            })
            .collect();
        let annotations: BTreeMap<String, String> = (0..n)
            .map(|i| (format!("a{i:04}"), ids[rng.random_range(0..ids.len())].clone()))
            .collect();
        let report = eval_themes(&assignments, &annotations, &bank).unwrap();
        assert!(
            (0.053..=0.081).contains(&report.accuracy),
            "accuracy {}",
            report.accuracy
        );
    }

    #[test]
    fn annotation_csv_round_trips_and_validates_headers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("annotations.csv");
        let annotations: BTreeMap<String, String> = [
            ("a1".to_string(), "Identity".to_string()),
            ("a2".to_string(), "Animals".to_string()),
        ]
        .into();
        let file = std::fs::File::create(&path).unwrap();
        write_annotations(file, &annotations).unwrap();
        assert_eq!(read_annotations(&path).unwrap(), annotations);
        std::fs::write(&path, "id,theme\na1,Identity\n").unwrap();
        assert!(matches!(
            read_annotations(&path),
            Err(ThemeError::BadAnnotationFile { .. })
        ));
    }

    #[test]
    fn assignment_csv_round_trips_with_and_without_runner_up() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("assignments.csv");
        let assignments = vec![
            ThemeAssignment {
                ad_id: "a1".into(),
                theme_id: "Identity".into(),
                score: 0.8122345678901234,
                runner_up: Some(RunnerUp {
                    theme_id: "Animals".into(),
                    score: 0.25,
                }),
            },
            ThemeAssignment {
                ad_id: "a2".into(),
                theme_id: "AltEnergy".into(),
                score: -0.125,
                runner_up: None,
            },
        ];
        let file = std::fs::File::create(&path).unwrap();
        write_assignments(file, &assignments).unwrap();
        let loaded = read_assignments(&path).unwrap();
        assert_eq!(loaded, assignments);
    }

    proptest! {
        #[test]
        fn assignment_is_deterministic_and_score_dominates_runner_up(seed in 0u64..150) {
            let bank = ThemeBank::from_themes(vec![
                Theme { id: "A".into(), side: ThemeSide::Pro, phrases: vec!["drill baby drill".into(), "oil jobs".into()] },
                Theme { id: "B".into(), side: ThemeSide::Clean, phrases: vec!["solar future".into()] },
                Theme { id: "C".into(), side: ThemeSide::Clean, phrases: vec!["wind power".into(), "clean air".into()] },
            ]).unwrap();
            let encoder = encoder_over(
                &["drill baby drill oil jobs solar future wind power clean air extra words here"],
                6,
                seed,
            );
            let words = ["drill", "oil", "solar", "wind", "clean", "jobs", "future", "power", "air", "extra", "words", "here"];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let body: Vec<&str> = (0..rng.random_range(1..8)).map(|_| words[rng.random_range(0..words.len())]).collect();
            let record = ad("p", &body.join(" "));
            let first = assign_theme(&record, &encoder, &bank).unwrap();
            let second = assign_theme(&record, &encoder, &bank).unwrap();
            prop_assert_eq!(&first, &second);
            prop_assert!((-1.0..=1.0).contains(&first.score));
            if let Some(runner) = &first.runner_up {
                prop_assert!(first.score >= runner.score);
            }
        }
    }
}
