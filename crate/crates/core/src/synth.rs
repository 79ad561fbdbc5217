//! Deterministic synthetic-corpus generator for tests and demos.
//!
//! Real platform ad archives cannot be redistributed, so the end-to-end
//! pipeline is exercised on generated corpora that reproduce the properties
//! the pipeline depends on: funder-level stance consistency, stance-specific
//! vocabulary, campaign-narrative phrases embedded in ad bodies, optional
//! short descriptions, skewed demographic/geographic delivery per stance, and
//! spend/impression ranges of realistic magnitude. Generation is a pure
//! function of [`SynthConfig`], so every test run sees the same bytes.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

use crate::corpus::{AdRecord, EntityType, FundingEntity, Registry, StanceLabel};
use crate::nncore::derive_seed;
use crate::themes::{ThemeBank, ThemeSide};

/// Shape of a generated corpus.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    /// Number of funding entities. Stances cycle pro, clean, neutral, pro,
    /// clean — 40/40/20.
    pub n_entities: usize,
    /// Ads per entity.
    pub ads_per_entity: usize,
    /// Last entities this many get `unknown` stance in the registry (their
    /// ads flow through the unlabeled path).
    pub unknown_entities: usize,
    /// Fraction of ads that carry a short description.
    pub description_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_entities: 48,
            ads_per_entity: 44,
            unknown_entities: 2,
            description_rate: 0.7,
            seed: 7,
        }
    }
}

/// A generated corpus: ads, the funder registry, and the true narrative of
/// every pro- or clean-energy ad (its body quotes one bank phrase verbatim).
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub ads: Vec<AdRecord>,
    pub entities: Vec<FundingEntity>,
    pub annotations: BTreeMap<String, String>,
}

impl SynthOutput {
    pub fn registry(&self) -> Registry {
        Registry::from_entities(self.entities.clone()).expect("generated entities are consistent")
    }
}

const PRO_PREFIX: [&str; 6] = [
    "American",
    "National",
    "United",
    "Heartland",
    "Liberty",
    "Frontier",
];
const PRO_CORE: [&str; 5] = ["Petroleum", "Pipeline", "Drilling", "Natural Gas", "Coal"];
const CLEAN_PREFIX: [&str; 6] = [
    "Evergreen",
    "Pacific",
    "Horizon",
    "Northern",
    "Brightline",
    "Cascade",
];
const CLEAN_CORE: [&str; 5] = ["Solar", "Wind", "Renewables", "Clean Power", "Climate"];
const NEUTRAL_CORE: [&str; 4] = ["Voter", "Civic", "Community", "Election"];
const SUFFIX: [&str; 5] = ["Alliance", "Council", "Association", "Partners", "Fund"];

const PRO_PHRASES: [&str; 8] = [
    "keep drilling for affordable oil and gas",
    "our pipeline workers power this nation",
    "petroleum keeps fuel costs low for families",
    "natural gas is reliable energy you can trust",
    "support domestic coal and energy jobs",
    "fracking brings energy independence home",
    "stand with the oil and gas workforce",
    "american energy from american wells",
];
const CLEAN_PHRASES: [&str; 8] = [
    "solar panels on every rooftop cut bills",
    "wind turbines bring clean energy jobs",
    "renewable power means cleaner air today",
    "cut carbon emissions with clean energy now",
    "invest in solar and wind infrastructure",
    "a renewable grid protects our climate",
    "clean energy is the future of work",
    "electrify everything with wind and solar",
];
const NEUTRAL_PHRASES: [&str; 8] = [
    "make your voice heard on energy policy",
    "register to vote before the energy referendum deadline",
    "your ballot decides the energy debate",
    "county voters weigh the energy question",
    "town hall tonight on the energy plan",
    "know your polling place for the energy vote",
    "every vote counts in the energy election",
    "civic duty starts with an energy ballot",
];

const PRO_STATES: [&str; 6] = ["TX", "OK", "PA", "OH", "WV", "ND"];
const CLEAN_STATES: [&str; 6] = ["CA", "NY", "WA", "MA", "CO", "VT"];
const NEUTRAL_STATES: [&str; 6] = ["FL", "GA", "MI", "WI", "AZ", "NV"];

const OPENERS: [&str; 5] = [
    "Neighbors,",
    "This matters:",
    "Here is the truth.",
    "Think about it.",
    "Our community deserves better.",
];
const CLOSERS: [&str; 5] = [
    "Learn more today.",
    "Join us.",
    "Share with a friend.",
    "Act before it is too late.",
    "Paid for by people like you.",
];

fn stance_of_slot(i: usize) -> StanceLabel {
    match i % 5 {
        0 | 3 => StanceLabel::ProEnergy,
        1 | 4 => StanceLabel::CleanEnergy,
        _ => StanceLabel::Neutral,
    }
}

fn entity_name(i: usize, stance: StanceLabel) -> String {
    match stance {
        StanceLabel::ProEnergy => format!(
            "{} {} {} {i:02}",
            PRO_PREFIX[i % PRO_PREFIX.len()],
            PRO_CORE[i % PRO_CORE.len()],
            SUFFIX[i % SUFFIX.len()]
        ),
        StanceLabel::CleanEnergy => format!(
            "{} {} {} {i:02}",
            CLEAN_PREFIX[i % CLEAN_PREFIX.len()],
            CLEAN_CORE[i % CLEAN_CORE.len()],
            SUFFIX[i % SUFFIX.len()]
        ),
        StanceLabel::Neutral => format!(
            "{} {} {} {i:02}",
            "Open",
            NEUTRAL_CORE[i % NEUTRAL_CORE.len()],
            SUFFIX[i % SUFFIX.len()]
        ),
    }
}

fn pick<'a>(rng: &mut ChaCha8Rng, options: &[&'a str]) -> &'a str {
    options[rng.random_range(0..options.len())]
}

/// Gender mix per stance: pro skews male, clean skews female. The gap is what
/// the demographic independence test should detect.
fn gender_share(rng: &mut ChaCha8Rng, stance: StanceLabel) -> BTreeMap<String, f64> {
    let male_center = match stance {
        StanceLabel::ProEnergy => 0.62,
        StanceLabel::CleanEnergy => 0.38,
        StanceLabel::Neutral => 0.50,
    };
    let unknown = 0.02;
    let male: f64 = male_center + rng.random_range(-0.05..0.05);
    let male = male.clamp(0.05, 0.93);
    let female = 1.0 - male - unknown;
    [
        ("male".to_string(), male),
        ("female".to_string(), female),
        ("unknown".to_string(), unknown),
    ]
    .into()
}

/// Age mix per stance: pro skews older, clean younger.
fn age_share(rng: &mut ChaCha8Rng, stance: StanceLabel) -> BTreeMap<String, f64> {
    let base: [f64; 7] = match stance {
        StanceLabel::ProEnergy => [0.03, 0.06, 0.13, 0.23, 0.28, 0.24, 0.03],
        StanceLabel::CleanEnergy => [0.22, 0.28, 0.20, 0.13, 0.08, 0.06, 0.03],
        StanceLabel::Neutral => [0.12, 0.18, 0.18, 0.18, 0.16, 0.15, 0.03],
    };
    let jittered: Vec<f64> = base
        .iter()
        .map(|&b| (b + rng.random_range(-0.01..0.01)).max(0.005))
        .collect();
    let total: f64 = jittered.iter().sum();
    crate::corpus::AGE_BUCKETS
        .iter()
        .zip(&jittered)
        .map(|(bucket, &w)| (bucket.to_string(), w / total))
        .collect()
}

fn state_share(rng: &mut ChaCha8Rng, stance: StanceLabel) -> BTreeMap<String, f64> {
    let pool: &[&str] = match stance {
        StanceLabel::ProEnergy => &PRO_STATES,
        StanceLabel::CleanEnergy => &CLEAN_STATES,
        StanceLabel::Neutral => &NEUTRAL_STATES,
    };
    let mut picks = std::collections::BTreeSet::new();
    while picks.len() < 3 {
        picks.insert(pick(rng, pool));
    }
    let weights: Vec<f64> = (0..3).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = weights.iter().sum();
    picks
        .into_iter()
        .zip(&weights)
        .map(|(state, &w)| (state.to_string(), w / total))
        .collect()
}

fn description_for(rng: &mut ChaCha8Rng, stance: StanceLabel) -> String {
    let line = match stance {
        StanceLabel::ProEnergy => pick(
            rng,
            &[
                "Affordable oil and gas for working families.",
                "Pipelines and drilling mean paychecks here.",
                "Reliable petroleum power, day and night.",
            ],
        ),
        StanceLabel::CleanEnergy => pick(
            rng,
            &[
                "Solar and wind cut bills and emissions.",
                "Clean renewable power for our kids.",
                "A carbon free grid is within reach.",
            ],
        ),
        StanceLabel::Neutral => pick(
            rng,
            &[
                "Your vote shapes the energy debate.",
                "Be ready for the ballot this fall.",
                "Civic information for county voters.",
            ],
        ),
    };
    line.to_string()
}

/// Generate a corpus. Every body quotes a stance-side phrase, contains at
/// least one tracked energy keyword as a whole word, and — for pro and clean
/// ads — quotes one theme-bank phrase verbatim, which becomes the ad's gold
/// narrative annotation.
pub fn generate(config: &SynthConfig) -> SynthOutput {
    let bank = ThemeBank::shipped();
    let pro_themes: Vec<usize> = (0..bank.len())
        .filter(|&i| bank.themes()[i].side == ThemeSide::Pro)
        .collect();
    let clean_themes: Vec<usize> = (0..bank.len())
        .filter(|&i| bank.themes()[i].side == ThemeSide::Clean)
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed("synth-corpus", config.seed));
    let mut ads = Vec::new();
    let mut entities = Vec::new();
    let mut annotations = BTreeMap::new();

    for e in 0..config.n_entities {
        let stance = stance_of_slot(e);
        let name = entity_name(e, stance);
        let registered_stance = if e + config.unknown_entities >= config.n_entities {
            None
        } else {
            Some(stance)
        };
        entities.push(FundingEntity {
            name: name.clone(),
            stance: registered_stance,
            entity_type: match e % 4 {
                0 => EntityType::Corporation,
                1 => EntityType::IndustryAssociation,
                2 => EntityType::AdvocacyGroup,
                _ => EntityType::Other,
            },
        });
        // Entity size scales all its spend/impression ranges.
        let size = rng.random_range(0.5..5.0);

        for a in 0..config.ads_per_entity {
            let id = format!("ad{:05}", e * config.ads_per_entity + a);
            let stance_phrase = match stance {
                StanceLabel::ProEnergy => pick(&mut rng, &PRO_PHRASES),
                StanceLabel::CleanEnergy => pick(&mut rng, &CLEAN_PHRASES),
                StanceLabel::Neutral => pick(&mut rng, &NEUTRAL_PHRASES),
            };
            let theme_quote = match stance {
                StanceLabel::ProEnergy => {
                    let t = pro_themes[rng.random_range(0..pro_themes.len())];
                    let theme = &bank.themes()[t];
                    let phrase = &theme.phrases[rng.random_range(0..theme.phrases.len())];
                    annotations.insert(id.clone(), theme.id.clone());
                    Some(phrase.clone())
                }
                StanceLabel::CleanEnergy => {
                    let t = clean_themes[rng.random_range(0..clean_themes.len())];
                    let theme = &bank.themes()[t];
                    let phrase = &theme.phrases[rng.random_range(0..theme.phrases.len())];
                    annotations.insert(id.clone(), theme.id.clone());
                    Some(phrase.clone())
                }
                StanceLabel::Neutral => None,
            };
            let mut body = format!(
                "{} {}.",
                pick(&mut rng, &OPENERS),
                stance_phrase
            );
            if let Some(quote) = &theme_quote {
                body.push_str(&format!(" {quote}."));
            }
            body.push_str(&format!(" {}", pick(&mut rng, &CLOSERS)));

            let description = if rng.random_range(0.0..1.0) < config.description_rate {
                Some(description_for(&mut rng, stance))
            } else {
                None
            };
            let title = if rng.random_range(0.0..1.0) < 0.5 {
                Some(format!("{} speaks", name))
            } else {
                None
            };

            let spend_lower = (size * rng.random_range(50.0..500.0f64)).round();
            let spend_upper = (spend_lower * rng.random_range(1.2..2.0)).round();
            let impressions_lower = (spend_lower * rng.random_range(80.0..120.0)).round();
            let impressions_upper = (impressions_lower * rng.random_range(1.2..2.0)).round();

            ads.push(AdRecord {
                id,
                title,
                description,
                body,
                funding_entity: name.clone(),
                spend_lower,
                spend_upper,
                impressions_lower,
                impressions_upper,
                gender_share: gender_share(&mut rng, stance),
                age_share: age_share(&mut rng, stance),
                state_share: state_share(&mut rng, stance),
            });
        }
    }

    SynthOutput {
        ads,
        entities,
        annotations,
    }
}
