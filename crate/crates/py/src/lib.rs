//! Python bindings for the ad-stance pipeline: corpus handling, the
//! contrastive text encoder, theme grounding, the stance classifier with its
//! hyperparameter sweep, weight-space model soups, evaluation metrics, and
//! the staged end-to-end pipeline.
//!
//! Value types cross the boundary as plain dicts/lists (via their canonical
//! JSON shapes); stateful handles (encoder, vocabulary, checkpoints, example
//! sets) are opaque classes. All library errors surface as `ValueError`.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyKeyError, PyTypeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyList, PyTuple};
use pyo3::IntoPyObjectExt;

use adsoup::{analytics, cli, corpus, embedder, metrics, nncore, soup, stance, synth, themes};

// ---------------------------------------------------------------------------
// JSON bridge
// ---------------------------------------------------------------------------

fn pyerr(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn json_to_py(py: Python<'_>, v: &serde_json::Value) -> PyResult<Py<PyAny>> {
    use serde_json::Value;
    match v {
        Value::Null => Ok(py.None()),
        Value::Bool(b) => b.into_py_any(py),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.into_py_any(py)
            } else if let Some(u) = n.as_u64() {
                u.into_py_any(py)
            } else {
                n.as_f64().unwrap_or(f64::NAN).into_py_any(py)
            }
        }
        Value::String(s) => s.into_py_any(py),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_py_any(py)
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, val) in map {
                dict.set_item(k, json_to_py(py, val)?)?;
            }
            dict.into_py_any(py)
        }
    }
}

fn py_to_json(obj: &Bound<'_, PyAny>) -> PyResult<serde_json::Value> {
    use serde_json::Value;
    if obj.is_none() {
        return Ok(Value::Null);
    }
    if let Ok(b) = obj.cast::<PyBool>() {
        return Ok(Value::Bool(b.is_true()));
    }
    if let Ok(i) = obj.extract::<i64>() {
        return Ok(Value::from(i));
    }
    if let Ok(u) = obj.extract::<u64>() {
        return Ok(Value::from(u));
    }
    if let Ok(f) = obj.extract::<f64>() {
        return serde_json::Number::from_f64(f)
            .map(Value::Number)
            .ok_or_else(|| PyValueError::new_err("non-finite floats have no JSON form"));
    }
    if let Ok(s) = obj.extract::<String>() {
        return Ok(Value::String(s));
    }
    if let Ok(list) = obj.cast::<PyList>() {
        return list.iter().map(|item| py_to_json(&item)).collect();
    }
    if let Ok(tuple) = obj.cast::<PyTuple>() {
        return tuple.iter().map(|item| py_to_json(&item)).collect();
    }
    if let Ok(dict) = obj.cast::<PyDict>() {
        let mut map = serde_json::Map::new();
        for (k, v) in dict.iter() {
            map.insert(k.extract::<String>()?, py_to_json(&v)?);
        }
        return Ok(Value::Object(map));
    }
    Err(PyTypeError::new_err(format!(
        "cannot convert {} to a JSON-shaped value",
        obj.get_type().name()?
    )))
}

/// Serialize any library value into the equivalent Python object.
fn to_py<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    json_to_py(py, &serde_json::to_value(value).map_err(pyerr)?)
}

/// Build a library value from a dict/list with the same JSON shape.
fn from_py<T: serde::de::DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    serde_json::from_value(py_to_json(obj)?).map_err(pyerr)
}

fn parse_stance(s: &str) -> PyResult<corpus::StanceLabel> {
    corpus::StanceLabel::parse(s)
        .ok_or_else(|| PyValueError::new_err(format!("unknown stance label `{s}`")))
}

fn parse_split(s: &str) -> PyResult<corpus::Split> {
    match s {
        "train" => Ok(corpus::Split::Train),
        "val" => Ok(corpus::Split::Val),
        "test" => Ok(corpus::Split::Test),
        other => Err(PyValueError::new_err(format!("unknown split `{other}`"))),
    }
}

// ---------------------------------------------------------------------------
// Corpus types
// ---------------------------------------------------------------------------

/// One advertisement: text fields, the funding entity, spend and impression
/// ranges, and optional viewer share breakdowns.
#[pyclass(module = "adsoup_py", skip_from_py_object)]
#[derive(Clone)]
struct Ad {
    inner: corpus::AdRecord,
}

#[pymethods]
impl Ad {
    #[new]
    #[pyo3(signature = (
        id, body, funding_entity, *, title = None, description = None,
        spend_lower = 0.0, spend_upper = 0.0,
        impressions_lower = 0.0, impressions_upper = 0.0,
        gender_share = None, age_share = None, state_share = None,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        id: String,
        body: String,
        funding_entity: String,
        title: Option<String>,
        description: Option<String>,
        spend_lower: f64,
        spend_upper: f64,
        impressions_lower: f64,
        impressions_upper: f64,
        gender_share: Option<BTreeMap<String, f64>>,
        age_share: Option<BTreeMap<String, f64>>,
        state_share: Option<BTreeMap<String, f64>>,
    ) -> Ad {
        Ad {
            inner: corpus::AdRecord {
                id,
                title,
                description,
                body,
                funding_entity,
                spend_lower,
                spend_upper,
                impressions_lower,
                impressions_upper,
                gender_share: gender_share.unwrap_or_default(),
                age_share: age_share.unwrap_or_default(),
                state_share: state_share.unwrap_or_default(),
            },
        }
    }

    #[staticmethod]
    fn from_dict(record: &Bound<'_, PyAny>) -> PyResult<Ad> {
        Ok(Ad {
            inner: from_py(record)?,
        })
    }

    fn to_dict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner)
    }

    #[getter]
    fn id(&self) -> &str {
        &self.inner.id
    }

    #[getter]
    fn title(&self) -> Option<&str> {
        self.inner.title.as_deref()
    }

    #[getter]
    fn description(&self) -> Option<&str> {
        self.inner.description.as_deref()
    }

    #[getter]
    fn body(&self) -> &str {
        &self.inner.body
    }

    #[getter]
    fn funding_entity(&self) -> &str {
        &self.inner.funding_entity
    }

    #[getter]
    fn spend(&self) -> (f64, f64) {
        (self.inner.spend_lower, self.inner.spend_upper)
    }

    #[getter]
    fn impressions(&self) -> (f64, f64) {
        (self.inner.impressions_lower, self.inner.impressions_upper)
    }

    #[getter]
    fn gender_share(&self) -> BTreeMap<String, f64> {
        self.inner.gender_share.clone()
    }

    #[getter]
    fn age_share(&self) -> BTreeMap<String, f64> {
        self.inner.age_share.clone()
    }

    #[getter]
    fn state_share(&self) -> BTreeMap<String, f64> {
        self.inner.state_share.clone()
    }

    fn spend_mid(&self) -> f64 {
        self.inner.spend_mid()
    }

    fn impressions_mid(&self) -> f64 {
        self.inner.impressions_mid()
    }

    /// Title, description, and body joined for keyword scanning.
    fn searchable_text(&self) -> String {
        self.inner.searchable_text()
    }

    /// First schema violation, or None when the record is well-formed.
    fn problem(&self) -> Option<String> {
        self.inner.problem()
    }

    fn __repr__(&self) -> String {
        format!(
            "Ad(id={:?}, funding_entity={:?})",
            self.inner.id, self.inner.funding_entity
        )
    }
}

/// An ad paired with the stance inherited from its funder.
#[pyclass(module = "adsoup_py", skip_from_py_object)]
#[derive(Clone)]
struct LabeledAd {
    inner: corpus::LabeledAd,
}

#[pymethods]
impl LabeledAd {
    #[new]
    fn new(ad: PyRef<'_, Ad>, stance: &str) -> PyResult<LabeledAd> {
        Ok(LabeledAd {
            inner: corpus::LabeledAd {
                ad: ad.inner.clone(),
                stance: parse_stance(stance)?,
            },
        })
    }

    #[getter]
    fn ad(&self) -> Ad {
        Ad {
            inner: self.inner.ad.clone(),
        }
    }

    #[getter]
    fn stance(&self) -> &'static str {
        self.inner.stance.as_str()
    }

    fn to_dict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!(
            "LabeledAd(id={:?}, stance={:?})",
            self.inner.ad.id,
            self.inner.stance.as_str()
        )
    }
}

/// The funder registry: entity name → organization type and known stance.
#[pyclass(module = "adsoup_py")]
struct Registry {
    inner: corpus::Registry,
}

#[pymethods]
impl Registry {
    /// Build from rows shaped like
    /// `{"name": ..., "entity_type": ..., "stance": ... | None}`.
    #[staticmethod]
    fn from_rows(rows: &Bound<'_, PyAny>) -> PyResult<Registry> {
        let entities: Vec<corpus::FundingEntity> = from_py(rows)?;
        Ok(Registry {
            inner: corpus::Registry::from_entities(entities).map_err(pyerr)?,
        })
    }

    #[staticmethod]
    fn load_csv(path: PathBuf) -> PyResult<Registry> {
        Ok(Registry {
            inner: corpus::Registry::load_csv(&path).map_err(pyerr)?,
        })
    }

    fn save_csv(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_csv(&path).map_err(pyerr)
    }

    fn get(&self, py: Python<'_>, name: &str) -> PyResult<Option<Py<PyAny>>> {
        self.inner.get(name).map(|e| to_py(py, e)).transpose()
    }

    fn rows(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let all: Vec<&corpus::FundingEntity> = self.inner.iter().collect();
        to_py(py, &all)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Registry({} entities)", self.inner.len())
    }
}

/// A disjoint train/val/test partition of funding entities.
#[pyclass(module = "adsoup_py")]
struct SplitAssignment {
    inner: corpus::SplitAssignment,
}

#[pymethods]
impl SplitAssignment {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<SplitAssignment> {
        let text = std::fs::read_to_string(&path).map_err(pyerr)?;
        Ok(SplitAssignment {
            inner: serde_json::from_str(&text).map_err(pyerr)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        corpus::write_split(&self.inner, &path).map_err(pyerr)
    }

    fn split_of(&self, entity: &str) -> Option<&'static str> {
        self.inner.split_of(entity).map(|s| match s {
            corpus::Split::Train => "train",
            corpus::Split::Val => "val",
            corpus::Split::Test => "test",
        })
    }

    fn counts(&self) -> BTreeMap<&'static str, usize> {
        [
            ("train", self.inner.count(corpus::Split::Train)),
            ("val", self.inner.count(corpus::Split::Val)),
            ("test", self.inner.count(corpus::Split::Test)),
        ]
        .into()
    }

    /// The subset of `labeled` whose entities landed in `split`.
    fn ads_in(&self, labeled: Vec<PyRef<'_, LabeledAd>>, split: &str) -> PyResult<Vec<LabeledAd>> {
        let split = parse_split(split)?;
        let owned: Vec<corpus::LabeledAd> = labeled.iter().map(|l| l.inner.clone()).collect();
        Ok(self
            .inner
            .ads_in(&owned, split)
            .into_iter()
            .map(|l| LabeledAd { inner: l.clone() })
            .collect())
    }

    fn to_dict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "SplitAssignment(train={}, val={}, test={})",
            c.count(corpus::Split::Train),
            c.count(corpus::Split::Val),
            c.count(corpus::Split::Test)
        )
    }
}

// ---------------------------------------------------------------------------
// Encoder types
// ---------------------------------------------------------------------------

/// Frequency-ranked token table with reserved PAD/UNK/SEP slots.
#[pyclass(module = "adsoup_py", skip_from_py_object)]
#[derive(Clone)]
struct Vocabulary {
    inner: embedder::Vocabulary,
}

#[pymethods]
impl Vocabulary {
    /// Build from raw texts, keeping the `max_size` most frequent tokens;
    /// `forced` tokens are always included.
    #[staticmethod]
    #[pyo3(signature = (texts, max_size, forced = None))]
    fn build(texts: Vec<String>, max_size: usize, forced: Option<Vec<String>>) -> Vocabulary {
        Vocabulary {
            inner: embedder::Vocabulary::build(
                texts.iter().map(|s| s.as_str()),
                max_size,
                &forced.unwrap_or_default(),
            ),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Vocabulary> {
        Ok(Vocabulary {
            inner: embedder::Vocabulary::load(&path).map_err(pyerr)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(pyerr)
    }

    fn id_of(&self, token: &str) -> usize {
        self.inner.id_of(token)
    }

    fn contains(&self, token: &str) -> bool {
        self.inner.contains(token)
    }

    /// Token ids for a text, truncated to the model's max sequence length.
    fn encode_ids(&self, text: &str) -> Vec<usize> {
        self.inner.encode_ids(text)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Vocabulary({} tokens)", self.inner.len())
    }
}

/// The trained sentence encoder: mean-pooled embeddings through a tanh
/// projection, L2-normalized to the unit sphere.
#[pyclass(module = "adsoup_py")]
struct Encoder {
    inner: embedder::Encoder,
}

#[pymethods]
impl Encoder {
    /// Load from a saved checkpoint stem (`<stem>.json` + `<stem>.bin`) and
    /// its vocabulary file.
    #[staticmethod]
    fn load(stem: PathBuf, vocab_path: PathBuf) -> PyResult<Encoder> {
        let vocab = embedder::Vocabulary::load(&vocab_path).map_err(pyerr)?;
        let checkpoint = nncore::Checkpoint::load(&stem).map_err(pyerr)?;
        let params = embedder::EncoderParams::from_params(&checkpoint.params).map_err(pyerr)?;
        Ok(Encoder {
            inner: embedder::Encoder { vocab, params },
        })
    }

    /// Unit-normalized embedding of a text.
    fn encode(&self, text: &str) -> PyResult<Vec<f64>> {
        self.inner.encode(text).map_err(pyerr)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.params.dim()
    }

    #[getter]
    fn vocab(&self) -> Vocabulary {
        Vocabulary {
            inner: self.inner.vocab.clone(),
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "Encoder(dim={}, vocab={})",
            self.inner.params.dim(),
            self.inner.vocab.len()
        )
    }
}

// ---------------------------------------------------------------------------
// Themes
// ---------------------------------------------------------------------------

/// The fixed narrative bank: themes with sides and exemplar phrases.
#[pyclass(module = "adsoup_py")]
struct ThemeBank {
    inner: themes::ThemeBank,
}

#[pymethods]
impl ThemeBank {
    /// The bank shipped with the library.
    #[staticmethod]
    fn shipped() -> ThemeBank {
        ThemeBank {
            inner: themes::ThemeBank::shipped(),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<ThemeBank> {
        Ok(ThemeBank {
            inner: themes::ThemeBank::load(&path).map_err(pyerr)?,
        })
    }

    #[staticmethod]
    fn parse(json: &str) -> PyResult<ThemeBank> {
        Ok(ThemeBank {
            inner: themes::ThemeBank::parse(json).map_err(pyerr)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(pyerr)
    }

    fn ids(&self) -> Vec<String> {
        self.inner.ids()
    }

    /// Deduplicated marker tokens derived from theme ids — force these into
    /// the vocabulary so theme prefixes never collapse to UNK.
    fn id_tokens(&self) -> Vec<String> {
        self.inner.id_tokens()
    }

    fn side_of(&self, py: Python<'_>, id: &str) -> PyResult<Option<Py<PyAny>>> {
        self.inner.side_of(id).map(|s| to_py(py, &s)).transpose()
    }

    fn themes(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.themes())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("ThemeBank({} themes)", self.inner.len())
    }
}

// ---------------------------------------------------------------------------
// Checkpoints and examples
// ---------------------------------------------------------------------------

/// A dense-f64 weight snapshot: named tensors plus sweep provenance
/// (shared init id, hyperparameters, validation accuracy, free-form meta).
#[pyclass(module = "adsoup_py", skip_from_py_object)]
#[derive(Clone)]
struct Checkpoint {
    inner: nncore::Checkpoint,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(stem: PathBuf) -> PyResult<Checkpoint> {
        Ok(Checkpoint {
            inner: nncore::Checkpoint::load(&stem).map_err(pyerr)?,
        })
    }

    /// Write `<stem>.json` + `<stem>.bin`; returns both paths.
    fn save(&self, stem: PathBuf) -> PyResult<(PathBuf, PathBuf)> {
        self.inner.save(&stem).map_err(pyerr)
    }

    #[getter]
    fn val_accuracy(&self) -> Option<f64> {
        self.inner.val_accuracy
    }

    #[getter]
    fn shared_init_id(&self) -> &str {
        &self.inner.shared_init_id
    }

    #[getter]
    fn hyper(&self, py: Python<'_>) -> PyResult<Option<Py<PyAny>>> {
        self.inner.hyper.as_ref().map(|h| to_py(py, h)).transpose()
    }

    #[getter]
    fn meta(&self) -> BTreeMap<String, String> {
        self.inner.meta.clone()
    }

    /// Tensor names with shapes, in canonical order: `[(name, rows, cols)]`.
    fn schema(&self) -> Vec<(String, usize, usize)> {
        self.inner.params.schema()
    }

    /// One tensor as a list of rows.
    fn tensor(&self, name: &str) -> PyResult<Vec<Vec<f64>>> {
        let t = self
            .inner
            .params
            .get(name)
            .map_err(|e| PyKeyError::new_err(e.to_string()))?;
        Ok((0..t.rows()).map(|r| t.row(r).to_vec()).collect())
    }

    /// Every parameter concatenated into one flat vector (schema order).
    fn to_vector(&self) -> Vec<f64> {
        nncore::flatten(&self.inner.params)
    }

    fn __repr__(&self) -> String {
        let n: usize = self
            .inner
            .params
            .schema()
            .iter()
            .map(|(_, r, c)| r * c)
            .sum();
        match self.inner.val_accuracy {
            Some(v) => format!("Checkpoint({n} params, val_accuracy={v:.4})"),
            None => format!("Checkpoint({n} params)"),
        }
    }
}

/// Composed classifier inputs: token ids plus the gold stance per ad.
#[pyclass(module = "adsoup_py")]
struct ExampleSet {
    inner: Vec<stance::StanceExample>,
}

#[pymethods]
impl ExampleSet {
    fn ad_ids(&self) -> Vec<String> {
        self.inner.iter().map(|e| e.ad_id.clone()).collect()
    }

    fn labels(&self) -> Vec<&'static str> {
        self.inner.iter().map(|e| e.label.as_str()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("ExampleSet({} examples)", self.inner.len())
    }
}

// ---------------------------------------------------------------------------
// Corpus operations
// ---------------------------------------------------------------------------

/// Read a corpus file (JSONL or CSV by extension unless `format` is given).
/// Returns `(ads, rejected)` where `rejected` holds per-row diagnostics.
#[pyfunction]
#[pyo3(signature = (path, format = None))]
fn ingest(py: Python<'_>, path: PathBuf, format: Option<&str>) -> PyResult<(Vec<Ad>, Py<PyAny>)> {
    let format = match format {
        Some(s) => corpus::CorpusFormat::parse(s)
            .ok_or_else(|| PyValueError::new_err(format!("unknown corpus format `{s}`")))?,
        None => corpus::CorpusFormat::from_path(&path),
    };
    let report = corpus::ingest(&path, format).map_err(pyerr)?;
    let rejected = to_py(py, &report.rejected)?;
    let ads = report
        .records
        .into_iter()
        .map(|inner| Ad { inner })
        .collect();
    Ok((ads, rejected))
}

#[pyfunction]
fn write_jsonl(ads: Vec<PyRef<'_, Ad>>, path: PathBuf) -> PyResult<()> {
    let records: Vec<corpus::AdRecord> = ads.iter().map(|a| a.inner.clone()).collect();
    corpus::write_jsonl(&records, &path).map_err(pyerr)
}

/// The built-in energy/climate keyword list used for corpus filtering.
#[pyfunction]
fn default_keywords() -> Vec<String> {
    corpus::default_keywords()
}

/// Keep ads whose searchable text matches any keyword (word-boundary,
/// case-insensitive).
#[pyfunction]
fn filter_keywords(ads: Vec<PyRef<'_, Ad>>, keywords: Vec<String>) -> PyResult<Vec<Ad>> {
    let records: Vec<corpus::AdRecord> = ads.iter().map(|a| a.inner.clone()).collect();
    Ok(corpus::filter_keywords(&records, &keywords)
        .map_err(pyerr)?
        .into_iter()
        .map(|inner| Ad { inner })
        .collect())
}

/// Label each ad with its funder's registry stance. Ads from unknown or
/// unregistered funders come back in the second (unlabeled) list.
#[pyfunction]
fn propagate_stance(
    ads: Vec<PyRef<'_, Ad>>,
    registry: PyRef<'_, Registry>,
) -> (Vec<LabeledAd>, Vec<Ad>) {
    let records: Vec<corpus::AdRecord> = ads.iter().map(|a| a.inner.clone()).collect();
    let (labeled, unlabeled) = corpus::propagate_stance(&records, &registry.inner);
    (
        labeled.into_iter().map(|inner| LabeledAd { inner }).collect(),
        unlabeled.into_iter().map(|inner| Ad { inner }).collect(),
    )
}

/// Partition funding entities (not ads) into train/val/test so no entity
/// straddles splits.
#[pyfunction]
#[pyo3(signature = (labeled, seed = 13, test_frac = 0.2, val_frac = 0.2))]
fn split_by_entity(
    labeled: Vec<PyRef<'_, LabeledAd>>,
    seed: u64,
    test_frac: f64,
    val_frac: f64,
) -> PyResult<SplitAssignment> {
    let owned: Vec<corpus::LabeledAd> = labeled.iter().map(|l| l.inner.clone()).collect();
    Ok(SplitAssignment {
        inner: corpus::split_by_entity(&owned, seed, test_frac, val_frac).map_err(pyerr)?,
    })
}

// ---------------------------------------------------------------------------
// Encoder operations
// ---------------------------------------------------------------------------

/// Lowercased word tokens, punctuation stripped.
#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    embedder::tokenize(text)
}

#[pyfunction]
fn cosine(a: Vec<f64>, b: Vec<f64>) -> f64 {
    embedder::cosine(&a, &b)
}

/// Train the contrastive encoder on (title+description, body) pairs drawn
/// from the ads. Returns the encoder, its raw checkpoint (the shared init
/// for stance fine-tuning), and per-epoch losses.
#[pyfunction]
#[pyo3(signature = (ads, vocab, dim = 32, epochs = 5, batch_size = 32, learning_rate = 1e-3, seed = 42))]
#[allow(clippy::too_many_arguments)]
fn train_encoder(
    py: Python<'_>,
    ads: Vec<PyRef<'_, Ad>>,
    vocab: PyRef<'_, Vocabulary>,
    dim: usize,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    seed: u64,
) -> PyResult<(Encoder, Checkpoint, Vec<f64>)> {
    let records: Vec<corpus::AdRecord> = ads.iter().map(|a| a.inner.clone()).collect();
    let vocab = vocab.inner.clone();
    let pairs = embedder::make_pairs(&records, &vocab);
    let config = embedder::TrainConfig {
        epochs,
        batch_size,
        learning_rate,
        seed,
    };
    let outcome = py
        .detach(|| embedder::train_contrastive(&pairs, &vocab, dim, &config))
        .map_err(pyerr)?;
    let params = embedder::EncoderParams::from_params(&outcome.checkpoint.params).map_err(pyerr)?;
    Ok((
        Encoder {
            inner: embedder::Encoder {
                vocab,
                params,
            },
        },
        Checkpoint {
            inner: outcome.checkpoint,
        },
        outcome.epoch_losses,
    ))
}

// ---------------------------------------------------------------------------
// Theme operations
// ---------------------------------------------------------------------------

/// Ground every ad to its nearest theme by max phrase cosine. Returns rows
/// shaped like `{"ad_id", "theme_id", "score", "runner_up"}`.
#[pyfunction]
fn assign_themes(
    py: Python<'_>,
    ads: Vec<PyRef<'_, Ad>>,
    encoder: PyRef<'_, Encoder>,
    bank: PyRef<'_, ThemeBank>,
) -> PyResult<Py<PyAny>> {
    let records: Vec<corpus::AdRecord> = ads.iter().map(|a| a.inner.clone()).collect();
    let assignments =
        themes::assign_all(&records, &encoder.inner, &bank.inner).map_err(pyerr)?;
    to_py(py, &assignments)
}

/// Score assignments against gold `ad id → theme id` annotations.
#[pyfunction]
fn eval_themes(
    py: Python<'_>,
    assignments: &Bound<'_, PyAny>,
    annotations: BTreeMap<String, String>,
    bank: PyRef<'_, ThemeBank>,
) -> PyResult<Py<PyAny>> {
    let assignments: Vec<themes::ThemeAssignment> = from_py(assignments)?;
    let report = themes::eval_themes(&assignments, &annotations, &bank.inner).map_err(pyerr)?;
    to_py(py, &report)
}

// ---------------------------------------------------------------------------
// Stance operations
// ---------------------------------------------------------------------------

/// The seeded 10-point log-uniform learning-rate × weight-decay grid.
#[pyfunction]
fn default_grid(py: Python<'_>, seed: u64) -> PyResult<Py<PyAny>> {
    to_py(py, &stance::default_grid(seed))
}

/// Compose classifier inputs from labeled ads, optionally prefixing each
/// body with its assigned theme marker tokens.
#[pyfunction]
#[pyo3(signature = (labeled, vocab, assignments = None))]
fn make_examples(
    labeled: Vec<PyRef<'_, LabeledAd>>,
    vocab: PyRef<'_, Vocabulary>,
    assignments: Option<&Bound<'_, PyAny>>,
) -> PyResult<ExampleSet> {
    let owned: Vec<corpus::LabeledAd> = labeled.iter().map(|l| l.inner.clone()).collect();
    let map: Option<BTreeMap<String, themes::ThemeAssignment>> = assignments
        .map(|obj| {
            let list: Vec<themes::ThemeAssignment> = from_py(obj)?;
            Ok::<_, PyErr>(list.into_iter().map(|a| (a.ad_id.clone(), a)).collect())
        })
        .transpose()?;
    Ok(ExampleSet {
        inner: stance::make_examples(&owned, map.as_ref(), &vocab.inner).map_err(pyerr)?,
    })
}

/// Fine-tune the classifier once with explicit hyperparameters, e.g.
/// `{"learning_rate": 1e-3, "weight_decay": 1e-4, "epochs": 10,
///   "batch_size": 32, "seed": 1234}`.
#[pyfunction]
fn finetune(
    py: Python<'_>,
    init: PyRef<'_, Checkpoint>,
    train: PyRef<'_, ExampleSet>,
    val: PyRef<'_, ExampleSet>,
    hyper: &Bound<'_, PyAny>,
) -> PyResult<Checkpoint> {
    let hyper: nncore::HyperConfig = from_py(hyper)?;
    let init = init.inner.clone();
    let train_ex: Vec<stance::StanceExample> = train.inner.clone();
    let val_ex: Vec<stance::StanceExample> = val.inner.clone();
    let out = py
        .detach(|| stance::finetune(&init, &train_ex, &val_ex, &hyper))
        .map_err(pyerr)?;
    Ok(Checkpoint { inner: out })
}

/// Fine-tune one classifier per grid point from a shared init.
#[pyfunction]
fn sweep(
    py: Python<'_>,
    init: PyRef<'_, Checkpoint>,
    train: PyRef<'_, ExampleSet>,
    val: PyRef<'_, ExampleSet>,
    grid: &Bound<'_, PyAny>,
) -> PyResult<Vec<Checkpoint>> {
    let grid: Vec<nncore::HyperConfig> = from_py(grid)?;
    let init = init.inner.clone();
    let train_ex: Vec<stance::StanceExample> = train.inner.clone();
    let val_ex: Vec<stance::StanceExample> = val.inner.clone();
    let out = py
        .detach(|| stance::sweep(&init, &train_ex, &val_ex, &grid))
        .map_err(pyerr)?;
    Ok(out.into_iter().map(|inner| Checkpoint { inner }).collect())
}

/// Fraction of examples whose argmax prediction matches the gold stance.
#[pyfunction]
fn evaluate_accuracy(
    model: PyRef<'_, Checkpoint>,
    examples: PyRef<'_, ExampleSet>,
) -> PyResult<f64> {
    stance::evaluate_accuracy(&model.inner, &examples.inner).map_err(pyerr)
}

/// Per-ad predictions: `{"ad_id", "label", "probabilities"}`.
#[pyfunction]
fn predict_stance(
    py: Python<'_>,
    model: PyRef<'_, Checkpoint>,
    examples: PyRef<'_, ExampleSet>,
) -> PyResult<Py<PyAny>> {
    let preds = stance::predict(&model.inner, &examples.inner).map_err(pyerr)?;
    to_py(py, &preds)
}

// ---------------------------------------------------------------------------
// Soup operations
// ---------------------------------------------------------------------------

/// Average all checkpoints coordinate-wise. Returns the soup and the
/// ingredient indices (always every input).
#[pyfunction]
fn uniform_soup(checkpoints: Vec<PyRef<'_, Checkpoint>>) -> PyResult<(Checkpoint, Vec<usize>)> {
    let owned: Vec<nncore::Checkpoint> = checkpoints.iter().map(|c| c.inner.clone()).collect();
    let result = soup::uniform_soup(&owned).map_err(pyerr)?;
    Ok((
        Checkpoint {
            inner: result.checkpoint,
        },
        result.ingredients,
    ))
}

/// Greedy soup: visit candidates in descending recorded validation accuracy
/// and keep each only if the re-averaged soup's accuracy on `val` does not
/// degrade (or strictly improves, with `strict=True`). Returns the soup, the
/// kept ingredient indices, and the full decision trace.
#[pyfunction]
#[pyo3(signature = (checkpoints, val, strict = false))]
fn greedy_soup(
    py: Python<'_>,
    checkpoints: Vec<PyRef<'_, Checkpoint>>,
    val: PyRef<'_, ExampleSet>,
    strict: bool,
) -> PyResult<(Checkpoint, Vec<usize>, Py<PyAny>)> {
    let owned: Vec<nncore::Checkpoint> = checkpoints.iter().map(|c| c.inner.clone()).collect();
    let val_ex: Vec<stance::StanceExample> = val.inner.clone();
    let result = py
        .detach(|| {
            soup::greedy_soup_with(
                &owned,
                |c| {
                    stance::evaluate_accuracy(c, &val_ex)
                        .map_err(|e| soup::SoupError::Eval(e.to_string()))
                },
                soup::GreedyOptions { strict },
            )
        })
        .map_err(pyerr)?;
    let trace = to_py(py, &result.trace)?;
    Ok((
        Checkpoint {
            inner: result.checkpoint,
        },
        result.ingredients,
        trace,
    ))
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

#[pyfunction]
fn accuracy(pred: Vec<String>, gold: Vec<String>) -> PyResult<f64> {
    metrics::accuracy(&pred, &gold).map_err(pyerr)
}

/// Accuracy, macro-F1, and per-class precision/recall/F1 over a declared
/// class set.
#[pyfunction]
fn classification_report(
    py: Python<'_>,
    pred: Vec<String>,
    gold: Vec<String>,
    classes: Vec<String>,
) -> PyResult<Py<PyAny>> {
    let report = metrics::classification_report(&pred, &gold, &classes).map_err(pyerr)?;
    to_py(py, &report)
}

/// Pearson chi-square test of independence on an r×c count table.
#[pyfunction]
fn chi_square(
    py: Python<'_>,
    counts: Vec<Vec<f64>>,
    row_labels: Vec<String>,
    col_labels: Vec<String>,
) -> PyResult<Py<PyAny>> {
    let table = metrics::ContingencyTable::new(row_labels, col_labels, counts).map_err(pyerr)?;
    let report = metrics::chi_square(&table).map_err(pyerr)?;
    to_py(py, &report)
}

/// Chi-square survival function P(X ≥ x) at `df` degrees of freedom.
#[pyfunction]
fn chi2_sf(x: f64, df: u64) -> PyResult<f64> {
    metrics::chi2_sf(x, df).map_err(pyerr)
}

// ---------------------------------------------------------------------------
// Analytics
// ---------------------------------------------------------------------------

fn parse_weight_kind(s: &str) -> PyResult<analytics::WeightKind> {
    analytics::WeightKind::parse(s)
        .ok_or_else(|| PyValueError::new_err(format!("unknown weight kind `{s}`")))
}

fn parse_axis(s: &str) -> PyResult<analytics::DemoAxis> {
    match s {
        "gender" => Ok(analytics::DemoAxis::Gender),
        "age" => Ok(analytics::DemoAxis::Age),
        other => Err(PyValueError::new_err(format!(
            "unknown demographic axis `{other}` (expected `gender` or `age`)"
        ))),
    }
}

fn labeled_vec(ads: &[PyRef<'_, LabeledAd>]) -> Vec<corpus::LabeledAd> {
    ads.iter().map(|l| l.inner.clone()).collect()
}

/// Keep only ads whose predicted stance (rows from `predict_stance`) matches
/// their propagated label.
#[pyfunction]
fn filter_correct(
    ads: Vec<PyRef<'_, LabeledAd>>,
    predictions: &Bound<'_, PyAny>,
) -> PyResult<Vec<LabeledAd>> {
    let preds: Vec<stance::StancePrediction> = from_py(predictions)?;
    Ok(analytics::filter_correct(&labeled_vec(&ads), &preds)
        .map_err(pyerr)?
        .into_iter()
        .map(|inner| LabeledAd { inner })
        .collect())
}

/// Within-stance share of each theme, weighted by `weight_kind`
/// (`ad_count`, `spend_mid`, or `impressions_mid`). `themes` maps
/// ad id → theme id.
#[pyfunction]
fn theme_distribution(
    py: Python<'_>,
    ads: Vec<PyRef<'_, LabeledAd>>,
    themes: BTreeMap<String, String>,
    weight_kind: &str,
) -> PyResult<Py<PyAny>> {
    let dist =
        analytics::theme_distribution(&labeled_vec(&ads), &themes, parse_weight_kind(weight_kind)?);
    to_py(py, &dist)
}

/// Impression-weighted viewer-share distribution over a demographic axis
/// (`gender` or `age`), grouped by stance.
#[pyfunction]
fn demo_distribution(
    py: Python<'_>,
    ads: Vec<PyRef<'_, LabeledAd>>,
    axis: &str,
) -> PyResult<Py<PyAny>> {
    let dist = analytics::demo_distribution(&labeled_vec(&ads), parse_axis(axis)?);
    to_py(py, &dist)
}

/// Impression-weighted state distribution, grouped by stance.
#[pyfunction]
fn geo_distribution(py: Python<'_>, ads: Vec<PyRef<'_, LabeledAd>>) -> PyResult<Py<PyAny>> {
    to_py(py, &analytics::geo_distribution(&labeled_vec(&ads)))
}

/// The `n` heaviest funders per stance under the given weighting.
#[pyfunction]
fn top_funders(
    py: Python<'_>,
    ads: Vec<PyRef<'_, LabeledAd>>,
    n: usize,
    weight_kind: &str,
) -> PyResult<Py<PyAny>> {
    let rows = analytics::top_funders(&labeled_vec(&ads), n, parse_weight_kind(weight_kind)?);
    to_py(py, &rows)
}

/// Stance × demographic-bucket contingency table, weighted by `ad_count` or
/// `impressions`, ready for `chi_square`.
#[pyfunction]
fn stance_contingency(
    py: Python<'_>,
    ads: Vec<PyRef<'_, LabeledAd>>,
    axis: &str,
    weighting: &str,
) -> PyResult<Py<PyAny>> {
    let weighting = analytics::ContingencyWeight::parse(weighting)
        .ok_or_else(|| PyValueError::new_err(format!("unknown weighting `{weighting}`")))?;
    let table = analytics::stance_contingency(&labeled_vec(&ads), parse_axis(axis)?, weighting)
        .map_err(pyerr)?;
    to_py(py, &table)
}

// ---------------------------------------------------------------------------
// Synthetic corpus and pipeline stages
// ---------------------------------------------------------------------------

/// Generate a synthetic labeled corpus: ads (bodies quote theme phrases),
/// the funder registry, and gold ad → theme annotations.
#[pyfunction]
#[pyo3(signature = (n_entities = 48, ads_per_entity = 44, unknown_entities = 2, description_rate = 0.7, seed = 7))]
fn synth_corpus(
    n_entities: usize,
    ads_per_entity: usize,
    unknown_entities: usize,
    description_rate: f64,
    seed: u64,
) -> PyResult<(Vec<Ad>, Registry, BTreeMap<String, String>)> {
    let config = synth::SynthConfig {
        n_entities,
        ads_per_entity,
        unknown_entities,
        description_rate,
        seed,
    };
    let out = synth::generate(&config);
    let registry = Registry {
        inner: corpus::Registry::from_entities(out.entities).map_err(pyerr)?,
    };
    Ok((
        out.ads.into_iter().map(|inner| Ad { inner }).collect(),
        registry,
        out.annotations,
    ))
}

/// Run one pipeline stage (`ingest`, `split`, `train-embed`, `assign-themes`,
/// `sweep`, `soup`, `eval`, or `analyze`) against a pipeline config file.
/// Returns the stage manifest.
#[pyfunction]
fn run_stage(py: Python<'_>, config_path: PathBuf, stage: &str) -> PyResult<Py<PyAny>> {
    let config = cli::RunConfig::load(&config_path).map_err(pyerr)?;
    config.validate().map_err(pyerr)?;
    let run = match stage {
        "ingest" => cli::stage_ingest,
        "split" => cli::stage_split,
        "train-embed" => cli::stage_train_embed,
        "assign-themes" => cli::stage_assign_themes,
        "sweep" => cli::stage_sweep,
        "soup" => cli::stage_soup,
        "eval" => cli::stage_eval,
        "analyze" => cli::stage_analyze,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown stage `{other}` (expected one of {:?})",
                cli::STAGES
            )))
        }
    };
    let manifest = py.detach(|| run(&config)).map_err(pyerr)?;
    to_py(py, &manifest)
}

/// Run all eight stages in order; returns their manifests.
#[pyfunction]
fn run_pipeline(py: Python<'_>, config_path: PathBuf) -> PyResult<Py<PyAny>> {
    let manifests = cli::STAGES
        .iter()
        .map(|stage| run_stage(py, config_path.clone(), stage))
        .collect::<PyResult<Vec<_>>>()?;
    let list = PyList::new(py, manifests)?;
    list.into_py_any(py)
}

// ---------------------------------------------------------------------------
// Module
// ---------------------------------------------------------------------------

#[pymodule]
fn adsoup_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Ad>()?;
    m.add_class::<LabeledAd>()?;
    m.add_class::<Registry>()?;
    m.add_class::<SplitAssignment>()?;
    m.add_class::<Vocabulary>()?;
    m.add_class::<Encoder>()?;
    m.add_class::<ThemeBank>()?;
    m.add_class::<Checkpoint>()?;
    m.add_class::<ExampleSet>()?;

    m.add_function(wrap_pyfunction!(ingest, m)?)?;
    m.add_function(wrap_pyfunction!(write_jsonl, m)?)?;
    m.add_function(wrap_pyfunction!(default_keywords, m)?)?;
    m.add_function(wrap_pyfunction!(filter_keywords, m)?)?;
    m.add_function(wrap_pyfunction!(propagate_stance, m)?)?;
    m.add_function(wrap_pyfunction!(split_by_entity, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    m.add_function(wrap_pyfunction!(train_encoder, m)?)?;
    m.add_function(wrap_pyfunction!(assign_themes, m)?)?;
    m.add_function(wrap_pyfunction!(eval_themes, m)?)?;
    m.add_function(wrap_pyfunction!(default_grid, m)?)?;
    m.add_function(wrap_pyfunction!(make_examples, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(predict_stance, m)?)?;
    m.add_function(wrap_pyfunction!(uniform_soup, m)?)?;
    m.add_function(wrap_pyfunction!(greedy_soup, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(classification_report, m)?)?;
    m.add_function(wrap_pyfunction!(chi_square, m)?)?;
    m.add_function(wrap_pyfunction!(chi2_sf, m)?)?;
    m.add_function(wrap_pyfunction!(filter_correct, m)?)?;
    m.add_function(wrap_pyfunction!(theme_distribution, m)?)?;
    m.add_function(wrap_pyfunction!(demo_distribution, m)?)?;
    m.add_function(wrap_pyfunction!(geo_distribution, m)?)?;
    m.add_function(wrap_pyfunction!(top_funders, m)?)?;
    m.add_function(wrap_pyfunction!(stance_contingency, m)?)?;
    m.add_function(wrap_pyfunction!(synth_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(run_stage, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;

    m.add("MNRL_SCALE", embedder::MNRL_SCALE)?;
    m.add("MAX_SEQ_LEN", embedder::MAX_SEQ_LEN)?;
    m.add("STANCE_LABELS", corpus::StanceLabel::ALL.map(|l| l.as_str()))?;
    m.add("STAGES", cli::STAGES)?;
    Ok(())
}
