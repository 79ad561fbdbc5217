//! Weight averaging over fine-tuned checkpoints ("model soups").
//!
//! Two recipes: the uniform soup takes the coordinate-wise mean of every
//! checkpoint, and the greedy soup visits checkpoints in descending
//! validation accuracy, keeping each one only if the re-averaged soup does
//! not degrade validation accuracy. Both refuse to mix checkpoints that were
//! not fine-tuned from the same shared initialization — averaging across
//! unrelated initializations is meaningless.

use thiserror::Error;

use crate::nncore::{Checkpoint, NnError, ParamSet, Tensor2};

#[derive(Debug, Error)]
pub enum SoupError {
    #[error("no checkpoints to average")]
    EmptyInput,
    #[error("mixed shared initializations: `{a}` vs `{b}`")]
    MixedInit { a: String, b: String },
    #[error("checkpoint {index} schema differs from the first: {detail}")]
    SchemaMismatch { index: usize, detail: String },
    #[error("checkpoint {0} has no recorded validation accuracy")]
    MissingValAccuracy(usize),
    #[error("checkpoint {0} has a non-finite validation accuracy")]
    NonFiniteValAccuracy(usize),
    #[error("validation evaluation failed: {0}")]
    Eval(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, SoupError>;

/// One step of a greedy-soup run: the candidate visited, whether it was
/// kept, and the soup's validation accuracy after the decision.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TraceStep {
    /// Index of the candidate in the input checkpoint list.
    pub candidate: usize,
    pub accepted: bool,
    pub val_accuracy_after: f64,
}

/// An averaged checkpoint plus the provenance of its ingredients.
#[derive(Debug)]
pub struct SoupResult {
    pub checkpoint: Checkpoint,
    /// Indices of the kept ingredients, in inclusion order.
    pub ingredients: Vec<usize>,
    /// Greedy inclusion trace (empty for the uniform soup, which evaluates
    /// nothing).
    pub trace: Vec<TraceStep>,
}

fn check_same_family(checkpoints: &[&Checkpoint]) -> Result<()> {
    let first = checkpoints
        .first()
        .ok_or(SoupError::EmptyInput)?;
    let schema = first.params.schema();
    for (index, c) in checkpoints.iter().enumerate().skip(1) {
        if c.shared_init_id != first.shared_init_id {
            return Err(SoupError::MixedInit {
                a: first.shared_init_id.clone(),
                b: c.shared_init_id.clone(),
            });
        }
        let other = c.params.schema();
        if other != schema {
            return Err(SoupError::SchemaMismatch {
                index,
                detail: format!("expected {schema:?}, got {other:?}"),
            });
        }
    }
    Ok(())
}

/// Coordinate-wise mean of the ingredients' parameters, computed in the
/// delta form `x₁ + (Σᵢ₌₂..k (xᵢ − x₁))/k`. The summation order is fixed
/// (ingredient order, per coordinate), so results are reproducible bit for
/// bit, and averaging identical checkpoints is exact — every delta is zero.
fn mean_params(checkpoints: &[&Checkpoint]) -> Result<ParamSet> {
    check_same_family(checkpoints)?;
    let k = checkpoints.len() as f64;
    let schema = checkpoints[0].params.schema();
    let mut out = ParamSet::new();
    for (name, rows, cols) in &schema {
        let base = checkpoints[0].params.get(name)?.data();
        let mut deltas = vec![0.0; base.len()];
        for c in &checkpoints[1..] {
            for ((d, &v), &b) in deltas
                .iter_mut()
                .zip(c.params.get(name)?.data())
                .zip(base)
            {
                *d += v - b;
            }
        }
        let mean: Vec<f64> = base
            .iter()
            .zip(&deltas)
            .map(|(&b, &d)| b + d / k)
            .collect();
        out.push(name, Tensor2::from_flat(*rows, *cols, mean)?)?;
    }
    Ok(out)
}

/// Average every checkpoint with equal weight.
///
/// The result's parameters are the exact coordinate-wise arithmetic mean
/// (fixed summation order); its validation accuracy is left unset — evaluate
/// the soup like any other model.
pub fn uniform_soup(checkpoints: &[Checkpoint]) -> Result<SoupResult> {
    let refs: Vec<&Checkpoint> = checkpoints.iter().collect();
    let params = mean_params(&refs)?;
    let mut checkpoint = Checkpoint::new(params, &checkpoints[0].shared_init_id);
    checkpoint
        .meta
        .insert("soup".into(), "uniform".into());
    checkpoint
        .meta
        .insert("ingredients".into(), format!("{}", checkpoints.len()));
    Ok(SoupResult {
        checkpoint,
        ingredients: (0..checkpoints.len()).collect(),
        trace: Vec::new(),
    })
}

/// Options for [`greedy_soup_with`].
#[derive(Debug, Clone, Copy, Default)]
pub struct GreedyOptions {
    /// Accept a candidate only if validation accuracy strictly improves.
    /// The default (false) keeps candidates that match the current accuracy,
    /// the usual soup recipe.
    pub strict: bool,
}

/// Greedy soup with the default non-strict acceptance rule (keep a candidate
/// when the re-averaged soup's validation accuracy is ≥ the current one).
pub fn greedy_soup(
    checkpoints: &[Checkpoint],
    val_eval: impl FnMut(&Checkpoint) -> Result<f64>,
) -> Result<SoupResult> {
    greedy_soup_with(checkpoints, val_eval, GreedyOptions::default())
}

/// Greedy soup: candidates are visited in descending recorded validation
/// accuracy (ties broken by input order); each is tentatively re-averaged
/// into the full ingredient set and kept only if `val_eval` does not
/// degrade (or strictly improves, under [`GreedyOptions::strict`]).
pub fn greedy_soup_with(
    checkpoints: &[Checkpoint],
    mut val_eval: impl FnMut(&Checkpoint) -> Result<f64>,
    options: GreedyOptions,
) -> Result<SoupResult> {
    let refs: Vec<&Checkpoint> = checkpoints.iter().collect();
    check_same_family(&refs)?;
    let mut recorded = Vec::with_capacity(checkpoints.len());
    for (i, c) in checkpoints.iter().enumerate() {
        let v = c.val_accuracy.ok_or(SoupError::MissingValAccuracy(i))?;
        if !v.is_finite() {
            return Err(SoupError::NonFiniteValAccuracy(i));
        }
        recorded.push(v);
    }
    let mut order: Vec<usize> = (0..checkpoints.len()).collect();
    // Stable sort: descending recorded accuracy, ties keep input order.
    order.sort_by(|&a, &b| recorded[b].partial_cmp(&recorded[a]).unwrap());

    let best = order[0];
    let mut ingredients = vec![best];
    let mut current_soup = checkpoints[best].clone();
    let mut current_val = val_eval(&current_soup)?;
    let mut trace = vec![TraceStep {
        candidate: best,
        accepted: true,
        val_accuracy_after: current_val,
    }];
    for &candidate in &order[1..] {
        let mut tentative_ids = ingredients.clone();
        tentative_ids.push(candidate);
        let tentative_refs: Vec<&Checkpoint> =
            tentative_ids.iter().map(|&i| &checkpoints[i]).collect();
        let tentative = Checkpoint::new(
            mean_params(&tentative_refs)?,
            &checkpoints[best].shared_init_id,
        );
        let tentative_val = val_eval(&tentative)?;
        let keep = if options.strict {
            tentative_val > current_val
        } else {
            tentative_val >= current_val
        };
        if keep {
            ingredients = tentative_ids;
            current_soup = tentative;
            current_val = tentative_val;
        }
        trace.push(TraceStep {
            candidate,
            accepted: keep,
            val_accuracy_after: current_val,
        });
    }
    current_soup.val_accuracy = Some(current_val);
    current_soup.meta.insert("soup".into(), "greedy".into());
    current_soup
        .meta
        .insert("ingredients".into(), format!("{}", ingredients.len()));
    Ok(SoupResult {
        checkpoint: current_soup,
        ingredients,
        trace,
    })
}
