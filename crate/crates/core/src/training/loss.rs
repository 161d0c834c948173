//! The task MLE loss over target-word spans and the cosine embedding dialect
//! loss, with closed-form gradients for both.

use ndarray::{Array1, Array2, ArrayView1};

use crate::corpus::PairLabel;

use super::{BatchExample, TrainBatch, TrainError};

/// Mean over examples of the summed negative log-likelihood of the tokens in
/// each example's target span, each conditioned on its full prefix. Row `i-1`
/// of the logits (1-indexed) scores the token at position `i`.
pub fn task_loss(logits: &[Array2<f64>], batch: &TrainBatch) -> Result<f64, TrainError> {
    check_alignment(logits, batch)?;
    let mut total = 0.0;
    for (m, ex) in logits.iter().zip(batch.examples()) {
        total += example_span_loss(m, ex, None)?;
    }
    Ok(total / batch.n() as f64)
}

/// [`task_loss`] plus its gradient with respect to every logit row, already
/// divided by the example count.
pub fn task_loss_grads(
    logits: &[Array2<f64>],
    batch: &TrainBatch,
) -> Result<(f64, Vec<Array2<f64>>), TrainError> {
    check_alignment(logits, batch)?;
    let n = batch.n() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (m, ex) in logits.iter().zip(batch.examples()) {
        let mut g = Array2::zeros(m.dim());
        total += example_span_loss(m, ex, Some(&mut g))?;
        g /= n;
        grads.push(g);
    }
    Ok((total / n, grads))
}

/// Span loss for one example; accumulates `softmax - onehot` rows into `grad`
/// when given.
pub(crate) fn example_span_loss(
    logits: &Array2<f64>,
    ex: &BatchExample,
    mut grad: Option<&mut Array2<f64>>,
) -> Result<f64, TrainError> {
    let mut loss = 0.0;
    for pos in ex.loss_positions() {
        let row = logits.row(pos - 2);
        let token = ex.ids[pos - 1] as usize;
        if token >= row.len() {
            return Err(TrainError::LogitsShape {
                expected: ex.ids.len(),
                got: format!("{}x{}", logits.nrows(), logits.ncols()),
            });
        }
        let log_probs = log_softmax(row);
        loss -= log_probs[token];
        if let Some(g) = grad.as_deref_mut() {
            for (j, lp) in log_probs.iter().enumerate() {
                g[[pos - 2, j]] += lp.exp() - if j == token { 1.0 } else { 0.0 };
            }
        }
    }
    Ok(loss)
}

fn check_alignment(logits: &[Array2<f64>], batch: &TrainBatch) -> Result<(), TrainError> {
    if logits.len() != batch.n() {
        return Err(TrainError::LogitsShape {
            expected: batch.n(),
            got: format!("{} matrices", logits.len()),
        });
    }
    for (m, ex) in logits.iter().zip(batch.examples()) {
        if m.nrows() != ex.ids.len() {
            return Err(TrainError::LogitsShape {
                expected: ex.ids.len(),
                got: format!("{}x{}", m.nrows(), m.ncols()),
            });
        }
    }
    Ok(())
}

fn log_softmax(row: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_denom = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    row.mapv(|v| v - max - log_denom)
}

/// Cosine embedding loss between the frozen reference representation `rep_ref`
/// and the trainable dialect-side representation `rep_x`:
/// `1 - sim` for positives, `max(0, sim - margin)` for negatives.
pub fn dialect_loss(
    rep_ref: ArrayView1<'_, f64>,
    rep_x: ArrayView1<'_, f64>,
    label: PairLabel,
    margin: f64,
) -> Result<f64, TrainError> {
    let (loss, _) = cosine_loss_inner(rep_ref, rep_x, label, margin, false)?;
    Ok(loss)
}

/// [`dialect_loss`] plus its gradient with respect to `rep_x`. At the hinge
/// kink (`sim == margin`) the zero subgradient is used.
pub fn dialect_loss_grad(
    rep_ref: ArrayView1<'_, f64>,
    rep_x: ArrayView1<'_, f64>,
    label: PairLabel,
    margin: f64,
) -> Result<(f64, Array1<f64>), TrainError> {
    let (loss, grad) = cosine_loss_inner(rep_ref, rep_x, label, margin, true)?;
    Ok((loss, grad.expect("requested gradient")))
}

fn cosine_loss_inner(
    u: ArrayView1<'_, f64>,
    v: ArrayView1<'_, f64>,
    label: PairLabel,
    margin: f64,
    want_grad: bool,
) -> Result<(f64, Option<Array1<f64>>), TrainError> {
    if u.len() != v.len() {
        return Err(TrainError::DimMismatch(u.len(), v.len()));
    }
    let norm_u = u.dot(&u).sqrt();
    let norm_v = v.dot(&v).sqrt();
    if norm_u == 0.0 || norm_v == 0.0 {
        return Err(TrainError::ZeroVector);
    }
    let dot = u.dot(&v);
    let sim = dot / (norm_u * norm_v);
    let loss = match label {
        PairLabel::Positive => 1.0 - sim,
        PairLabel::Negative => (sim - margin).max(0.0),
    };
    if !want_grad {
        return Ok((loss, None));
    }
    // d sim / d v = u / (|u||v|) - sim * v / |v|^2
    let dsim = u.mapv(|ui| ui / (norm_u * norm_v)) - v.mapv(|vi| sim * vi / (norm_v * norm_v));
    let grad = match label {
        PairLabel::Positive => -dsim,
        PairLabel::Negative if sim > margin => dsim,
        PairLabel::Negative => Array1::zeros(v.len()),
    };
    Ok((loss, Some(grad)))
}
