use super::{shape_err, Matrix, NeuralError};

/// Numerically stable softmax of one row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub(crate) fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows, logits.cols);
    for i in 0..logits.rows {
        out.row_mut(i).copy_from_slice(&softmax(logits.row(i)));
    }
    out
}

/// Batch-mean loss with its gradient w.r.t. the logits.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub dlogits: Matrix,
}

/// Softmax cross-entropy fused on logits: mean over the batch of
/// `-(1/divisor) log p_label`.
pub fn ce_loss(logits: &Matrix, labels: &[usize], divisor: f64) -> Result<LossOutput, NeuralError> {
    if labels.len() != logits.rows {
        return Err(shape_err("labels", &[logits.rows], &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.cols) {
        return Err(shape_err("label index", &[logits.cols], &[bad]));
    }
    let b = logits.rows.max(1) as f64;
    let mut loss = 0.0;
    let mut d = Matrix::zeros(logits.rows, logits.cols);
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        loss += (lse - row[y]) / divisor;
        let di = d.row_mut(i);
        for (g, l) in di.iter_mut().zip(row) {
            *g = (l - lse).exp() / divisor / b;
        }
        di[y] -= 1.0 / divisor / b;
    }
    Ok(LossOutput {
        loss: loss / b,
        dlogits: d,
    })
}

/// `xi * CE_t / n_t + (1 - xi) * CE_r / n_r`, each term batch-averaged.
/// Returns the loss and the two logit gradients.
pub fn weighted_ce_loss(
    logits_t: &Matrix,
    labels_t: &[usize],
    logits_r: &Matrix,
    labels_r: &[usize],
    xi: f64,
) -> Result<(f64, Matrix, Matrix), NeuralError> {
    if !(0.0..=1.0).contains(&xi) {
        return Err(NeuralError::Xi(xi));
    }
    let t = ce_loss(logits_t, labels_t, logits_t.cols as f64)?;
    let r = ce_loss(logits_r, labels_r, logits_r.cols as f64)?;
    let mut dt = t.dlogits;
    dt.data.iter_mut().for_each(|g| *g *= xi);
    let mut dr = r.dlogits;
    dr.data.iter_mut().for_each(|g| *g *= 1.0 - xi);
    Ok((xi * t.loss + (1.0 - xi) * r.loss, dt, dr))
}
