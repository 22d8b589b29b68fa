//! Pairwise symmetric InfoNCE (CLIP) objective over the three modality
//! embedding batches: logits are scaled cosine similarities, the loss is the
//! mean of row- and column-wise cross-entropy against the diagonal, averaged
//! over the three unordered modality pairs.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::model::Modality;

/// A batch of unit-norm embeddings for one modality, rows aligned by chip.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    pub modality: Modality,
    pub chip_ids: Vec<u64>,
    pub rows: Array2<f64>,
}

impl EmbeddingBatch {
    pub fn new(modality: Modality, chip_ids: Vec<u64>, rows: Array2<f64>) -> Result<Self> {
        let b = EmbeddingBatch {
            modality,
            chip_ids,
            rows,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn n(&self) -> usize {
        self.rows.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.nrows() == 0 {
            return Err(Error::invalid("embedding batch must have N >= 1"));
        }
        if self.chip_ids.len() != self.rows.nrows() {
            return Err(Error::invalid(format!(
                "chip_ids length {} != batch rows {}",
                self.chip_ids.len(),
                self.rows.nrows()
            )));
        }
        for (i, row) in self.rows.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if (norm - 1.0).abs() > 1e-5 {
                return Err(Error::invalid(format!(
                    "row {i} of {} batch has norm {norm}, expected unit",
                    self.modality.name()
                )));
            }
        }
        Ok(())
    }
}

fn check_pair(a: &EmbeddingBatch, b: &EmbeddingBatch, temperature: f64) -> Result<()> {
    if temperature <= 0.0 {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if a.n() != b.n() {
        return Err(Error::invalid(format!(
            "batch size mismatch: {} vs {}",
            a.n(),
            b.n()
        )));
    }
    if a.chip_ids != b.chip_ids {
        return Err(Error::invalid("chip_ids are not aligned across batches"));
    }
    Ok(())
}

/// Row-wise `logsumexp`.
fn logsumexp_rows(logits: &Array2<f64>) -> Array1<f64> {
    let n = logits.nrows();
    let mut out = Array1::zeros(n);
    for (i, row) in logits.rows().into_iter().enumerate() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        out[i] = mx + s.ln();
    }
    out
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - mx).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}

fn ce_diag(logits: &Array2<f64>) -> f64 {
    let lse = logsumexp_rows(logits);
    let n = logits.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        acc += lse[i] - logits[[i, i]];
    }
    acc / n as f64
}

/// Symmetric CLIP loss for one modality pair.
pub fn pair_clip_loss(a: &EmbeddingBatch, b: &EmbeddingBatch, temperature: f64) -> Result<f64> {
    check_pair(a, b, temperature)?;
    let logits = a.rows.dot(&b.rows.t()) / temperature;
    let loss = 0.5 * (ce_diag(&logits) + ce_diag(&logits.t().to_owned()));
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("CLIP loss is not finite ({loss})")));
    }
    Ok(loss)
}

/// Loss plus gradients w.r.t. both embedding matrices and the temperature.
pub fn pair_clip_loss_grad(
    a: &EmbeddingBatch,
    b: &EmbeddingBatch,
    temperature: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>, f64)> {
    check_pair(a, b, temperature)?;
    let n = a.n();
    let logits = a.rows.dot(&b.rows.t()) / temperature;
    let loss = 0.5 * (ce_diag(&logits) + ce_diag(&logits.t().to_owned()));
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("CLIP loss is not finite ({loss})")));
    }

    // dLoss/dlogits: average of row-softmax and column-softmax CE gradients
    let p_rows = softmax_rows(&logits);
    let p_cols = softmax_rows(&logits.t().to_owned());
    let mut g = Array2::zeros((n, n));
    let half_n = 0.5 / n as f64;
    for i in 0..n {
        for j in 0..n {
            let mut v = p_rows[[i, j]] + p_cols[[j, i]];
            if i == j {
                v -= 2.0;
            }
            g[[i, j]] = v * half_n;
        }
    }

    let d_a = g.dot(&b.rows) / temperature;
    let d_b = g.t().dot(&a.rows) / temperature;
    // logits = sim/t  =>  dloss/dt = -sum(g * logits)/t
    let d_t = -(&g * &logits).sum() / temperature;
    Ok((loss, d_a, d_b, d_t))
}

/// Mean of the pairwise CLIP losses over the 3 unordered modality pairs.
pub fn multimodal_clip_loss(batches: &[EmbeddingBatch; 3], temperature: f64) -> Result<f64> {
    let mut acc = 0.0;
    for i in 0..3 {
        for j in (i + 1)..3 {
            acc += pair_clip_loss(&batches[i], &batches[j], temperature)?;
        }
    }
    Ok(acc / 3.0)
}

/// Gradient version; returns per-batch embedding gradients (aligned with the
/// input order) and the temperature gradient.
pub fn multimodal_clip_loss_grad(
    batches: &[EmbeddingBatch; 3],
    temperature: f64,
) -> Result<(f64, [Array2<f64>; 3], f64)> {
    let n = batches[0].n();
    let d = batches[0].rows.ncols();
    let mut grads = [
        Array2::zeros((n, d)),
        Array2::zeros((n, d)),
        Array2::zeros((n, d)),
    ];
    let mut loss = 0.0;
    let mut d_t = 0.0;
    for i in 0..3 {
        for j in (i + 1)..3 {
            let (l, da, db, dt) = pair_clip_loss_grad(&batches[i], &batches[j], temperature)?;
            loss += l / 3.0;
            d_t += dt / 3.0;
            grads[i] += &(da / 3.0);
            grads[j] += &(db / 3.0);
        }
    }
    Ok((loss, grads, d_t))
}
