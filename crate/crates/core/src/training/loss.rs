//! Contrastive NT-Xent and supervised pairwise BCE losses with analytic
//! gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Allowed deviation of a descriptor norm from 1.
pub const UNIT_TOLERANCE: f64 = 1e-3;

const P_CLAMP: f64 = 1e-12;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_unit(v: &[f64], what: &str) -> Result<()> {
    let n = dot(v, v).sqrt();
    if !n.is_finite() || (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::Contract(format!("{what} has norm {n}, expected unit norm")));
    }
    Ok(())
}

/// NT-Xent over `2N` embeddings laid out as `(a_1..a_N, b_1..b_N)`, so the
/// positive of view `i` is `(i + N) mod 2N`. Returns the mean loss over all
/// anchors and its gradient with respect to each embedding.
pub fn nt_xent_loss(embeddings: &[Vec<f64>], temperature: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    let m = embeddings.len();
    if m < 4 || !m.is_multiple_of(2) {
        return Err(Error::Contract(format!("NT-Xent needs 2N embeddings with N >= 2, got {m}")));
    }
    let dim = embeddings[0].len();
    for (i, e) in embeddings.iter().enumerate() {
        if e.len() != dim {
            return Err(Error::Shape(format!("embedding {i} has length {}, expected {dim}", e.len())));
        }
        check_unit(e, &format!("embedding {i}"))?;
    }
    let n = m / 2;
    let inv_t = 1.0 / temperature;
    let inv_m = 1.0 / m as f64;

    let mut logits = vec![0.0; m * m];
    for i in 0..m {
        for k in i + 1..m {
            let s = dot(&embeddings[i], &embeddings[k]) * inv_t;
            logits[i * m + k] = s;
            logits[k * m + i] = s;
        }
    }

    // coef[i][k] = dL/dlogit(i,k)
    let mut coef = vec![0.0; m * m];
    let mut loss = 0.0;
    for i in 0..m {
        let pos = (i + n) % m;
        let row = &logits[i * m..(i + 1) * m];
        let max = (0..m).filter(|&k| k != i).map(|k| row[k]).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..m).filter(|&k| k != i).map(|k| (row[k] - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[pos];
        for k in (0..m).filter(|&k| k != i) {
            coef[i * m + k] = (row[k] - lse).exp() * inv_m;
        }
        coef[i * m + pos] -= inv_m;
    }
    loss *= inv_m;

    let mut grads = vec![vec![0.0; dim]; m];
    for (i, g) in grads.iter_mut().enumerate() {
        for k in 0..m {
            let w = (coef[i * m + k] + coef[k * m + i]) * inv_t;
            if w != 0.0 {
                for (gd, ed) in g.iter_mut().zip(&embeddings[k]) {
                    *gd += w * ed;
                }
            }
        }
    }
    Ok((loss, grads))
}

/// Learnable affine map from cosine similarity to a logit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlCalibration {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for SlCalibration {
    fn default() -> Self {
        Self { alpha: 10.0, beta: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlLoss {
    pub loss: f64,
    pub grad_i: Vec<f64>,
    pub grad_j: Vec<f64>,
    pub grad_alpha: f64,
    pub grad_beta: f64,
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy on `logistic(alpha * cos + beta)` for one pair.
pub fn sl_bce_loss(desc_i: &[f64], desc_j: &[f64], label: u8, calib: SlCalibration) -> Result<SlLoss> {
    if label > 1 {
        return Err(Error::InvalidArgument(format!("pair label must be 0 or 1, got {label}")));
    }
    if desc_i.len() != desc_j.len() {
        return Err(Error::Shape(format!("descriptor lengths differ: {} vs {}", desc_i.len(), desc_j.len())));
    }
    check_unit(desc_i, "descriptor i")?;
    check_unit(desc_j, "descriptor j")?;
    if !(calib.alpha.is_finite() && calib.beta.is_finite()) {
        return Err(Error::Training(format!("non-finite calibration {calib:?}")));
    }
    let c = dot(desc_i, desc_j);
    let p_raw = logistic(calib.alpha * c + calib.beta);
    let p = p_raw.clamp(P_CLAMP, 1.0 - P_CLAMP);
    let y = f64::from(label);
    let loss = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    let dz = if p == p_raw { p - y } else { 0.0 };
    Ok(SlLoss {
        loss,
        grad_i: desc_j.iter().map(|v| dz * calib.alpha * v).collect(),
        grad_j: desc_i.iter().map(|v| dz * calib.alpha * v).collect(),
        grad_alpha: dz * c,
        grad_beta: dz,
    })
}
