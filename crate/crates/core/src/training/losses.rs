//! The three training losses, on domain values (f64) and as tensor graphs.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::landmarks::{BoundaryBox, LandmarkSet, NUM_POINTS};
use crate::masks::Mask;

/// Probability clipping for the cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Mean squared error over the four box values.
pub fn loss_boundary(truth: &BoundaryBox, pred: &BoundaryBox) -> f64 {
    let t = truth.to_array();
    let p = pred.to_array();
    t.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / t.len() as f64
}

/// Mean over points of the squared Euclidean point error.
pub fn loss_landmark(truth: &LandmarkSet, pred: &LandmarkSet) -> f64 {
    truth
        .points()
        .iter()
        .zip(pred.points())
        .map(|(a, b)| (a.x - b.x).powi(2) + (a.y - b.y).powi(2))
        .sum::<f64>()
        / NUM_POINTS as f64
}

/// Per-pixel binary cross-entropy, averaged over pixels, with the
/// prediction clipped to `[eps, 1 - eps]`.
pub fn loss_unet(truth: &Mask, pred: &Mask) -> Result<f64> {
    loss_unet_batch(&[(truth, pred)])
}

/// Cross-entropy averaged over every pixel of every mask pair.
pub fn loss_unet_batch(pairs: &[(&Mask, &Mask)]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (m, p) in pairs {
        if (m.width, m.height) != (p.width, p.height) {
            return Err(Error::Validation(format!(
                "mask sizes differ: {}x{} vs {}x{}",
                m.width, m.height, p.width, p.height
            )));
        }
        for (&t, &q) in m.data.iter().zip(&p.data) {
            let (t, q) = (t as f64, (q as f64).clamp(BCE_EPS, 1.0 - BCE_EPS));
            total -= t * q.ln() + (1.0 - t) * (1.0 - q).ln();
        }
        count += m.data.len();
    }
    if count == 0 {
        return Err(Error::Validation("no pixels to score".into()));
    }
    Ok(total / count as f64)
}

/// Batch mean of the box loss for `(N, 4)` tensors.
pub fn boundary_loss_tensor(pred: &Tensor, truth: &Tensor) -> Result<Tensor> {
    Ok(pred.sub(truth)?.sqr()?.mean_all()?)
}

/// Batch mean of the landmark loss for `(N, 136)` tensors: the sum of
/// squared coordinate errors over `N * 68`.
pub fn landmark_loss_tensor(pred: &Tensor, truth: &Tensor) -> Result<Tensor> {
    let n = pred.dim(0)?;
    let sum = pred.sub(truth)?.sqr()?.sum_all()?;
    Ok((sum / (n * NUM_POINTS) as f64)?)
}

/// Pixel-mean cross-entropy for equally shaped mask tensors.
pub fn unet_loss_tensor(pred: &Tensor, truth: &Tensor) -> Result<Tensor> {
    let p = pred.clamp(BCE_EPS, 1.0 - BCE_EPS)?;
    let pos = truth.mul(&p.log()?)?;
    let neg = truth.affine(-1.0, 1.0)?.mul(&p.affine(-1.0, 1.0)?.log()?)?;
    Ok(pos.add(&neg)?.mean_all()?.neg()?)
}
