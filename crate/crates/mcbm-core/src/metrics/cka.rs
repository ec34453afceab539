//! Linear centered kernel alignment between two representations of the
//! same rows: ||Y'X||_F^2 / (||X'X||_F * ||Y'Y||_F) after column centering.
//! Invariant to orthogonal rotation and isotropic scaling of either side.

use crate::diff::Tensor;
use crate::error::{Error, Result};

fn center_columns(t: &Tensor) -> Tensor {
    let (n, d) = (t.rows(), t.cols());
    let mut out = t.clone();
    for j in 0..d {
        let mean = (0..n).map(|i| t.values()[i * d + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            out.values_mut()[i * d + j] -= mean;
        }
    }
    out
}

/// Frobenius norm of A'B for column-centered matrices sharing their row
/// count; computed column-pair-wise without materializing the product.
fn gram_frobenius(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.rows();
    let (da, db) = (a.cols(), b.cols());
    let mut acc = 0.0;
    for i in 0..da {
        for j in 0..db {
            let mut dot = 0.0;
            for r in 0..n {
                dot += a.values()[r * da + i] * b.values()[r * db + j];
            }
            acc += dot * dot;
        }
    }
    acc.sqrt()
}

pub fn cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(Error::dim(format!(
            "{} vs {} rows",
            x.rows(),
            y.rows()
        )));
    }
    if x.rows() < 2 {
        return Err(Error::usage("cka needs at least 2 rows"));
    }
    let xc = center_columns(x);
    let yc = center_columns(y);
    let cross = gram_frobenius(&yc, &xc);
    let xx = gram_frobenius(&xc, &xc);
    let yy = gram_frobenius(&yc, &yc);
    let denom = xx * yy;
    if denom <= 0.0 {
        return Err(Error::undefined_metric(
            "a side is constant after centering; alignment is undefined",
        ));
    }
    Ok(((cross * cross) / denom).clamp(0.0, 1.0))
}
