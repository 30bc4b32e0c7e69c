//! Small dense-vector helpers shared by the encoders, losses and search.

use crate::error::{Error, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Returns `a / ||a||`, failing on a zero or non-finite vector.
pub fn normalized(a: &[f64]) -> Result<Vec<f64>> {
    let n = norm(a);
    if !(n.is_finite() && n > 0.0) {
        return Err(Error::Numeric(format!(
            "cannot normalize vector with norm {n}"
        )));
    }
    Ok(a.iter().map(|x| x / n).collect())
}

/// Cosine similarity. Errors on length mismatch or a zero vector.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::input(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (aa, bb) = (dot(a, a), dot(b, b));
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::Numeric("cosine of a zero vector".into()));
    }
    // sqrt of the product keeps cos(a, a) exactly 1
    Ok(dot(a, b) / (aa * bb).sqrt())
}

/// Cosine similarity together with its gradients with respect to both inputs.
pub fn cosine_with_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let c = cosine(a, b)?;
    let (na, nb) = (norm(a), norm(b));
    // d cos / d a = b / (|a||b|) - cos * a / |a|^2
    let ga = a
        .iter()
        .zip(b)
        .map(|(x, y)| y / (na * nb) - c * x / (na * na))
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(x, y)| x / (na * nb) - c * y / (nb * nb))
        .collect();
    Ok((c, ga, gb))
}

pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
