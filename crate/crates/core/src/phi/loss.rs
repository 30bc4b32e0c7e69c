use ndarray::{Array2, Axis};

use super::{Mode, PhiNetwork};
use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::oti::GptTarget;

fn unit_rows(m: &Array2<f64>, what: &str) -> Result<(Array2<f64>, Vec<f64>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.nrows());
    for (k, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let n = row.dot(&row).sqrt();
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::Numeric(format!("{what} token {k} has norm {n}")));
        }
        row /= n;
        norms.push(n);
    }
    Ok((out, norms))
}

/// `c[k][j] = a_k . b_j` over unit rows, computed row by row so that
/// `pairwise(a, b)[k][j]` and `pairwise(b, a)[j][k]` agree bitwise.
fn pairwise(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.nrows(), b.nrows()), |(k, j)| {
        dot(
            a.row(k).as_slice().expect("contiguous"),
            b.row(j).as_slice().expect("contiguous"),
        )
    })
}

/// One direction of the symmetric loss for anchor `k`: the positive is
/// `cross[k][k]`, the negatives are every `cross[k][j]` plus `same[k][j]` for
/// `j != k`. Returns the term and the softmax weights over both groups.
fn directional_term(cross: &Array2<f64>, same: &Array2<f64>, k: usize, tau: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let b = cross.ncols();
    let logits_cross: Vec<f64> = (0..b).map(|j| cross[[k, j]] / tau).collect();
    let logits_same: Vec<f64> = (0..b).filter(|&j| j != k).map(|j| same[[k, j]] / tau).collect();
    let max = logits_cross
        .iter()
        .chain(&logits_same)
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let exp_cross: Vec<f64> = logits_cross.iter().map(|l| (l - max).exp()).collect();
    let exp_same: Vec<f64> = logits_same.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exp_cross.iter().sum::<f64>() + exp_same.iter().sum::<f64>();
    let term = -(logits_cross[k]) + max + z.ln();
    (
        term,
        exp_cross.into_iter().map(|e| e / z).collect(),
        exp_same.into_iter().map(|e| e / z).collect(),
    )
}

fn check_batches(predicted: &Array2<f64>, targets: &Array2<f64>, tau: f64) -> Result<()> {
    if predicted.dim() != targets.dim() {
        return Err(Error::input(format!(
            "predicted batch {:?} and target batch {:?} differ in shape",
            predicted.dim(),
            targets.dim()
        )));
    }
    if predicted.nrows() == 0 {
        return Err(Error::input("empty batch"));
    }
    if !(tau > 0.0) {
        return Err(Error::input(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Symmetric contrastive distillation loss between predicted tokens and their
/// targets (one token per row). Exactly zero for a batch of one.
pub fn distillation_loss(predicted: &Array2<f64>, targets: &Array2<f64>, tau: f64) -> Result<f64> {
    distillation_loss_with_grad(predicted, targets, tau).map(|(l, _)| l)
}

/// Loss plus its gradient with respect to `predicted`.
pub fn distillation_loss_with_grad(
    predicted: &Array2<f64>,
    targets: &Array2<f64>,
    tau: f64,
) -> Result<(f64, Array2<f64>)> {
    check_batches(predicted, targets, tau)?;
    let bsz = predicted.nrows();
    let (p, p_norm) = unit_rows(predicted, "predicted")?;
    let (t, _) = unit_rows(targets, "target")?;
    if bsz == 1 {
        // both negative sums over j != k are empty; each term is -log(e^x / e^x)
        return Ok((0.0, Array2::zeros(predicted.dim())));
    }
    let c_tp = pairwise(&t, &p);
    let c_pt = pairwise(&p, &t);
    let c_pp = pairwise(&p, &p);
    let c_tt = pairwise(&t, &t);

    let scale = 1.0 / bsz as f64;
    let mut g_tp = Array2::<f64>::zeros((bsz, bsz));
    let mut g_pt = Array2::<f64>::zeros((bsz, bsz));
    let mut g_pp = Array2::<f64>::zeros((bsz, bsz));
    let mut total = 0.0;
    for k in 0..bsz {
        let (t1, w_cross, w_same) = directional_term(&c_tp, &c_pp, k, tau);
        let (t2, v_cross, _) = directional_term(&c_pt, &c_tt, k, tau);
        total += t1 + t2;
        for j in 0..bsz {
            g_tp[[k, j]] += scale * w_cross[j] / tau;
            g_pt[[k, j]] += scale * v_cross[j] / tau;
        }
        g_tp[[k, k]] -= scale / tau;
        g_pt[[k, k]] -= scale / tau;
        for (slot, j) in (0..bsz).filter(|&j| j != k).enumerate() {
            g_pp[[k, j]] += scale * w_same[slot] / tau;
        }
    }
    let loss = total * scale;

    // chain rule onto the unit rows of `predicted`
    let g_unit = g_tp.t().dot(&t) + g_pt.dot(&t) + (&g_pp + &g_pp.t()).dot(&p);
    // then through the normalization
    let mut grad = Array2::zeros(predicted.dim());
    for k in 0..bsz {
        let u = p.row(k);
        let g = g_unit.row(k);
        let radial = g.dot(&u);
        let mut out = grad.row_mut(k);
        out.assign(&((&g - &(&u * radial)) / p_norm[k]));
    }
    Ok((loss, grad))
}

/// Value of the distillation objective and its two components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhiLoss {
    pub total: f64,
    pub distil: f64,
    pub gpt: f64,
}

fn check_alignment(features: &Array2<f64>, targets: &Array2<f64>, gpt: &[GptTarget]) -> Result<()> {
    if features.nrows() != targets.nrows() || features.nrows() != gpt.len() {
        return Err(Error::input(format!(
            "misaligned batch: {} features, {} targets, {} phrases",
            features.nrows(),
            targets.nrows(),
            gpt.len()
        )));
    }
    Ok(())
}

/// `lambda_distil * L_distil + lambda_gpt * mean_k L_gpt(phi(x_k))`.
#[allow(clippy::too_many_arguments)]
pub fn phi_objective<B: Backbone + ?Sized>(
    phi: &PhiNetwork,
    features: &Array2<f64>,
    targets: &Array2<f64>,
    gpt: &[GptTarget],
    temperature: f64,
    lambda_distil: f64,
    lambda_gpt: f64,
    backbone: &B,
    mode: Mode<'_>,
) -> Result<PhiLoss> {
    check_alignment(features, targets, gpt)?;
    let predicted = phi.forward_batch(features, mode)?;
    let distil = distillation_loss(&predicted, targets, temperature)?;
    let mut gpt_sum = 0.0;
    for (k, target) in gpt.iter().enumerate() {
        gpt_sum += target.loss(backbone, predicted.row(k).as_slice().expect("contiguous"))?;
    }
    let gpt_loss = gpt_sum / gpt.len() as f64;
    Ok(PhiLoss {
        total: lambda_distil * distil + lambda_gpt * gpt_loss,
        distil,
        gpt: gpt_loss,
    })
}

/// As [`phi_objective`], also returning the gradient over all parameters.
/// Both loss terms share the same forward pass (and dropout masks).
#[allow(clippy::too_many_arguments)]
pub fn phi_objective_with_grad<B: Backbone + ?Sized>(
    phi: &PhiNetwork,
    features: &Array2<f64>,
    targets: &Array2<f64>,
    gpt: &[GptTarget],
    temperature: f64,
    lambda_distil: f64,
    lambda_gpt: f64,
    backbone: &B,
    mode: Mode<'_>,
) -> Result<(PhiLoss, Vec<f64>)> {
    check_alignment(features, targets, gpt)?;
    let (predicted, cache) = phi.forward_cached(features, mode)?;
    let (distil, g_distil) = distillation_loss_with_grad(&predicted, targets, temperature)?;
    let bsz = gpt.len() as f64;
    let mut grad_out = g_distil * lambda_distil;
    let mut gpt_sum = 0.0;
    for (k, target) in gpt.iter().enumerate() {
        let row = predicted.row(k);
        let (l, g) = target.loss_and_grad(backbone, row.as_slice().expect("contiguous"))?;
        gpt_sum += l;
        for (slot, gv) in grad_out.row_mut(k).iter_mut().zip(&g) {
            *slot += lambda_gpt * gv / bsz;
        }
    }
    let gpt_loss = gpt_sum / bsz;
    let grads = phi.backward(&cache, &grad_out);
    Ok((
        PhiLoss {
            total: lambda_distil * distil + lambda_gpt * gpt_loss,
            distil,
            gpt: gpt_loss,
        },
        grads,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(b: usize, d: usize, salt: f64) -> Array2<f64> {
        Array2::from_shape_fn((b, d), |(i, j)| ((i * d + j) as f64 * 0.77 + salt).sin())
    }

    #[test]
    fn batch_of_one_is_exactly_zero() {
        let p = batch(1, 6, 0.1);
        let t = batch(1, 6, 2.3);
        assert_eq!(distillation_loss(&p, &t, 0.25).unwrap(), 0.0);
    }

    #[test]
    fn swapping_roles_is_exact() {
        for b in 2..=8 {
            let p = batch(b, 5, 0.3);
            let t = batch(b, 5, 1.9);
            assert_eq!(
                distillation_loss(&p, &t, 0.25).unwrap(),
                distillation_loss(&t, &p, 0.25).unwrap()
            );
        }
    }

    #[test]
    fn shape_and_norm_errors() {
        let p = batch(3, 4, 0.0);
        assert!(distillation_loss(&p, &batch(2, 4, 0.0), 0.25).is_err());
        let mut z = batch(3, 4, 0.5);
        z.row_mut(1).fill(0.0);
        assert!(matches!(distillation_loss(&p, &z, 0.25), Err(Error::Numeric(_))));
        assert!(distillation_loss(&p, &p, 0.0).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = batch(4, 6, 0.7);
        let t = batch(4, 6, -1.1);
        let (_, g) = distillation_loss_with_grad(&p, &t, 0.25).unwrap();
        let h = 1e-6;
        for k in 0..4 {
            for j in 0..6 {
                let mut plus = p.clone();
                let mut minus = p.clone();
                plus[[k, j]] += h;
                minus[[k, j]] -= h;
                let fd = (distillation_loss(&plus, &t, 0.25).unwrap()
                    - distillation_loss(&minus, &t, 0.25).unwrap())
                    / (2.0 * h);
                assert!((fd - g[[k, j]]).abs() < 1e-7, "{k},{j}: {fd} vs {}", g[[k, j]]);
            }
        }
    }
}
