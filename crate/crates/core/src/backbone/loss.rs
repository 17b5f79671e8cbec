//! Multi-task loss terms of the reference backbone.

use ndarray::Array2;

use super::BackboneError;
use crate::geometry::{image_gradients, image_gradients_adjoint};

/// Stabilizer inside the edge-loss square root; keeps the gradient finite
/// where prediction and label derivatives agree.
pub const EDGE_EPS: f64 = 1e-8;

/// Weighted sum `cls + box + mask + alpha * edge`.
pub fn total_loss(
    cls: f64,
    box_: f64,
    mask: f64,
    edge: f64,
    alpha: f64,
) -> Result<f64, BackboneError> {
    if ![cls, box_, mask, edge, alpha].iter().all(|v| v.is_finite()) {
        return Err(BackboneError::NonFinite);
    }
    Ok(cls + box_ + mask + alpha * edge)
}

fn check_shapes(m: &Array2<f64>, g: &Array2<f64>) -> Result<(), BackboneError> {
    if m.dim() != g.dim() {
        return Err(BackboneError::ShapeMismatch {
            expected: g.dim(),
            actual: m.dim(),
        });
    }
    Ok(())
}

/// Mean over pixels of `sqrt((Mx - Gx)² + (My - Gy)² + ε)`.
pub fn edge_loss(m: &Array2<f64>, g: &Array2<f64>) -> Result<f64, BackboneError> {
    Ok(edge_loss_with_grad(m, g)?.0)
}

/// Edge loss and its gradient with respect to `m`.
pub fn edge_loss_with_grad(
    m: &Array2<f64>,
    g: &Array2<f64>,
) -> Result<(f64, Array2<f64>), BackboneError> {
    check_shapes(m, g)?;
    let (mx, my) = image_gradients(m)?;
    let (gx, gy) = image_gradients(g)?;
    let n = m.len() as f64;
    let mut loss = 0.0;
    let mut ax = Array2::zeros(m.dim());
    let mut ay = Array2::zeros(m.dim());
    for (idx, _) in m.indexed_iter() {
        let dx = mx[idx] - gx[idx];
        let dy = my[idx] - gy[idx];
        let s = (dx * dx + dy * dy + EDGE_EPS).sqrt();
        loss += s;
        ax[idx] = dx / (n * s);
        ay[idx] = dy / (n * s);
    }
    Ok((loss / n, image_gradients_adjoint(&ax, &ay)))
}

/// Binary cross-entropy on a logit, numerically stable.
pub fn bce_with_logit(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Smooth-L1 with unit transition point, and its derivative.
pub fn smooth_l1(d: f64) -> (f64, f64) {
    if d.abs() < 1.0 {
        (0.5 * d * d, d)
    } else {
        (d.abs() - 0.5, d.signum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random(seed: u64, shape: (usize, usize)) -> Array2<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn(shape, |_| rng.random::<f64>())
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(1.0, 1.0, 1.0, 10.0, 0.1).unwrap(), 4.0);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, 0.7).unwrap(), 0.0);
        assert_eq!(total_loss(0.5, 0.25, 2.0, 9.0, 0.0).unwrap(), 2.75);
        assert!(total_loss(f64::NAN, 0.0, 0.0, 0.0, 0.1).is_err());
    }

    #[test]
    fn total_loss_slope_in_alpha_is_edge_term() {
        let (c, b, m, e) = (0.3, 0.2, 0.7, 1.9);
        let l0 = total_loss(c, b, m, e, 0.0).unwrap();
        let l1 = total_loss(c, b, m, e, 1.0).unwrap();
        assert!((l1 - l0 - e).abs() < 1e-15);
    }

    #[test]
    fn identical_masks_give_floor() {
        let g = random(1, (8, 8)).mapv(|v| (v > 0.5) as u8 as f64);
        assert!(edge_loss(&g, &g).unwrap() <= EDGE_EPS.sqrt() + 1e-15);
        let m = Array2::from_elem((8, 8), 0.5);
        let ones = Array2::from_elem((8, 8), 1.0);
        assert!(edge_loss(&m, &ones).unwrap() <= EDGE_EPS.sqrt() + 1e-15);
        assert!(edge_loss(&m, &Array2::zeros((7, 8))).is_err());
    }

    #[test]
    fn edge_loss_matches_direct_formula() {
        let m = random(2, (8, 8));
        let g = random(3, (8, 8)).mapv(|v| (v > 0.5) as u8 as f64);
        // independent recomputation with explicit finite differences
        let d = |a: &Array2<f64>, y: usize, x: usize, axis: usize| -> f64 {
            let n = 8;
            let (i, j) = if axis == 0 { (x, n) } else { (y, n) };
            let at = |k: usize| if axis == 0 { a[[y, k]] } else { a[[k, x]] };
            if i == 0 {
                at(1) - at(0)
            } else if i == j - 1 {
                at(j - 1) - at(j - 2)
            } else {
                (at(i + 1) - at(i - 1)) / 2.0
            }
        };
        let mut acc = 0.0;
        for y in 0..8 {
            for x in 0..8 {
                let dx = d(&m, y, x, 0) - d(&g, y, x, 0);
                let dy = d(&m, y, x, 1) - d(&g, y, x, 1);
                acc += (dx * dx + dy * dy + EDGE_EPS).sqrt();
            }
        }
        assert!((edge_loss(&m, &g).unwrap() - acc / 64.0).abs() < 1e-9);
    }

    #[test]
    fn edge_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let m = random(10 + seed, (8, 8));
            let g = random(20 + seed, (8, 8)).mapv(|v| (v > 0.5) as u8 as f64);
            let (_, grad) = edge_loss_with_grad(&m, &g).unwrap();
            let h = 1e-4;
            let mut max_rel: f64 = 0.0;
            for idx in [(0, 0), (3, 4), (7, 7), (0, 5), (6, 1), (4, 4)] {
                let mut p = m.clone();
                p[idx] += h;
                let mut q = m.clone();
                q[idx] -= h;
                let fd = (edge_loss(&p, &g).unwrap() - edge_loss(&q, &g).unwrap()) / (2.0 * h);
                let rel = (fd - grad[idx]).abs() / fd.abs().max(grad[idx].abs()).max(1e-8);
                max_rel = max_rel.max(rel);
            }
            assert!(max_rel < 1e-3, "seed {seed}: {max_rel}");
        }
    }

    #[test]
    fn bce_and_sigmoid() {
        assert!((bce_with_logit(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!(bce_with_logit(-800.0, 1.0).is_finite());
        assert_eq!(smooth_l1(0.5), (0.125, 0.5));
        assert_eq!(smooth_l1(-3.0), (2.5, -1.0));
    }
}
