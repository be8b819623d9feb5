use num_traits::Float;

use crate::error::{Error, Result};

/// Mean Huber loss over all elements and its gradient with respect to `pred`.
pub fn huber_loss<T: Float>(pred: &[T], target: &[T], delta: T) -> Result<(f64, Vec<T>)> {
    let mut grad = vec![T::zero(); pred.len()];
    let loss = huber_loss_into(pred, target, delta, &mut grad)?;
    Ok((loss, grad))
}

/// Like [`huber_loss`] but writes the gradient into `grad`.
pub fn huber_loss_into<T: Float>(pred: &[T], target: &[T], delta: T, grad: &mut [T]) -> Result<f64> {
    if pred.len() != target.len() || pred.len() != grad.len() {
        return Err(Error::ShapeMismatch(format!("prediction {} vs target {}", pred.len(), target.len())));
    }
    if pred.is_empty() {
        return Err(Error::ShapeMismatch("empty prediction".into()));
    }
    let n = T::from(pred.len()).unwrap();
    let half = T::from(0.5).unwrap();
    let mut total = 0.0f64;
    for ((&p, &t), g) in pred.iter().zip(target).zip(grad.iter_mut()) {
        let r = p - t;
        let (l, d) = if r.abs() <= delta { (half * r * r, r) } else { (delta * (r.abs() - half * delta), delta * r.signum()) };
        total += l.to_f64().unwrap();
        *g = d / n;
    }
    Ok(total / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_residual() {
        let (l, g) = huber_loss(&[0.2, 0.9], &[0.2, 0.9], 1.0).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quadratic_and_linear_branches() {
        let (l, g) = huber_loss(&[0.5f32, 0.0, 0.0, 0.0], &[0.0; 4], 1.0).unwrap();
        assert!((l * 4.0 - 0.125).abs() < 1e-12);
        assert!((g[0] - 0.5 / 4.0).abs() < 1e-7);
        let (l, g) = huber_loss(&[3.0, 0.0], &[0.0, 0.0], 1.0).unwrap();
        assert!((l * 2.0 - 2.5).abs() < 1e-12);
        assert!((g[0] - 0.5).abs() < 1e-7);
        let (_, g) = huber_loss(&[-3.0], &[0.0], 1.0).unwrap();
        assert_eq!(g[0], -1.0);
    }

    #[test]
    fn shape_mismatch() {
        assert!(matches!(huber_loss(&[0.0], &[0.0, 1.0], 1.0), Err(Error::ShapeMismatch(_))));
    }
}
