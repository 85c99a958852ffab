use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Output positions before this index are excluded from the loss: predicting
/// `a_1` or `a_2` is underdetermined from one or two terms.
pub const FIRST_SCORED_POSITION: usize = 2;

fn split_shape(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [n, d] => Ok((1, *n, *d)),
        [b, n, d] => Ok((*b, *n, *d)),
        s => Err(Error::Shape(format!("expected [n x D] or [b x n x D], got {s:?}"))),
    }
}

/// Mean squared error over positions `i ≥ 2` and every axis, averaged over the batch.
pub fn masked_mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let (b, n, d) = split_shape(pred)?;
    if n <= FIRST_SCORED_POSITION {
        return Err(Error::Argument(format!("masked MSE needs n >= 3, got {n}")));
    }
    let mut total = 0.0;
    for s in 0..b {
        for i in FIRST_SCORED_POSITION..n {
            let off = (s * n + i) * d;
            for j in 0..d {
                let e = pred.data()[off + j] - target.data()[off + j];
                total += e * e;
            }
        }
    }
    Ok(total / (b * (n - FIRST_SCORED_POSITION) * d) as f64)
}

/// Gradient of [`masked_mse`] with respect to the predictions.
pub fn masked_mse_grad(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let (b, n, d) = split_shape(pred)?;
    if n <= FIRST_SCORED_POSITION || pred.shape() != target.shape() {
        return Err(Error::Argument("masked MSE gradient needs matching [.. n >= 3 ..] shapes".into()));
    }
    let norm = 2.0 / (b * (n - FIRST_SCORED_POSITION) * d) as f64;
    let mut grad = Tensor::zeros(pred.shape());
    for s in 0..b {
        for i in FIRST_SCORED_POSITION..n {
            let off = (s * n + i) * d;
            for j in 0..d {
                grad.data_mut()[off + j] = norm * (pred.data()[off + j] - target.data()[off + j]);
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_is_zero() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(masked_mse(&t, &t).unwrap(), 0.0);
    }

    #[test]
    fn first_two_positions_are_ignored() {
        let target = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let pred = Tensor::from_rows(&[vec![-50.0], vec![99.0], vec![3.0]]).unwrap();
        assert_eq!(masked_mse(&pred, &target).unwrap(), 0.0);
    }

    #[test]
    fn unit_errors_average_to_one() {
        let target = Tensor::zeros(&[4, 3]);
        let pred = Tensor::from_rows(&[
            vec![0.0; 3],
            vec![0.0; 3],
            vec![1.0, -1.0, 1.0],
            vec![-1.0, 1.0, 1.0],
        ])
        .unwrap();
        assert!((masked_mse(&pred, &target).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn short_sequences_rejected() {
        let t = Tensor::zeros(&[2, 3]);
        assert!(matches!(masked_mse(&t, &t), Err(Error::Argument(_))));
    }
}
