use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Draws the mixing weight from `Beta(alpha, alpha)`.
pub fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Argument(format!(
            "mixup alpha must be positive, got {alpha}"
        )));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::Argument(e.to_string()))?;
    Ok(beta.sample(rng))
}

/// `(lambda x1 + (1 - lambda) x2, lambda y1 + (1 - lambda) y2)`.
pub fn mixup_with_lambda(
    x1: &Tensor,
    y1: &[f64],
    x2: &Tensor,
    y2: &[f64],
    lambda: f64,
) -> Result<(Tensor, Vec<f64>)> {
    x1.expect_same_shape(x2, "mixup inputs")?;
    if y1.len() != y2.len() {
        return Err(Error::dim("mixup targets differ in length"));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Argument(format!(
            "mixup weight {lambda} outside [0, 1]"
        )));
    }
    let x = Tensor::new(
        x1.shape().to_vec(),
        x1.data()
            .iter()
            .zip(x2.data())
            .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
            .collect(),
    )?;
    let y = y1
        .iter()
        .zip(y2)
        .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
        .collect();
    Ok((x, y))
}

/// Mixes two examples with a weight drawn from `Beta(alpha, alpha)`.
/// Returns the mixed pair and the weight.
pub fn mixup<R: Rng + ?Sized>(
    x1: &Tensor,
    y1: &[f64],
    x2: &Tensor,
    y2: &[f64],
    alpha: f64,
    rng: &mut R,
) -> Result<(Tensor, Vec<f64>, f64)> {
    let lambda = sample_lambda(alpha, rng)?;
    let (x, y) = mixup_with_lambda(x1, y1, x2, y2, lambda)?;
    Ok((x, y, lambda))
}
