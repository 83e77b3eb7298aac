//! Cosine-masked reconstruction loss and the combined generator objective.

use std::f64::consts::PI;

use longscape_tensor::{Element, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::critic::{generator_adv_loss, BoundCritic};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_adv: f64,
    pub lambda_gp: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_rec: 0.998,
            lambda_adv: 0.002,
            lambda_gp: 10.0,
            beta: 0.9,
        }
    }
}

impl LossWeights {
    /// Reconstruction only, used while the generator warms up.
    pub fn warmup(&self) -> Self {
        LossWeights {
            lambda_rec: 1.0,
            lambda_adv: 0.0,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_rec, self.lambda_adv, self.lambda_gp, self.beta];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || self.beta > 1.0 {
            return Err(Error::Config(format!("loss weights must be finite, non-negative and beta <= 1: {self:?}")));
        }
        Ok(())
    }
}

/// Per-column reconstruction weights over the generated width.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineMask {
    pub predicted: usize,
    pub weights: Vec<f64>,
}

/// Weight 1 on the input columns; column `d` past the border of a
/// `predicted`-wide region gets `(1 + cos(d * pi / predicted)) / 2`.
pub fn cosine_mask(predicted: usize, total_width: usize) -> Result<CosineMask> {
    if predicted == 0 || predicted > total_width {
        return Err(Error::Config(format!(
            "prediction width {predicted} must be in 1..={total_width}"
        )));
    }
    let border = total_width - predicted;
    let weights = (0..total_width)
        .map(|j| {
            if j < border {
                1.0
            } else {
                let d = (j - border) as f64;
                (1.0 + (d * PI / predicted as f64).cos()) / 2.0
            }
        })
        .collect();
    Ok(CosineMask { predicted, weights })
}

impl CosineMask {
    pub fn as_tensor<T: Element>(&self) -> Tensor<T> {
        let data = self.weights.iter().map(|&w| T::from_f64_lossy(w)).collect();
        Tensor::from_vec(&[1, 1, 1, self.weights.len()], data).expect("nonempty mask")
    }
}

/// Mean over every element of the column-weighted squared error.
pub fn masked_rec_loss<T: Element>(output: &Var<T>, target: &Var<T>, mask: &CosineMask) -> Result<Var<T>> {
    let shape = output.shape().to_vec();
    if shape != target.shape() || shape.len() != 4 || shape[3] != mask.weights.len() {
        return Err(TensorError::shape(
            "masked_rec_loss",
            format!(
                "output {:?}, target {:?}, mask width {}",
                output.shape(),
                target.shape(),
                mask.weights.len()
            ),
        )
        .into());
    }
    let m = output.tape().constant(mask.as_tensor()).broadcast_to(&shape)?;
    Ok(output.sub(target)?.square()?.mul(&m)?.mean()?)
}

#[derive(Debug, Clone)]
pub struct GeneratorObjective<T: Element> {
    pub total: Var<T>,
    pub rec: Var<T>,
    /// Absent when the adversarial weight is zero.
    pub adv: Option<Var<T>>,
}

/// `lambda_rec * L_rec + lambda_adv * L_adv`; the critics are only evaluated
/// when `lambda_adv > 0`.
pub fn generator_objective<T: Element>(
    output: &Var<T>,
    target: &Var<T>,
    mask: &CosineMask,
    critics: Option<(BoundCritic<'_, T>, BoundCritic<'_, T>)>,
    weights: &LossWeights,
) -> Result<GeneratorObjective<T>> {
    let rec = masked_rec_loss(output, target, mask)?;
    let mut total = rec.scale(weights.lambda_rec)?;
    let mut adv = None;
    if weights.lambda_adv > 0.0 {
        let (global, local) = critics.ok_or_else(|| Error::Config("adversarial weight set without critics".into()))?;
        let w = output.shape()[3];
        let right = output.slice(3, w - mask.predicted, mask.predicted)?;
        let a = generator_adv_loss(global, local, output, &right, weights.beta)?;
        total = total.add(&a.scale(weights.lambda_adv)?)?;
        adv = Some(a);
    }
    Ok(GeneratorObjective { total, rec, adv })
}
