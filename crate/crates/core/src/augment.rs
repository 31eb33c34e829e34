//! Hardness-aware negative augmentation in embedding space.
//!
//! A negative `z⁻` of anchor `z` is pulled along the segment towards the
//! anchor so that its distance becomes `λ·d(z,z⁻) + (1−λ)·d⁺`, never closer
//! than the reference distance `d⁺`. The interpolation coefficient follows
//! the training status: `λ = exp(−α / J_avg)`, so a falling average loss
//! produces harder synthetic negatives.

use serde::{Deserialize, Serialize};

use crate::embedding::euclidean;
use crate::error::{Error, Result};
use crate::metric::TupleBatch;
use crate::numgrad::Matrix;

/// Lower bound on the interpolation coefficient.
pub const LAMBDA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentorState {
    /// Pulling factor α. Zero disables hardening.
    pub alpha: f64,
    /// Mean original-tuple metric loss over the previous epoch, if one exists.
    pub j_avg: Option<f64>,
}

impl AugmentorState {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::input(format!("pulling factor must be >= 0, got {alpha}")));
        }
        Ok(Self { alpha, j_avg: None })
    }

    pub fn publish(&mut self, j_avg: f64) -> Result<()> {
        if !(j_avg >= 0.0) {
            return Err(Error::input(format!("average loss must be >= 0, got {j_avg}")));
        }
        self.j_avg = Some(j_avg);
        Ok(())
    }
}

/// `exp(−α / J_avg)`, floored at [`LAMBDA_FLOOR`].
///
/// Before the first epoch has finished there is no average loss and the
/// coefficient is 1 (no hardening). `J_avg = +∞` also maps to 1.
pub fn pulling_lambda(state: &AugmentorState) -> f64 {
    let Some(j_avg) = state.j_avg else {
        return 1.0;
    };
    if state.alpha == 0.0 || j_avg == f64::INFINITY {
        return 1.0;
    }
    if j_avg <= 0.0 {
        return LAMBDA_FLOOR;
    }
    (-state.alpha / j_avg).exp().max(LAMBDA_FLOOR)
}

/// Hardened copy of `z_neg` relative to anchor `z`.
///
/// Negatives already within `d_plus` of the anchor are returned unchanged.
pub fn augment_negative(z: &[f64], z_neg: &[f64], d_plus: f64, lambda: f64) -> Result<Vec<f64>> {
    if z.len() != z_neg.len() {
        return Err(Error::dims("augment_negative", (1, z.len()), (1, z_neg.len())));
    }
    if !(d_plus > 0.0) {
        return Err(Error::input(format!("reference distance must be > 0, got {d_plus}")));
    }
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::input(format!("interpolation coefficient must be in (0, 1], got {lambda}")));
    }
    let d = euclidean(z, z_neg);
    if d <= d_plus || lambda == 1.0 {
        return Ok(z_neg.to_vec());
    }
    let target = lambda * d + (1.0 - lambda) * d_plus;
    let s = target / d;
    Ok(z.iter().zip(z_neg).map(|(&a, &n)| a + s * (n - a)).collect())
}

/// Where `d⁺` comes from.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceDistance {
    /// Anchor-to-positive distance of the tuple.
    #[default]
    Positive,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedTuple {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub hardened_negatives: Vec<Vec<f64>>,
    pub reference_distance: Vec<f64>,
    pub original_negatives: Vec<Vec<f64>>,
    /// Zero reference distance; negatives passed through unhardened.
    pub degenerate: bool,
}

/// Hardens every negative of every tuple. Anchors and positives pass through.
pub fn augment_tuples(
    embeddings: &Matrix,
    tuples: &TupleBatch,
    lambda: f64,
    reference: ReferenceDistance,
) -> Result<Vec<AugmentedTuple>> {
    tuples.validate(embeddings.rows())?;
    tuples
        .tuples
        .iter()
        .map(|t| {
            let anchor = embeddings.row(t.anchor);
            let positive = embeddings.row(t.positive);
            let d_plus = match reference {
                ReferenceDistance::Positive => euclidean(anchor, positive),
                ReferenceDistance::Fixed(v) => v,
            };
            let original_negatives: Vec<Vec<f64>> =
                t.negatives.iter().map(|&n| embeddings.row(n).to_vec()).collect();
            let degenerate = !(d_plus > 0.0);
            let hardened_negatives = if degenerate {
                original_negatives.clone()
            } else {
                original_negatives
                    .iter()
                    .map(|n| augment_negative(anchor, n, d_plus, lambda))
                    .collect::<Result<_>>()?
            };
            Ok(AugmentedTuple {
                anchor: anchor.to_vec(),
                positive: positive.to_vec(),
                reference_distance: vec![d_plus; t.negatives.len()],
                hardened_negatives,
                original_negatives,
                degenerate,
            })
        })
        .collect()
}
