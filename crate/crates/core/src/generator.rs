//! Decoder `i : 𝒵 → 𝒴` that turns (hardened) embeddings back into features,
//! and the softmax classifier that keeps synthetic features on their labels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numgrad::{softmax_xent, squared_error, Activation, DenseGrads, DenseLayer, Matrix, Sequential};
use crate::optim::Adam;

/// Generator parameters `θ_i`: relu hidden layer(s), linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub net: Sequential,
}

impl GeneratorParams {
    /// `embed_dim → hidden… (relu) → feature_dim (identity)`.
    pub fn init<R: Rng + ?Sized>(
        embed_dim: usize,
        hidden: &[usize],
        feature_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut dims = vec![embed_dim];
        dims.extend_from_slice(hidden);
        dims.push(feature_dim);
        Self {
            net: Sequential::init(&dims, Activation::Relu, Activation::Identity, rng),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.net.in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.net.out_dim()
    }

    /// Synthetic features for every embedding row.
    pub fn generate(&self, embeddings: &Matrix) -> Result<Matrix> {
        if embeddings.cols() != self.embed_dim() {
            return Err(Error::dims(
                "generate",
                embeddings.shape(),
                (embeddings.rows(), self.embed_dim()),
            ));
        }
        self.net.infer(embeddings)
    }
}

/// Classifier parameters `θ_c`: one linear layer onto the training classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    pub layer: DenseLayer,
}

impl ClassifierParams {
    pub fn init<R: Rng + ?Sized>(feature_dim: usize, classes: usize, rng: &mut R) -> Self {
        Self {
            layer: DenseLayer::init(feature_dim, classes, Activation::Identity, rng),
        }
    }

    pub fn classes(&self) -> usize {
        self.layer.out_dim()
    }

    pub fn predict(&self, features: &Matrix) -> Result<Vec<usize>> {
        let logits = self.layer.infer(features)?;
        Ok(logits
            .row_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }

    /// Fraction of rows classified as their label. Zero rows give 0.
    pub fn accuracy(&self, features: &Matrix, labels: &[usize]) -> Result<f64> {
        if features.rows() == 0 {
            return Ok(0.0);
        }
        let pred = self.predict(features)?;
        let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / features.rows() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GeneratorLossBreakdown {
    pub j_recon: f64,
    pub j_soft: f64,
    pub lambda_balance: f64,
    pub j_gen: f64,
}

/// Everything one generator forward/backward produces.
#[derive(Debug, Clone)]
pub struct GeneratorOutput {
    pub loss: GeneratorLossBreakdown,
    /// Gradients for `θ_i` only.
    pub grads: Vec<DenseGrads>,
    /// `y′ = i(z)` for the unaltered embeddings.
    pub reconstructed: Matrix,
    /// `ỹ = i(ẑ)` for the hardened embeddings.
    pub hardened: Matrix,
}

/// `J_gen = J_recon + λ_balance · J_soft` with gradients w.r.t. `θ_i`.
///
/// `J_recon` compares `i(z)` with the real features, `J_soft` classifies
/// `i(ẑ)` with the (constant) classifier against the original labels of the
/// hardened negatives. Nothing upstream of `z`/`ẑ` and nothing in the
/// classifier receives a gradient.
pub fn generator_loss(
    gen: &GeneratorParams,
    clf: &ClassifierParams,
    real_features: &Matrix,
    embeddings: &Matrix,
    hardened: &Matrix,
    hardened_labels: &[usize],
    lambda_balance: f64,
) -> Result<GeneratorOutput> {
    if real_features.rows() != embeddings.rows() {
        return Err(Error::dims("generator_loss", real_features.shape(), embeddings.shape()));
    }
    if hardened_labels.len() != hardened.rows() {
        return Err(Error::dims("generator_loss", hardened.shape(), (hardened_labels.len(), 1)));
    }
    if let Some(&bad) = hardened_labels.iter().find(|&&l| l >= clf.classes()) {
        return Err(Error::input(format!(
            "label {bad} outside the {} training classes",
            clf.classes()
        )));
    }
    let b = embeddings.rows();
    let stacked = embeddings.vstack(hardened)?;
    let (out, mut tape) = gen.net.forward(&stacked)?;
    let reconstructed = out.slice_rows(0, b);
    let synth = out.slice_rows(b, out.rows());

    let (j_recon, g_recon, _) = squared_error(&reconstructed, real_features)?;
    let (j_soft, g_synth) = if synth.rows() > 0 {
        let (logits, mut clf_tape) = clf.layer.forward(&synth)?;
        let (j, g_logits) = softmax_xent(&logits, hardened_labels)?;
        let (g_in, _discarded) = clf.layer.backward(&mut clf_tape, &g_logits)?;
        (j, g_in.scale(lambda_balance))
    } else {
        (0.0, Matrix::zeros(0, gen.feature_dim()))
    };
    let upstream = g_recon.vstack(&g_synth)?;
    let (_, grads) = gen.net.backward(&mut tape, &upstream)?;
    Ok(GeneratorOutput {
        loss: GeneratorLossBreakdown {
            j_recon,
            j_soft,
            lambda_balance,
            j_gen: j_recon + lambda_balance * j_soft,
        },
        grads,
        reconstructed,
        hardened: synth,
    })
}

/// Softmax loss of the classifier on real features and its `θ_c` gradient.
pub fn classifier_loss(clf: &ClassifierParams, features: &Matrix, labels: &[usize]) -> Result<(f64, DenseGrads)> {
    let (logits, mut tape) = clf.layer.forward(features)?;
    let (loss, g) = softmax_xent(&logits, labels)?;
    let (_, grads) = clf.layer.backward(&mut tape, &g)?;
    Ok((loss, grads))
}

/// One optimizer step on `θ_c` from the softmax loss on real features.
/// Returns the loss before the update.
pub fn classifier_step(
    clf: &mut ClassifierParams,
    optimizer: &mut Adam,
    features: &Matrix,
    labels: &[usize],
) -> Result<f64> {
    if features.rows() == 0 {
        return Err(Error::input("classifier step on an empty batch"));
    }
    let (loss, grads) = classifier_loss(clf, features, labels)?;
    optimizer.step(&mut [&mut clf.layer], &[grads])?;
    Ok(loss)
}
