//! The metric model `h = g ∘ f`: an MLP feature extractor followed by a
//! single linear embedding projector, plus Euclidean distances.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numgrad::{Activation, DenseGrads, DenseLayer, GradTape, Matrix, Sequential, SequentialTape};

/// Rows of a matrix tagged with the samples and labels they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub values: Matrix,
    pub sample_ids: Vec<usize>,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(values: Matrix, sample_ids: Vec<usize>, labels: Vec<usize>) -> Result<Self> {
        if sample_ids.len() != values.rows() || labels.len() != values.rows() {
            return Err(Error::dims(
                "LabeledBatch::new",
                values.shape(),
                (sample_ids.len(), labels.len()),
            ));
        }
        Ok(Self {
            values,
            sample_ids,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }
}

/// Features `y = f(x)` in the extractor's output space.
pub type FeatureBatch = LabeledBatch;
/// Embeddings `z = g(y)` in the metric space.
pub type EmbeddingBatch = LabeledBatch;

/// Parameters of the metric model (`θ_f` and `θ_g`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderParams {
    pub extractor: Sequential,
    pub projector: DenseLayer,
    /// Scale embeddings to unit length after projection. Off by default.
    #[serde(default)]
    pub normalize: bool,
}

/// Backward state of [`EmbedderParams::project`].
#[derive(Debug)]
pub struct ProjectTape {
    layer: GradTape,
    /// Pre-normalization projections, present only when normalizing.
    raw: Option<Matrix>,
}

impl EmbedderParams {
    pub fn new(extractor: Sequential, projector: DenseLayer) -> Result<Self> {
        if projector.in_dim() != extractor.out_dim() {
            return Err(Error::dims(
                "EmbedderParams::new",
                (extractor.out_dim(), 0),
                projector.weight.shape(),
            ));
        }
        if projector.activation != Activation::Identity {
            return Err(Error::input("embedding projector must be linear"));
        }
        Ok(Self {
            extractor,
            projector,
            normalize: false,
        })
    }

    /// `input_dim → hidden… (relu)` extractor and a linear `→ embed_dim` projector.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        embed_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        let extractor = Sequential::init(&dims, Activation::Relu, Activation::Relu, rng);
        let feature_dim = *dims.last().expect("nonempty");
        let projector = DenseLayer::init(feature_dim, embed_dim, Activation::Identity, rng);
        Self {
            extractor,
            projector,
            normalize: false,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.extractor.in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.projector.in_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.projector.out_dim()
    }

    /// `y = f(x)`.
    pub fn extract(&self, input: &Matrix) -> Result<(Matrix, SequentialTape)> {
        if input.cols() != self.input_dim() {
            return Err(Error::dims(
                "extract",
                input.shape(),
                (input.rows(), self.input_dim()),
            ));
        }
        self.extractor.forward(input)
    }

    /// `z = g(y)`.
    pub fn project(&self, features: &Matrix) -> Result<(Matrix, ProjectTape)> {
        let (z, layer) = self.projector.forward(features)?;
        if self.normalize {
            Ok((l2_normalize_rows(&z), ProjectTape { layer, raw: Some(z) }))
        } else {
            Ok((z, ProjectTape { layer, raw: None }))
        }
    }

    /// Backward through `g`: gradient w.r.t. the features and `θ_g`.
    pub fn project_backward(
        &self,
        tape: &mut ProjectTape,
        upstream: &Matrix,
    ) -> Result<(Matrix, DenseGrads)> {
        let upstream = match tape.raw.take() {
            Some(raw) => l2_normalize_backward(&raw, upstream)?,
            None => upstream.clone(),
        };
        self.projector.backward(&mut tape.layer, &upstream)
    }

    /// `h(x)` without tapes.
    pub fn embed(&self, input: &Matrix) -> Result<Matrix> {
        if input.cols() != self.input_dim() {
            return Err(Error::dims("embed", input.shape(), (input.rows(), self.input_dim())));
        }
        let z = self.projector.infer(&self.extractor.infer(input)?)?;
        Ok(if self.normalize { l2_normalize_rows(&z) } else { z })
    }

    /// `g(y)` without tapes.
    pub fn project_only(&self, features: &Matrix) -> Result<Matrix> {
        let z = self.projector.infer(features)?;
        Ok(if self.normalize { l2_normalize_rows(&z) } else { z })
    }
}

fn l2_normalize_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let n = norm(row);
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

fn l2_normalize_backward(raw: &Matrix, upstream: &Matrix) -> Result<Matrix> {
    if raw.shape() != upstream.shape() {
        return Err(Error::dims("l2_normalize_backward", raw.shape(), upstream.shape()));
    }
    let mut out = Matrix::zeros(raw.rows(), raw.cols());
    for i in 0..raw.rows() {
        let x = raw.row(i);
        let g = upstream.row(i);
        let n = norm(x);
        if n == 0.0 {
            continue;
        }
        let proj: f64 = x.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() / (n * n);
        for ((o, &xv), &gv) in out.row_mut(i).iter_mut().zip(x).zip(g) {
            *o = (gv - xv * proj) / n;
        }
    }
    Ok(out)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Euclidean distance `‖a − b‖₂`.
pub fn distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dims("distance", (1, a.len()), (1, b.len())));
    }
    Ok(euclidean(a, b))
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Symmetric matrix of all row-to-row distances with a zero diagonal.
pub fn pairwise_distances(points: &Matrix) -> Matrix {
    let n = points.rows();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = euclidean(points.row(i), points.row(j));
            out[(i, j)] = d;
            out[(j, i)] = d;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_embedder(n: usize, act: Activation) -> EmbedderParams {
        let ex = Sequential::new(vec![DenseLayer::new(Matrix::identity(n), vec![0.0; n], act).unwrap()])
            .unwrap();
        let proj = DenseLayer::new(Matrix::identity(n), vec![0.0; n], Activation::Identity).unwrap();
        EmbedderParams::new(ex, proj).unwrap()
    }

    #[test]
    fn identity_extractor_and_projector() {
        let e = identity_embedder(2, Activation::Identity);
        let x = Matrix::from_rows(&[[1.5, -2.0], [0.0, 3.0]]).unwrap();
        let (y, _) = e.extract(&x).unwrap();
        assert_eq!(y, x);
        let (z, _) = e.project(&y).unwrap();
        assert_eq!(z, x);
    }

    #[test]
    fn zero_extractor_gives_zero_features() {
        let ex = Sequential::new(vec![DenseLayer::new(
            Matrix::zeros(3, 2),
            vec![0.0; 3],
            Activation::Relu,
        )
        .unwrap()])
        .unwrap();
        let proj = DenseLayer::new(Matrix::identity(3), vec![0.0; 3], Activation::Identity).unwrap();
        let e = EmbedderParams::new(ex, proj).unwrap();
        let (y, _) = e.extract(&Matrix::filled(4, 2, 7.0)).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn doubling_projector() {
        let mut e = identity_embedder(2, Activation::Identity);
        e.projector.weight = Matrix::identity(2).scale(2.0);
        let y = Matrix::from_rows(&[[1.0, -3.0]]).unwrap();
        let (z, _) = e.project(&y).unwrap();
        assert_eq!(z.as_slice(), &[2.0, -6.0]);
    }

    #[test]
    fn projector_width_checked() {
        let e = identity_embedder(2, Activation::Identity);
        assert!(matches!(e.project(&Matrix::zeros(1, 3)), Err(Error::Dimension { .. })));
        assert!(matches!(e.extract(&Matrix::zeros(1, 3)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn mismatched_projector_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ex = Sequential::init(&[3, 4], Activation::Relu, Activation::Relu, &mut rng);
        let proj = DenseLayer::init(5, 2, Activation::Identity, &mut rng);
        assert!(EmbedderParams::new(ex, proj).is_err());
    }

    #[test]
    fn distance_cases() {
        assert_eq!(distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert!(matches!(distance(&[0.0], &[0.0, 1.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn pairwise_on_number_line() {
        let p = Matrix::from_rows(&[[0.0], [1.0], [3.0]]).unwrap();
        let d = pairwise_distances(&p);
        assert_eq!((d[(0, 1)], d[(0, 2)], d[(1, 2)]), (1.0, 3.0, 2.0));
        assert_eq!(pairwise_distances(&Matrix::from_rows(&[[4.0, 2.0]]).unwrap()).as_slice(), &[0.0]);
    }

    #[test]
    fn normalization_backward_matches_finite_differences() {
        let raw = Matrix::from_rows(&[[0.3, -1.2, 2.0], [1.0, 0.5, -0.25]]).unwrap();
        let up = Matrix::from_rows(&[[0.7, 0.1, -0.4], [-1.0, 2.0, 0.3]]).unwrap();
        let g = l2_normalize_backward(&raw, &up).unwrap();
        let h = 1e-6;
        let objective = |m: &Matrix| {
            l2_normalize_rows(m)
                .as_slice()
                .iter()
                .zip(up.as_slice())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        for k in 0..6 {
            let mut p = raw.clone();
            p.as_mut_slice()[k] += h;
            let mut m = raw.clone();
            m.as_mut_slice()[k] -= h;
            let fd = (objective(&p) - objective(&m)) / (2.0 * h);
            assert!((fd - g.as_slice()[k]).abs() < 1e-8);
        }
    }
}
