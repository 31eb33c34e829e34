//! Finite-difference verification of the full model paths used in training.
//!
//! Three fragments cover every trainable partition that receives gradients:
//! the embedder under each metric loss, and the generator under `J_gen`.
//! [`run_suite`] draws seeded random instances of each and checks them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::embedding::{euclidean, EmbedderParams};
use crate::error::Result;
use crate::generator::{generator_loss, ClassifierParams, GeneratorParams};
use crate::metric::{batch_metric_loss, LossConfig, LossKind, TupleBatch};
use crate::numgrad::check::{flatten, layer_names};
use crate::numgrad::{gradcheck, Fragment, GradcheckReport, Matrix, Probe};
use crate::train::mine_tuples;

/// Default number of random instances per fragment.
pub const DEFAULT_INSTANCES: usize = 20;
/// Default relative tolerance.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Redraws allowed when an instance lands within the kink margin.
const MAX_REDRAWS: usize = 16;

/// Extractor and projector under a metric loss on fixed inputs.
pub struct EmbedderMetricFragment {
    pub embedder: EmbedderParams,
    pub inputs: Matrix,
    pub tuples: TupleBatch,
    pub loss: LossConfig,
}

impl EmbedderMetricFragment {
    fn hinge(&self, z: &Matrix, pattern: &mut Vec<bool>) -> f64 {
        let mut margin = f64::INFINITY;
        for t in &self.tuples.tuples {
            let a = z.row(t.anchor);
            let dp = euclidean(a, z.row(t.positive));
            margin = margin.min(dp);
            for &n in &t.negatives {
                let dn = euclidean(a, z.row(n));
                margin = margin.min(dn);
                if self.tuples.kind == LossKind::Triplet {
                    let v = dp - dn + self.loss.margin;
                    pattern.push(v > 0.0);
                    margin = margin.min(v.abs());
                }
            }
        }
        margin
    }
}

impl Fragment for EmbedderMetricFragment {
    fn group_names(&self) -> Vec<String> {
        let mut names = layer_names("extractor", &self.embedder.extractor.layers);
        names.push("projector".into());
        names
    }

    fn group_len(&self, group: usize) -> usize {
        match self.embedder.extractor.layers.get(group) {
            Some(layer) => layer.param_count(),
            None => self.embedder.projector.param_count(),
        }
    }

    fn param_mut(&mut self, group: usize, index: usize) -> &mut f64 {
        let n = self.embedder.extractor.layers.len();
        if group < n {
            self.embedder.extractor.layers[group].param_mut(index)
        } else {
            self.embedder.projector.param_mut(index)
        }
    }

    fn probe(&self) -> Result<Probe> {
        let (y, tape) = self.embedder.extract(&self.inputs)?;
        let (z, _) = self.embedder.project(&y)?;
        let (loss, _) = batch_metric_loss(&z, &self.tuples, &self.loss)?;
        let mut pattern = Vec::new();
        tape.relu_pattern(&self.embedder.extractor, &mut pattern);
        let margin = tape.relu_margin(&self.embedder.extractor).min(self.hinge(&z, &mut pattern));
        Ok(Probe { loss, pattern, margin })
    }

    fn grads(&self) -> Result<Vec<Vec<f64>>> {
        let (y, mut tape_f) = self.embedder.extract(&self.inputs)?;
        let (z, mut tape_g) = self.embedder.project(&y)?;
        let (_, grad_z) = batch_metric_loss(&z, &self.tuples, &self.loss)?;
        let (grad_y, projector) = self.embedder.project_backward(&mut tape_g, &grad_z)?;
        let (_, extractor) = self.embedder.extractor.backward(&mut tape_f, &grad_y)?;
        let mut out: Vec<Vec<f64>> = extractor.iter().map(flatten).collect();
        out.push(flatten(&projector));
        Ok(out)
    }
}

/// Generator parameters under `J_gen` with the classifier held fixed.
pub struct GeneratorFragment {
    pub generator: GeneratorParams,
    pub classifier: ClassifierParams,
    pub real_features: Matrix,
    pub embeddings: Matrix,
    pub hardened: Matrix,
    pub hardened_labels: Vec<usize>,
    pub lambda_balance: f64,
}

impl Fragment for GeneratorFragment {
    fn group_names(&self) -> Vec<String> {
        layer_names("generator", &self.generator.net.layers)
    }

    fn group_len(&self, group: usize) -> usize {
        self.generator.net.layers[group].param_count()
    }

    fn param_mut(&mut self, group: usize, index: usize) -> &mut f64 {
        self.generator.net.layers[group].param_mut(index)
    }

    fn probe(&self) -> Result<Probe> {
        let out = self.run()?;
        let (_, tape) = self.generator.net.forward(&self.embeddings.vstack(&self.hardened)?)?;
        let mut pattern = Vec::new();
        tape.relu_pattern(&self.generator.net, &mut pattern);
        Ok(Probe {
            loss: out.loss.j_gen,
            pattern,
            margin: tape.relu_margin(&self.generator.net),
        })
    }

    fn grads(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.run()?.grads.iter().map(flatten).collect())
    }
}

impl GeneratorFragment {
    fn run(&self) -> Result<crate::generator::GeneratorOutput> {
        generator_loss(
            &self.generator,
            &self.classifier,
            &self.real_features,
            &self.embeddings,
            &self.hardened,
            &self.hardened_labels,
            self.lambda_balance,
        )
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

fn jitter_biases<'a>(layers: impl Iterator<Item = &'a mut crate::numgrad::DenseLayer>, rng: &mut ChaCha8Rng) {
    for layer in layers {
        for b in &mut layer.bias {
            *b = rng.gen_range(-0.3..0.3);
        }
    }
}

/// A random embedder instance on 3 classes × 2 samples.
pub fn embedder_instance(kind: LossKind, seed: u64) -> EmbedderMetricFragment {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut embedder = EmbedderParams::init(5, &[7, 6], 4, &mut rng);
    jitter_biases(embedder.extractor.layers.iter_mut(), &mut rng);
    jitter_biases(std::iter::once(&mut embedder.projector), &mut rng);
    let labels = vec![0, 0, 1, 1, 2, 2];
    let loss = LossConfig { margin: 1.0, npair_n: 3 };
    let tuples = mine_tuples(&labels, kind, &loss, &mut rng).expect("three classes with pairs");
    EmbedderMetricFragment {
        embedder,
        inputs: uniform(&mut rng, labels.len(), 5),
        tuples,
        loss,
    }
}

/// A random generator instance: batch of 4, 3 hardened negatives, 3 classes.
pub fn generator_instance(seed: u64) -> GeneratorFragment {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (embed, feature, classes) = (4, 6, 3);
    let mut generator = GeneratorParams::init(embed, &[5], feature, &mut rng);
    jitter_biases(generator.net.layers.iter_mut(), &mut rng);
    let mut classifier = ClassifierParams::init(feature, classes, &mut rng);
    jitter_biases(std::iter::once(&mut classifier.layer), &mut rng);
    GeneratorFragment {
        generator,
        classifier,
        real_features: uniform(&mut rng, 4, feature),
        embeddings: uniform(&mut rng, 4, embed),
        hardened: uniform(&mut rng, 3, embed),
        hardened_labels: (0..3).map(|_| rng.gen_range(0..classes)).collect(),
        lambda_balance: 0.5,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseReport {
    pub fragment: String,
    pub seed: u64,
    /// Seeds rejected before this one because they sat on a kink.
    pub redraws: usize,
    pub report: GradcheckReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub cases: Vec<CaseReport>,
    pub tolerance: f64,
    pub passed: bool,
}

impl SuiteReport {
    pub fn max_rel_dev(&self, fragment: &str) -> f64 {
        self.cases
            .iter()
            .filter(|c| c.fragment == fragment)
            .map(|c| c.report.max_rel_dev())
            .fold(0.0, f64::max)
    }

    pub fn count(&self, fragment: &str) -> usize {
        self.cases.iter().filter(|c| c.fragment == fragment).count()
    }
}

pub const FRAGMENTS: [&str; 3] = ["embedder+triplet", "embedder+npair", "generator"];

fn check_one(fragment: &str, seed: u64, tolerance: f64) -> Result<GradcheckReport> {
    match fragment {
        "embedder+triplet" => gradcheck(&mut embedder_instance(LossKind::Triplet, seed), tolerance),
        "embedder+npair" => gradcheck(&mut embedder_instance(LossKind::Npair, seed), tolerance),
        _ => gradcheck(&mut generator_instance(seed), tolerance),
    }
}

/// Checks `instances` random draws of every fragment, starting from `seed`.
pub fn run_suite(seed: u64, instances: usize, tolerance: f64) -> Result<SuiteReport> {
    let mut cases = Vec::new();
    for (f, name) in FRAGMENTS.iter().enumerate() {
        for i in 0..instances as u64 {
            let base = seed
                .wrapping_mul(1_000_003)
                .wrapping_add((f as u64) << 32)
                .wrapping_add(i * (MAX_REDRAWS as u64 + 1));
            let mut redraws = 0;
            let mut report = check_one(name, base, tolerance)?;
            while report.near_kink && redraws < MAX_REDRAWS {
                redraws += 1;
                report = check_one(name, base + redraws as u64, tolerance)?;
            }
            cases.push(CaseReport {
                fragment: name.to_string(),
                seed: base + redraws as u64,
                redraws,
                report,
            });
        }
    }
    let passed = !cases.is_empty() && cases.iter().all(|c| c.report.passed);
    Ok(SuiteReport {
        cases,
        tolerance,
        passed,
    })
}
