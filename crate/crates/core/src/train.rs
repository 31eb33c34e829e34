//! The joint training loop.
//!
//! Every step runs the original tuples through `h = g ∘ f`, hardens their
//! negatives in embedding space, decodes the hardened tuples with the
//! generator and re-embeds them through `g`. The metric model is trained on
//! `w·J_m + (1−w)·J_syn` with `w = exp(−β/J_gen)`; the generator on
//! `J_gen`; the classifier on real features only.
//!
//! Gradient routing:
//!
//! | objective   | θ_f | θ_g | θ_i | θ_c |
//! |-------------|-----|-----|-----|-----|
//! | J_metric    |  ✓  |  ✓  |     |     |
//! | J_gen       |     |     |  ✓  |     |
//! | classifier  |     |     |     |  ✓  |
//!
//! `θ_f` only sees the original-path term unless
//! [`TrainConfig::syn_grad_to_extractor`] is set.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_tuples, pulling_lambda, AugmentorState, ReferenceDistance};
use crate::data::{split_zero_shot, Dataset, Subset, ZeroShotSplit};
use crate::embedding::EmbedderParams;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::generator::{classifier_loss, generator_loss, ClassifierParams, GeneratorParams};
use crate::metric::{batch_metric_loss, Flavor, LossConfig, LossKind, Tuple, TupleBatch};
use crate::numgrad::{DenseGrads, Matrix};
use crate::optim::Adam;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    /// Pulling factor α of the hardness schedule.
    pub alpha: f64,
    /// β in the synthetic-loss weight `exp(−β/J_gen)`.
    pub beta: f64,
    /// Weight of the softmax term in `J_gen`.
    pub lambda_balance: f64,
    pub margin: f64,
    pub npair_n: usize,
    /// Triplet batch size; N-pair batches are always `npair_n × 2`.
    pub batch_size: usize,
    pub samples_per_class: usize,
    pub epochs: usize,
    /// Rate for the extractor `θ_f`.
    pub learning_rate: f64,
    /// Multiplier applied to the rate of `θ_g`, `θ_i` and `θ_c`.
    pub lr_multiplier: f64,
    pub seed: u64,
    pub embed_dim: usize,
    pub extractor_hidden: Vec<usize>,
    pub generator_hidden: Vec<usize>,
    /// Evaluate every this many epochs; 0 evaluates only after the last one.
    pub eval_every: usize,
    pub ks: Vec<usize>,
    /// Train with the synthetic path. Off gives the plain baseline.
    pub hdml: bool,
    /// Backpropagate `J_syn` through the frozen generator into the original
    /// embeddings, so that `θ_f` (and `θ_g` through `z = g(y)`) also see it.
    pub syn_grad_to_extractor: bool,
    pub normalize_embeddings: bool,
    pub reference_distance: ReferenceDistance,
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_loss(LossKind::Triplet)
    }
}

impl TrainConfig {
    /// Defaults for one loss; α is 7 for triplet and 90 for N-pair.
    pub fn for_loss(loss: LossKind) -> Self {
        Self {
            loss,
            alpha: match loss {
                LossKind::Triplet => 7.0,
                LossKind::Npair => 90.0,
            },
            beta: 1e4,
            lambda_balance: 0.5,
            margin: 1.0,
            npair_n: 8,
            batch_size: 32,
            samples_per_class: 4,
            epochs: 30,
            learning_rate: 1e-3,
            lr_multiplier: 10.0,
            seed: 0,
            embed_dim: 64,
            extractor_hidden: vec![256, 256],
            generator_hidden: Vec::new(),
            eval_every: 0,
            ks: vec![1, 2, 4, 8],
            hdml: true,
            syn_grad_to_extractor: false,
            normalize_embeddings: false,
            reference_distance: ReferenceDistance::Positive,
            train_fraction: 0.5,
            split_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be finite and >= 0, got {}", self.alpha));
        }
        if !(self.beta > 0.0) {
            return bad(format!("beta must be > 0, got {}", self.beta));
        }
        if !(self.lambda_balance >= 0.0) {
            return bad(format!("lambda_balance must be >= 0, got {}", self.lambda_balance));
        }
        if !(self.margin >= 0.0) {
            return bad(format!("margin must be >= 0, got {}", self.margin));
        }
        if self.npair_n < 2 {
            return bad(format!("npair_n must be >= 2, got {}", self.npair_n));
        }
        if self.batch_size < 2 || self.samples_per_class < 2 {
            return bad("batch_size and samples_per_class must be >= 2".into());
        }
        if !(self.learning_rate > 0.0) || !(self.lr_multiplier > 0.0) {
            return bad("learning rates must be > 0".into());
        }
        if self.embed_dim == 0 || self.extractor_hidden.is_empty() || self.extractor_hidden.contains(&0) {
            return bad("embed_dim and extractor layer widths must be positive".into());
        }
        if self.generator_hidden.contains(&0) {
            return bad("generator layer widths must be positive".into());
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return bad("ks must be a nonempty list of positive integers".into());
        }
        if let ReferenceDistance::Fixed(v) = self.reference_distance {
            if !(v > 0.0) {
                return bad(format!("fixed reference distance must be > 0, got {v}"));
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction must be in (0, 1), got {}", self.train_fraction));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            margin: self.margin,
            npair_n: self.npair_n,
        }
    }

    /// Generator hidden widths; empty means a single layer of `2 · embed_dim`.
    pub fn generator_dims(&self) -> Vec<usize> {
        if self.generator_hidden.is_empty() {
            vec![2 * self.embed_dim]
        } else {
            self.generator_hidden.clone()
        }
    }
}

/// All trainable parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Models {
    pub embedder: EmbedderParams,
    pub generator: GeneratorParams,
    pub classifier: ClassifierParams,
}

impl Models {
    pub fn init(input_dim: usize, train_classes: usize, config: &TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x005e_ed0f_1a7e);
        let mut embedder = EmbedderParams::init(input_dim, &config.extractor_hidden, config.embed_dim, &mut rng);
        embedder.normalize = config.normalize_embeddings;
        let feature_dim = embedder.feature_dim();
        let generator = GeneratorParams::init(config.embed_dim, &config.generator_dims(), feature_dim, &mut rng);
        let classifier = ClassifierParams::init(feature_dim, train_classes, &mut rng);
        Self {
            embedder,
            generator,
            classifier,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizers {
    pub extractor: Adam,
    pub projector: Adam,
    pub generator: Adam,
    pub classifier: Adam,
}

impl Optimizers {
    pub fn new(config: &TrainConfig) -> Self {
        let fast = config.learning_rate * config.lr_multiplier;
        Self {
            extractor: Adam::new(config.learning_rate),
            projector: Adam::new(fast),
            generator: Adam::new(fast),
            classifier: Adam::new(fast),
        }
    }
}

/// One learning-curve row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub epoch: usize,
    pub j_m: f64,
    pub j_syn: f64,
    pub j_gen: f64,
    pub j_recon: f64,
    pub j_soft: f64,
    pub weight_w: f64,
    pub lambda_interp: f64,
    /// Classifier cross-entropy on real features.
    pub j_cls: f64,
}

pub const CURVE_HEADER: &str = "step,epoch,j_m,j_syn,j_gen,j_recon,j_soft,weight_w,lambda_interp,j_cls";

pub fn curves_to_csv(history: &[HistoryRow]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&format!(
            "{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}\n",
            r.step, r.epoch, r.j_m, r.j_syn, r.j_gen, r.j_recon, r.j_soft, r.weight_w, r.lambda_interp, r.j_cls
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub epoch: usize,
    pub step: usize,
    j_sum: f64,
    j_count: usize,
    pub augmentor: AugmentorState,
    pub optimizers: Optimizers,
    pub history: Vec<HistoryRow>,
    /// `J_avg` published at the end of each finished epoch.
    pub j_avg_by_epoch: Vec<f64>,
    pub skipped_batches: usize,
    pub degenerate_tuples: usize,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        Ok(Self {
            epoch: 0,
            step: 0,
            j_sum: 0.0,
            j_count: 0,
            augmentor: AugmentorState::new(config.alpha)?,
            optimizers: Optimizers::new(config),
            history: Vec::new(),
            j_avg_by_epoch: Vec::new(),
            skipped_batches: 0,
            degenerate_tuples: 0,
        })
    }

    pub fn lambda_interp(&self) -> f64 {
        pulling_lambda(&self.augmentor)
    }

    /// Publishes the mean `J_m` of the finished epoch and starts the next one.
    pub fn end_epoch(&mut self) -> Result<Option<f64>> {
        let avg = if self.j_count > 0 {
            let avg = self.j_sum / self.j_count as f64;
            self.augmentor.publish(avg)?;
            self.j_avg_by_epoch.push(avg);
            Some(avg)
        } else {
            None
        };
        self.j_sum = 0.0;
        self.j_count = 0;
        self.epoch += 1;
        Ok(avg)
    }
}

/// `exp(−β / J_gen)`: the share of the original-tuple loss in `J_metric`.
pub fn metric_weight(j_gen: f64, beta: f64) -> f64 {
    if !(j_gen > 0.0) {
        return 0.0;
    }
    if j_gen == f64::INFINITY {
        return 1.0;
    }
    (-beta / j_gen).exp()
}

/// Forms training tuples from batch labels. `None` means the batch lacks the
/// class diversity the loss needs.
pub fn mine_tuples<R: Rng + ?Sized>(
    labels: &[usize],
    kind: LossKind,
    config: &LossConfig,
    rng: &mut R,
) -> Option<TupleBatch> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    if by_class.len() < 2 {
        return None;
    }
    let tuples = match kind {
        LossKind::Triplet => {
            let mut tuples = Vec::new();
            for (a, &la) in labels.iter().enumerate() {
                let positives: Vec<usize> = by_class[&la].iter().copied().filter(|&p| p != a).collect();
                let negatives: Vec<usize> = (0..labels.len()).filter(|&n| labels[n] != la).collect();
                if let (Some(&p), Some(&n)) = (positives.choose(rng), negatives.choose(rng)) {
                    tuples.push(Tuple {
                        anchor: a,
                        positive: p,
                        negatives: vec![n],
                    });
                }
            }
            tuples
        }
        LossKind::Npair => {
            let mut eligible: Vec<usize> = by_class
                .iter()
                .filter(|(_, idx)| idx.len() >= 2)
                .map(|(&c, _)| c)
                .collect();
            if eligible.len() < config.npair_n {
                return None;
            }
            eligible.shuffle(rng);
            let pairs: Vec<(usize, usize)> = eligible[..config.npair_n]
                .iter()
                .map(|c| {
                    let chosen: Vec<usize> = by_class[c].choose_multiple(rng, 2).copied().collect();
                    (chosen[0], chosen[1])
                })
                .collect();
            (0..pairs.len())
                .map(|i| Tuple {
                    anchor: pairs[i].0,
                    positive: pairs[i].1,
                    negatives: (0..pairs.len()).filter(|&j| j != i).map(|j| pairs[j].1).collect(),
                })
                .collect()
        }
    };
    if tuples.is_empty() {
        return None;
    }
    Some(TupleBatch {
        kind,
        flavor: Flavor::Original,
        tuples,
        labels: labels.to_vec(),
    })
}

/// Training rows with labels remapped to `0..classes` for the classifier.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub samples: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
    by_class: Vec<Vec<usize>>,
}

impl TrainSet {
    pub fn new(samples: Matrix, labels: Vec<usize>) -> Result<Self> {
        if samples.rows() != labels.len() {
            return Err(Error::dims("TrainSet::new", samples.shape(), (labels.len(), 1)));
        }
        let mut global: Vec<usize> = labels.clone();
        global.sort_unstable();
        global.dedup();
        let local: BTreeMap<usize, usize> = global.iter().enumerate().map(|(i, &g)| (g, i)).collect();
        let labels: Vec<usize> = labels.iter().map(|l| local[l]).collect();
        let mut by_class = vec![Vec::new(); global.len()];
        for (i, &l) in labels.iter().enumerate() {
            by_class[l].push(i);
        }
        Ok(Self {
            samples,
            labels,
            classes: global.len(),
            by_class,
        })
    }

    pub fn from_subset(subset: &Subset) -> Result<Self> {
        Self::new(subset.samples.clone(), subset.labels.clone())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `classes × per_class` rows drawn without replacement within each class.
    pub fn sample_batch<R: Rng + ?Sized>(&self, classes: usize, per_class: usize, rng: &mut R) -> Batch {
        let mut pool: Vec<usize> = (0..self.classes).filter(|&c| !self.by_class[c].is_empty()).collect();
        pool.shuffle(rng);
        let mut rows = Vec::new();
        for &c in pool.iter().take(classes) {
            rows.extend(self.by_class[c].choose_multiple(rng, per_class));
        }
        Batch {
            inputs: self.samples.select_rows(&rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            rows,
        }
    }

    pub fn batch_shape(&self, config: &TrainConfig) -> (usize, usize) {
        match config.loss {
            LossKind::Triplet => {
                let per = config.samples_per_class;
                ((config.batch_size / per).max(2), per)
            }
            LossKind::Npair => (config.npair_n, 2),
        }
    }

    pub fn steps_per_epoch(&self, config: &TrainConfig) -> usize {
        let (c, k) = self.batch_shape(config);
        self.len().div_ceil(c * k).max(1)
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    /// Row indices into the [`TrainSet`].
    pub rows: Vec<usize>,
}

/// Gradients of `J_metric`: only the metric model's partitions exist here.
#[derive(Debug, Clone)]
pub struct MetricGrads {
    pub extractor: Vec<DenseGrads>,
    pub projector: DenseGrads,
}

/// Everything one step computes before any parameter moves.
#[derive(Debug, Clone)]
pub struct StepComputation {
    pub row: HistoryRow,
    pub j_metric: f64,
    pub metric: MetricGrads,
    /// `θ_i` gradients of `J_gen`; absent on the baseline path.
    pub generator: Option<Vec<DenseGrads>>,
    /// `θ_c` gradient of the classifier loss on real features.
    pub classifier: Option<DenseGrads>,
    pub classifier_loss: f64,
    pub degenerate_tuples: usize,
    pub synthetic: Option<SyntheticTuples>,
}

/// The decoded synthetic tuple batch of one step.
#[derive(Debug, Clone)]
pub struct SyntheticTuples {
    /// Rows `0..B` are `i(z)`, the rest `i(ẑ⁻)` for the hardened negatives.
    pub features: Matrix,
    pub tuples: TupleBatch,
    pub hardened_rows: std::ops::Range<usize>,
}

/// Which objectives' updates to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpdateMask {
    pub metric: bool,
    pub generator: bool,
    pub classifier: bool,
}

impl UpdateMask {
    pub const ALL: UpdateMask = UpdateMask {
        metric: true,
        generator: true,
        classifier: true,
    };
    pub const METRIC_ONLY: UpdateMask = UpdateMask {
        metric: true,
        generator: false,
        classifier: false,
    };
    pub const GENERATOR_ONLY: UpdateMask = UpdateMask {
        metric: false,
        generator: true,
        classifier: false,
    };
    pub const CLASSIFIER_ONLY: UpdateMask = UpdateMask {
        metric: false,
        generator: false,
        classifier: true,
    };
}

fn finite(value: f64, component: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite {
            component: component.into(),
        })
    }
}

/// Runs the forward passes and all three backward passes of one step.
pub fn compute_step(
    models: &Models,
    inputs: &Matrix,
    tuples: &TupleBatch,
    lambda_interp: f64,
    config: &TrainConfig,
) -> Result<StepComputation> {
    let loss_cfg = config.loss_config();
    let emb = &models.embedder;
    let (y, mut tape_f) = emb.extract(inputs)?;
    let (z, mut tape_g) = emb.project(&y)?;
    let (j_m, grad_z_m) = batch_metric_loss(&z, tuples, &loss_cfg)?;
    finite(j_m, "j_m")?;

    if !config.hdml {
        let (grad_y, projector) = emb.project_backward(&mut tape_g, &grad_z_m)?;
        let (_, extractor) = emb.extractor.backward(&mut tape_f, &grad_y)?;
        return Ok(StepComputation {
            row: HistoryRow {
                step: 0,
                epoch: 0,
                j_m,
                j_syn: 0.0,
                j_gen: 0.0,
                j_recon: 0.0,
                j_soft: 0.0,
                weight_w: 1.0,
                lambda_interp: 1.0,
                j_cls: 0.0,
            },
            j_metric: j_m,
            metric: MetricGrads { extractor, projector },
            generator: None,
            classifier: None,
            classifier_loss: 0.0,
            degenerate_tuples: 0,
            synthetic: None,
        });
    }

    // hardness-aware augmentation; a constant from here on
    let augmented = augment_tuples(&z, tuples, lambda_interp, config.reference_distance)?;
    let b = z.rows();
    let mut hardened_rows = Vec::new();
    let mut hardened_labels = Vec::new();
    let mut syn_tuples = Vec::with_capacity(tuples.tuples.len());
    for (t, aug) in tuples.tuples.iter().zip(&augmented) {
        let mut negatives = Vec::with_capacity(t.negatives.len());
        for (&n, h) in t.negatives.iter().zip(&aug.hardened_negatives) {
            negatives.push(b + hardened_rows.len());
            hardened_rows.push(h.clone());
            hardened_labels.push(tuples.labels[n]);
        }
        syn_tuples.push(Tuple {
            anchor: t.anchor,
            positive: t.positive,
            negatives,
        });
    }
    let degenerate_tuples = augmented.iter().filter(|a| a.degenerate).count();
    let hardened = if hardened_rows.is_empty() {
        Matrix::zeros(0, z.cols())
    } else {
        Matrix::from_rows(&hardened_rows)?
    };

    let gen = generator_loss(
        &models.generator,
        &models.classifier,
        &y,
        &z,
        &hardened,
        &hardened_labels,
        config.lambda_balance,
    )?;
    finite(gen.loss.j_gen, "j_gen")?;

    let synthetic_features = gen.reconstructed.vstack(&gen.hardened)?;
    let mut syn_labels = tuples.labels.clone();
    syn_labels.extend_from_slice(&hardened_labels);
    let syn_batch = TupleBatch {
        kind: tuples.kind,
        flavor: Flavor::Synthetic,
        tuples: syn_tuples,
        labels: syn_labels,
    };
    let (z_syn, mut tape_g_syn) = emb.project(&synthetic_features)?;
    let (j_syn, grad_z_syn) = batch_metric_loss(&z_syn, &syn_batch, &loss_cfg)?;
    finite(j_syn, "j_syn")?;

    let w = metric_weight(gen.loss.j_gen, config.beta);
    let j_metric = w * j_m + (1.0 - w) * j_syn;

    let (grad_y_syn, projector_syn) = emb.project_backward(&mut tape_g_syn, &grad_z_syn.scale(1.0 - w))?;
    let mut grad_z = grad_z_m.scale(w);
    if config.syn_grad_to_extractor {
        // through the (frozen) generator into the unaltered embeddings only
        let stacked = z.vstack(&hardened)?;
        let (_, mut gen_tape) = models.generator.net.forward(&stacked)?;
        let (grad_in, _) = models.generator.net.backward(&mut gen_tape, &grad_y_syn)?;
        grad_z.add_scaled(&grad_in.slice_rows(0, b), 1.0)?;
    }
    let (grad_y, mut projector) = emb.project_backward(&mut tape_g, &grad_z)?;
    projector.add_scaled(&projector_syn, 1.0)?;
    let (_, extractor) = emb.extractor.backward(&mut tape_f, &grad_y)?;

    let (clf_loss, clf_grads) = classifier_loss(&models.classifier, &y, &tuples.labels)?;
    finite(clf_loss, "classifier")?;

    Ok(StepComputation {
        row: HistoryRow {
            step: 0,
            epoch: 0,
            j_m,
            j_syn,
            j_gen: gen.loss.j_gen,
            j_recon: gen.loss.j_recon,
            j_soft: gen.loss.j_soft,
            weight_w: w,
            lambda_interp,
            j_cls: clf_loss,
        },
        j_metric,
        metric: MetricGrads { extractor, projector },
        generator: Some(gen.grads),
        classifier: Some(clf_grads),
        classifier_loss: clf_loss,
        degenerate_tuples,
        synthetic: Some(SyntheticTuples {
            features: synthetic_features,
            tuples: syn_batch,
            hardened_rows: b..b + hardened_rows.len(),
        }),
    })
}

/// Applies the selected updates from a [`StepComputation`].
pub fn apply_updates(
    models: &mut Models,
    optimizers: &mut Optimizers,
    step: &StepComputation,
    mask: UpdateMask,
) -> Result<()> {
    if mask.metric {
        let mut layers: Vec<_> = models.embedder.extractor.layers.iter_mut().collect();
        optimizers.extractor.step(&mut layers, &step.metric.extractor)?;
        optimizers
            .projector
            .step(&mut [&mut models.embedder.projector], std::slice::from_ref(&step.metric.projector))?;
    }
    if mask.generator {
        if let Some(g) = &step.generator {
            let mut layers: Vec<_> = models.generator.net.layers.iter_mut().collect();
            optimizers.generator.step(&mut layers, g)?;
        }
    }
    if mask.classifier {
        if let Some(g) = &step.classifier {
            optimizers
                .classifier
                .step(&mut [&mut models.classifier.layer], std::slice::from_ref(g))?;
        }
    }
    Ok(())
}

/// One full step on a batch: compute, update every partition, log.
pub fn train_step(
    models: &mut Models,
    state: &mut TrainState,
    inputs: &Matrix,
    tuples: &TupleBatch,
    config: &TrainConfig,
) -> Result<HistoryRow> {
    train_step_masked(models, state, inputs, tuples, config, UpdateMask::ALL)
}

pub fn train_step_masked(
    models: &mut Models,
    state: &mut TrainState,
    inputs: &Matrix,
    tuples: &TupleBatch,
    config: &TrainConfig,
    mask: UpdateMask,
) -> Result<HistoryRow> {
    let lambda = if config.hdml { state.lambda_interp() } else { 1.0 };
    let mut comp = compute_step(models, inputs, tuples, lambda, config)?;
    apply_updates(models, &mut state.optimizers, &comp, mask)?;
    comp.row.step = state.step;
    comp.row.epoch = state.epoch;
    state.step += 1;
    state.j_sum += comp.row.j_m;
    state.j_count += 1;
    state.degenerate_tuples += comp.degenerate_tuples;
    state.history.push(comp.row);
    Ok(comp.row)
}

/// Classifier accuracy on real training features and on decoded hardened negatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LabelPreservation {
    pub real_accuracy: f64,
    pub synthetic_accuracy: f64,
    pub real_count: usize,
    pub synthetic_count: usize,
    pub lambda_interp: f64,
}

impl LabelPreservation {
    pub fn ratio(&self) -> f64 {
        if self.real_accuracy == 0.0 {
            0.0
        } else {
            self.synthetic_accuracy / self.real_accuracy
        }
    }
}

/// Measures how well the frozen classifier recognises hardened synthetic
/// negatives as their original class, over `batches` freshly mined batches.
pub fn label_preservation<R: Rng + ?Sized>(
    models: &Models,
    train: &TrainSet,
    config: &TrainConfig,
    lambda_interp: f64,
    batches: usize,
    rng: &mut R,
) -> Result<LabelPreservation> {
    let features = models.embedder.extractor.infer(&train.samples)?;
    let real_accuracy = models.classifier.accuracy(&features, &train.labels)?;
    let (classes, per) = train.batch_shape(config);
    let mut hits = 0usize;
    let mut total = 0usize;
    for _ in 0..batches {
        let batch = train.sample_batch(classes, per, rng);
        let Some(tuples) = mine_tuples(&batch.labels, config.loss, &config.loss_config(), rng) else {
            continue;
        };
        let y = models.embedder.extractor.infer(&batch.inputs)?;
        let z = models.embedder.project_only(&y)?;
        let augmented = augment_tuples(&z, &tuples, lambda_interp, config.reference_distance)?;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (t, aug) in tuples.tuples.iter().zip(&augmented) {
            for (&n, h) in t.negatives.iter().zip(&aug.hardened_negatives) {
                rows.push(h.clone());
                labels.push(tuples.labels[n]);
            }
        }
        if rows.is_empty() {
            continue;
        }
        let synth = models.generator.generate(&Matrix::from_rows(&rows)?)?;
        let pred = models.classifier.predict(&synth)?;
        hits += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
        total += labels.len();
    }
    Ok(LabelPreservation {
        real_accuracy,
        synthetic_accuracy: if total == 0 { 0.0 } else { hits as f64 / total as f64 },
        real_count: train.len(),
        synthetic_count: total,
        lambda_interp,
    })
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub initial_models: Models,
    pub models: Models,
    pub split: ZeroShotSplit,
    pub history: Vec<HistoryRow>,
    pub j_avg_by_epoch: Vec<f64>,
    /// `(epoch, report)` for every scheduled evaluation.
    pub evaluations: Vec<(usize, EvalReport)>,
    pub final_report: Option<EvalReport>,
    pub final_lambda: f64,
    pub skipped_batches: usize,
    pub degenerate_tuples: usize,
    pub steps_per_epoch: usize,
}

/// Embeds the held-out classes and scores them.
pub fn evaluate_split(models: &Models, dataset: &Dataset, split: &ZeroShotSplit, ks: &[usize], seed: u64) -> Result<EvalReport> {
    let test = dataset.subset(&split.test_classes);
    let z = models.embedder.embed(&test.samples)?;
    evaluate(&z, &test.labels, ks, seed)
}

/// Splits the dataset by class, trains for `config.epochs` epochs and evaluates on the held-out classes.
pub fn run_training(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::input("empty dataset"));
    }
    let split = split_zero_shot(dataset, config.train_fraction, config.split_seed)?;
    let train = TrainSet::from_subset(&dataset.subset(&split.train_classes))?;
    let mut models = Models::init(dataset.input_dim(), train.classes, config);
    let initial_models = models.clone();
    let mut state = TrainState::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let steps_per_epoch = train.steps_per_epoch(config);
    let (classes, per) = train.batch_shape(config);
    let loss_cfg = config.loss_config();
    let mut evaluations = Vec::new();

    for epoch in 0..config.epochs {
        for _ in 0..steps_per_epoch {
            let batch = train.sample_batch(classes, per, &mut rng);
            let Some(tuples) = mine_tuples(&batch.labels, config.loss, &loss_cfg, &mut rng) else {
                log::warn!("epoch {epoch}: batch lacks class diversity, skipped");
                state.skipped_batches += 1;
                continue;
            };
            train_step(&mut models, &mut state, &batch.inputs, &tuples, config)?;
        }
        let j_avg = state.end_epoch()?;
        log::info!(
            "epoch {epoch}: J_avg = {:?}, next lambda = {:.4}",
            j_avg,
            state.lambda_interp()
        );
        let last = epoch + 1 == config.epochs;
        if config.eval_every > 0 && ((epoch + 1) % config.eval_every == 0) && !last {
            evaluations.push((epoch, evaluate_split(&models, dataset, &split, &config.ks, config.seed)?));
        }
    }
    let final_report = if config.epochs > 0 {
        let report = evaluate_split(&models, dataset, &split, &config.ks, config.seed)?;
        evaluations.push((config.epochs - 1, report.clone()));
        Some(report)
    } else {
        None
    };
    Ok(TrainOutcome {
        initial_models,
        final_lambda: if config.hdml { state.lambda_interp() } else { 1.0 },
        models,
        split,
        history: state.history,
        j_avg_by_epoch: state.j_avg_by_epoch,
        evaluations,
        final_report,
        skipped_batches: state.skipped_batches,
        degenerate_tuples: state.degenerate_tuples,
        steps_per_epoch,
    })
}
