//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use super::dense::{DenseLayer, Sequential};
use super::loss::{softmax_xent, squared_error};
use super::matrix::Matrix;
use crate::error::Result;

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Instances whose nearest kink (ReLU pre-activation, hinge boundary) is closer than this are not checked.
pub const KINK_MARGIN: f64 = 1e-7;
/// Gradients below this magnitude are compared absolutely rather than relatively.
const REL_FLOOR: f64 = 1e-6;

/// Loss value plus the piecewise-linear regime it was evaluated in.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub loss: f64,
    /// One flag per kink (ReLU unit active, hinge active). Finite differences
    /// across a change in this pattern are meaningless.
    pub pattern: Vec<bool>,
    /// Distance of the nearest pre-kink quantity to its kink.
    pub margin: f64,
}

impl Probe {
    pub fn smooth(loss: f64) -> Self {
        Self {
            loss,
            pattern: Vec::new(),
            margin: f64::INFINITY,
        }
    }
}

/// Anything with a scalar loss, analytic gradients and addressable parameters.
pub trait Fragment {
    fn group_names(&self) -> Vec<String>;
    fn group_len(&self, group: usize) -> usize;
    fn param_mut(&mut self, group: usize, index: usize) -> &mut f64;
    fn probe(&self) -> Result<Probe>;
    /// Analytic gradients, one flat vector per parameter group.
    fn grads(&self) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupReport {
    pub name: String,
    pub max_rel_dev: f64,
    pub checked: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub groups: Vec<GroupReport>,
    pub tolerance: f64,
    /// The base point itself sat within [`KINK_MARGIN`] of a kink.
    pub near_kink: bool,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn max_rel_dev(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_dev).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.groups.iter().map(|g| g.checked).sum()
    }
}

pub fn relative_deviation(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares every analytic gradient entry with `(L(θ+h) − L(θ−h)) / 2h`.
///
/// Entries whose ±h perturbation changes the kink pattern are skipped. Never
/// returns an error for a mismatch; the verdict is in the report.
pub fn gradcheck<F: Fragment + ?Sized>(fragment: &mut F, tolerance: f64) -> Result<GradcheckReport> {
    let base = fragment.probe()?;
    let analytic = fragment.grads()?;
    let near_kink = base.margin < KINK_MARGIN;
    let mut groups = Vec::new();
    for (g, name) in fragment.group_names().into_iter().enumerate() {
        let mut report = GroupReport {
            name,
            max_rel_dev: 0.0,
            checked: 0,
            skipped: 0,
        };
        if !near_kink {
            for k in 0..fragment.group_len(g) {
                let orig = *fragment.param_mut(g, k);
                *fragment.param_mut(g, k) = orig + FD_STEP;
                let plus = fragment.probe();
                *fragment.param_mut(g, k) = orig - FD_STEP;
                let minus = fragment.probe();
                *fragment.param_mut(g, k) = orig;
                let (plus, minus) = (plus?, minus?);
                if plus.pattern != base.pattern || minus.pattern != base.pattern {
                    report.skipped += 1;
                    continue;
                }
                let numeric = (plus.loss - minus.loss) / (2.0 * FD_STEP);
                let dev = relative_deviation(analytic[g][k], numeric);
                report.max_rel_dev = report.max_rel_dev.max(dev);
                report.checked += 1;
            }
        }
        groups.push(report);
    }
    let passed = !near_kink
        && groups.iter().all(|g| g.max_rel_dev <= tolerance)
        && groups.iter().any(|g| g.checked > 0);
    Ok(GradcheckReport {
        groups,
        tolerance,
        near_kink,
        passed,
    })
}

pub(crate) fn layer_names(prefix: &str, layers: &[DenseLayer]) -> Vec<String> {
    layers
        .iter()
        .enumerate()
        .map(|(i, _)| format!("{prefix}[{i}]"))
        .collect()
}

pub(crate) fn flatten(grads: &super::dense::DenseGrads) -> Vec<f64> {
    let mut v = grads.weight.as_slice().to_vec();
    v.extend_from_slice(&grads.bias);
    v
}

/// A layer stack followed by squared error against a fixed target.
pub struct SquaredErrorFragment {
    pub net: Sequential,
    pub input: Matrix,
    pub target: Matrix,
}

impl Fragment for SquaredErrorFragment {
    fn group_names(&self) -> Vec<String> {
        layer_names("layer", &self.net.layers)
    }

    fn group_len(&self, group: usize) -> usize {
        self.net.layers[group].param_count()
    }

    fn param_mut(&mut self, group: usize, index: usize) -> &mut f64 {
        self.net.layers[group].param_mut(index)
    }

    fn probe(&self) -> Result<Probe> {
        let (out, tape) = self.net.forward(&self.input)?;
        let (loss, _, _) = squared_error(&out, &self.target)?;
        let mut pattern = Vec::new();
        tape.relu_pattern(&self.net, &mut pattern);
        Ok(Probe {
            loss,
            pattern,
            margin: tape.relu_margin(&self.net),
        })
    }

    fn grads(&self) -> Result<Vec<Vec<f64>>> {
        let (out, mut tape) = self.net.forward(&self.input)?;
        let (_, g, _) = squared_error(&out, &self.target)?;
        let (_, grads) = self.net.backward(&mut tape, &g)?;
        Ok(grads.iter().map(flatten).collect())
    }
}

/// A layer stack followed by softmax cross-entropy.
pub struct SoftmaxFragment {
    pub net: Sequential,
    pub input: Matrix,
    pub labels: Vec<usize>,
}

impl Fragment for SoftmaxFragment {
    fn group_names(&self) -> Vec<String> {
        layer_names("layer", &self.net.layers)
    }

    fn group_len(&self, group: usize) -> usize {
        self.net.layers[group].param_count()
    }

    fn param_mut(&mut self, group: usize, index: usize) -> &mut f64 {
        self.net.layers[group].param_mut(index)
    }

    fn probe(&self) -> Result<Probe> {
        let (out, tape) = self.net.forward(&self.input)?;
        let (loss, _) = softmax_xent(&out, &self.labels)?;
        let mut pattern = Vec::new();
        tape.relu_pattern(&self.net, &mut pattern);
        Ok(Probe {
            loss,
            pattern,
            margin: tape.relu_margin(&self.net),
        })
    }

    fn grads(&self) -> Result<Vec<Vec<f64>>> {
        let (out, mut tape) = self.net.forward(&self.input)?;
        let (_, g) = softmax_xent(&out, &self.labels)?;
        let (_, grads) = self.net.backward(&mut tape, &g)?;
        Ok(grads.iter().map(flatten).collect())
    }
}

/// Wraps a fragment and multiplies its analytic gradients by a constant factor.
pub struct CorruptedGrads<F> {
    pub inner: F,
    pub factor: f64,
}

impl<F: Fragment> Fragment for CorruptedGrads<F> {
    fn group_names(&self) -> Vec<String> {
        self.inner.group_names()
    }

    fn group_len(&self, group: usize) -> usize {
        self.inner.group_len(group)
    }

    fn param_mut(&mut self, group: usize, index: usize) -> &mut f64 {
        self.inner.param_mut(group, index)
    }

    fn probe(&self) -> Result<Probe> {
        self.inner.probe()
    }

    fn grads(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .inner
            .grads()?
            .into_iter()
            .map(|g| g.into_iter().map(|v| v * self.factor).collect())
            .collect())
    }
}
