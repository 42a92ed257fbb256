//! Small classifiers trained by the simulated collaborators: a linear softmax
//! model and a one-hidden-layer tanh MLP, both with mean cross-entropy loss
//! and hand-written gradients.
//!
//! Parameters travel as [`ParameterSet`]s but training works on the flat
//! value vector, laid out in tensor order:
//!
//! | family          | tensors (shape)                                                            |
//! |-----------------|----------------------------------------------------------------------------|
//! | `linear_softmax` | `linear.weight` (C, D), `linear.bias` (C)                                  |
//! | `mlp_1hidden`   | `hidden.weight` (H, D), `hidden.bias` (H), `output.weight` (C, H), `output.bias` (C) |

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::partition::Dataset;
use crate::rng::chacha;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    #[default]
    LinearSoftmax,
    #[serde(rename = "mlp_1hidden")]
    Mlp1Hidden,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub model_family: ModelFamily,
    pub num_features: usize,
    pub num_classes: usize,
    /// Used by `mlp_1hidden` only.
    pub hidden_width: usize,
    /// Scale of the class-mean vectors in the data generator.
    pub class_separation: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            model_family: ModelFamily::LinearSoftmax,
            num_features: 8,
            num_classes: 4,
            hidden_width: 16,
            class_separation: 2.0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_features == 0 || self.num_classes == 0 {
            return Err(Error::BadConfig("task dimensions must be positive".into()));
        }
        if self.model_family == ModelFamily::Mlp1Hidden && self.hidden_width == 0 {
            return Err(Error::BadConfig(
                "hidden_width must be positive for mlp_1hidden".into(),
            ));
        }
        if !(self.class_separation >= 0.0 && self.class_separation.is_finite()) {
            return Err(Error::BadConfig(
                "class_separation must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    fn tensor_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (d, c, h) = (self.num_features, self.num_classes, self.hidden_width);
        match self.model_family {
            ModelFamily::LinearSoftmax => {
                vec![("linear.weight", vec![c, d]), ("linear.bias", vec![c])]
            }
            ModelFamily::Mlp1Hidden => vec![
                ("hidden.weight", vec![h, d]),
                ("hidden.bias", vec![h]),
                ("output.weight", vec![c, h]),
                ("output.bias", vec![c]),
            ],
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensor_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Builds a parameter set with this task's schema from flat values.
    pub fn params_from_flat(&self, flat: &[f64]) -> Result<ParameterSet> {
        if flat.len() != self.num_params() {
            return Err(Error::LengthMismatch {
                expected: self.num_params(),
                actual: flat.len(),
            });
        }
        let mut offset = 0;
        let parts = self
            .tensor_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let values = flat[offset..offset + n].to_vec();
                offset += n;
                (name, shape, values)
            })
            .collect();
        ParameterSet::from_parts(parts)
    }

    /// Zero weights for the linear model (uniform predictions). The MLP gets
    /// Gaussian weights scaled by `1/sqrt(fan_in)` and zero biases.
    pub fn init_params(&self, seed: u64) -> Result<ParameterSet> {
        self.validate()?;
        let mut flat = vec![0.0; self.num_params()];
        if self.model_family == ModelFamily::Mlp1Hidden {
            let mut rng = chacha(seed);
            let (d, c, h) = (self.num_features, self.num_classes, self.hidden_width);
            let l = MlpLayout::new(d, h, c);
            let s1 = 1.0 / (d as f64).sqrt();
            for v in &mut flat[l.w1..l.w1 + h * d] {
                *v = s1 * rng.sample::<f64, _>(StandardNormal);
            }
            let s2 = 1.0 / (h as f64).sqrt();
            for v in &mut flat[l.w2..l.w2 + c * h] {
                *v = s2 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        self.params_from_flat(&flat)
    }

    pub fn ensure_schema(&self, params: &ParameterSet) -> Result<()> {
        let template = self.params_from_flat(&vec![0.0; self.num_params()])?;
        template.ensure_compatible(params)
    }

    pub fn ensure_dataset(&self, data: &Dataset) -> Result<()> {
        if data.num_features() != self.num_features {
            return Err(Error::SchemaMismatch(format!(
                "dataset has {} features, task expects {}",
                data.num_features(),
                self.num_features
            )));
        }
        if let Some(&y) = data
            .labels()
            .iter()
            .find(|&&y| y as usize >= self.num_classes)
        {
            return Err(Error::SchemaMismatch(format!(
                "label {y} out of range for {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Class scores for one example.
    pub fn logits(&self, flat: &[f64], x: &[f64], out: &mut [f64]) {
        match self.model_family {
            ModelFamily::LinearSoftmax => {
                let d = self.num_features;
                let (w, b) = flat.split_at(self.num_classes * d);
                affine(w, b, x, out);
            }
            ModelFamily::Mlp1Hidden => {
                let l = MlpLayout::new(self.num_features, self.hidden_width, self.num_classes);
                let mut hidden = vec![0.0; self.hidden_width];
                l.hidden(flat, x, &mut hidden);
                affine(&flat[l.w2..l.b2], &flat[l.b2..], &hidden, out);
            }
        }
    }

    /// Mean cross-entropy over `rows` and its gradient, accumulated into
    /// `grad` (which is overwritten).
    pub fn loss_and_grad(
        &self,
        flat: &[f64],
        data: &Dataset,
        rows: &[usize],
        grad: &mut [f64],
    ) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let (d, c, h) = (self.num_features, self.num_classes, self.hidden_width);
        let scale = 1.0 / rows.len() as f64;
        let mut logits = vec![0.0; c];
        let mut total = 0.0;
        match self.model_family {
            ModelFamily::LinearSoftmax => {
                for &i in rows {
                    let x = data.row(i);
                    let y = data.label(i) as usize;
                    let (w, b) = flat.split_at(c * d);
                    affine(w, b, x, &mut logits);
                    total += softmax_xent(&mut logits, y);
                    // logits now hold dL/dz for this example
                    let (gw, gb) = grad.split_at_mut(c * d);
                    for k in 0..c {
                        let dz = logits[k] * scale;
                        gb[k] += dz;
                        for (g, xj) in gw[k * d..(k + 1) * d].iter_mut().zip(x) {
                            *g += dz * xj;
                        }
                    }
                }
            }
            ModelFamily::Mlp1Hidden => {
                let l = MlpLayout::new(d, h, c);
                let mut hidden = vec![0.0; h];
                let mut dh = vec![0.0; h];
                for &i in rows {
                    let x = data.row(i);
                    let y = data.label(i) as usize;
                    l.hidden(flat, x, &mut hidden);
                    affine(&flat[l.w2..l.b2], &flat[l.b2..], &hidden, &mut logits);
                    total += softmax_xent(&mut logits, y);
                    dh.iter_mut().for_each(|v| *v = 0.0);
                    for k in 0..c {
                        let dz = logits[k] * scale;
                        grad[l.b2 + k] += dz;
                        let w2_row = &flat[l.w2 + k * h..l.w2 + (k + 1) * h];
                        for j in 0..h {
                            grad[l.w2 + k * h + j] += dz * hidden[j];
                            dh[j] += dz * w2_row[j];
                        }
                    }
                    for j in 0..h {
                        let da = dh[j] * (1.0 - hidden[j] * hidden[j]);
                        grad[l.b1 + j] += da;
                        for (g, xm) in grad[l.w1 + j * d..l.w1 + (j + 1) * d].iter_mut().zip(x) {
                            *g += da * xm;
                        }
                    }
                }
            }
        }
        total * scale
    }
}

#[derive(Debug, Clone, Copy)]
struct MlpLayout {
    d: usize,
    h: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

impl MlpLayout {
    fn new(d: usize, h: usize, c: usize) -> Self {
        let w1 = 0;
        let b1 = w1 + h * d;
        let w2 = b1 + h;
        let b2 = w2 + c * h;
        Self {
            d,
            h,
            w1,
            b1,
            w2,
            b2,
        }
    }

    fn hidden(&self, flat: &[f64], x: &[f64], out: &mut [f64]) {
        affine(
            &flat[self.w1..self.w1 + self.h * self.d],
            &flat[self.b1..self.b1 + self.h],
            x,
            out,
        );
        out.iter_mut().for_each(|v| *v = v.tanh());
    }
}

/// `out = W x + b` with `W` row-major `(out.len(), x.len())`.
fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (k, o) in out.iter_mut().enumerate() {
        *o = b[k]
            + w[k * d..(k + 1) * d]
                .iter()
                .zip(x)
                .map(|(a, b)| a * b)
                .sum::<f64>();
    }
}

/// Returns `-log softmax(z)[y]` and overwrites `z` with `softmax(z) - onehot(y)`.
fn softmax_xent(z: &mut [f64], y: usize) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let target = z[y] - max;
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let loss = sum.ln() - target;
    for v in z.iter_mut() {
        *v /= sum;
    }
    z[y] -= 1.0;
    loss
}
