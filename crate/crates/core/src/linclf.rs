//! One-hidden-layer softmax classifier with hand-derived gradients, plain
//! SGD, and EMA teacher updates. Used both as the detector head (C = K
//! outputs) and as the abstaining OOD classifier (C = K+1 outputs, last
//! class absorbing background).

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{stream, stream_rng};

/// Parameters of `logits = W2 · relu(W1 · x + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl ClassifierParams {
    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn num_outputs(&self) -> usize {
        self.w2.rows()
    }

    pub fn zeros(d: usize, h: usize, c: usize) -> Self {
        ClassifierParams {
            w1: Matrix::zeros(h, d),
            b1: vec![0.0; h],
            w2: Matrix::zeros(c, h),
            b2: vec![0.0; c],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.hidden_dim(), self.num_outputs())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.input_dim() == other.input_dim()
            && self.hidden_dim() == other.hidden_dim()
            && self.num_outputs() == other.num_outputs()
    }

    /// self *= factor, entry by entry.
    pub fn scale(&mut self, factor: f64) {
        for a in self.w1.data_mut() {
            *a *= factor;
        }
        for a in self.b1.iter_mut() {
            *a *= factor;
        }
        for a in self.w2.data_mut() {
            *a *= factor;
        }
        for a in self.b2.iter_mut() {
            *a *= factor;
        }
    }

    /// self += factor · other, entry by entry.
    pub fn add_scaled(&mut self, other: &Self, factor: f64) {
        assert!(self.same_shape(other), "add_scaled shape mismatch");
        for (a, b) in self.w1.data_mut().iter_mut().zip(other.w1.data()) {
            *a += factor * b;
        }
        for (a, b) in self.b1.iter_mut().zip(&other.b1) {
            *a += factor * b;
        }
        for (a, b) in self.w2.data_mut().iter_mut().zip(other.w2.data()) {
            *a += factor * b;
        }
        for (a, b) in self.b2.iter_mut().zip(&other.b2) {
            *a += factor * b;
        }
    }

    /// Flat view of all parameters, in a fixed order (w1, b1, w2, b2).
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(
            self.w1.data().len() + self.b1.len() + self.w2.data().len() + self.b2.len(),
        );
        v.extend_from_slice(self.w1.data());
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(self.w2.data());
        v.extend_from_slice(&self.b2);
        v
    }

    /// Writes a flat vector (same order as `flatten`) back into the shape of
    /// `self`.
    pub fn assign_from_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter();
        for a in self.w1.data_mut() {
            *a = *it.next().expect("flat too short");
        }
        for a in self.b1.iter_mut() {
            *a = *it.next().expect("flat too short");
        }
        for a in self.w2.data_mut() {
            *a = *it.next().expect("flat too short");
        }
        for a in self.b2.iter_mut() {
            *a = *it.next().expect("flat too short");
        }
        assert!(it.next().is_none(), "flat too long");
    }
}

/// Teacher/student parameter pair with EMA rate `alpha`.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherStudent {
    pub teacher: ClassifierParams,
    pub student: ClassifierParams,
    pub alpha: f64,
}

/// Weights i.i.d. uniform in [-scale, +scale], biases zero.
pub fn init_params(d: usize, h: usize, c: usize, seed: u64, scale: f64) -> Result<ClassifierParams> {
    if d < 1 || h < 1 || c < 1 {
        return Err(Error::InvalidConfig {
            field: "dimensions",
            message: format!("d={d}, h={h}, c={c} must all be >= 1"),
        });
    }
    if !(scale > 0.0) {
        return Err(Error::InvalidConfig {
            field: "scale",
            message: format!("scale must be > 0, got {scale}"),
        });
    }
    let mut rng = stream_rng(seed, stream::PARAM_INIT);
    Ok(init_params_from_rng(d, h, c, scale, &mut rng))
}

pub(crate) fn init_params_from_rng<R: Rng>(
    d: usize,
    h: usize,
    c: usize,
    scale: f64,
    rng: &mut R,
) -> ClassifierParams {
    let mut params = ClassifierParams::zeros(d, h, c);
    for w in params.w1.data_mut() {
        *w = rng.gen_range(-scale..=scale);
    }
    for w in params.w2.data_mut() {
        *w = rng.gen_range(-scale..=scale);
    }
    params
}

/// Logits for one input.
pub fn forward(params: &ClassifierParams, x: &[f64]) -> Result<Vec<f64>> {
    Ok(forward_hidden(params, x)?.0)
}

/// Logits plus the post-ReLU hidden activation (the intermediate feature
/// vector consumed by distance-based scores).
pub fn forward_hidden(params: &ClassifierParams, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.len() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "forward input",
            expected: params.input_dim(),
            actual: x.len(),
        });
    }
    let mut hidden = params.w1.matvec(x);
    for (h, b) in hidden.iter_mut().zip(&params.b1) {
        *h = (*h + b).max(0.0);
    }
    let mut logits = params.w2.matvec(&hidden);
    for (l, b) in logits.iter_mut().zip(&params.b2) {
        *l += b;
    }
    Ok((logits, hidden))
}

/// Temperature softmax, computed stably by subtracting the max logit.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::NonPositiveTemperature(temperature));
    }
    if logits.is_empty() {
        return Err(Error::EmptyInput("softmax logits"));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits
        .iter()
        .map(|l| ((l - max) / temperature).exp())
        .collect();
    let sum: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= sum;
    }
    Ok(probs)
}

/// log Σ exp(l_i), stable.
pub(crate) fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    max + sum.ln()
}

/// Weighted-mean cross-entropy over a batch and its exact gradients.
///
/// `batch` items are (features, target class, weight); the loss is
/// Σ wᵢ · (−log p(targetᵢ)) / Σ wᵢ.
pub fn ce_loss_and_grad(
    params: &ClassifierParams,
    batch: &[(&[f64], usize, f64)],
) -> Result<(f64, ClassifierParams)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("training batch"));
    }
    let c = params.num_outputs();
    let mut weight_total = 0.0;
    for &(_, target, weight) in batch {
        if target >= c {
            return Err(Error::TargetOutOfRange {
                target,
                num_classes: c,
            });
        }
        if weight < 0.0 || !weight.is_finite() {
            return Err(Error::InvalidConfig {
                field: "weight",
                message: format!("sample weight must be finite and >= 0, got {weight}"),
            });
        }
        weight_total += weight;
    }
    if weight_total == 0.0 {
        return Err(Error::EmptyInput("batch with all-zero weights"));
    }

    let mut loss = 0.0;
    let mut grads = params.zeros_like();
    for &(x, target, weight) in batch {
        let (logits, hidden) = forward_hidden(params, x)?;
        let lse = log_sum_exp(&logits);
        loss += weight * (lse - logits[target]);

        // d loss / d logits = (softmax − onehot) · w / Σw
        let w = weight / weight_total;
        let mut dlogits: Vec<f64> = logits.iter().map(|l| (l - lse).exp() * w).collect();
        dlogits[target] -= w;

        grads.w2.add_outer(&dlogits, &hidden, 1.0);
        for (g, d) in grads.b2.iter_mut().zip(&dlogits) {
            *g += d;
        }
        let mut dhidden = params.w2.transpose_matvec(&dlogits);
        for (dh, h) in dhidden.iter_mut().zip(&hidden) {
            if *h <= 0.0 {
                *dh = 0.0;
            }
        }
        grads.w1.add_outer(&dhidden, x, 1.0);
        for (g, d) in grads.b1.iter_mut().zip(&dhidden) {
            *g += d;
        }
    }
    Ok((loss / weight_total, grads))
}

/// params' = params − eta · grads.
pub fn sgd_step(params: &ClassifierParams, grads: &ClassifierParams, eta: f64) -> ClassifierParams {
    assert!(params.same_shape(grads), "sgd_step shape mismatch");
    assert!(eta > 0.0, "learning rate must be > 0");
    let mut next = params.clone();
    next.add_scaled(grads, -eta);
    next
}

/// θ_t ← α θ_t + (1−α) θ_s, entrywise; the student is untouched.
pub fn ema_update(ts: &mut TeacherStudent) {
    assert!(
        ts.teacher.same_shape(&ts.student),
        "teacher/student shape mismatch"
    );
    assert!((0.0..=1.0).contains(&ts.alpha), "alpha must be in [0, 1]");
    let alpha = ts.alpha;
    let blend = |t: &mut [f64], s: &[f64]| {
        for (a, b) in t.iter_mut().zip(s) {
            *a = alpha * *a + (1.0 - alpha) * b;
        }
    };
    blend(ts.teacher.w1.data_mut(), ts.student.w1.data());
    blend(&mut ts.teacher.b1, &ts.student.b1);
    blend(ts.teacher.w2.data_mut(), ts.student.w2.data());
    blend(&mut ts.teacher.b2, &ts.student.b2);
}

/// Detector prediction: argmax over the first `k` logits (ties resolve to the
/// lowest index) and the confidence renormalized over those `k` outputs. For
/// a K+1 network this excludes the abstention logit from both.
pub fn predict(params: &ClassifierParams, x: &[f64], k: usize) -> Result<(usize, f64)> {
    let logits = forward(params, x)?;
    predict_from_logits(&logits, k)
}

pub fn predict_from_logits(logits: &[f64], k: usize) -> Result<(usize, f64)> {
    if k > logits.len() || k == 0 {
        return Err(Error::DimensionMismatch {
            context: "predict foreground classes",
            expected: k,
            actual: logits.len(),
        });
    }
    let fg = &logits[..k];
    let mut best = 0;
    for (i, l) in fg.iter().enumerate() {
        if *l > fg[best] {
            best = i;
        }
    }
    let probs = softmax(fg, 1.0)?;
    Ok((best, probs[best]))
}
