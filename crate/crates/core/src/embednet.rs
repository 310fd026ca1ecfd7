//! Feed-forward embedding network with hand-written backpropagation.
//!
//! The network is a stack of fully connected layers with ReLU between them
//! (the last layer is linear). Next to the layers, [`ModelParams`] carries
//! the classifier of the angular-margin head (one unit-norm column per
//! class) and the score parameters `lambda`, `omega`, `b`.
//!
//! Every loss sees length-normalized embeddings. [`backward`] chains the
//! gradients of the [`crate::losses`] functions through the normalization
//! and the layers; [`loss_value`] evaluates the same objective through the
//! value-only loss functions and is what [`grad_check`] differentiates
//! numerically. The optimizer works on `ln(lambda)`; the gradient field
//! for it is [`Grads::log_lambda`].
//!
//! ReLU uses gradient 0 at exactly 0.

use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{self, Matrix, MIN_NORM};
use crate::losses::{
    aam_from_cosines, aam_softmax_loss, contrastive_center_loss, contrastive_center_loss_grad,
    contrastive_loss, contrastive_loss_grad, mean_embedding, AamConfig, LossBreakdown,
    LossWeights, ScoreFn, ScoreKind,
};
use crate::rng::seeded;
use crate::{Error, Result};

/// One fully connected layer, `z = W a + b` with `W` of shape out x in.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows
    }
}

/// Layer sizes of the embedding network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub d_in: usize,
    pub hidden: Vec<usize>,
    pub d_emb: usize,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_emb == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidConfig(
                "network layer sizes must be positive".into(),
            ));
        }
        Ok(())
    }

    fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.d_in];
        d.extend(&self.hidden);
        d.push(self.d_emb);
        d
    }
}

/// Initial values of the score parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreInit {
    pub lambda: f64,
    pub omega: f64,
    pub bias: f64,
}

impl Default for ScoreInit {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            omega: 10.0,
            bias: -5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<Dense>,
    /// D_emb x C; column `c` is the unit-norm weight vector of class `c`.
    pub classifier: Matrix,
    pub lambda: f64,
    pub omega: f64,
    pub bias: f64,
}

/// Gradients laid out like [`ModelParams`], with `ln(lambda)` in place of
/// `lambda`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub layers: Vec<Dense>,
    pub classifier: Matrix,
    pub log_lambda: f64,
    pub omega: f64,
    pub bias: f64,
}

/// A network output, flagged once it has been length-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub normalized: bool,
}

impl ModelParams {
    /// Seeded initialization: weights `U(-sqrt(1/fan_in), sqrt(1/fan_in))`,
    /// zero biases, Gaussian classifier columns scaled to unit norm.
    pub fn init<R: Rng>(
        arch: &Architecture,
        num_classes: usize,
        score: ScoreInit,
        rng: &mut R,
    ) -> Result<Self> {
        arch.validate()?;
        if !(score.lambda > 0.0 && score.lambda.is_finite())
            || !score.omega.is_finite()
            || !score.bias.is_finite()
        {
            return Err(Error::InvalidConfig(format!(
                "invalid score parameter init {score:?}"
            )));
        }
        let dims = arch.dims();
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let bound = (1.0 / w[0] as f64).sqrt();
            let mut layer = Dense::zeros(w[0], w[1]);
            for v in layer.weight.data.iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
            layers.push(layer);
        }
        let mut classifier = Matrix::zeros(arch.d_emb, num_classes);
        for c in 0..num_classes {
            let col = loop {
                let v: Vec<f64> = (0..arch.d_emb)
                    .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect();
                if let Some(u) = linalg::normalized(&v) {
                    break u;
                }
            };
            for (r, x) in col.into_iter().enumerate() {
                classifier.set(r, c, x);
            }
        }
        Ok(Self {
            layers,
            classifier,
            lambda: score.lambda,
            omega: score.omega,
            bias: score.bias,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Dense::input_dim)
    }

    pub fn embedding_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::output_dim)
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.cols
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            d_in: self.input_dim(),
            hidden: self.layers[..self.layers.len().saturating_sub(1)]
                .iter()
                .map(Dense::output_dim)
                .collect(),
            d_emb: self.embedding_dim(),
        }
    }

    /// Classifier columns as vectors.
    pub fn class_vectors(&self) -> Vec<Vec<f64>> {
        (0..self.classifier.cols)
            .map(|c| self.classifier.column(c))
            .collect()
    }

    pub fn score_fn(&self, kind: ScoreKind) -> ScoreFn {
        match kind {
            ScoreKind::Euclidean => ScoreFn::Euclidean {
                lambda: self.lambda,
            },
            ScoreKind::Cosine => ScoreFn::Cosine {
                omega: self.omega,
                bias: self.bias,
            },
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data.len() + l.bias.len())
            .sum::<usize>()
            + self.classifier.data.len()
            + 3
    }

    /// Flat parameter vector: per layer weights then bias, classifier,
    /// `ln(lambda)`, `omega`, `b`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(&l.weight.data);
            out.extend(&l.bias);
        }
        out.extend(&self.classifier.data);
        out.extend([self.lambda.ln(), self.omega, self.bias]);
        out
    }

    /// Inverse of [`ModelParams::to_flat`]. `lambda` is only recomputed
    /// when its log coordinate changed, so an unchanged vector restores the
    /// parameters bit for bit.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                expected: self.num_params(),
                found: flat.len(),
            });
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            l.weight.data.iter_mut().for_each(|v| *v = it.next().unwrap());
            l.bias.iter_mut().for_each(|v| *v = it.next().unwrap());
        }
        self.classifier
            .data
            .iter_mut()
            .for_each(|v| *v = it.next().unwrap());
        let log_lambda = it.next().unwrap();
        if log_lambda != self.lambda.ln() {
            self.lambda = log_lambda.exp();
        }
        self.omega = it.next().unwrap();
        self.bias = it.next().unwrap();
        Ok(())
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.to_flat().iter().all(|v| v.is_finite()) && self.lambda > 0.0 {
            Ok(())
        } else {
            Err(Error::NonFinite("model parameters".into()))
        }
    }
}

impl Grads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| Dense::zeros(l.input_dim(), l.output_dim()))
                .collect(),
            classifier: Matrix::zeros(params.classifier.rows, params.classifier.cols),
            log_lambda: 0.0,
            omega: 0.0,
            bias: 0.0,
        }
    }

    /// Same layout as [`ModelParams::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(&l.weight.data);
            out.extend(&l.bias);
        }
        out.extend(&self.classifier.data);
        out.extend([self.log_lambda, self.omega, self.bias]);
        out
    }
}

/// Layer inputs and pre-activations of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `inputs[l]` is the input of layer `l`.
    pub inputs: Vec<Vec<f64>>,
    /// `pre[l]` is `W_l a + b_l` before the activation.
    pub pre: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.pre.last().map_or(&[], Vec::as_slice)
    }
}

fn relu(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

pub fn forward_traced(params: &ModelParams, input: &[f64]) -> Result<ForwardTrace> {
    if input.len() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.input_dim(),
            found: input.len(),
        });
    }
    let n = params.layers.len();
    let mut inputs = Vec::with_capacity(n);
    let mut pre = Vec::with_capacity(n);
    let mut a = input.to_vec();
    for (l, layer) in params.layers.iter().enumerate() {
        let mut z = layer.weight.mul_vec(&a);
        for (zi, bi) in z.iter_mut().zip(&layer.bias) {
            *zi += bi;
        }
        inputs.push(a);
        a = z.clone();
        if l + 1 < n {
            relu(&mut a);
        }
        pre.push(z);
    }
    Ok(ForwardTrace { inputs, pre })
}

/// Raw (not normalized) network output.
pub fn forward(params: &ModelParams, input: &[f64]) -> Result<Embedding> {
    let mut trace = forward_traced(params, input)?;
    Ok(Embedding {
        vector: trace.pre.pop().unwrap_or_default(),
        normalized: false,
    })
}

pub fn length_normalize(e: &Embedding) -> Result<Embedding> {
    let n = linalg::norm(&e.vector);
    if !(n > MIN_NORM) || !n.is_finite() {
        return Err(Error::Degenerate(format!(
            "cannot length-normalize an embedding of norm {n}"
        )));
    }
    Ok(Embedding {
        vector: e.vector.iter().map(|x| x / n).collect(),
        normalized: true,
    })
}

/// Length-normalized embeddings of every input.
pub fn embed_all(params: &ModelParams, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    inputs
        .iter()
        .map(|x| Ok(length_normalize(&forward(params, x)?)?.vector))
        .collect()
}

/// Accumulates the gradient of `dout . output` into `grads`.
fn backprop(params: &ModelParams, trace: &ForwardTrace, dout: &[f64], grads: &mut Grads) {
    let mut delta = dout.to_vec();
    for l in (0..params.layers.len()).rev() {
        let g = &mut grads.layers[l];
        let a = &trace.inputs[l];
        let cols = g.weight.cols;
        for (r, d) in delta.iter().enumerate() {
            if *d == 0.0 {
                continue;
            }
            let row = &mut g.weight.data[r * cols..(r + 1) * cols];
            for (w, x) in row.iter_mut().zip(a) {
                *w += d * x;
            }
            g.bias[r] += d;
        }
        if l > 0 {
            let mut next = params.layers[l].weight.tmul_vec(&delta);
            for (v, z) in next.iter_mut().zip(&trace.pre[l - 1]) {
                if *z <= 0.0 {
                    *v = 0.0;
                }
            }
            delta = next;
        }
    }
}

/// `u / |u|` and a closure-free helper for its vector-Jacobian product.
fn normalize_checked(u: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = linalg::norm(u);
    if !(n > MIN_NORM) || !n.is_finite() {
        return Err(Error::Degenerate(format!(
            "embedding norm {n} is too small to normalize"
        )));
    }
    Ok((u.iter().map(|x| x / n).collect(), n))
}

/// Gradient with respect to `u` given the gradient `g` with respect to
/// `e = u / |u|`.
fn normalize_vjp(e: &[f64], n: f64, g: &[f64]) -> Vec<f64> {
    let eg = linalg::dot(e, g);
    e.iter().zip(g).map(|(ei, gi)| (gi - ei * eg) / n).collect()
}

/// Which objective a batch is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSelector {
    /// AAM-softmax on the source batch.
    Classification,
    /// Contrastive loss on the target view pairs.
    Contrastive,
    /// Contrastive center loss on the target view pairs.
    ContrastiveCenter,
    /// `L_sc + alpha * L_ct`.
    Pretrain,
    /// `L_sc + alpha * L_ct + beta * L_cc`.
    Joint,
}

/// Objective together with its hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub selector: LossSelector,
    pub weights: LossWeights,
    pub aam: AamConfig,
    pub score: ScoreKind,
}

impl LossSpec {
    /// Weights of the (sc, ct, cc) terms; `None` for terms that are off.
    /// Composite terms with a zero weight are dropped entirely.
    fn term_weights(&self) -> (Option<f64>, Option<f64>, Option<f64>) {
        let nz = |w: f64| (w != 0.0).then_some(w);
        match self.selector {
            LossSelector::Classification => (Some(1.0), None, None),
            LossSelector::Contrastive => (None, Some(1.0), None),
            LossSelector::ContrastiveCenter => (None, None, Some(1.0)),
            LossSelector::Pretrain => (Some(1.0), nz(self.weights.alpha), None),
            LossSelector::Joint => (
                Some(1.0),
                nz(self.weights.alpha),
                nz(self.weights.beta),
            ),
        }
    }
}

/// Labeled inputs for the classification term.
#[derive(Debug, Clone, Copy)]
pub struct SourceBatch<'a> {
    pub inputs: &'a [Vec<f64>],
    pub labels: &'a [usize],
}

/// Two augmented views per target utterance.
#[derive(Debug, Clone, Copy)]
pub struct TargetBatch<'a> {
    pub view_a: &'a [Vec<f64>],
    pub view_b: &'a [Vec<f64>],
}

/// Cluster assignments aligned with the target pairs; centers are
/// constants.
#[derive(Debug, Clone, Copy)]
pub struct CenterBatch<'a> {
    pub assignments: &'a [usize],
    pub centers: &'a [Vec<f64>],
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Batch<'a> {
    pub source: Option<SourceBatch<'a>>,
    pub target: Option<TargetBatch<'a>>,
    pub centers: Option<CenterBatch<'a>>,
}

impl<'a> Batch<'a> {
    fn source(&self) -> Result<SourceBatch<'a>> {
        let s = self
            .source
            .ok_or_else(|| Error::Empty("objective needs a source batch".into()))?;
        if s.inputs.is_empty() {
            return Err(Error::Empty("source batch is empty".into()));
        }
        if s.inputs.len() != s.labels.len() {
            return Err(Error::DimensionMismatch {
                expected: s.inputs.len(),
                found: s.labels.len(),
            });
        }
        Ok(s)
    }

    fn target(&self) -> Result<TargetBatch<'a>> {
        let t = self
            .target
            .ok_or_else(|| Error::Empty("objective needs a target batch".into()))?;
        if t.view_a.is_empty() {
            return Err(Error::Empty("target batch is empty".into()));
        }
        if t.view_a.len() != t.view_b.len() {
            return Err(Error::DimensionMismatch {
                expected: t.view_a.len(),
                found: t.view_b.len(),
            });
        }
        Ok(t)
    }

    fn centers(&self, n: usize) -> Result<CenterBatch<'a>> {
        let c = self
            .centers
            .ok_or_else(|| Error::Empty("objective needs cluster centers".into()))?;
        if c.assignments.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: c.assignments.len(),
            });
        }
        Ok(c)
    }
}

fn normalized_columns(params: &ModelParams) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if params.classifier.cols == 0 {
        return Err(Error::Empty("classifier has no classes".into()));
    }
    let mut cols = Vec::with_capacity(params.classifier.cols);
    let mut norms = Vec::with_capacity(params.classifier.cols);
    for v in params.class_vectors() {
        let (u, n) = normalize_checked(&v)?;
        cols.push(u);
        norms.push(n);
    }
    Ok((cols, norms))
}

fn embed_normalized(params: &ModelParams, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    inputs
        .iter()
        .map(|x| Ok(normalize_checked(forward(params, x)?.vector.as_slice())?.0))
        .collect()
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Objective value computed with the value-only loss functions.
pub fn loss_value(params: &ModelParams, batch: &Batch, spec: &LossSpec) -> Result<LossBreakdown> {
    let (w_sc, w_ct, w_cc) = spec.term_weights();
    let mut out = LossBreakdown::default();
    let mut total = 0.0;
    if w_sc.is_some() {
        let s = batch.source()?;
        let (cols, _) = normalized_columns(params)?;
        let emb = embed_normalized(params, s.inputs)?;
        let v = aam_softmax_loss(&emb, &cols, s.labels, &spec.aam)?;
        out.sc = Some(v);
        total += v;
    }
    let mut views = None;
    if w_ct.is_some() || w_cc.is_some() {
        let t = batch.target()?;
        views = Some((
            embed_normalized(params, t.view_a)?,
            embed_normalized(params, t.view_b)?,
        ));
    }
    if let (Some(w), Some((a, b))) = (w_ct, &views) {
        let v = contrastive_loss(a, b, &params.score_fn(spec.score))?;
        out.ct = Some(v);
        total += w * v;
    }
    if let (Some(w), Some((a, b))) = (w_cc, &views) {
        let c = batch.centers(a.len())?;
        let means = a
            .iter()
            .zip(b)
            .map(|(x, y)| mean_embedding(x, y))
            .collect::<Result<Vec<_>>>()?;
        let v = contrastive_center_loss(&means, c.assignments, c.centers, params.omega, params.bias)?;
        out.cc = Some(v);
        total += w * v;
    }
    out.total = finite(total, "loss")?;
    Ok(out)
}

struct ViewPass {
    traces: Vec<ForwardTrace>,
    unit: Vec<Vec<f64>>,
    norms: Vec<f64>,
}

fn view_pass(params: &ModelParams, inputs: &[Vec<f64>]) -> Result<ViewPass> {
    let mut pass = ViewPass {
        traces: Vec::with_capacity(inputs.len()),
        unit: Vec::with_capacity(inputs.len()),
        norms: Vec::with_capacity(inputs.len()),
    };
    for x in inputs {
        let t = forward_traced(params, x)?;
        let (u, n) = normalize_checked(t.output())?;
        pass.traces.push(t);
        pass.unit.push(u);
        pass.norms.push(n);
    }
    Ok(pass)
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Loss value and gradients for every parameter the objective touches.
/// Cluster centers get no gradient.
pub fn backward(params: &ModelParams, batch: &Batch, spec: &LossSpec) -> Result<(LossBreakdown, Grads)> {
    let (w_sc, w_ct, w_cc) = spec.term_weights();
    let mut grads = Grads::zeros_like(params);
    let mut out = LossBreakdown::default();
    let mut total = 0.0;

    if let Some(w) = w_sc {
        let s = batch.source()?;
        let (cols, col_norms) = normalized_columns(params)?;
        let pass = view_pass(params, s.inputs)?;
        let cosines: Vec<Vec<f64>> = pass
            .unit
            .iter()
            .map(|e| cols.iter().map(|c| linalg::dot(e, c)).collect())
            .collect();
        let (v, dcos) = aam_from_cosines(&cosines, s.labels, &spec.aam)?;
        out.sc = Some(v);
        total += w * v;
        let d_emb = params.embedding_dim();
        let mut dcols = vec![vec![0.0; d_emb]; cols.len()];
        for (i, row) in dcos.iter().enumerate() {
            let mut de = vec![0.0; d_emb];
            for (c, &g) in row.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                axpy(&mut de, w * g, &cols[c]);
                axpy(&mut dcols[c], w * g, &pass.unit[i]);
            }
            let du = normalize_vjp(&pass.unit[i], pass.norms[i], &de);
            backprop(params, &pass.traces[i], &du, &mut grads);
        }
        for (c, g) in dcols.iter().enumerate() {
            let dv = normalize_vjp(&cols[c], col_norms[c], g);
            for (r, x) in dv.into_iter().enumerate() {
                grads.classifier.data[r * grads.classifier.cols + c] += x;
            }
        }
    }

    if w_ct.is_some() || w_cc.is_some() {
        let t = batch.target()?;
        let pa = view_pass(params, t.view_a)?;
        let pb = view_pass(params, t.view_b)?;
        let n = pa.unit.len();
        let d_emb = params.embedding_dim();
        let mut ga = vec![vec![0.0; d_emb]; n];
        let mut gb = vec![vec![0.0; d_emb]; n];

        if let Some(w) = w_ct {
            let o = contrastive_loss_grad(&pa.unit, &pb.unit, &params.score_fn(spec.score))?;
            out.ct = Some(o.value);
            total += w * o.value;
            for i in 0..n {
                axpy(&mut ga[i], w, &o.d_view_a[i]);
                axpy(&mut gb[i], w, &o.d_view_b[i]);
            }
            grads.log_lambda += w * o.params.log_lambda;
            grads.omega += w * o.params.omega;
            grads.bias += w * o.params.bias;
        }

        if let Some(w) = w_cc {
            let c = batch.centers(n)?;
            let mut means = Vec::with_capacity(n);
            let mut mean_norms = Vec::with_capacity(n);
            for (a, b) in pa.unit.iter().zip(&pb.unit) {
                let m: Vec<f64> = a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect();
                let (e, nm) = normalize_checked(&m)?;
                means.push(e);
                mean_norms.push(nm);
            }
            let o = contrastive_center_loss_grad(&means, c.assignments, c.centers, params.omega, params.bias)?;
            out.cc = Some(o.value);
            total += w * o.value;
            for i in 0..n {
                let dm = normalize_vjp(&means[i], mean_norms[i], &o.d_embeddings[i]);
                axpy(&mut ga[i], 0.5 * w, &dm);
                axpy(&mut gb[i], 0.5 * w, &dm);
            }
            grads.omega += w * o.d_omega;
            grads.bias += w * o.d_bias;
        }

        for (pass, g) in [(&pa, &ga), (&pb, &gb)] {
            for i in 0..n {
                let du = normalize_vjp(&pass.unit[i], pass.norms[i], &g[i]);
                backprop(params, &pass.traces[i], &du, &mut grads);
            }
        }
    }

    out.total = finite(total, "loss")?;
    if !grads.to_flat().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    Ok((out, grads))
}

/// Adam state over the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub epoch: u32,
    pub base_lr: f64,
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(num_params: usize, base_lr: f64, decay: f64) -> Self {
        Self {
            step: 0,
            epoch: 0,
            base_lr,
            decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn for_params(params: &ModelParams, base_lr: f64, decay: f64) -> Self {
        Self::new(params.num_params(), base_lr, decay)
    }

    /// `base_lr * decay^epoch`.
    pub fn learning_rate(&self) -> f64 {
        self.base_lr * self.decay.powi(self.epoch as i32)
    }
}

/// One Adam step. Classifier columns touched by the step are re-normalized
/// to unit norm.
pub fn adam_step(params: &mut ModelParams, grads: &Grads, opt: &mut OptimizerState) -> Result<()> {
    let g = grads.to_flat();
    let n = params.num_params();
    if g.len() != n || opt.m.len() != n || opt.v.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: if g.len() != n { g.len() } else { opt.m.len() },
        });
    }
    if !g.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("gradient passed to the optimizer".into()));
    }
    opt.step += 1;
    let t = opt.step as i32;
    let lr = opt.learning_rate();
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    let mut flat = params.to_flat();
    for i in 0..n {
        opt.m[i] = opt.beta1 * opt.m[i] + (1.0 - opt.beta1) * g[i];
        opt.v[i] = opt.beta2 * opt.v[i] + (1.0 - opt.beta2) * g[i] * g[i];
        let m_hat = opt.m[i] / bc1;
        let v_hat = opt.v[i] / bc2;
        flat[i] -= lr * m_hat / (v_hat.sqrt() + opt.eps);
    }
    let before = params.classifier.clone();
    params.set_flat(&flat)?;
    let (rows, cols) = (params.classifier.rows, params.classifier.cols);
    for c in 0..cols {
        if (0..rows).all(|r| params.classifier.get(r, c) == before.get(r, c)) {
            continue;
        }
        let (u, _) = normalize_checked(&params.classifier.column(c))?;
        for (r, x) in u.into_iter().enumerate() {
            params.classifier.set(r, c, x);
        }
    }
    params.check_finite()
}

/// Below this magnitude (times `max(1, |loss|)`) the relative error is
/// measured against the floor instead of the gradient itself. Scaling with
/// the loss tracks the rounding noise of the difference quotient.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Parameter count above which [`grad_check`] samples coordinates.
pub const GRAD_CHECK_MAX_COORDS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    /// Analytic and central-difference derivative at `worst_index`.
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / scale
}

/// Central-difference check of `analytic` against `eval` over the flat
/// parameter vector. Uses the fourth-order central stencil
/// `(8[f(x+h) - f(x-h)] - [f(x+2h) - f(x-2h)]) / 12h`, so truncation error
/// stays far below the tolerance at `h = 1e-4` on sharply curved losses.
pub fn grad_check_with<F>(
    params: &ModelParams,
    eval: F,
    analytic: &[f64],
    epsilon: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&ModelParams) -> Result<f64>,
{
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidConfig(format!(
            "grad-check epsilon must lie in [1e-6, 1e-3], got {epsilon}"
        )));
    }
    let base = params.to_flat();
    if analytic.len() != base.len() {
        return Err(Error::DimensionMismatch {
            expected: base.len(),
            found: analytic.len(),
        });
    }
    let coords: Vec<usize> = if base.len() > GRAD_CHECK_MAX_COORDS {
        let mut idx = sample(&mut seeded(seed), base.len(), GRAD_CHECK_MAX_COORDS).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..base.len()).collect()
    };
    let mut probe = params.clone();
    let mut flat = base.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: coords.len(),
    };
    let floor = GRAD_CHECK_FLOOR * eval(params)?.abs().max(1.0);
    for &i in &coords {
        let mut at = |offset: f64| -> Result<f64> {
            flat[i] = base[i] + offset;
            probe.set_flat(&flat)?;
            eval(&probe)
        };
        let near = at(epsilon)? - at(-epsilon)?;
        let far = at(2.0 * epsilon)? - at(-2.0 * epsilon)?;
        flat[i] = base[i];
        let numeric = (8.0 * near - far) / (12.0 * epsilon);
        let err = relative_error(analytic[i], numeric, floor);
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
    }
    probe.set_flat(&base)?;
    Ok(report)
}

/// Worst relative error between [`backward`] and central differences of
/// [`loss_value`].
pub fn grad_check(
    params: &ModelParams,
    batch: &Batch,
    spec: &LossSpec,
    epsilon: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, grads) = backward(params, batch, spec)?;
    grad_check_with(
        params,
        |p| loss_value(p, batch, spec).map(|b| b.total),
        &grads.to_flat(),
        epsilon,
        seed,
    )
}

/// Losses exercised by [`grad_check_suite`].
pub const GRAD_CHECK_LOSSES: [&str; 7] = [
    "contrastive_euclidean",
    "contrastive_cosine",
    "softmax",
    "aam_softmax",
    "contrastive_center",
    "pretrain_joint",
    "finetune_joint",
];

/// Pre-activations closer to zero than this are resampled so that finite
/// differences never straddle a ReLU kink.
const KINK_MARGIN: f64 = 1e-2;

/// Owned inputs of one randomized gradient-check instance.
#[derive(Debug, Clone)]
pub struct CheckInstance {
    pub params: ModelParams,
    pub source: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub view_a: Vec<Vec<f64>>,
    pub view_b: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
}

impl CheckInstance {
    pub fn batch(&self) -> Batch<'_> {
        Batch {
            source: Some(SourceBatch {
                inputs: &self.source,
                labels: &self.labels,
            }),
            target: Some(TargetBatch {
                view_a: &self.view_a,
                view_b: &self.view_b,
            }),
            centers: Some(CenterBatch {
                assignments: &self.assignments,
                centers: &self.centers,
            }),
        }
    }

    fn min_abs_hidden_preactivation(&self) -> f64 {
        let mut m = f64::INFINITY;
        for x in self.source.iter().chain(&self.view_a).chain(&self.view_b) {
            let t = forward_traced(&self.params, x).expect("instance dims agree");
            for z in &t.pre[..t.pre.len() - 1] {
                for v in z {
                    m = m.min(v.abs());
                }
            }
        }
        m
    }
}

/// Random small instance: D_in = 6, one hidden layer of 5, D_emb = 4,
/// three examples per batch, three classes, two centers.
pub fn random_check_instance(seed: u64) -> CheckInstance {
    let mut rng = seeded(seed);
    let gauss = |rng: &mut rand_chacha::ChaCha8Rng, n: usize, d: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect())
            .collect()
    };
    loop {
        let arch = Architecture {
            d_in: 6,
            hidden: vec![5],
            d_emb: 4,
        };
        let score = ScoreInit {
            lambda: rng.random_range(0.5..2.0),
            omega: rng.random_range(1.0..10.0),
            bias: rng.random_range(-5.0..5.0),
        };
        let mut params = ModelParams::init(&arch, 3, score, &mut rng).expect("valid architecture");
        for l in &mut params.layers {
            l.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.3..0.3));
        }
        let source = gauss(&mut rng, 3, 6);
        let labels = (0..3).map(|_| rng.random_range(0..3)).collect();
        let view_a = gauss(&mut rng, 3, 6);
        let noise = gauss(&mut rng, 3, 6);
        let view_b = view_a
            .iter()
            .zip(&noise)
            .map(|(a, n)| a.iter().zip(n).map(|(x, e)| x + 0.5 * e).collect())
            .collect();
        let assignments = (0..3).map(|_| rng.random_range(0..2)).collect();
        let centers = gauss(&mut rng, 2, 4)
            .iter()
            .map(|c| linalg::normalized(c).unwrap_or_else(|| vec![1.0, 0.0, 0.0, 0.0]))
            .collect();
        let inst = CheckInstance {
            params,
            source,
            labels,
            view_a,
            view_b,
            assignments,
            centers,
        };
        if inst.min_abs_hidden_preactivation() > KINK_MARGIN {
            return inst;
        }
    }
}

/// The objective a named entry of [`GRAD_CHECK_LOSSES`] stands for.
pub fn grad_check_spec(name: &str) -> Option<LossSpec> {
    let base = LossSpec {
        selector: LossSelector::Contrastive,
        weights: LossWeights { alpha: 1.0, beta: 1.0 },
        aam: AamConfig::default(),
        score: ScoreKind::Cosine,
    };
    Some(match name {
        "contrastive_euclidean" => LossSpec {
            score: ScoreKind::Euclidean,
            ..base
        },
        "contrastive_cosine" => base,
        "softmax" => LossSpec {
            selector: LossSelector::Classification,
            aam: AamConfig { margin: 0.0, scale: 1.0 },
            ..base
        },
        "aam_softmax" => LossSpec {
            selector: LossSelector::Classification,
            ..base
        },
        "contrastive_center" => LossSpec {
            selector: LossSelector::ContrastiveCenter,
            ..base
        },
        "pretrain_joint" => LossSpec {
            selector: LossSelector::Pretrain,
            ..base
        },
        "finetune_joint" => LossSpec {
            selector: LossSelector::Joint,
            ..base
        },
        _ => return None,
    })
}

/// Worst relative error per loss over `instances` random instances.
pub fn grad_check_suite(seed: u64, instances: usize, epsilon: f64) -> Result<Vec<(&'static str, f64)>> {
    let mut out = Vec::with_capacity(GRAD_CHECK_LOSSES.len());
    for (li, name) in GRAD_CHECK_LOSSES.iter().enumerate() {
        let spec = grad_check_spec(name).expect("listed loss");
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            let inst_seed = seed
                .wrapping_mul(1_000_003)
                .wrapping_add((li * 10_007 + i) as u64);
            let inst = random_check_instance(inst_seed);
            let r = grad_check(&inst.params, &inst.batch(), &spec, epsilon, inst_seed)?;
            worst = if r.max_rel_error.is_nan() { f64::NAN } else { worst.max(r.max_rel_error) };
        }
        out.push((*name, worst));
    }
    Ok(out)
}

/// Parameters plus optimizer state, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
}

const MAGIC: &[u8; 6] = b"CGUDA1";
const CKPT: &str = "checkpoint";

fn put_tensor(out: &mut Vec<u8>, rows: usize, cols: usize, data: &[f64]) {
    out.extend((rows as u32).to_le_bytes());
    out.extend((cols as u32).to_le_bytes());
    for v in data {
        out.extend(v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(CKPT, "truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if n > self.bytes.len() / 8 {
            return Err(Error::format(CKPT, "tensor larger than file"));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    fn tensor(&mut self) -> Result<Matrix> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let data = self.f64s(rows.checked_mul(cols).ok_or_else(|| Error::format(CKPT, "tensor too large"))?)?;
        Ok(Matrix { rows, cols, data })
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.params;
        let o = &self.optimizer;
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend((p.layers.len() as u32).to_le_bytes());
        for l in &p.layers {
            put_tensor(&mut out, l.weight.rows, l.weight.cols, &l.weight.data);
            put_tensor(&mut out, 1, l.bias.len(), &l.bias);
        }
        put_tensor(&mut out, p.classifier.rows, p.classifier.cols, &p.classifier.data);
        for v in [p.lambda, p.omega, p.bias] {
            out.extend(v.to_le_bytes());
        }
        out.extend(o.step.to_le_bytes());
        out.extend(o.epoch.to_le_bytes());
        for v in [o.base_lr, o.decay, o.beta1, o.beta2, o.eps] {
            out.extend(v.to_le_bytes());
        }
        out.extend((o.m.len() as u32).to_le_bytes());
        for v in o.m.iter().chain(&o.v) {
            out.extend(v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::format(CKPT, "bad magic"));
        }
        let n_layers = r.u32()? as usize;
        if n_layers == 0 {
            return Err(Error::format(CKPT, "no layers"));
        }
        let mut layers = Vec::new();
        for l in 0..n_layers {
            let weight = r.tensor()?;
            let bias = r.tensor()?;
            if bias.rows != 1 || bias.cols != weight.rows {
                return Err(Error::format(CKPT, format!("layer {l} bias shape mismatch")));
            }
            if let Some(prev) = layers.last().map(|d: &Dense| d.output_dim()) {
                if prev != weight.cols {
                    return Err(Error::format(CKPT, format!("layer {l} input size mismatch")));
                }
            }
            layers.push(Dense {
                weight,
                bias: bias.data,
            });
        }
        let classifier = r.tensor()?;
        if classifier.rows != layers.last().unwrap().output_dim() {
            return Err(Error::format(CKPT, "classifier shape mismatch"));
        }
        let params = ModelParams {
            layers,
            classifier,
            lambda: r.f64()?,
            omega: r.f64()?,
            bias: r.f64()?,
        };
        let step = r.u64()?;
        let epoch = r.u32()?;
        let [base_lr, decay, beta1, beta2, eps] =
            [r.f64()?, r.f64()?, r.f64()?, r.f64()?, r.f64()?];
        let len = r.u32()? as usize;
        if len != params.num_params() {
            return Err(Error::format(CKPT, "optimizer state size mismatch"));
        }
        let m = r.f64s(len)?;
        let v = r.f64s(len)?;
        if r.pos != bytes.len() {
            return Err(Error::format(CKPT, "trailing bytes"));
        }
        params
            .check_finite()
            .map_err(|_| Error::format(CKPT, "non-finite parameters"))?;
        Ok(Self {
            params,
            optimizer: OptimizerState {
                step,
                epoch,
                base_lr,
                decay,
                beta1,
                beta2,
                eps,
                m,
                v,
            },
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::pipeline::write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn arch(d_in: usize, hidden: &[usize], d_emb: usize) -> Architecture {
        Architecture {
            d_in,
            hidden: hidden.to_vec(),
            d_emb,
        }
    }

    fn randn(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = seeded(seed);
        (0..n)
            .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect()
    }

    fn small(seed: u64, classes: usize) -> ModelParams {
        ModelParams::init(&arch(6, &[8], 4), classes, ScoreInit::default(), &mut seeded(seed)).unwrap()
    }

    fn spec(selector: LossSelector, score: ScoreKind) -> LossSpec {
        LossSpec {
            selector,
            weights: LossWeights { alpha: 0.7, beta: 1.3 },
            aam: AamConfig::default(),
            score,
        }
    }

    #[test]
    fn zero_network_gives_zero_embedding() {
        let mut p = small(1, 2);
        for l in &mut p.layers {
            l.weight.data.iter_mut().for_each(|v| *v = 0.0);
            l.bias.iter_mut().for_each(|v| *v = 0.0);
        }
        let e = forward(&p, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(e.vector, vec![0.0; 4]);
        assert!(!e.normalized);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut p = ModelParams::init(&arch(3, &[], 3), 1, ScoreInit::default(), &mut seeded(0)).unwrap();
        p.layers[0].weight = Matrix::identity(3);
        let x = [0.5, -1.5, 2.0];
        assert_eq!(forward(&p, &x).unwrap().vector, x.to_vec());
        assert!(matches!(forward(&p, &[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn forward_matches_straight_line_chain() {
        let p = ModelParams::init(&arch(5, &[7, 6], 3), 2, ScoreInit::default(), &mut seeded(9)).unwrap();
        let x = &randn(1, 5, 3)[0];
        let mut a = x.clone();
        for (l, layer) in p.layers.iter().enumerate() {
            let mut z = vec![0.0; layer.output_dim()];
            for r in 0..layer.output_dim() {
                let mut s = layer.bias[r];
                for c in 0..layer.input_dim() {
                    s += layer.weight.data[r * layer.input_dim() + c] * a[c];
                }
                z[r] = s;
            }
            if l + 1 < p.layers.len() {
                z = z.into_iter().map(|v| v.max(0.0)).collect();
            }
            a = z;
        }
        let got = forward(&p, x).unwrap().vector;
        for (g, e) in got.iter().zip(&a) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn init_is_bounded_and_classifier_unit() {
        let p = ModelParams::init(&arch(40, &[64, 64], 16), 10, ScoreInit::default(), &mut seeded(4)).unwrap();
        for l in &p.layers {
            let b = (1.0 / l.input_dim() as f64).sqrt();
            assert!(l.weight.data.iter().all(|v| v.abs() <= b));
        }
        for c in p.class_vectors() {
            assert!((linalg::norm(&c) - 1.0).abs() < 1e-12);
        }
        assert_eq!(p.architecture(), arch(40, &[64, 64], 16));
    }

    #[test]
    fn length_normalize_cases() {
        let e = Embedding { vector: vec![3.0, 4.0], normalized: false };
        let u = length_normalize(&e).unwrap();
        assert_eq!(u.vector, vec![0.6, 0.8]);
        assert!(u.normalized);
        let again = length_normalize(&u).unwrap();
        for (a, b) in again.vector.iter().zip(&u.vector) {
            assert!((a - b).abs() < 1e-12);
        }
        let z = Embedding { vector: vec![0.0, 0.0], normalized: false };
        assert!(matches!(length_normalize(&z), Err(Error::Degenerate(_))));
    }

    #[test]
    fn flat_round_trip_is_exact() {
        let mut p = small(3, 3);
        p.lambda = 0.37;
        let flat = p.to_flat();
        let mut q = small(4, 3);
        q.lambda = 0.37;
        q.set_flat(&flat).unwrap();
        assert_eq!(p, q);
    }

    #[allow(clippy::type_complexity)]
    fn toy_batch(seed: u64, classes: usize) -> (Vec<Vec<f64>>, Vec<usize>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<usize>, Vec<Vec<f64>>) {
        let src = randn(3, 6, seed);
        let labels = (0..3).map(|i| i % classes).collect();
        let a = randn(3, 6, seed + 1);
        let b: Vec<Vec<f64>> = a
            .iter()
            .zip(randn(3, 6, seed + 2))
            .map(|(x, n)| x.iter().zip(n).map(|(u, v)| u + 0.3 * v).collect())
            .collect();
        let assign = vec![0, 1, 0];
        let centers = randn(2, 4, seed + 3)
            .into_iter()
            .map(|c| linalg::normalized(&c).unwrap())
            .collect();
        (src, labels, a, b, assign, centers)
    }

    #[test]
    fn backward_matches_finite_differences_for_every_selector() {
        for seed in 0..3 {
            let p = small(10 + seed, 3);
            let (src, labels, a, b, assign, centers) = toy_batch(20 + seed * 7, 3);
            let batch = Batch {
                source: Some(SourceBatch { inputs: &src, labels: &labels }),
                target: Some(TargetBatch { view_a: &a, view_b: &b }),
                centers: Some(CenterBatch { assignments: &assign, centers: &centers }),
            };
            for sel in [
                LossSelector::Classification,
                LossSelector::Contrastive,
                LossSelector::ContrastiveCenter,
                LossSelector::Pretrain,
                LossSelector::Joint,
            ] {
                for score in [ScoreKind::Euclidean, ScoreKind::Cosine] {
                    let s = spec(sel, score);
                    // These fixtures have short pre-normalization embeddings and
                    // therefore steep curvature, so a finer step is used here.
                    let r = grad_check(&p, &batch, &s, 1e-5, 0).unwrap();
                    assert!(r.max_rel_error < 1e-5, "{sel:?} {score:?}: {r:?}");
                    let (bd, _) = backward(&p, &batch, &s).unwrap();
                    let v = loss_value(&p, &batch, &s).unwrap();
                    assert!((bd.total - v.total).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn contrastive_with_one_pair_has_zero_gradient() {
        let p = small(2, 2);
        let a = randn(1, 6, 5);
        let b = randn(1, 6, 6);
        let batch = Batch {
            target: Some(TargetBatch { view_a: &a, view_b: &b }),
            ..Default::default()
        };
        for score in [ScoreKind::Euclidean, ScoreKind::Cosine] {
            let (bd, g) = backward(&p, &batch, &spec(LossSelector::Contrastive, score)).unwrap();
            assert_eq!(bd.total, 0.0);
            assert!(g.to_flat().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn zero_weight_terms_are_dropped() {
        let p = small(5, 3);
        let (src, labels, a, b, _, _) = toy_batch(1, 3);
        let batch = Batch {
            source: Some(SourceBatch { inputs: &src, labels: &labels }),
            target: Some(TargetBatch { view_a: &a, view_b: &b }),
            centers: None,
        };
        let mut s = spec(LossSelector::Pretrain, ScoreKind::Cosine);
        s.weights.alpha = 0.0;
        let (bd, g) = backward(&p, &batch, &s).unwrap();
        let (bd0, g0) = backward(&p, &batch, &spec(LossSelector::Classification, ScoreKind::Cosine)).unwrap();
        assert_eq!(bd.total, bd0.total);
        assert_eq!(bd.ct, None);
        assert_eq!(g, g0);
        let mut j = spec(LossSelector::Joint, ScoreKind::Cosine);
        j.weights.beta = 0.0;
        let (bj, gj) = backward(&p, &batch, &j).unwrap();
        let (bp, gp) = backward(&p, &batch, &spec(LossSelector::Pretrain, ScoreKind::Cosine)).unwrap();
        assert_eq!(bj.total, bp.total);
        assert_eq!(gj, gp);
    }

    #[test]
    fn missing_batch_parts_are_errors() {
        let p = small(5, 3);
        let empty = Batch::default();
        assert!(matches!(
            backward(&p, &empty, &spec(LossSelector::Classification, ScoreKind::Cosine)),
            Err(Error::Empty(_))
        ));
        let (_, _, a, b, _, _) = toy_batch(1, 3);
        let t = Batch {
            target: Some(TargetBatch { view_a: &a, view_b: &b }),
            ..Default::default()
        };
        assert!(matches!(
            backward(&p, &t, &spec(LossSelector::ContrastiveCenter, ScoreKind::Cosine)),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn zero_lr_and_zero_grad_steps_change_nothing() {
        let p0 = small(6, 3);
        let (src, labels, ..) = toy_batch(2, 3);
        let batch = Batch {
            source: Some(SourceBatch { inputs: &src, labels: &labels }),
            ..Default::default()
        };
        let (_, g) = backward(&p0, &batch, &spec(LossSelector::Classification, ScoreKind::Cosine)).unwrap();
        let mut p = p0.clone();
        let mut opt = OptimizerState::for_params(&p, 0.0, 0.95);
        adam_step(&mut p, &g, &mut opt).unwrap();
        assert_eq!(p, p0);
        assert_eq!(opt.step, 1);

        let mut q = p0.clone();
        let mut opt = OptimizerState::for_params(&q, 0.001, 0.95);
        let g = Grads::zeros_like(&q);
        adam_step(&mut q, &g, &mut opt).unwrap();
        assert_eq!(q, p0);
    }

    #[test]
    fn learning_rate_schedule() {
        let mut o = OptimizerState::new(1, 0.001, 0.95);
        assert_eq!(o.learning_rate(), 0.001);
        o.epoch = 1;
        assert!((o.learning_rate() - 0.00095).abs() < 1e-18);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // m = 0.1, v = 0.001; bias correction gives m_hat = v_hat = 1.
        let mut p = ModelParams::init(&arch(1, &[], 1), 0, ScoreInit::default(), &mut seeded(0)).unwrap();
        p.layers[0].weight.data[0] = 0.5;
        let mut g = Grads::zeros_like(&p);
        g.layers[0].weight.data[0] = 1.0;
        let mut opt = OptimizerState::for_params(&p, 0.001, 0.95);
        adam_step(&mut p, &g, &mut opt).unwrap();
        let expected = 0.5 - 0.001 * 1.0 / (1.0 + 1e-8);
        assert!((p.layers[0].weight.data[0] - expected).abs() < 1e-15);
        assert!((opt.m[0] - 0.1).abs() < 1e-15);
        assert!((opt.v[0] - 0.001).abs() < 1e-15);
    }

    #[test]
    fn classifier_stays_unit_after_steps() {
        let mut p = small(8, 4);
        let (src, ..) = toy_batch(3, 4);
        let labels = vec![0, 1, 3];
        let batch = Batch {
            source: Some(SourceBatch { inputs: &src, labels: &labels }),
            ..Default::default()
        };
        let s = spec(LossSelector::Classification, ScoreKind::Cosine);
        let mut opt = OptimizerState::for_params(&p, 0.05, 0.95);
        let first = backward(&p, &batch, &s).unwrap().0.total;
        let mut last = first;
        for _ in 0..30 {
            let (bd, g) = backward(&p, &batch, &s).unwrap();
            last = bd.total;
            adam_step(&mut p, &g, &mut opt).unwrap();
            for c in p.class_vectors() {
                assert!((linalg::norm(&c) - 1.0).abs() < 1e-9);
            }
        }
        assert!(last < first);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = small(1, 2);
        let mut g = Grads::zeros_like(&p);
        g.omega = f64::NAN;
        let mut opt = OptimizerState::for_params(&p, 0.001, 0.95);
        assert!(matches!(adam_step(&mut p, &g, &mut opt), Err(Error::NonFinite(_))));
    }

    /// `0.5 * |f(x)|^2` summed over inputs: convex in the weights of a
    /// single linear layer.
    fn quadratic(p: &ModelParams, xs: &[Vec<f64>]) -> (f64, Grads) {
        let mut g = Grads::zeros_like(p);
        let mut v = 0.0;
        for x in xs {
            let t = forward_traced(p, x).unwrap();
            v += 0.5 * linalg::dot(t.output(), t.output());
            let out = t.output().to_vec();
            backprop(p, &t, &out, &mut g);
        }
        (v, g)
    }

    #[test]
    fn grad_check_on_linear_convex_problem() {
        let p = ModelParams::init(&arch(4, &[], 3), 2, ScoreInit::default(), &mut seeded(2)).unwrap();
        let xs = randn(5, 4, 8);
        let (_, g) = quadratic(&p, &xs);
        let r = grad_check_with(&p, |q| Ok(quadratic(q, &xs).0), &g.to_flat(), 1e-4, 0).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert!(r.max_rel_error >= 0.0);

        let mut bad = g.to_flat();
        bad[1] *= 2.0;
        let r = grad_check_with(&p, |q| Ok(quadratic(q, &xs).0), &bad, 1e-4, 0).unwrap();
        assert!(r.max_rel_error > 0.1);
        assert_eq!(r.worst_index, 1);
    }

    #[test]
    fn grad_check_rejects_bad_epsilon() {
        let p = small(1, 2);
        let g = vec![0.0; p.num_params()];
        assert!(grad_check_with(&p, |_| Ok(0.0), &g, 1e-2, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut p = ModelParams::init(&arch(5, &[4, 3], 2), 3, ScoreInit::default(), &mut seeded(3)).unwrap();
        p.lambda = 0.8123;
        let mut opt = OptimizerState::for_params(&p, 0.001, 0.95);
        opt.step = 17;
        opt.epoch = 2;
        opt.m.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 * 0.1);
        opt.v.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64).sqrt());
        let ck = Checkpoint { params: p, optimizer: opt };
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..6], b"CGUDA1");
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 3);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);

        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}
