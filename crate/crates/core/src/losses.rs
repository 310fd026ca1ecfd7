//! Score functions and training objectives.
//!
//! Every objective here is a mean of negative log-probabilities and is
//! evaluated in log space: scores enter as log-scores (`-d^2/lambda^2` or
//! `omega*cos + b`) and normalizers go through log-sum-exp. The `*_grad`
//! variants return gradients with respect to the embeddings and the score
//! parameters; [`crate::embednet`] chains them through the network.

use serde::{Deserialize, Serialize};

use crate::linalg::{self, cosine_with_grad, neg_log_softmax, softmax};
use crate::{Error, Result};

/// Weights of the contrastive and contrastive-center terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "loss weights must be non-negative, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// Additive angular margin head settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AamConfig {
    pub margin: f64,
    pub scale: f64,
}

impl Default for AamConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            scale: 30.0,
        }
    }
}

impl AamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(Error::InvalidConfig(format!(
                "AAM margin must lie in [0, pi/2), got {}",
                self.margin
            )));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "AAM scale must be positive, got {}",
                self.scale
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Euclidean,
    Cosine,
}

/// A score function together with its current parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScoreFn {
    Euclidean { lambda: f64 },
    Cosine { omega: f64, bias: f64 },
}

/// Gradient with respect to the score parameters. `log_lambda` is the
/// derivative with respect to `ln(lambda)`, the unconstrained coordinate the
/// optimizer works in.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ScoreParamGrad {
    pub log_lambda: f64,
    pub omega: f64,
    pub bias: f64,
}

fn check_dims(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: y.len(),
        });
    }
    Ok(())
}

pub fn score_euclidean(x: &[f64], y: &[f64], lambda: f64) -> Result<f64> {
    ScoreFn::Euclidean { lambda }.log_score(x, y).map(f64::exp)
}

pub fn score_cosine(x: &[f64], y: &[f64], omega: f64, bias: f64) -> Result<f64> {
    ScoreFn::Cosine { omega, bias }.log_score(x, y).map(f64::exp)
}

struct LogScoreGrad {
    value: f64,
    dx: Vec<f64>,
    dy: Vec<f64>,
    params: ScoreParamGrad,
}

impl ScoreFn {
    /// `ln s(x, y)`.
    pub fn log_score(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_dims(x, y)?;
        match *self {
            ScoreFn::Euclidean { lambda } => {
                if !(lambda > 0.0) {
                    return Err(Error::InvalidConfig(format!("lambda must be > 0, got {lambda}")));
                }
                Ok(-linalg::sq_dist(x, y) / (lambda * lambda))
            }
            ScoreFn::Cosine { omega, bias } => {
                let c = linalg::cosine(x, y)
                    .ok_or_else(|| Error::Degenerate("zero-norm input to cosine score".into()))?;
                Ok(omega * c + bias)
            }
        }
    }

    fn log_score_grad(&self, x: &[f64], y: &[f64]) -> Result<LogScoreGrad> {
        check_dims(x, y)?;
        match *self {
            ScoreFn::Euclidean { lambda } => {
                if !(lambda > 0.0) {
                    return Err(Error::InvalidConfig(format!("lambda must be > 0, got {lambda}")));
                }
                let inv = 1.0 / (lambda * lambda);
                let d2 = linalg::sq_dist(x, y);
                let dx: Vec<f64> = x.iter().zip(y).map(|(a, b)| -2.0 * (a - b) * inv).collect();
                let dy = dx.iter().map(|v| -v).collect();
                Ok(LogScoreGrad {
                    value: -d2 * inv,
                    dx,
                    dy,
                    params: ScoreParamGrad {
                        log_lambda: 2.0 * d2 * inv,
                        ..Default::default()
                    },
                })
            }
            ScoreFn::Cosine { omega, bias } => {
                let (c, gx, gy) = cosine_with_grad(x, y)
                    .ok_or_else(|| Error::Degenerate("zero-norm input to cosine score".into()))?;
                Ok(LogScoreGrad {
                    value: omega * c + bias,
                    dx: gx.into_iter().map(|g| omega * g).collect(),
                    dy: gy.into_iter().map(|g| omega * g).collect(),
                    params: ScoreParamGrad {
                        log_lambda: 0.0,
                        omega: c,
                        bias: 1.0,
                    },
                })
            }
        }
    }
}

fn finite(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn add_into(acc: &mut [f64], v: &[f64], scale: f64) {
    for (a, x) in acc.iter_mut().zip(v) {
        *a += scale * x;
    }
}

/// Contrastive loss value with gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveOutput {
    pub value: f64,
    pub d_view_a: Vec<Vec<f64>>,
    pub d_view_b: Vec<Vec<f64>>,
    pub params: ScoreParamGrad,
}

/// `-(1/N) sum_i ln[ s(a_i, b_i) / sum_m s(a_i, b_m) ]`, where the
/// denominator runs over every second view including `m = i`.
pub fn contrastive_loss(view_a: &[Vec<f64>], view_b: &[Vec<f64>], score: &ScoreFn) -> Result<f64> {
    contrastive_impl(view_a, view_b, score, false).map(|o| o.value)
}

pub fn contrastive_loss_grad(
    view_a: &[Vec<f64>],
    view_b: &[Vec<f64>],
    score: &ScoreFn,
) -> Result<ContrastiveOutput> {
    contrastive_impl(view_a, view_b, score, true)
}

fn contrastive_impl(
    view_a: &[Vec<f64>],
    view_b: &[Vec<f64>],
    score: &ScoreFn,
    want_grad: bool,
) -> Result<ContrastiveOutput> {
    let n = view_a.len();
    if n == 0 {
        return Err(Error::Empty("contrastive loss needs at least one pair".into()));
    }
    if view_b.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: view_b.len(),
        });
    }
    let dim = view_a[0].len();
    let mut out = ContrastiveOutput {
        value: 0.0,
        d_view_a: if want_grad { vec![vec![0.0; dim]; n] } else { Vec::new() },
        d_view_b: if want_grad { vec![vec![0.0; dim]; n] } else { Vec::new() },
        params: ScoreParamGrad::default(),
    };
    let inv_n = 1.0 / n as f64;
    let mut row = vec![0.0; n];
    for i in 0..n {
        if !want_grad {
            for (m, r) in row.iter_mut().enumerate() {
                *r = score.log_score(&view_a[i], &view_b[m])?;
            }
            out.value += neg_log_softmax(&row, i);
            continue;
        }
        let grads = (0..n)
            .map(|m| score.log_score_grad(&view_a[i], &view_b[m]))
            .collect::<Result<Vec<_>>>()?;
        for (r, g) in row.iter_mut().zip(&grads) {
            *r = g.value;
        }
        out.value += neg_log_softmax(&row, i);
        let p = softmax(&row);
        for (m, g) in grads.iter().enumerate() {
            let coef = (p[m] - if m == i { 1.0 } else { 0.0 }) * inv_n;
            if coef == 0.0 {
                continue;
            }
            add_into(&mut out.d_view_a[i], &g.dx, coef);
            add_into(&mut out.d_view_b[m], &g.dy, coef);
            out.params.log_lambda += coef * g.params.log_lambda;
            out.params.omega += coef * g.params.omega;
            out.params.bias += coef * g.params.bias;
        }
    }
    out.value = finite(out.value * inv_n, "contrastive loss")?;
    Ok(out)
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            len: classes,
        });
    }
    Ok(())
}

/// Mean softmax cross-entropy of `logits` (one row per example).
pub fn softmax_ce_loss(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    softmax_ce_loss_grad(logits, labels).map(|(v, _)| v)
}

/// Cross-entropy value and its gradient with respect to the logits.
pub fn softmax_ce_loss_grad(logits: &[Vec<f64>], labels: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
    if logits.is_empty() {
        return Err(Error::Empty("cross-entropy needs at least one example".into()));
    }
    if labels.len() != logits.len() {
        return Err(Error::DimensionMismatch {
            expected: logits.len(),
            found: labels.len(),
        });
    }
    let classes = logits[0].len();
    check_labels(labels, classes)?;
    let inv_n = 1.0 / logits.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (z, &y) in logits.iter().zip(labels) {
        if z.len() != classes {
            return Err(Error::DimensionMismatch {
                expected: classes,
                found: z.len(),
            });
        }
        total += neg_log_softmax(z, y);
        let mut g = softmax(z);
        g[y] -= 1.0;
        g.iter_mut().for_each(|v| *v *= inv_n);
        grads.push(g);
    }
    Ok((finite(total * inv_n, "cross-entropy")?, grads))
}

/// Clamp guard for the arccos input: beyond this the angle derivative is
/// treated as zero.
const ARC_CLAMP: f64 = 1.0 - 1e-12;

/// `cos(theta + m)` for `cos(theta) = c`, and its derivative in `c`.
fn margin_cosine(c: f64, margin: f64) -> (f64, f64) {
    let c = c.clamp(-1.0, 1.0);
    let sin_theta = (1.0 - c * c).max(0.0).sqrt();
    let (sm, cm) = margin.sin_cos();
    let value = c * cm - sin_theta * sm;
    let deriv = if margin == 0.0 {
        1.0
    } else if c.abs() >= ARC_CLAMP {
        cm
    } else {
        cm + c * sm / sin_theta
    };
    (value, deriv)
}

/// AAM-softmax from precomputed cosines. Returns the mean loss and its
/// gradient with respect to each cosine.
pub fn aam_from_cosines(
    cosines: &[Vec<f64>],
    labels: &[usize],
    cfg: &AamConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    cfg.validate()?;
    if cosines.is_empty() {
        return Err(Error::Empty("AAM loss needs at least one example".into()));
    }
    let classes = cosines[0].len();
    check_labels(labels, classes)?;
    if labels.len() != cosines.len() {
        return Err(Error::DimensionMismatch {
            expected: cosines.len(),
            found: labels.len(),
        });
    }
    let mut logits = Vec::with_capacity(cosines.len());
    let mut margin_derivs = Vec::with_capacity(cosines.len());
    for (row, &y) in cosines.iter().zip(labels) {
        if row.len() != classes {
            return Err(Error::DimensionMismatch {
                expected: classes,
                found: row.len(),
            });
        }
        let mut z: Vec<f64> = row.iter().map(|c| cfg.scale * c).collect();
        let (target, deriv) = margin_cosine(row[y], cfg.margin);
        z[y] = cfg.scale * target;
        logits.push(z);
        margin_derivs.push(deriv);
    }
    let (value, dlogits) = softmax_ce_loss_grad(&logits, labels)?;
    let dcos = dlogits
        .into_iter()
        .zip(labels)
        .zip(margin_derivs)
        .map(|((mut g, &y), deriv)| {
            for (j, v) in g.iter_mut().enumerate() {
                *v *= cfg.scale;
                if j == y {
                    *v *= deriv;
                }
            }
            g
        })
        .collect();
    Ok((value, dcos))
}

/// AAM-softmax on unit-norm embeddings and unit-norm class columns.
/// Inputs that are not length-normalized are rejected.
pub fn aam_softmax_loss(
    embeddings: &[Vec<f64>],
    classifier_columns: &[Vec<f64>],
    labels: &[usize],
    cfg: &AamConfig,
) -> Result<f64> {
    let cosines = unit_cosines(embeddings, classifier_columns)?;
    aam_from_cosines(&cosines, labels, cfg).map(|(v, _)| v)
}

fn unit_cosines(embeddings: &[Vec<f64>], columns: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if columns.is_empty() {
        return Err(Error::Empty("classifier has no classes".into()));
    }
    let dim = columns[0].len();
    for (what, set) in [("embedding", embeddings), ("classifier column", columns)] {
        for v in set {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: v.len(),
                });
            }
            if !linalg::is_unit(v) {
                return Err(Error::NotNormalized(format!(
                    "{what} has norm {}",
                    linalg::norm(v)
                )));
            }
        }
    }
    Ok(embeddings
        .iter()
        .map(|e| columns.iter().map(|w| linalg::dot(e, w)).collect())
        .collect())
}

/// Contrastive center loss value with gradients. Centers are constants.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterOutput {
    pub value: f64,
    pub d_embeddings: Vec<Vec<f64>>,
    pub d_omega: f64,
    pub d_bias: f64,
}

/// `-(1/N) sum_i ln[ s(e_i, c_{y_i}) / sum_k s(e_i, c_k) ]` with the cosine
/// score.
pub fn contrastive_center_loss(
    embeddings: &[Vec<f64>],
    assignments: &[usize],
    centers: &[Vec<f64>],
    omega: f64,
    bias: f64,
) -> Result<f64> {
    center_impl(embeddings, assignments, centers, omega, bias, false).map(|o| o.value)
}

pub fn contrastive_center_loss_grad(
    embeddings: &[Vec<f64>],
    assignments: &[usize],
    centers: &[Vec<f64>],
    omega: f64,
    bias: f64,
) -> Result<CenterOutput> {
    center_impl(embeddings, assignments, centers, omega, bias, true)
}

fn center_impl(
    embeddings: &[Vec<f64>],
    assignments: &[usize],
    centers: &[Vec<f64>],
    omega: f64,
    bias: f64,
    want_grad: bool,
) -> Result<CenterOutput> {
    let k = centers.len();
    if k == 0 {
        return Err(Error::Empty("contrastive center loss needs K >= 1".into()));
    }
    let n = embeddings.len();
    if n == 0 {
        return Err(Error::Empty("contrastive center loss needs embeddings".into()));
    }
    if assignments.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: assignments.len(),
        });
    }
    check_labels(assignments, k)?;
    let score = ScoreFn::Cosine { omega, bias };
    let inv_n = 1.0 / n as f64;
    let mut out = CenterOutput {
        value: 0.0,
        d_embeddings: Vec::with_capacity(if want_grad { n } else { 0 }),
        d_omega: 0.0,
        d_bias: 0.0,
    };
    let mut row = vec![0.0; k];
    for (e, &y) in embeddings.iter().zip(assignments) {
        if !want_grad {
            for (r, c) in row.iter_mut().zip(centers) {
                *r = score.log_score(e, c)?;
            }
            out.value += neg_log_softmax(&row, y);
            continue;
        }
        let grads = centers
            .iter()
            .map(|c| score.log_score_grad(e, c))
            .collect::<Result<Vec<_>>>()?;
        for (r, g) in row.iter_mut().zip(&grads) {
            *r = g.value;
        }
        out.value += neg_log_softmax(&row, y);
        let p = softmax(&row);
        let mut de = vec![0.0; e.len()];
        for (j, g) in grads.iter().enumerate() {
            let coef = (p[j] - if j == y { 1.0 } else { 0.0 }) * inv_n;
            add_into(&mut de, &g.dx, coef);
            out.d_omega += coef * g.params.omega;
            out.d_bias += coef * g.params.bias;
        }
        out.d_embeddings.push(de);
    }
    out.value = finite(out.value * inv_n, "contrastive center loss")?;
    Ok(out)
}

/// Average of two view embeddings, then length-normalized.
pub fn mean_embedding(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    check_dims(a, b)?;
    let avg: Vec<f64> = a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect();
    linalg::normalized(&avg).ok_or_else(|| Error::Degenerate("views average to zero".into()))
}

/// Labeled source-domain embeddings for the classification term.
#[derive(Debug, Clone, Copy)]
pub struct SourceTerm<'a> {
    pub embeddings: &'a [Vec<f64>],
    pub classifier_columns: &'a [Vec<f64>],
    pub labels: &'a [usize],
    pub aam: AamConfig,
}

/// Two-view target-domain embeddings for the contrastive term.
#[derive(Debug, Clone, Copy)]
pub struct TargetTerm<'a> {
    pub view_a: &'a [Vec<f64>],
    pub view_b: &'a [Vec<f64>],
    pub score: ScoreFn,
}

/// Cluster assignments (aligned with the target pairs) and centers.
#[derive(Debug, Clone, Copy)]
pub struct CenterTerm<'a> {
    pub assignments: &'a [usize],
    pub centers: &'a [Vec<f64>],
    pub omega: f64,
    pub bias: f64,
}

/// Per-term values of a composite objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sc: Option<f64>,
    pub ct: Option<f64>,
    pub cc: Option<f64>,
    pub total: f64,
}

/// `L_sc + alpha * L_ct`.
pub fn pretrain_loss(source: &SourceTerm, target: &TargetTerm, weights: LossWeights) -> Result<f64> {
    weights.validate()?;
    let sc = aam_softmax_loss(
        source.embeddings,
        source.classifier_columns,
        source.labels,
        &source.aam,
    )?;
    let ct = contrastive_loss(target.view_a, target.view_b, &target.score)?;
    Ok(sc + weights.alpha * ct)
}

/// `L_sc + alpha * L_ct + beta * L_cc`, with `e_i` the normalized average of
/// the two target views.
pub fn joint_loss(
    source: &SourceTerm,
    target: &TargetTerm,
    centers: &CenterTerm,
    weights: LossWeights,
) -> Result<f64> {
    let pre = pretrain_loss(source, target, weights)?;
    let means = target
        .view_a
        .iter()
        .zip(target.view_b)
        .map(|(a, b)| mean_embedding(a, b))
        .collect::<Result<Vec<_>>>()?;
    let cc = contrastive_center_loss(
        &means,
        centers.assignments,
        centers.centers,
        centers.omega,
        centers.bias,
    )?;
    Ok(pre + weights.beta * cc)
}
