//! Verification and cluster-quality metrics.
//!
//! Trials are scored by cosine similarity. EER sweeps every distinct score
//! as a threshold and interpolates linearly where FRR - FAR changes sign;
//! minDCF additionally considers the thresholds -inf and +inf and is
//! normalized by the cost of the better trivial decision. Silhouette uses
//! cosine distance; Calinski-Harabasz uses Euclidean scatter on
//! length-normalized embeddings.
//!
//! This is the only module that reads hidden evaluation labels
//! ([`evaluate`]).

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize, Serializer};

use crate::datagen::HiddenLabels;
use crate::linalg::{self, MIN_NORM};
use crate::{Error, Result};

/// Verification trials: id pairs with target / nontarget flags.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialList {
    pub pairs: Vec<(String, String)>,
    pub is_target: Vec<bool>,
}

impl TrialList {
    pub fn new(pairs: Vec<(String, String)>, is_target: Vec<bool>) -> Result<Self> {
        if pairs.len() != is_target.len() {
            return Err(Error::DimensionMismatch {
                expected: pairs.len(),
                found: is_target.len(),
            });
        }
        Ok(Self { pairs, is_target })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTrials {
    pub scores: Vec<f64>,
    pub is_target: Vec<bool>,
}

impl ScoredTrials {
    pub fn new(scores: Vec<f64>, is_target: Vec<bool>) -> Result<Self> {
        if scores.len() != is_target.len() {
            return Err(Error::DimensionMismatch {
                expected: scores.len(),
                found: is_target.len(),
            });
        }
        if !scores.iter().all(|s| s.is_finite()) {
            return Err(Error::NonFinite("trial score".into()));
        }
        Ok(Self { scores, is_target })
    }

    fn counts(&self) -> Result<(usize, usize)> {
        let t = self.is_target.iter().filter(|&&x| x).count();
        let n = self.is_target.len() - t;
        if t == 0 || n == 0 {
            return Err(Error::Degenerate(format!(
                "need at least one target and one nontarget trial, got {t} / {n}"
            )));
        }
        Ok((t, n))
    }
}

/// Detection cost parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        Self {
            p_target: 0.01,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

impl DcfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "p_target must lie in (0, 1), got {}",
                self.p_target
            )));
        }
        if !(self.c_miss > 0.0 && self.c_fa > 0.0) {
            return Err(Error::InvalidConfig("detection costs must be positive".into()));
        }
        Ok(())
    }
}

/// Cosine score of each trial pair.
pub fn score_trials(ids: &[String], embeddings: &[Vec<f64>], trials: &TrialList) -> Result<ScoredTrials> {
    if ids.len() != embeddings.len() {
        return Err(Error::DimensionMismatch {
            expected: ids.len(),
            found: embeddings.len(),
        });
    }
    let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let lookup = |id: &str| {
        index
            .get(id)
            .map(|&i| embeddings[i].as_slice())
            .ok_or_else(|| Error::Labels(format!("trial id {id:?} not found")))
    };
    let mut scores = Vec::with_capacity(trials.len());
    for (a, b) in &trials.pairs {
        let (x, y) = (lookup(a)?, lookup(b)?);
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                found: y.len(),
            });
        }
        let c = linalg::cosine(x, y)
            .ok_or_else(|| Error::Degenerate(format!("zero-norm embedding in trial {a} {b}")))?;
        scores.push(c.clamp(-1.0, 1.0));
    }
    ScoredTrials::new(scores, trials.is_target.clone())
}

/// One threshold of the error-rate sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub threshold: f64,
    /// Fraction of targets scoring below the threshold.
    pub frr: f64,
    /// Fraction of nontargets scoring at or above the threshold.
    pub far: f64,
}

/// FRR / FAR at every distinct score, in increasing order, followed by
/// `+inf`.
pub fn error_sweep(scored: &ScoredTrials) -> Result<Vec<SweepPoint>> {
    let (n_t, n_n) = scored.counts()?;
    let mut order: Vec<(f64, bool)> = scored
        .scores
        .iter()
        .copied()
        .zip(scored.is_target.iter().copied())
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut points = Vec::new();
    let (mut targets_below, mut nontargets_below) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = order[i].0;
        points.push(SweepPoint {
            threshold: t,
            frr: targets_below as f64 / n_t as f64,
            far: (n_n - nontargets_below) as f64 / n_n as f64,
        });
        while i < order.len() && order[i].0 == t {
            if order[i].1 {
                targets_below += 1;
            } else {
                nontargets_below += 1;
            }
            i += 1;
        }
    }
    points.push(SweepPoint {
        threshold: f64::INFINITY,
        frr: 1.0,
        far: 0.0,
    });
    Ok(points)
}

/// Equal error rate in `[0, 1]`.
pub fn eer(scored: &ScoredTrials) -> Result<f64> {
    let sweep = error_sweep(scored)?;
    let j = sweep
        .iter()
        .position(|p| p.frr - p.far >= 0.0)
        .expect("sweep ends with FRR = 1, FAR = 0");
    let hi = sweep[j];
    let d_hi = hi.frr - hi.far;
    if d_hi == 0.0 || j == 0 {
        return Ok(hi.frr);
    }
    let lo = sweep[j - 1];
    let d_lo = lo.frr - lo.far;
    let a = -d_lo / (d_hi - d_lo);
    Ok(lo.frr + a * (hi.frr - lo.frr))
}

/// Normalized minimum detection cost, at most 1.
pub fn min_dcf(scored: &ScoredTrials, params: &DcfParams) -> Result<f64> {
    params.validate()?;
    let sweep = error_sweep(scored)?;
    let p = params.p_target;
    let cost = |p_miss: f64, p_fa: f64| params.c_miss * p_miss * p + params.c_fa * p_fa * (1.0 - p);
    // Threshold -inf accepts everything.
    let mut best = cost(0.0, 1.0);
    for s in &sweep {
        best = best.min(cost(s.frr, s.far));
    }
    Ok(best / (params.c_miss * p).min(params.c_fa * (1.0 - p)))
}

fn check_partition(assignments: &[usize], labels: &[usize]) -> Result<()> {
    if assignments.is_empty() {
        return Err(Error::Empty("partition metrics need at least one point".into()));
    }
    if assignments.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: assignments.len(),
            found: labels.len(),
        });
    }
    Ok(())
}

fn contingency(assignments: &[usize], labels: &[usize]) -> BTreeMap<(usize, usize), usize> {
    let mut table = BTreeMap::new();
    for (&a, &l) in assignments.iter().zip(labels) {
        *table.entry((a, l)).or_insert(0) += 1;
    }
    table
}

fn marginal(xs: &[usize]) -> BTreeMap<usize, usize> {
    let mut m = BTreeMap::new();
    for &x in xs {
        *m.entry(x).or_insert(0) += 1;
    }
    m
}

/// `(1/N) sum_k max_l |cluster k with label l|`.
pub fn purity(assignments: &[usize], labels: &[usize]) -> Result<f64> {
    check_partition(assignments, labels)?;
    let mut best: BTreeMap<usize, usize> = BTreeMap::new();
    for ((a, _), &c) in &contingency(assignments, labels) {
        let b = best.entry(*a).or_insert(0);
        *b = (*b).max(c);
    }
    Ok(best.values().sum::<usize>() as f64 / assignments.len() as f64)
}

fn entropy(counts: &BTreeMap<usize, usize>, n: f64) -> f64 {
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// `I(A; B) / sqrt(H(A) H(B))` in nats. Zero when one partition is a
/// single block and the other is not; one when both are single blocks.
pub fn nmi(assignments: &[usize], labels: &[usize]) -> Result<f64> {
    check_partition(assignments, labels)?;
    let n = assignments.len() as f64;
    let ma = marginal(assignments);
    let ml = marginal(labels);
    if ma.len() == 1 && ml.len() == 1 {
        return Ok(1.0);
    }
    if ma.len() == 1 || ml.len() == 1 {
        return Ok(0.0);
    }
    let ha = entropy(&ma, n);
    let hl = entropy(&ml, n);
    let mut mi = 0.0;
    for (&(a, l), &c) in &contingency(assignments, labels) {
        let pij = c as f64 / n;
        mi += pij * (c as f64 * n / (ma[&a] as f64 * ml[&l] as f64)).ln();
    }
    Ok((mi / (ha * hl).sqrt()).clamp(0.0, 1.0))
}

/// A metric that may be undefined on a particular clustering.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum MetricValue {
    Value(f64),
    Degenerate,
}

impl MetricValue {
    pub fn value(self) -> Option<f64> {
        match self {
            MetricValue::Value(v) => Some(v),
            MetricValue::Degenerate => None,
        }
    }
}

impl Serialize for MetricValue {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            MetricValue::Value(v) => s.serialize_f64(*v),
            MetricValue::Degenerate => s.serialize_str("degenerate"),
        }
    }
}

fn normalize_all(embeddings: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let d = embeddings.first().map_or(0, Vec::len);
    embeddings
        .iter()
        .map(|e| {
            if e.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: e.len(),
                });
            }
            linalg::normalized(e).ok_or_else(|| Error::Degenerate("zero-norm embedding".into()))
        })
        .collect()
}

/// Groups point indices by cluster id, in increasing id order.
fn groups(assignments: &[usize]) -> Vec<Vec<usize>> {
    let mut by: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &a) in assignments.iter().enumerate() {
        by.entry(a).or_default().push(i);
    }
    by.into_values().collect()
}

/// `[tr(B) / (K - 1)] / [tr(W) / (N - K)]` over the nonempty clusters.
/// Returns [`MetricValue::Degenerate`] when the within-cluster scatter is
/// zero.
pub fn calinski_harabasz(embeddings: &[Vec<f64>], assignments: &[usize]) -> Result<MetricValue> {
    if embeddings.len() != assignments.len() {
        return Err(Error::DimensionMismatch {
            expected: embeddings.len(),
            found: assignments.len(),
        });
    }
    let x = normalize_all(embeddings)?;
    let g = groups(assignments);
    let (n, k) = (x.len(), g.len());
    if k < 2 || n <= k {
        return Err(Error::Degenerate(format!(
            "Calinski-Harabasz needs 2 <= K < N, got K={k}, N={n}"
        )));
    }
    let d = x[0].len();
    let mut mean = vec![0.0; d];
    for p in &x {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / n as f64;
        }
    }
    let (mut between, mut within) = (0.0, 0.0);
    for members in &g {
        let mut c = vec![0.0; d];
        for &i in members {
            for (cj, v) in c.iter_mut().zip(&x[i]) {
                *cj += v / members.len() as f64;
            }
        }
        between += members.len() as f64 * linalg::sq_dist(&c, &mean);
        within += members.iter().map(|&i| linalg::sq_dist(&x[i], &c)).sum::<f64>();
    }
    if within <= MIN_NORM * MIN_NORM {
        return Ok(MetricValue::Degenerate);
    }
    Ok(MetricValue::Value(
        (between / (k - 1) as f64) / (within / (n - k) as f64),
    ))
}

/// Mean silhouette with cosine distance `1 - cos`; points in singleton
/// clusters contribute 0.
pub fn silhouette(embeddings: &[Vec<f64>], assignments: &[usize]) -> Result<f64> {
    if embeddings.len() != assignments.len() {
        return Err(Error::DimensionMismatch {
            expected: embeddings.len(),
            found: assignments.len(),
        });
    }
    let x = normalize_all(embeddings)?;
    let g = groups(assignments);
    if g.len() < 2 {
        return Err(Error::Degenerate("silhouette needs at least two clusters".into()));
    }
    let mut cluster_of = vec![0; x.len()];
    for (c, members) in g.iter().enumerate() {
        for &i in members {
            cluster_of[i] = c;
        }
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; g.len()];
    for i in 0..x.len() {
        let own = cluster_of[i];
        if g[own].len() == 1 {
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..x.len() {
            if j != i {
                sums[cluster_of[j]] += 1.0 - linalg::dot(&x[i], &x[j]);
            }
        }
        let a = sums[own] / (g[own].len() - 1) as f64;
        let b = (0..g.len())
            .filter(|&c| c != own)
            .map(|c| sums[c] / g[c].len() as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok((total / x.len() as f64).clamp(-1.0, 1.0))
}

/// The six evaluation metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub eer: MetricValue,
    pub min_dcf: MetricValue,
    pub purity: MetricValue,
    pub nmi: MetricValue,
    pub ch: MetricValue,
    pub ss: MetricValue,
}

fn degenerate_to_marker(r: Result<f64>) -> Result<MetricValue> {
    match r {
        Ok(v) => Ok(MetricValue::Value(v)),
        Err(Error::Degenerate(_)) => Ok(MetricValue::Degenerate),
        Err(e) => Err(e),
    }
}

/// Scores the trials and rates the clustering `assignments` of the
/// evaluation embeddings against the hidden speaker labels.
pub fn evaluate(
    ids: &[String],
    embeddings: &[Vec<f64>],
    hidden: &HiddenLabels,
    assignments: &[usize],
    trials: &TrialList,
    dcf: &DcfParams,
) -> Result<MetricsReport> {
    let labels = hidden.as_slice();
    let scored = score_trials(ids, embeddings, trials)?;
    let ch = match calinski_harabasz(embeddings, assignments) {
        Err(Error::Degenerate(_)) => MetricValue::Degenerate,
        other => other?,
    };
    Ok(MetricsReport {
        eer: MetricValue::Value(eer(&scored)?),
        min_dcf: MetricValue::Value(min_dcf(&scored, dcf)?),
        purity: MetricValue::Value(purity(assignments, labels)?),
        nmi: MetricValue::Value(nmi(assignments, labels)?),
        ch,
        ss: degenerate_to_marker(silhouette(embeddings, assignments))?,
    })
}

/// NMI of a clustering against the hidden labels.
pub fn hidden_nmi(hidden: &HiddenLabels, assignments: &[usize]) -> Result<f64> {
    nmi(assignments, hidden.as_slice())
}

/// Purity of a clustering against the hidden labels.
pub fn hidden_purity(hidden: &HiddenLabels, assignments: &[usize]) -> Result<f64> {
    purity(assignments, hidden.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    fn scored(t: &[f64], n: &[f64]) -> ScoredTrials {
        let mut s = t.to_vec();
        s.extend(n);
        let mut f = vec![true; t.len()];
        f.extend(vec![false; n.len()]);
        ScoredTrials::new(s, f).unwrap()
    }

    #[test]
    fn trial_list_lengths_must_match() {
        assert!(TrialList::new(vec![("a".into(), "b".into())], vec![]).is_err());
    }

    #[test]
    fn score_trials_values() {
        let ids: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let emb = vec![vec![1.0, 2.0], vec![2.0, 4.0], vec![-1.0, -2.0], vec![0.3, -0.7]];
        let pairs = vec![
            ("a".into(), "b".into()),
            ("a".into(), "c".into()),
            ("b".into(), "d".into()),
        ];
        let t = TrialList::new(pairs, vec![true, false, false]).unwrap();
        let s = score_trials(&ids, &emb, &t).unwrap();
        assert!((s.scores[0] - 1.0).abs() < 1e-15);
        assert!((s.scores[1] + 1.0).abs() < 1e-15);
        let n1 = (5.0f64).sqrt() * 2.0;
        let n2 = (0.09f64 + 0.49).sqrt();
        let expected = (2.0 * 0.3 / n1 + 4.0 * -0.7 / n1) / n2;
        assert!((s.scores[2] - expected).abs() < 1e-12);

        let missing = TrialList::new(vec![("a".into(), "zz".into())], vec![true]).unwrap();
        assert!(matches!(score_trials(&ids, &emb, &missing), Err(Error::Labels(_))));
        let zero = vec![vec![0.0, 0.0]; 4];
        assert!(score_trials(&ids, &zero, &t).is_err());
    }

    #[test]
    fn eer_examples() {
        assert_eq!(eer(&scored(&[0.9, 0.8], &[0.1, 0.2])).unwrap(), 0.0);
        assert_eq!(eer(&scored(&[0.9, 0.1], &[0.8, 0.2])).unwrap(), 0.5);
        assert_eq!(eer(&scored(&[0.1], &[0.9])).unwrap(), 1.0);
        assert!(matches!(eer(&scored(&[0.1], &[])), Err(Error::Degenerate(_))));
    }

    #[test]
    fn min_dcf_examples() {
        let p = DcfParams { p_target: 0.1, c_miss: 1.0, c_fa: 1.0 };
        assert_eq!(min_dcf(&scored(&[0.9, 0.8], &[0.1, 0.2]), &p).unwrap(), 0.0);
        // Exhaustive enumeration over {-inf, scores, +inf} gives 1/3 at t = 0.7.
        let v = min_dcf(&scored(&[0.7, 0.4, 0.9], &[0.5, 0.1, 0.3]), &p).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
        assert!(min_dcf(&scored(&[0.1], &[0.9]), &DcfParams::default()).unwrap() <= 1.0);
    }

    #[test]
    fn purity_examples() {
        assert_eq!(purity(&[0, 0, 1, 1], &[5, 5, 7, 7]).unwrap(), 1.0);
        assert_eq!(purity(&[0, 0, 0, 1, 1], &[0, 0, 1, 1, 1]).unwrap(), 0.8);
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        assert_eq!(purity(&[0; 20], &labels).unwrap(), 0.5);
        assert!(purity(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn nmi_examples() {
        assert!((nmi(&[0, 0, 1, 1, 2], &[3, 3, 4, 4, 9]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(nmi(&[0, 0, 0], &[0, 1, 2]).unwrap(), 0.0);
        assert_eq!(nmi(&[0, 0, 0], &[1, 1, 1]).unwrap(), 1.0);
        // Contingency-table value computed independently.
        let v = nmi(&[0, 0, 1, 1, 2, 2], &[0, 0, 0, 1, 1, 1]).unwrap();
        assert!((v - 0.5295405780575618).abs() < 1e-12);
    }

    fn circle(angles: &[f64]) -> Vec<Vec<f64>> {
        angles.iter().map(|a| vec![a.cos(), a.sin()]).collect()
    }

    #[test]
    fn calinski_harabasz_examples() {
        let x = circle(&[0.0, 0.3, 0.5, 2.0, 2.4, 2.9]);
        let a = [0, 0, 0, 1, 1, 1];
        let v = calinski_harabasz(&x, &a).unwrap().value().unwrap();
        assert!((v - 33.48700798650586).abs() < 1e-9);
        let rot: Vec<Vec<f64>> = circle(&[1.0, 1.3, 1.5, 3.0, 3.4, 3.9]);
        let r = calinski_harabasz(&rot, &a).unwrap().value().unwrap();
        assert!((r - v).abs() < 1e-9);
        let dup = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
        assert_eq!(calinski_harabasz(&dup, &[0, 0, 1, 1]).unwrap(), MetricValue::Degenerate);
        assert!(calinski_harabasz(&x, &[0; 6]).is_err());
        assert!(calinski_harabasz(&x[..2], &[0, 1]).is_err());
    }

    #[test]
    fn silhouette_examples() {
        let x = circle(&[0.0, 0.3, 0.5, 2.0, 2.4, 2.9]);
        let v = silhouette(&x, &[0, 0, 0, 1, 1, 1]).unwrap();
        assert!((v - 0.9129018594658033).abs() < 1e-12);
        let dup = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
        assert_eq!(silhouette(&dup, &[0, 0, 1, 1]).unwrap(), 1.0);
        assert!(silhouette(&x, &[0; 6]).is_err());
        assert_eq!(silhouette(&x[..2], &[0, 1]).unwrap(), 0.0);
    }

    #[test]
    fn silhouette_point_between_clusters_contributes_zero() {
        // Point 2 has a = b = 1 - cos(pi/4).
        let q = std::f64::consts::FRAC_PI_4;
        let x = circle(&[0.0, 0.0, q, 2.0 * q, 2.0 * q]);
        let a = [0, 0, 0, 1, 1];
        let d = 1.0 - q.cos();
        let s0 = {
            let a0 = (0.0 + d) / 2.0;
            let b0 = 1.0;
            (b0 - a0) / b0
        };
        let s3 = {
            let a3 = 0.0;
            let b3 = (1.0 + 1.0 + d) / 3.0;
            (b3 - a3) / b3
        };
        let expected = (2.0 * s0 + 0.0 + 2.0 * s3) / 5.0;
        let a2 = (d + d) / 2.0;
        assert!((a2 - d).abs() < 1e-15);
        assert!((silhouette(&x, &a).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn metric_value_serialization() {
        let r = MetricsReport {
            eer: MetricValue::Value(0.25),
            min_dcf: MetricValue::Value(0.5),
            purity: MetricValue::Value(1.0),
            nmi: MetricValue::Value(1.0),
            ch: MetricValue::Degenerate,
            ss: MetricValue::Value(-0.5),
        };
        let s = serde_json::to_string(&r).unwrap();
        assert_eq!(
            s,
            r#"{"eer":0.25,"min_dcf":0.5,"purity":1.0,"nmi":1.0,"ch":"degenerate","ss":-0.5}"#
        );
    }

    fn random_scores(seed: u64) -> ScoredTrials {
        let mut rng = seeded(seed);
        let n = rng.random_range(4..60);
        let mut s: Vec<f64> = (0..n).map(|_| (rng.random_range(-10..10) as f64) / 10.0).collect();
        let mut f: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        f[0] = true;
        f[1] = false;
        s[0] = s[0].min(0.9);
        ScoredTrials::new(s, f).unwrap()
    }

    #[test]
    fn eer_is_symmetric_under_negation_and_label_flip() {
        for seed in 0..200 {
            let s = random_scores(seed);
            let flipped = ScoredTrials::new(
                s.scores.iter().map(|x| -x).collect(),
                s.is_target.iter().map(|t| !t).collect(),
            )
            .unwrap();
            let (a, b) = (eer(&s).unwrap(), eer(&flipped).unwrap());
            assert!((a - b).abs() < 1e-12, "seed {seed}: {a} vs {b}");
        }
    }

    proptest! {
        #[test]
        fn purity_and_nmi_ignore_relabeling(
            pts in proptest::collection::vec((0usize..4, 0usize..5), 2..40),
            shift_a in 0usize..4,
            shift_l in 0usize..5,
        ) {
            let a: Vec<usize> = pts.iter().map(|p| p.0).collect();
            let l: Vec<usize> = pts.iter().map(|p| p.1).collect();
            let a2: Vec<usize> = a.iter().map(|x| (x + shift_a) % 4 + 10).collect();
            let l2: Vec<usize> = l.iter().map(|x| 7 * ((x + shift_l) % 5)).collect();
            prop_assert!((purity(&a, &l).unwrap() - purity(&a2, &l2).unwrap()).abs() < 1e-12);
            let n = nmi(&a, &l).unwrap();
            prop_assert!((n - nmi(&a2, &l2).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&n));
        }

        #[test]
        fn min_dcf_and_eer_are_bounded(seed in 0u64..1000) {
            let s = random_scores(seed);
            let e = eer(&s).unwrap();
            prop_assert!((0.0..=1.0).contains(&e));
            prop_assert!(min_dcf(&s, &DcfParams::default()).unwrap() <= 1.0 + 1e-12);
        }

        #[test]
        fn cluster_metrics_ignore_point_order(seed in 0u64..500) {
            let mut rng = seeded(seed);
            let n = rng.random_range(6..25);
            let x: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let mut a: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            a[0] = 0;
            a[1] = 1;
            a[2] = 2;
            let perm: Vec<usize> = (0..n).rev().collect();
            let xp: Vec<Vec<f64>> = perm.iter().map(|&i| x[i].clone()).collect();
            let ap: Vec<usize> = perm.iter().map(|&i| a[i]).collect();
            let s1 = silhouette(&x, &a).unwrap();
            let s2 = silhouette(&xp, &ap).unwrap();
            prop_assert!((s1 - s2).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&s1));
            let c1 = calinski_harabasz(&x, &a).unwrap().value().unwrap();
            let c2 = calinski_harabasz(&xp, &ap).unwrap().value().unwrap();
            prop_assert!((c1 - c2).abs() <= 1e-9 * c1.max(1.0));
            prop_assert!(c1 >= 0.0);
        }
    }
}
