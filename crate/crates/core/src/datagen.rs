//! Seeded synthetic two-domain speaker data.
//!
//! Each speaker owns a unit-norm prototype in `R^d_in`. An utterance is the
//! prototype plus isotropic gaussian noise, pushed through the domain's
//! affine shift. Source datasets carry their speaker labels; target datasets
//! move them into [`HiddenLabels`], which only evaluation code can read.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::{self, Matrix};
use crate::metrics::TrialList;
use crate::rng::seeded;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    fn id_prefix(self) -> &'static str {
        match self {
            Domain::Source => "src",
            Domain::Target => "tgt",
        }
    }
}

/// Ground-truth speaker ids of an unlabeled dataset.
///
/// The contents are crate-private: only [`crate::metrics`] and trial
/// construction look inside.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HiddenLabels(Vec<usize>);

impl HiddenLabels {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub(crate) fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerDataset {
    domain: Domain,
    ids: Vec<String>,
    utterances: Vec<Vec<f64>>,
    speaker_labels: Option<Vec<usize>>,
    hidden_labels: Option<HiddenLabels>,
}

/// Checks that labels are exactly `0..C` for some C, returning C.
fn contiguous_class_count(labels: &[usize]) -> Result<usize> {
    if labels.is_empty() {
        return Ok(0);
    }
    let max = *labels.iter().max().unwrap();
    let mut seen = vec![false; max + 1];
    for &l in labels {
        seen[l] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Labels(format!(
            "labels are not contiguous from 0 (class {missing} unused, max {max})"
        )));
    }
    Ok(max + 1)
}

impl SpeakerDataset {
    pub fn new(
        domain: Domain,
        ids: Vec<String>,
        utterances: Vec<Vec<f64>>,
        speaker_labels: Option<Vec<usize>>,
        hidden_labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let n = utterances.len();
        if ids.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: ids.len(),
            });
        }
        if let Some(first) = utterances.first() {
            let d = first.len();
            if d == 0 {
                return Err(Error::Empty("utterance vectors have dimension 0".into()));
            }
            for u in &utterances {
                if u.len() != d {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        found: u.len(),
                    });
                }
                if u.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite("utterance feature".into()));
                }
            }
        }
        let mut unique = HashSet::with_capacity(n);
        for id in &ids {
            if id.is_empty() || id.contains([',', ' ', '\n', '\t']) {
                return Err(Error::Labels(format!("invalid utterance id {id:?}")));
            }
            if !unique.insert(id.as_str()) {
                return Err(Error::Labels(format!("duplicate utterance id {id}")));
            }
        }
        for labels in [&speaker_labels, &hidden_labels].into_iter().flatten() {
            if labels.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: labels.len(),
                });
            }
        }
        if let Some(l) = &speaker_labels {
            contiguous_class_count(l)?;
        }
        Ok(Self {
            domain,
            ids,
            utterances,
            speaker_labels,
            hidden_labels: hidden_labels.map(HiddenLabels),
        })
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.utterances.first().map_or(0, Vec::len)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn utterances(&self) -> &[Vec<f64>] {
        &self.utterances
    }

    pub fn utterance(&self, index: usize) -> Result<&[f64]> {
        self.utterances
            .get(index)
            .map(Vec::as_slice)
            .ok_or(Error::IndexOutOfRange {
                index,
                len: self.len(),
            })
    }

    pub fn speaker_labels(&self) -> Option<&[usize]> {
        self.speaker_labels.as_deref()
    }

    /// Number of classes in the visible labels (0 when unlabeled).
    pub fn num_classes(&self) -> usize {
        self.speaker_labels
            .as_deref()
            .map_or(0, |l| l.iter().max().map_or(0, |m| m + 1))
    }

    pub fn has_hidden_labels(&self) -> bool {
        self.hidden_labels.is_some()
    }

    pub fn hidden_labels(&self) -> Option<&HiddenLabels> {
        self.hidden_labels.as_ref()
    }

    /// Separates the evaluation-only labels from the trainable view.
    pub fn split_hidden(mut self) -> (SpeakerDataset, Option<HiddenLabels>) {
        let hidden = self.hidden_labels.take();
        (self, hidden)
    }

    /// Training operations call this before touching a dataset.
    pub fn ensure_no_hidden(&self, operation: &'static str) -> Result<()> {
        if self.hidden_labels.is_some() {
            Err(Error::HiddenLabelsPresent(operation))
        } else {
            Ok(())
        }
    }

    /// Same utterances with `labels` as the visible speaker labels.
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<SpeakerDataset> {
        SpeakerDataset::new(
            self.domain,
            self.ids.clone(),
            self.utterances.clone(),
            Some(labels),
            self.hidden_labels.as_ref().map(|h| h.0.clone()),
        )
    }

    /// Labels used for trial construction: visible labels if present,
    /// otherwise the hidden ones.
    pub(crate) fn ground_truth(&self) -> Option<&[usize]> {
        self.speaker_labels
            .as_deref()
            .or(self.hidden_labels.as_ref().map(HiddenLabels::as_slice))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::pipeline::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "SPKDATA v1 n={} d={} domain={}",
            self.len(),
            self.dim(),
            self.domain.as_str()
        );
        let label = |v: Option<usize>| v.map_or_else(|| "-".to_string(), |l| l.to_string());
        for (i, u) in self.utterances.iter().enumerate() {
            out.push_str(&self.ids[i]);
            out.push(',');
            out.push_str(&label(self.speaker_labels.as_ref().map(|l| l[i])));
            out.push(',');
            out.push_str(&label(self.hidden_labels.as_ref().map(|h| h.0[i])));
            for x in u {
                let _ = write!(out, ",{x:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn read(path: &Path) -> Result<SpeakerDataset> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<SpeakerDataset> {
        const KIND: &str = "dataset";
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::format(KIND, "missing header"))?;
        let fields = parse_header(header, "SPKDATA", KIND)?;
        let n: usize = header_value(&fields, "n", KIND)?;
        let d: usize = header_value(&fields, "d", KIND)?;
        let domain = match fields.iter().find(|(k, _)| k == "domain").map(|(_, v)| v.as_str()) {
            Some("source") => Domain::Source,
            Some("target") => Domain::Target,
            other => return Err(Error::format(KIND, format!("bad domain {other:?}"))),
        };
        let mut ids = Vec::with_capacity(n);
        let mut utts = Vec::with_capacity(n);
        let mut labels: Vec<Option<usize>> = Vec::with_capacity(n);
        let mut hidden: Vec<Option<usize>> = Vec::with_capacity(n);
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let bad = |m: &str| Error::format(KIND, format!("line {}: {m}", lineno + 2));
            let id = parts.next().ok_or_else(|| bad("missing id"))?;
            let parse_label = |s: Option<&str>| -> Result<Option<usize>> {
                match s {
                    Some("-") => Ok(None),
                    Some(v) => v.parse().map(Some).map_err(|_| bad("bad label")),
                    None => Err(bad("missing label")),
                }
            };
            labels.push(parse_label(parts.next())?);
            hidden.push(parse_label(parts.next())?);
            let row = parts
                .map(|p| p.parse::<f64>().map_err(|_| bad("bad float")))
                .collect::<Result<Vec<_>>>()?;
            if row.len() != d {
                return Err(bad(&format!("expected {d} features, found {}", row.len())));
            }
            ids.push(id.to_string());
            utts.push(row);
        }
        if utts.len() != n {
            return Err(Error::format(
                KIND,
                format!("header says n={n}, found {} rows", utts.len()),
            ));
        }
        let collect = |v: Vec<Option<usize>>, what: &str| -> Result<Option<Vec<usize>>> {
            if v.iter().all(Option::is_none) {
                Ok(None)
            } else if v.iter().all(Option::is_some) {
                Ok(Some(v.into_iter().map(Option::unwrap).collect()))
            } else {
                Err(Error::format(KIND, format!("{what} column partially missing")))
            }
        };
        SpeakerDataset::new(
            domain,
            ids,
            utts,
            collect(labels, "label")?,
            collect(hidden, "hidden label")?,
        )
    }
}

pub(crate) fn parse_header(
    header: &str,
    magic: &str,
    kind: &'static str,
) -> Result<Vec<(String, String)>> {
    let mut tokens = header.split_whitespace();
    if tokens.next() != Some(magic) || tokens.next() != Some("v1") {
        return Err(Error::format(kind, format!("bad header {header:?}")));
    }
    tokens
        .map(|t| {
            t.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::format(kind, format!("bad header field {t:?}")))
        })
        .collect()
}

pub(crate) fn header_value<T: std::str::FromStr>(
    fields: &[(String, String)],
    key: &str,
    kind: &'static str,
) -> Result<T> {
    fields
        .iter()
        .find(|(k, _)| k == key)
        .and_then(|(_, v)| v.parse().ok())
        .ok_or_else(|| Error::format(kind, format!("missing or invalid header field `{key}`")))
}

/// Fixed affine map applied to every utterance of a domain.
#[derive(Debug, Clone, PartialEq)]
pub enum DomainShift {
    Identity,
    Affine { matrix: Matrix, offset: Vec<f64> },
}

impl DomainShift {
    /// `U diag(s) V^T x + offset` with random orthogonal `U`, `V`, singular
    /// values uniform in `singular_range`, and an offset of norm
    /// `offset_norm` in a random direction.
    pub fn random<R: Rng>(
        dim: usize,
        singular_range: (f64, f64),
        offset_norm: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let (lo, hi) = singular_range;
        if dim == 0 || !(lo > 0.0 && lo <= hi) {
            return Err(Error::InvalidConfig(format!(
                "domain shift needs dim > 0 and 0 < lo <= hi, got dim={dim} range=({lo}, {hi})"
            )));
        }
        let u = random_orthogonal(dim, rng);
        let v = random_orthogonal(dim, rng);
        let mut scaled = u;
        for c in 0..dim {
            let s = rng.random_range(lo..=hi);
            for r in 0..dim {
                let x = scaled.get(r, c) * s;
                scaled.set(r, c, x);
            }
        }
        let matrix = scaled.matmul(&v.transpose());
        let dir = gaussian_vec(dim, rng);
        let offset = match linalg::normalized(&dir) {
            Some(unit) => unit.iter().map(|x| x * offset_norm).collect(),
            None => vec![0.0; dim],
        };
        Ok(DomainShift::Affine { matrix, offset })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            DomainShift::Identity => x.to_vec(),
            DomainShift::Affine { matrix, offset } => matrix
                .mul_vec(x)
                .into_iter()
                .zip(offset)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    fn dim(&self) -> Option<usize> {
        match self {
            DomainShift::Identity => None,
            DomainShift::Affine { matrix, .. } => Some(matrix.cols),
        }
    }
}

fn gaussian_vec<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Haar-ish random orthogonal matrix via Gram-Schmidt on gaussian columns.
fn random_orthogonal<R: Rng>(dim: usize, rng: &mut R) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while cols.len() < dim {
        let mut v = gaussian_vec(dim, rng);
        for _ in 0..2 {
            for c in &cols {
                let p = linalg::dot(&v, c);
                for (x, y) in v.iter_mut().zip(c) {
                    *x -= p * y;
                }
            }
        }
        if let Some(u) = linalg::normalized(&v) {
            cols.push(u);
        }
    }
    let mut m = Matrix::zeros(dim, dim);
    for (c, col) in cols.iter().enumerate() {
        for (r, x) in col.iter().enumerate() {
            m.set(r, c, *x);
        }
    }
    m
}

/// Stochastic view generator standing in for segment sampling plus channel
/// and noise augmentation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Augmentation {
    pub sigma: f64,
    pub channel_scale_range: (f64, f64),
}

impl Augmentation {
    pub const NONE: Augmentation = Augmentation {
        sigma: 0.0,
        channel_scale_range: (1.0, 1.0),
    };

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.channel_scale_range;
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidConfig("aug_sigma must be >= 0".into()));
        }
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "channel scale range must satisfy 0 < lo <= hi, got ({lo}, {hi})"
            )));
        }
        Ok(())
    }

    pub fn is_degenerate(&self) -> bool {
        self.sigma == 0.0 && self.channel_scale_range == (1.0, 1.0)
    }

    /// One augmented view: an elementwise channel response drawn from the
    /// scale range, then additive gaussian noise.
    pub fn view<R: Rng>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        if self.is_degenerate() {
            return x.to_vec();
        }
        let (lo, hi) = self.channel_scale_range;
        x.iter()
            .map(|&v| {
                let scale = if lo == hi { lo } else { rng.random_range(lo..=hi) };
                let noise: f64 = if self.sigma > 0.0 {
                    self.sigma * Distribution::<f64>::sample(&StandardNormal, rng)
                } else {
                    0.0
                };
                v * scale + noise
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub domain: Domain,
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub d_in: usize,
    pub within_speaker_sigma: f64,
    pub domain_shift: DomainShift,
    pub augmentation: Augmentation,
    pub seed: u64,
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers == 0 || self.utts_per_speaker == 0 || self.d_in == 0 {
            return Err(Error::InvalidConfig(format!(
                "n_speakers, utts_per_speaker and d_in must be positive (got {}, {}, {})",
                self.n_speakers, self.utts_per_speaker, self.d_in
            )));
        }
        if !(self.within_speaker_sigma >= 0.0 && self.within_speaker_sigma.is_finite()) {
            return Err(Error::InvalidConfig(
                "within_speaker_sigma must be >= 0".into(),
            ));
        }
        if let Some(d) = self.domain_shift.dim() {
            if d != self.d_in {
                return Err(Error::DimensionMismatch {
                    expected: self.d_in,
                    found: d,
                });
            }
        }
        self.augmentation.validate()
    }
}

/// Unit-norm speaker prototypes for `cfg` (the same ones
/// [`generate_domain`] uses).
pub fn speaker_prototypes(cfg: &GenConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let mut rng = seeded(cfg.seed);
    Ok(draw_prototypes(cfg, &mut rng))
}

fn draw_prototypes<R: Rng>(cfg: &GenConfig, rng: &mut R) -> Vec<Vec<f64>> {
    (0..cfg.n_speakers)
        .map(|_| loop {
            if let Some(u) = linalg::normalized(&gaussian_vec(cfg.d_in, rng)) {
                break u;
            }
        })
        .collect()
}

pub fn generate_domain(cfg: &GenConfig) -> Result<SpeakerDataset> {
    cfg.validate()?;
    let mut rng = seeded(cfg.seed);
    let prototypes = draw_prototypes(cfg, &mut rng);
    let n = cfg.n_speakers * cfg.utts_per_speaker;
    let mut ids = Vec::with_capacity(n);
    let mut utts = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (spk, proto) in prototypes.iter().enumerate() {
        for _ in 0..cfg.utts_per_speaker {
            let clean: Vec<f64> = if cfg.within_speaker_sigma > 0.0 {
                proto
                    .iter()
                    .map(|p| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        p + cfg.within_speaker_sigma * z
                    })
                    .collect()
            } else {
                proto.clone()
            };
            ids.push(format!("{}-{:06}", cfg.domain.id_prefix(), utts.len()));
            utts.push(cfg.domain_shift.apply(&clean));
            labels.push(spk);
        }
    }
    match cfg.domain {
        Domain::Source => SpeakerDataset::new(cfg.domain, ids, utts, Some(labels), None),
        Domain::Target => SpeakerDataset::new(cfg.domain, ids, utts, None, Some(labels)),
    }
}

/// Two augmented views of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentPair {
    pub view_a: Vec<f64>,
    pub view_b: Vec<f64>,
    pub source_index: usize,
}

impl SegmentPair {
    pub fn swapped(&self) -> SegmentPair {
        SegmentPair {
            view_a: self.view_b.clone(),
            view_b: self.view_a.clone(),
            source_index: self.source_index,
        }
    }
}

pub fn sample_segment_pair<R: Rng>(
    dataset: &SpeakerDataset,
    index: usize,
    aug: &Augmentation,
    rng: &mut R,
) -> Result<SegmentPair> {
    let utt = dataset.utterance(index)?;
    Ok(SegmentPair {
        view_a: aug.view(utt, rng),
        view_b: aug.view(utt, rng),
        source_index: index,
    })
}

/// Samples distinct same-speaker and different-speaker trials.
///
/// Pairs are unordered and never repeat; an utterance is never paired with
/// itself.
pub fn make_trials(
    dataset: &SpeakerDataset,
    n_target: usize,
    n_nontarget: usize,
    seed: u64,
) -> Result<TrialList> {
    let labels = dataset
        .ground_truth()
        .ok_or_else(|| Error::Labels("trial construction needs speaker labels".into()))?;
    let n = labels.len();
    let mut by_speaker: Vec<Vec<usize>> = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        if by_speaker.len() <= l {
            by_speaker.resize(l + 1, Vec::new());
        }
        by_speaker[l].push(i);
    }
    let available_target: usize = by_speaker.iter().map(|s| s.len() * s.len().saturating_sub(1) / 2).sum();
    let total_pairs = n * n.saturating_sub(1) / 2;
    let available_nontarget = total_pairs - available_target;
    if n_target > available_target || n_nontarget > available_nontarget {
        return Err(Error::Unsatisfiable(format!(
            "requested {n_target} target / {n_nontarget} nontarget trials, \
             only {available_target} / {available_nontarget} distinct pairs exist"
        )));
    }
    let mut rng = seeded(seed);
    let target = sample_pairs(n, n_target, available_target, &mut rng, |i, j| labels[i] == labels[j]);
    let nontarget = sample_pairs(n, n_nontarget, available_nontarget, &mut rng, |i, j| {
        labels[i] != labels[j]
    });
    let mut pairs = Vec::with_capacity(n_target + n_nontarget);
    let mut is_target = Vec::with_capacity(n_target + n_nontarget);
    for (i, j) in target {
        pairs.push((dataset.ids[i].clone(), dataset.ids[j].clone()));
        is_target.push(true);
    }
    for (i, j) in nontarget {
        pairs.push((dataset.ids[i].clone(), dataset.ids[j].clone()));
        is_target.push(false);
    }
    TrialList::new(pairs, is_target)
}

fn sample_pairs<R: Rng>(
    n: usize,
    count: usize,
    available: usize,
    rng: &mut R,
    accept: impl Fn(usize, usize) -> bool,
) -> Vec<(usize, usize)> {
    if count == 0 {
        return Vec::new();
    }
    if count * 2 > available {
        let mut all: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| accept(i, j))
            .collect();
        all.shuffle(rng);
        all.truncate(count);
        return all;
    }
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        if i == j || !accept(i, j) {
            continue;
        }
        let key = (i.min(j), i.max(j));
        if seen.insert(key) {
            out.push(key);
        }
    }
    out
}

/// Writes the trial list as `<id_a> <id_b> <target|nontarget>` lines.
pub fn write_trials(trials: &TrialList, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for ((a, b), t) in trials.pairs.iter().zip(&trials.is_target) {
        let _ = writeln!(buf, "{a} {b} {}", if *t { "target" } else { "nontarget" });
    }
    crate::pipeline::write_atomic(path, &buf)
}

pub fn read_trials(path: &Path) -> Result<TrialList> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    let mut flags = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let flag = match parts.as_slice() {
            [_, _, "target"] => true,
            [_, _, "nontarget"] => false,
            _ => {
                return Err(Error::format(
                    "trial list",
                    format!("line {}: expected `<id_a> <id_b> <target|nontarget>`", i + 1),
                ))
            }
        };
        pairs.push((parts[0].to_string(), parts[1].to_string()));
        flags.push(flag);
    }
    TrialList::new(pairs, flags)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn cfg(domain: Domain, n_speakers: usize, utts: usize, d: usize, sigma: f64) -> GenConfig {
        GenConfig {
            domain,
            n_speakers,
            utts_per_speaker: utts,
            d_in: d,
            within_speaker_sigma: sigma,
            domain_shift: DomainShift::Identity,
            augmentation: Augmentation {
                sigma: 0.1,
                channel_scale_range: (0.8, 1.2),
            },
            seed: 11,
        }
    }

    #[test]
    fn zero_noise_utterances_equal_prototypes() {
        let c = cfg(Domain::Source, 4, 3, 8, 0.0);
        let ds = generate_domain(&c).unwrap();
        let protos = speaker_prototypes(&c).unwrap();
        let labels = ds.speaker_labels().unwrap();
        for (u, &l) in ds.utterances().iter().zip(labels) {
            assert_eq!(u, &protos[l]);
        }
        for p in &protos {
            assert!((linalg::norm(p) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let mut c = cfg(Domain::Target, 5, 4, 10, 0.2);
        c.domain_shift = DomainShift::random(10, (0.5, 2.0), 1.0, &mut seeded(3)).unwrap();
        let a = generate_domain(&c).unwrap();
        let b = generate_domain(&c).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_text(), b.to_text());
        assert!(a.speaker_labels().is_none());
        assert_eq!(a.hidden_labels().unwrap().len(), 20);
    }

    #[test]
    fn nearest_prototype_recovers_every_speaker() {
        // 16 speakers in 40 dimensions with sigma 0.05: the noise norm is about
        // 0.32 while prototypes sit roughly 1.4 apart.
        let c = cfg(Domain::Source, 16, 20, 40, 0.05);
        let ds = generate_domain(&c).unwrap();
        let protos = speaker_prototypes(&c).unwrap();
        let labels = ds.speaker_labels().unwrap();
        let correct = ds
            .utterances()
            .iter()
            .zip(labels)
            .filter(|(u, &l)| {
                let best = (0..protos.len())
                    .min_by(|&a, &b| {
                        linalg::sq_dist(u, &protos[a]).total_cmp(&linalg::sq_dist(u, &protos[b]))
                    })
                    .unwrap();
                best == l
            })
            .count();
        assert_eq!(correct, ds.len());
    }

    #[test]
    fn domain_shift_singular_values_are_bounded() {
        let shift = DomainShift::random(6, (0.5, 2.0), 3.0, &mut seeded(9)).unwrap();
        let DomainShift::Affine { matrix, offset } = &shift else {
            panic!()
        };
        assert!((linalg::norm(offset) - 3.0).abs() < 1e-12);
        // Rayleigh quotients of M^T M lie inside [0.25, 4].
        let mtm = matrix.transpose().matmul(matrix);
        let mut rng = seeded(1);
        for _ in 0..200 {
            let x = gaussian_vec(6, &mut rng);
            let q = linalg::dot(&x, &mtm.mul_vec(&x)) / linalg::dot(&x, &x);
            assert!((0.25 - 1e-9..=4.0 + 1e-9).contains(&q), "{q}");
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = cfg(Domain::Source, 0, 3, 8, 0.1);
        assert!(matches!(generate_domain(&c), Err(Error::InvalidConfig(_))));
        c.n_speakers = 2;
        c.within_speaker_sigma = -1.0;
        assert!(generate_domain(&c).is_err());
        c.within_speaker_sigma = 0.1;
        c.augmentation.channel_scale_range = (0.0, 1.0);
        assert!(generate_domain(&c).is_err());
    }

    #[test]
    fn degenerate_augmentation_returns_the_utterance() {
        let ds = generate_domain(&cfg(Domain::Source, 2, 2, 5, 0.1)).unwrap();
        let pair = sample_segment_pair(&ds, 3, &Augmentation::NONE, &mut seeded(0)).unwrap();
        assert_eq!(pair.view_a, ds.utterances()[3]);
        assert_eq!(pair.view_b, ds.utterances()[3]);
        assert_eq!(pair.source_index, 3);
        assert!(matches!(
            sample_segment_pair(&ds, 4, &Augmentation::NONE, &mut seeded(0)),
            Err(Error::IndexOutOfRange { index: 4, len: 4 })
        ));
    }

    #[test]
    fn segment_pairs_are_reproducible_and_distinct() {
        let ds = generate_domain(&cfg(Domain::Source, 2, 2, 5, 0.1)).unwrap();
        let aug = Augmentation {
            sigma: 0.1,
            channel_scale_range: (0.8, 1.2),
        };
        let a = sample_segment_pair(&ds, 1, &aug, &mut seeded(5)).unwrap();
        let b = sample_segment_pair(&ds, 1, &aug, &mut seeded(5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.view_a, a.view_b);
        assert_eq!(a.view_a.len(), 5);
    }

    #[test]
    fn augmentation_noise_matches_closed_form_variance() {
        // E|view - u|^2 = d * sigma^2 for unit channel scale.
        let d = 40;
        let ds = generate_domain(&cfg(Domain::Source, 1, 1, d, 0.0)).unwrap();
        let aug = Augmentation {
            sigma: 0.1,
            channel_scale_range: (1.0, 1.0),
        };
        let mut rng = seeded(2024);
        let draws = 10_000;
        let mut total = 0.0;
        for _ in 0..draws {
            let v = aug.view(&ds.utterances()[0], &mut rng);
            total += linalg::sq_dist(&v, &ds.utterances()[0]);
        }
        let mean = total / draws as f64;
        let expected = d as f64 * 0.01;
        assert!(((mean - expected) / expected).abs() < 0.05, "{mean} vs {expected}");
    }

    #[test]
    fn trials_have_requested_composition() {
        let ds = generate_domain(&cfg(Domain::Target, 6, 5, 4, 0.1)).unwrap();
        // 60 same-speaker pairs exist.
        let t = make_trials(&ds, 50, 100, 3).unwrap();
        assert_eq!(t.len(), 150);
        assert_eq!(t.is_target.iter().filter(|&&x| x).count(), 50);

        let only_non = make_trials(&ds, 0, 50, 3).unwrap();
        assert!(only_non.is_target.iter().all(|&x| !x));
        assert_eq!(only_non.len(), 50);
    }

    #[test]
    fn trial_flags_agree_with_labels_exhaustively() {
        let ds = generate_domain(&cfg(Domain::Target, 5, 4, 3, 0.1)).unwrap();
        // 30 same-speaker pairs exist, so asking for 25 exercises the
        // enumerate-and-shuffle path and the rejection path for nontargets.
        let t = make_trials(&ds, 25, 40, 8).unwrap();
        let labels = ds.hidden_labels().unwrap().as_slice();
        let index: std::collections::HashMap<&str, usize> =
            ds.ids().iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let mut seen = HashSet::new();
        for ((a, b), &flag) in t.pairs.iter().zip(&t.is_target) {
            let (i, j) = (index[a.as_str()], index[b.as_str()]);
            assert_ne!(i, j);
            assert_eq!(labels[i] == labels[j], flag);
            assert!(seen.insert((i.min(j), i.max(j))));
        }
    }

    #[test]
    fn unsatisfiable_trial_counts_error() {
        let ds = generate_domain(&cfg(Domain::Target, 3, 2, 3, 0.1)).unwrap();
        assert!(matches!(make_trials(&ds, 4, 0, 1), Err(Error::Unsatisfiable(_))));
        assert!(make_trials(&ds, 3, 12, 1).is_ok());
    }

    #[test]
    fn dataset_text_round_trip_is_exact() {
        let mut c = cfg(Domain::Target, 3, 2, 4, 0.3);
        c.domain_shift = DomainShift::random(4, (0.5, 2.0), 2.0, &mut seeded(4)).unwrap();
        let ds = generate_domain(&c).unwrap();
        let text = ds.to_text();
        assert!(text.starts_with("SPKDATA v1 n=6 d=4 domain=target\n"));
        let back = SpeakerDataset::from_text(&text).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn malformed_dataset_text_is_rejected() {
        assert!(SpeakerDataset::from_text("").is_err());
        assert!(SpeakerDataset::from_text("SPKDATA v2 n=0 d=1 domain=source\n").is_err());
        let short = "SPKDATA v1 n=1 d=2 domain=source\nsrc-0,0,-,1.0\n";
        assert!(SpeakerDataset::from_text(short).is_err());
        let gap = "SPKDATA v1 n=1 d=1 domain=source\nsrc-0,1,-,1.0\n";
        assert!(matches!(SpeakerDataset::from_text(gap), Err(Error::Labels(_))));
    }

    #[test]
    fn hidden_labels_block_training_use() {
        let ds = generate_domain(&cfg(Domain::Target, 2, 2, 3, 0.1)).unwrap();
        assert!(matches!(
            ds.ensure_no_hidden("pretrain"),
            Err(Error::HiddenLabelsPresent("pretrain"))
        ));
        let (visible, hidden) = ds.split_hidden();
        assert!(visible.ensure_no_hidden("pretrain").is_ok());
        assert_eq!(hidden.unwrap().len(), 4);
    }
}
