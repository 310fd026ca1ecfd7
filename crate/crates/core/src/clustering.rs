//! Spherical k-means on length-normalized embeddings.
//!
//! Points are assigned to the center with the highest cosine (ties go to
//! the lowest index), centers are normalized cluster means, and seeding is
//! k-means++ with `1 - cos` as the sampling weight. Clusters that end up
//! empty, or whose mean vanishes, are re-seeded with the worst-fitting
//! point.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{header_value, parse_header};
use crate::linalg::{self, MIN_NORM};
use crate::rng::seeded;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub n_init: usize,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 32,
            n_init: 5,
            max_iter: 100,
            tol: 1e-6,
        }
    }
}

impl KMeansConfig {
    pub fn with_k(self, k: usize) -> Self {
        Self { k, ..self }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    pub assignments: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    pub k: usize,
    /// `sum_i cos(e_i, c_{y_i})`
    pub objective: f64,
    pub iterations_run: usize,
    /// Objective after every assign+update round of the winning restart.
    pub objective_history: Vec<f64>,
}

impl ClusterState {
    /// Rebuilds a state from stored assignments and centers, recomputing the
    /// objective on `embeddings`.
    pub fn from_parts(
        embeddings: &[Vec<f64>],
        assignments: Vec<usize>,
        centers: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if assignments.len() != embeddings.len() {
            return Err(Error::DimensionMismatch {
                expected: embeddings.len(),
                found: assignments.len(),
            });
        }
        if let Some(&bad) = assignments.iter().find(|&&a| a >= centers.len()) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: centers.len(),
            });
        }
        let objective = objective(embeddings, &assignments, &centers);
        Ok(Self {
            k: centers.len(),
            assignments,
            centers,
            objective,
            iterations_run: 0,
            objective_history: vec![objective],
        })
    }

    /// Cluster-state text file: header `CLUST v1 k=<K> d=<D> n=<N>`, K
    /// comma-separated center rows, then `<utterance_id>,<cluster>` lines.
    pub fn to_text(&self, ids: &[String]) -> Result<String> {
        if ids.len() != self.assignments.len() {
            return Err(Error::DimensionMismatch {
                expected: self.assignments.len(),
                found: ids.len(),
            });
        }
        let d = self.centers.first().map_or(0, Vec::len);
        let mut out = format!("CLUST v1 k={} d={} n={}\n", self.k, d, ids.len());
        for c in &self.centers {
            let row: Vec<String> = c.iter().map(|x| format!("{x:?}")).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        for (id, a) in ids.iter().zip(&self.assignments) {
            let _ = writeln!(out, "{id},{a}");
        }
        Ok(out)
    }

    pub fn write(&self, ids: &[String], path: &Path) -> Result<()> {
        crate::pipeline::write_atomic(path, self.to_text(ids)?.as_bytes())
    }
}

/// Parsed contents of a cluster-state file.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterFile {
    pub ids: Vec<String>,
    pub centers: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
}

impl ClusterFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        const KIND: &str = "cluster state";
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::format(KIND, "missing header"))?;
        let fields = parse_header(header, "CLUST", KIND)?;
        let k: usize = header_value(&fields, "k", KIND)?;
        let d: usize = header_value(&fields, "d", KIND)?;
        let n: usize = header_value(&fields, "n", KIND)?;
        let mut centers = Vec::with_capacity(k);
        for i in 0..k {
            let line = lines
                .next()
                .ok_or_else(|| Error::format(KIND, format!("missing center row {i}")))?;
            let row = line
                .split(',')
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::format(KIND, format!("bad center row {i}")))?;
            if row.len() != d {
                return Err(Error::format(KIND, format!("center row {i} has {} values", row.len())));
            }
            centers.push(row);
        }
        let mut ids = Vec::with_capacity(n);
        let mut assignments = Vec::with_capacity(n);
        for line in lines.filter(|l| !l.is_empty()) {
            let (id, a) = line
                .rsplit_once(',')
                .ok_or_else(|| Error::format(KIND, format!("bad assignment line {line:?}")))?;
            let a: usize = a
                .parse()
                .map_err(|_| Error::format(KIND, format!("bad cluster index in {line:?}")))?;
            if a >= k {
                return Err(Error::IndexOutOfRange { index: a, len: k });
            }
            ids.push(id.to_string());
            assignments.push(a);
        }
        if ids.len() != n {
            return Err(Error::format(KIND, format!("header says n={n}, found {}", ids.len())));
        }
        Ok(Self {
            ids,
            centers,
            assignments,
        })
    }
}

fn check_unit(points: &[Vec<f64>], what: &str) -> Result<usize> {
    let d = points.first().map_or(0, Vec::len);
    for p in points {
        if p.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: p.len(),
            });
        }
        if !linalg::is_unit(p) {
            return Err(Error::NotNormalized(format!(
                "{what} has norm {}",
                linalg::norm(p)
            )));
        }
    }
    Ok(d)
}

/// `y_i = argmax_k cos(e_i, c_k)`; ties resolve to the lowest `k`.
pub fn assign(embeddings: &[Vec<f64>], centers: &[Vec<f64>]) -> Result<Vec<usize>> {
    if centers.is_empty() {
        return Err(Error::Empty("assignment needs at least one center".into()));
    }
    Ok(embeddings
        .iter()
        .map(|e| {
            let mut best = 0;
            let mut best_cos = f64::NEG_INFINITY;
            for (k, c) in centers.iter().enumerate() {
                let cos = linalg::dot(e, c);
                if cos > best_cos {
                    best = k;
                    best_cos = cos;
                }
            }
            best
        })
        .collect())
}

pub fn objective(embeddings: &[Vec<f64>], assignments: &[usize], centers: &[Vec<f64>]) -> f64 {
    embeddings
        .iter()
        .zip(assignments)
        .map(|(e, &a)| linalg::dot(e, &centers[a]))
        .sum()
}

/// Normalized cluster means. Empty clusters and clusters whose mean
/// vanishes are repaired in index order: the point with the lowest cosine to
/// its own center (points in a vanished cluster count as worst) becomes the
/// new center and moves into that cluster. Each point seeds at most once.
/// `assignments` is updated in place when a repair moves a point.
pub fn update_centers(
    embeddings: &[Vec<f64>],
    assignments: &mut [usize],
    k: usize,
) -> Result<Vec<Vec<f64>>> {
    if k == 0 {
        return Err(Error::Empty("k must be positive".into()));
    }
    if assignments.len() != embeddings.len() {
        return Err(Error::DimensionMismatch {
            expected: embeddings.len(),
            found: assignments.len(),
        });
    }
    if let Some(&bad) = assignments.iter().find(|&&a| a >= k) {
        return Err(Error::IndexOutOfRange { index: bad, len: k });
    }
    let d = embeddings.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (e, &a) in embeddings.iter().zip(assignments.iter()) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(e) {
            *s += x;
        }
    }
    let mut centers: Vec<Option<Vec<f64>>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c == 0 { None } else { linalg::normalized(s) })
        .collect();
    if centers.iter().all(Option::is_some) {
        return Ok(centers.into_iter().map(Option::unwrap).collect());
    }
    if counts.iter().all(|&c| c == 0) {
        return Err(Error::Empty("all clusters are empty".into()));
    }

    let mut used = vec![false; embeddings.len()];
    let fit = |i: usize, centers: &[Option<Vec<f64>>], a: usize| -> f64 {
        match &centers[a] {
            Some(c) => linalg::dot(&embeddings[i], c),
            None => f64::NEG_INFINITY,
        }
    };
    let mut guard = 0;
    while let Some(dead) = centers.iter().position(Option::is_none) {
        guard += 1;
        if guard > 4 * k + embeddings.len() {
            return Err(Error::Degenerate("empty-cluster repair did not terminate".into()));
        }
        let mut pick: Option<(usize, f64)> = None;
        for i in 0..embeddings.len() {
            if used[i] {
                continue;
            }
            let f = fit(i, &centers, assignments[i]);
            if pick.is_none_or(|(_, best)| f < best) {
                pick = Some((i, f));
            }
        }
        let Some((p, _)) = pick else {
            return Err(Error::Degenerate(
                "not enough distinct points to re-seed empty clusters".into(),
            ));
        };
        used[p] = true;
        let former = assignments[p];
        assignments[p] = dead;
        counts[former] -= 1;
        counts[dead] += 1;
        for (s, x) in sums[former].iter_mut().zip(&embeddings[p]) {
            *s -= x;
        }
        for (s, x) in sums[dead].iter_mut().zip(&embeddings[p]) {
            *s += x;
        }
        centers[dead] = linalg::normalized(&sums[dead]);
        if centers[dead].is_none() {
            centers[dead] = Some(embeddings[p].clone());
        }
        if former != dead {
            centers[former] = if counts[former] == 0 {
                None
            } else {
                linalg::normalized(&sums[former])
            };
        }
    }
    Ok(centers.into_iter().map(Option::unwrap).collect())
}

/// k-means++ seeding with `1 - cos` weights.
fn seed_centers<R: Rng>(embeddings: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = embeddings.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centers = vec![embeddings[first].clone()];
    let mut weight: Vec<f64> = embeddings
        .iter()
        .map(|e| (1.0 - linalg::dot(e, &centers[0])).max(0.0))
        .collect();
    while centers.len() < k {
        let total: f64 = weight
            .iter()
            .zip(&chosen)
            .filter(|(_, &c)| !c)
            .map(|(w, _)| w)
            .sum();
        let next = if total > MIN_NORM {
            let mut target = rng.random_range(0.0..total);
            let mut pick = None;
            for i in 0..n {
                if chosen[i] {
                    continue;
                }
                pick = Some(i);
                if target < weight[i] {
                    break;
                }
                target -= weight[i];
            }
            pick.unwrap()
        } else {
            // Every remaining point coincides with a center.
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[next] = true;
        let c = embeddings[next].clone();
        for (w, e) in weight.iter_mut().zip(embeddings) {
            *w = w.min((1.0 - linalg::dot(e, &c)).max(0.0));
        }
        centers.push(c);
    }
    centers
}

fn single_run<R: Rng>(
    embeddings: &[Vec<f64>],
    cfg: &KMeansConfig,
    rng: &mut R,
) -> Result<ClusterState> {
    let mut centers = seed_centers(embeddings, cfg.k, rng);
    let mut assignments = assign(embeddings, &centers)?;
    centers = update_centers(embeddings, &mut assignments, cfg.k)?;
    let mut obj = objective(embeddings, &assignments, &centers);
    let mut history = vec![obj];
    let mut iterations = 1;
    while iterations < cfg.max_iter {
        let mut next = assign(embeddings, &centers)?;
        if next == assignments {
            break;
        }
        let next_centers = update_centers(embeddings, &mut next, cfg.k)?;
        let next_obj = objective(embeddings, &next, &next_centers);
        iterations += 1;
        let stalled = (next_obj - obj).abs() < cfg.tol;
        assignments = next;
        centers = next_centers;
        obj = next_obj;
        history.push(obj);
        if stalled {
            break;
        }
    }
    Ok(ClusterState {
        assignments,
        centers,
        k: cfg.k,
        objective: obj,
        iterations_run: iterations,
        objective_history: history,
    })
}

/// Best-of-`n_init` spherical k-means.
pub fn kmeans_cosine(embeddings: &[Vec<f64>], cfg: &KMeansConfig, seed: u64) -> Result<ClusterState> {
    if cfg.k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if cfg.k > embeddings.len() {
        return Err(Error::Unsatisfiable(format!(
            "k = {} exceeds the number of points ({})",
            cfg.k,
            embeddings.len()
        )));
    }
    if cfg.n_init == 0 || cfg.max_iter == 0 || !(cfg.tol >= 0.0) {
        return Err(Error::InvalidConfig(
            "n_init and max_iter must be positive and tol non-negative".into(),
        ));
    }
    check_unit(embeddings, "embedding")?;
    let mut rng = seeded(seed);
    let mut best: Option<ClusterState> = None;
    for _ in 0..cfg.n_init {
        let run = single_run(embeddings, cfg, &mut rng)?;
        if best.as_ref().is_none_or(|b| run.objective > b.objective) {
            best = Some(run);
        }
    }
    Ok(best.unwrap())
}

/// Assignments renumbered to `0..K'` over the nonempty clusters,
/// preserving the order of cluster indices.
pub fn pseudo_labels(state: &ClusterState) -> Vec<usize> {
    let mut map = vec![usize::MAX; state.k.max(1 + state.assignments.iter().copied().max().unwrap_or(0))];
    for &a in &state.assignments {
        map[a] = 0;
    }
    let mut next = 0;
    for m in map.iter_mut() {
        if *m == 0 {
            *m = next;
            next += 1;
        }
    }
    state.assignments.iter().map(|&a| map[a]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn unit_points(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = seeded(seed);
        (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                linalg::normalized(&v).unwrap()
            })
            .collect()
    }

    fn state(assignments: Vec<usize>, k: usize) -> ClusterState {
        ClusterState {
            assignments,
            centers: vec![vec![1.0]; k],
            k,
            objective: 0.0,
            iterations_run: 0,
            objective_history: vec![],
        }
    }

    #[test]
    fn k_equals_n_gives_singletons() {
        let pts = unit_points(7, 3, 1);
        let s = kmeans_cosine(&pts, &KMeansConfig { k: 7, ..Default::default() }, 3).unwrap();
        assert!((s.objective - 7.0).abs() < 1e-12);
        let mut seen = s.assignments.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 7);
    }

    #[test]
    fn k_one_center_is_normalized_mean() {
        let pts = unit_points(9, 4, 2);
        let s = kmeans_cosine(&pts, &KMeansConfig { k: 1, ..Default::default() }, 0).unwrap();
        let mut mean = vec![0.0; 4];
        for p in &pts {
            for (m, x) in mean.iter_mut().zip(p) {
                *m += x / 9.0;
            }
        }
        let expected = linalg::normalized(&mean).unwrap();
        for (a, b) in s.centers[0].iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(s.assignments.iter().all(|&a| a == 0));
    }

    #[test]
    fn assign_ties_and_exact_matches() {
        let centers = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0], vec![0.0, 1.0]];
        let pts = vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, -1.0]];
        assert_eq!(assign(&pts, &centers).unwrap(), vec![1, 0, 2]);
        assert!(matches!(assign(&pts, &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn assign_matches_linear_scan() {
        let pts = unit_points(50, 5, 10);
        let centers = unit_points(6, 5, 11);
        let got = assign(&pts, &centers).unwrap();
        for (p, g) in pts.iter().zip(got) {
            let scores: Vec<f64> = centers.iter().map(|c| linalg::dot(p, c)).collect();
            let max = scores.iter().cloned().fold(f64::MIN, f64::max);
            let first = scores.iter().position(|&s| s == max).unwrap();
            assert_eq!(g, first);
        }
    }

    #[test]
    fn update_single_point_cluster() {
        let pts = vec![vec![0.6, 0.8], vec![1.0, 0.0], vec![0.0, 1.0]];
        let mut a = vec![0, 1, 1];
        let c = update_centers(&pts, &mut a, 2).unwrap();
        assert_eq!(c[0], vec![0.6, 0.8]);
        assert_eq!(a, vec![0, 1, 1]);
    }

    #[test]
    fn update_matches_mean_then_normalize() {
        let pts = unit_points(30, 4, 12);
        let mut a: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let c = update_centers(&pts, &mut a, 3).unwrap();
        for k in 0..3 {
            let mut s = [0.0; 4];
            for (p, _) in pts.iter().zip(&a).filter(|(_, &x)| x == k) {
                for j in 0..4 {
                    s[j] += p[j];
                }
            }
            let n = s.iter().map(|x| x * x).sum::<f64>().sqrt();
            for j in 0..4 {
                assert!((c[k][j] - s[j] / n).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn antipodal_cluster_is_repaired() {
        let pts = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0]];
        let mut a = vec![0, 0, 1];
        let c = update_centers(&pts, &mut a, 2).unwrap();
        for center in &c {
            assert!((linalg::norm(center) - 1.0).abs() < 1e-12);
        }
        // The first point of the vanished cluster seeds it again.
        assert_eq!(c[0], vec![1.0, 0.0]);
        assert_eq!(a, vec![0, 0, 1]);
    }

    #[test]
    fn empty_cluster_takes_the_worst_fitting_point() {
        let pts = vec![vec![1.0, 0.0], vec![0.8, 0.6], vec![0.0, 1.0]];
        let mut a = vec![0, 0, 0];
        let c = update_centers(&pts, &mut a, 2).unwrap();
        // The mean direction is (0.75, 0.66); point 2 fits it worst.
        assert_eq!(a, vec![0, 0, 1]);
        assert_eq!(c[1], vec![0.0, 1.0]);
        assert!(c.iter().all(|x| (linalg::norm(x) - 1.0).abs() < 1e-12));
    }

    #[test]
    fn kmeans_rejects_bad_input() {
        let pts = unit_points(3, 2, 4);
        let cfg = KMeansConfig { k: 4, ..Default::default() };
        assert!(matches!(kmeans_cosine(&pts, &cfg, 0), Err(Error::Unsatisfiable(_))));
        let raw = vec![vec![2.0, 0.0], vec![0.0, 1.0]];
        assert!(matches!(
            kmeans_cosine(&raw, &KMeansConfig { k: 1, ..Default::default() }, 0),
            Err(Error::NotNormalized(_))
        ));
    }

    #[test]
    fn objective_never_decreases_and_result_is_fixed_point() {
        for seed in 0..20 {
            let pts = unit_points(60, 3, 100 + seed);
            let s = kmeans_cosine(&pts, &KMeansConfig { k: 5, n_init: 3, ..Default::default() }, seed)
                .unwrap();
            for w in s.objective_history.windows(2) {
                assert!(w[1] >= w[0] - 1e-12, "{w:?}");
            }
            let mut again = assign(&pts, &s.centers).unwrap();
            assert_eq!(again, s.assignments);
            let c = update_centers(&pts, &mut again, 5).unwrap();
            assert_eq!(c, s.centers);
            for c in &s.centers {
                assert!((linalg::norm(c) - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn kmeans_is_deterministic_and_scale_invariant() {
        let pts = unit_points(40, 4, 7);
        let cfg = KMeansConfig { k: 4, ..Default::default() };
        let a = kmeans_cosine(&pts, &cfg, 99).unwrap();
        let b = kmeans_cosine(&pts, &cfg, 99).unwrap();
        assert_eq!(a, b);
        let rescaled: Vec<Vec<f64>> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let s = 0.5 + i as f64;
                let v: Vec<f64> = p.iter().map(|x| x * s).collect();
                linalg::normalized(&v).unwrap()
            })
            .collect();
        let c = kmeans_cosine(&rescaled, &cfg, 99).unwrap();
        assert_eq!(c.assignments, a.assignments);
    }

    #[test]
    fn pseudo_labels_renumber_nonempty_clusters() {
        assert_eq!(pseudo_labels(&state(vec![0, 1, 2, 1], 3)), vec![0, 1, 2, 1]);
        assert_eq!(pseudo_labels(&state(vec![2, 0, 2, 0], 3)), vec![1, 0, 1, 0]);
        let a = vec![4, 1, 4, 3, 1, 1];
        let l = pseudo_labels(&state(a.clone(), 6));
        assert_eq!(l, vec![2, 0, 2, 1, 0, 0]);
        for i in 0..a.len() {
            for j in 0..a.len() {
                assert_eq!(a[i] == a[j], l[i] == l[j]);
            }
        }
    }

    #[test]
    fn cluster_file_round_trip_is_exact() {
        let pts = unit_points(12, 3, 5);
        let s = kmeans_cosine(&pts, &KMeansConfig { k: 3, ..Default::default() }, 1).unwrap();
        let ids: Vec<String> = (0..12).map(|i| format!("tgt-{i:06}")).collect();
        let text = s.to_text(&ids).unwrap();
        assert!(text.starts_with("CLUST v1 k=3 d=3 n=12\n"));
        let f = ClusterFile::from_text(&text).unwrap();
        assert_eq!(f.centers, s.centers);
        assert_eq!(f.assignments, s.assignments);
        assert_eq!(f.ids, ids);
        let rebuilt = ClusterState::from_parts(&pts, f.assignments, f.centers).unwrap();
        assert_eq!(rebuilt.to_text(&ids).unwrap(), text);
        assert!((rebuilt.objective - s.objective).abs() < 1e-12);
    }
}
