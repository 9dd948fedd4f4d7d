//! Seeded k-means over z-scored observations.
//!
//! Initialization is k-means++ driven by a ChaCha8 stream, so a given
//! `(data, k, seed)` always yields bitwise-identical centroids. Centroids
//! live in standardized space; [`ClusterModel::raw_centroid`] maps back.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::RepresentationError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansOptions {
    pub k: usize,
    pub seed: u64,
    pub tol: f64,
    pub max_iter: usize,
}

impl KMeansOptions {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            tol: 1e-6,
            max_iter: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelWire", into = "ModelWire")]
pub struct ClusterModel {
    k: usize,
    dim: usize,
    seed: u64,
    /// Row-major `k × dim`, standardized coordinates.
    centroids: Vec<f64>,
    inertia: f64,
    iterations: usize,
    converged: bool,
    feature_means: Vec<f64>,
    feature_scales: Vec<f64>,
    inertia_trace: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelWire {
    k: usize,
    seed: u64,
    inertia: f64,
    iterations: usize,
    converged: bool,
    feature_means: Vec<f64>,
    feature_scales: Vec<f64>,
    centroids: Vec<Vec<f64>>,
    #[serde(default)]
    inertia_trace: Vec<f64>,
}

impl From<ClusterModel> for ModelWire {
    fn from(m: ClusterModel) -> Self {
        ModelWire {
            k: m.k,
            seed: m.seed,
            inertia: m.inertia,
            iterations: m.iterations,
            converged: m.converged,
            centroids: m.centroids.chunks(m.dim.max(1)).map(<[f64]>::to_vec).collect(),
            feature_means: m.feature_means,
            feature_scales: m.feature_scales,
            inertia_trace: m.inertia_trace,
        }
    }
}

impl TryFrom<ModelWire> for ClusterModel {
    type Error = RepresentationError;

    fn try_from(w: ModelWire) -> Result<Self, Self::Error> {
        let dim = w.feature_means.len();
        if w.k == 0 || w.centroids.len() != w.k {
            return Err(RepresentationError::InvalidModel(format!(
                "expected {} centroid rows, found {}",
                w.k,
                w.centroids.len()
            )));
        }
        if w.feature_scales.len() != dim || w.centroids.iter().any(|c| c.len() != dim) {
            return Err(RepresentationError::InvalidModel("centroid and scale lengths disagree".into()));
        }
        let finite = |xs: &[f64]| xs.iter().all(|v| v.is_finite());
        if !finite(&w.feature_means) || !w.feature_scales.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(RepresentationError::InvalidModel("standardization parameters must be finite".into()));
        }
        let centroids = w.centroids.concat();
        if !finite(&centroids) {
            return Err(RepresentationError::InvalidModel("non-finite centroid".into()));
        }
        Ok(ClusterModel {
            k: w.k,
            dim,
            seed: w.seed,
            centroids,
            inertia: w.inertia,
            iterations: w.iterations,
            converged: w.converged,
            feature_means: w.feature_means,
            feature_scales: w.feature_scales,
            inertia_trace: w.inertia_trace,
        })
    }
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Sum of squared standardized distances to the assigned centroids.
    pub fn inertia(&self) -> f64 {
        self.inertia
    }

    /// Inertia after every assignment step, first to last.
    pub fn inertia_trace(&self) -> &[f64] {
        &self.inertia_trace
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn feature_means(&self) -> &[f64] {
        &self.feature_means
    }

    pub fn feature_scales(&self) -> &[f64] {
        &self.feature_scales
    }

    pub fn centroid(&self, k: usize) -> &[f64] {
        &self.centroids[k * self.dim..(k + 1) * self.dim]
    }

    pub fn raw_centroid(&self, k: usize) -> Vec<f64> {
        self.centroid(k)
            .iter()
            .zip(&self.feature_means)
            .zip(&self.feature_scales)
            .map(|((z, m), s)| z * s + m)
            .collect()
    }

    pub fn standardize(&self, obs: &[f64]) -> Result<Vec<f64>, RepresentationError> {
        if obs.len() != self.dim {
            return Err(RepresentationError::DimensionMismatch {
                expected: self.dim,
                found: obs.len(),
            });
        }
        Ok(standardize_row(obs, &self.feature_means, &self.feature_scales))
    }

    /// Nearest centroid to a raw observation, lowest index on ties.
    pub fn assign(&self, obs: &[f64]) -> Result<usize, RepresentationError> {
        let z = self.standardize(obs)?;
        Ok(nearest(&z, &self.centroids, self.dim).0)
    }

    /// Nearest centroid to an already standardized point.
    pub fn assign_standardized(&self, z: &[f64]) -> Result<usize, RepresentationError> {
        if z.len() != self.dim {
            return Err(RepresentationError::DimensionMismatch {
                expected: self.dim,
                found: z.len(),
            });
        }
        Ok(nearest(z, &self.centroids, self.dim).0)
    }
}

fn standardize_row(obs: &[f64], means: &[f64], scales: &[f64]) -> Vec<f64> {
    obs.iter().zip(means).zip(scales).map(|((x, m), s)| (x - m) / s).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(z: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let k = if dim == 0 { 1 } else { centroids.len() / dim };
    let mut best = (0, f64::INFINITY);
    for c in 0..k {
        let d = sq_dist(z, &centroids[c * dim..(c + 1) * dim]);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Column means and population standard deviations; constant columns get
/// scale 1.
fn standardization<P: AsRef<[f64]>>(points: &[P], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = points.len() as f64;
    let mut means = vec![0.0; dim];
    for p in points {
        for (m, x) in means.iter_mut().zip(p.as_ref()) {
            *m += x;
        }
    }
    means.iter_mut().for_each(|m| *m /= n);
    let mut vars = vec![0.0; dim];
    for p in points {
        for ((v, x), m) in vars.iter_mut().zip(p.as_ref()).zip(&means) {
            *v += (x - m) * (x - m);
        }
    }
    let scales = vars
        .iter()
        .map(|v| {
            let sd = (v / n).sqrt();
            if sd > 0.0 && sd.is_finite() {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (means, scales)
}

fn count_distinct(z: &[f64], dim: usize, cap: usize) -> usize {
    let mut seen = HashSet::new();
    for row in z.chunks(dim.max(1)) {
        seen.insert(row.iter().map(|v| v.to_bits()).collect::<Vec<u64>>());
        if seen.len() >= cap {
            break;
        }
    }
    seen.len()
}

fn kmeans_pp(z: &[f64], n: usize, dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(&z[first * dim..(first + 1) * dim]);
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(&z[i * dim..(i + 1) * dim], &centroids[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &d) in d2.iter().enumerate() {
            acc += d;
            if d > 0.0 && acc > target {
                pick = Some(i);
                break;
            }
        }
        // Rounding can leave `acc` just short of `target`.
        let pick = pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).expect("distinct points remain"));
        let c = &z[pick * dim..(pick + 1) * dim];
        centroids.extend_from_slice(c);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(&z[i * dim..(i + 1) * dim], c));
        }
    }
    centroids
}

/// Lloyd's algorithm from a k-means++ start.
pub fn fit_kmeans<P: AsRef<[f64]> + Sync>(points: &[P], opts: &KMeansOptions) -> Result<ClusterModel, RepresentationError> {
    let n = points.len();
    let k = opts.k;
    if k == 0 {
        return Err(RepresentationError::InvalidParameter("k must be at least 1".into()));
    }
    if !(opts.tol > 0.0) {
        return Err(RepresentationError::InvalidParameter(format!("tol must be positive, got {}", opts.tol)));
    }
    if k > n {
        return Err(RepresentationError::TooFewObservations { k, n });
    }
    let dim = points[0].as_ref().len();
    if let Some(p) = points.iter().find(|p| p.as_ref().len() != dim) {
        return Err(RepresentationError::DimensionMismatch {
            expected: dim,
            found: p.as_ref().len(),
        });
    }
    if points.iter().any(|p| p.as_ref().iter().any(|v| !v.is_finite())) {
        return Err(RepresentationError::InvalidParameter("observations must be finite".into()));
    }

    let (means, scales) = standardization(points, dim);
    let z: Vec<f64> = points
        .iter()
        .flat_map(|p| standardize_row(p.as_ref(), &means, &scales))
        .collect();
    if k > 1 {
        let distinct = if dim == 0 { 1 } else { count_distinct(&z, dim, k) };
        if distinct == 1 {
            return Err(RepresentationError::AllIdentical);
        }
        if distinct < k {
            return Err(RepresentationError::TooFewDistinct { k, distinct });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut centroids = kmeans_pp(&z, n, dim, k, &mut rng);
    let assign_all = |centroids: &[f64]| -> Vec<(usize, f64)> {
        (0..n)
            .into_par_iter()
            .map(|i| nearest(&z[i * dim..(i + 1) * dim], centroids, dim))
            .collect()
    };

    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut assignment = assign_all(&centroids);
    trace.push(assignment.iter().map(|a| a.1).sum());
    while iterations < opts.max_iter {
        iterations += 1;
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &(c, _)) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(&z[i * dim..(i + 1) * dim]) {
                *s += x;
            }
        }
        let mut next = centroids.clone();
        for c in 0..k {
            if counts[c] > 0 {
                for (nc, s) in next[c * dim..(c + 1) * dim].iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *nc = s / counts[c] as f64;
                }
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Reseed at the point farthest from its own (updated) centroid.
                let (far, _) = (0..n).fold((0, -1.0), |best, i| {
                    let own = assignment[i].0;
                    let d = sq_dist(&z[i * dim..(i + 1) * dim], &next[own * dim..(own + 1) * dim]);
                    if d > best.1 {
                        (i, d)
                    } else {
                        best
                    }
                });
                let p = z[far * dim..(far + 1) * dim].to_vec();
                next[c * dim..(c + 1) * dim].copy_from_slice(&p);
                counts[assignment[far].0] -= 1;
                assignment[far] = (c, 0.0);
                counts[c] = 1;
            }
        }
        let shift = (0..k)
            .map(|c| sq_dist(&centroids[c * dim..(c + 1) * dim], &next[c * dim..(c + 1) * dim]).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        assignment = assign_all(&centroids);
        trace.push(assignment.iter().map(|a| a.1).sum());
        if shift < opts.tol {
            converged = true;
            break;
        }
    }

    Ok(ClusterModel {
        k,
        dim,
        seed: opts.seed,
        centroids,
        inertia: *trace.last().expect("trace holds the initial inertia"),
        iterations,
        converged,
        feature_means: means,
        feature_scales: scales,
        inertia_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn clouds(seed: u64) -> (Vec<Vec<f64>>, [f64; 2], [f64; 2]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let mut pts = Vec::new();
        for i in 0..200 {
            let c: f64 = if i % 2 == 0 { 10.0 } else { -10.0 };
            pts.push(vec![c + noise.sample(&mut rng), c + noise.sample(&mut rng)]);
        }
        let mean_of = |sign: f64| -> [f64; 2] {
            let sel: Vec<&Vec<f64>> = pts.iter().filter(|p| p[0].signum() == sign).collect();
            let m = |j: usize| sel.iter().map(|p| p[j]).sum::<f64>() / sel.len() as f64;
            [m(0), m(1)]
        };
        let (hi, lo) = (mean_of(1.0), mean_of(-1.0));
        (pts, hi, lo)
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let pts = vec![vec![1.0, 10.0], vec![2.0, 10.0], vec![6.0, 10.0]];
        let m = fit_kmeans(&pts, &KMeansOptions::new(1, 0)).unwrap();
        let c = m.raw_centroid(0);
        assert!((c[0] - 3.0).abs() < 1e-12 && (c[1] - 10.0).abs() < 1e-12);
        // Standardized total variance: n per non-constant feature.
        assert!((m.inertia() - 3.0).abs() < 1e-12);
        assert_eq!(m.feature_scales()[1], 1.0);
    }

    #[test]
    fn separated_clouds_recover_means() {
        let (pts, hi, lo) = clouds(3);
        let m = fit_kmeans(&pts, &KMeansOptions::new(2, 11)).unwrap();
        let mut cs = [m.raw_centroid(0), m.raw_centroid(1)];
        cs.sort_by(|a, b| a[0].total_cmp(&b[0]));
        for j in 0..2 {
            assert!((cs[0][j] - lo[j]).abs() < 1e-6, "{cs:?} {lo:?}");
            assert!((cs[1][j] - hi[j]).abs() < 1e-6, "{cs:?} {hi:?}");
        }
        assert!(m.converged());
    }

    #[test]
    fn deterministic_for_seed() {
        let (pts, ..) = clouds(5);
        let a = fit_kmeans(&pts, &KMeansOptions::new(5, 42)).unwrap();
        let b = fit_kmeans(&pts, &KMeansOptions::new(5, 42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn inertia_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Vec<f64>> = (0..500).map(|_| (0..3).map(|_| rng.random::<f64>()).collect()).collect();
        let m = fit_kmeans(&pts, &KMeansOptions::new(12, 1)).unwrap();
        for w in m.inertia_trace().windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{w:?}");
        }
    }

    #[test]
    fn centroids_assign_to_themselves() {
        let (pts, ..) = clouds(1);
        let m = fit_kmeans(&pts, &KMeansOptions::new(6, 3)).unwrap();
        for c in 0..6 {
            assert_eq!(m.assign(&m.raw_centroid(c)).unwrap(), c);
        }
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let cents = [0.0, 0.0, 5.0, 5.0, 2.0, 0.0, 9.0, 9.0, -2.0, 0.0];
        assert_eq!(nearest(&[0.0, 0.0], &cents, 2).0, 0);
        // Equidistant from centroids 2 and 4 (x = ±2), nothing closer.
        let cents = [50.0, 50.0, 60.0, 60.0, 2.0, 0.0, 70.0, 70.0, -2.0, 0.0];
        assert_eq!(nearest(&[0.0, 0.0], &cents, 2).0, 2);
    }

    #[test]
    fn assignment_matches_brute_force() {
        let (pts, ..) = clouds(2);
        let m = fit_kmeans(&pts, &KMeansOptions::new(4, 8)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let x = [rng.random_range(-12.0..12.0), rng.random_range(-12.0..12.0)];
            let z = m.standardize(&x).unwrap();
            let dists: Vec<f64> = (0..4).map(|c| sq_dist(&z, m.centroid(c))).collect();
            let best = (0..4).fold(0, |b, c| if dists[c] < dists[b] { c } else { b });
            assert_eq!(m.assign(&x).unwrap(), best);
        }
        assert!(matches!(m.assign(&[1.0]), Err(RepresentationError::DimensionMismatch { .. })));
    }

    #[test]
    fn degenerate_inputs() {
        let same = vec![vec![1.0, 2.0]; 10];
        assert!(matches!(fit_kmeans(&same, &KMeansOptions::new(2, 0)), Err(RepresentationError::AllIdentical)));
        assert!(fit_kmeans(&same, &KMeansOptions::new(1, 0)).is_ok());
        let two = vec![vec![1.0], vec![1.0], vec![2.0]];
        assert!(matches!(
            fit_kmeans(&two, &KMeansOptions::new(3, 0)),
            Err(RepresentationError::TooFewDistinct { distinct: 2, .. })
        ));
        assert!(matches!(
            fit_kmeans(&two, &KMeansOptions::new(4, 0)),
            Err(RepresentationError::TooFewObservations { .. })
        ));
    }

    #[test]
    fn json_round_trip() {
        let (pts, ..) = clouds(0);
        let m = fit_kmeans(&pts, &KMeansOptions::new(3, 0)).unwrap();
        let text = serde_json::to_string(&m).unwrap();
        let back: ClusterModel = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn standardized_copy_gives_same_assignments() {
        let (pts, ..) = clouds(6);
        let m = fit_kmeans(&pts, &KMeansOptions::new(4, 2)).unwrap();
        for p in &pts {
            let z = m.standardize(p).unwrap();
            assert_eq!(m.assign_standardized(&z).unwrap(), m.assign(p).unwrap());
        }
    }
}
