//! Separability analysis: standardize, project onto two principal
//! components, cluster with k-means, score with silhouette and
//! Calinski-Harabasz.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_LLOYD_ITERATIONS: usize = 300;
const JACOBI_SWEEPS: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnalysisError {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("k = {k} is invalid for {n} points")]
    KTooLarge { k: usize, n: usize },
    #[error("need at least two nonempty clusters")]
    SingleCluster,
    #[error("{points} points but {assignments} assignments")]
    LengthMismatch { points: usize, assignments: usize },
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

fn check_matrix(points: &[Vec<f64>]) -> Result<usize> {
    let d = points.first().map_or(0, Vec::len);
    if points.iter().any(|p| p.len() != d) {
        return Err(AnalysisError::DegenerateInput("ragged rows".into()));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(AnalysisError::DegenerateInput("non-finite value".into()));
    }
    Ok(d)
}

/// Z-scores columns (population std); constant columns become zero.
pub fn standardize(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = points.len() as f64;
    let d = points.first().map_or(0, Vec::len);
    let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..d)
        .map(|j| (points.iter().map(|p| (p[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    points
        .iter()
        .map(|p| {
            (0..d)
                .map(|j| {
                    let sd = std[j];
                    if sd <= 1e-12 * mean[j].abs().max(1.0) {
                        0.0
                    } else {
                        (p[j] - mean[j]) / sd
                    }
                })
                .collect()
        })
        .collect()
}

/// Sample covariance (divisor `n - 1`) of already-centered data.
pub fn covariance(centered: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = centered.first().map_or(0, Vec::len);
    let denom = (centered.len() as f64 - 1.0).max(1.0);
    let mut c = vec![vec![0.0; d]; d];
    for p in centered {
        for i in 0..d {
            for j in i..d {
                c[i][j] += p[i] * p[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            c[i][j] /= denom;
            c[j][i] = c[i][j];
        }
    }
    c
}

/// Eigenvalues (descending) and unit eigenvectors of a symmetric matrix by
/// cyclic Jacobi rotations. Each eigenvector's first non-negligible
/// component is made positive.
pub fn symmetric_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = a.len();
    let mut m = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| f64::from(i == j)).collect()).collect();
    let scale: f64 = m.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    for _ in 0..JACOBI_SWEEPS {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |j| *j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum::<f64>()
            .sqrt();
        if off <= f64::EPSILON * scale * 1e-3 || off == 0.0 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                if m[p][q] == 0.0 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| m[j][j].total_cmp(&m[i][i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m[i][i]).collect();
    let vectors = order
        .iter()
        .map(|&i| {
            let mut col: Vec<f64> = v.iter().map(|row| row[i]).collect();
            if col.iter().find(|x| x.abs() > 1e-12).is_some_and(|x| *x < 0.0) {
                col.iter_mut().for_each(|x| *x = -*x);
            }
            col
        })
        .collect();
    (values, vectors)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub projected: Vec<[f64; 2]>,
    /// Principal axes in standardized feature space.
    pub components: [Vec<f64>; 2],
    pub eigenvalues: Vec<f64>,
    pub explained_variance_ratio: [f64; 2],
}

/// Two-component PCA of standardized data.
pub fn pca2(points: &[Vec<f64>]) -> Result<Pca> {
    let d = check_matrix(points)?;
    if points.len() < 2 || d < 2 {
        return Err(AnalysisError::DegenerateInput(format!(
            "need at least 2 points and 2 dimensions, got {}x{d}",
            points.len()
        )));
    }
    let z = standardize(points);
    let (values, vectors) = symmetric_eigen(&covariance(&z));
    let total: f64 = values.iter().map(|v| v.max(0.0)).sum();
    if total <= 0.0 {
        return Err(AnalysisError::DegenerateInput("all columns are constant".into()));
    }
    let components = [vectors[0].clone(), vectors[1].clone()];
    let projected = z.iter().map(|p| [dot(p, &components[0]), dot(p, &components[1])]).collect();
    Ok(Pca {
        projected,
        explained_variance_ratio: [values[0].max(0.0) / total, values[1].max(0.0) / total],
        components,
        eigenvalues: values,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    centroids
        .iter()
        .enumerate()
        .map(|(i, c)| (i, dist2(p, c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

fn plus_plus_seeds(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if *w > 0.0 && target < *w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|w| *w > 0.0).expect("positive total");
            }
            pick
        } else {
            // every point coincides with a seed; take unused indices in order
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        for (w, p) in d2.iter_mut().zip(points) {
            *w = w.min(dist2(p, &points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

/// k-means++ seeding, then Lloyd iterations until assignments stop
/// changing or [`MAX_LLOYD_ITERATIONS`] is reached. Empty clusters keep
/// their previous centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, rng_seed: u64) -> Result<KMeans> {
    let d = check_matrix(points)?;
    let n = points.len();
    if k == 0 || k > n {
        return Err(AnalysisError::KTooLarge { k, n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut centroids = plus_plus_seeds(points, k, &mut rng);
    let mut assignments = vec![usize::MAX; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    while iterations < MAX_LLOYD_ITERATIONS {
        iterations += 1;
        let mut changed = false;
        let mut inertia = 0.0;
        for (a, p) in assignments.iter_mut().zip(points) {
            let (c, dd) = nearest(p, &centroids);
            inertia += dd;
            changed |= *a != c;
            *a = c;
        }
        history.push(inertia);
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (a, p) in assignments.iter().zip(points) {
            counts[*a] += 1;
            sums[*a].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    let inertia = points.iter().zip(&assignments).map(|(p, a)| dist2(p, &centroids[*a])).sum();
    Ok(KMeans {
        assignments,
        centroids,
        inertia,
        inertia_history: history,
        iterations,
    })
}

/// Distinct labels in order of first appearance, mapped to dense indices.
fn relabel(assignments: &[usize]) -> (Vec<usize>, usize) {
    let mut seen: Vec<usize> = Vec::new();
    let dense = assignments
        .iter()
        .map(|a| match seen.iter().position(|s| s == a) {
            Some(i) => i,
            None => {
                seen.push(*a);
                seen.len() - 1
            }
        })
        .collect();
    (dense, seen.len())
}

fn check_labels(points: &[Vec<f64>], assignments: &[usize]) -> Result<(Vec<usize>, usize)> {
    check_matrix(points)?;
    if points.len() != assignments.len() {
        return Err(AnalysisError::LengthMismatch {
            points: points.len(),
            assignments: assignments.len(),
        });
    }
    let (dense, k) = relabel(assignments);
    if k < 2 {
        return Err(AnalysisError::SingleCluster);
    }
    Ok((dense, k))
}

/// Mean silhouette coefficient. Points in singleton clusters score 0.
pub fn silhouette(points: &[Vec<f64>], assignments: &[usize]) -> Result<f64> {
    let (labels, k) = check_labels(points, assignments)?;
    let n = points.len();
    let mut sizes = vec![0usize; k];
    labels.iter().for_each(|l| sizes[*l] += 1);
    let mut total = 0.0;
    for i in 0..n {
        if sizes[labels[i]] == 1 {
            continue;
        }
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if i != j {
                sums[labels[j]] += dist2(&points[i], &points[j]).sqrt();
            }
        }
        let a = sums[labels[i]] / (sizes[labels[i]] - 1) as f64;
        let b = (0..k)
            .filter(|c| *c != labels[i])
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// Between-cluster over within-cluster dispersion, each divided by its
/// degrees of freedom. Returns 1.0 when the within-cluster dispersion is zero.
pub fn calinski_harabasz(points: &[Vec<f64>], assignments: &[usize]) -> Result<f64> {
    let (labels, k) = check_labels(points, assignments)?;
    let n = points.len();
    let d = points[0].len();
    let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
    let mut sums = vec![vec![0.0; d]; k];
    let mut sizes = vec![0usize; k];
    for (l, p) in labels.iter().zip(points) {
        sizes[*l] += 1;
        sums[*l].iter_mut().zip(p).for_each(|(s, x)| *s += x);
    }
    let centroids: Vec<Vec<f64>> = sums
        .iter()
        .zip(&sizes)
        .map(|(s, c)| s.iter().map(|v| v / *c as f64).collect())
        .collect();
    let between: f64 = centroids.iter().zip(&sizes).map(|(c, s)| *s as f64 * dist2(c, &mean)).sum();
    let within: f64 = labels.iter().zip(points).map(|(l, p)| dist2(p, &centroids[*l])).sum();
    if within == 0.0 {
        return Ok(1.0);
    }
    Ok(between * (n - k) as f64 / (within * (k - 1) as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub projected: Vec<[f64; 2]>,
    pub assignments: Vec<usize>,
    pub explained_variance_ratio: [f64; 2],
    pub silhouette: f64,
    pub calinski_harabasz: f64,
    pub cluster_sizes: Vec<usize>,
    pub inertia: f64,
}

impl ClusterReport {
    /// `pc1,pc2,cluster` rows for plotting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pc1,pc2,cluster\n");
        for (p, a) in self.projected.iter().zip(&self.assignments) {
            out.push_str(&format!("{},{},{}\n", p[0], p[1], a));
        }
        out
    }

    /// Summary without the per-point columns.
    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "explained_variance_ratio": self.explained_variance_ratio,
            "silhouette": self.silhouette,
            "calinski_harabasz": self.calinski_harabasz,
            "cluster_sizes": self.cluster_sizes,
            "inertia": self.inertia,
        })
    }
}

/// Standardize, project to two components, cluster the projection and
/// score the clustering in the projected space.
pub fn cluster_report(points: &[Vec<f64>], k: usize, rng_seed: u64) -> Result<ClusterReport> {
    let pca = pca2(points)?;
    let plane: Vec<Vec<f64>> = pca.projected.iter().map(|p| p.to_vec()).collect();
    let km = kmeans(&plane, k, rng_seed)?;
    let mut sizes = vec![0usize; k];
    km.assignments.iter().for_each(|a| sizes[*a] += 1);
    Ok(ClusterReport {
        silhouette: silhouette(&plane, &km.assignments)?,
        calinski_harabasz: calinski_harabasz(&plane, &km.assignments)?,
        projected: pca.projected,
        assignments: km.assignments,
        explained_variance_ratio: pca.explained_variance_ratio,
        cluster_sizes: sizes,
        inertia: km.inertia,
    })
}
