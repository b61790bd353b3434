//! Projection-axis estimation for each recursion step.
//!
//! Three strategies: the sensor axes, covariance eigenvectors, and the
//! dominant surface normal found by K-Means over per-point normals.

use std::num::NonZeroUsize;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::{Matrix3, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{AxesTriad, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AxesError {
    #[error("point cloud is degenerate: {0}")]
    DegenerateCloud(String),
    #[error("invalid axes config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AxesMethod {
    Camera,
    Pca,
    Normals,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AxesConfig {
    pub method: AxesMethod,
    pub knn_k: usize,
    pub kmeans_k: usize,
    pub kmeans_iters: usize,
    pub seed: u64,
    /// Lock the in-plane axes to a second, roughly orthogonal normal cluster
    /// when one exists. Without it the in-plane rotation only follows the
    /// previous step.
    pub snap_secondary: bool,
}

impl Default for AxesConfig {
    fn default() -> Self {
        Self {
            method: AxesMethod::Normals,
            knn_k: 16,
            kmeans_k: 4,
            kmeans_iters: 25,
            seed: 0,
            snap_secondary: true,
        }
    }
}

impl AxesConfig {
    pub fn validate(&self) -> Result<(), AxesError> {
        if self.knn_k < 3 {
            return Err(AxesError::BadConfig(format!("knn_k must be >= 3, got {}", self.knn_k)));
        }
        if self.kmeans_k < 1 {
            return Err(AxesError::BadConfig("kmeans_k must be >= 1".into()));
        }
        Ok(())
    }
}

/// Relative eigenvalue floor below which a direction counts as absent.
const RANK_EPS: f64 = 1e-10;
/// Minimum share of normals a secondary cluster needs before it is trusted.
const SECONDARY_MIN_SHARE: f64 = 0.08;
/// |cos| between dominant and secondary normals must stay below this.
const SECONDARY_MAX_COS: f64 = 0.5;
/// A cluster mixing two faces has a short mean normal; such a cluster is not
/// a face direction and must not orient the box.
const SECONDARY_MIN_COHERENCE: f64 = 0.9;

pub fn axes_camera() -> AxesTriad {
    AxesTriad::camera()
}

fn centroid(points: &[Vec3]) -> Vec3 {
    points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / points.len() as f64
}

fn covariance(points: &[Vec3]) -> Matrix3<f64> {
    let c = centroid(points);
    let mut m = Matrix3::zeros();
    for p in points {
        let d = p - c;
        m += d * d.transpose();
    }
    m / points.len() as f64
}

/// Eigenpairs sorted by descending eigenvalue.
fn sorted_eigen(cov: Matrix3<f64>) -> ([f64; 3], [Vec3; 3]) {
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    (
        order.map(|i| eig.eigenvalues[i]),
        order.map(|i| eig.eigenvectors.column(i).into_owned()),
    )
}

fn largest_component_positive(v: Vec3) -> Vec3 {
    let k = v.iamax();
    if v[k] < 0.0 {
        -v
    } else {
        v
    }
}

/// Unit vector orthogonal to `n`, built from the sensor axis least aligned with it.
fn any_orthogonal(n: &Vec3) -> Vec3 {
    let k = n.iamin();
    let mut e = Vec3::zeros();
    e[k] = 1.0;
    (e - n * n.dot(&e)).normalize()
}

/// Re-orthonormalizes around `a3` and `a2` and returns a right-handed triad.
fn triad_from(a2: Vec3, a3: Vec3) -> AxesTriad {
    let a3 = a3.normalize();
    let a2 = (a2 - a3 * a3.dot(&a2)).normalize();
    let a1 = a2.cross(&a3);
    AxesTriad::from_matrix_unchecked(Matrix3::from_columns(&[a1, a2, a3]))
}

/// Principal axes of the centered covariance, largest variance first.
pub fn axes_pca(points: &[Vec3], prev: Option<&AxesTriad>) -> Result<AxesTriad, AxesError> {
    if points.len() < 3 {
        return Err(AxesError::DegenerateCloud(format!("{} points", points.len())));
    }
    let (vals, vecs) = sorted_eigen(covariance(points));
    if !(vals[0] > 0.0) || vals[1] <= RANK_EPS * vals[0] {
        return Err(AxesError::DegenerateCloud("covariance rank < 2".into()));
    }
    let mut axes = vecs.map(|v| v.normalize());
    for (k, a) in axes.iter_mut().enumerate() {
        *a = match prev {
            Some(p) if a.dot(&p.axis(k)) < 0.0 => -*a,
            Some(_) => *a,
            None => largest_component_positive(*a),
        };
    }
    if axes[0].cross(&axes[1]).dot(&axes[2]) < 0.0 {
        axes[2] = -axes[2];
    }
    // exact right-handedness for the triad invariant
    Ok(triad_from(axes[1], axes[0].cross(&axes[1])))
}

/// Per-point unit normals from the k-nearest-neighbor covariance, flipped to
/// face `viewpoint`.
pub fn estimate_normals(points: &[Vec3], knn_k: usize, viewpoint: &Vec3) -> Result<Vec<Vec3>, AxesError> {
    if knn_k < 3 {
        return Err(AxesError::BadConfig(format!("knn_k must be >= 3, got {knn_k}")));
    }
    if points.len() <= knn_k {
        return Err(AxesError::DegenerateCloud(format!(
            "{} points, need more than knn_k = {knn_k}",
            points.len()
        )));
    }
    let (vals, _) = sorted_eigen(covariance(points));
    if !(vals[0] > 0.0) || vals[1] <= RANK_EPS * vals[0] {
        return Err(AxesError::DegenerateCloud("covariance rank < 2".into()));
    }
    let raw: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
    let tree: ImmutableKdTree<f64, 3> = ImmutableKdTree::new_from_slice(&raw);
    let k = NonZeroUsize::new(knn_k).expect("knn_k >= 3");
    let mut hood = Vec::with_capacity(knn_k);
    Ok(points
        .iter()
        .map(|p| {
            hood.clear();
            hood.extend(
                tree.nearest_n::<SquaredEuclidean>(&[p.x, p.y, p.z], k)
                    .into_iter()
                    .map(|nn| points[nn.item as usize]),
            );
            let (_, vecs) = sorted_eigen(covariance(&hood));
            let n = vecs[2].normalize();
            if n.dot(&(viewpoint - p)) < 0.0 {
                -n
            } else {
                n
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Vec<Vec3>,
    pub assignments: Vec<usize>,
    pub sizes: Vec<usize>,
    /// Objective after initialization and after every Lloyd iteration.
    pub objective: Vec<f64>,
}

fn nearest(centroids: &[Vec3], v: &Vec3) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, mu) in centroids.iter().enumerate() {
        let d = (v - mu).norm_squared();
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's K-Means with seeded farthest-point initialization.
pub fn kmeans(data: &[Vec3], k: usize, max_iters: usize, seed: u64) -> KMeansResult {
    assert!(!data.is_empty() && k >= 1);
    let k = k.min(data.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![data[rng.random_range(0..data.len())]];
    let mut dist: Vec<f64> = data.iter().map(|v| (v - centroids[0]).norm_squared()).collect();
    while centroids.len() < k {
        let mut far = 0;
        for (i, &d) in dist.iter().enumerate() {
            if d > dist[far] {
                far = i;
            }
        }
        let c = data[far];
        centroids.push(c);
        for (d, v) in dist.iter_mut().zip(data) {
            *d = d.min((v - c).norm_squared());
        }
    }

    let assign = |centroids: &[Vec3]| -> (Vec<usize>, f64) {
        let mut total = 0.0;
        let a = data
            .iter()
            .map(|v| {
                let (c, d) = nearest(centroids, v);
                total += d;
                c
            })
            .collect();
        (a, total)
    };
    let (mut assignments, obj) = assign(&centroids);
    let mut objective = vec![obj];
    for _ in 0..max_iters {
        let mut sums = vec![Vec3::zeros(); k];
        let mut counts = vec![0usize; k];
        for (v, &c) in data.iter().zip(&assignments) {
            sums[c] += v;
            counts[c] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c] / counts[c] as f64;
            }
        }
        let (next, obj) = assign(&centroids);
        objective.push(obj);
        let done = next == assignments;
        assignments = next;
        if done {
            break;
        }
    }
    let mut sizes = vec![0usize; k];
    for &c in &assignments {
        sizes[c] += 1;
    }
    KMeansResult {
        centroids,
        assignments,
        sizes,
        objective,
    }
}

/// Axes whose third direction looks onto the dominant surface of `points`.
pub fn axes_normals(
    points: &[Vec3],
    cfg: &AxesConfig,
    prev: Option<&AxesTriad>,
    viewpoint: &Vec3,
) -> Result<AxesTriad, AxesError> {
    cfg.validate()?;
    let normals = estimate_normals(points, cfg.knn_k, viewpoint)?;
    let km = kmeans(&normals, cfg.kmeans_k, cfg.kmeans_iters, cfg.seed);
    // largest cluster; ties go to the lower cluster index
    let major = (0..km.sizes.len())
        .max_by(|&a, &b| km.sizes[a].cmp(&km.sizes[b]).then(b.cmp(&a)))
        .expect("at least one cluster");
    let n_star = km.centroids[major];
    if n_star.norm() < 1e-9 {
        return Err(AxesError::DegenerateCloud("dominant normal cluster has no direction".into()));
    }
    let a3 = -n_star.normalize();

    let up = Vec3::new(0.0, -1.0, 0.0);
    let project = |v: Vec3| {
        let w = v - a3 * a3.dot(&v);
        (w.norm() > 1e-6).then(|| w.normalize())
    };
    let base = prev
        .and_then(|p| project(p.a2()))
        .or_else(|| project(up))
        .unwrap_or_else(|| any_orthogonal(&a3));

    let mut a2 = base;
    if cfg.snap_secondary {
        let total = normals.len() as f64;
        let secondary = (0..km.sizes.len())
            .filter(|&c| c != major && km.sizes[c] as f64 >= SECONDARY_MIN_SHARE * total)
            .filter(|&c| km.centroids[c].norm() >= SECONDARY_MIN_COHERENCE)
            .filter(|&c| km.centroids[c].normalize().dot(&a3).abs() < SECONDARY_MAX_COS)
            .max_by(|&a, &b| km.sizes[a].cmp(&km.sizes[b]).then(b.cmp(&a)));
        if let Some(s) = secondary.and_then(|c| project(km.centroids[c])) {
            let t = a3.cross(&s);
            a2 = [s, -s, t, -t]
                .into_iter()
                .max_by(|x, y| x.dot(&base).total_cmp(&y.dot(&base)))
                .expect("four candidates");
        }
    }
    Ok(triad_from(a2, a3))
}

/// Dispatches on `cfg.method`.
pub fn estimate_axes(
    points: &[Vec3],
    cfg: &AxesConfig,
    prev: Option<&AxesTriad>,
    viewpoint: &Vec3,
) -> Result<AxesTriad, AxesError> {
    match cfg.method {
        AxesMethod::Camera => Ok(axes_camera()),
        AxesMethod::Pca => axes_pca(points, prev),
        AxesMethod::Normals => axes_normals(points, cfg, prev, viewpoint),
    }
}
