//! Representative timestep selection: PCA-project a trajectory's features,
//! find the optimal cluster count from silhouette and Davies-Bouldin
//! rankings, pick the timesteps nearest each cluster center, and validate the
//! pick with the summed minimum-distance score.

use crate::feature_store::{FeatureMap, FeatureTrajectory};
use crate::seeding::derive_seed;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Spatial grid each layer's feature map is pooled to before flattening.
const POOL_GRID: usize = 8;
/// Lloyd's iteration stops once every centroid moves less than this.
const KMEANS_TOL: f64 = 1e-7;
const KMEANS_MAX_ITERS: usize = 300;
/// Restarts used whenever a single clustering is requested.
const KMEANS_RESTARTS: u64 = 10;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("input contains non-finite values")]
    NonFinite,
    #[error("requested dimension must be at least 1")]
    ZeroDim,
    #[error("k must satisfy 1 <= k <= {n}, got {k}")]
    BadK { k: usize, n: usize },
    #[error("need at least 2 non-empty clusters, got {0}")]
    TooFewClusters(usize),
    #[error("clusters {0} and {1} have coincident centroids; index undefined")]
    CoincidentCentroids(usize, usize),
    #[error("no silhouette/Davies-Bouldin agreement within {0} candidates")]
    NoAgreement(usize),
    #[error("need at least one input item")]
    Empty,
    #[error("trajectories disagree on timestep count: {0} vs {1}")]
    MixedTimesteps(usize, usize),
    #[error("selected timestep {t} out of range 0..{t_count}")]
    TimestepRange { t: usize, t_count: usize },
}

/// One trajectory's timesteps as rows of a PCA-projected point cloud.
#[derive(Debug, Clone)]
pub struct ProjectedTrajectory {
    /// T x d matrix, one row per timestep.
    pub points: DMatrix<f64>,
    /// D x d principal axes (columns, unit norm).
    pub basis: DMatrix<f64>,
    /// Variance along each kept axis, non-increasing.
    pub explained_variance: DVector<f64>,
}

/// K-means result over a point cloud.
#[derive(Debug, Clone)]
pub struct Clustering {
    pub labels: Vec<usize>,
    /// k x d matrix of centroids.
    pub centroids: DMatrix<f64>,
    pub wcss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SelectionScores {
    pub selected: f64,
    pub equal: f64,
    pub random: f64,
}

/// Outcome of the whole selection analysis over a set of trajectories.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SelectionReport {
    pub k: usize,
    pub per_image_k: Vec<usize>,
    pub timesteps: Vec<usize>,
    pub scores: SelectionScores,
}

/// Pools one feature map to `POOL_GRID` x `POOL_GRID` per channel and appends
/// the result to `out`. Pooling follows adaptive-average semantics: output
/// cell (i, j) averages the input cells its fractional box overlaps.
fn pool_into(map: &FeatureMap, out: &mut Vec<f64>) {
    let (c, h, w) = (map.channels(), map.height(), map.width());
    let data = map.tensor().data();
    for ch in 0..c {
        for oi in 0..POOL_GRID {
            let i0 = oi * h / POOL_GRID;
            let i1 = (((oi + 1) * h + POOL_GRID - 1) / POOL_GRID).max(i0 + 1).min(h.max(i0 + 1));
            for oj in 0..POOL_GRID {
                let j0 = oj * w / POOL_GRID;
                let j1 = (((oj + 1) * w + POOL_GRID - 1) / POOL_GRID).max(j0 + 1).min(w.max(j0 + 1));
                let mut acc = 0.0f64;
                let mut count = 0.0f64;
                for i in i0..i1.min(h) {
                    for j in j0..j1.min(w) {
                        acc += data[(ch * h + i) * w + j] as f64;
                        count += 1.0;
                    }
                }
                out.push(if count > 0.0 { acc / count } else { 0.0 });
            }
        }
    }
}

/// Flattens a trajectory into one row per timestep: every layer pooled to a
/// common grid, then concatenated in layer order.
pub fn trajectory_vectors(trajectory: &FeatureTrajectory) -> DMatrix<f64> {
    let t_count = trajectory.timesteps();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let mut row = Vec::new();
        for l in 1..=trajectory.layers() {
            pool_into(trajectory.get(l, t), &mut row);
        }
        rows.push(row);
    }
    let dim = rows[0].len();
    DMatrix::from_fn(t_count, dim, |r, c| rows[r][c])
}

/// PCA of the trajectory's timestep vectors onto the top `d` variance axes.
///
/// `d` is reduced (with a warning) when it exceeds the data rank. The
/// eigendecomposition runs on the T x T Gram matrix of the centered rows, so
/// cost scales with the timestep count rather than the feature dimension.
pub fn pca_project(
    trajectory: &FeatureTrajectory,
    d: usize,
) -> Result<ProjectedTrajectory, SelectionError> {
    pca_project_points(&trajectory_vectors(trajectory), d)
}

/// PCA over an arbitrary items-by-features matrix; rows become points.
pub fn pca_project_points(
    vectors: &DMatrix<f64>,
    d: usize,
) -> Result<ProjectedTrajectory, SelectionError> {
    if d == 0 {
        return Err(SelectionError::ZeroDim);
    }
    if vectors.iter().any(|v| !v.is_finite()) {
        return Err(SelectionError::NonFinite);
    }
    let n = vectors.nrows();
    let dim = vectors.ncols();

    let mean = vectors.row_mean();
    let mut centered = vectors.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }

    let gram = &centered * centered.transpose();
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let max_eig = eig.eigenvalues[order[0]].max(0.0);
    let tol = max_eig * (n.max(dim) as f64) * f64::EPSILON;
    let rank = order
        .iter()
        .take_while(|&&i| eig.eigenvalues[i] > tol && eig.eigenvalues[i] > 0.0)
        .count();
    let d_eff = d.min(rank.max(1)).min(n);
    if d_eff < d {
        log::warn!("pca dimension reduced from {d} to {d_eff} (data rank)");
    }

    let mut points = DMatrix::zeros(n, d_eff);
    let mut basis = DMatrix::zeros(dim, d_eff);
    let mut variance = DVector::zeros(d_eff);
    for (col, &idx) in order.iter().take(d_eff).enumerate() {
        let lambda = eig.eigenvalues[idx].max(0.0);
        let scale = lambda.sqrt();
        let u = eig.eigenvectors.column(idx);
        for r in 0..n {
            points[(r, col)] = u[r] * scale;
        }
        if scale > 0.0 {
            let axis = centered.transpose() * u / scale;
            basis.set_column(col, &axis);
        }
        variance[col] = lambda / (n as f64 - 1.0).max(1.0);
    }
    Ok(ProjectedTrajectory {
        points,
        basis,
        explained_variance: variance,
    })
}

fn row_dist2(points: &DMatrix<f64>, r: usize, other: &DMatrix<f64>, o: usize) -> f64 {
    let mut acc = 0.0;
    for c in 0..points.ncols() {
        let d = points[(r, c)] - other[(o, c)];
        acc += d * d;
    }
    acc
}

/// Lloyd's algorithm with k-means++ seeding. Deterministic per `seed`; an
/// emptied cluster is re-seeded at the point farthest from its own centroid.
pub fn kmeans(
    points: &DMatrix<f64>,
    k: usize,
    seed: u64,
) -> Result<Clustering, SelectionError> {
    let n = points.nrows();
    let dim = points.ncols();
    if k < 1 || k > n {
        return Err(SelectionError::BadK { k, n });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    // k-means++ initialization.
    let mut centroids = DMatrix::zeros(k, dim);
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).copy_from(&points.row(first));
    let mut min_d2: Vec<f64> = (0..n).map(|p| row_dist2(points, p, &centroids, 0)).collect();
    for c in 1..k {
        let total: f64 = min_d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (p, &w) in min_d2.iter().enumerate() {
                if target < w {
                    chosen = p;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centroids.row_mut(c).copy_from(&points.row(pick));
        for (p, d2) in min_d2.iter_mut().enumerate() {
            *d2 = d2.min(row_dist2(points, p, &centroids, c));
        }
    }

    let mut labels = vec![0usize; n];
    for _ in 0..KMEANS_MAX_ITERS {
        // Assignment.
        for p in 0..n {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let d = row_dist2(points, p, &centroids, c);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            labels[p] = best;
        }
        // Update, re-seeding any emptied centroid at the point currently
        // farthest from its own centroid.
        let mut counts = vec![0usize; k];
        let mut sums = DMatrix::<f64>::zeros(k, dim);
        for p in 0..n {
            counts[labels[p]] += 1;
            for c in 0..dim {
                sums[(labels[p], c)] += points[(p, c)];
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        row_dist2(points, a, &centroids, labels[a])
                            .total_cmp(&row_dist2(points, b, &centroids, labels[b]))
                    })
                    .expect("n >= 1");
                for d in 0..dim {
                    let nv = points[(far, d)];
                    shift = shift.max((nv - centroids[(c, d)]).abs());
                    centroids[(c, d)] = nv;
                }
                labels[far] = c;
                continue;
            }
            for d in 0..dim {
                let nv = sums[(c, d)] / counts[c] as f64;
                shift = shift.max((nv - centroids[(c, d)]).abs());
                centroids[(c, d)] = nv;
            }
        }
        if shift < KMEANS_TOL {
            break;
        }
    }

    // Final assignment and objective.
    let mut wcss = 0.0;
    for p in 0..n {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for c in 0..k {
            let d = row_dist2(points, p, &centroids, c);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        labels[p] = best;
        wcss += best_d;
    }
    Ok(Clustering {
        labels,
        centroids,
        wcss,
    })
}

/// Best of [`KMEANS_RESTARTS`] seeded runs by WCSS.
pub fn kmeans_best(
    points: &DMatrix<f64>,
    k: usize,
    seed: u64,
) -> Result<Clustering, SelectionError> {
    let mut best: Option<Clustering> = None;
    for r in 0..KMEANS_RESTARTS {
        let run = kmeans(points, k, derive_seed(seed, r))?;
        if best.as_ref().map_or(true, |b| run.wcss < b.wcss) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn cluster_sizes(labels: &[usize]) -> Vec<usize> {
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    sizes
}

/// Mean silhouette coefficient: per point, (b - a) / max(a, b) where a is the
/// mean distance to its own cluster and b the smallest mean distance to any
/// other cluster. Points in singleton clusters contribute 0.
pub fn silhouette(points: &DMatrix<f64>, labels: &[usize]) -> Result<f64, SelectionError> {
    let n = points.nrows();
    assert_eq!(labels.len(), n, "one label per point");
    let sizes = cluster_sizes(labels);
    let non_empty = sizes.iter().filter(|&&s| s > 0).count();
    if non_empty < 2 {
        return Err(SelectionError::TooFewClusters(non_empty));
    }
    let k = sizes.len();

    let mut total = 0.0;
    for p in 0..n {
        if sizes[labels[p]] <= 1 {
            continue; // contributes 0
        }
        let mut sum_to = vec![0.0f64; k];
        for q in 0..n {
            if q == p {
                continue;
            }
            sum_to[labels[q]] += row_dist2(points, p, points, q).sqrt();
        }
        let own = labels[p];
        let a = sum_to[own] / (sizes[own] - 1) as f64;
        let mut b = f64::INFINITY;
        for c in 0..k {
            if c != own && sizes[c] > 0 {
                b = b.min(sum_to[c] / sizes[c] as f64);
            }
        }
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// Davies-Bouldin index: mean over clusters of the worst
/// (sigma_i + sigma_j) / d(c_i, c_j) ratio, sigma being the mean distance of
/// members to their centroid. Errors on coincident centroids.
pub fn davies_bouldin(points: &DMatrix<f64>, labels: &[usize]) -> Result<f64, SelectionError> {
    let n = points.nrows();
    assert_eq!(labels.len(), n, "one label per point");
    let sizes = cluster_sizes(labels);
    let occupied: Vec<usize> = (0..sizes.len()).filter(|&c| sizes[c] > 0).collect();
    if occupied.len() < 2 {
        return Err(SelectionError::TooFewClusters(occupied.len()));
    }
    let dim = points.ncols();
    let k = occupied.len();

    let mut centroids = DMatrix::<f64>::zeros(k, dim);
    for (ci, &c) in occupied.iter().enumerate() {
        for p in 0..n {
            if labels[p] == c {
                for d in 0..dim {
                    centroids[(ci, d)] += points[(p, d)] / sizes[c] as f64;
                }
            }
        }
    }
    let mut sigma = vec![0.0f64; k];
    for (ci, &c) in occupied.iter().enumerate() {
        for p in 0..n {
            if labels[p] == c {
                sigma[ci] += row_dist2(points, p, &centroids, ci).sqrt() / sizes[c] as f64;
            }
        }
    }

    let mut total = 0.0;
    for i in 0..k {
        let mut worst: f64 = 0.0;
        for j in 0..k {
            if i == j {
                continue;
            }
            let dist = row_dist2(&centroids, i, &centroids, j).sqrt();
            if dist < 1e-12 {
                return Err(SelectionError::CoincidentCentroids(occupied[i], occupied[j]));
            }
            worst = worst.max((sigma[i] + sigma[j]) / dist);
        }
        total += worst;
    }
    Ok(total / k as f64)
}

/// Finds the optimal cluster count by ranking candidates k = 2..=max_k+1 by
/// silhouette (descending) and Davies-Bouldin (ascending) and returning the
/// first silhouette pick that also sits in the leading Davies-Bouldin ranks.
pub fn optimal_k(
    points: &DMatrix<f64>,
    max_k: usize,
    seed: u64,
) -> Result<usize, SelectionError> {
    let n = points.nrows();
    let candidates: Vec<usize> = (2..=max_k + 1).filter(|&k| k <= n).collect();
    if candidates.is_empty() {
        return Err(SelectionError::BadK { k: 2, n });
    }
    let mut ss = Vec::with_capacity(candidates.len());
    let mut db = Vec::with_capacity(candidates.len());
    for &k in &candidates {
        let clustering = kmeans_best(points, k, derive_seed(seed, k as u64))?;
        ss.push(silhouette(points, &clustering.labels)?);
        db.push(davies_bouldin(points, &clustering.labels)?);
    }

    let mut sil_indices: Vec<usize> = (0..candidates.len()).collect();
    sil_indices.sort_by(|&a, &b| ss[b].total_cmp(&ss[a]));
    let mut db_indices: Vec<usize> = (0..candidates.len()).collect();
    db_indices.sort_by(|&a, &b| db[a].total_cmp(&db[b]));

    for i in 0..candidates.len() {
        if db_indices[..=i].contains(&sil_indices[i]) {
            return Ok(candidates[sil_indices[i]]);
        }
    }
    Err(SelectionError::NoAgreement(candidates.len()))
}

/// Aggregates per-image optimal cluster counts into one global k: the mode,
/// with ties broken toward the rounded mean (nearest tie member, lower value
/// on equal distance).
pub fn global_k(per_image_k: &[usize]) -> Result<usize, SelectionError> {
    if per_image_k.is_empty() {
        return Err(SelectionError::Empty);
    }
    let mut counts = std::collections::BTreeMap::new();
    for &k in per_image_k {
        *counts.entry(k).or_insert(0usize) += 1;
    }
    let max_count = *counts.values().max().expect("non-empty");
    let tie: Vec<usize> = counts
        .iter()
        .filter(|(_, &c)| c == max_count)
        .map(|(&k, _)| k)
        .collect();
    if tie.len() == 1 {
        return Ok(tie[0]);
    }
    let mean = per_image_k.iter().sum::<usize>() as f64 / per_image_k.len() as f64;
    let rounded = mean.round() as usize;
    if tie.contains(&rounded) {
        return Ok(rounded);
    }
    Ok(*tie
        .iter()
        .min_by_key(|&&k| (k.abs_diff(rounded), k))
        .expect("non-empty tie"))
}

/// Per image, clusters the timestep points into k groups and votes for the
/// timestep nearest each centroid; the k most-voted timesteps win (ties to
/// the earlier timestep). Returns a sorted list.
pub fn select_timesteps(
    trajectories: &[ProjectedTrajectory],
    k: usize,
    seed: u64,
) -> Result<Vec<usize>, SelectionError> {
    if trajectories.is_empty() {
        return Err(SelectionError::Empty);
    }
    let t_count = trajectories[0].points.nrows();
    for traj in trajectories {
        if traj.points.nrows() != t_count {
            return Err(SelectionError::MixedTimesteps(t_count, traj.points.nrows()));
        }
    }
    if k < 1 || k > t_count {
        return Err(SelectionError::BadK { k, n: t_count });
    }

    let mut votes = vec![0usize; t_count];
    for (img, traj) in trajectories.iter().enumerate() {
        let clustering = kmeans_best(&traj.points, k, derive_seed(seed, img as u64))?;
        for c in 0..k {
            let mut best_t = 0usize;
            let mut best_d = f64::INFINITY;
            for t in 0..t_count {
                let d = row_dist2(&traj.points, t, &clustering.centroids, c);
                if d < best_d {
                    best_d = d;
                    best_t = t;
                }
            }
            votes[best_t] += 1;
        }
    }

    let mut order: Vec<usize> = (0..t_count).collect();
    order.sort_by_key(|&t| (std::cmp::Reverse(votes[t]), t));
    let mut chosen: Vec<usize> = order.into_iter().take(k).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Sum over images and timesteps of the distance from each timestep's point
/// to the nearest selected timestep's point within the same image.
pub fn min_distance_score(
    trajectories: &[ProjectedTrajectory],
    selected: &[usize],
) -> Result<f64, SelectionError> {
    if selected.is_empty() {
        return Err(SelectionError::Empty);
    }
    let mut total = 0.0;
    for traj in trajectories {
        let t_count = traj.points.nrows();
        for &s in selected {
            if s >= t_count {
                return Err(SelectionError::TimestepRange { t: s, t_count });
            }
        }
        for t in 0..t_count {
            let mut best = f64::INFINITY;
            for &s in selected {
                best = best.min(row_dist2(&traj.points, t, &traj.points, s));
            }
            total += best.sqrt();
        }
    }
    Ok(total)
}

/// Evenly spaced baseline timesteps. At T = 50, k = 13 this reproduces
/// t = i * 4 + 1 for i in 0..13.
pub fn equal_interval_timesteps(t_count: usize, k: usize) -> Vec<usize> {
    assert!(k >= 1 && k <= t_count, "k must be within 1..=T");
    if k == 1 {
        return vec![1.min(t_count - 1)];
    }
    (0..k)
        .map(|i| {
            let pos = 1.0 + i as f64 * (t_count as f64 - 2.0) / (k as f64 - 1.0);
            (pos.round() as usize).min(t_count - 1)
        })
        .collect()
}

/// k distinct timesteps drawn uniformly, sorted.
pub fn random_timesteps(t_count: usize, k: usize, seed: u64) -> Vec<usize> {
    assert!(k <= t_count, "cannot draw more timesteps than exist");
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut pool: Vec<usize> = (0..t_count).collect();
    for i in 0..k {
        let j = rng.gen_range(i..t_count);
        pool.swap(i, j);
    }
    let mut out = pool[..k].to_vec();
    out.sort_unstable();
    out
}

/// Number of random draws averaged for the report's `random` baseline score.
pub const RANDOM_BASELINE_DRAWS: u64 = 10;

/// Full selection analysis over a set of trajectories: project, find each
/// image's optimal k, aggregate, vote timesteps, and score the selection
/// against equal-interval and random baselines.
pub fn analyze_trajectories(
    trajectories: &[FeatureTrajectory],
    pca_dim: usize,
    seed: u64,
) -> Result<SelectionReport, SelectionError> {
    if trajectories.is_empty() {
        return Err(SelectionError::Empty);
    }
    let projected: Vec<ProjectedTrajectory> = trajectories
        .iter()
        .map(|t| pca_project(t, pca_dim))
        .collect::<Result<_, _>>()?;

    let t_count = projected[0].points.nrows();
    let max_k = (t_count / 2).max(1);
    let mut per_image_k = Vec::with_capacity(projected.len());
    for (img, traj) in projected.iter().enumerate() {
        per_image_k.push(optimal_k(&traj.points, max_k, derive_seed(seed, 1000 + img as u64))?);
    }
    let k = global_k(&per_image_k)?;
    let timesteps = select_timesteps(&projected, k, derive_seed(seed, 2000))?;

    let selected_score = min_distance_score(&projected, &timesteps)?;
    let equal_score = min_distance_score(&projected, &equal_interval_timesteps(t_count, k))?;
    let mut random_total = 0.0;
    for draw in 0..RANDOM_BASELINE_DRAWS {
        let picks = random_timesteps(t_count, k, derive_seed(seed, 3000 + draw));
        random_total += min_distance_score(&projected, &picks)?;
    }
    Ok(SelectionReport {
        k,
        per_image_k,
        timesteps,
        scores: SelectionScores {
            selected: selected_score,
            equal: equal_score,
            random: random_total / RANDOM_BASELINE_DRAWS as f64,
        },
    })
}
