//! Spectral clustering of class embeddings into multiple centroids.
//!
//! Pipeline: pairwise cosine similarities -> nonnegative affinity
//! (1 + s)/2 -> symmetric normalized Laplacian -> k smallest eigenvectors by
//! subspace iteration -> row-normalized spectral embedding -> seeded k-means
//! with farthest-point initialization.

use crate::error::{CppError, Result};
use crate::linalg::{pairwise_cosine, Matrix, Vector};
use crate::rng::SplitRng;

pub const EIG_TOL: f64 = 1e-10;
pub const EIG_MAX_ITER: usize = 10_000;
pub const KMEANS_RESTARTS: usize = 20;
const KMEANS_MAX_ITER: usize = 200;

/// Nonnegative affinity from cosine similarities, entrywise (1 + s)/2.
pub fn affinity_from_cosine(sims: &Matrix) -> Matrix {
    let mut w = sims.clone();
    for v in w.as_mut_slice() {
        *v = (1.0 + *v) / 2.0;
    }
    w
}

/// Full eigendecomposition of a small symmetric matrix by cyclic Jacobi
/// rotations. Returns (eigenvalues ascending, column eigenvectors).
pub fn jacobi_eigen_sym(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    if a.rows() != a.cols() {
        return Err(CppError::Shape("jacobi needs a square matrix".into()));
    }
    let n = a.rows();
    let mut m = a.clone();
    let mut v = Matrix::zeros(n, n);
    for i in 0..n {
        v.set(i, i, 1.0);
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m.get(i, j) * m.get(i, j);
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for i in 0..n {
                    let mip = m.get(i, p);
                    let miq = m.get(i, q);
                    m.set(i, p, c * mip - s * miq);
                    m.set(i, q, s * mip + c * miq);
                }
                for j in 0..n {
                    let mpj = m.get(p, j);
                    let mqj = m.get(q, j);
                    m.set(p, j, c * mpj - s * mqj);
                    m.set(q, j, s * mpj + c * mqj);
                }
                for i in 0..n {
                    let vip = v.get(i, p);
                    let viq = v.get(i, q);
                    v.set(i, p, c * vip - s * viq);
                    v.set(i, q, s * vip + c * viq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(i, i).partial_cmp(&m.get(j, j)).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| m.get(i, i)).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        for row in 0..n {
            vectors.set(row, col, v.get(row, src));
        }
    }
    Ok((values, vectors))
}

fn orthonormalize_columns(x: &mut Matrix) {
    let (n, k) = (x.rows(), x.cols());
    for c in 0..k {
        for prev in 0..c {
            let mut dot = 0.0;
            for r in 0..n {
                dot += x.get(r, c) * x.get(r, prev);
            }
            for r in 0..n {
                let v = x.get(r, c) - dot * x.get(r, prev);
                x.set(r, c, v);
            }
        }
        let mut norm = 0.0;
        for r in 0..n {
            norm += x.get(r, c) * x.get(r, c);
        }
        norm = norm.sqrt();
        if norm > 1e-12 {
            for r in 0..n {
                x.set(r, c, x.get(r, c) / norm);
            }
        }
    }
}

/// k eigenvectors of the symmetric normalized Laplacian L = I - D^-1/2 W
/// D^-1/2 with the smallest eigenvalues, via subspace iteration on 2I - L
/// (largest-eigenvalue form) with a Rayleigh-Ritz refinement.
pub fn smallest_laplacian_eigenvectors(
    w: &Matrix,
    k: usize,
    rng: &mut SplitRng,
) -> Result<Matrix> {
    let n = w.rows();
    if w.cols() != n {
        return Err(CppError::Shape("affinity matrix must be square".into()));
    }
    if k == 0 || k > n {
        return Err(CppError::Config(format!("need 1..=n eigenvectors, got {k} of {n}")));
    }
    // Degrees are positive because every diagonal affinity entry is 1.
    let mut inv_sqrt_deg = vec![0.0; n];
    for i in 0..n {
        let d: f64 = w.row(i).iter().sum();
        if d <= 0.0 {
            return Err(CppError::Numeric("nonpositive degree in affinity".into()));
        }
        inv_sqrt_deg[i] = 1.0 / d.sqrt();
    }
    // M = I + D^-1/2 W D^-1/2 = 2I - L; eigenvalues lie in [0, 2].
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let v = inv_sqrt_deg[i] * w.get(i, j) * inv_sqrt_deg[j];
            m.set(i, j, if i == j { v + 1.0 } else { v });
        }
    }

    let mut x = Matrix::zeros(n, k);
    for v in x.as_mut_slice() {
        *v = rng.normal();
    }
    orthonormalize_columns(&mut x);
    for _ in 0..EIG_MAX_ITER {
        let mut y = Matrix::zeros(n, k);
        for i in 0..n {
            let mrow = m.row(i);
            for c in 0..k {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += mrow[j] * x.get(j, c);
                }
                y.set(i, c, acc);
            }
        }
        // Per-column eigen residual ||M x - (x^T M x) x|| before the
        // re-orthonormalization overwrites y.
        let mut worst = 0.0f64;
        for c in 0..k {
            let mut theta = 0.0;
            for r in 0..n {
                theta += x.get(r, c) * y.get(r, c);
            }
            let mut res = 0.0;
            for r in 0..n {
                let d = y.get(r, c) - theta * x.get(r, c);
                res += d * d;
            }
            worst = worst.max(res.sqrt());
        }
        orthonormalize_columns(&mut y);
        x = y;
        if worst < EIG_TOL {
            break;
        }
    }

    // Rayleigh-Ritz: diagonalize X^T M X to rotate the converged subspace
    // onto eigenvector directions (also resolves degenerate clusters).
    let mut b = Matrix::zeros(k, k);
    for c1 in 0..k {
        for c2 in 0..k {
            let mut acc = 0.0;
            for i in 0..n {
                let mut mx = 0.0;
                for j in 0..n {
                    mx += m.get(i, j) * x.get(j, c2);
                }
                acc += x.get(i, c1) * mx;
            }
            b.set(c1, c2, acc);
        }
    }
    let (_vals, vecs) = jacobi_eigen_sym(&b)?;
    // Largest eigenvalues of M are the smallest of L; jacobi sorts ascending,
    // so take columns in reverse.
    let mut out = Matrix::zeros(n, k);
    for c in 0..k {
        let src = k - 1 - c;
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..k {
                acc += x.get(i, j) * vecs.get(j, src);
            }
            out.set(i, c, acc);
        }
    }
    Ok(out)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Seeded k-means on plain points. Farthest-point initialization, Lloyd
/// updates, several restarts; returns the assignment with the lowest
/// within-cluster sum of squares. Deterministic given the rng.
pub fn kmeans_assign(points: &[Vec<f64>], k: usize, restarts: usize, rng: &mut SplitRng) -> Vec<usize> {
    let n = points.len();
    assert!(k >= 1 && k <= n, "k must be in 1..=n");
    if k == 1 {
        return vec![0; n];
    }
    if k == n {
        return (0..n).collect();
    }
    let dim = points[0].len();
    let mut best_assign = vec![0usize; n];
    let mut best_sse = f64::INFINITY;
    for _ in 0..restarts {
        // Farthest-point init from a random start.
        let mut centers: Vec<Vec<f64>> = vec![points[rng.index(n)].clone()];
        while centers.len() < k {
            let mut far_idx = 0;
            let mut far_dist = -1.0;
            for (i, p) in points.iter().enumerate() {
                let d = centers
                    .iter()
                    .map(|c| sq_dist(p, c))
                    .fold(f64::INFINITY, f64::min);
                if d > far_dist {
                    far_dist = d;
                    far_idx = i;
                }
            }
            centers.push(points[far_idx].clone());
        }
        let mut assign = vec![usize::MAX; n];
        for _ in 0..KMEANS_MAX_ITER {
            let mut changed = false;
            for (i, p) in points.iter().enumerate() {
                let mut best_c = 0;
                let mut best_d = f64::INFINITY;
                for (c, center) in centers.iter().enumerate() {
                    let d = sq_dist(p, center);
                    if d < best_d {
                        best_d = d;
                        best_c = c;
                    }
                }
                if assign[i] != best_c {
                    assign[i] = best_c;
                    changed = true;
                }
            }
            // Rebuild centers; an empty cluster steals the point farthest
            // from its current center.
            let mut counts = vec![0usize; k];
            let mut sums = vec![vec![0.0; dim]; k];
            for (i, p) in points.iter().enumerate() {
                counts[assign[i]] += 1;
                for c in 0..dim {
                    sums[assign[i]][c] += p[c];
                }
            }
            for c in 0..k {
                if counts[c] == 0 {
                    let mut far_idx = 0;
                    let mut far_dist = -1.0;
                    for (i, p) in points.iter().enumerate() {
                        if counts[assign[i]] <= 1 {
                            continue;
                        }
                        let d = sq_dist(p, &centers[assign[i]]);
                        if d > far_dist {
                            far_dist = d;
                            far_idx = i;
                        }
                    }
                    counts[assign[far_idx]] -= 1;
                    for x in 0..dim {
                        sums[assign[far_idx]][x] -= points[far_idx][x];
                    }
                    assign[far_idx] = c;
                    counts[c] = 1;
                    sums[c] = points[far_idx].clone();
                    changed = true;
                }
            }
            for c in 0..k {
                for x in 0..dim {
                    centers[c][x] = sums[c][x] / counts[c] as f64;
                }
            }
            if !changed {
                break;
            }
        }
        let sse: f64 = points
            .iter()
            .enumerate()
            .map(|(i, p)| sq_dist(p, &centers[assign[i]]))
            .sum();
        if sse < best_sse - 1e-12 {
            best_sse = sse;
            best_assign = assign;
        }
    }
    best_assign
}

/// Cluster unit embeddings into k groups by normalized spectral clustering.
/// Returns per-point cluster indices relabeled so that cluster ids appear in
/// first-member order.
pub fn spectral_partition(embeddings: &[Vector], k: usize, rng: &mut SplitRng) -> Result<Vec<usize>> {
    let n = embeddings.len();
    if n == 0 {
        return Err(CppError::EmptyInput("spectral partition of no points".into()));
    }
    if k == 0 || k > n {
        return Err(CppError::Config(format!("cannot cut {n} points into {k} groups")));
    }
    if k == 1 {
        return Ok(vec![0; n]);
    }
    if k == n {
        return Ok((0..n).collect());
    }
    let sims = pairwise_cosine(embeddings, embeddings)?;
    let w = affinity_from_cosine(&sims);
    let vectors = smallest_laplacian_eigenvectors(&w, k, rng)?;
    // Row-normalized spectral embedding.
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let row: Vec<f64> = (0..k).map(|c| vectors.get(i, c)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        rows.push(if norm > 1e-12 {
            row.iter().map(|v| v / norm).collect()
        } else {
            row
        });
    }
    let raw = kmeans_assign(&rows, k, KMEANS_RESTARTS, rng);
    Ok(relabel_by_first_member(&raw, k))
}

/// Relabel cluster ids so the cluster containing the lowest point index gets
/// id 0, the next unseen cluster id 1, and so on.
pub fn relabel_by_first_member(assign: &[usize], k: usize) -> Vec<usize> {
    let mut map = vec![usize::MAX; k];
    let mut next = 0;
    let mut out = Vec::with_capacity(assign.len());
    for &a in assign {
        if map[a] == usize::MAX {
            map[a] = next;
            next += 1;
        }
        out.push(map[a]);
    }
    out
}

/// Normalized-cut objective of a partition under affinity w:
/// sum over clusters of cut(A, V \ A) / vol(A). Used by the exhaustive
/// clustering oracles.
pub fn normalized_cut_value(w: &Matrix, assign: &[usize], k: usize) -> f64 {
    let n = assign.len();
    let mut cut = vec![0.0; k];
    let mut vol = vec![0.0; k];
    for i in 0..n {
        for j in 0..n {
            let wij = w.get(i, j);
            vol[assign[i]] += wij;
            if assign[i] != assign[j] {
                cut[assign[i]] += wij;
            }
        }
    }
    (0..k)
        .map(|c| if vol[c] > 0.0 { cut[c] / vol[c] } else { 0.0 })
        .sum()
}
