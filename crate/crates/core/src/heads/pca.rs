//! Top-three principal components of the rows of a self-attention matrix.
//!
//! Small matrices use a dense symmetric eigendecomposition of the covariance.
//! Larger ones use block subspace iteration with Rayleigh-Ritz extraction,
//! which never materializes the N×N covariance: each sweep is two thin
//! products with the centered data.

use nalgebra::{DMatrix, SymmetricEigen};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::grid::{min_max_normalize, GrayscaleMap};

use super::HeadError;

/// Covariances up to this size are decomposed densely.
pub const DENSE_LIMIT: usize = 256;
const BLOCK: usize = 8;
const MAX_ITERS: usize = 40;
const RESIDUAL_TOL: f64 = 1e-6;
/// On a flat spectrum (the smallest Ritz value in the block within
/// `FLAT_RATIO` of the third), the top axes are barely determined and the
/// residual test would run to `MAX_ITERS`. There iteration stops once each
/// of the top three Ritz values moves by less than `RITZ_TOL` of itself.
const RITZ_TOL: f64 = 1e-2;
const FLAT_RATIO: f64 = 0.8;
/// Eigenvalues below this fraction of the largest are treated as zero.
const RANK_TOL: f64 = 1e-10;
const ABS_RANK_TOL: f64 = 1e-24;

#[derive(Debug, Clone)]
pub struct Pca {
    /// Unit principal axes (zero vectors past `rank`), largest variance first.
    pub components: [Vec<f64>; 3],
    pub variances: [f64; 3],
    /// How many of the three axes carry non-zero variance.
    pub rank: usize,
    /// Projection of each centered row onto the axes.
    pub scores: Vec<[f64; 3]>,
}

fn column_means(matrix: &[f32], n: usize) -> Vec<f64> {
    let mut mean = vec![0.0f64; n];
    for row in matrix.chunks_exact(n) {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    mean
}

fn dense_top3(matrix: &[f32], n: usize, mean: &[f64]) -> ([Vec<f64>; 3], [f64; 3]) {
    let centered = DMatrix::from_fn(n, n, |i, j| matrix[i * n + j] as f64 - mean[j]);
    let cov = centered.tr_mul(&centered) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut comps: [Vec<f64>; 3] = Default::default();
    let mut vars = [0.0; 3];
    for k in 0..3.min(n) {
        comps[k] = eig.eigenvectors.column(order[k]).iter().copied().collect();
        vars[k] = eig.eigenvalues[order[k]].max(0.0);
    }
    (comps, vars)
}

fn orthonormalize(block: DMatrix<f64>) -> DMatrix<f64> {
    // Householder QR keeps the columns orthonormal even for a rank-deficient
    // block, where Gram-Schmidt does not.
    block.qr().q()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-major centered rows, multiplied against column-major blocks.
struct Centered {
    n: usize,
    data: Vec<f64>,
}

impl Centered {
    fn new(matrix: &[f32], n: usize, mean: &[f64]) -> Self {
        let data = matrix
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(mean).map(|(&x, &m)| x as f64 - m))
            .collect();
        Self { n, data }
    }

    /// `scale · Xᵀ (X q)`: the covariance applied to a block without forming it.
    fn cov_times(&self, q: &DMatrix<f64>, scale: f64) -> DMatrix<f64> {
        let (n, k) = (self.n, q.ncols());
        let mut y = DMatrix::<f64>::zeros(n, k);
        let mut z = DMatrix::<f64>::zeros(n, k);
        let n_i = n as isize;
        // SAFETY: every pointer covers an n×n or n×k buffer with the strides
        // given, and the outputs do not alias the inputs.
        unsafe {
            matrixmultiply::dgemm(
                n,
                n,
                k,
                1.0,
                self.data.as_ptr(),
                n_i,
                1,
                q.as_ptr(),
                1,
                n_i,
                0.0,
                y.as_mut_ptr(),
                1,
                n_i,
            );
            matrixmultiply::dgemm(
                n,
                n,
                k,
                scale,
                self.data.as_ptr(),
                1,
                n_i,
                y.as_ptr(),
                1,
                n_i,
                0.0,
                z.as_mut_ptr(),
                1,
                n_i,
            );
        }
        z
    }
}

fn iterative_top3(matrix: &[f32], n: usize, mean: &[f64]) -> ([Vec<f64>; 3], [f64; 3]) {
    let centered = Centered::new(matrix, n, mean);
    let scale = 1.0 / (n as f64 - 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0x0005_eed0_f9ca);
    let start = DMatrix::from_fn(n, BLOCK, |_, _| {
        (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    });
    let mut q = orthonormalize(start);

    let mut best: ([Vec<f64>; 3], [f64; 3]) = (Default::default(), [0.0; 3]);
    let mut prev_theta: Option<[f64; 3]> = None;
    for _ in 0..MAX_ITERS {
        let z = centered.cov_times(&q, scale);
        let b = q.tr_mul(&z);
        let b = (&b + b.transpose()) * 0.5;
        let eig = SymmetricEigen::new(b);
        let mut order: Vec<usize> = (0..BLOCK).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let u = DMatrix::from_fn(BLOCK, BLOCK, |i, k| eig.eigenvectors[(i, order[k])]);
        let theta: Vec<f64> = order.iter().map(|&o| eig.eigenvalues[o]).collect();
        let ritz = &q * &u;
        let images = &z * &u;

        let converged = (0..3).all(|k| {
            let r = (images.column(k) - ritz.column(k) * theta[k]).norm();
            r <= RESIDUAL_TOL * theta[k].abs().max(1e-300)
        });
        let top = [theta[0], theta[1], theta[2]];
        let flat = theta[BLOCK - 1] >= FLAT_RATIO * theta[2];
        let stalled = flat
            && prev_theta
                .is_some_and(|p| (0..3).all(|k| (top[k] - p[k]).abs() <= RITZ_TOL * top[k].abs()));
        prev_theta = Some(top);
        best = (
            std::array::from_fn(|k| ritz.column(k).iter().copied().collect()),
            std::array::from_fn(|k| theta[k].max(0.0)),
        );
        if converged || stalled || theta[0] <= ABS_RANK_TOL {
            break;
        }
        q = orthonormalize(images);
    }
    best
}

/// Principal axes of the row vectors of an N×N matrix, sign-fixed so each
/// axis's largest-magnitude loading is positive.
pub fn principal_components(matrix: &[f32], n: usize) -> Pca {
    assert_eq!(matrix.len(), n * n);
    let mean = column_means(matrix, n);
    let (mut components, mut variances) = if n <= DENSE_LIMIT {
        dense_top3(matrix, n, &mean)
    } else {
        iterative_top3(matrix, n, &mean)
    };

    let top = variances[0];
    let mut rank = 0;
    for k in 0..3 {
        if components[k].len() != n
            || variances[k] <= ABS_RANK_TOL
            || variances[k] <= RANK_TOL * top
        {
            components[k] = vec![0.0; n];
            variances[k] = 0.0;
            continue;
        }
        rank += 1;
        let v = &mut components[k];
        let (mut arg, mut best) = (0, -1.0);
        for (i, x) in v.iter().enumerate() {
            if x.abs() > best {
                best = x.abs();
                arg = i;
            }
        }
        if v[arg] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }

    let offsets: [f64; 3] = std::array::from_fn(|k| dot(&mean, &components[k]));
    let scores = matrix
        .chunks_exact(n)
        .map(|row| {
            std::array::from_fn(|k| {
                let c = &components[k];
                row.iter().zip(c).map(|(&x, &v)| x as f64 * v).sum::<f64>() - offsets[k]
            })
        })
        .collect();
    Pca {
        components,
        variances,
        rank,
        scores,
    }
}

/// Projects the rows of one head's self-attention onto their top three
/// principal components and folds the three channels into one `[0, 1]` map.
///
/// Each channel is min-max normalized, the channels are averaged with equal
/// weight and the average is normalized again. Missing components (rank < 3)
/// contribute all-zero channels.
pub fn pca_grayscale(
    matrix: &[f32],
    grid_h: usize,
    grid_w: usize,
) -> Result<GrayscaleMap, HeadError> {
    let n = grid_h * grid_w;
    if n < 4 || matrix.len() != n * n {
        return Err(HeadError::Shape(format!(
            "expected a {n}x{n} self-attention matrix with at least 4 positions, got {} values",
            matrix.len()
        )));
    }
    let pca = principal_components(matrix, n);
    Ok(grayscale_from_scores(&pca, grid_h, grid_w))
}

pub(crate) fn grayscale_from_scores(pca: &Pca, grid_h: usize, grid_w: usize) -> GrayscaleMap {
    let n = grid_h * grid_w;
    let mut gray = vec![0.0; n];
    for k in 0..3 {
        if k >= pca.rank {
            continue;
        }
        let mut channel: Vec<f64> = pca.scores.iter().map(|s| s[k]).collect();
        min_max_normalize(&mut channel);
        gray.iter_mut()
            .zip(&channel)
            .for_each(|(g, c)| *g += c / 3.0);
    }
    let mut map = GrayscaleMap::new(grid_h, grid_w, gray);
    map.normalize_min_max();
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_rows_give_zero_map() {
        let row = [0.1f32, 0.2, 0.3, 0.4];
        let m: Vec<f32> = row.repeat(4);
        let map = pca_grayscale(&m, 2, 2).unwrap();
        assert!(map.values.iter().all(|&v| v == 0.0));
        assert_eq!(principal_components(&m, 4).rank, 0);
    }

    #[test]
    fn two_clusters_give_two_levels() {
        // Pixels 0,1 attend to each other; pixels 2,3 to each other.
        let a = [0.45f32, 0.45, 0.05, 0.05];
        let b = [0.05f32, 0.05, 0.45, 0.45];
        let m: Vec<f32> = [a, a, b, b].concat();
        let pca = principal_components(&m, 4);
        assert_eq!(pca.rank, 1);
        let map = pca_grayscale(&m, 2, 2).unwrap();
        let mut distinct = map.values.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        assert_eq!(distinct, vec![0.0, 1.0]);
        assert_eq!(map.values[0], map.values[1]);
        assert_eq!(map.values[2], map.values[3]);
        assert_ne!(map.values[0], map.values[2]);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(pca_grayscale(&[1.0; 9], 1, 3).is_err());
        assert!(pca_grayscale(&[1.0; 15], 2, 2).is_err());
    }

    fn clustered_matrix(n: usize, labels: &[usize], seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = vec![0f32; n * n];
        for i in 0..n {
            let row = &mut m[i * n..(i + 1) * n];
            let mut sum = 0.0;
            for j in 0..n {
                let noise = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
                let logit = if labels[i] == labels[j] { 3.0 } else { 0.0 } + 0.3 * noise;
                let w = f64::exp(logit);
                row[j] = w as f32;
                sum += w;
            }
            row.iter_mut().for_each(|v| *v = (*v as f64 / sum) as f32);
        }
        m
    }

    #[test]
    fn iterative_path_agrees_with_dense() {
        // 300 positions forces the iterative solver; compare against the dense one.
        let n = 300;
        let labels: Vec<usize> = (0..n).map(|i| (i / 40).min(5)).collect();
        let m = clustered_matrix(n, &labels, 3);
        let mean = column_means(&m, n);
        let (dense, dense_var) = dense_top3(&m, n, &mean);
        let fast = principal_components(&m, n);
        for k in 0..3 {
            assert!(
                (dense_var[k] - fast.variances[k]).abs() <= 1e-8 * dense_var[0],
                "variance {k}"
            );
            let d = dot(&dense[k], &fast.components[k]).abs();
            assert!((1.0 - d).abs() < 1e-8, "axis {k} alignment {d}");
        }
    }

    #[test]
    fn iterative_path_handles_low_rank() {
        // Two exact row types: rank one after centering, so the start block
        // collapses onto a single direction after the first sweep.
        let n = 320;
        let labels: Vec<usize> = (0..n).map(|i| usize::from(i % 7 == 0)).collect();
        let mut m = vec![0f32; n * n];
        for i in 0..n {
            let hits = labels.iter().filter(|&&l| l == labels[i]).count() as f32;
            for j in 0..n {
                if labels[j] == labels[i] {
                    m[i * n + j] = 1.0 / hits;
                }
            }
        }
        let mean = column_means(&m, n);
        let (dense, _) = dense_top3(&m, n, &mean);
        let fast = principal_components(&m, n);
        assert_eq!(fast.rank, 1);
        assert!((1.0 - dot(&dense[0], &fast.components[0]).abs()).abs() < 1e-10);
        assert!(fast.components[1]
            .iter()
            .chain(&fast.components[2])
            .all(|&x| x == 0.0));
        let map = grayscale_from_scores(&fast, 16, 20);
        assert!(map
            .values
            .iter()
            .zip(&labels)
            .all(|(&v, &l)| v == if l == 1 { 1.0 } else { 0.0 }));
    }
}
