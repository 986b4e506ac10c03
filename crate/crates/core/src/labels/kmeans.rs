//! Lloyd's k-means with k-means++ seeding, deterministic under a fixed seed.

use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::errors::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which features a codebook was fit on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CodebookSource {
    Mfcc,
    Layer(usize),
}

/// Cluster centroids plus provenance.
#[derive(Clone, Debug)]
pub struct Codebook<F> {
    pub centroids: Tensor<F>,
    pub source: CodebookSource,
}

impl<F: Scalar> Codebook<F> {
    pub fn n_clusters(&self) -> usize {
        self.centroids.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.centroids.shape()[1]
    }
}

fn sq_dist<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut acc = F::zero();
    for (x, y) in a.iter().zip(b) {
        let d = *x - *y;
        acc = acc + d * d;
    }
    acc
}

fn nearest<F: Scalar>(point: &[F], centroids: &[F], c: usize, d: usize) -> (usize, F) {
    let mut best = 0usize;
    let mut best_d = sq_dist(point, &centroids[0..d]);
    for j in 1..c {
        let dist = sq_dist(point, &centroids[j * d..(j + 1) * d]);
        if dist < best_d {
            best_d = dist;
            best = j;
        }
    }
    (best, best_d)
}

/// k-means++ initialization.
fn init_plus_plus<F: Scalar>(
    data: &[F],
    n: usize,
    d: usize,
    c: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<F> {
    let mut centroids = vec![F::zero(); c * d];
    let first = Uniform::new(0, n).sample(rng);
    centroids[0..d].copy_from_slice(&data[first * d..(first + 1) * d]);
    let mut dists: Vec<f64> = (0..n)
        .map(|i| sq_dist(&data[i * d..(i + 1) * d], &centroids[0..d]).as_f64())
        .collect();
    for j in 1..c {
        let total: f64 = dists.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in dists.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            Uniform::new(0, n).sample(rng)
        };
        let row = &data[pick * d..(pick + 1) * d];
        centroids[j * d..(j + 1) * d].copy_from_slice(row);
        for i in 0..n {
            let nd = sq_dist(&data[i * d..(i + 1) * d], row).as_f64();
            if nd < dists[i] {
                dists[i] = nd;
            }
        }
    }
    centroids
}

/// Fit `c` clusters on `[n, d]` features. Lloyd iterations stop when every
/// centroid moves less than `tol` (Euclidean) or after `max_iters`. Empty
/// clusters are re-seeded to the point currently farthest from its centroid.
pub fn kmeans_fit<F: Scalar>(
    features: &Tensor<F>,
    c: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
    source: CodebookSource,
) -> Result<Codebook<F>> {
    let (n, d) = (features.shape()[0], features.shape()[1]);
    if n < c {
        return Err(Error::TooFewPoints {
            points: n,
            clusters: c,
        });
    }
    if c == 0 {
        return Err(Error::InvalidConfig("k-means needs at least one cluster".into()));
    }
    let data = features.data();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = init_plus_plus(data, n, d, c, &mut rng);
    let mut assign = vec![0usize; n];
    let mut prev_distortion = f64::INFINITY;
    for _iter in 0..max_iters {
        // assignment step
        let mut distortion = 0.0f64;
        for i in 0..n {
            let (j, dist) = nearest(&data[i * d..(i + 1) * d], &centroids, c, d);
            assign[i] = j;
            distortion += dist.as_f64();
        }
        assert!(
            distortion <= prev_distortion * (1.0 + 1e-9) + 1e-12,
            "Lloyd distortion increased: {prev_distortion} -> {distortion}"
        );
        prev_distortion = distortion;

        // update step
        let mut sums = vec![F::zero(); c * d];
        let mut counts = vec![0usize; c];
        for i in 0..n {
            let j = assign[i];
            counts[j] += 1;
            for l in 0..d {
                sums[j * d + l] = sums[j * d + l] + data[i * d + l];
            }
        }
        let mut new_centroids = centroids.clone();
        for j in 0..c {
            if counts[j] > 0 {
                let inv = F::one() / F::cst(counts[j] as f64);
                for l in 0..d {
                    new_centroids[j * d + l] = sums[j * d + l] * inv;
                }
            }
        }
        // re-seed empty clusters to the farthest points, one per cluster
        let mut claimed: Vec<usize> = Vec::new();
        for j in 0..c {
            if counts[j] == 0 {
                let mut far = None;
                let mut far_d = -1.0f64;
                for i in 0..n {
                    if claimed.contains(&i) {
                        continue;
                    }
                    let cur = sq_dist(
                        &data[i * d..(i + 1) * d],
                        &new_centroids[assign[i] * d..(assign[i] + 1) * d],
                    )
                    .as_f64();
                    if cur > far_d {
                        far_d = cur;
                        far = Some(i);
                    }
                }
                if let Some(i) = far {
                    new_centroids[j * d..(j + 1) * d].copy_from_slice(&data[i * d..(i + 1) * d]);
                    claimed.push(i);
                }
            }
        }

        let mut max_shift = 0.0f64;
        for j in 0..c {
            let shift = sq_dist(&centroids[j * d..(j + 1) * d], &new_centroids[j * d..(j + 1) * d])
                .as_f64()
                .sqrt();
            max_shift = max_shift.max(shift);
        }
        centroids = new_centroids;
        if max_shift < tol {
            break;
        }
    }
    Ok(Codebook {
        centroids: Tensor::new(vec![c, d], centroids)?,
        source,
    })
}

/// Nearest-centroid labels; ties break toward the lowest centroid index.
pub fn kmeans_assign<F: Scalar>(features: &Tensor<F>, cb: &Codebook<F>) -> Result<Vec<usize>> {
    if features.shape().len() != 2 || features.shape()[1] != cb.dim() {
        return Err(Error::DimMismatch {
            what: "k-means assignment features".into(),
            expected: cb.dim(),
            got: features.shape().last().copied().unwrap_or(0),
        });
    }
    let (n, d) = (features.shape()[0], features.shape()[1]);
    let c = cb.n_clusters();
    let data = features.data();
    Ok((0..n)
        .map(|i| nearest(&data[i * d..(i + 1) * d], cb.centroids.data(), c, d).0)
        .collect())
}

/// Total squared distance of every point to its assigned centroid.
pub fn distortion<F: Scalar>(features: &Tensor<F>, cb: &Codebook<F>) -> Result<f64> {
    let labels = kmeans_assign(features, cb)?;
    let d = cb.dim();
    Ok(features
        .data()
        .chunks_exact(d)
        .zip(&labels)
        .map(|(row, &j)| sq_dist(row, &cb.centroids.data()[j * d..(j + 1) * d]).as_f64())
        .sum())
}
