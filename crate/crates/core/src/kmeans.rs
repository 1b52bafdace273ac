//! Lloyd's k-means with seeded k-means++ initialization.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct KMeansFit {
    /// `[k × dim]` cluster centers.
    pub centers: Tensor,
    /// Inertia after each assignment step, first entry from the seeding.
    pub inertia: Vec<f64>,
    pub assignment: Vec<usize>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Sum of squared distances from each point to its nearest center.
pub fn inertia(points: &Tensor, centers: &Tensor) -> Result<f64> {
    let (m, _) = points.dims2()?;
    let (k, _) = centers.dims2()?;
    Ok((0..m)
        .map(|i| {
            (0..k)
                .map(|c| sq_dist(points.row(i), centers.row(c)))
                .fold(f64::INFINITY, f64::min)
        })
        .sum())
}

/// Cluster centers of `points [M × dim]`.
pub fn kmeans(points: &Tensor, k: usize, seed: u64, max_iters: usize) -> Result<Tensor> {
    Ok(kmeans_fit(points, k, seed, max_iters)?.centers)
}

pub fn kmeans_fit(points: &Tensor, k: usize, seed: u64, max_iters: usize) -> Result<KMeansFit> {
    let (m, dim) = points.dims2()?;
    if k == 0 || m < k {
        return Err(Error::Config(format!("k-means needs 1 <= k <= points, got k={k}, points={m}")));
    }
    points.ensure_finite("kmeans")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding
    let mut centers: Vec<f64> = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..m);
    centers.extend_from_slice(points.row(first));
    let mut nearest: Vec<f64> = (0..m).map(|i| sq_dist(points.row(i), points.row(first))).collect();
    for _ in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = m - 1;
            for (i, d) in nearest.iter().enumerate() {
                if *d > 0.0 && target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            // guard against rounding walking off the end onto a zero-weight point
            if nearest[chosen] == 0.0 {
                chosen = nearest
                    .iter()
                    .enumerate()
                    .fold((0, -1.0), |best, (i, d)| if *d > best.1 { (i, *d) } else { best })
                    .0;
            }
            chosen
        } else {
            rng.gen_range(0..m)
        };
        centers.extend_from_slice(points.row(pick));
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(pick)));
        }
    }

    let mut assignment = vec![0usize; m];
    let mut history = Vec::new();
    for _ in 0..max_iters.max(1) {
        let mut dists = vec![0.0; m];
        for i in 0..m {
            let p = points.row(i);
            let (best, d) = (0..k)
                .map(|c| (c, sq_dist(p, &centers[c * dim..(c + 1) * dim])))
                .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
            assignment[i] = best;
            dists[i] = d;
        }
        history.push(dists.iter().sum());

        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..m {
            let c = assignment[i];
            counts[c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        let mut next = centers.clone();
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    next[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            }
        }
        // empty clusters move to the point farthest from its current center
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..m)
                    .map(|i| (i, sq_dist(points.row(i), &next[assignment[i] * dim..(assignment[i] + 1) * dim])))
                    .fold((0, -1.0), |best, x| if x.1 > best.1 { x } else { best })
                    .0;
                next[c * dim..(c + 1) * dim].copy_from_slice(points.row(far));
                assignment[far] = c;
            }
        }
        let converged = next == centers;
        centers = next;
        if converged {
            break;
        }
    }
    let centers = Tensor::new(&[k, dim], centers)?;
    history.push(inertia(points, &centers)?);
    Ok(KMeansFit {
        centers,
        inertia: history,
        assignment,
    })
}
