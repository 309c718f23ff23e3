//! Lloyd's algorithm with k-means++ seeding.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{self, tag};

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    /// `k×d`.
    pub centroids: Tensor,
    pub inertia: f64,
    /// Inertia after every assignment pass.
    pub inertia_trace: Vec<f64>,
    /// Clusters that ended with no members; their centroids are stale.
    pub empty_clusters: Vec<usize>,
    pub iterations: usize,
    pub seed: u64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

pub(crate) fn plus_plus<R: Rng + ?Sized>(x: &Tensor, k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = x.shape()[0];
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![x.row(first).to_vec()];
    let mut d2: Vec<f64> = x.rows().map(|r| sq_dist(r, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    if u < d {
                        pick = i;
                        break;
                    }
                    u -= d;
                    pick = i;
                }
            }
            pick
        } else {
            // Every point coincides with a centroid; take an unused index.
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        let c = x.row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), &c));
        }
        centroids.push(c);
    }
    centroids
}

/// One seeded run. Stops when no label changes, when the relative inertia
/// gain falls to `tol`, or after `max_iter` assignment passes.
pub fn kmeans(x: &Tensor, k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<ClusterAssignment> {
    let (n, d) = x.dims2("kmeans")?;
    if k == 0 || k > n {
        return Err(Error::Contract(format!("kmeans needs 1 ≤ k ≤ N, got k = {k}, N = {n}")));
    }
    if max_iter == 0 {
        return Err(Error::Config("kmeans max_iter must be positive".into()));
    }
    let mut rng = rng::stream(&[seed, tag::KMEANS]);
    let mut centroids = plus_plus(x, k, &mut rng);
    let mut labels = vec![usize::MAX; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut changed = false;
        let mut inertia = 0.0;
        for (i, row) in x.rows().enumerate() {
            let (j, dist) = nearest(row, &centroids);
            inertia += dist;
            if labels[i] != j {
                labels[i] = j;
                changed = true;
            }
        }
        let gain = trace.last().map(|&prev: &f64| prev - inertia);
        trace.push(inertia);
        let converged = !changed || gain.is_some_and(|g| g <= tol * inertia.max(f64::MIN_POSITIVE));
        if converged || iterations >= max_iter {
            break;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (row, &j) in x.rows().zip(&labels) {
            counts[j] += 1;
            for (s, v) in sums[j].iter_mut().zip(row) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
    }
    let mut counts = vec![0usize; k];
    for &j in &labels {
        counts[j] += 1;
    }
    let flat = centroids.into_iter().flatten().collect();
    Ok(ClusterAssignment {
        inertia: *trace.last().expect("at least one pass"),
        labels,
        centroids: Tensor::new(vec![k, d], flat)?,
        inertia_trace: trace,
        empty_clusters: (0..k).filter(|&j| counts[j] == 0).collect(),
        iterations,
        seed,
    })
}

/// Best of `restarts` runs with seeds derived from `seed`; ties go to the
/// earliest restart.
pub fn kmeans_restarts(
    x: &Tensor,
    k: usize,
    seed: u64,
    restarts: usize,
    max_iter: usize,
    tol: f64,
) -> Result<ClusterAssignment> {
    if restarts == 0 {
        return Err(Error::Config("kmeans restarts must be positive".into()));
    }
    let mut best: Option<ClusterAssignment> = None;
    for r in 0..restarts as u64 {
        let run = kmeans(x, k, rng::derive_seed(&[seed, r]), max_iter, tol)?;
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("restarts > 0"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn blobs() -> Tensor {
        let mut r = rng::stream(&[9]);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let c = if i < 20 { 0.0 } else { 100.0 };
                vec![c + noise.sample(&mut r), c + noise.sample(&mut r)]
            })
            .collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn k_equals_n_gives_zero_inertia() {
        let x = Tensor::from_rows(&[[0.0, 1.0], [2.0, 3.0], [4.0, 4.0], [-1.0, 0.0]]).unwrap();
        let a = kmeans(&x, 4, 1, 100, 0.0).unwrap();
        assert_eq!(a.inertia, 0.0);
        let mut l = a.labels.clone();
        l.sort();
        assert_eq!(l, vec![0, 1, 2, 3]);
    }

    #[test]
    fn separated_blobs_are_pure() {
        let a = kmeans(&blobs(), 2, 3, 100, 1e-9).unwrap();
        assert!(a.labels[..20].iter().all(|&l| l == a.labels[0]));
        assert!(a.labels[20..].iter().all(|&l| l == a.labels[20]));
        assert_ne!(a.labels[0], a.labels[20]);
        assert!(a.empty_clusters.is_empty());
    }

    #[test]
    fn beats_random_assignments_and_trace_is_monotone() {
        let mut r = rng::stream(&[10]);
        let rows: Vec<[f64; 2]> = (0..50).map(|_| [r.random::<f64>(), r.random::<f64>()]).collect();
        let x = Tensor::from_rows(&rows).unwrap();
        let a = kmeans_restarts(&x, 3, 4, 10, 300, 0.0).unwrap();
        for w in a.inertia_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        // Oracle: inertia of a random labeling measured against its own means.
        for _ in 0..100 {
            let labels: Vec<usize> = (0..50).map(|_| r.random_range(0..3)).collect();
            let mut inertia = 0.0;
            for j in 0..3 {
                let members: Vec<&[f64; 2]> = rows.iter().zip(&labels).filter(|(_, &l)| l == j).map(|(p, _)| p).collect();
                if members.is_empty() {
                    continue;
                }
                let m = [0, 1].map(|c| members.iter().map(|p| p[c]).sum::<f64>() / members.len() as f64);
                inertia += members.iter().map(|p| sq_dist(*p, &m)).sum::<f64>();
            }
            assert!(a.inertia <= inertia);
        }
    }

    #[test]
    fn duplicate_points_and_contracts() {
        let x = Tensor::from_rows(&[[1.0], [1.0], [1.0]]).unwrap();
        let a = kmeans(&x, 3, 0, 10, 0.0).unwrap();
        assert_eq!(a.inertia, 0.0);
        assert_eq!(a.empty_clusters.len(), 2);
        assert!(matches!(kmeans(&x, 4, 0, 10, 0.0), Err(Error::Contract(_))));
        assert!(matches!(kmeans(&x, 0, 0, 10, 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn restarts_are_deterministic() {
        let x = blobs();
        let a = kmeans_restarts(&x, 5, 8, 4, 50, 1e-9).unwrap();
        let b = kmeans_restarts(&x, 5, 8, 4, 50, 1e-9).unwrap();
        assert_eq!(a, b);
    }
}
