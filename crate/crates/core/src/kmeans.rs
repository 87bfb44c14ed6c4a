//! Lloyd's k-means with k-means++ seeding, used to initialise the clustering
//! head after the autoencoder warm-up.

use rand::Rng;

use crate::error::{DcgError, Result};
use crate::rng::stream_rng;
use crate::tape::Mat;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub labels: Vec<usize>,
    pub centroids: Mat,
    /// Sum of squared distances to the assigned centroid.
    pub inertia: f64,
}

fn sq_dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: ndarray::ArrayView1<'_, f64>, c: &Mat) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, row) in c.rows().into_iter().enumerate() {
        let d = sq_dist(x, row);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus<R: Rng>(x: &Mat, k: usize, rng: &mut R) -> Mat {
    let n = x.nrows();
    let mut c = Mat::zeros((k, x.ncols()));
    c.row_mut(0).assign(&x.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = x.rows().into_iter().map(|r| sq_dist(r, c.row(0))).collect();
    for j in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            d2.iter().position(|&d| {
                u -= d;
                u <= 0.0
            })
            .unwrap_or(n - 1)
        } else {
            rng.random_range(0..n)
        };
        c.row_mut(j).assign(&x.row(pick));
        for (i, r) in x.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, c.row(j)));
        }
    }
    c
}

/// Best of `restarts` seeded runs by inertia.
pub fn kmeans(x: &Mat, k: usize, restarts: usize, max_iter: usize, seed: u64) -> Result<KMeans> {
    let n = x.nrows();
    if k == 0 || k > n {
        return Err(DcgError::Argument(format!("k-means needs 1 <= k <= n, got k={k}, n={n}")));
    }
    let mut best: Option<KMeans> = None;
    for r in 0..restarts.max(1) {
        let mut rng = stream_rng(seed, &[0x4B4D, r as u64]);
        let mut c = plus_plus(x, k, &mut rng);
        let mut labels = vec![usize::MAX; n];
        for _ in 0..max_iter {
            let mut changed = false;
            for (i, row) in x.rows().into_iter().enumerate() {
                let (j, _) = nearest(row, &c);
                if labels[i] != j {
                    labels[i] = j;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            let mut sums = Mat::zeros(c.dim());
            let mut counts = vec![0usize; k];
            for (row, &l) in x.rows().into_iter().zip(&labels) {
                let mut s = sums.row_mut(l);
                s += &row;
                counts[l] += 1;
            }
            for j in 0..k {
                if counts[j] > 0 {
                    c.row_mut(j).assign(&(&sums.row(j) / counts[j] as f64));
                }
            }
        }
        let inertia = x.rows().into_iter().map(|row| nearest(row, &c).1).sum();
        let labels = x.rows().into_iter().map(|row| nearest(row, &c).0).collect();
        if best.as_ref().is_none_or(|b| inertia < b.inertia) {
            best = Some(KMeans { labels, centroids: c, inertia });
        }
    }
    Ok(best.expect("at least one restart"))
}
