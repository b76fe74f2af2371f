//! Diagonal-covariance Gaussian mixture fitted by expectation maximization.
//!
//! Means are seeded with k-means++, variances start at the pooled per-dimension
//! variance and weights start uniform. EM stops once the relative
//! log-likelihood gain drops below [`REL_TOL`] or after [`MAX_ITER`] rounds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-6;
pub const MAX_ITER: usize = 200;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub kappa: usize,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    /// Log-likelihood of the data under the returned parameters.
    pub loglik: f64,
    /// Log-likelihood after every E-step, first entry at initialization.
    pub history: Vec<f64>,
}

impl GmmModel {
    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    fn component_log_density(&self, k: usize, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((&xi, &mu), &var) in x.iter().zip(&self.means[k]).zip(&self.variances[k]) {
            let d = xi - mu;
            acc += LN_2PI + var.ln() + d * d / var;
        }
        -0.5 * acc
    }

    /// Posterior component probabilities for one point.
    pub fn responsibilities(&self, x: &[f64]) -> Vec<f64> {
        let logs: Vec<f64> = (0..self.kappa)
            .map(|k| self.weights[k].ln() + self.component_log_density(k, x))
            .collect();
        let lse = log_sum_exp(&logs);
        logs.iter().map(|l| (l - lse).exp()).collect()
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    let mut dist: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let idx = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                if r < d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[idx].clone());
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }
    centers
}

/// Fits a `kappa`-component mixture. When there are fewer points than
/// components the component count is capped at the number of points.
pub fn fit_gmm(points: &[Vec<f64>], kappa: usize, seed: u64) -> Result<GmmModel> {
    if points.is_empty() {
        return Err(Error::invalid("fit_gmm needs at least one point"));
    }
    if kappa == 0 {
        return Err(Error::invalid("fit_gmm needs kappa >= 1"));
    }
    let d = points[0].len();
    if let Some((i, p)) = points.iter().enumerate().find(|(_, p)| p.len() != d) {
        return Err(Error::shape(
            "fit_gmm",
            format!("point {} has dimension {}, expected {}", i, p.len(), d),
        ));
    }
    let n = points.len();
    let k = kappa.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut pooled = vec![0.0; d];
    let mean: Vec<f64> = (0..d)
        .map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64)
        .collect();
    for p in points {
        for j in 0..d {
            pooled[j] += (p[j] - mean[j]).powi(2) / n as f64;
        }
    }
    for v in pooled.iter_mut() {
        *v = v.max(VARIANCE_FLOOR);
    }

    let mut model = GmmModel {
        kappa: k,
        means: kmeans_pp(points, k, &mut rng),
        variances: vec![pooled; k],
        weights: vec![1.0 / k as f64; k],
        loglik: f64::NEG_INFINITY,
        history: Vec::new(),
    };

    let mut resp = vec![vec![0.0; k]; n];
    for iter in 0..MAX_ITER {
        // E-step
        let mut ll = 0.0;
        for (x, r) in points.iter().zip(resp.iter_mut()) {
            for (kk, slot) in r.iter_mut().enumerate() {
                *slot = model.weights[kk].ln() + model.component_log_density(kk, x);
            }
            let lse = log_sum_exp(r);
            ll += lse;
            for slot in r.iter_mut() {
                *slot = (*slot - lse).exp();
            }
        }
        if !ll.is_finite() {
            return Err(Error::NonFinite { op: "fit_gmm" });
        }
        model.loglik = ll;
        model.history.push(ll);
        if iter > 0 {
            let prev = model.history[iter - 1];
            if (ll - prev) < REL_TOL * prev.abs().max(f64::MIN_POSITIVE) {
                break;
            }
        }
        if iter + 1 == MAX_ITER {
            break;
        }

        // M-step
        for kk in 0..k {
            let nk: f64 = resp.iter().map(|r| r[kk]).sum();
            if nk <= 1e-12 {
                // Empty component: leave it where it is, with negligible weight.
                model.weights[kk] = 1e-12 / n as f64;
                continue;
            }
            model.weights[kk] = nk / n as f64;
            let mu: Vec<f64> = (0..d)
                .map(|j| points.iter().zip(&resp).map(|(p, r)| r[kk] * p[j]).sum::<f64>() / nk)
                .collect();
            let var: Vec<f64> = (0..d)
                .map(|j| {
                    let v = points
                        .iter()
                        .zip(&resp)
                        .map(|(p, r)| r[kk] * (p[j] - mu[j]).powi(2))
                        .sum::<f64>()
                        / nk;
                    v.max(VARIANCE_FLOOR)
                })
                .collect();
            model.means[kk] = mu;
            model.variances[kk] = var;
        }
        let wsum: f64 = model.weights.iter().sum();
        for w in model.weights.iter_mut() {
            *w /= wsum;
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn blobs(seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let mut pts = Vec::new();
        for c in [0.0, 10.0] {
            for _ in 0..50 {
                pts.push(vec![c + noise.sample(&mut rng), c + noise.sample(&mut rng)]);
            }
        }
        pts
    }

    #[test]
    fn single_component_is_sample_mean() {
        let pts = vec![vec![1.0, 2.0], vec![3.0, 6.0], vec![5.0, 1.0]];
        let m = fit_gmm(&pts, 1, 0).unwrap();
        assert_eq!(m.weights, vec![1.0]);
        assert!((m.means[0][0] - 3.0).abs() < 1e-12);
        assert!((m.means[0][1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn recovers_two_blobs() {
        let m = fit_gmm(&blobs(3), 2, 11).unwrap();
        let mut found = [false, false];
        for mu in &m.means {
            for (i, c) in [0.0, 10.0].iter().enumerate() {
                if mu.iter().all(|v| (v - c).abs() < 0.2) {
                    found[i] = true;
                }
            }
        }
        assert_eq!(found, [true, true], "{:?}", m.means);
        assert!((m.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn kappa_capped_at_point_count() {
        let pts = vec![vec![0.0], vec![1.0], vec![5.0]];
        let m = fit_gmm(&pts, 8, 1).unwrap();
        assert_eq!(m.kappa, 3);
        assert_eq!(m.means.len(), 3);
    }

    #[test]
    fn loglik_never_decreases() {
        for seed in 0..10 {
            let m = fit_gmm(&blobs(100 + seed), 3, seed).unwrap();
            for w in m.history.windows(2) {
                assert!(w[1] >= w[0] - 1e-9, "{:?}", m.history);
            }
            assert!(m.variances.iter().flatten().all(|&v| v >= VARIANCE_FLOOR));
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let pts = vec![vec![0.0, 1.0], vec![1.0]];
        assert!(fit_gmm(&pts, 1, 0).is_err());
    }

    #[test]
    fn deterministic_for_seed() {
        let pts = blobs(9);
        assert_eq!(fit_gmm(&pts, 2, 5).unwrap(), fit_gmm(&pts, 2, 5).unwrap());
    }
}
