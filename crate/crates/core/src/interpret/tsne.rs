//! Exact t-SNE.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to joint and low-dimensional affinities.
const P_FLOOR: f64 = 1e-12;
/// Bandwidth search stops once the entropy error falls below this (bits).
const ENTROPY_TOL: f64 = 1e-7;
const MAX_SEARCH_STEPS: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch: usize,
    pub min_gain: f64,
    /// Standard deviation of the Gaussian initialisation.
    pub init_std: f64,
    /// The KL divergence is recorded after every this many iterations.
    pub kl_every: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            min_gain: 0.01,
            init_std: 1e-4,
            kl_every: 50,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsneResult {
    pub coords: Vec<[f64; 2]>,
    /// `(iteration, KL(P || Q))`, iterations counted from 1.
    pub kl_trace: Vec<(usize, f64)>,
    /// Largest per-row deviation of the conditional entropy from
    /// `log2(perplexity)`, in bits.
    pub max_entropy_error: f64,
}

impl TsneResult {
    pub fn kl_at(&self, iteration: usize) -> Option<f64> {
        self.kl_trace.iter().find(|(i, _)| *i == iteration).map(|(_, kl)| *kl)
    }
}

fn squared_distances(x: &[Vec<f64>]) -> Vec<f64> {
    let n = x.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = s;
            d[j * n + i] = s;
        }
    }
    d
}

/// Conditional distribution of row `i` at precision `beta` and its entropy in bits.
fn row_entropy(dist: &[f64], i: usize, beta: f64, row: &mut [f64]) -> f64 {
    let dmin = dist
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, &d)| d)
        .fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    let mut weighted = 0.0;
    for (j, (&d, p)) in dist.iter().zip(row.iter_mut()).enumerate() {
        if j == i {
            *p = 0.0;
            continue;
        }
        let shifted = d - dmin;
        *p = (-beta * shifted).exp();
        sum += *p;
        weighted += shifted * *p;
    }
    for p in row.iter_mut() {
        *p /= sum;
    }
    (sum.ln() + beta * weighted / sum) / std::f64::consts::LN_2
}

/// Per-row conditionals whose entropies match `log2(perplexity)`, found by
/// bisection on the Gaussian precision. Returns the row-major matrix and the
/// largest remaining entropy error.
pub fn conditional_affinities(x: &[Vec<f64>], perplexity: f64) -> (Vec<f64>, f64) {
    let n = x.len();
    let dist = squared_distances(x);
    let target = perplexity.log2();
    let mut p = vec![0.0; n * n];
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let d = &dist[i * n..(i + 1) * n];
        let row = &mut p[i * n..(i + 1) * n];
        let (mut beta, mut lo, mut hi) = (1.0, 0.0, f64::INFINITY);
        let mut h = row_entropy(d, i, beta, row);
        for _ in 0..MAX_SEARCH_STEPS {
            if (h - target).abs() < ENTROPY_TOL {
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
            h = row_entropy(d, i, beta, row);
        }
        worst = worst.max((h - target).abs());
    }
    (p, worst)
}

fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pij, _)| pij > 0.0)
        .map(|(&pij, &qij)| pij * (pij / qij).ln())
        .sum()
}

/// Embeds `features` (N x d) in two dimensions with exact t-SNE.
pub fn tsne_embed(features: &[Vec<f64>], cfg: &TsneConfig) -> Result<TsneResult> {
    let n = features.len();
    if n < 2 {
        return Err(Error::arg("t-SNE needs at least 2 points"));
    }
    if !(cfg.perplexity > 0.0 && cfg.perplexity < n as f64) {
        return Err(Error::arg(format!("perplexity {} must lie in (0, {n})", cfg.perplexity)));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d || f.iter().any(|v| !v.is_finite())) {
        return Err(Error::arg("t-SNE features must be finite and of equal length"));
    }

    let (cond, max_entropy_error) = conditional_affinities(features, cfg.perplexity);
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(P_FLOOR);
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Normal::new(0.0, cfg.init_std).map_err(|e| Error::arg(e.to_string()))?;
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [init.sample(&mut rng), init.sample(&mut rng)]).collect();
    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0; 2]; n];
    let mut num = vec![0.0; n * n];
    let mut q = vec![0.0; n * n];
    let mut kl_trace = Vec::new();

    for iter in 0..cfg.iterations {
        let exaggeration = if iter < cfg.exaggeration_iterations { cfg.early_exaggeration } else { 1.0 };
        let momentum = if iter < cfg.momentum_switch { cfg.initial_momentum } else { cfg.final_momentum };

        let mut total = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let v = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i * n + j] = v;
                num[j * n + i] = v;
                total += 2.0 * v;
            }
        }
        for (qij, &v) in q.iter_mut().zip(&num) {
            *qij = (v / total).max(P_FLOOR);
        }
        for i in 0..n {
            q[i * n + i] = 0.0;
        }

        for i in 0..n {
            let mut grad = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let k = i * n + j;
                let m = (exaggeration * p[k] - q[k]) * num[k];
                grad[0] += m * (y[i][0] - y[j][0]);
                grad[1] += m * (y[i][1] - y[j][1]);
            }
            for c in 0..2 {
                let g = 4.0 * grad[c];
                let gain: f64 = if (g > 0.0) != (update[i][c] > 0.0) {
                    gains[i][c] + 0.2
                } else {
                    gains[i][c] * 0.8
                };
                gains[i][c] = gain.max(cfg.min_gain);
                update[i][c] = momentum * update[i][c] - cfg.learning_rate * gains[i][c] * g;
            }
        }
        for (yi, u) in y.iter_mut().zip(&update) {
            yi[0] += u[0];
            yi[1] += u[1];
        }
        let mean = y.iter().fold([0.0; 2], |m, v| [m[0] + v[0], m[1] + v[1]]);
        for yi in &mut y {
            yi[0] -= mean[0] / n as f64;
            yi[1] -= mean[1] / n as f64;
        }

        if cfg.kl_every > 0 && (iter + 1) % cfg.kl_every == 0 {
            kl_trace.push((iter + 1, kl_divergence(&p, &low_dim_affinities(&y))));
        }
    }
    Ok(TsneResult {
        coords: y,
        kl_trace,
        max_entropy_error,
    })
}

fn low_dim_affinities(y: &[[f64; 2]]) -> Vec<f64> {
    let n = y.len();
    let mut q = vec![0.0; n * n];
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                q[i * n + j] = 1.0 / (1.0 + dx * dx + dy * dy);
                total += q[i * n + j];
            }
        }
    }
    for (k, v) in q.iter_mut().enumerate() {
        if k % (n + 1) != 0 {
            *v = (*v / total).max(P_FLOOR);
        }
    }
    q
}

/// Fraction of points whose nearest other point shares their label.
pub fn nearest_neighbor_agreement<L: PartialEq>(coords: &[[f64; 2]], labels: &[L]) -> f64 {
    let n = coords.len();
    let mut agree = 0;
    for i in 0..n {
        let nn = (0..n)
            .filter(|&j| j != i)
            .min_by(|&a, &b| {
                let da = (coords[a][0] - coords[i][0]).powi(2) + (coords[a][1] - coords[i][1]).powi(2);
                let db = (coords[b][0] - coords[i][0]).powi(2) + (coords[b][1] - coords[i][1]).powi(2);
                da.total_cmp(&db)
            })
            .expect("at least two points");
        agree += (labels[nn] == labels[i]) as usize;
    }
    agree as f64 / n as f64
}
