//! Slow, independent reference implementation of the round metrics.
//!
//! Nothing here calls into the fast path: the forward pass is a naive
//! per-sample loop, the covariance is formed with explicit means, every
//! eigenvalue comes from cyclic Jacobi rotations, and pairwise similarities
//! are plain double loops. Used by `fera oracle-check` and the test suites.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fera::{ClientUpdate, FilterConfig, MetricSet};
use crate::nn::MlpModel;

/// All eigenvalues of a symmetric matrix (row-major `n x n`), ascending.
pub fn jacobi_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    let total: f64 = m.iter().map(|v| v * v).sum();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        if off <= 1e-30 * total.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    eig.sort_by(f64::total_cmp);
    eig
}

fn naive_penultimate(model: &MlpModel, x: &[f64]) -> Vec<f64> {
    let dims = model.dims();
    let p = model.params().values();
    let rep = model.representation_layer();
    let mut act = x.to_vec();
    if rep == 0 {
        return act;
    }
    let mut offset = 0;
    for l in 0..rep {
        let (din, dout) = (dims[l], dims[l + 1]);
        let mut next = vec![0.0; dout];
        for (o, out) in next.iter_mut().enumerate() {
            let mut s = p[offset + din * dout + o];
            for (i, a) in act.iter().enumerate() {
                s += a * p[offset + i * dout + o];
            }
            *out = if s > 0.0 { s } else { 0.0 };
        }
        offset += din * dout + dout;
        act = next;
    }
    act
}

fn naive_cos(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..a.len() {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    ab / (aa.sqrt() * bb.sqrt() + 1e-12)
}

fn quantile7(xs: &[f64], p: f64) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = p * (s.len() as f64 - 1.0);
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
}

pub fn slow_metrics(
    updates: &[ClientUpdate],
    global: &MlpModel,
    root: &Dataset,
    cfg: &FilterConfig,
) -> Result<MetricSet> {
    let n_clients = updates.len();
    if n_clients < 2 {
        return Err(Error::invalid("oracle needs at least 2 clients"));
    }
    let rows = root.len();
    let h_global: Vec<Vec<f64>> = (0..rows)
        .map(|r| naive_penultimate(global, root.inputs().row(r)))
        .collect();
    let d = h_global[0].len();

    let mut sigma = Vec::new();
    let mut delta = Vec::new();
    for u in updates {
        let model = global.with_params(u.params.clone())?;
        let mut diff = vec![vec![0.0; d]; rows];
        for r in 0..rows {
            let h = naive_penultimate(&model, root.inputs().row(r));
            for k in 0..d {
                diff[r][k] = h[k] - h_global[r][k];
            }
        }
        let mut fro = 0.0;
        for row in &diff {
            for v in row {
                fro += v * v;
            }
        }
        delta.push(fro.sqrt());

        if rows < 2 {
            sigma.push(0.0);
            continue;
        }
        let mut mean = vec![0.0; d];
        for row in &diff {
            for k in 0..d {
                mean[k] += row[k] / rows as f64;
            }
        }
        let mut cov = vec![0.0; d * d];
        for a in 0..d {
            for b in 0..d {
                let mut s = 0.0;
                for row in &diff {
                    s += (row[a] - mean[a]) * (row[b] - mean[b]);
                }
                cov[a * d + b] = s / (rows as f64 - 1.0);
            }
        }
        let eig = jacobi_eigenvalues(&cov, d);
        sigma.push(eig.last().copied().unwrap_or(0.0).max(0.0));
    }

    let z = |xs: &[f64]| -> Vec<f64> {
        let med = quantile7(xs, 0.5);
        let iqr = quantile7(xs, 0.75) - quantile7(xs, 0.25);
        xs.iter().map(|x| (x - med) / (iqr + cfg.epsilon)).collect()
    };
    let sigma_norm = z(&sigma);
    let delta_norm = z(&delta);
    let s_comb = (0..n_clients)
        .map(|i| cfg.w_sigma * sigma_norm[i] + cfg.w_delta * delta_norm[i])
        .collect();

    let g = global.params().values();
    let das = updates
        .iter()
        .map(|u| (naive_cos(u.params.values(), g) + 1.0) / 2.0)
        .collect();
    let mut mutual_sim = vec![f64::NEG_INFINITY; n_clients];
    for i in 0..n_clients {
        for j in 0..n_clients {
            if i != j {
                let c = naive_cos(updates[i].params.values(), updates[j].params.values());
                if c > mutual_sim[i] {
                    mutual_sim[i] = c;
                }
            }
        }
    }
    let med = quantile7(&sigma, 0.5);
    let r = sigma
        .iter()
        .map(|s| if med < cfg.epsilon { 1.0 } else { s / (med + cfg.epsilon) })
        .collect();

    Ok(MetricSet {
        sigma,
        delta,
        sigma_norm,
        delta_norm,
        s_comb,
        das,
        mutual_sim,
        r,
    })
}

/// Largest disagreement between two metric sets, per metric.
///
/// Raw metrics use `|a - b| / max(|a|, |b|)` with a `1e-12` floor on the
/// denominator. The robust z-scores (`sigma_norm`, `delta_norm`, `s_comb`)
/// are unitless and centered at zero, so their denominator is floored at 1.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct OracleReport {
    pub sigma: f64,
    pub delta: f64,
    pub sigma_norm: f64,
    pub delta_norm: f64,
    pub s_comb: f64,
    pub das: f64,
    pub mutual_sim: f64,
    pub r: f64,
}

impl OracleReport {
    pub fn max(&self) -> f64 {
        [
            self.sigma,
            self.delta,
            self.sigma_norm,
            self.delta_norm,
            self.s_comb,
            self.das,
            self.mutual_sim,
            self.r,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    pub fn merge(&self, other: &OracleReport) -> OracleReport {
        OracleReport {
            sigma: self.sigma.max(other.sigma),
            delta: self.delta.max(other.delta),
            sigma_norm: self.sigma_norm.max(other.sigma_norm),
            delta_norm: self.delta_norm.max(other.delta_norm),
            s_comb: self.s_comb.max(other.s_comb),
            das: self.das.max(other.das),
            mutual_sim: self.mutual_sim.max(other.mutual_sim),
            r: self.r.max(other.r),
        }
    }

    pub fn zero() -> OracleReport {
        OracleReport {
            sigma: 0.0,
            delta: 0.0,
            sigma_norm: 0.0,
            delta_norm: 0.0,
            s_comb: 0.0,
            das: 0.0,
            mutual_sim: 0.0,
            r: 0.0,
        }
    }
}

fn max_rel(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn compare(fast: &MetricSet, slow: &MetricSet) -> OracleReport {
    OracleReport {
        sigma: max_rel(&fast.sigma, &slow.sigma, 1e-12),
        delta: max_rel(&fast.delta, &slow.delta, 1e-12),
        sigma_norm: max_rel(&fast.sigma_norm, &slow.sigma_norm, 1.0),
        delta_norm: max_rel(&fast.delta_norm, &slow.delta_norm, 1.0),
        s_comb: max_rel(&fast.s_comb, &slow.s_comb, 1.0),
        das: max_rel(&fast.das, &slow.das, 1e-12),
        mutual_sim: max_rel(&fast.mutual_sim, &slow.mutual_sim, 1e-12),
        r: max_rel(&fast.r, &slow.r, 1e-12),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_small() {
        let e = jacobi_eigenvalues(&[2.0, 2.0, 2.0, 2.0], 2);
        assert!(e[0].abs() < 1e-12 && (e[1] - 4.0).abs() < 1e-12);
        let e = jacobi_eigenvalues(&[5.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0], 3);
        assert_eq!(e, vec![1.0, 2.0, 5.0]);
    }

    #[test]
    fn quantile_rule() {
        assert_eq!(quantile7(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.25), 2.0);
        assert_eq!(quantile7(&[1.0, 2.0, 3.0, 4.0], 0.5), 2.5);
    }
}
