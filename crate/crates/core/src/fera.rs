//! Representation-space backdoor detection and graduated aggregation.
//!
//! One round proceeds in three steps:
//!
//! 1. [`compute_metrics`] probes every client model (and the broadcast global
//!    model) on the root set and derives six per-client scores.
//! 2. [`apply_filters`] runs the rank-based consistency filter and the
//!    MAD-based norm-inflation filter and assigns clip factors.
//! 3. [`aggregate`] applies the size-weighted, clip-scaled deltas.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::nn::{FlatParams, MlpModel};

/// A client's submitted parameters and its local sample count.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub params: FlatParams,
    pub num_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub tau_comb: f64,
    pub tau_das: f64,
    pub tau_mutual: f64,
    pub w_sigma: f64,
    pub w_delta: f64,
    pub mad_k: f64,
    /// Clip factor applied to flagged clients' deltas.
    pub beta: f64,
    pub epsilon: f64,
    pub consistency_enabled: bool,
    pub norm_inflation_enabled: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            tau_comb: 0.50,
            tau_das: 0.50,
            tau_mutual: 0.60,
            w_sigma: 0.6,
            w_delta: 0.4,
            mad_k: 6.0,
            beta: 0.1,
            epsilon: linalg::EPSILON,
            consistency_enabled: true,
            norm_inflation_enabled: true,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} must lie in [0, 1]")))
            }
        };
        unit("tau_comb", self.tau_comb)?;
        unit("tau_das", self.tau_das)?;
        unit("tau_mutual", self.tau_mutual)?;
        unit("beta", self.beta)?;
        if (self.w_sigma + self.w_delta - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "w_sigma + w_delta = {} must equal 1",
                self.w_sigma + self.w_delta
            )));
        }
        if !(self.mad_k > 0.0) {
            return Err(Error::Config("mad_k must be positive".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Per-client scores for one round, indexed by position in the update list.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSet {
    /// Largest eigenvalue of the representation-delta covariance.
    pub sigma: Vec<f64>,
    /// Frobenius norm of the representation delta.
    pub delta: Vec<f64>,
    pub sigma_norm: Vec<f64>,
    pub delta_norm: Vec<f64>,
    pub s_comb: Vec<f64>,
    /// Parameter cosine to the global model, mapped to `[0, 1]`.
    pub das: Vec<f64>,
    /// Highest parameter cosine to any other client.
    pub mutual_sim: Vec<f64>,
    /// `sigma` over the round median of `sigma`.
    pub r: Vec<f64>,
}

impl MetricSet {
    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    /// Reorders every column so that client `k` of the result is client
    /// `perm[k]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> MetricSet {
        let p = |v: &Vec<f64>| perm.iter().map(|&i| v[i]).collect();
        MetricSet {
            sigma: p(&self.sigma),
            delta: p(&self.delta),
            sigma_norm: p(&self.sigma_norm),
            delta_norm: p(&self.delta_norm),
            s_comb: p(&self.s_comb),
            das: p(&self.das),
            mutual_sim: p(&self.mutual_sim),
            r: p(&self.r),
        }
    }
}

/// `lambda_max` of the covariance of the column-centered delta. Fewer than
/// two probe rows give no covariance; that maps to 0.
pub fn spectral_score(delta: &Matrix) -> Result<f64> {
    let centered = linalg::center_rows(delta)?;
    match linalg::covariance(&centered) {
        Ok(c) => Ok(linalg::lambda_max(&c)?.value),
        Err(Error::DegenerateCovariance { .. }) => Ok(0.0),
        Err(e) => Err(e),
    }
}

/// Median/IQR z-scores.
pub fn robust_normalize(xs: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    let s = linalg::robust_stats(xs)?;
    Ok(xs.iter().map(|x| (x - s.median) / (s.iqr + epsilon)).collect())
}

/// For each vector, the maximum cosine similarity to any other vector.
pub fn mutual_similarity(params: &[&[f64]]) -> Result<Vec<f64>> {
    let n = params.len();
    if n < 2 {
        return Err(Error::invalid("mutual similarity needs at least 2 clients"));
    }
    let norms: Vec<f64> = params.iter().map(|p| linalg::norm2(p)).collect();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        f64::NAN
                    } else {
                        let c = linalg::dot(params[i], params[j]) / (norms[i] * norms[j] + linalg::EPSILON);
                        c.clamp(-1.0, 1.0)
                    }
                })
                .collect()
        })
        .collect();
    Ok(rows
        .iter()
        .map(|row| row.iter().filter(|v| !v.is_nan()).cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect())
}

/// Spectral ratios; a round whose median spectral score is below
/// `epsilon` carries no norm signal and every ratio is 1.
pub fn spectral_ratios(sigma: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    let med = linalg::median(sigma)?;
    if med < epsilon {
        return Ok(vec![1.0; sigma.len()]);
    }
    Ok(sigma.iter().map(|s| s / (med + epsilon)).collect())
}

pub fn compute_metrics(
    updates: &[ClientUpdate],
    global: &MlpModel,
    root: &Dataset,
    cfg: &FilterConfig,
) -> Result<MetricSet> {
    if updates.len() < 2 {
        return Err(Error::invalid("metrics need at least 2 clients"));
    }
    let p = global.params().len();
    if let Some(bad) = updates.iter().find(|u| u.params.len() != p) {
        return Err(Error::invalid(format!(
            "client parameter length {} != global {p}",
            bad.params.len()
        )));
    }
    let h_global = global.forward(root.inputs())?.penultimate;

    let rep: Vec<(f64, f64)> = updates
        .par_iter()
        .map(|u| -> Result<(f64, f64)> {
            let model = global.with_params(u.params.clone())?;
            let h = model.forward(root.inputs())?.penultimate;
            let delta = h.sub(&h_global)?;
            Ok((spectral_score(&delta)?, linalg::frobenius(&delta)))
        })
        .collect::<Result<_>>()?;
    let (sigma, delta): (Vec<f64>, Vec<f64>) = rep.into_iter().unzip();

    let sigma_norm = robust_normalize(&sigma, cfg.epsilon)?;
    let delta_norm = robust_normalize(&delta, cfg.epsilon)?;
    let s_comb = sigma_norm
        .iter()
        .zip(&delta_norm)
        .map(|(s, d)| cfg.w_sigma * s + cfg.w_delta * d)
        .collect();

    let theta_g = global.params().values();
    let das = updates
        .iter()
        .map(|u| Ok((linalg::cosine(u.params.values(), theta_g)? + 1.0) / 2.0))
        .collect::<Result<Vec<_>>>()?;
    let flat: Vec<&[f64]> = updates.iter().map(|u| u.params.values()).collect();
    let mutual_sim = mutual_similarity(&flat)?;
    let r = spectral_ratios(&sigma, cfg.epsilon)?;

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

/// Average fractional rank in `[0, 1]`: (strictly smaller values plus half
/// the other tied values) over `N - 1`. A single value ranks 0.5.
pub fn fractional_rank(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    if n < 2 {
        return vec![0.5; n];
    }
    values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let (mut below, mut ties) = (0usize, 0usize);
            for (j, w) in values.iter().enumerate() {
                if j == i {
                    continue;
                }
                if w < v {
                    below += 1;
                } else if w == v {
                    ties += 1;
                }
            }
            (below as f64 + 0.5 * ties as f64) / (n - 1) as f64
        })
        .collect()
}

/// Clients simultaneously in the low tail of combined score and DAS and the
/// high tail of mutual similarity. Returned in ascending order.
pub fn consistency_filter(m: &MetricSet, cfg: &FilterConfig) -> Vec<usize> {
    if !cfg.consistency_enabled {
        return Vec::new();
    }
    let comb = fractional_rank(&m.s_comb);
    let das = fractional_rank(&m.das);
    let mutual = fractional_rank(&m.mutual_sim);
    (0..m.len())
        .filter(|&i| comb[i] <= cfg.tau_comb && das[i] <= cfg.tau_das && mutual[i] >= cfg.tau_mutual)
        .collect()
}

/// Clients whose spectral ratio strictly exceeds `median + k * MAD`.
pub fn norm_inflation_filter(m: &MetricSet, cfg: &FilterConfig) -> Vec<usize> {
    if !cfg.norm_inflation_enabled || m.is_empty() {
        return Vec::new();
    }
    let stats = linalg::robust_stats(&m.r).expect("non-empty");
    let threshold = stats.median + cfg.mad_k * stats.mad;
    (0..m.len()).filter(|&i| m.r[i] > threshold).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionResult {
    pub flagged_consistency: Vec<usize>,
    pub flagged_norm: Vec<usize>,
    /// Union of both filters, ascending.
    pub flagged: Vec<usize>,
    /// Per-client clip factor: `beta` when flagged, otherwise 1.
    pub alpha: Vec<f64>,
}

impl DetectionResult {
    /// Builds the union and clip factors from the two flag lists.
    pub fn from_flags(n: usize, consistency: Vec<usize>, norm: Vec<usize>, beta: f64) -> Self {
        let mut flagged: Vec<usize> = consistency.iter().chain(&norm).copied().collect();
        flagged.sort_unstable();
        flagged.dedup();
        let mut alpha = vec![1.0; n];
        for &i in &flagged {
            alpha[i] = beta;
        }
        Self {
            flagged_consistency: consistency,
            flagged_norm: norm,
            flagged,
            alpha,
        }
    }

    pub fn is_flagged(&self, i: usize) -> bool {
        self.flagged.binary_search(&i).is_ok()
    }
}

pub fn apply_filters(m: &MetricSet, cfg: &FilterConfig) -> DetectionResult {
    DetectionResult::from_flags(
        m.len(),
        consistency_filter(m, cfg),
        norm_inflation_filter(m, cfg),
        cfg.beta,
    )
}

/// `global + eta * sum_i (n_i / sum_j n_j) * alpha_i * (theta_i - global)`.
pub fn aggregate(
    updates: &[ClientUpdate],
    global: &FlatParams,
    det: &DetectionResult,
    eta: f64,
) -> Result<FlatParams> {
    if det.alpha.len() != updates.len() {
        return Err(Error::invalid(format!(
            "{} clip factors for {} updates",
            det.alpha.len(),
            updates.len()
        )));
    }
    weighted_delta_step(updates, global, &det.alpha, eta)
}

pub(crate) fn weighted_delta_step(
    updates: &[ClientUpdate],
    global: &FlatParams,
    alpha: &[f64],
    eta: f64,
) -> Result<FlatParams> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::invalid(format!("server learning rate {eta} must be > 0")));
    }
    let total: usize = updates.iter().map(|u| u.num_samples).sum();
    if total == 0 {
        return Err(Error::invalid("aggregation over zero samples"));
    }
    let g = global.values();
    let mut acc = vec![0.0; g.len()];
    for (u, a) in updates.iter().zip(alpha) {
        if u.params.len() != g.len() {
            return Err(Error::invalid("client parameter length mismatch"));
        }
        let w = (u.num_samples as f64 / total as f64) * a;
        for ((s, t), gv) in acc.iter_mut().zip(u.params.values()).zip(g) {
            *s += w * (t - gv);
        }
    }
    global.with_values(g.iter().zip(&acc).map(|(gv, s)| gv + eta * s).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerShape;

    fn metrics(s_comb: &[f64], das: &[f64], mutual: &[f64], r: &[f64]) -> MetricSet {
        let n = s_comb.len();
        MetricSet {
            sigma: vec![1.0; n],
            delta: vec![1.0; n],
            sigma_norm: vec![0.0; n],
            delta_norm: vec![0.0; n],
            s_comb: s_comb.to_vec(),
            das: das.to_vec(),
            mutual_sim: mutual.to_vec(),
            r: r.to_vec(),
        }
    }

    fn fp(v: &[f64]) -> FlatParams {
        FlatParams::new(v.to_vec(), vec![LayerShape { d_in: 0, d_out: v.len() }]).unwrap()
    }

    #[test]
    fn fractional_rank_ties() {
        assert_eq!(fractional_rank(&[3.0, 1.0, 2.0]), vec![1.0, 0.0, 0.5]);
        assert_eq!(fractional_rank(&[7.0; 4]), vec![0.5; 4]);
        assert_eq!(fractional_rank(&[1.0, 1.0, 2.0]), vec![0.25, 0.25, 1.0]);
    }

    #[test]
    fn consistency_single_hit() {
        // client 2: lowest s_comb, lowest das, highest mutual
        let m = metrics(
            &[0.3, 0.1, -1.0, 0.5, -0.2],
            &[0.9, 0.2, 0.1, 0.95, 0.97],
            &[0.1, 0.2, 0.99, 0.5, 0.3],
            &[1.0; 5],
        );
        assert_eq!(consistency_filter(&m, &FilterConfig::default()), vec![2]);
    }

    #[test]
    fn consistency_all_tied_flags_nobody() {
        let m = metrics(&[0.0; 6], &[1.0; 6], &[0.5; 6], &[1.0; 6]);
        assert!(consistency_filter(&m, &FilterConfig::default()).is_empty());
    }

    #[test]
    fn consistency_two_clients() {
        // with N = 2 ranks are 0 or 1 (or 0.5 on ties); a flag needs
        // the lower s_comb, the lower das and the higher mutual
        let cfg = FilterConfig::default();
        let vals = [0.0, 1.0];
        let mut flagged_patterns = 0;
        for c in 0..2 {
            for d in 0..2 {
                for u in 0..2 {
                    let m = metrics(
                        &[vals[c], vals[1 - c]],
                        &[vals[d], vals[1 - d]],
                        &[vals[u], vals[1 - u]],
                        &[1.0, 1.0],
                    );
                    let f = consistency_filter(&m, &cfg);
                    let expect_0 = c == 0 && d == 0 && u == 1;
                    let expect_1 = c == 1 && d == 1 && u == 0;
                    assert_eq!(f.contains(&0), expect_0);
                    assert_eq!(f.contains(&1), expect_1);
                    flagged_patterns += f.len();
                }
            }
        }
        assert_eq!(flagged_patterns, 2);
    }

    #[test]
    fn norm_inflation_examples() {
        let cfg = FilterConfig::default();
        let m = metrics(&[0.0; 5], &[0.0; 5], &[0.0; 5], &[1.0, 1.0, 1.0, 1.0, 10.0]);
        assert_eq!(norm_inflation_filter(&m, &cfg), vec![4]);
        let m = metrics(&[0.0; 5], &[0.0; 5], &[0.0; 5], &[1.0, 1.1, 0.9, 1.05, 1.5]);
        assert_eq!(norm_inflation_filter(&m, &cfg), vec![4]);
        let m = metrics(&[0.0; 4], &[0.0; 4], &[0.0; 4], &[2.0; 4]);
        assert!(norm_inflation_filter(&m, &cfg).is_empty());
    }

    #[test]
    fn detection_union() {
        let d = DetectionResult::from_flags(5, vec![1], vec![3], 0.1);
        assert_eq!(d.flagged, vec![1, 3]);
        assert_eq!(d.alpha, vec![1.0, 0.1, 1.0, 0.1, 1.0]);
        let d = DetectionResult::from_flags(4, vec![0, 2], vec![2], 0.1);
        assert_eq!(d.flagged, vec![0, 2]);
        let d = DetectionResult::from_flags(3, vec![], vec![], 0.1);
        assert_eq!(d.alpha, vec![1.0; 3]);
    }

    #[test]
    fn aggregate_hand_example() {
        // n = [1, 1, 2], eta = 0.5, client 1 flagged with beta = 0.1
        let g = fp(&[1.0, 2.0]);
        let ups = vec![
            ClientUpdate { params: fp(&[2.0, 2.0]), num_samples: 1 },  // delta [1, 0]
            ClientUpdate { params: fp(&[1.0, 6.0]), num_samples: 1 },  // delta [0, 4]
            ClientUpdate { params: fp(&[-1.0, 3.0]), num_samples: 2 }, // delta [-2, 1]
        ];
        let det = DetectionResult::from_flags(3, vec![1], vec![], 0.1);
        let out = aggregate(&ups, &g, &det, 0.5).unwrap();
        // sum = 0.25*[1,0] + 0.25*0.1*[0,4] + 0.5*[-2,1] = [-0.75, 0.6]
        let expect = [1.0 + 0.5 * -0.75, 2.0 + 0.5 * 0.6];
        for (a, b) in out.values().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn aggregate_cancellation_and_full_clip() {
        let g = fp(&[1.0, 1.0]);
        let ups = vec![
            ClientUpdate { params: fp(&[2.0, 0.0]), num_samples: 3 },
            ClientUpdate { params: fp(&[0.0, 2.0]), num_samples: 3 },
        ];
        let none = DetectionResult::from_flags(2, vec![], vec![], 1.0);
        assert_eq!(aggregate(&ups, &g, &none, 0.5).unwrap(), g);
        let all = DetectionResult::from_flags(2, vec![0, 1], vec![], 0.0);
        assert_eq!(aggregate(&ups, &g, &all, 0.5).unwrap(), g);
    }

    #[test]
    fn aggregate_zero_samples_is_error() {
        let g = fp(&[1.0, 1.0]);
        let ups = vec![ClientUpdate { params: fp(&[2.0, 0.0]), num_samples: 0 }];
        let det = DetectionResult::from_flags(1, vec![], vec![], 1.0);
        assert!(aggregate(&ups, &g, &det, 0.5).is_err());
    }

    #[test]
    fn mutual_identical_pair() {
        let a = [1.0, 2.0, 3.0];
        let b = [-1.0, 0.5, 0.0];
        let m = mutual_similarity(&[&a, &a, &b]).unwrap();
        assert!((m[0] - 1.0).abs() < 1e-12 && (m[1] - 1.0).abs() < 1e-12);
        assert!(mutual_similarity(&[&a]).is_err());
    }

    #[test]
    fn zero_median_ratio_guard() {
        assert_eq!(spectral_ratios(&[0.0, 0.0, 5.0], 1e-12).unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn config_validation() {
        assert!(FilterConfig::default().validate().is_ok());
        let bad = FilterConfig { w_sigma: 0.7, ..FilterConfig::default() };
        assert!(bad.validate().is_err());
        let bad = FilterConfig { beta: 1.5, ..FilterConfig::default() };
        assert!(bad.validate().is_err());
    }
}
