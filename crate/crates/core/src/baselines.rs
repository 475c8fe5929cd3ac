//! Reference aggregation rules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fera::ClientUpdate;
use crate::linalg;
use crate::nn::FlatParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AggregatorKind {
    Fedavg,
    /// `f` defaults to `ceil(0.1 * N)`, `m` to `N - f`.
    Multikrum {
        #[serde(default)]
        f: Option<usize>,
        #[serde(default)]
        m: Option<usize>,
    },
    CoordwiseMedian,
    Fera,
}

impl AggregatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            AggregatorKind::Fedavg => "fedavg",
            AggregatorKind::Multikrum { .. } => "multikrum",
            AggregatorKind::CoordwiseMedian => "coordwise_median",
            AggregatorKind::Fera => "fera",
        }
    }
}

fn check_lengths(updates: &[ClientUpdate], global: &FlatParams) -> Result<()> {
    if updates.is_empty() {
        return Err(Error::invalid("aggregation needs at least one client"));
    }
    if updates.iter().any(|u| u.params.len() != global.len()) {
        return Err(Error::invalid("client parameter length mismatch"));
    }
    Ok(())
}

/// Sample-size weighted mean of client deltas, scaled by `eta`.
pub fn fedavg(updates: &[ClientUpdate], global: &FlatParams, eta: f64) -> Result<FlatParams> {
    check_lengths(updates, global)?;
    let total: usize = updates.iter().map(|u| u.num_samples).sum();
    if total == 0 {
        return Err(Error::invalid("aggregation over zero samples"));
    }
    let g = global.values();
    let mut acc = vec![0.0; g.len()];
    for u in updates {
        let w = u.num_samples as f64 / total as f64;
        for ((s, t), gv) in acc.iter_mut().zip(u.params.values()).zip(g) {
            *s += w * (t - gv);
        }
    }
    global.with_values(g.iter().zip(&acc).map(|(gv, s)| gv + eta * s).collect())
}

pub fn default_krum_f(n: usize) -> usize {
    (n as f64 * 0.1).ceil() as usize
}

/// Krum scores: each client's summed squared distance to its `N - f - 2`
/// nearest peers.
pub fn krum_scores(vectors: &[&[f64]], f: usize) -> Result<Vec<f64>> {
    let n = vectors.len();
    if n < 2 * f + 3 {
        return Err(Error::invalid(format!(
            "multi-krum needs N >= 2f + 3 (N = {n}, f = {f})"
        )));
    }
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = vectors[i]
                .iter()
                .zip(vectors[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let k = n - f - 2;
    Ok((0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i * n + j]).collect();
            row.sort_by(f64::total_cmp);
            row[..k].iter().sum()
        })
        .collect())
}

/// The `m` lowest-scoring clients, ascending by index.
pub fn multi_krum(updates: &[ClientUpdate], f: usize, m: usize) -> Result<Vec<usize>> {
    let n = updates.len();
    if m == 0 || m > n.saturating_sub(f) {
        return Err(Error::invalid(format!(
            "multi-krum selection size {m} must be in 1..={}",
            n.saturating_sub(f)
        )));
    }
    let vecs: Vec<&[f64]> = updates.iter().map(|u| u.params.values()).collect();
    let scores = krum_scores(&vecs, f)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut chosen = order[..m].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Equal-weight mean of the selected clients' deltas, scaled by `eta`.
pub fn multi_krum_aggregate(
    updates: &[ClientUpdate],
    global: &FlatParams,
    f: usize,
    m: usize,
    eta: f64,
) -> Result<(FlatParams, Vec<usize>)> {
    check_lengths(updates, global)?;
    let selected = multi_krum(updates, f, m)?;
    let g = global.values();
    let mut acc = vec![0.0; g.len()];
    for &i in &selected {
        for ((s, t), gv) in acc.iter_mut().zip(updates[i].params.values()).zip(g) {
            *s += t - gv;
        }
    }
    let scale = eta / selected.len() as f64;
    let out = global.with_values(g.iter().zip(&acc).map(|(gv, s)| gv + scale * s).collect())?;
    Ok((out, selected))
}

/// Per-coordinate median of client deltas, scaled by `eta`.
pub fn coordwise_median(updates: &[ClientUpdate], global: &FlatParams, eta: f64) -> Result<FlatParams> {
    check_lengths(updates, global)?;
    let g = global.values();
    let mut column = Vec::with_capacity(updates.len());
    let mut out = Vec::with_capacity(g.len());
    for (j, gv) in g.iter().enumerate() {
        column.clear();
        column.extend(updates.iter().map(|u| u.params.values()[j] - gv));
        out.push(gv + eta * linalg::median(&column)?);
    }
    global.with_values(out)
}
