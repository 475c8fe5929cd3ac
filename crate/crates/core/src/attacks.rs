//! Malicious client behaviour: what data a compromised client trains on and
//! how it rewrites its trained parameters before submission.

use serde::{Deserialize, Serialize};

use crate::data::{poisoned_rows, stamp_rows, Dataset, TriggerSpec};
use crate::error::{Error, Result};
use crate::linalg::norm2;
use crate::nn::FlatParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    None,
    /// Trigger-poisoned training data, honest submission.
    Badnet,
    /// Poisoned data plus model-replacement scaling of the update.
    Scaling,
    /// Each colluder embeds only its shard of the trigger.
    Dba,
    /// Poisoned data with ramped, blended, norm-clipped submissions.
    AdaptiveBadnet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DbaShard {
    pub index: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptiveParams {
    /// Submitted delta norm is capped at `(1 - clip_reduction)` of the honest one.
    pub clip_reduction: f64,
    /// Weight of the clean-data update in the blended direction.
    pub blend: f64,
    /// Rounds over which the attack ramps from 0 to full strength.
    pub ramp_rounds: usize,
    /// Rescale the blended delta to the norm of the clean-data update
    /// before clipping and ramping.
    pub norm_match: bool,
}

impl Default for AdaptiveParams {
    fn default() -> Self {
        Self {
            clip_reduction: 0.75,
            blend: 0.30,
            ramp_rounds: 10,
            norm_match: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub trigger: TriggerSpec,
    /// Defaults to `num_clients / num_malicious` when unset.
    #[serde(default)]
    pub scale_factor: Option<f64>,
    #[serde(default)]
    pub dba_shard: Option<DbaShard>,
    #[serde(default)]
    pub adaptive: AdaptiveParams,
}

impl AttackSpec {
    pub fn none(trigger: TriggerSpec) -> Self {
        Self {
            kind: AttackKind::None,
            trigger,
            scale_factor: None,
            dba_shard: None,
            adaptive: AdaptiveParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.scale_factor {
            if self.kind == AttackKind::Scaling && !(s >= 1.0 && s.is_finite()) {
                return Err(Error::invalid(format!("scale factor {s} must be >= 1")));
            }
        }
        if let Some(shard) = self.dba_shard {
            if shard.total == 0 || shard.index >= shard.total {
                return Err(Error::invalid(format!(
                    "dba shard {}/{} out of range",
                    shard.index, shard.total
                )));
            }
        }
        let a = &self.adaptive;
        if !(0.0..=1.0).contains(&a.clip_reduction) || !(0.0..=1.0).contains(&a.blend) {
            return Err(Error::invalid("adaptive clip_reduction and blend must lie in [0, 1]"));
        }
        Ok(())
    }

    /// The trigger this client actually embeds: the full trigger, or for
    /// DBA the coordinates at positions `p` with `p % total == index`.
    pub fn local_trigger(&self) -> TriggerSpec {
        match (self.kind, self.dba_shard) {
            (AttackKind::Dba, Some(shard)) => TriggerSpec {
                coordinates: self
                    .trigger
                    .coordinates
                    .iter()
                    .enumerate()
                    .filter(|(p, _)| p % shard.total == shard.index)
                    .map(|(_, &c)| c)
                    .collect(),
                ..self.trigger.clone()
            },
            _ => self.trigger.clone(),
        }
    }
}

/// Per-round information an attacker sees.
#[derive(Debug, Clone, Copy)]
pub struct RoundContext<'a> {
    pub round_index: usize,
    /// Rounds elapsed since the attack window opened (0 in its first round).
    pub attack_round: usize,
    pub global_params: &'a FlatParams,
    /// The same client's parameters after training on clean data this round.
    pub benign_proxy: Option<&'a FlatParams>,
}

/// The training set a malicious client uses. Unchanged for `AttackKind::None`.
pub fn poison_local_data(spec: &AttackSpec, client_data: &Dataset, seed: u64) -> Result<Dataset> {
    if spec.kind == AttackKind::None {
        return Ok(client_data.clone());
    }
    let trigger = spec.local_trigger();
    trigger.validate(client_data.dim(), client_data.num_classes())?;
    let rows = poisoned_rows(client_data.len(), trigger.poison_count(client_data.len()), seed);
    stamp_rows(client_data, &trigger, &rows)
}

/// Turns the honestly trained parameters into the submitted ones.
pub fn transform_update(spec: &AttackSpec, honest: &FlatParams, ctx: &RoundContext<'_>) -> Result<FlatParams> {
    let global = ctx.global_params;
    let delta = honest.delta_from(global)?;
    let submitted_delta = match spec.kind {
        AttackKind::None | AttackKind::Badnet | AttackKind::Dba => return Ok(honest.clone()),
        AttackKind::Scaling => {
            let s = spec.scale_factor.unwrap_or(1.0);
            delta.iter().map(|d| s * d).collect::<Vec<_>>()
        }
        AttackKind::AdaptiveBadnet => {
            let proxy = ctx
                .benign_proxy
                .ok_or_else(|| Error::invalid("adaptive attack needs a clean-data proxy update"))?
                .delta_from(global)?;
            adaptive_delta(&spec.adaptive, &delta, &proxy, ctx.attack_round)
        }
    };
    let values = global
        .values()
        .iter()
        .zip(&submitted_delta)
        .map(|(g, d)| g + d)
        .collect();
    global.with_values(values)
}

/// Blend toward the clean direction, optionally match its norm, clip the
/// norm to `(1 - clip_reduction) * |honest|`, then apply the ramp.
fn adaptive_delta(p: &AdaptiveParams, honest: &[f64], proxy: &[f64], attack_round: usize) -> Vec<f64> {
    let mut d: Vec<f64> = honest
        .iter()
        .zip(proxy)
        .map(|(h, b)| (1.0 - p.blend) * h + p.blend * b)
        .collect();
    if p.norm_match {
        let (n, target) = (norm2(&d), norm2(proxy));
        if n > 0.0 {
            d.iter_mut().for_each(|x| *x *= target / n);
        }
    }
    let bound = (1.0 - p.clip_reduction) * norm2(honest);
    let n = norm2(&d);
    if n > bound && n > 0.0 {
        d.iter_mut().for_each(|x| *x *= bound / n);
    }
    let ramp = if p.ramp_rounds == 0 {
        1.0
    } else {
        (attack_round as f64 / p.ramp_rounds as f64).min(1.0)
    };
    d.iter_mut().for_each(|x| *x *= ramp);
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;

    fn params(v: &[f64]) -> FlatParams {
        FlatParams::new(v.to_vec(), vec![crate::nn::LayerShape { d_in: 0, d_out: v.len() }]).unwrap()
    }

    fn spec(kind: AttackKind) -> AttackSpec {
        AttackSpec {
            kind,
            ..AttackSpec::none(TriggerSpec::corner_patch(8, 0.3))
        }
    }

    #[test]
    fn dba_shards_partition_trigger() {
        let mut s = spec(AttackKind::Dba);
        s.trigger.coordinates = vec![2, 3, 5, 6, 7];
        let mut seen = Vec::new();
        for index in 0..3 {
            s.dba_shard = Some(DbaShard { index, total: 3 });
            seen.extend(s.local_trigger().coordinates);
        }
        seen.sort_unstable();
        assert_eq!(seen, vec![2, 3, 5, 6, 7]);
    }

    #[test]
    fn none_leaves_data() {
        let ds = synth_dataset(1, 2, 25, 8).unwrap();
        assert_eq!(poison_local_data(&spec(AttackKind::None), &ds, 3).unwrap(), ds);
    }

    #[test]
    fn badnet_poisons_floor_fraction() {
        let ds = synth_dataset(1, 2, 25, 8).unwrap();
        let p = poison_local_data(&spec(AttackKind::Badnet), &ds, 3).unwrap();
        let stamped = (0..ds.len())
            .filter(|&i| p.inputs().row(i)[5..] == [1.0, 1.0, 1.0] && p.labels()[i] == 0)
            .count();
        assert!(stamped >= 15);
        let changed = (0..ds.len()).filter(|&i| p.inputs().row(i) != ds.inputs().row(i)).count();
        assert!(changed <= 15);
    }

    #[test]
    fn scaling_is_linear() {
        let global = params(&[1.0, 1.0, 1.0]);
        let honest = params(&[2.0, 0.0, 1.5]);
        let ctx = RoundContext {
            round_index: 3,
            attack_round: 0,
            global_params: &global,
            benign_proxy: None,
        };
        let mut s = spec(AttackKind::Scaling);
        s.scale_factor = Some(1.0);
        assert_eq!(transform_update(&s, &honest, &ctx).unwrap(), honest);
        s.scale_factor = Some(10.0);
        let out = transform_update(&s, &honest, &ctx).unwrap();
        assert_eq!(out.values(), &[11.0, -9.0, 6.0]);
    }

    #[test]
    fn adaptive_ramp_zero_submits_global() {
        let global = params(&[1.0, -1.0, 0.5]);
        let honest = params(&[2.0, 0.0, 1.5]);
        let proxy = params(&[1.5, -0.5, 0.5]);
        let mut ctx = RoundContext {
            round_index: 20,
            attack_round: 0,
            global_params: &global,
            benign_proxy: Some(&proxy),
        };
        let s = spec(AttackKind::AdaptiveBadnet);
        assert_eq!(transform_update(&s, &honest, &ctx).unwrap(), global);

        ctx.attack_round = 10;
        let out = transform_update(&s, &honest, &ctx).unwrap();
        let sub = norm2(&out.delta_from(&global).unwrap());
        let hon = norm2(&honest.delta_from(&global).unwrap());
        assert!(sub <= 0.25 * hon + 1e-12);

        ctx.benign_proxy = None;
        assert!(transform_update(&s, &honest, &ctx).is_err());
    }

    #[test]
    fn length_mismatch_is_error() {
        let global = params(&[1.0, 1.0, 1.0]);
        let honest = params(&[1.0, 1.0]);
        let ctx = RoundContext {
            round_index: 0,
            attack_round: 0,
            global_params: &global,
            benign_proxy: None,
        };
        assert!(transform_update(&spec(AttackKind::Scaling), &honest, &ctx).is_err());
    }

    #[test]
    fn validation() {
        let mut s = spec(AttackKind::Scaling);
        s.scale_factor = Some(0.5);
        assert!(s.validate().is_err());
        let mut s = spec(AttackKind::Dba);
        s.dba_shard = Some(DbaShard { index: 3, total: 3 });
        assert!(s.validate().is_err());
    }
}
