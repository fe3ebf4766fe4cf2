//! Three-stage training: joint pretraining, aggregator teacher–student
//! training with frozen experts, and low-rate end-to-end fine-tuning.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::SceneBatch;
use crate::data::{DomainCorpus, Split};
use crate::disentangle::DomainLabel;
use crate::error::{Error, Result};
use crate::eval::evaluate_relative;
use crate::model::{sample_noise, LossTerms, Method, TrajectoryModel};
use crate::nn::{clip_grad_norm, Adam, Graph, Matrix, Var};
use crate::types::{HyperParams, TrajectoryScene};

/// Parameter groups addressed by the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Invariant,
    Experts,
    Aggregators,
    Recon,
    Classifier,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Backbone,
        ParamGroup::Invariant,
        ParamGroup::Experts,
        ParamGroup::Aggregators,
        ParamGroup::Recon,
        ParamGroup::Classifier,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Invariant => "invariant",
            ParamGroup::Experts => "experts",
            ParamGroup::Aggregators => "aggregators",
            ParamGroup::Recon => "recon",
            ParamGroup::Classifier => "classifier",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Group of a namespaced parameter. The shared expert fusion head
/// `expert_fuse/*` belongs to the experts.
pub fn group_of(name: &str) -> Result<ParamGroup> {
    let head = name.split('/').next().unwrap_or_default();
    let group = match head {
        "backbone" => ParamGroup::Backbone,
        "invariant" => ParamGroup::Invariant,
        "aggregator" => ParamGroup::Aggregators,
        "recon" => ParamGroup::Recon,
        "classifier" => ParamGroup::Classifier,
        h if h == "expert_fuse" || h.strip_prefix("expert_").is_some_and(|k| k.parse::<usize>().is_ok()) => {
            ParamGroup::Experts
        }
        _ => return Err(Error::UnknownNamespace(name.to_string())),
    };
    Ok(group)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupSetting {
    pub multiplier: f64,
    pub frozen: bool,
}

/// Schedule state for one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSchedule {
    pub stage: u8,
    pub epoch: usize,
    pub groups: BTreeMap<ParamGroup, GroupSetting>,
    /// Weight of the auxiliary losses: δ in stage 1, δ′ afterwards.
    pub domain_weight: f64,
    /// Whether batches may be masked (stages 2 and 3).
    pub masking: bool,
}

impl StageSchedule {
    pub fn stage_of(hp: &HyperParams, epoch: usize) -> u8 {
        if epoch < hp.e_start {
            1
        } else if epoch < hp.e_end {
            2
        } else {
            3
        }
    }

    pub fn at(hp: &HyperParams, epoch: usize) -> Self {
        let stage = Self::stage_of(hp, epoch);
        let groups = ParamGroup::ALL
            .into_iter()
            .map(|g| {
                let setting = match (stage, g) {
                    (1, _) => GroupSetting {
                        multiplier: 1.0,
                        frozen: false,
                    },
                    (2, ParamGroup::Experts) => GroupSetting {
                        multiplier: 0.0,
                        frozen: true,
                    },
                    (2, ParamGroup::Aggregators) => GroupSetting {
                        multiplier: hp.f_high,
                        frozen: false,
                    },
                    _ => GroupSetting {
                        multiplier: hp.f_low,
                        frozen: false,
                    },
                };
                (g, setting)
            })
            .collect();
        Self {
            stage,
            epoch,
            groups,
            domain_weight: if stage == 1 { hp.delta } else { hp.delta_prime },
            masking: stage >= 2,
        }
    }

    pub fn setting(&self, group: ParamGroup) -> GroupSetting {
        self.groups[&group]
    }
}

/// A named set of parameters with its learning rate, `None` when frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerGroup {
    pub group: ParamGroup,
    pub params: Vec<String>,
    pub multiplier: f64,
    pub frozen: bool,
}

pub fn make_optimizer_groups(model: &TrajectoryModel, schedule: &StageSchedule) -> Result<Vec<OptimizerGroup>> {
    let mut members: BTreeMap<ParamGroup, Vec<String>> = BTreeMap::new();
    for name in model.store.names() {
        members.entry(group_of(name)?).or_default().push(name.clone());
    }
    Ok(members
        .into_iter()
        .map(|(group, params)| {
            let s = schedule.setting(group);
            OptimizerGroup {
                group,
                params,
                multiplier: s.multiplier,
                frozen: s.frozen,
            }
        })
        .collect())
}

/// `L_base + w·L_ours` for already-evaluated components.
pub fn total_loss_value(base: f64, ours: f64, domain_weight: f64) -> f64 {
    base + domain_weight * ours
}

/// Differentiable `L_base + w·L_ours`.
pub fn total_loss(g: &mut Graph, terms: &LossTerms, domain_weight: f64) -> Var {
    match terms.ours {
        Some(ours) if domain_weight != 0.0 => {
            let w = g.scale(ours, domain_weight);
            g.add(terms.base, w)
        }
        _ => terms.base,
    }
}

/// One line of the metrics log. Loss components are per scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: u8,
    pub batches: usize,
    pub masked_batches: usize,
    pub loss_base: f64,
    pub loss_recon: f64,
    pub loss_diff: f64,
    pub loss_similar: f64,
    pub loss_total: f64,
    /// Root of the summed squared pre-clip gradient norms over the epoch.
    pub grad_norms: BTreeMap<ParamGroup, f64>,
    pub val_base: f64,
    pub val_ade: f64,
    pub val_fde: f64,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    /// Parameters of the epoch with the lowest mean source validation ADE.
    pub model: TrajectoryModel,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
}

impl TrainingOutcome {
    pub fn log_ndjson(&self) -> Result<String> {
        encode_log(&self.log)
    }
}

pub fn encode_log(log: &[EpochRecord]) -> Result<String> {
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Trains `method` on split source corpora. Source `k` carries domain
/// label `k`.
pub fn run_training(method: Method, sources: &[DomainCorpus], hp: &HyperParams) -> Result<TrainingOutcome> {
    run_training_observed(method, sources, hp, |_, _| {})
}

/// As [`run_training`], calling `on_epoch` after every epoch with the record
/// and the current (not best) model.
pub fn run_training_observed(
    method: Method,
    sources: &[DomainCorpus],
    hp: &HyperParams,
    mut on_epoch: impl FnMut(&EpochRecord, &TrajectoryModel),
) -> Result<TrainingOutcome> {
    hp.validate()?;
    if sources.is_empty() {
        return Err(Error::Input("no source domains".into()));
    }
    if method.is_staged() && sources.len() != hp.n_domains {
        return Err(Error::Config(format!(
            "{} source domains but n_domains = {}",
            sources.len(),
            hp.n_domains
        )));
    }
    for c in sources {
        if !c.is_split() {
            return Err(Error::Input(format!("domain `{}` has not been split", c.domain_id)));
        }
        if c.split(Split::Train).is_empty() || c.split(Split::Val).is_empty() {
            return Err(Error::Input(format!("domain `{}` has an empty train or val split", c.domain_id)));
        }
    }
    let mut model = TrajectoryModel::new(method, hp)?;
    make_optimizer_groups(&model, &StageSchedule::at(hp, 0))?;
    let val_batches: Vec<SceneBatch> = sources
        .iter()
        .map(|c| SceneBatch::new(&c.split(Split::Val).iter().collect::<Vec<_>>()))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    rng.set_stream(1);
    let mut adam = Adam::new();
    let mut log = Vec::with_capacity(hp.e_total);
    let mut best: Option<(f64, usize, TrajectoryModel)> = None;

    for epoch in 0..hp.e_total {
        let schedule = StageSchedule::at(hp, epoch);
        let groups = make_optimizer_groups(&model, &schedule)?;
        let lr_of: BTreeMap<&str, Option<f64>> = groups
            .iter()
            .flat_map(|g| {
                let lr = (!g.frozen).then_some(hp.lr * g.multiplier);
                g.params.iter().map(move |p| (p.as_str(), lr))
            })
            .collect();
        let plan = epoch_plan(method, sources, hp.batch_size, &mut rng);

        let mut sums = [0.0; 5];
        let mut n_scenes = 0usize;
        let mut masked_batches = 0;
        let mut grad_sq: BTreeMap<ParamGroup, f64> = ParamGroup::ALL.iter().map(|&g| (g, 0.0)).collect();
        for (bi, (domain, scenes)) in plan.iter().enumerate() {
            let draw = rng.random_bool(hp.sigma);
            let masked = method.is_staged() && schedule.masking && draw;
            masked_batches += usize::from(masked);
            let label = if masked {
                DomainLabel::Masked
            } else {
                DomainLabel::Domain(*domain)
            };
            let batch = SceneBatch::new(scenes)?;
            let noise = sample_noise(&mut rng, batch.n_scenes, hp.noise_dim);

            let grads = {
                let mut g = Graph::new(&model.store);
                let z = g.constant(noise);
                let (_, terms) = model.losses(&mut g, &batch, label, z)?;
                let total = total_loss(&mut g, &terms, schedule.domain_weight);
                let values = [
                    Some(terms.base),
                    terms.recon,
                    terms.diff,
                    terms.similar,
                    Some(total),
                ];
                const NAMES: [&str; 5] = ["base", "recon", "diff", "similar", "total"];
                for (i, v) in values.iter().enumerate() {
                    let x = v.map_or(0.0, |v| g.value(v).item());
                    if !x.is_finite() {
                        return Err(Error::NonFinite {
                            epoch,
                            batch: bi,
                            component: NAMES[i],
                        });
                    }
                    sums[i] += x;
                }
                g.backward(total).into_params()
            };
            if grads.values().any(|m| !m.is_finite()) {
                return Err(Error::NonFinite {
                    epoch,
                    batch: bi,
                    component: "gradient",
                });
            }
            for (name, m) in &grads {
                *grad_sq.get_mut(&group_of(name)?).expect("known group") += m.sum_sq();
            }
            let mut grads = grads;
            clip_grad_norm(&mut grads, hp.grad_clip);
            adam.step(&mut model.store, &grads, |name| lr_of.get(name).copied().flatten());
            n_scenes += batch.n_scenes;
        }

        let mut val = [0.0; 3];
        for vb in &val_batches {
            let pred = model.predict(vb, 1, &mut rng)?;
            let (ade, fde, base) = evaluate_relative(&pred[0], vb.future.as_ref().expect("val scenes have futures"))?;
            val[0] += ade;
            val[1] += fde;
            val[2] += base;
        }
        let nv = val_batches.len() as f64;
        let per = |s: f64| s / n_scenes.max(1) as f64;
        let record = EpochRecord {
            epoch,
            stage: schedule.stage,
            batches: plan.len(),
            masked_batches,
            loss_base: per(sums[0]),
            loss_recon: per(sums[1]),
            loss_diff: per(sums[2]),
            loss_similar: per(sums[3]),
            loss_total: per(sums[4]),
            grad_norms: grad_sq
                .into_iter()
                .filter(|(g, _)| groups.iter().any(|og| og.group == *g))
                .map(|(g, s)| (g, s.sqrt()))
                .collect(),
            val_base: val[2] / nv,
            val_ade: val[0] / nv,
            val_fde: val[1] / nv,
        };
        if !(record.val_ade.is_finite() && record.val_fde.is_finite()) {
            return Err(Error::NonFinite {
                epoch,
                batch: plan.len(),
                component: "validation",
            });
        }
        log::debug!(
            "{method} epoch {epoch} stage {} total {:.4} val ADE {:.4}",
            record.stage,
            record.loss_total,
            record.val_ade
        );
        on_epoch(&record, &model);
        if best.as_ref().is_none_or(|(b, _, _)| record.val_ade < *b) {
            best = Some((record.val_ade, epoch, model.clone()));
        }
        log.push(record);
    }

    let (_, best_epoch, model) = best.expect("at least one epoch");
    Ok(TrainingOutcome {
        model,
        best_epoch,
        log,
    })
}

/// Batches of one epoch with the domain index of each. Staged methods visit
/// per-domain shuffled batches round-robin; the vanilla predictor draws
/// shuffled batches from the fused pool.
fn epoch_plan<'a>(
    method: Method,
    sources: &'a [DomainCorpus],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, Vec<&'a TrajectoryScene>)> {
    if !method.is_staged() {
        let mut pool: Vec<(usize, &TrajectoryScene)> = sources
            .iter()
            .enumerate()
            .flat_map(|(k, c)| c.split(Split::Train).iter().map(move |s| (k, s)))
            .collect();
        pool.shuffle(rng);
        return pool
            .chunks(batch_size)
            .map(|ch| (ch[0].0, ch.iter().map(|(_, s)| *s).collect()))
            .collect();
    }
    let per_domain: Vec<Vec<Vec<&TrajectoryScene>>> = sources
        .iter()
        .map(|c| {
            let mut scenes: Vec<&TrajectoryScene> = c.split(Split::Train).iter().collect();
            scenes.shuffle(rng);
            scenes.chunks(batch_size).map(<[_]>::to_vec).collect()
        })
        .collect();
    let rounds = per_domain.iter().map(Vec::len).max().unwrap_or(0);
    let mut plan = Vec::new();
    for r in 0..rounds {
        for (k, batches) in per_domain.iter().enumerate() {
            if let Some(b) = batches.get(r) {
                plan.push((k, b.clone()));
            }
        }
    }
    plan
}

/// Gradient of the stage-1 total loss on one batch, for probes.
pub fn batch_gradients(
    model: &TrajectoryModel,
    batch: &SceneBatch,
    label: DomainLabel,
    noise: &Matrix,
    domain_weight: f64,
) -> Result<(f64, BTreeMap<String, Matrix>)> {
    let mut g = Graph::new(&model.store);
    let z = g.constant(noise.clone());
    let (_, terms) = model.losses(&mut g, batch, label, z)?;
    let total = total_loss(&mut g, &terms, domain_weight);
    Ok((g.value(total).item(), g.backward(total).into_params()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{chronological_split, generate_synthetic_domain, ProfileSet};

    fn tiny_hp() -> HyperParams {
        HyperParams {
            d_f: 8,
            noise_dim: 2,
            batch_size: 8,
            e_start: 2,
            e_end: 4,
            e_total: 5,
            n_domains: 2,
            ..HyperParams::default()
        }
    }

    fn tiny_sources(n: usize) -> Vec<DomainCorpus> {
        ProfileSet::default_four().domains[..n]
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let p = crate::data::DomainProfile {
                    scene_count: 30,
                    ..p.clone()
                };
                chronological_split(generate_synthetic_domain(&p, 100 + k as u64).unwrap()).unwrap()
            })
            .collect()
    }

    #[test]
    fn namespaces_map_to_groups() {
        assert_eq!(group_of("backbone/embed/w").unwrap(), ParamGroup::Backbone);
        assert_eq!(group_of("expert_3/ind/l1/w").unwrap(), ParamGroup::Experts);
        assert_eq!(group_of("expert_fuse/l2/b").unwrap(), ParamGroup::Experts);
        assert_eq!(group_of("aggregator/nei/l1/w").unwrap(), ParamGroup::Aggregators);
        assert!(matches!(group_of("expert_x/w"), Err(Error::UnknownNamespace(_))));
        assert!(matches!(group_of("decoder/w"), Err(Error::UnknownNamespace(_))));
    }

    #[test]
    fn schedule_sweep() {
        let hp = HyperParams {
            e_start: 3,
            e_end: 6,
            e_total: 9,
            f_low: 0.1,
            f_high: 0.7,
            ..HyperParams::default()
        };
        let mut swaps = 0;
        let mut prev: Option<StageSchedule> = None;
        for e in 0..hp.e_total {
            let s = StageSchedule::at(&hp, e);
            let expect = if e < 3 { 1 } else if e < 6 { 2 } else { 3 };
            assert_eq!(s.stage, expect);
            if let Some(p) = &prev {
                assert!(s.stage >= p.stage);
                if p.domain_weight != s.domain_weight {
                    swaps += 1;
                    assert_eq!(e, hp.e_start);
                }
            }
            match s.stage {
                1 => assert!(s.groups.values().all(|g| g.multiplier == 1.0 && !g.frozen)),
                2 => {
                    assert!(s.setting(ParamGroup::Experts).frozen);
                    assert_eq!(s.setting(ParamGroup::Aggregators).multiplier, 0.7);
                    assert_eq!(s.setting(ParamGroup::Backbone).multiplier, 0.1);
                }
                _ => assert!(s.groups.values().all(|g| g.multiplier == 0.1 && !g.frozen)),
            }
            prev = Some(s);
        }
        assert_eq!(swaps, 1);
    }

    #[test]
    fn total_loss_weighting() {
        assert_eq!(total_loss_value(10.0, 2.0, 0.5), 11.0);
        assert_eq!(total_loss_value(10.0, 2.0, 0.0), 10.0);
    }

    #[test]
    fn optimizer_groups_cover_every_parameter() {
        let hp = HyperParams {
            n_domains: 2,
            d_f: 4,
            ..HyperParams::default()
        };
        let model = TrajectoryModel::new(Method::AdapTraj, &hp).unwrap();
        let groups = make_optimizer_groups(&model, &StageSchedule::at(&hp, hp.e_start)).unwrap();
        assert_eq!(groups.len(), 6);
        assert_eq!(groups.iter().map(|g| g.params.len()).sum::<usize>(), model.store.len());
        let experts = groups.iter().find(|g| g.group == ParamGroup::Experts).unwrap();
        assert!(experts.frozen);
    }

    #[test]
    fn rejects_bad_inputs() {
        let hp = tiny_hp();
        assert!(matches!(run_training(Method::AdapTraj, &[], &hp), Err(Error::Input(_))));
        let one = tiny_sources(1);
        assert!(matches!(run_training(Method::AdapTraj, &one, &hp), Err(Error::Config(_))));
        let unsplit = vec![DomainCorpus::new("a", one[0].scenes.clone())];
        assert!(run_training(Method::Vanilla, &unsplit, &hp).is_err());
    }

    #[test]
    fn deterministic_logs_and_stage_coverage() {
        let hp = tiny_hp();
        let sources = tiny_sources(2);
        let a = run_training(Method::AdapTraj, &sources, &hp).unwrap();
        let b = run_training(Method::AdapTraj, &sources, &hp).unwrap();
        assert_eq!(a.log_ndjson().unwrap(), b.log_ndjson().unwrap());
        assert_eq!(a.model.store, b.model.store);
        let stages: Vec<u8> = a.log.iter().map(|r| r.stage).collect();
        assert_eq!(stages, vec![1, 1, 2, 2, 3]);
        assert!(a.log[..2].iter().all(|r| r.masked_batches == 0));
        assert!(a.log.iter().all(|r| r.val_ade.is_finite() && r.val_ade >= 0.0));
    }

    #[test]
    fn frozen_experts_do_not_move_in_stage_two() {
        let hp = tiny_hp();
        let sources = tiny_sources(2);
        let mut snaps = Vec::new();
        run_training_observed(Method::AdapTraj, &sources, &hp, |r, m| {
            snaps.push((r.stage, m.store.snapshot("expert_")));
        })
        .unwrap();
        // end of the last stage-1 epoch equals the end of every stage-2 epoch
        assert_ne!(snaps[0].1, snaps[1].1);
        assert_eq!(snaps[1].1, snaps[2].1);
        assert_eq!(snaps[1].1, snaps[3].1);
        assert_ne!(snaps[3].1, snaps[4].1);
    }

    #[test]
    fn sigma_zero_leaves_aggregators_without_gradient() {
        let hp = HyperParams { sigma: 0.0, ..tiny_hp() };
        let out = run_training(Method::AdapTraj, &tiny_sources(2), &hp).unwrap();
        for r in &out.log {
            assert_eq!(r.masked_batches, 0);
            assert_eq!(r.grad_norms[&ParamGroup::Aggregators], 0.0);
        }
        let hp = HyperParams { sigma: 1.0, ..tiny_hp() };
        let out = run_training(Method::AdapTraj, &tiny_sources(2), &hp).unwrap();
        assert!(out.log.iter().filter(|r| r.stage >= 2).all(|r| r.grad_norms[&ParamGroup::Aggregators] > 0.0));
    }

    #[test]
    fn degenerate_schedule_is_pure_stage_one() {
        let hp = HyperParams {
            e_start: 3,
            e_end: 3,
            e_total: 3,
            ..tiny_hp()
        };
        let out = run_training(Method::AdapTraj, &tiny_sources(2), &hp).unwrap();
        assert!(out.log.iter().all(|r| r.stage == 1 && r.masked_batches == 0));
    }

    #[test]
    fn vanilla_trains_on_fused_batches() {
        let hp = tiny_hp();
        let out = run_training(Method::Vanilla, &tiny_sources(3), &hp).unwrap();
        assert_eq!(out.log.len(), 5);
        assert!(out.log.iter().all(|r| r.loss_recon == 0.0 && r.masked_batches == 0));
        assert_eq!(out.log[0].grad_norms.keys().copied().collect::<Vec<_>>(), vec![ParamGroup::Backbone]);
    }

    #[test]
    fn one_small_step_does_not_increase_the_loss() {
        let hp = HyperParams {
            lr: 1e-6,
            ..tiny_hp()
        };
        let sources = tiny_sources(2);
        let model = TrajectoryModel::new(Method::AdapTraj, &hp).unwrap();
        let scenes: Vec<_> = sources[0].split(Split::Train).iter().take(6).collect();
        let batch = SceneBatch::new(&scenes).unwrap();
        let noise = Matrix::zeros(batch.n_scenes, hp.noise_dim);
        let label = DomainLabel::Domain(0);
        let (before, grads) = batch_gradients(&model, &batch, label, &noise, hp.delta).unwrap();
        let mut stepped = model.clone();
        for (name, g) in &grads {
            let p = stepped.store.get_mut(name).unwrap();
            for (w, d) in p.data.iter_mut().zip(&g.data) {
                *w -= hp.lr * d;
            }
        }
        let (after, _) = batch_gradients(&stepped, &batch, label, &noise, hp.delta).unwrap();
        assert!(after <= before + 1e-8, "{after} > {before}");
    }
}
