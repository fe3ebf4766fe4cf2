//! Social-force style synthetic crowds.
//!
//! Unit-mass point agents are pulled toward a distant goal at their desired
//! speed and pushed apart by an exponential repulsion whose direction is
//! rotated by the domain's passing-side convention. The state is integrated
//! with explicit Euler at 0.1 s and emitted every 0.4 s.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;

use super::{DomainCorpus, DomainProfile};
use crate::error::Result;
use crate::types::{DomainTag, Location, NeighborTrack, TrajectoryScene, OBS_LEN, PRED_LEN};

const SUBSTEP: f64 = 0.1;
const SUBSTEPS_PER_FRAME: usize = 4;
const WARMUP_FRAMES: usize = 5;
const RELAXATION_TIME: f64 = 0.5;
const BODY_DIAMETER: f64 = 0.6;
const MAX_SIDE_ROTATION_DEG: f64 = 15.0;
const HEADING_SPREAD: f64 = 0.3;
const MAX_NEIGHBORS: usize = 16;
const OCCLUSION_PROB: f64 = 0.15;
const SCENE_SPACING_S: f64 = 8.0;

struct Agent {
    pos: (f64, f64),
    vel: (f64, f64),
    goal: (f64, f64),
    speed: f64,
}

/// Generates `profile.scene_count` scenes. Scene `s` draws from its own
/// ChaCha stream `s` of `seed`, so the result is independent of thread count.
pub fn generate_synthetic_domain(profile: &DomainProfile, seed: u64) -> Result<DomainCorpus> {
    profile.validate()?;
    let scenes: Vec<TrajectoryScene> = (0..profile.scene_count)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s as u64);
            generate_scene(profile, s, &mut rng)
        })
        .collect();
    Ok(DomainCorpus::new(profile.domain_id.clone(), scenes))
}

fn generate_scene(profile: &DomainProfile, index: usize, rng: &mut ChaCha8Rng) -> TrajectoryScene {
    let n_agents = if profile.agents_per_scene_mean > 1.0 {
        let extra = Poisson::new(profile.agents_per_scene_mean - 1.0).expect("positive rate");
        1 + extra.sample(rng) as usize
    } else {
        1
    };
    let speed_dist = Normal::new(profile.desired_speed_mean, profile.desired_speed_std)
        .expect("finite speed distribution");
    let heading_noise = Normal::new(0.0, HEADING_SPREAD).expect("finite heading spread");

    let mut agents: Vec<Agent> = (0..n_agents)
        .map(|i| {
            let half = if i == 0 { 1.0 } else { 6.0 };
            let pos = (rng.random_range(-half..half), rng.random_range(-half * 0.5..half * 0.5));
            let base = if rng.random_bool(0.5) { 0.0 } else { std::f64::consts::PI };
            let heading = base + heading_noise.sample(rng);
            let speed = speed_dist.sample(rng).max(0.1 * profile.desired_speed_mean);
            let dir = (heading.cos(), heading.sin());
            Agent {
                pos,
                vel: (speed * dir.0, speed * dir.1),
                goal: (pos.0 + 100.0 * dir.0, pos.1 + 100.0 * dir.1),
                speed,
            }
        })
        .collect();

    let total = WARMUP_FRAMES + OBS_LEN + PRED_LEN;
    let mut frames: Vec<Vec<(f64, f64)>> = Vec::with_capacity(OBS_LEN + PRED_LEN);
    for f in 0..total {
        if f >= WARMUP_FRAMES {
            frames.push(agents.iter().map(|a| a.pos).collect());
        }
        if f + 1 < total {
            for _ in 0..SUBSTEPS_PER_FRAME {
                step(&mut agents, profile);
            }
        }
    }

    let emit = |p: (f64, f64)| Location::new(p.0, profile.axis_scale_y * p.1);
    let focal_observed: Vec<Location> = (0..OBS_LEN).map(|t| emit(frames[t][0])).collect();
    let focal_future: Vec<Location> = (OBS_LEN..OBS_LEN + PRED_LEN)
        .map(|t| emit(frames[t][0]))
        .collect();

    let mut neighbors: Vec<(f64, NeighborTrack)> = (1..n_agents)
        .map(|j| {
            let mut mask = vec![true; OBS_LEN];
            if rng.random_bool(OCCLUSION_PROB) {
                let hidden = rng.random_range(1..OBS_LEN);
                mask[..hidden].iter_mut().for_each(|m| *m = false);
            }
            let pts: Vec<Location> = (0..OBS_LEN).map(|t| emit(frames[t][j])).collect();
            let (sum, cnt) = (0..OBS_LEN)
                .filter(|&t| mask[t])
                .fold((0.0, 0usize), |(s, c), t| (s + pts[t].distance(&focal_observed[t]), c + 1));
            (sum / cnt as f64, NeighborTrack::new(mask, pts))
        })
        .collect();
    neighbors.sort_by(|a, b| a.0.total_cmp(&b.0));
    neighbors.truncate(MAX_NEIGHBORS);

    TrajectoryScene {
        scene_id: format!("{}-{index:05}", profile.domain_id),
        domain_id: DomainTag::named(profile.domain_id.clone()),
        timestamp_origin: index as f64 * SCENE_SPACING_S,
        focal_observed,
        focal_future: Some(focal_future),
        neighbors_observed: neighbors.into_iter().map(|(_, n)| n).collect(),
    }
}

fn step(agents: &mut [Agent], profile: &DomainProfile) {
    let theta = profile.passing_side_bias * MAX_SIDE_ROTATION_DEG.to_radians();
    let (sin_t, cos_t) = theta.sin_cos();
    let forces: Vec<(f64, f64)> = agents
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let to_goal = (a.goal.0 - a.pos.0, a.goal.1 - a.pos.1);
            let d = to_goal.0.hypot(to_goal.1).max(1e-9);
            let desired = (a.speed * to_goal.0 / d, a.speed * to_goal.1 / d);
            let mut f = (
                (desired.0 - a.vel.0) / RELAXATION_TIME,
                (desired.1 - a.vel.1) / RELAXATION_TIME,
            );
            if profile.interaction_strength > 0.0 {
                for (j, b) in agents.iter().enumerate() {
                    if i == j {
                        continue;
                    }
                    let sep = (a.pos.0 - b.pos.0, a.pos.1 - b.pos.1);
                    let dist = sep.0.hypot(sep.1).max(1e-6);
                    let n = (sep.0 / dist, sep.1 / dist);
                    let mag = profile.interaction_strength
                        * ((BODY_DIAMETER - dist) / profile.interaction_range).exp();
                    let rot = (cos_t * n.0 - sin_t * n.1, sin_t * n.0 + cos_t * n.1);
                    f.0 += mag * rot.0;
                    f.1 += mag * rot.1;
                }
            }
            f
        })
        .collect();
    for (a, f) in agents.iter_mut().zip(forces) {
        a.vel.0 += SUBSTEP * f.0;
        a.vel.1 += SUBSTEP * f.1;
        let sp = a.vel.0.hypot(a.vel.1);
        let cap = 1.5 * a.speed;
        if sp > cap {
            a.vel.0 *= cap / sp;
            a.vel.1 *= cap / sp;
        }
        a.pos.0 += SUBSTEP * a.vel.0;
        a.pos.1 += SUBSTEP * a.vel.1;
    }
}
