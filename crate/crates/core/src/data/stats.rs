use std::fmt;

use serde::{Deserialize, Serialize};

use super::DomainCorpus;
use crate::error::{Error, Result};
use crate::types::{Location, FRAME_DT};

/// Per-frame positions of one agent; `None` marks a missing frame.
pub type Track = Vec<Option<Location>>;

/// Crowd density, velocity and acceleration summary of a corpus.
/// Velocities and accelerations are per-axis magnitudes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DomainStats {
    pub n_sequences: usize,
    pub num_mean: f64,
    pub num_std: f64,
    pub vx_mean: f64,
    pub vx_std: f64,
    pub vy_mean: f64,
    pub vy_std: f64,
    pub ax_mean: f64,
    pub ax_std: f64,
    pub ay_mean: f64,
    pub ay_std: f64,
}

impl DomainStats {
    pub const HEADER: &'static str =
        "domain        seqs   num(avg/std)    vx(avg/std)     vy(avg/std)     ax(avg/std)     ay(avg/std)";

    pub fn table_row(&self, domain: &str) -> String {
        format!(
            "{domain:<12} {:>5}   {:>6.3}/{:<6.3}  {:>6.3}/{:<6.3}  {:>6.3}/{:<6.3}  {:>6.3}/{:<6.3}  {:>6.3}/{:<6.3}",
            self.n_sequences,
            self.num_mean,
            self.num_std,
            self.vx_mean,
            self.vx_std,
            self.vy_mean,
            self.vy_std,
            self.ax_mean,
            self.ax_std,
            self.ay_mean,
            self.ay_std
        )
    }
}

impl fmt::Display for DomainStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.table_row(""))
    }
}

/// Running mean and population variance (Welford).
#[derive(Debug, Default, Clone, Copy)]
struct Moments {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn mean(&self) -> f64 {
        self.mean
    }

    fn std(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.m2 / self.n as f64).max(0.0).sqrt()
        }
    }
}

#[derive(Default)]
struct Accum {
    vx: Moments,
    vy: Moments,
    ax: Moments,
    ay: Moments,
}

impl Accum {
    fn push_track(&mut self, track: &[Option<Location>]) {
        let vel: Vec<Option<(f64, f64)>> = track
            .windows(2)
            .map(|w| match (w[0], w[1]) {
                (Some(a), Some(b)) => Some(((b.x - a.x) / FRAME_DT, (b.y - a.y) / FRAME_DT)),
                _ => None,
            })
            .collect();
        for v in vel.iter().flatten() {
            self.vx.push(v.0.abs());
            self.vy.push(v.1.abs());
        }
        for w in vel.windows(2) {
            if let (Some(a), Some(b)) = (w[0], w[1]) {
                self.ax.push(((b.0 - a.0) / FRAME_DT).abs());
                self.ay.push(((b.1 - a.1) / FRAME_DT).abs());
            }
        }
    }
}

/// Statistics over raw tracks grouped by scene. `agents_per_scene` feeds the
/// density columns; each track contributes velocity and acceleration samples.
pub fn stats_from_tracks(tracks: &[Track], agents_per_scene: &[usize]) -> Result<DomainStats> {
    if agents_per_scene.is_empty() {
        return Err(Error::Input("statistics of an empty corpus".into()));
    }
    let mut num = Moments::default();
    for &n in agents_per_scene {
        num.push(n as f64);
    }
    let mut acc = Accum::default();
    for t in tracks {
        acc.push_track(t);
    }
    Ok(DomainStats {
        n_sequences: agents_per_scene.len(),
        num_mean: num.mean(),
        num_std: num.std(),
        vx_mean: acc.vx.mean(),
        vx_std: acc.vx.std(),
        vy_mean: acc.vy.mean(),
        vy_std: acc.vy.std(),
        ax_mean: acc.ax.mean(),
        ax_std: acc.ax.std(),
        ay_mean: acc.ay.mean(),
        ay_std: acc.ay.std(),
    })
}

/// Per-axis absolute velocity `|Δp|/0.4` and acceleration `|Δv|/0.4` over
/// every consecutive valid frame pair, with population standard deviations.
/// The focal track spans observed and future frames; neighbors contribute
/// their observed window.
pub fn compute_domain_statistics(corpus: &DomainCorpus) -> Result<DomainStats> {
    if corpus.scenes.is_empty() {
        return Err(Error::Input(format!(
            "statistics of empty corpus `{}`",
            corpus.domain_id
        )));
    }
    let mut tracks = Vec::new();
    let mut counts = Vec::with_capacity(corpus.scenes.len());
    for s in &corpus.scenes {
        counts.push(s.n_agents());
        let mut focal: Track = s.focal_observed.iter().copied().map(Some).collect();
        if let Some(fut) = &s.focal_future {
            focal.extend(fut.iter().copied().map(Some));
        }
        tracks.push(focal);
        for n in &s.neighbors_observed {
            tracks.push(
                n.mask
                    .iter()
                    .zip(&n.pts)
                    .map(|(m, p)| m.then_some(*p))
                    .collect(),
            );
        }
    }
    stats_from_tracks(&tracks, &counts)
}
