//! Ingestion of externally exported tracks: unit conversion, linear
//! resampling onto the 0.4 s grid and sliding-window scene extraction.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::types::{DomainTag, Location, NeighborTrack, TrajectoryScene, FRAME_DT, OBS_LEN, PRED_LEN};

const MAX_NEIGHBORS: usize = 16;
const GRID_EPS: f64 = 1e-9;

/// One raw observation: `(time in seconds, agent id, x, y)` in source units.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSample {
    pub t: f64,
    pub agent: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnitSpec {
    Meters,
    /// Pixel coordinates with the given meters-per-pixel scale.
    Pixels { meters_per_pixel: f64 },
}

impl UnitSpec {
    fn to_meters(self, v: f64) -> f64 {
        match self {
            UnitSpec::Meters => v,
            UnitSpec::Pixels { meters_per_pixel } => v * meters_per_pixel,
        }
    }
}

impl FromStr for UnitSpec {
    type Err = Error;

    /// Accepts `m` or `px:<meters per pixel>`.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "m" => Ok(UnitSpec::Meters),
            other => {
                let scale = other
                    .strip_prefix("px:")
                    .ok_or_else(|| Error::Config(format!("unknown unit `{other}`; expected `m` or `px:<scale>`")))?;
                let meters_per_pixel: f64 = scale
                    .parse()
                    .map_err(|_| Error::Config(format!("invalid pixel scale `{scale}`")))?;
                if !(meters_per_pixel > 0.0 && meters_per_pixel.is_finite()) {
                    return Err(Error::Config(format!("pixel scale must be positive, got {meters_per_pixel}")));
                }
                Ok(UnitSpec::Pixels { meters_per_pixel })
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestReport {
    pub agents: usize,
    /// Tracks dropped for having fewer than two samples.
    pub skipped_short: usize,
    pub scenes: usize,
}

/// Parses `time agent x y` records separated by whitespace or commas.
/// Blank lines and lines starting with `#` are ignored.
pub fn parse_raw_tracks(text: &str) -> Result<Vec<RawSample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        let err = |m: &str| Error::Parse {
            line: i + 1,
            message: m.to_string(),
        };
        if fields.len() != 4 {
            return Err(err("expected 4 fields: time agent x y"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| err(&format!("not a number: `{s}`")));
        out.push(RawSample {
            t: num(fields[0])?,
            agent: fields[1].to_string(),
            x: num(fields[2])?,
            y: num(fields[3])?,
        });
    }
    Ok(out)
}

type Grid = BTreeMap<i64, Location>;

fn resample_track(samples: &[(f64, Location)]) -> Grid {
    let t_first = samples[0].0;
    let t_last = samples[samples.len() - 1].0;
    let k0 = (t_first / FRAME_DT - GRID_EPS).ceil() as i64;
    let k1 = (t_last / FRAME_DT + GRID_EPS).floor() as i64;
    let mut grid = Grid::new();
    let mut seg = 0;
    for k in k0..=k1 {
        let t = (k as f64 * FRAME_DT).clamp(t_first, t_last);
        while seg + 2 < samples.len() && samples[seg + 1].0 < t - GRID_EPS {
            seg += 1;
        }
        let (ta, pa) = samples[seg];
        let (tb, pb) = samples[(seg + 1).min(samples.len() - 1)];
        let p = if (t - ta).abs() <= GRID_EPS {
            pa
        } else if (t - tb).abs() <= GRID_EPS {
            pb
        } else {
            let a = (t - ta) / (tb - ta);
            Location::new(pa.x + a * (pb.x - pa.x), pa.y + a * (pb.y - pa.y))
        };
        grid.insert(k, p);
    }
    grid
}

/// Converts raw tracks into canonical scenes.
///
/// Each agent is linearly interpolated onto the global `k·0.4 s` grid within
/// its own time span (no extrapolation). Every run of 20 consecutive grid
/// frames of an agent becomes one scene with that agent as focal; neighbors
/// are the other agents with at least one frame inside the observed window,
/// capped to the 16 nearest by mean distance.
pub fn resample_and_normalize(
    samples: &[RawSample],
    units: UnitSpec,
    domain: &DomainTag,
) -> Result<(Vec<TrajectoryScene>, IngestReport)> {
    let mut by_agent: BTreeMap<&str, Vec<(f64, Location)>> = BTreeMap::new();
    for s in samples {
        if !(s.t.is_finite() && s.x.is_finite() && s.y.is_finite()) {
            return Err(Error::Input(format!("non-finite sample for agent `{}`", s.agent)));
        }
        by_agent
            .entry(s.agent.as_str())
            .or_default()
            .push((s.t, Location::new(units.to_meters(s.x), units.to_meters(s.y))));
    }

    let mut report = IngestReport {
        agents: by_agent.len(),
        ..Default::default()
    };
    let mut grids: Vec<(&str, Grid)> = Vec::new();
    for (agent, track) in &by_agent {
        if track.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Input(format!("timestamps of agent `{agent}` are not strictly increasing")));
        }
        if track.len() < 2 {
            report.skipped_short += 1;
            continue;
        }
        grids.push((agent, resample_track(track)));
    }
    if report.skipped_short > 0 {
        log::warn!("skipped {} track(s) shorter than 2 samples", report.skipped_short);
    }

    let window = (OBS_LEN + PRED_LEN) as i64;
    let mut scenes = Vec::new();
    for (fi, (agent, grid)) in grids.iter().enumerate() {
        let (Some(&first), Some(&last)) = (grid.keys().next(), grid.keys().next_back()) else {
            continue;
        };
        for k0 in first..=last - window + 1 {
            let frame = |k: i64| grid[&k];
            let focal_observed: Vec<Location> = (k0..k0 + OBS_LEN as i64).map(frame).collect();
            let focal_future: Vec<Location> = (k0 + OBS_LEN as i64..k0 + window).map(frame).collect();

            let mut neighbors: Vec<(f64, NeighborTrack)> = Vec::new();
            for (ni, (_, other)) in grids.iter().enumerate() {
                if ni == fi {
                    continue;
                }
                let obs: Vec<Option<Location>> =
                    (k0..k0 + OBS_LEN as i64).map(|k| other.get(&k).copied()).collect();
                let valid: Vec<usize> = (0..OBS_LEN).filter(|&t| obs[t].is_some()).collect();
                if valid.is_empty() {
                    continue;
                }
                let mean_dist = valid
                    .iter()
                    .map(|&t| obs[t].unwrap().distance(&focal_observed[t]))
                    .sum::<f64>()
                    / valid.len() as f64;
                neighbors.push((
                    mean_dist,
                    NeighborTrack::new(
                        obs.iter().map(Option::is_some).collect(),
                        obs.iter().map(|p| p.unwrap_or_default()).collect(),
                    ),
                ));
            }
            neighbors.sort_by(|a, b| a.0.total_cmp(&b.0));
            neighbors.truncate(MAX_NEIGHBORS);

            scenes.push(TrajectoryScene {
                scene_id: format!("{agent}@{k0}"),
                domain_id: domain.clone(),
                timestamp_origin: k0 as f64 * FRAME_DT,
                focal_observed,
                focal_future: Some(focal_future),
                neighbors_observed: neighbors.into_iter().map(|(_, n)| n).collect(),
            });
        }
    }
    report.scenes = scenes.len();
    Ok((scenes, report))
}
