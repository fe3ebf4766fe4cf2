//! Shared value types: locations, scenes, feature bundles and hyperparameters,
//! plus scene validation and the newline-delimited scene file format.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Observed window length in frames.
pub const OBS_LEN: usize = 8;
/// Prediction horizon in frames.
pub const PRED_LEN: usize = 12;
/// Frame spacing in seconds.
pub const FRAME_DT: f64 = 0.4;

/// Planar world-space position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Location {
    pub x: f64,
    pub y: f64,
}

impl Location {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(&self, other: &Location) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.x + dx, self.y + dy)
    }
}

impl From<[f64; 2]> for Location {
    fn from(v: [f64; 2]) -> Self {
        Self::new(v[0], v[1])
    }
}

impl From<Location> for [f64; 2] {
    fn from(l: Location) -> Self {
        [l.x, l.y]
    }
}

/// Domain tag carried by a scene. `Masked` is serialized as `null` and can
/// never collide with a named domain.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "Option<String>", into = "Option<String>")]
pub enum DomainTag {
    Named(String),
    Masked,
}

impl DomainTag {
    pub fn named(id: impl Into<String>) -> Self {
        DomainTag::Named(id.into())
    }

    pub fn is_masked(&self) -> bool {
        matches!(self, DomainTag::Masked)
    }
}

impl From<Option<String>> for DomainTag {
    fn from(v: Option<String>) -> Self {
        match v {
            Some(s) => DomainTag::Named(s),
            None => DomainTag::Masked,
        }
    }
}

impl From<DomainTag> for Option<String> {
    fn from(t: DomainTag) -> Self {
        match t {
            DomainTag::Named(s) => Some(s),
            DomainTag::Masked => None,
        }
    }
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DomainTag::Named(s) => f.write_str(s),
            DomainTag::Masked => f.write_str("<masked>"),
        }
    }
}

/// One neighbor's observed window. Frames with `mask[t] == false` are missing;
/// their coordinates are stored as zero and must not be read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborTrack {
    pub mask: Vec<bool>,
    pub pts: Vec<Location>,
}

impl NeighborTrack {
    pub fn new(mask: Vec<bool>, pts: Vec<Location>) -> Self {
        let pts = pts
            .into_iter()
            .zip(&mask)
            .map(|(p, &m)| if m { p } else { Location::default() })
            .collect();
        Self { mask, pts }
    }

    pub fn full(pts: Vec<Location>) -> Self {
        let mask = vec![true; pts.len()];
        Self { mask, pts }
    }

    pub fn valid_frames(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Last valid position within the observed window.
    pub fn last_valid(&self) -> Option<Location> {
        self.mask
            .iter()
            .zip(&self.pts)
            .rev()
            .find(|(m, _)| **m)
            .map(|(_, p)| *p)
    }
}

/// A focal agent with its co-occurring neighbors over the observed window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryScene {
    pub scene_id: String,
    pub domain_id: DomainTag,
    #[serde(rename = "t0")]
    pub timestamp_origin: f64,
    #[serde(rename = "focal")]
    pub focal_observed: Vec<Location>,
    #[serde(rename = "future")]
    pub focal_future: Option<Vec<Location>>,
    #[serde(rename = "neighbors")]
    pub neighbors_observed: Vec<NeighborTrack>,
}

impl TrajectoryScene {
    pub fn last_observed(&self) -> Location {
        *self
            .focal_observed
            .last()
            .expect("scene has an observed window")
    }

    pub fn n_agents(&self) -> usize {
        1 + self.neighbors_observed.len()
    }

    /// Copy of the scene with every coordinate shifted by `(dx, dy)`.
    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        let shift = |v: &[Location]| v.iter().map(|p| p.translated(dx, dy)).collect::<Vec<_>>();
        Self {
            scene_id: self.scene_id.clone(),
            domain_id: self.domain_id.clone(),
            timestamp_origin: self.timestamp_origin,
            focal_observed: shift(&self.focal_observed),
            focal_future: self.focal_future.as_deref().map(shift),
            neighbors_observed: self
                .neighbors_observed
                .iter()
                .map(|n| NeighborTrack::new(n.mask.clone(), shift(&n.pts)))
                .collect(),
        }
    }

    pub fn with_domain(mut self, tag: DomainTag) -> Self {
        self.domain_id = tag;
        self
    }
}

/// Checks every scene invariant and reports each violation by field and rule.
pub fn validate_scene(scene: &TrajectoryScene) -> Vec<String> {
    let mut out = Vec::new();
    if scene.focal_observed.len() != OBS_LEN {
        out.push(format!(
            "focal_observed length {} ≠ {}",
            scene.focal_observed.len(),
            OBS_LEN
        ));
    }
    if scene.focal_observed.iter().any(|p| !p.is_finite()) {
        out.push("focal_observed contains a non-finite coordinate".to_string());
    }
    if let Some(future) = &scene.focal_future {
        if future.len() != PRED_LEN {
            out.push(format!("focal_future length {} ≠ {}", future.len(), PRED_LEN));
        }
        if future.iter().any(|p| !p.is_finite()) {
            out.push("focal_future contains a non-finite coordinate".to_string());
        }
    }
    if !scene.timestamp_origin.is_finite() {
        out.push("t0 is not finite".to_string());
    }
    for (j, n) in scene.neighbors_observed.iter().enumerate() {
        if n.mask.len() != OBS_LEN {
            out.push(format!("neighbor {j} mask length {} ≠ {}", n.mask.len(), OBS_LEN));
        }
        if n.pts.len() != OBS_LEN {
            out.push(format!("neighbor {j} pts length {} ≠ {}", n.pts.len(), OBS_LEN));
        }
        let shared = n
            .mask
            .iter()
            .take(scene.focal_observed.len().min(OBS_LEN))
            .filter(|m| **m)
            .count();
        if shared == 0 {
            out.push(format!("neighbor {j} never co-occurs"));
        }
        if n.mask.iter().zip(&n.pts).any(|(m, p)| *m && !p.is_finite()) {
            out.push(format!("neighbor {j} contains a non-finite coordinate"));
        }
    }
    out
}

/// Serializes scenes as newline-delimited JSON records.
pub fn encode_scenes(scenes: &[TrajectoryScene]) -> Result<String> {
    let mut out = String::new();
    for s in scenes {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn decode_scenes(text: &str) -> Result<Vec<TrajectoryScene>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_scene_file(path: &Path, scenes: &[TrajectoryScene]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(encode_scenes(scenes)?.as_bytes())?;
    f.flush()?;
    Ok(())
}

pub fn read_scene_file(path: &Path) -> Result<Vec<TrajectoryScene>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut scenes = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        scenes.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(scenes)
}

/// The disentangled representations of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub indiv_hidden: Vec<f64>,
    pub interaction: Vec<f64>,
    pub indiv_invariant: Vec<f64>,
    pub neigh_invariant: Vec<f64>,
    pub indiv_specific: Vec<f64>,
    pub neigh_specific: Vec<f64>,
    pub fused_invariant: Vec<f64>,
    pub fused_specific: Vec<f64>,
}

impl FeatureBundle {
    /// Builds a bundle, rejecting vectors whose length differs from `d_f`
    /// or that contain non-finite entries.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        d_f: usize,
        indiv_hidden: Vec<f64>,
        interaction: Vec<f64>,
        indiv_invariant: Vec<f64>,
        neigh_invariant: Vec<f64>,
        indiv_specific: Vec<f64>,
        neigh_specific: Vec<f64>,
        fused_invariant: Vec<f64>,
        fused_specific: Vec<f64>,
    ) -> Result<Self> {
        let b = Self {
            indiv_hidden,
            interaction,
            indiv_invariant,
            neigh_invariant,
            indiv_specific,
            neigh_specific,
            fused_invariant,
            fused_specific,
        };
        for (name, v) in b.fields() {
            if v.len() != d_f {
                return Err(Error::Shape(format!("{name} has length {} ≠ d_f {d_f}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Input(format!("{name} contains a non-finite entry")));
            }
        }
        Ok(b)
    }

    pub fn fields(&self) -> [(&'static str, &[f64]); 8] {
        [
            ("indiv_hidden", &self.indiv_hidden),
            ("interaction", &self.interaction),
            ("indiv_invariant", &self.indiv_invariant),
            ("neigh_invariant", &self.neigh_invariant),
            ("indiv_specific", &self.indiv_specific),
            ("neigh_specific", &self.neigh_specific),
            ("fused_invariant", &self.fused_invariant),
            ("fused_specific", &self.fused_specific),
        ]
    }
}

/// Which SIMSE formula the reconstruction loss uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimseVariant {
    /// `(1/m)·Σd² − (1/m²)·(Σd)²`: uniform-sign residuals are credited.
    #[default]
    Cited,
    /// `(1/m − 1/m²)·Σd²`, the printed form.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub delta_prime: f64,
    pub sigma: f64,
    pub e_start: usize,
    pub e_end: usize,
    pub e_total: usize,
    pub f_low: f64,
    pub f_high: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub d_f: usize,
    pub n_domains: usize,
    pub noise_dim: usize,
    pub seed: u64,
    pub grad_clip: f64,
    pub simse_variant: SimseVariant,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 0.075,
            gamma: 0.25,
            delta: 0.5,
            delta_prime: 0.05,
            sigma: 0.5,
            e_start: 10,
            e_end: 20,
            e_total: 30,
            f_low: 0.1,
            f_high: 1.0,
            lr: 1e-3,
            batch_size: 32,
            d_f: 32,
            n_domains: 3,
            noise_dim: 8,
            seed: 0,
            grad_clip: 10.0,
            simse_variant: SimseVariant::Cited,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("delta", self.delta),
            ("delta_prime", self.delta_prime),
        ];
        for (name, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value ≥ 0, got {w}")));
            }
        }
        if !(0.0..=1.0).contains(&self.sigma) {
            return Err(Error::Config(format!("sigma must lie in [0, 1], got {}", self.sigma)));
        }
        if !(0 < self.e_start && self.e_start <= self.e_end && self.e_end <= self.e_total) {
            return Err(Error::Config(format!(
                "epoch schedule must satisfy 0 < e_start ≤ e_end ≤ e_total, got {}/{}/{}",
                self.e_start, self.e_end, self.e_total
            )));
        }
        if !(0.0 < self.f_low && self.f_low <= self.f_high) {
            return Err(Error::Config(format!(
                "learning-rate fractions must satisfy 0 < f_low ≤ f_high, got {}/{}",
                self.f_low, self.f_high
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.d_f == 0 || self.n_domains == 0 {
            return Err(Error::Config("batch_size, d_f and n_domains must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let hp: HyperParams =
            toml::from_str(text).map_err(|e| Error::Config(format!("hyperparameter file: {e}")))?;
        hp.validate()?;
        Ok(hp)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("hyperparameters serialize")
    }
}
