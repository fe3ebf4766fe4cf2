//! Multi-domain trajectory corpora: synthesis, ingestion, statistics and
//! chronological splitting.

mod ingest;
mod stats;
mod synth;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{read_scene_file, write_scene_file, TrajectoryScene};

pub use ingest::{parse_raw_tracks, resample_and_normalize, IngestReport, RawSample, UnitSpec};
pub use stats::{compute_domain_statistics, stats_from_tracks, DomainStats, Track};
pub use synth::generate_synthetic_domain;

/// Behavioural parameters of one synthetic domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainProfile {
    pub domain_id: String,
    /// m/s
    pub desired_speed_mean: f64,
    pub desired_speed_std: f64,
    /// Multiplies emitted y coordinates (and therefore y velocities).
    pub axis_scale_y: f64,
    pub interaction_strength: f64,
    /// meters
    pub interaction_range: f64,
    /// +1 rotates repulsion fully toward passing on the right, −1 on the left.
    pub passing_side_bias: f64,
    pub agents_per_scene_mean: f64,
    pub scene_count: usize,
}

impl DomainProfile {
    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("profile `{}`: {m}", self.domain_id)));
        if self.scene_count == 0 {
            return bad("scene_count must be positive".into());
        }
        if !(self.desired_speed_mean > 0.0) {
            return bad(format!("desired_speed_mean must be positive, got {}", self.desired_speed_mean));
        }
        if !(self.desired_speed_std >= 0.0) {
            return bad("desired_speed_std must be ≥ 0".into());
        }
        if !(self.axis_scale_y > 0.0) {
            return bad("axis_scale_y must be positive".into());
        }
        if !(self.interaction_strength >= 0.0) {
            return bad("interaction_strength must be ≥ 0".into());
        }
        if !(self.interaction_range > 0.0) {
            return bad("interaction_range must be positive".into());
        }
        if !(self.passing_side_bias.abs() <= 1.0) {
            return bad("|passing_side_bias| must be ≤ 1".into());
        }
        if !(self.agents_per_scene_mean >= 1.0) {
            return bad("agents_per_scene_mean must be ≥ 1".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let p: DomainProfile =
            toml::from_str(text).map_err(|e| Error::Config(format!("profile file: {e}")))?;
        p.validate()?;
        Ok(p)
    }
}

/// A list of profiles, as stored in a `[[domains]]` TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSet {
    pub domains: Vec<DomainProfile>,
}

impl ProfileSet {
    pub fn from_toml(text: &str) -> Result<Self> {
        let set: ProfileSet =
            toml::from_str(text).map_err(|e| Error::Config(format!("profiles file: {e}")))?;
        for p in &set.domains {
            p.validate()?;
        }
        Ok(set)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("profiles serialize")
    }

    /// Four-domain setup: three sources and one held-out domain whose speed
    /// and anisotropy lie outside the sources' range.
    pub fn default_four() -> Self {
        let p = |id: &str, v: f64, sd: f64, ay: f64, a: f64, b: f64, side: f64, n: f64| DomainProfile {
            domain_id: id.to_string(),
            desired_speed_mean: v,
            desired_speed_std: sd,
            axis_scale_y: ay,
            interaction_strength: a,
            interaction_range: b,
            passing_side_bias: side,
            agents_per_scene_mean: n,
            scene_count: 600,
        };
        Self {
            domains: vec![
                p("plaza", 1.0, 0.15, 1.0, 2.0, 0.5, 0.8, 6.0),
                p("corridor", 1.25, 0.2, 0.8, 3.0, 0.4, -0.8, 8.0),
                p("campus", 0.8, 0.1, 1.3, 1.5, 0.6, 0.3, 5.0),
                p("drone", 1.6, 0.25, 1.7, 2.5, 0.5, -0.5, 7.0),
            ],
        }
    }
}

/// Which split a scene belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Scenes of one domain in chronological order, with a 6:2:2 split.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainCorpus {
    pub domain_id: String,
    pub scenes: Vec<TrajectoryScene>,
    /// Exclusive end of the train and val ranges; test runs to the end.
    split_bounds: Option<(usize, usize)>,
}

impl DomainCorpus {
    pub fn new(domain_id: impl Into<String>, scenes: Vec<TrajectoryScene>) -> Self {
        Self {
            domain_id: domain_id.into(),
            scenes,
            split_bounds: None,
        }
    }

    pub fn is_split(&self) -> bool {
        self.split_bounds.is_some()
    }

    pub fn split_sizes(&self) -> Option<(usize, usize, usize)> {
        self.split_bounds
            .map(|(a, b)| (a, b - a, self.scenes.len() - b))
    }

    pub fn split(&self, which: Split) -> &[TrajectoryScene] {
        let (a, b) = self
            .split_bounds
            .expect("corpus has not been split; call chronological_split first");
        match which {
            Split::Train => &self.scenes[..a],
            Split::Val => &self.scenes[a..b],
            Split::Test => &self.scenes[b..],
        }
    }

    pub fn stats(&self) -> Result<DomainStats> {
        compute_domain_statistics(self)
    }

    /// Writes `scenes.ndjson` (and `stats.json`) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_scene_file(&dir.join("scenes.ndjson"), &self.scenes)?;
        let stats = self.stats()?;
        std::fs::write(dir.join("stats.json"), serde_json::to_string_pretty(&stats)? + "\n")?;
        Ok(())
    }

    /// Loads `scenes.ndjson` from `dir`. The domain id is taken from the first
    /// named scene, falling back to the directory name.
    pub fn load(dir: &Path) -> Result<Self> {
        let scenes = read_scene_file(&dir.join("scenes.ndjson"))?;
        let domain_id = scenes
            .iter()
            .find_map(|s| match &s.domain_id {
                crate::types::DomainTag::Named(n) => Some(n.clone()),
                crate::types::DomainTag::Masked => None,
            })
            .or_else(|| dir.file_name().map(|n| n.to_string_lossy().into_owned()))
            .unwrap_or_default();
        Ok(Self::new(domain_id, scenes))
    }
}

/// Stable-sorts scenes by `timestamp_origin` and partitions them 6:2:2 into
/// contiguous train/val/test ranges. Val and test take `floor(n/5)` scenes
/// each; the remainder goes to train.
pub fn chronological_split(mut corpus: DomainCorpus) -> Result<DomainCorpus> {
    let n = corpus.scenes.len();
    if n < 5 {
        return Err(Error::Input(format!(
            "corpus `{}` has {n} scenes; at least 5 are needed for three non-empty splits",
            corpus.domain_id
        )));
    }
    corpus
        .scenes
        .sort_by(|a, b| a.timestamp_origin.total_cmp(&b.timestamp_origin));
    let n_val = n / 5;
    let n_test = n / 5;
    let n_train = n - n_val - n_test;
    corpus.split_bounds = Some((n_train, n_train + n_val));
    Ok(corpus)
}
