use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::types::{validate_scene, Location, TrajectoryScene, OBS_LEN, PRED_LEN};

/// Tensor view of a set of scenes.
///
/// Agent rows are laid out scene by scene: the focal agent first, then its
/// neighbors in order. Inputs are per-step displacements (zero on the first
/// valid frame of a run) so the encoding is translation invariant; neighbor
/// positions enter only relative to the focal agent's last observed location.
#[derive(Debug, Clone)]
pub struct SceneBatch {
    pub n_scenes: usize,
    pub n_agents: usize,
    /// `OBS_LEN` matrices of shape `n_agents × 2`.
    pub displacements: Vec<Matrix>,
    /// `OBS_LEN` matrices of shape `n_agents × 1`, 1.0 where the frame is valid.
    pub step_mask: Vec<Matrix>,
    pub focal_rows: Vec<usize>,
    /// Agent rows of all neighbors, scene by scene.
    pub neighbor_rows: Vec<usize>,
    /// Per scene, positions into `neighbor_rows`.
    pub segments: Vec<Vec<usize>>,
    /// `n_neighbors × 2`: last valid neighbor position minus focal origin.
    pub neighbor_offsets: Matrix,
    /// `n_scenes × 1`, 1.0 for scenes without neighbors.
    pub no_neighbors: Matrix,
    /// Focal last observed location per scene.
    pub origins: Vec<Location>,
    /// `n_scenes × 2·PRED_LEN` future positions relative to the origin,
    /// interleaved `(x₁, y₁, x₂, y₂, …)`. `None` when any scene lacks a future.
    pub future: Option<Matrix>,
    /// `n_scenes × 2·OBS_LEN` focal displacements: x stream then y stream.
    pub recon_target: Matrix,
}

impl SceneBatch {
    pub fn new(scenes: &[&TrajectoryScene]) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        for s in scenes {
            let v = validate_scene(s);
            if !v.is_empty() {
                return Err(Error::Input(format!("scene `{}`: {}", s.scene_id, v.join("; "))));
            }
        }
        let n_scenes = scenes.len();
        let n_agents: usize = scenes.iter().map(|s| s.n_agents()).sum();
        let mut displacements = vec![Matrix::zeros(n_agents, 2); OBS_LEN];
        let mut step_mask = vec![Matrix::zeros(n_agents, 1); OBS_LEN];
        let mut focal_rows = Vec::with_capacity(n_scenes);
        let mut neighbor_rows = Vec::new();
        let mut segments = Vec::with_capacity(n_scenes);
        let mut offsets = Vec::new();
        let mut no_neighbors = Matrix::zeros(n_scenes, 1);
        let mut origins = Vec::with_capacity(n_scenes);
        let mut recon_target = Matrix::zeros(n_scenes, 2 * OBS_LEN);
        let has_future = scenes.iter().all(|s| s.focal_future.is_some());
        let mut future = Matrix::zeros(n_scenes, 2 * PRED_LEN);

        let mut put = |row: usize, pts: &[Location], mask: &[bool]| {
            for t in 0..OBS_LEN {
                if !mask[t] {
                    continue;
                }
                step_mask[t].set(row, 0, 1.0);
                if t > 0 && mask[t - 1] {
                    displacements[t].set(row, 0, pts[t].x - pts[t - 1].x);
                    displacements[t].set(row, 1, pts[t].y - pts[t - 1].y);
                }
            }
        };

        let full = [true; OBS_LEN];
        let mut row = 0;
        for (si, s) in scenes.iter().enumerate() {
            let origin = s.last_observed();
            origins.push(origin);
            focal_rows.push(row);
            put(row, &s.focal_observed, &full);
            for t in 1..OBS_LEN {
                recon_target.set(si, t, s.focal_observed[t].x - s.focal_observed[t - 1].x);
                recon_target.set(si, OBS_LEN + t, s.focal_observed[t].y - s.focal_observed[t - 1].y);
            }
            row += 1;
            let mut seg = Vec::with_capacity(s.neighbors_observed.len());
            for n in &s.neighbors_observed {
                put(row, &n.pts, &n.mask);
                let last = n.last_valid().expect("validated neighbor has a valid frame");
                seg.push(neighbor_rows.len());
                neighbor_rows.push(row);
                offsets.push(vec![last.x - origin.x, last.y - origin.y]);
                row += 1;
            }
            if seg.is_empty() {
                no_neighbors.set(si, 0, 1.0);
            }
            segments.push(seg);
            if let (true, Some(fut)) = (has_future, &s.focal_future) {
                for (t, p) in fut.iter().enumerate() {
                    future.set(si, 2 * t, p.x - origin.x);
                    future.set(si, 2 * t + 1, p.y - origin.y);
                }
            }
        }
        let neighbor_offsets = if offsets.is_empty() {
            Matrix::zeros(0, 2)
        } else {
            Matrix::from_rows(&offsets)
        };
        Ok(Self {
            n_scenes,
            n_agents,
            displacements,
            step_mask,
            focal_rows,
            neighbor_rows,
            segments,
            neighbor_offsets,
            no_neighbors,
            origins,
            future: has_future.then_some(future),
            recon_target,
        })
    }

    /// Converts relative predictions (`n_scenes × 2·PRED_LEN`) back to world
    /// coordinates.
    pub fn to_world(&self, relative: &Matrix) -> Vec<Vec<Location>> {
        (0..self.n_scenes)
            .map(|s| {
                let o = self.origins[s];
                (0..PRED_LEN)
                    .map(|t| Location::new(o.x + relative.get(s, 2 * t), o.y + relative.get(s, 2 * t + 1)))
                    .collect()
            })
            .collect()
    }
}
