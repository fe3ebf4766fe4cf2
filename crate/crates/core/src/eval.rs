//! Displacement metrics and the inference path.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::SceneBatch;
use crate::error::{Error, Result};
use crate::model::{Method, TrajectoryModel};
use crate::nn::Matrix;
use crate::types::{DomainTag, Location, TrajectoryScene, PRED_LEN};

const INFERENCE_CHUNK: usize = 256;

fn check_aligned(pred: &[Vec<Location>], truth: &[Vec<Location>]) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::Input("no trajectories to evaluate".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} ground truths", pred.len(), truth.len())));
    }
    for (i, (p, t)) in pred.iter().zip(truth).enumerate() {
        if p.is_empty() || p.len() != t.len() {
            return Err(Error::Shape(format!(
                "trajectory {i}: {} predicted steps vs {} ground-truth steps",
                p.len(),
                t.len()
            )));
        }
    }
    Ok(())
}

/// Mean Euclidean distance over all steps of all trajectories.
pub fn ade(pred: &[Vec<Location>], truth: &[Vec<Location>]) -> Result<f64> {
    check_aligned(pred, truth)?;
    let (sum, n) = pred
        .iter()
        .zip(truth)
        .flat_map(|(p, t)| p.iter().zip(t))
        .fold((0.0, 0usize), |(s, n), (a, b)| (s + a.distance(b), n + 1));
    Ok(sum / n as f64)
}

/// Mean Euclidean distance at the final step.
pub fn fde(pred: &[Vec<Location>], truth: &[Vec<Location>]) -> Result<f64> {
    check_aligned(pred, truth)?;
    let sum: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| p[p.len() - 1].distance(&t[t.len() - 1]))
        .sum();
    Ok(sum / pred.len() as f64)
}

/// ADE, FDE and mean per-scene squared error of interleaved relative
/// predictions (`B × 2·PRED_LEN`).
pub fn evaluate_relative(pred: &Matrix, truth: &Matrix) -> Result<(f64, f64, f64)> {
    if pred.shape() != truth.shape() || pred.cols != 2 * PRED_LEN || pred.rows == 0 {
        return Err(Error::Shape(format!("prediction {:?} vs truth {:?}", pred.shape(), truth.shape())));
    }
    let to_tracks = |m: &Matrix| -> Vec<Vec<Location>> {
        (0..m.rows)
            .map(|r| m.row(r).chunks(2).map(|c| Location::new(c[0], c[1])).collect())
            .collect()
    };
    let (p, t) = (to_tracks(pred), to_tracks(truth));
    let sq = pred.zip_map(truth, |a, b| a - b).sum_sq() / pred.rows as f64;
    Ok((ade(&p, &t)?, fde(&p, &t)?, sq))
}

/// `K` predicted futures per scene, in world coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub scene_ids: Vec<String>,
    /// `samples[scene][k]` is a `PRED_LEN`-step trajectory.
    pub samples: Vec<Vec<Vec<Location>>>,
}

impl PredictionSet {
    pub fn k(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }
}

/// Predicts `k` futures per scene along the aggregated-expert path. Domain
/// tags are replaced by the masked sentinel before the model sees the scene.
/// `seed` drives the noise draws when `k > 1`.
pub fn run_inference(model: &TrajectoryModel, scenes: &[TrajectoryScene], k: usize, seed: u64) -> Result<PredictionSet> {
    if scenes.is_empty() {
        return Err(Error::Input("no scenes to predict".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(INFERENCE_CHUNK) {
        let masked: Vec<TrajectoryScene> = chunk.iter().map(|s| s.clone().with_domain(DomainTag::Masked)).collect();
        let batch = SceneBatch::new(&masked.iter().collect::<Vec<_>>())?;
        let preds = model.predict(&batch, k, &mut rng)?;
        let world: Vec<Vec<Vec<Location>>> = preds.iter().map(|p| batch.to_world(p)).collect();
        for s in 0..chunk.len() {
            samples.push(world.iter().map(|w| w[s].clone()).collect());
        }
    }
    Ok(PredictionSet {
        scene_ids: scenes.iter().map(|s| s.scene_id.clone()).collect(),
        samples,
    })
}

/// Target-domain metrics of one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub domain: String,
    pub ade: f64,
    pub fde: f64,
    pub n_scenes: usize,
    pub k: usize,
    pub seed: u64,
}

/// Scores a prediction set. With several samples per scene, the minimum
/// ADE and the minimum FDE over samples are taken independently per scene.
pub fn score(predictions: &PredictionSet, scenes: &[TrajectoryScene]) -> Result<(f64, f64)> {
    if predictions.samples.len() != scenes.len() {
        return Err(Error::Shape(format!(
            "{} prediction sets for {} scenes",
            predictions.samples.len(),
            scenes.len()
        )));
    }
    let mut truths = Vec::with_capacity(scenes.len());
    for s in scenes {
        truths.push(
            s.focal_future
                .clone()
                .ok_or_else(|| Error::Input(format!("scene `{}` has no ground-truth future", s.scene_id)))?,
        );
    }
    if predictions.k() <= 1 {
        let best: Vec<Vec<Location>> = predictions.samples.iter().map(|s| s[0].clone()).collect();
        return Ok((ade(&best, &truths)?, fde(&best, &truths)?));
    }
    let (mut a, mut f) = (0.0, 0.0);
    for (samples, truth) in predictions.samples.iter().zip(&truths) {
        let t = std::slice::from_ref(truth);
        let mut best = (f64::INFINITY, f64::INFINITY);
        for p in samples {
            let p = std::slice::from_ref(p);
            best.0 = best.0.min(ade(p, t)?);
            best.1 = best.1.min(fde(p, t)?);
        }
        a += best.0;
        f += best.1;
    }
    let n = scenes.len() as f64;
    Ok((a / n, f / n))
}

pub fn evaluate(model: &TrajectoryModel, domain: &str, scenes: &[TrajectoryScene], k: usize, seed: u64) -> Result<EvalReport> {
    let preds = run_inference(model, scenes, k, seed)?;
    let (ade, fde) = score(&preds, scenes)?;
    Ok(EvalReport {
        method: model.method,
        domain: domain.to_string(),
        ade,
        fde,
        n_scenes: scenes.len(),
        k,
        seed,
    })
}
