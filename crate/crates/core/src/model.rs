//! The assembled predictor: backbone plus the optional disentanglement paths,
//! with label-dependent routing and the per-batch loss terms.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::{base_loss, Backbone, BackboneOutput};
use crate::batch::SceneBatch;
use crate::disentangle::{
    difference_loss, domain_adversarial_loss, reconstruction_loss, Aggregator, DomainClassifier, DomainLabel,
    FeatureTriple, InvariantExtractor, ReconDecoder, SpecificExtractor,
};
use crate::error::{Error, Result};
use crate::nn::{Graph, Matrix, ParamStore, Var};
use crate::types::{FeatureBundle, HyperParams};

/// Which configuration is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    /// Plain backbone on fused sources with the base loss only.
    #[serde(rename = "vanilla")]
    Vanilla,
    #[serde(rename = "adaptraj")]
    AdapTraj,
    /// Specific path removed: `Hˢ = 0`, no difference loss.
    #[serde(rename = "w/o-specific")]
    WithoutSpecific,
    /// Invariant path removed: `Hⁱ = 0`, no difference loss.
    #[serde(rename = "w/o-invariant")]
    WithoutInvariant,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Vanilla,
        Method::AdapTraj,
        Method::WithoutSpecific,
        Method::WithoutInvariant,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::AdapTraj => "adaptraj",
            Method::WithoutSpecific => "w/o-specific",
            Method::WithoutInvariant => "w/o-invariant",
        }
    }

    pub fn has_invariant(self) -> bool {
        matches!(self, Method::AdapTraj | Method::WithoutSpecific)
    }

    pub fn has_specific(self) -> bool {
        matches!(self, Method::AdapTraj | Method::WithoutInvariant)
    }

    /// Whether the staged schedule and auxiliary losses apply.
    pub fn is_staged(self) -> bool {
        self != Method::Vanilla
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}` (expected vanilla, adaptraj, w/o-specific or w/o-invariant)")))
    }
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// `B × 2·PRED_LEN` positions relative to the last observed location.
    pub pred: Var,
    pub encoded: BackboneOutput,
    pub invariant: FeatureTriple,
    pub specific: FeatureTriple,
}

/// Loss terms of one batch. Absent terms do not apply to the method or label.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub base: Var,
    pub recon: Option<Var>,
    pub diff: Option<Var>,
    pub similar: Option<Var>,
    /// `α·recon + β·diff + γ·similar` over the present terms.
    pub ours: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct TrajectoryModel {
    pub method: Method,
    pub hp: HyperParams,
    pub store: ParamStore,
    backbone: Backbone,
    invariant: Option<InvariantExtractor>,
    specific: Option<SpecificExtractor>,
    aggregator: Option<Aggregator>,
    recon: Option<ReconDecoder>,
    classifier: Option<DomainClassifier>,
}

impl TrajectoryModel {
    /// Builds and initializes a model from `hp.seed`.
    pub fn new(method: Method, hp: &HyperParams) -> Result<Self> {
        hp.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
        let mut store = ParamStore::new();
        let d = hp.d_f;
        let arity = if method == Method::Vanilla { 2 } else { 4 };
        let backbone = Backbone::new(&mut store, "backbone", d, hp.noise_dim, arity, &mut rng);
        let invariant = method
            .has_invariant()
            .then(|| InvariantExtractor::new(&mut store, d, &mut rng));
        let specific = method
            .has_specific()
            .then(|| SpecificExtractor::new(&mut store, d, hp.n_domains, &mut rng));
        let aggregator = method.has_specific().then(|| Aggregator::new(&mut store, d, &mut rng));
        let recon = method.is_staged().then(|| ReconDecoder::new(&mut store, d, &mut rng));
        let classifier = method
            .is_staged()
            .then(|| DomainClassifier::new(&mut store, d, hp.n_domains, &mut rng));
        Ok(Self {
            method,
            hp: hp.clone(),
            store,
            backbone,
            invariant,
            specific,
            aggregator,
            recon,
            classifier,
        })
    }

    /// Rebuilds the architecture for `method`/`hp` and installs `params`,
    /// rejecting missing, extra or mis-shaped arrays.
    pub fn from_params(method: Method, hp: &HyperParams, params: Vec<(String, Matrix)>) -> Result<Self> {
        let mut model = Self::new(method, hp)?;
        if params.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                model.store.len(),
                params.len()
            )));
        }
        for (name, value) in params {
            let slot = model
                .store
                .get_mut(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{name}`")))?;
            if slot.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, model expects {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            if !value.is_finite() {
                return Err(Error::Checkpoint(format!("parameter `{name}` contains non-finite values")));
            }
            *slot = value;
        }
        Ok(model)
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn specific_extractor(&self) -> Option<&SpecificExtractor> {
        self.specific.as_ref()
    }

    /// Number of times a label-indexed expert was selected since construction.
    pub fn labeled_routes(&self) -> usize {
        self.specific.as_ref().map_or(0, SpecificExtractor::labeled_routes)
    }

    fn zero_triple(&self, g: &mut Graph, b: usize) -> FeatureTriple {
        let z = g.constant(Matrix::zeros(b, self.hp.d_f));
        FeatureTriple {
            indiv: z,
            neigh: z,
            fused: z,
        }
    }

    /// Forward pass. `Domain(k)` routes through expert `k`; `Masked` through
    /// the aggregated experts. The vanilla predictor ignores the label.
    /// `z` is `B × noise_dim`.
    pub fn forward(&self, g: &mut Graph, batch: &SceneBatch, label: DomainLabel, z: Var) -> Result<Forward> {
        if let (true, DomainLabel::Domain(k)) = (self.method.is_staged(), label) {
            if k >= self.hp.n_domains {
                return Err(Error::DomainOutOfRange {
                    index: k,
                    n_domains: self.hp.n_domains,
                });
            }
        }
        let b = batch.n_scenes;
        let encoded = self.backbone.encode(g, batch);
        let (h, p) = (encoded.indiv_hidden, encoded.interaction);
        let invariant = match &self.invariant {
            Some(v) => v.extract(g, h, p),
            None => self.zero_triple(g, b),
        };
        let specific = match (&self.specific, &self.aggregator, label) {
            (Some(s), _, DomainLabel::Domain(k)) => s.extract(g, h, p, k)?,
            (Some(s), Some(a), DomainLabel::Masked) => a.aggregate_specific(g, s, h, p),
            _ => self.zero_triple(g, b),
        };
        let features = self
            .method
            .is_staged()
            .then_some((invariant.fused, specific.fused));
        let pred = self.backbone.generate_future(g, h, p, features, z)?;
        Ok(Forward {
            pred,
            encoded,
            invariant,
            specific,
        })
    }

    /// Forward pass plus every loss term that applies to the method and label.
    pub fn losses(&self, g: &mut Graph, batch: &SceneBatch, label: DomainLabel, z: Var) -> Result<(Forward, LossTerms)> {
        let future = batch
            .future
            .as_ref()
            .ok_or_else(|| Error::Input("training batch without ground-truth futures".into()))?;
        let fwd = self.forward(g, batch, label, z)?;
        let target = g.constant(future.clone());
        let base = base_loss(g, fwd.pred, target)?;
        let mut terms = LossTerms {
            base,
            recon: None,
            diff: None,
            similar: None,
            ours: None,
        };
        if !self.method.is_staged() {
            return Ok((fwd, terms));
        }
        let (inv, spec) = (fwd.invariant, fwd.specific);
        if let Some(dec) = &self.recon {
            let out = dec.forward(g, inv.indiv, spec.indiv);
            let tgt = g.constant(batch.recon_target.clone());
            terms.recon = Some(reconstruction_loss(g, tgt, out, self.hp.simse_variant)?);
        }
        if self.method == Method::AdapTraj {
            terms.diff = Some(difference_loss(g, inv.indiv, spec.indiv, inv.neigh, spec.neigh)?);
        }
        if let (Some(cls), DomainLabel::Domain(k)) = (&self.classifier, label) {
            let labels = vec![DomainLabel::Domain(k); batch.n_scenes];
            terms.similar = Some(domain_adversarial_loss(
                g,
                cls,
                (inv.indiv, inv.neigh),
                (spec.indiv, spec.neigh),
                &labels,
            )?);
        }
        let weighted: Vec<Var> = [
            (terms.recon, self.hp.alpha),
            (terms.diff, self.hp.beta),
            (terms.similar, self.hp.gamma),
        ]
        .into_iter()
        .filter_map(|(t, w)| t.map(|t| g.scale(t, w)))
        .collect();
        terms.ours = weighted.into_iter().reduce(|a, b| g.add(a, b));
        Ok((fwd, terms))
    }

    /// `K` relative predictions per scene through the masked (inference)
    /// path. `K = 1` uses `z = 0`; larger `K` draws `z ~ N(0, I)` from `rng`.
    pub fn predict<R: Rng>(&self, batch: &SceneBatch, k: usize, rng: &mut R) -> Result<Vec<Matrix>> {
        if k == 0 {
            return Err(Error::Config("number of samples must be at least 1".into()));
        }
        (0..k)
            .map(|_| {
                let noise = if k == 1 {
                    Matrix::zeros(batch.n_scenes, self.hp.noise_dim)
                } else {
                    sample_noise(rng, batch.n_scenes, self.hp.noise_dim)
                };
                let mut g = Graph::new(&self.store);
                let z = g.constant(noise);
                let fwd = self.forward(&mut g, batch, DomainLabel::Masked, z)?;
                Ok(g.value(fwd.pred).clone())
            })
            .collect()
    }

    /// Per-scene feature vectors along the inference path.
    pub fn features(&self, batch: &SceneBatch) -> Result<Vec<FeatureBundle>> {
        let mut g = Graph::new(&self.store);
        let z = g.constant(Matrix::zeros(batch.n_scenes, self.hp.noise_dim));
        let f = self.forward(&mut g, batch, DomainLabel::Masked, z)?;
        let rows = |v: Var, i: usize| g.value(v).row(i).to_vec();
        (0..batch.n_scenes)
            .map(|i| {
                FeatureBundle::new(
                    self.hp.d_f,
                    rows(f.encoded.indiv_hidden, i),
                    rows(f.encoded.interaction, i),
                    rows(f.invariant.indiv, i),
                    rows(f.invariant.neigh, i),
                    rows(f.specific.indiv, i),
                    rows(f.specific.neigh, i),
                    rows(f.invariant.fused, i),
                    rows(f.specific.fused, i),
                )
            })
            .collect()
    }
}

/// `rows × cols` standard-normal draws.
pub fn sample_noise<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect())
}
