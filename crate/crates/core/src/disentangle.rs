//! Domain-invariant and domain-specific feature extraction, the teacher–student
//! aggregator, and the auxiliary losses that shape the two feature families.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Graph, Matrix, Mlp2, ParamStore, Var};
use crate::types::{SimseVariant, OBS_LEN};

/// Routing label of a batch: a concrete source-domain index or masked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainLabel {
    Domain(usize),
    Masked,
}

/// Individual, neighbor and fused features of one family, each `B × d_f`.
#[derive(Debug, Clone, Copy)]
pub struct FeatureTriple {
    pub indiv: Var,
    pub neigh: Var,
    pub fused: Var,
}

/// Shared-weight extractor `V_ind`, `V_nei`, `V_fuse`.
#[derive(Debug, Clone)]
pub struct InvariantExtractor {
    ind: Mlp2,
    nei: Mlp2,
    fuse: Mlp2,
}

impl InvariantExtractor {
    pub fn new<R: Rng>(store: &mut ParamStore, d_f: usize, rng: &mut R) -> Self {
        Self {
            ind: Mlp2::new(store, "invariant/ind", d_f, d_f, d_f, rng),
            nei: Mlp2::new(store, "invariant/nei", d_f, d_f, d_f, rng),
            fuse: Mlp2::new(store, "invariant/fuse", 2 * d_f, d_f, d_f, rng),
        }
    }

    pub fn extract(&self, g: &mut Graph, indiv_hidden: Var, interaction: Var) -> FeatureTriple {
        let indiv = self.ind.forward(g, indiv_hidden);
        let neigh = self.nei.forward(g, interaction);
        let cat = g.concat_cols(&[indiv, neigh]);
        let fused = self.fuse.forward(g, cat);
        FeatureTriple { indiv, neigh, fused }
    }
}

/// Per-domain experts `M_ind^k`, `M_nei^k` and the shared fusion `M_fuse`.
#[derive(Debug)]
pub struct SpecificExtractor {
    experts: Vec<(Mlp2, Mlp2)>,
    fuse: Mlp2,
    labeled_routes: AtomicUsize,
}

impl Clone for SpecificExtractor {
    fn clone(&self) -> Self {
        Self {
            experts: self.experts.clone(),
            fuse: self.fuse.clone(),
            labeled_routes: AtomicUsize::new(self.labeled_routes()),
        }
    }
}

impl SpecificExtractor {
    pub fn new<R: Rng>(store: &mut ParamStore, d_f: usize, n_domains: usize, rng: &mut R) -> Self {
        let experts = (0..n_domains)
            .map(|k| {
                (
                    Mlp2::new(store, &format!("expert_{k}/ind"), d_f, d_f, d_f, rng),
                    Mlp2::new(store, &format!("expert_{k}/nei"), d_f, d_f, d_f, rng),
                )
            })
            .collect();
        Self {
            experts,
            fuse: Mlp2::new(store, "expert_fuse", 2 * d_f, d_f, d_f, rng),
            labeled_routes: AtomicUsize::new(0),
        }
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    /// Number of times the label-indexed expert path has been taken.
    pub fn labeled_routes(&self) -> usize {
        self.labeled_routes.load(Ordering::Relaxed)
    }

    /// Features from expert `k` only.
    pub fn extract(&self, g: &mut Graph, indiv_hidden: Var, interaction: Var, k: usize) -> Result<FeatureTriple> {
        let (ind, nei) = self.experts.get(k).ok_or(Error::DomainOutOfRange {
            index: k,
            n_domains: self.experts.len(),
        })?;
        self.labeled_routes.fetch_add(1, Ordering::Relaxed);
        let indiv = ind.forward(g, indiv_hidden);
        let neigh = nei.forward(g, interaction);
        Ok(self.fuse_pair(g, indiv, neigh))
    }

    /// Element-wise sums over all experts of the individual and neighbor
    /// outputs, in expert order.
    pub fn expert_sums(&self, g: &mut Graph, indiv_hidden: Var, interaction: Var) -> (Var, Var) {
        let mut sum_ind: Option<Var> = None;
        let mut sum_nei: Option<Var> = None;
        for (ind, nei) in &self.experts {
            let a = ind.forward(g, indiv_hidden);
            let b = nei.forward(g, interaction);
            sum_ind = Some(match sum_ind {
                Some(s) => g.add(s, a),
                None => a,
            });
            sum_nei = Some(match sum_nei {
                Some(s) => g.add(s, b),
                None => b,
            });
        }
        (
            sum_ind.expect("at least one expert"),
            sum_nei.expect("at least one expert"),
        )
    }

    pub fn fuse_pair(&self, g: &mut Graph, indiv: Var, neigh: Var) -> FeatureTriple {
        let cat = g.concat_cols(&[indiv, neigh]);
        let fused = self.fuse.forward(g, cat);
        FeatureTriple { indiv, neigh, fused }
    }
}

/// Student aggregators `A_ind`, `A_nei` over the summed expert outputs.
#[derive(Debug, Clone)]
pub struct Aggregator {
    ind: Mlp2,
    nei: Mlp2,
}

impl Aggregator {
    pub fn new<R: Rng>(store: &mut ParamStore, d_f: usize, rng: &mut R) -> Self {
        Self {
            ind: Mlp2::new(store, "aggregator/ind", d_f, d_f, d_f, rng),
            nei: Mlp2::new(store, "aggregator/nei", d_f, d_f, d_f, rng),
        }
    }

    /// Maps already-summed expert outputs through `A_ind`/`A_nei`.
    pub fn apply(&self, g: &mut Graph, sum_ind: Var, sum_nei: Var) -> (Var, Var) {
        (self.ind.forward(g, sum_ind), self.nei.forward(g, sum_nei))
    }

    /// Queries every expert, sums, aggregates and fuses with `M_fuse`.
    pub fn aggregate_specific(
        &self,
        g: &mut Graph,
        experts: &SpecificExtractor,
        indiv_hidden: Var,
        interaction: Var,
    ) -> FeatureTriple {
        let (si, sn) = experts.expert_sums(g, indiv_hidden, interaction);
        let (indiv, neigh) = self.apply(g, si, sn);
        experts.fuse_pair(g, indiv, neigh)
    }
}

/// `D_recon`: maps `[H_iⁱ, H_iˢ]` to the focal displacement sequence
/// (x stream then y stream).
#[derive(Debug, Clone)]
pub struct ReconDecoder(Mlp2);

impl ReconDecoder {
    pub fn new<R: Rng>(store: &mut ParamStore, d_f: usize, rng: &mut R) -> Self {
        Self(Mlp2::new(store, "recon", 2 * d_f, d_f, 2 * OBS_LEN, rng))
    }

    pub fn forward(&self, g: &mut Graph, indiv_invariant: Var, indiv_specific: Var) -> Var {
        let cat = g.concat_cols(&[indiv_invariant, indiv_specific]);
        self.0.forward(g, cat)
    }
}

/// `D_class`: K-way domain logits from the four features.
#[derive(Debug, Clone)]
pub struct DomainClassifier(Mlp2);

impl DomainClassifier {
    pub fn new<R: Rng>(store: &mut ParamStore, d_f: usize, n_domains: usize, rng: &mut R) -> Self {
        Self(Mlp2::new(store, "classifier", 4 * d_f, d_f, n_domains, rng))
    }

    pub fn logits(&self, g: &mut Graph, features: [Var; 4]) -> Var {
        let cat = g.concat_cols(&features);
        self.0.forward(g, cat)
    }
}

// ---------------------------------------------------------------------------
// Scalar reference forms
// ---------------------------------------------------------------------------

/// Scale-invariant MSE of one stream of residuals `d = target − recon`.
pub fn simse(target: &[f64], recon: &[f64], variant: SimseVariant) -> Result<f64> {
    if target.len() != recon.len() {
        return Err(Error::Shape(format!("SIMSE lengths {} vs {}", target.len(), recon.len())));
    }
    let m = target.len();
    if m == 0 {
        return Err(Error::Input("SIMSE of an empty sequence".into()));
    }
    let mf = m as f64;
    let (sq, s) = target
        .iter()
        .zip(recon)
        .fold((0.0, 0.0), |(sq, s), (t, r)| (sq + (t - r) * (t - r), s + (t - r)));
    Ok(match variant {
        SimseVariant::Cited => sq / mf - s * s / (mf * mf),
        SimseVariant::Literal => (1.0 / mf - 1.0 / (mf * mf)) * sq,
    })
}

/// `‖Ãᵀ S̃‖²_F` with `Ã`, `S̃` the batch-mean-centered `B × d` matrices.
pub fn orthogonality_penalty(invariant: &Matrix, specific: &Matrix) -> Result<f64> {
    if invariant.shape() != specific.shape() {
        return Err(Error::Shape(format!(
            "difference loss shapes {:?} vs {:?}",
            invariant.shape(),
            specific.shape()
        )));
    }
    if invariant.rows == 0 {
        return Err(Error::Input("difference loss over an empty batch".into()));
    }
    let center = |m: &Matrix| {
        let mut mean = m.col_sums();
        mean.scale_in_place(1.0 / m.rows as f64);
        let mut c = m.clone();
        for r in 0..m.rows {
            for j in 0..m.cols {
                c.data[r * m.cols + j] -= mean.data[j];
            }
        }
        c
    };
    Ok(center(invariant).t_matmul(&center(specific)).sum_sq())
}

/// Negative log-likelihood of `labels` under softmax(`logits`), summed.
pub fn nll_from_logits(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if logits.rows != labels.len() {
        return Err(Error::Shape(format!("{} logit rows vs {} labels", logits.rows, labels.len())));
    }
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= logits.cols {
            return Err(Error::DomainOutOfRange {
                index: y,
                n_domains: logits.cols,
            });
        }
        let row = logits.row(r);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok(total)
}

/// `α·L_recon + β·L_diff + γ·L_similar`.
pub fn adaptraj_loss(alpha: f64, beta: f64, gamma: f64, recon: f64, diff: f64, similar: f64) -> f64 {
    alpha * recon + beta * diff + gamma * similar
}

// ---------------------------------------------------------------------------
// Differentiable forms
// ---------------------------------------------------------------------------

/// Sum over rows of SIMSE, averaged over the x and y streams. `target` and
/// `recon` are `B × 2m` with the x stream in the first `m` columns.
pub fn reconstruction_loss(g: &mut Graph, target: Var, recon: Var, variant: SimseVariant) -> Result<Var> {
    let (b, w) = g.shape(target);
    if g.shape(recon) != (b, w) || w % 2 != 0 || w == 0 {
        return Err(Error::Shape(format!(
            "reconstruction target {:?} vs output {:?}",
            (b, w),
            g.shape(recon)
        )));
    }
    let m = w / 2;
    let mf = m as f64;
    let d = g.sub(target, recon);
    let ones = g.constant(Matrix::filled(m, 1, 1.0));
    let mut streams = Vec::with_capacity(2);
    for s in 0..2 {
        let ds = g.slice_cols(d, s * m, m);
        let sq = g.sum_sq(ds);
        let term = match variant {
            SimseVariant::Cited => {
                let sq = g.scale(sq, 1.0 / mf);
                let rs = g.matmul(ds, ones);
                let rs = g.sum_sq(rs);
                let rs = g.scale(rs, 1.0 / (mf * mf));
                g.sub(sq, rs)
            }
            SimseVariant::Literal => g.scale(sq, 1.0 / mf - 1.0 / (mf * mf)),
        };
        streams.push(term);
    }
    let total = g.add(streams[0], streams[1]);
    Ok(g.scale(total, 0.5))
}

/// Soft subspace orthogonality between batch-centered invariant and specific
/// features, for the individual and neighbor streams.
pub fn difference_loss(
    g: &mut Graph,
    indiv_invariant: Var,
    indiv_specific: Var,
    neigh_invariant: Var,
    neigh_specific: Var,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(2);
    for (a, s) in [(indiv_invariant, indiv_specific), (neigh_invariant, neigh_specific)] {
        if g.shape(a) != g.shape(s) {
            return Err(Error::Shape(format!("difference loss {:?} vs {:?}", g.shape(a), g.shape(s))));
        }
        if g.shape(a).0 == 0 {
            return Err(Error::Input("difference loss over an empty batch".into()));
        }
        let ac = g.center_rows(a);
        let sc = g.center_rows(s);
        let at = g.transpose(ac);
        let prod = g.matmul(at, sc);
        terms.push(g.sum_sq(prod));
    }
    Ok(g.add(terms[0], terms[1]))
}

/// Summed NLL of `labels` under the classifier's softmax. Gradients reach
/// the specific features unchanged and the invariant features reversed.
pub fn domain_adversarial_loss(
    g: &mut Graph,
    classifier: &DomainClassifier,
    invariant: (Var, Var),
    specific: (Var, Var),
    labels: &[DomainLabel],
) -> Result<Var> {
    let (b, _) = g.shape(invariant.0);
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for {b} scenes", labels.len())));
    }
    let labels = labels
        .iter()
        .map(|l| match l {
            DomainLabel::Domain(k) => Ok(*k),
            DomainLabel::Masked => Err(Error::MaskedLabel),
        })
        .collect::<Result<Vec<usize>>>()?;
    let hi = g.reverse_grad(invariant.0, 1.0);
    let he = g.reverse_grad(invariant.1, 1.0);
    let logits = classifier.logits(g, [hi, he, specific.0, specific.1]);
    let k = g.shape(logits).1;
    let mut onehot = Matrix::zeros(b, k);
    for (r, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::DomainOutOfRange { index: y, n_domains: k });
        }
        onehot.set(r, y, 1.0);
    }
    let logp = g.log_softmax_rows(logits);
    let mask = g.constant(onehot);
    let picked = g.mul(logp, mask);
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0))
}
