//! Reference sequence-to-sequence predictor: location embedding, recurrent
//! individual encoder, max-pooled neighbor interaction and a noise-conditioned
//! recurrent generator that emits per-step displacements.

use rand::Rng;

use crate::batch::SceneBatch;
use crate::error::{Error, Result};
use crate::nn::{Graph, GruCell, Linear, Matrix, ParamStore, Var};
use crate::types::{Location, OBS_LEN, PRED_LEN};

/// Encoder outputs for a batch.
#[derive(Debug, Clone, Copy)]
pub struct BackboneOutput {
    /// `n_agents × d_f` final encoder state of every agent.
    pub agent_hidden: Var,
    /// `n_scenes × d_f` focal rows of `agent_hidden`.
    pub indiv_hidden: Var,
    /// `n_scenes × d_f` pooled interaction tensor.
    pub interaction: Var,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub d_f: usize,
    pub noise_dim: usize,
    /// Number of `d_f`-wide blocks consumed by the decoder initializer: 2 for
    /// the plain predictor `[P, h]`, 4 when fed `[P, h, Hⁱ, Hˢ]`.
    pub fusion_arity: usize,
    embed: Linear,
    encoder: GruCell,
    interact: Linear,
    pool_default: String,
    init: Linear,
    decoder: GruCell,
    head: Linear,
}

impl Backbone {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_f: usize,
        noise_dim: usize,
        fusion_arity: usize,
        rng: &mut R,
    ) -> Self {
        assert!(fusion_arity == 2 || fusion_arity == 4, "fusion arity must be 2 or 4");
        let embed = Linear::new(store, &format!("{prefix}/embed"), 2, d_f, rng);
        let encoder = GruCell::new(store, &format!("{prefix}/encoder"), d_f, d_f, rng);
        let interact = Linear::new(store, &format!("{prefix}/interact"), d_f + 2, d_f, rng);
        let pool_default = format!("{prefix}/pool_default");
        store.init_zeros(&pool_default, 1, d_f);
        let init = Linear::new(store, &format!("{prefix}/init"), fusion_arity * d_f, d_f, rng);
        let decoder = GruCell::new(store, &format!("{prefix}/decoder"), 2 * d_f, d_f + noise_dim, rng);
        let head = Linear::new(store, &format!("{prefix}/head"), d_f + noise_dim, 2, rng);
        Self {
            d_f,
            noise_dim,
            fusion_arity,
            embed,
            encoder,
            interact,
            pool_default,
            init,
            decoder,
            head,
        }
    }

    pub fn init_layer(&self) -> &Linear {
        &self.init
    }

    pub fn embed_layer(&self) -> &Linear {
        &self.embed
    }

    /// One `n_agents × d_f` embedding per observed step; masked frames are zero.
    pub fn embed_locations(&self, g: &mut Graph, batch: &SceneBatch) -> Vec<Var> {
        (0..OBS_LEN)
            .map(|t| {
                let d = g.constant(batch.displacements[t].clone());
                let m = g.constant(batch.step_mask[t].clone());
                let e = self.embed.forward(g, d);
                let e = g.relu(e);
                g.mul_col(e, m)
            })
            .collect()
    }

    /// Runs the recurrent encoder over the observed steps. Masked steps leave
    /// the state unchanged.
    pub fn encode_individual(&self, g: &mut Graph, batch: &SceneBatch, embeddings: &[Var]) -> Var {
        let mut h = g.constant(Matrix::zeros(batch.n_agents, self.d_f));
        for (t, e) in embeddings.iter().enumerate() {
            let next = self.encoder.step(g, *e, h);
            let m = g.constant(batch.step_mask[t].clone());
            let delta = g.sub(next, h);
            let delta = g.mul_col(delta, m);
            h = g.add(h, delta);
        }
        h
    }

    /// Max-pools `[h_j, offset_j]` through a learned map over each scene's
    /// neighbors. Scenes without neighbors receive a learned default vector.
    pub fn encode_interactions(&self, g: &mut Graph, batch: &SceneBatch, agent_hidden: Var) -> Var {
        let nb = g.gather_rows(agent_hidden, &batch.neighbor_rows);
        let off = g.constant(batch.neighbor_offsets.clone());
        let x = g.concat_cols(&[nb, off]);
        let x = self.interact.forward(g, x);
        let x = g.relu(x);
        let pooled = g.segment_max(x, &batch.segments);
        let empty = g.constant(batch.no_neighbors.clone());
        let default = g.param(&self.pool_default);
        let fill = g.matmul(empty, default);
        g.add(pooled, fill)
    }

    pub fn encode(&self, g: &mut Graph, batch: &SceneBatch) -> BackboneOutput {
        let emb = self.embed_locations(g, batch);
        let agent_hidden = self.encode_individual(g, batch, &emb);
        let indiv_hidden = g.gather_rows(agent_hidden, &batch.focal_rows);
        let interaction = self.encode_interactions(g, batch, agent_hidden);
        BackboneOutput {
            agent_hidden,
            indiv_hidden,
            interaction,
        }
    }

    /// Decodes `PRED_LEN` steps and returns cumulative positions relative to
    /// the last observed location, interleaved `(x₁, y₁, …)`, shape
    /// `n_scenes × 2·PRED_LEN`.
    ///
    /// `features` carries `(Hⁱ, Hˢ)`; for a four-block initializer `None`
    /// feeds zeros, which reduces exactly to the two-block predictor.
    pub fn generate_future(
        &self,
        g: &mut Graph,
        indiv_hidden: Var,
        interaction: Var,
        features: Option<(Var, Var)>,
        z: Var,
    ) -> Result<Var> {
        let (b, d) = g.shape(indiv_hidden);
        let expect = |name: &str, shape: (usize, usize), want: (usize, usize)| {
            if shape != want {
                Err(Error::Shape(format!("{name} is {shape:?}, expected {want:?}")))
            } else {
                Ok(())
            }
        };
        expect("indiv_hidden", (b, d), (b, self.d_f))?;
        expect("interaction", g.shape(interaction), (b, self.d_f))?;
        expect("z", g.shape(z), (b, self.noise_dim))?;

        let mut parts = vec![interaction, indiv_hidden];
        match (self.fusion_arity, features) {
            (2, None) => {}
            (2, Some(_)) => {
                return Err(Error::Shape("two-block initializer cannot take extra features".into()))
            }
            (_, Some((hi, hs))) => {
                expect("fused_invariant", g.shape(hi), (b, self.d_f))?;
                expect("fused_specific", g.shape(hs), (b, self.d_f))?;
                parts.extend([hi, hs]);
            }
            (_, None) => {
                let zero = g.constant(Matrix::zeros(b, 2 * self.d_f));
                parts.push(zero);
            }
        }
        let fused = g.concat_cols(&parts);
        let c = self.init.forward(g, fused);
        let c = g.tanh(c);
        let mut h = g.concat_cols(&[c, z]);

        let ctx = g.concat_cols(&[interaction, indiv_hidden]);
        let ctx = self.decoder.project_input(g, ctx);
        let mut pos: Option<Var> = None;
        let mut steps = Vec::with_capacity(PRED_LEN);
        for _ in 0..PRED_LEN {
            h = self.decoder.step_projected(g, ctx, h);
            let disp = self.head.forward(g, h);
            let p = match pos {
                Some(prev) => g.add(prev, disp),
                None => disp,
            };
            pos = Some(p);
            steps.push(p);
        }
        Ok(g.concat_cols(&steps))
    }
}

/// Summed squared L2 error between relative predictions and targets.
pub fn base_loss(g: &mut Graph, predicted: Var, target: Var) -> Result<Var> {
    if g.shape(predicted) != g.shape(target) {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            g.shape(predicted),
            g.shape(target)
        )));
    }
    let d = g.sub(predicted, target);
    Ok(g.sum_sq(d))
}

/// `Σ_scenes Σ_steps ‖Y − Ŷ‖²` over world-space trajectories.
pub fn base_loss_value(predicted: &[Vec<Location>], truth: &[Vec<Location>]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} ground truths",
            predicted.len(),
            truth.len()
        )));
    }
    let mut total = 0.0;
    for (p, t) in predicted.iter().zip(truth) {
        if p.len() != t.len() {
            return Err(Error::Shape(format!("trajectory lengths {} vs {}", p.len(), t.len())));
        }
        total += p
            .iter()
            .zip(t)
            .map(|(a, b)| (a.x - b.x).powi(2) + (a.y - b.y).powi(2))
            .sum::<f64>();
    }
    Ok(total)
}
