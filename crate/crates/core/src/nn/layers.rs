use rand::Rng;

use super::{Graph, ParamStore, Var};

/// Affine map `x·W + b`; parameters `{prefix}/w` and `{prefix}/b`.
#[derive(Debug, Clone)]
pub struct Linear {
    w: String,
    b: String,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = format!("{prefix}/w");
        let b = format!("{prefix}/b");
        store.init_weight(&w, fan_in, fan_out, rng);
        store.init_zeros(&b, 1, fan_out);
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn weight_name(&self) -> &str {
        &self.w
    }

    pub fn bias_name(&self) -> &str {
        &self.b
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(&self.w);
        let b = g.param(&self.b);
        let xw = g.matmul(x, w);
        g.add_row(xw, b)
    }
}

/// Two-layer perceptron: `Linear → ReLU → Linear`.
#[derive(Debug, Clone)]
pub struct Mlp2 {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp2 {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        fan_in: usize,
        hidden: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            l1: Linear::new(store, &format!("{prefix}/l1"), fan_in, hidden, rng),
            l2: Linear::new(store, &format!("{prefix}/l2"), hidden, fan_out, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.l1.forward(g, x);
        let h = g.relu(h);
        self.l2.forward(g, h)
    }
}

/// Gated recurrent unit with fused gate matrices (`r | z | n` column blocks).
#[derive(Debug, Clone)]
pub struct GruCell {
    wx: String,
    wh: String,
    bx: String,
    bh: String,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let cell = Self {
            wx: format!("{prefix}/wx"),
            wh: format!("{prefix}/wh"),
            bx: format!("{prefix}/bx"),
            bh: format!("{prefix}/bh"),
            input,
            hidden,
        };
        store.init_weight(&cell.wx, input, 3 * hidden, rng);
        store.init_weight(&cell.wh, hidden, 3 * hidden, rng);
        store.init_zeros(&cell.bx, 1, 3 * hidden);
        store.init_zeros(&cell.bh, 1, 3 * hidden);
        cell
    }

    /// Precomputes `x·Wx + bx` so a constant input can be reused across steps.
    pub fn project_input(&self, g: &mut Graph, x: Var) -> Var {
        let wx = g.param(&self.wx);
        let bx = g.param(&self.bx);
        let xw = g.matmul(x, wx);
        g.add_row(xw, bx)
    }

    pub fn step(&self, g: &mut Graph, x: Var, h: Var) -> Var {
        let gx = self.project_input(g, x);
        self.step_projected(g, gx, h)
    }

    pub fn step_projected(&self, g: &mut Graph, gx: Var, h: Var) -> Var {
        let n = self.hidden;
        let wh = g.param(&self.wh);
        let bh = g.param(&self.bh);
        let hw = g.matmul(h, wh);
        let gh = g.add_row(hw, bh);

        let xr = g.slice_cols(gx, 0, n);
        let hr = g.slice_cols(gh, 0, n);
        let r = g.add(xr, hr);
        let r = g.sigmoid(r);

        let xz = g.slice_cols(gx, n, n);
        let hz = g.slice_cols(gh, n, n);
        let z = g.add(xz, hz);
        let z = g.sigmoid(z);

        let xn = g.slice_cols(gx, 2 * n, n);
        let hn = g.slice_cols(gh, 2 * n, n);
        let rhn = g.mul(r, hn);
        let cand = g.add(xn, rhn);
        let cand = g.tanh(cand);

        // h' = n + z ⊙ (h − n)
        let diff = g.sub(h, cand);
        let zd = g.mul(z, diff);
        g.add(cand, zd)
    }
}
