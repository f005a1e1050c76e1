//! Differentiable building blocks: MLPs, GRU cells, diagonal-Gaussian heads,
//! reparameterized sampling and the gated residual emitter.
//!
//! Every block owns only [`ParamId`]s; values live in a shared
//! [`ParameterStore`] and computation happens on a [`Tape`]. Inputs are
//! `batch × features` matrices.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterStore};
use crate::tape::{Tape, Var};

/// Added to every softplus standard deviation.
pub const STD_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Softplus,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Softplus => tape.softplus(x),
            Activation::Identity => x,
        }
    }
}

/// Diagonal Gaussian with plain values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::ShapeMismatch(format!("mean has {} entries, std {}", mean.len(), std.len())));
        }
        if mean.iter().any(|m| !m.is_finite()) || std.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::InvalidParams("DiagGaussian needs finite mean and finite positive std".into()));
        }
        Ok(Self { mean, std })
    }

    pub fn standard(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// A Gaussian whose mean and std are tape nodes of equal shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GaussVar {
    pub mean: Var,
    pub std: Var,
}

impl GaussVar {
    /// Row `row` of a batched Gaussian as plain values.
    pub fn row(&self, tape: &Tape, row: usize) -> DiagGaussian {
        let (_, d) = tape.shape(self.mean);
        DiagGaussian {
            mean: tape.value(self.mean)[row * d..(row + 1) * d].to_vec(),
            std: tape.value(self.std)[row * d..(row + 1) * d].to_vec(),
        }
    }

    /// Standard normal broadcast to `rows × dim`, untracked.
    pub fn standard(tape: &mut Tape, rows: usize, dim: usize) -> Self {
        Self { mean: tape.zeros(rows, dim), std: tape.fill(rows, dim, 1.0) }
    }

    pub fn from_plain(tape: &mut Tape, g: &DiagGaussian) -> Self {
        let d = g.dim();
        Self { mean: tape.constant(1, d, g.mean.clone()), std: tape.constant(1, d, g.std.clone()) }
    }

    /// Columns `start..start+len` of both mean and std.
    pub fn slice(&self, tape: &mut Tape, start: usize, len: usize) -> Self {
        Self { mean: tape.slice_cols(self.mean, start, len), std: tape.slice_cols(self.std, start, len) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input width followed by the width of each layer.
    pub layer_widths: Vec<usize>,
    /// One activation per layer.
    pub activations: Vec<Activation>,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        let spec = Self { layer_widths, activations };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::InvalidSpec("an MLP needs an input width and at least one layer".into()));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::InvalidSpec("MLP widths must be positive".into()));
        }
        if self.activations.len() != self.layer_widths.len() - 1 {
            return Err(Error::InvalidSpec(format!(
                "{} activations for {} layers",
                self.activations.len(),
                self.layer_widths.len() - 1
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn build<R: Rng>(
        store: &mut ParameterStore,
        w_name: &str,
        b_name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.insert_fan_in(w_name, &[in_dim, out_dim], in_dim, rng)?;
        let b = store.insert_fan_in(b_name, &[out_dim], in_dim, rng)?;
        Ok(Self { w, b, in_dim, out_dim })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let (_, cols) = tape.shape(x);
        if cols != self.in_dim {
            return Err(Error::ShapeMismatch(format!("linear layer expects {} inputs, got {cols}", self.in_dim)));
        }
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        Ok(tape.linear(x, w, b))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activations: Vec<Activation>,
}

impl Mlp {
    /// Layers are named `{component}/l{i}/W` and `{component}/l{i}/b`.
    pub fn build<R: Rng>(store: &mut ParameterStore, component: &str, spec: &MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                Linear::build(store, &format!("{component}/l{i}/W"), &format!("{component}/l{i}/b"), w[0], w[1], rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, activations: spec.activations.clone() })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (layer, act) in self.layers.iter().zip(&self.activations) {
            let a = layer.forward(tape, store, h)?;
            h = act.apply(tape, a);
        }
        Ok(h)
    }
}

/// Forward pass of a single input vector through an MLP.
pub fn mlp_forward(store: &ParameterStore, mlp: &Mlp, input: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let x = tape.constant(1, input.len(), input.to_vec());
    let y = mlp.forward(&mut tape, store, x)?;
    Ok(tape.value(y).to_vec())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RnnState {
    pub h: Vec<f64>,
}

impl RnnState {
    pub fn zeros(hidden: usize) -> Self {
        Self { h: vec![0.0; hidden] }
    }
}

/// Gated recurrent unit.
///
/// ```text
/// r  = σ(x W_xr + h W_hr + b_r)
/// u  = σ(x W_xu + h W_hu + b_u)
/// n  = tanh(x W_xn + (r ⊙ h) W_hn + b_n)
/// h' = (1 − u) ⊙ n + u ⊙ h
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct Gru {
    pub input_dim: usize,
    pub hidden_dim: usize,
    w_x: [ParamId; 3],
    w_h: [ParamId; 3],
    b: [ParamId; 3],
}

impl Gru {
    pub fn build<R: Rng>(
        store: &mut ParameterStore,
        component: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 {
            return Err(Error::InvalidSpec("GRU dimensions must be positive".into()));
        }
        let mut w_x = Vec::new();
        let mut w_h = Vec::new();
        let mut b = Vec::new();
        for gate in ["r", "u", "n"] {
            w_x.push(store.insert_fan_in(
                &format!("{component}/gru/W_x{gate}"),
                &[input_dim, hidden_dim],
                input_dim,
                rng,
            )?);
            w_h.push(store.insert_fan_in(
                &format!("{component}/gru/W_h{gate}"),
                &[hidden_dim, hidden_dim],
                hidden_dim,
                rng,
            )?);
            b.push(store.insert_filled(&format!("{component}/gru/b_{gate}"), &[hidden_dim], 0.0)?);
        }
        Ok(Self {
            input_dim,
            hidden_dim,
            w_x: [w_x[0], w_x[1], w_x[2]],
            w_h: [w_h[0], w_h[1], w_h[2]],
            b: [b[0], b[1], b[2]],
        })
    }

    pub fn step(&self, tape: &mut Tape, store: &ParameterStore, h: Var, x: Var) -> Result<Var> {
        let (hr, hc) = tape.shape(h);
        let (xr, xc) = tape.shape(x);
        if hc != self.hidden_dim || xc != self.input_dim || hr != xr {
            return Err(Error::ShapeMismatch(format!(
                "GRU({}→{}) got h {hr}×{hc}, x {xr}×{xc}",
                self.input_dim, self.hidden_dim
            )));
        }
        let pre = |tape: &mut Tape, gate: usize, hh: Var| {
            let wx = tape.param(store, self.w_x[gate]);
            let wh = tape.param(store, self.w_h[gate]);
            let b = tape.param(store, self.b[gate]);
            let a = tape.matmul(x, wx);
            let c = tape.matmul(hh, wh);
            let s = tape.add(a, c);
            tape.add_bias(s, b)
        };
        let r_pre = pre(tape, 0, h);
        let r = tape.sigmoid(r_pre);
        let u_pre = pre(tape, 1, h);
        let u = tape.sigmoid(u_pre);
        let rh = tape.mul(r, h);
        let n_pre = pre(tape, 2, rh);
        let n = tape.tanh(n_pre);
        // h' = n + u ⊙ (h − n)
        let diff = tape.sub(h, n);
        let gated = tape.mul(u, diff);
        Ok(tape.add(n, gated))
    }

    /// Runs the cell over `xs` from a zero state, returning every hidden state.
    pub fn run(&self, tape: &mut Tape, store: &ParameterStore, xs: &[Var]) -> Result<Vec<Var>> {
        let Some(&first) = xs.first() else { return Ok(Vec::new()) };
        let rows = tape.shape(first).0;
        let mut h = tape.zeros(rows, self.hidden_dim);
        let mut out = Vec::with_capacity(xs.len());
        for &x in xs {
            h = self.step(tape, store, h, x)?;
            out.push(h);
        }
        Ok(out)
    }
}

/// One GRU update on plain vectors.
pub fn gru_step(store: &ParameterStore, gru: &Gru, h: &RnnState, x: &[f64]) -> Result<RnnState> {
    let mut tape = Tape::new();
    let hv = tape.constant(1, h.h.len(), h.h.clone());
    let xv = tape.constant(1, x.len(), x.to_vec());
    let out = gru.step(&mut tape, store, hv, xv)?;
    Ok(RnnState { h: tape.value(out).to_vec() })
}

/// Affine mean and softplus standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianHead {
    pub mu: Linear,
    pub sigma: Linear,
    pub mean_activation: Activation,
}

impl GaussianHead {
    /// Names: `{component}/head/{W_mu,b_mu,W_sigma,b_sigma}`.
    pub fn build<R: Rng>(
        store: &mut ParameterStore,
        component: &str,
        in_dim: usize,
        out_dim: usize,
        mean_activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mu = Linear::build(
            store,
            &format!("{component}/head/W_mu"),
            &format!("{component}/head/b_mu"),
            in_dim,
            out_dim,
            rng,
        )?;
        let sigma = Linear::build(
            store,
            &format!("{component}/head/W_sigma"),
            &format!("{component}/head/b_sigma"),
            in_dim,
            out_dim,
            rng,
        )?;
        Ok(Self { mu, sigma, mean_activation })
    }

    pub fn in_dim(&self) -> usize {
        self.mu.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.mu.out_dim
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, h: Var) -> Result<GaussVar> {
        let m = self.mu.forward(tape, store, h)?;
        let mean = self.mean_activation.apply(tape, m);
        let s = self.sigma.forward(tape, store, h)?;
        let sp = tape.softplus(s);
        let std = tape.add_const(sp, STD_FLOOR);
        Ok(GaussVar { mean, std })
    }
}

/// Head evaluation on a single plain vector.
pub fn gaussian_head(store: &ParameterStore, head: &GaussianHead, h: &[f64]) -> Result<DiagGaussian> {
    let mut tape = Tape::new();
    let hv = tape.constant(1, h.len(), h.to_vec());
    let g = head.forward(&mut tape, store, hv)?;
    Ok(g.row(&tape, 0))
}

/// `mean + std ⊙ noise`.
pub fn sample_reparam(g: &DiagGaussian, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != g.dim() {
        return Err(Error::ShapeMismatch(format!("noise has {} entries for a {}-d Gaussian", noise.len(), g.dim())));
    }
    Ok(g.mean.iter().zip(&g.std).zip(noise).map(|((m, s), e)| m + s * e).collect())
}

/// Tape version of [`sample_reparam`]; `noise` has the same shape as `g`.
pub fn reparam(tape: &mut Tape, g: GaussVar, noise: Var) -> Result<Var> {
    if tape.shape(noise) != tape.shape(g.mean) {
        return Err(Error::ShapeMismatch(format!(
            "noise {:?} vs Gaussian {:?}",
            tape.shape(noise),
            tape.shape(g.mean)
        )));
    }
    let scaled = tape.mul(g.std, noise);
    Ok(tape.add(g.mean, scaled))
}

/// MLP trunk followed by a Gaussian head: `(μ(z), σ(z))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Emitter {
    pub trunk: Mlp,
    pub head: GaussianHead,
}

impl Emitter {
    /// ReLU hidden layers of the given widths, then a Gaussian head.
    pub fn build<R: Rng>(
        store: &mut ParameterStore,
        component: &str,
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        mean_activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if hidden.is_empty() {
            return Err(Error::InvalidSpec(format!("{component}: emitter needs at least one hidden layer")));
        }
        let mut widths = vec![in_dim];
        widths.extend_from_slice(hidden);
        let spec = MlpSpec::new(widths, vec![Activation::Relu; hidden.len()])?;
        let trunk = Mlp::build(store, component, &spec, rng)?;
        let head = GaussianHead::build(store, component, trunk.output_dim(), out_dim, mean_activation, rng)?;
        Ok(Self { trunk, head })
    }

    pub fn in_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.head.out_dim()
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, z: Var) -> Result<GaussVar> {
        let h = self.trunk.forward(tape, store, z)?;
        self.head.forward(tape, store, h)
    }
}

/// Test hook pinning the residual gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GateMode {
    #[default]
    Learned,
    Zeros,
    Ones,
}

/// Gated residual emitter over a frozen single-input emitter.
///
/// ```text
/// (μ₁, σ₁) = base(z⁰)                      // frozen
/// (μ̃₂, σ₂) = branch([z⁰, zⁱ])
/// g        = gate([z⁰, zⁱ])                // ReLU hidden, Sigmoid output
/// μ        = (1 − g) ⊙ μ₁ + g ⊙ μ̃₂
/// σ        = σ₂, or (1 − g) ⊙ σ₁ + g ⊙ σ₂ with `reuse_sigma1`
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct GatedResidualEmitter {
    pub base: Emitter,
    pub branch: Emitter,
    pub gate: Mlp,
    pub reuse_sigma1: bool,
}

impl GatedResidualEmitter {
    /// Builds the fresh branch and gate; `base` must already live in `store`.
    /// The gate's output bias starts at −1 so training begins near the base
    /// emitter (g ≈ 0.27).
    #[allow(clippy::too_many_arguments)]
    pub fn build<R: Rng>(
        store: &mut ParameterStore,
        component: &str,
        base: Emitter,
        private_dim: usize,
        branch_hidden: &[usize],
        gate_hidden: usize,
        mean_activation: Activation,
        reuse_sigma1: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let in_dim = base.in_dim() + private_dim;
        let out_dim = base.out_dim();
        let branch = Emitter::build(
            store,
            &format!("{component}_branch"),
            in_dim,
            branch_hidden,
            out_dim,
            mean_activation,
            rng,
        )?;
        let gate_spec = MlpSpec::new(vec![in_dim, gate_hidden, out_dim], vec![Activation::Relu, Activation::Sigmoid])?;
        let gate = Mlp::build(store, &format!("{component}_gate"), &gate_spec, rng)?;
        let last_bias = gate.layers.last().unwrap().b;
        store.values_mut(last_bias).iter_mut().for_each(|b| *b = -1.0);
        Ok(Self { base, branch, gate, reuse_sigma1 })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        z0: Var,
        zi: Var,
        mode: GateMode,
    ) -> Result<GaussVar> {
        let (r0, _) = tape.shape(z0);
        let (ri, ci) = tape.shape(zi);
        if r0 != ri || tape.shape(z0).1 + ci != self.branch.in_dim() {
            return Err(Error::ShapeMismatch(format!(
                "residual emitter expects {} input columns, got z0 {:?} and zi {:?}",
                self.branch.in_dim(),
                tape.shape(z0),
                tape.shape(zi)
            )));
        }
        let base = self.base.forward(tape, store, z0)?;
        let joint = tape.concat(z0, zi);
        let fresh = self.branch.forward(tape, store, joint)?;
        let (rows, cols) = tape.shape(fresh.mean);
        let g = match mode {
            GateMode::Learned => self.gate.forward(tape, store, joint)?,
            GateMode::Zeros => tape.zeros(rows, cols),
            GateMode::Ones => tape.fill(rows, cols, 1.0),
        };
        let keep = tape.affine(g, -1.0, 1.0);
        let mix = |tape: &mut Tape, a: Var, b: Var| {
            // (1 − g) ⊙ a + g ⊙ b, exact at g = 0 and g = 1
            let ka = tape.mul(keep, a);
            let gb = tape.mul(g, b);
            tape.add(ka, gb)
        };
        let mean = mix(tape, base.mean, fresh.mean);
        let std = if self.reuse_sigma1 { mix(tape, base.std, fresh.std) } else { fresh.std };
        Ok(GaussVar { mean, std })
    }
}

/// Residual emission for a single plain `(z⁰, zⁱ)` pair.
pub fn gated_residual_emit(
    store: &ParameterStore,
    emitter: &GatedResidualEmitter,
    z0: &[f64],
    zi: &[f64],
    mode: GateMode,
) -> Result<DiagGaussian> {
    let mut tape = Tape::new();
    let a = tape.constant(1, z0.len(), z0.to_vec());
    let b = tape.constant(1, zi.len(), zi.to_vec());
    let g = emitter.forward(&mut tape, store, a, b, mode)?;
    Ok(g.row(&tape, 0))
}
