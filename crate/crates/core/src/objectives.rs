//! Gaussian information quantities and the trainable objectives.
//!
//! Losses (`dvib_loss`, `step1_loss`) are minimized; ELBOs (`step2_elbo`,
//! `dpcca_elbo`) are returned as values to maximize. Every objective works on
//! per-step tape outputs, sums over time steps and batch rows, and multiplies
//! by a caller-supplied `norm` (normally `1 / (batch · steps)`), so weights
//! transfer across sequence lengths and batch sizes.
//!
//! Entropy and cross-entropy expectations are analytic. Reconstruction terms
//! use whatever latent sample the caller fed the emitters.

use std::f64::consts::{E, PI};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::nets::{DiagGaussian, GaussVar};
use crate::tape::{Tape, Var};

fn half_ln_2pi() -> f64 {
    0.5 * (2.0 * PI).ln()
}

fn check_dims(a: &DiagGaussian, b_len: usize) -> Result<()> {
    if a.dim() != b_len {
        return Err(Error::ShapeMismatch(format!("Gaussian of dim {} vs {b_len}", a.dim())));
    }
    Ok(())
}

pub fn gauss_logpdf(g: &DiagGaussian, x: &[f64]) -> Result<f64> {
    check_dims(g, x.len())?;
    Ok(g.mean.iter().zip(&g.std).zip(x).map(|((m, s), x)| -0.5 * ((x - m) / s).powi(2) - s.ln() - half_ln_2pi()).sum())
}

/// `KL(q ‖ p)` in closed form.
pub fn kl_diag_gauss(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    check_dims(q, p.dim())?;
    let mut kl = 0.0;
    for i in 0..q.dim() {
        let (mq, sq, mp, sp) = (q.mean[i], q.std[i], p.mean[i], p.std[i]);
        kl += (sp / sq).ln() + (sq * sq + (mq - mp).powi(2)) / (2.0 * sp * sp) - 0.5;
    }
    Ok(kl.max(0.0))
}

pub fn gauss_entropy(q: &DiagGaussian) -> f64 {
    q.std.iter().map(|s| s.ln() + 0.5 * (2.0 * PI * E).ln()).sum()
}

/// `−E_q[log p]`.
pub fn gauss_cross_entropy(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    check_dims(q, p.dim())?;
    let mut ce = 0.0;
    for i in 0..q.dim() {
        let (mq, sq, mp, sp) = (q.mean[i], q.std[i], p.mean[i], p.std[i]);
        ce += sp.ln() + half_ln_2pi() + (sq * sq + (mq - mp).powi(2)) / (2.0 * sp * sp);
    }
    Ok(ce)
}

fn same_shape(tape: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::ShapeMismatch(format!("{what}: {:?} vs {:?}", tape.shape(a), tape.shape(b))));
    }
    Ok(())
}

fn numel(tape: &Tape, v: Var) -> f64 {
    let (r, c) = tape.shape(v);
    (r * c) as f64
}

/// Sum over all entries of the Gaussian log density of `x`.
pub fn logpdf_sum(tape: &mut Tape, g: GaussVar, x: Var) -> Result<Var> {
    same_shape(tape, g.mean, x, "logpdf")?;
    let n = numel(tape, x);
    let d = tape.sub(x, g.mean);
    let z = tape.div(d, g.std);
    let z2 = tape.square(z);
    let quad = tape.sum(z2);
    let ls = tape.ln(g.std);
    let logs = tape.sum(ls);
    let a = tape.scale(quad, -0.5);
    let b = tape.sub(a, logs);
    Ok(tape.add_const(b, -n * half_ln_2pi()))
}

/// Sum over rows of `H(q)`.
pub fn entropy_sum(tape: &mut Tape, q: GaussVar) -> Var {
    let n = numel(tape, q.std);
    let ls = tape.ln(q.std);
    let s = tape.sum(ls);
    tape.add_const(s, n * 0.5 * (2.0 * PI * E).ln())
}

fn mahalanobis_half(tape: &mut Tape, q: GaussVar, p: GaussVar) -> Var {
    // (σq² + (μq − μp)²) / (2σp²)
    let vq = tape.square(q.std);
    let d = tape.sub(q.mean, p.mean);
    let d2 = tape.square(d);
    let num = tape.add(vq, d2);
    let vp = tape.square(p.std);
    let den = tape.scale(vp, 2.0);
    tape.div(num, den)
}

/// Sum over rows of `CE(q, p) = −E_q[log p]`.
pub fn cross_entropy_sum(tape: &mut Tape, q: GaussVar, p: GaussVar) -> Result<Var> {
    same_shape(tape, q.mean, p.mean, "cross entropy")?;
    let n = numel(tape, q.mean);
    let m = mahalanobis_half(tape, q, p);
    let lp = tape.ln(p.std);
    let s = tape.add(lp, m);
    let tot = tape.sum(s);
    Ok(tape.add_const(tot, n * half_ln_2pi()))
}

/// Sum over rows of `KL(q ‖ p)`.
pub fn kl_sum(tape: &mut Tape, q: GaussVar, p: GaussVar) -> Result<Var> {
    same_shape(tape, q.mean, p.mean, "KL")?;
    let n = numel(tape, q.mean);
    let m = mahalanobis_half(tape, q, p);
    let lp = tape.ln(p.std);
    let lq = tape.ln(q.std);
    let ratio = tape.sub(lp, lq);
    let s = tape.add(ratio, m);
    let tot = tape.sum(s);
    Ok(tape.add_const(tot, -0.5 * n))
}

/// Objective weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IbWeights {
    pub alpha: f64,
    pub beta: f64,
    /// β of the single-stream bottleneck baseline.
    pub dvib_beta: f64,
    /// λ of the conditional-entropy-bottleneck form; unused by the two-step model.
    pub ceb_lambda: f64,
}

impl Default for IbWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 0.1, dvib_beta: 1.0, ceb_lambda: 1.0 }
    }
}

impl IbWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.dvib_beta, self.ceb_lambda];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidParams(format!("weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub name: String,
    pub value: f64,
    pub weight: f64,
}

/// Named objective terms and their weighted total.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub terms: Vec<Term>,
    pub alpha: f64,
    pub beta: f64,
}

impl LossBreakdown {
    pub fn recompute(&self) -> f64 {
        self.terms.iter().map(|t| t.weight * t.value).sum()
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.value)
    }

    /// Adds another breakdown with the same term layout.
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        debug_assert_eq!(self.terms.len(), other.terms.len());
        self.total += other.total;
        for (a, b) in self.terms.iter_mut().zip(&other.terms) {
            a.value += b.value;
        }
    }

    pub fn scaled(&self, s: f64) -> LossBreakdown {
        let mut out = self.clone();
        out.total *= s;
        out.terms.iter_mut().for_each(|t| t.value *= s);
        out
    }

    /// Flat record: `step`, `epoch`, `total`, one key per term, `alpha`,
    /// `beta`, plus an ordered `weights` list so totals can be re-derived.
    pub fn to_json(&self, step: u64, epoch: u64) -> Value {
        let mut m = Map::new();
        m.insert("step".into(), step.into());
        m.insert("epoch".into(), epoch.into());
        m.insert("total".into(), self.total.into());
        for t in &self.terms {
            m.insert(t.name.clone(), t.value.into());
        }
        m.insert("alpha".into(), self.alpha.into());
        m.insert("beta".into(), self.beta.into());
        let w = self.terms.iter().map(|t| serde_json::json!({ "name": t.name, "weight": t.weight })).collect();
        m.insert("weights".into(), Value::Array(w));
        Value::Object(m)
    }
}

/// Objective recorded on a tape.
pub struct ObjectiveValue {
    pub total: Var,
    pub terms: Vec<(String, Var, f64)>,
    pub alpha: f64,
    pub beta: f64,
}

impl ObjectiveValue {
    fn assemble(tape: &mut Tape, terms: Vec<(&str, Var, f64)>, alpha: f64, beta: f64) -> Result<Self> {
        let mut total: Option<Var> = None;
        for &(_, v, w) in &terms {
            let wv = tape.scale(v, w);
            total = Some(match total {
                None => wv,
                Some(t) => tape.add(t, wv),
            });
        }
        let out = Self {
            total: total.expect("objective without terms"),
            terms: terms.into_iter().map(|(n, v, w)| (n.to_string(), v, w)).collect(),
            alpha,
            beta,
        };
        let value = tape.scalar(out.total);
        if !value.is_finite() {
            let b = out.breakdown(tape);
            return Err(Error::NonFiniteLoss {
                message: format!("objective {value}; terms {:?}", b.terms),
                last_good: None,
            });
        }
        Ok(out)
    }

    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            total: tape.scalar(self.total),
            terms: self
                .terms
                .iter()
                .map(|(n, v, w)| Term { name: n.clone(), value: tape.scalar(*v), weight: *w })
                .collect(),
            alpha: self.alpha,
            beta: self.beta,
        }
    }
}

fn sum_over<F>(tape: &mut Tape, n: usize, norm: f64, mut f: F) -> Result<Var>
where
    F: FnMut(&mut Tape, usize) -> Result<Var>,
{
    if n == 0 {
        return Err(Error::ShapeMismatch("objective over zero time steps".into()));
    }
    let mut acc = f(tape, 0)?;
    for t in 1..n {
        let v = f(tape, t)?;
        acc = tape.add(acc, v);
    }
    Ok(tape.scale(acc, norm))
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::ShapeMismatch(format!("{what}: {got} steps, expected {want}")));
    }
    Ok(())
}

/// Per-step outputs of the single-stream bottleneck: encoder `q(z_t|h_t)` and
/// decoder `p(x_{t+1}|z_t)`.
pub struct DvibOutputs {
    pub encoder: Vec<GaussVar>,
    pub decoder: Vec<GaussVar>,
}

/// `Σ_t β·(−H(q_t) + CE(q_t, r)) − log p(x_{t+1}|z_t)` with `r = N(0, I)`.
pub fn dvib_loss(tape: &mut Tape, out: &DvibOutputs, x_next: &[Var], beta: f64, norm: f64) -> Result<ObjectiveValue> {
    let n = out.encoder.len();
    check_len("decoder outputs", out.decoder.len(), n)?;
    check_len("targets", x_next.len(), n)?;
    let compression = sum_over(tape, n, norm, |tape, t| {
        let h = entropy_sum(tape, out.encoder[t]);
        Ok(tape.scale(h, -1.0))
    })?;
    let prior = sum_over(tape, n, norm, |tape, t| {
        let (r, c) = tape.shape(out.encoder[t].mean);
        let r0 = GaussVar::standard(tape, r, c);
        let ce = cross_entropy_sum(tape, out.encoder[t], r0)?;
        Ok(tape.scale(ce, -1.0))
    })?;
    let recon = sum_over(tape, n, norm, |tape, t| logpdf_sum(tape, out.decoder[t], x_next[t]))?;
    ObjectiveValue::assemble(
        tape,
        vec![("compression", compression, beta), ("prior", prior, -beta), ("recon", recon, -1.0)],
        0.0,
        beta,
    )
}

/// Per-step head outputs of the shared-latent stage, all evaluated on the
/// same `z⁰` samples drawn from `q012`.
pub struct Step1Outputs {
    pub q012: Vec<GaussVar>,
    pub q01: Vec<GaussVar>,
    pub q02: Vec<GaussVar>,
    pub p10: Vec<GaussVar>,
    pub p20: Vec<GaussVar>,
}

/// Shared-latent objective, minimized:
///
/// ```text
/// (α+2β)⟨log q012⟩ − α⟨log r⟩ − ⟨log p10(x¹ₜ₊₁)⟩ − ⟨log p20(x²ₜ₊₁)⟩ − β⟨log q01⟩ − β⟨log q02⟩
/// ```
///
/// with `⟨log q012⟩ = −H(q012)`, `⟨log r⟩ = −CE(q012, r)` and
/// `⟨log q0i⟩ = −CE(q012, q0i)`.
pub fn step1_loss(
    tape: &mut Tape,
    out: &Step1Outputs,
    x1_next: &[Var],
    x2_next: &[Var],
    weights: &IbWeights,
    norm: f64,
) -> Result<ObjectiveValue> {
    let n = out.q012.len();
    for (what, len) in [
        ("q01", out.q01.len()),
        ("q02", out.q02.len()),
        ("p10", out.p10.len()),
        ("p20", out.p20.len()),
        ("x1 targets", x1_next.len()),
        ("x2 targets", x2_next.len()),
    ] {
        check_len(what, len, n)?;
    }
    let (alpha, beta) = (weights.alpha, weights.beta);
    let compression = sum_over(tape, n, norm, |tape, t| {
        let h = entropy_sum(tape, out.q012[t]);
        Ok(tape.scale(h, -1.0))
    })?;
    let prior = sum_over(tape, n, norm, |tape, t| {
        let (r, c) = tape.shape(out.q012[t].mean);
        let r0 = GaussVar::standard(tape, r, c);
        let ce = cross_entropy_sum(tape, out.q012[t], r0)?;
        Ok(tape.scale(ce, -1.0))
    })?;
    let recon1 = sum_over(tape, n, norm, |tape, t| logpdf_sum(tape, out.p10[t], x1_next[t]))?;
    let recon2 = sum_over(tape, n, norm, |tape, t| logpdf_sum(tape, out.p20[t], x2_next[t]))?;
    let reg1 = sum_over(tape, n, norm, |tape, t| {
        let ce = cross_entropy_sum(tape, out.q012[t], out.q01[t])?;
        Ok(tape.scale(ce, -1.0))
    })?;
    let reg2 = sum_over(tape, n, norm, |tape, t| {
        let ce = cross_entropy_sum(tape, out.q012[t], out.q02[t])?;
        Ok(tape.scale(ce, -1.0))
    })?;
    ObjectiveValue::assemble(
        tape,
        vec![
            ("compression", compression, alpha + 2.0 * beta),
            ("prior", prior, -alpha),
            ("recon_x1", recon1, -1.0),
            ("recon_x2", recon2, -1.0),
            ("regularizer_x1", reg1, -beta),
            ("regularizer_x2", reg2, -beta),
        ],
        alpha,
        beta,
    )
}

/// Per-step factors of a shared/private latent ELBO.
///
/// `posterior[i]` and `prior[i]` are the `zⁱ` factors (`i = 0, 1, 2`);
/// `emit1` / `emit2` are the observation models evaluated on the posterior
/// sample.
pub struct ElboOutputs {
    pub posterior: [Vec<GaussVar>; 3],
    pub prior: [Vec<GaussVar>; 3],
    pub emit1: Vec<GaussVar>,
    pub emit2: Vec<GaussVar>,
}

fn elbo(tape: &mut Tape, out: &ElboOutputs, x1: &[Var], x2: &[Var], norm: f64) -> Result<ObjectiveValue> {
    let n = out.emit1.len();
    check_len("emit2", out.emit2.len(), n)?;
    check_len("x1 targets", x1.len(), n)?;
    check_len("x2 targets", x2.len(), n)?;
    for i in 0..3 {
        check_len("posterior", out.posterior[i].len(), n)?;
        check_len("prior", out.prior[i].len(), n)?;
    }
    let recon1 = sum_over(tape, n, norm, |tape, t| logpdf_sum(tape, out.emit1[t], x1[t]))?;
    let recon2 = sum_over(tape, n, norm, |tape, t| logpdf_sum(tape, out.emit2[t], x2[t]))?;
    let mut kls = Vec::new();
    for i in 0..3 {
        kls.push(sum_over(tape, n, norm, |tape, t| kl_sum(tape, out.posterior[i][t], out.prior[i][t]))?);
    }
    ObjectiveValue::assemble(
        tape,
        vec![
            ("recon_x1", recon1, 1.0),
            ("recon_x2", recon2, 1.0),
            ("kl_z0", kls[0], -1.0),
            ("kl_z1", kls[1], -1.0),
            ("kl_z2", kls[2], -1.0),
        ],
        0.0,
        0.0,
    )
}

/// Full generative-stage ELBO, maximized. Targets are `x_{t+1}`; the `z⁰`
/// prior is the frozen shared-latent encoder and the private priors are
/// filtering heads on `x^i_{1:t}`.
pub fn step2_elbo(
    tape: &mut Tape,
    out: &ElboOutputs,
    x1_next: &[Var],
    x2_next: &[Var],
    norm: f64,
) -> Result<ObjectiveValue> {
    elbo(tape, out, x1_next, x2_next, norm)
}

/// State-space baseline ELBO, maximized. Targets are the contemporaneous
/// `x_t`; priors are the transitions `p(zⁱ_t | zⁱ_{t−1})`.
pub fn dpcca_elbo(tape: &mut Tape, out: &ElboOutputs, x1: &[Var], x2: &[Var], norm: f64) -> Result<ObjectiveValue> {
    elbo(tape, out, x1, x2, norm)
}

/// Difference between an upper bound on `I(z; x)` and a lower bound on
/// `I(z; y)`: tracks `I(z; x | y)` up to bound slack, so it may be negative.
pub fn cmi_diagnostic(i_upper: f64, i_lower: f64) -> f64 {
    i_upper - i_lower
}

/// Bound estimates from a shared-latent or bottleneck breakdown: the upper
/// bound is `⟨log q⟩ − ⟨log r⟩ = KL(q ‖ r)`, the lower bound the summed
/// reconstruction log-likelihood (its data-entropy constant omitted).
pub fn cmi_from_breakdown(b: &LossBreakdown) -> Option<f64> {
    let upper = b.term("compression")? - b.term("prior")?;
    let lower = match (b.term("recon_x1"), b.term("recon_x2"), b.term("recon")) {
        (Some(a), Some(c), _) => a + c,
        (_, _, Some(r)) => r,
        _ => return None,
    };
    Some(cmi_diagnostic(upper, lower))
}
