//! Gated recurrent cell with reset and update gates.
//!
//! Two variants share one parameter layout:
//!
//! * encoder form (no context weights):
//!   `r = σ(W_r x + U_r h)`, `z = σ(W_z x + U_z h)`,
//!   `h̃ = tanh(W x + U (r ⊙ h))`
//! * decoder form (context weights present): the gates also see
//!   `C_r c` / `C_z c`, and the reset gate scales the combined
//!   recurrent-plus-context term, `h̃ = tanh(W x + r ⊙ (U h + C c))`.
//!
//! In both, `h' = z ⊙ h + (1 - z) ⊙ h̃`.

use crate::error::{Error, Result};
use crate::linalg::{gaussian_init, orthogonal_init, sigmoid, Matrix};
use crate::rng::Rng;

/// One matrix per pre-activation: candidate, update gate, reset gate.
#[derive(Clone, Debug, PartialEq)]
pub struct GateSet {
    pub candidate: Matrix,
    pub update: Matrix,
    pub reset: Matrix,
}

impl GateSet {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            candidate: Matrix::zeros(rows, cols),
            update: Matrix::zeros(rows, cols),
            reset: Matrix::zeros(rows, cols),
        }
    }

    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            candidate: gaussian_init(rows, cols, std, rng)?,
            update: gaussian_init(rows, cols, std, rng)?,
            reset: gaussian_init(rows, cols, std, rng)?,
        })
    }

    pub fn orthogonal(n: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            candidate: orthogonal_init(n, n, rng)?,
            update: orthogonal_init(n, n, rng)?,
            reset: orthogonal_init(n, n, rng)?,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.candidate.shape()
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        out.push((format!("{prefix}.candidate"), &self.candidate));
        out.push((format!("{prefix}.update"), &self.update));
        out.push((format!("{prefix}.reset"), &self.reset));
    }

    fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix)>) {
        out.push((format!("{prefix}.candidate"), &mut self.candidate));
        out.push((format!("{prefix}.update"), &mut self.update));
        out.push((format!("{prefix}.reset"), &mut self.reset));
    }
}

/// Weights of one gated cell. Biases are `hidden x 1` columns.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub input: GateSet,
    pub recurrent: GateSet,
    pub context: Option<GateSet>,
    pub bias: Option<GateSet>,
}

impl GruParams {
    pub fn zeros(hidden: usize, input: usize, context: Option<usize>, bias: bool) -> Self {
        Self {
            input: GateSet::zeros(hidden, input),
            recurrent: GateSet::zeros(hidden, hidden),
            context: context.map(|c| GateSet::zeros(hidden, c)),
            bias: bias.then(|| GateSet::zeros(hidden, 1)),
        }
    }

    /// Gaussian input and context weights, orthogonal recurrent weights,
    /// zero biases.
    pub fn init(
        hidden: usize,
        input: usize,
        context: Option<usize>,
        bias: bool,
        std: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            input: GateSet::gaussian(hidden, input, std, rng)?,
            recurrent: GateSet::orthogonal(hidden, rng)?,
            context: context
                .map(|c| GateSet::gaussian(hidden, c, std, rng))
                .transpose()?,
            bias: bias.then(|| GateSet::zeros(hidden, 1)),
        })
    }

    pub fn hidden(&self) -> usize {
        self.recurrent.candidate.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.input.candidate.cols()
    }

    pub fn context_dim(&self) -> Option<usize> {
        self.context.as_ref().map(|c| c.candidate.cols())
    }

    /// Checks that all matrices agree on the hidden size.
    pub fn validate(&self) -> Result<()> {
        let n = self.hidden();
        let check = |set: &GateSet, cols: usize, op: &'static str| -> Result<()> {
            for m in [&set.candidate, &set.update, &set.reset] {
                if m.shape() != (n, cols) {
                    return Err(Error::shape(op, m.shape(), (n, cols)));
                }
            }
            Ok(())
        };
        check(&self.recurrent, n, "gru recurrent")?;
        check(&self.input, self.input_dim(), "gru input")?;
        if let Some(ctx) = &self.context {
            check(ctx, ctx.candidate.cols(), "gru context")?;
        }
        if let Some(b) = &self.bias {
            check(b, 1, "gru bias")?;
        }
        Ok(())
    }

    pub fn named_blocks<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        self.input.named(&format!("{prefix}.input"), out);
        self.recurrent.named(&format!("{prefix}.recurrent"), out);
        if let Some(c) = &self.context {
            c.named(&format!("{prefix}.context"), out);
        }
        if let Some(b) = &self.bias {
            b.named(&format!("{prefix}.bias"), out);
        }
    }

    pub fn named_blocks_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Matrix)>,
    ) {
        self.input.named_mut(&format!("{prefix}.input"), out);
        self.recurrent.named_mut(&format!("{prefix}.recurrent"), out);
        if let Some(c) = &mut self.context {
            c.named_mut(&format!("{prefix}.context"), out);
        }
        if let Some(b) = &mut self.bias {
            b.named_mut(&format!("{prefix}.bias"), out);
        }
    }
}

/// Activations of one forward step, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct GruCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub ctx: Option<Vec<f64>>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub h_tilde: Vec<f64>,
    pub h: Vec<f64>,
    /// Term multiplied by the reset gate: `U h` plus `C c` in decoder form,
    /// unused (empty) in encoder form where `r ⊙ h` is recomputed.
    bracket: Vec<f64>,
}

/// Gradients flowing out of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepGrads {
    pub dx: Vec<f64>,
    pub dh_prev: Vec<f64>,
    pub dctx: Option<Vec<f64>>,
}

/// `h = z ⊙ h_prev + (1 - z) ⊙ h̃`.
pub fn gru_compose(z: &[f64], h_prev: &[f64], h_tilde: &[f64]) -> Result<Vec<f64>> {
    if z.len() != h_prev.len() || z.len() != h_tilde.len() {
        return Err(Error::shape("gru_compose", (z.len(), 1), (h_prev.len(), h_tilde.len())));
    }
    Ok(z.iter()
        .zip(h_prev.iter().zip(h_tilde))
        .map(|(&z, (&hp, &ht))| z * hp + (1.0 - z) * ht)
        .collect())
}

fn check_len(op: &'static str, v: &[f64], want: usize) -> Result<()> {
    if v.len() != want {
        return Err(Error::shape(op, (v.len(), 1), (want, 1)));
    }
    Ok(())
}

pub fn gru_forward(
    x: &[f64],
    h_prev: &[f64],
    ctx: Option<&[f64]>,
    p: &GruParams,
) -> Result<GruCache> {
    match ctx {
        Some(c) => {
            let terms = ContextTerms::new(c, p)?;
            gru_forward_with(x, h_prev, Some((c, &terms)), p)
        }
        None => gru_forward_with(x, h_prev, None, p),
    }
}

/// `C_r c`, `C_z c` and `C c` for a context that stays fixed over many
/// steps.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextTerms {
    pub candidate: Vec<f64>,
    pub update: Vec<f64>,
    pub reset: Vec<f64>,
}

impl ContextTerms {
    pub fn new(c: &[f64], p: &GruParams) -> Result<Self> {
        let w = p
            .context
            .as_ref()
            .ok_or_else(|| Error::Input("context supplied to a cell without context weights".into()))?;
        check_len("context", c, w.candidate.cols())?;
        Ok(Self {
            candidate: w.candidate.matvec(c),
            update: w.update.matvec(c),
            reset: w.reset.matvec(c),
        })
    }
}

/// Context pre-activation gradients summed over steps. Because `c` is
/// shared, the weight gradient and `dc` need one outer product and one
/// transposed product per sequence instead of per step.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextGrads {
    pub candidate: Vec<f64>,
    pub update: Vec<f64>,
    pub reset: Vec<f64>,
}

impl ContextGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            candidate: vec![0.0; n],
            update: vec![0.0; n],
            reset: vec![0.0; n],
        }
    }

    /// Adds the context weight gradients into `grads` and returns `dc`.
    pub fn apply(&self, c: &[f64], p: &GruParams, grads: &mut GruParams) -> Result<Vec<f64>> {
        let (w, gw) = match (&p.context, grads.context.as_mut()) {
            (Some(w), Some(gw)) => (w, gw),
            _ => return Err(Error::Input("cell has no context weights".into())),
        };
        check_len("context", c, w.candidate.cols())?;
        let mut dc = vec![0.0; c.len()];
        for (da, wm, gm) in [
            (&self.candidate, &w.candidate, &mut gw.candidate),
            (&self.update, &w.update, &mut gw.update),
            (&self.reset, &w.reset, &mut gw.reset),
        ] {
            gm.add_outer(da, c);
            wm.matvec_t_add(da, &mut dc);
        }
        Ok(dc)
    }
}

/// Forward step with the context terms already computed. `ctx` pairs the
/// context vector with its [`ContextTerms`].
pub fn gru_forward_with(
    x: &[f64],
    h_prev: &[f64],
    ctx: Option<(&[f64], &ContextTerms)>,
    p: &GruParams,
) -> Result<GruCache> {
    let n = p.hidden();
    check_len("gru_forward input", x, p.input_dim())?;
    check_len("gru_forward hidden", h_prev, n)?;
    match (ctx, &p.context) {
        (Some((c, t)), Some(w)) => {
            check_len("gru_forward context", c, w.candidate.cols())?;
            check_len("context terms", &t.candidate, n)?;
        }
        (None, None) => {}
        (Some(_), None) => {
            return Err(Error::Input(
                "context supplied to a cell without context weights".into(),
            ))
        }
        (None, Some(_)) => {
            return Err(Error::Input("decoder cell requires a context vector".into()))
        }
    }

    let mut a_r = vec![0.0; n];
    let mut a_z = vec![0.0; n];
    let mut a_h = vec![0.0; n];
    if let Some(b) = &p.bias {
        a_r.copy_from_slice(b.reset.data());
        a_z.copy_from_slice(b.update.data());
        a_h.copy_from_slice(b.candidate.data());
    }
    p.input.reset.matvec_add(x, &mut a_r);
    p.input.update.matvec_add(x, &mut a_z);
    p.input.candidate.matvec_add(x, &mut a_h);
    p.recurrent.reset.matvec_add(h_prev, &mut a_r);
    p.recurrent.update.matvec_add(h_prev, &mut a_z);

    let mut bracket = Vec::new();
    let r: Vec<f64>;
    match ctx {
        Some((_, t)) => {
            for j in 0..n {
                a_r[j] += t.reset[j];
                a_z[j] += t.update[j];
            }
            r = a_r.iter().map(|&a| sigmoid(a)).collect();
            bracket = t.candidate.clone();
            p.recurrent.candidate.matvec_add(h_prev, &mut bracket);
            for j in 0..n {
                a_h[j] += r[j] * bracket[j];
            }
        }
        None => {
            r = a_r.iter().map(|&a| sigmoid(a)).collect();
            let gated: Vec<f64> = r.iter().zip(h_prev).map(|(r, h)| r * h).collect();
            p.recurrent.candidate.matvec_add(&gated, &mut a_h);
        }
    }
    let z: Vec<f64> = a_z.iter().map(|&a| sigmoid(a)).collect();
    let h_tilde: Vec<f64> = a_h.iter().map(|a| a.tanh()).collect();
    let h = gru_compose(&z, h_prev, &h_tilde)?;
    Ok(GruCache {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        ctx: ctx.map(|(c, _)| c.to_vec()),
        z,
        r,
        h_tilde,
        h,
        bracket,
    })
}

/// Backward pass of one step. Parameter gradients are accumulated into
/// `grads`, which must have the same layout as `p`.
pub fn gru_backward_into(
    cache: &GruCache,
    dh: &[f64],
    p: &GruParams,
    grads: &mut GruParams,
) -> Result<StepGrads> {
    match &cache.ctx {
        Some(c) => {
            let mut acc = ContextGrads::zeros(p.hidden());
            let mut sg = gru_backward_deferred(cache, dh, p, grads, &mut acc)?;
            sg.dctx = Some(acc.apply(c, p, grads)?);
            Ok(sg)
        }
        None => gru_backward_core(cache, dh, p, grads, None),
    }
}

/// Like [`gru_backward_into`] for the decoder form, but the context
/// pre-activation gradients go into `acc` and `dctx` is left `None`;
/// finish with [`ContextGrads::apply`].
pub fn gru_backward_deferred(
    cache: &GruCache,
    dh: &[f64],
    p: &GruParams,
    grads: &mut GruParams,
    acc: &mut ContextGrads,
) -> Result<StepGrads> {
    if cache.ctx.is_none() {
        return Err(Error::Input("deferred context gradients need a decoder-form cache".into()));
    }
    gru_backward_core(cache, dh, p, grads, Some(acc))
}

fn gru_backward_core(
    cache: &GruCache,
    dh: &[f64],
    p: &GruParams,
    grads: &mut GruParams,
    acc: Option<&mut ContextGrads>,
) -> Result<StepGrads> {
    let n = p.hidden();
    check_len("gru_backward dh", dh, n)?;
    check_len("gru_backward cache", &cache.h, n)?;
    if cache.ctx.is_some() != p.context.is_some() || cache.x.len() != p.input_dim() {
        return Err(Error::Input("cache does not match cell parameters".into()));
    }
    let x = &cache.x;
    let h_prev = &cache.h_prev;

    let mut dh_prev = vec![0.0; n];
    let mut da_h = vec![0.0; n];
    let mut da_z = vec![0.0; n];
    for j in 0..n {
        let z = cache.z[j];
        let ht = cache.h_tilde[j];
        da_z[j] = dh[j] * (h_prev[j] - ht) * z * (1.0 - z);
        dh_prev[j] = dh[j] * z;
        da_h[j] = dh[j] * (1.0 - z) * (1.0 - ht * ht);
    }

    let mut dx = vec![0.0; x.len()];

    grads.input.candidate.add_outer(&da_h, x);
    p.input.candidate.matvec_t_add(&da_h, &mut dx);
    if let Some(b) = &mut grads.bias {
        crate::linalg::axpy(1.0, &da_h, b.candidate.data_mut());
    }

    let mut dr = vec![0.0; n];
    let mut dbracket = Vec::new();
    if cache.ctx.is_some() {
        dbracket = vec![0.0; n];
        for j in 0..n {
            dr[j] = da_h[j] * cache.bracket[j];
            dbracket[j] = da_h[j] * cache.r[j];
        }
        grads.recurrent.candidate.add_outer(&dbracket, h_prev);
        p.recurrent.candidate.matvec_t_add(&dbracket, &mut dh_prev);
    } else {
        let gated: Vec<f64> = cache.r.iter().zip(h_prev).map(|(r, h)| r * h).collect();
        grads.recurrent.candidate.add_outer(&da_h, &gated);
        let mut dgated = vec![0.0; n];
        p.recurrent.candidate.matvec_t_add(&da_h, &mut dgated);
        for j in 0..n {
            dr[j] = dgated[j] * h_prev[j];
            dh_prev[j] += dgated[j] * cache.r[j];
        }
    }
    let da_r: Vec<f64> = dr
        .iter()
        .zip(&cache.r)
        .map(|(d, r)| d * r * (1.0 - r))
        .collect();

    for (da, w_in, g_in, w_rec, g_rec) in [
        (
            &da_z,
            &p.input.update,
            &mut grads.input.update,
            &p.recurrent.update,
            &mut grads.recurrent.update,
        ),
        (
            &da_r,
            &p.input.reset,
            &mut grads.input.reset,
            &p.recurrent.reset,
            &mut grads.recurrent.reset,
        ),
    ] {
        g_in.add_outer(da, x);
        w_in.matvec_t_add(da, &mut dx);
        g_rec.add_outer(da, h_prev);
        w_rec.matvec_t_add(da, &mut dh_prev);
    }
    if let Some(b) = &mut grads.bias {
        crate::linalg::axpy(1.0, &da_z, b.update.data_mut());
        crate::linalg::axpy(1.0, &da_r, b.reset.data_mut());
    }
    if let Some(acc) = acc {
        crate::linalg::axpy(1.0, &dbracket, &mut acc.candidate);
        crate::linalg::axpy(1.0, &da_z, &mut acc.update);
        crate::linalg::axpy(1.0, &da_r, &mut acc.reset);
    }

    Ok(StepGrads {
        dx,
        dh_prev,
        dctx: None,
    })
}

/// Backward pass returning fresh parameter gradients.
pub fn gru_backward(
    cache: &GruCache,
    dh: &[f64],
    p: &GruParams,
) -> Result<(StepGrads, GruParams)> {
    let mut grads = GruParams::zeros(
        p.hidden(),
        p.input_dim(),
        p.context_dim(),
        p.bias.is_some(),
    );
    let step = gru_backward_into(cache, dh, p, &mut grads)?;
    Ok((step, grads))
}
