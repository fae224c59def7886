//! The full encoder-decoder: embeddings, recurrent encoder, context
//! projection, conditioned recurrent decoder, and a maxout layer feeding a
//! low-rank softmax.
//!
//! Per target step `t` (with `y_0` a begin marker whose embedding and
//! one-hot are both zero):
//!
//! ```text
//! c      = tanh(V h_N)                      encoder summary
//! h'_0   = tanh(V' c)
//! h'_t   = cell(e(y_{t-1}), h'_{t-1}, c)
//! s'_t   = O_h h'_t + O_y y_{t-1} + O_c c   (2m)
//! s_t[i] = max(s'_t[2i], s'_t[2i+1])        (m)
//! p_t    = softmax(G_l G_r s_t)             (K_t)
//! ```

use crate::data::{TokenId, EOS};
use crate::error::{Error, Result};
use crate::gru::{
    gru_backward_deferred, gru_backward_into, gru_forward_with, ContextGrads, ContextTerms, GruCache,
    GruParams, StepGrads,
};
use crate::linalg::{axpy, gaussian_init, softmax_in_place, Matrix};
use crate::rng::Rng;

/// Recurrent unit used by both encoder and decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CellKind {
    /// Reset/update gated unit.
    Gated,
    /// Plain `tanh(W x + U h + C c)` unit, kept as an ablation.
    Tanh,
}

impl CellKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CellKind::Gated => "gated",
            CellKind::Tanh => "tanh",
        }
    }
}

impl std::str::FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gated" | "gru" => Ok(CellKind::Gated),
            "tanh" => Ok(CellKind::Tanh),
            other => Err(Error::Parameter(format!("unknown cell kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Source vocabulary size including the reserved tokens.
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub hidden: usize,
    pub embed: usize,
    /// Number of maxout units; the pre-activation has twice this many.
    pub maxout: usize,
    /// Inner rank of the factorized output matrix.
    pub output_rank: usize,
    pub cell: CellKind,
    pub bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            src_vocab: 15_002,
            tgt_vocab: 15_002,
            hidden: 1000,
            embed: 100,
            maxout: 500,
            output_rank: 500,
            cell: CellKind::Gated,
            bias: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("src_vocab", self.src_vocab),
            ("tgt_vocab", self.tgt_vocab),
            ("hidden", self.hidden),
            ("embed", self.embed),
            ("maxout", self.maxout),
            ("output_rank", self.output_rank),
        ] {
            if v == 0 {
                return Err(Error::Parameter(format!("{name} must be positive")));
            }
        }
        if self.src_vocab < 2 || self.tgt_vocab < 2 {
            return Err(Error::Parameter(
                "vocabularies must hold at least the two reserved tokens".into(),
            ));
        }
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        ModelParams::zeros(self)
            .named_blocks()
            .iter()
            .map(|(_, m)| m.len())
            .sum()
    }
}

/// Every trainable matrix of the model. Also used as the gradient and
/// optimizer-accumulator container, since those mirror its shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub src_embed: Matrix,
    pub tgt_embed: Matrix,
    pub encoder: GruParams,
    pub decoder: GruParams,
    /// `V`: final encoder state to context.
    pub context_proj: Matrix,
    /// `V'`: context to initial decoder state.
    pub decoder_init: Matrix,
    /// `O_h`, `O_y`, `O_c`: maxout pre-activation weights.
    pub out_hidden: Matrix,
    pub out_prev: Matrix,
    pub out_context: Matrix,
    /// `G_l` (K_t x rank) and `G_r` (rank x m).
    pub out_left: Matrix,
    pub out_right: Matrix,
}

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (n, d, m2) = (cfg.hidden, cfg.embed, 2 * cfg.maxout);
        Self {
            config: cfg.clone(),
            src_embed: Matrix::zeros(cfg.src_vocab, d),
            tgt_embed: Matrix::zeros(cfg.tgt_vocab, d),
            encoder: GruParams::zeros(n, d, None, cfg.bias),
            decoder: GruParams::zeros(n, d, Some(n), cfg.bias),
            context_proj: Matrix::zeros(n, n),
            decoder_init: Matrix::zeros(n, n),
            out_hidden: Matrix::zeros(m2, n),
            out_prev: Matrix::zeros(m2, cfg.tgt_vocab),
            out_context: Matrix::zeros(m2, n),
            out_left: Matrix::zeros(cfg.tgt_vocab, cfg.output_rank),
            out_right: Matrix::zeros(cfg.output_rank, cfg.maxout),
        }
    }

    /// White Gaussian weights with standard deviation `std`, orthogonal
    /// recurrent matrices, zero biases. The tanh ablation keeps its unused
    /// gate matrices at zero.
    pub fn init(cfg: &ModelConfig, std: f64, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (n, d, m2) = (cfg.hidden, cfg.embed, 2 * cfg.maxout);
        let encoder = GruParams::init(n, d, None, cfg.bias, std, rng)?;
        let decoder = GruParams::init(n, d, Some(n), cfg.bias, std, rng)?;
        let mut p = Self {
            config: cfg.clone(),
            src_embed: gaussian_init(cfg.src_vocab, d, std, rng)?,
            tgt_embed: gaussian_init(cfg.tgt_vocab, d, std, rng)?,
            encoder,
            decoder,
            context_proj: gaussian_init(n, n, std, rng)?,
            decoder_init: gaussian_init(n, n, std, rng)?,
            out_hidden: gaussian_init(m2, n, std, rng)?,
            out_prev: gaussian_init(m2, cfg.tgt_vocab, std, rng)?,
            out_context: gaussian_init(m2, n, std, rng)?,
            out_left: gaussian_init(cfg.tgt_vocab, cfg.output_rank, std, rng)?,
            out_right: gaussian_init(cfg.output_rank, cfg.maxout, std, rng)?,
        };
        p.clear_unused_gates();
        Ok(p)
    }

    /// Every parameter drawn from `N(0, std^2)`, recurrent ones included.
    /// Used for gradient checks, where larger weights keep derivatives well
    /// above finite-difference noise.
    pub fn random(cfg: &ModelConfig, std: f64, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut p = Self::zeros(cfg);
        for (_, m) in p.named_blocks_mut() {
            *m = gaussian_init(m.rows(), m.cols(), std, rng)?;
        }
        p.clear_unused_gates();
        Ok(p)
    }

    /// Sets the update-gate bias of both cells to `value`. A positive value
    /// starts the units close to copying their previous state. Does nothing
    /// for the tanh ablation or when biases are disabled.
    pub fn set_update_bias(&mut self, value: f64) {
        if self.config.cell == CellKind::Tanh {
            return;
        }
        for cell in [&mut self.encoder, &mut self.decoder] {
            if let Some(b) = cell.bias.as_mut() {
                b.update.fill(value);
            }
        }
    }

    /// The tanh ablation has no gates; their matrices stay at zero.
    fn clear_unused_gates(&mut self) {
        if self.config.cell != CellKind::Tanh {
            return;
        }
        for cell in [&mut self.encoder, &mut self.decoder] {
            let mut sets = vec![&mut cell.input, &mut cell.recurrent];
            sets.extend(cell.context.as_mut());
            sets.extend(cell.bias.as_mut());
            for set in sets {
                set.update.fill(0.0);
                set.reset.fill(0.0);
            }
        }
    }

    /// Parameter matrices in a fixed order with stable names.
    pub fn named_blocks(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("src_embed".to_string(), &self.src_embed),
            ("tgt_embed".to_string(), &self.tgt_embed),
        ];
        self.encoder.named_blocks("encoder", &mut out);
        self.decoder.named_blocks("decoder", &mut out);
        out.push(("context_proj".into(), &self.context_proj));
        out.push(("decoder_init".into(), &self.decoder_init));
        out.push(("out_hidden".into(), &self.out_hidden));
        out.push(("out_prev".into(), &self.out_prev));
        out.push(("out_context".into(), &self.out_context));
        out.push(("out_left".into(), &self.out_left));
        out.push(("out_right".into(), &self.out_right));
        out
    }

    pub fn named_blocks_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = vec![
            ("src_embed".to_string(), &mut self.src_embed),
            ("tgt_embed".to_string(), &mut self.tgt_embed),
        ];
        self.encoder.named_blocks_mut("encoder", &mut out);
        self.decoder.named_blocks_mut("decoder", &mut out);
        out.push(("context_proj".into(), &mut self.context_proj));
        out.push(("decoder_init".into(), &mut self.decoder_init));
        out.push(("out_hidden".into(), &mut self.out_hidden));
        out.push(("out_prev".into(), &mut self.out_prev));
        out.push(("out_context".into(), &mut self.out_context));
        out.push(("out_left".into(), &mut self.out_left));
        out.push(("out_right".into(), &mut self.out_right));
        out
    }

    pub fn blocks(&self) -> Vec<&Matrix> {
        self.named_blocks().into_iter().map(|(_, m)| m).collect()
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Matrix> {
        self.named_blocks_mut().into_iter().map(|(_, m)| m).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks().iter().map(|m| m.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|m| m.is_finite())
    }

    /// Zero-valued container with the same layout.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    /// `self += alpha * other`, block by block.
    pub fn add_scaled(&mut self, alpha: f64, other: &ModelParams) -> Result<()> {
        self.check_layout(other)?;
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            dst.add_scaled(alpha, src)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for m in self.blocks_mut() {
            m.scale(alpha);
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.blocks().iter().map(|m| m.sum_sq()).sum()
    }

    pub fn check_layout(&self, other: &ModelParams) -> Result<()> {
        let a = self.named_blocks();
        let b = other.named_blocks();
        if a.len() != b.len() {
            return Err(Error::shape("parameter layout", (a.len(), 0), (b.len(), 0)));
        }
        for ((na, ma), (nb, mb)) in a.iter().zip(&b) {
            if na != nb || ma.shape() != mb.shape() {
                return Err(Error::shape("parameter layout", ma.shape(), mb.shape()));
            }
        }
        Ok(())
    }

    /// All entries concatenated in block order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks().iter().flat_map(|m| m.data().iter().copied()).collect()
    }

    /// Inverse of [`ModelParams::to_flat`].
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total = self.parameter_count();
        if flat.len() != total {
            return Err(Error::shape("set_flat", (flat.len(), 1), (total, 1)));
        }
        let mut offset = 0;
        for m in self.blocks_mut() {
            let n = m.len();
            m.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Largest absolute entry difference across all blocks.
    pub fn max_abs_diff(&self, other: &ModelParams) -> f64 {
        self.blocks()
            .iter()
            .zip(other.blocks())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }
}

/// Row `id` of an embedding table.
pub fn embed(id: TokenId, table: &Matrix) -> Result<&[f64]> {
    if id >= table.rows() {
        return Err(Error::Vocabulary {
            id,
            size: table.rows(),
        });
    }
    Ok(table.row(id))
}

#[derive(Clone, Debug)]
pub struct TanhCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub ctx: Option<Vec<f64>>,
    pub h: Vec<f64>,
}

#[derive(Clone, Debug)]
pub enum StepCache {
    Gated(GruCache),
    Tanh(TanhCache),
}

impl StepCache {
    pub fn h(&self) -> &[f64] {
        match self {
            StepCache::Gated(c) => &c.h,
            StepCache::Tanh(c) => &c.h,
        }
    }
}

fn tanh_forward(
    x: &[f64],
    h_prev: &[f64],
    ctx: Option<(&[f64], &ContextTerms)>,
    p: &GruParams,
) -> Result<TanhCache> {
    let n = p.hidden();
    if x.len() != p.input_dim() || h_prev.len() != n {
        return Err(Error::shape("tanh cell", (x.len(), h_prev.len()), (p.input_dim(), n)));
    }
    let mut a = match &p.bias {
        Some(b) => b.candidate.data().to_vec(),
        None => vec![0.0; n],
    };
    p.input.candidate.matvec_add(x, &mut a);
    p.recurrent.candidate.matvec_add(h_prev, &mut a);
    match (ctx, &p.context) {
        (Some((_, t)), Some(_)) if t.candidate.len() == n => axpy(1.0, &t.candidate, &mut a),
        (None, None) => {}
        _ => return Err(Error::Input("context vector and context weights must come together".into())),
    }
    Ok(TanhCache {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        ctx: ctx.map(|(c, _)| c.to_vec()),
        h: a.iter().map(|v| v.tanh()).collect(),
    })
}

fn tanh_backward(
    cache: &TanhCache,
    dh: &[f64],
    p: &GruParams,
    grads: &mut GruParams,
    acc: Option<&mut ContextGrads>,
) -> StepGrads {
    let da: Vec<f64> = dh.iter().zip(&cache.h).map(|(d, h)| d * (1.0 - h * h)).collect();
    let mut dx = vec![0.0; cache.x.len()];
    let mut dh_prev = vec![0.0; cache.h_prev.len()];
    grads.input.candidate.add_outer(&da, &cache.x);
    p.input.candidate.matvec_t_add(&da, &mut dx);
    grads.recurrent.candidate.add_outer(&da, &cache.h_prev);
    p.recurrent.candidate.matvec_t_add(&da, &mut dh_prev);
    if let Some(b) = &mut grads.bias {
        axpy(1.0, &da, b.candidate.data_mut());
    }
    if let Some(acc) = acc {
        axpy(1.0, &da, &mut acc.candidate);
    }
    StepGrads {
        dx,
        dh_prev,
        dctx: None,
    }
}

fn cell_forward(
    kind: CellKind,
    x: &[f64],
    h_prev: &[f64],
    ctx: Option<(&[f64], &ContextTerms)>,
    p: &GruParams,
) -> Result<StepCache> {
    match kind {
        CellKind::Gated => gru_forward_with(x, h_prev, ctx, p).map(StepCache::Gated),
        CellKind::Tanh => tanh_forward(x, h_prev, ctx, p).map(StepCache::Tanh),
    }
}

/// Decoder steps pass `acc`, which collects the context gradients for the
/// whole sequence.
fn cell_backward(
    cache: &StepCache,
    dh: &[f64],
    p: &GruParams,
    grads: &mut GruParams,
    acc: Option<&mut ContextGrads>,
) -> Result<StepGrads> {
    match (cache, acc) {
        (StepCache::Gated(c), Some(acc)) => gru_backward_deferred(c, dh, p, grads, acc),
        (StepCache::Gated(c), None) => gru_backward_into(c, dh, p, grads),
        (StepCache::Tanh(c), acc) => Ok(tanh_backward(c, dh, p, grads, acc)),
    }
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `c = tanh(V h_N)`.
    pub context: Vec<f64>,
    pub steps: Vec<StepCache>,
    pub final_hidden: Vec<f64>,
}

fn check_sequence(ids: &[TokenId], vocab: usize, side: &str) -> Result<()> {
    match ids.last() {
        None => return Err(Error::Input(format!("empty {side} sequence"))),
        Some(&last) if last != EOS => {
            return Err(Error::Input(format!("{side} sequence must end with EOS")))
        }
        _ => {}
    }
    if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
        return Err(Error::Vocabulary { id, size: vocab });
    }
    Ok(())
}

pub fn encode(src_ids: &[TokenId], p: &ModelParams) -> Result<EncoderOutput> {
    check_sequence(src_ids, p.config.src_vocab, "source")?;
    let mut h = vec![0.0; p.config.hidden];
    let mut steps = Vec::with_capacity(src_ids.len());
    for &id in src_ids {
        let step = cell_forward(p.config.cell, embed(id, &p.src_embed)?, &h, None, &p.encoder)?;
        h.copy_from_slice(step.h());
        steps.push(step);
    }
    let context = p.context_proj.matvec(&h).into_iter().map(f64::tanh).collect();
    Ok(EncoderOutput {
        context,
        steps,
        final_hidden: h,
    })
}

/// `h'_0 = tanh(V' c)`.
pub fn decoder_init(c: &[f64], p: &ModelParams) -> Result<Vec<f64>> {
    if c.len() != p.decoder_init.cols() {
        return Err(Error::shape("decoder_init", (c.len(), 1), p.decoder_init.shape()));
    }
    Ok(p.decoder_init.matvec(c).into_iter().map(f64::tanh).collect())
}

/// Output layer activations for one decoder step.
#[derive(Clone, Debug)]
pub struct OutputStep {
    /// Index into the pre-activation chosen by each maxout unit.
    pub winners: Vec<usize>,
    /// Maxout outputs `s` (m).
    pub pooled: Vec<f64>,
    /// `G_r s` (rank).
    pub projected: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Output-layer forward pass. `ctx_term` is `O_c c`, constant over a
/// sequence.
fn output_forward(
    h: &[f64],
    y_prev: Option<TokenId>,
    ctx_term: &[f64],
    p: &ModelParams,
) -> Result<OutputStep> {
    let m = p.config.maxout;
    let mut pre = ctx_term.to_vec();
    p.out_hidden.matvec_add(h, &mut pre);
    if let Some(y) = y_prev {
        if y >= p.config.tgt_vocab {
            return Err(Error::Vocabulary {
                id: y,
                size: p.config.tgt_vocab,
            });
        }
        let cols = p.out_prev.cols();
        for (i, v) in pre.iter_mut().enumerate() {
            *v += p.out_prev.data()[i * cols + y];
        }
    }
    let mut winners = Vec::with_capacity(m);
    let mut pooled = Vec::with_capacity(m);
    for i in 0..m {
        let (a, b) = (pre[2 * i], pre[2 * i + 1]);
        if b > a {
            winners.push(2 * i + 1);
            pooled.push(b);
        } else {
            winners.push(2 * i);
            pooled.push(a);
        }
    }
    let projected = p.out_right.matvec(&pooled);
    let mut probs = p.out_left.matvec(&projected);
    softmax_in_place(&mut probs);
    Ok(OutputStep {
        winners,
        pooled,
        projected,
        probs,
    })
}

/// Next-token distribution given decoder state `h`, the previous target
/// token (`None` at the first step) and the context `c`.
pub fn output_distribution(
    h: &[f64],
    y_prev: Option<TokenId>,
    c: &[f64],
    p: &ModelParams,
) -> Result<Vec<f64>> {
    if h.len() != p.config.hidden || c.len() != p.config.hidden {
        return Err(Error::shape("output_distribution", (h.len(), c.len()), (p.config.hidden, p.config.hidden)));
    }
    let ctx_term = p.out_context.matvec(c);
    Ok(output_forward(h, y_prev, &ctx_term, p)?.probs)
}

#[derive(Clone, Debug)]
pub struct DecoderStep {
    pub cell: StepCache,
    pub output: OutputStep,
}

/// Everything the backward pass needs for one pair.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub encoder: EncoderOutput,
    pub init_hidden: Vec<f64>,
    pub steps: Vec<DecoderStep>,
    pub log_prob: f64,
}

/// Incremental decoder over a fixed source, for sampling and per-step
/// inspection.
#[derive(Clone, Debug)]
pub struct DecoderSession<'a> {
    params: &'a ModelParams,
    context: Vec<f64>,
    ctx_term: Vec<f64>,
    cell_terms: ContextTerms,
    hidden: Vec<f64>,
    prev: Option<TokenId>,
}

impl<'a> DecoderSession<'a> {
    pub fn new(src_ids: &[TokenId], params: &'a ModelParams) -> Result<Self> {
        let enc = encode(src_ids, params)?;
        let hidden = decoder_init(&enc.context, params)?;
        let ctx_term = params.out_context.matvec(&enc.context);
        let cell_terms = ContextTerms::new(&enc.context, &params.decoder)?;
        Ok(Self {
            params,
            context: enc.context,
            ctx_term,
            cell_terms,
            hidden,
            prev: None,
        })
    }

    pub fn context(&self) -> &[f64] {
        &self.context
    }

    /// Advances the decoder past the previously fed token and returns the
    /// distribution over the next one.
    pub fn step(&mut self) -> Result<Vec<f64>> {
        let p = self.params;
        let zero;
        let x = match self.prev {
            Some(y) => embed(y, &p.tgt_embed)?,
            None => {
                zero = vec![0.0; p.config.embed];
                &zero
            }
        };
        let ctx = Some((self.context.as_slice(), &self.cell_terms));
        let cell = cell_forward(p.config.cell, x, &self.hidden, ctx, &p.decoder)?;
        self.hidden.copy_from_slice(cell.h());
        Ok(output_forward(&self.hidden, self.prev, &self.ctx_term, p)?.probs)
    }

    /// Records the token emitted at the current step.
    pub fn feed(&mut self, y: TokenId) {
        self.prev = Some(y);
    }
}

pub fn forward(src_ids: &[TokenId], tgt_ids: &[TokenId], p: &ModelParams) -> Result<ForwardPass> {
    check_sequence(tgt_ids, p.config.tgt_vocab, "target")?;
    let encoder = encode(src_ids, p)?;
    let c = &encoder.context;
    let init_hidden = decoder_init(c, p)?;
    let ctx_term = p.out_context.matvec(c);
    let cell_terms = ContextTerms::new(c, &p.decoder)?;
    let zero = vec![0.0; p.config.embed];
    let mut h = init_hidden.clone();
    let mut steps = Vec::with_capacity(tgt_ids.len());
    let mut log_prob = 0.0;
    for (t, &y) in tgt_ids.iter().enumerate() {
        let y_prev = (t > 0).then(|| tgt_ids[t - 1]);
        let x = match y_prev {
            Some(prev) => embed(prev, &p.tgt_embed)?,
            None => &zero,
        };
        let cell = cell_forward(p.config.cell, x, &h, Some((c, &cell_terms)), &p.decoder)?;
        h.copy_from_slice(cell.h());
        let output = output_forward(&h, y_prev, &ctx_term, p)?;
        log_prob += output.probs[y].ln();
        steps.push(DecoderStep { cell, output });
    }
    Ok(ForwardPass {
        encoder,
        init_hidden,
        steps,
        log_prob,
    })
}

/// `log p(tgt | src)`, the EOS step included.
pub fn log_prob(src_ids: &[TokenId], tgt_ids: &[TokenId], p: &ModelParams) -> Result<f64> {
    Ok(forward(src_ids, tgt_ids, p)?.log_prob)
}

/// Back-propagates `scale * (-log p(tgt | src))` into `grads` and returns
/// the unscaled negative log-likelihood.
pub fn backward_into(
    src_ids: &[TokenId],
    tgt_ids: &[TokenId],
    p: &ModelParams,
    grads: &mut ModelParams,
    scale: f64,
) -> Result<f64> {
    let fwd = forward(src_ids, tgt_ids, p)?;
    let cfg = &p.config;
    let n = cfg.hidden;
    let c = &fwd.encoder.context;
    let mut dh = vec![0.0; n];
    // `c` is shared by every decoder step, so its pre-activation gradients
    // are summed first and pushed through the context weights once.
    let mut ctx_grads = ContextGrads::zeros(n);
    let mut dpre_sum = vec![0.0; 2 * cfg.maxout];

    for t in (0..tgt_ids.len()).rev() {
        let step = &fwd.steps[t];
        let out = &step.output;
        let y_prev = (t > 0).then(|| tgt_ids[t - 1]);
        let h = step.cell.h();

        let mut dlogits: Vec<f64> = out.probs.iter().map(|q| scale * q).collect();
        dlogits[tgt_ids[t]] -= scale;

        grads.out_left.add_outer(&dlogits, &out.projected);
        let mut dproj = vec![0.0; cfg.output_rank];
        p.out_left.matvec_t_add(&dlogits, &mut dproj);
        grads.out_right.add_outer(&dproj, &out.pooled);
        let mut dpooled = vec![0.0; cfg.maxout];
        p.out_right.matvec_t_add(&dproj, &mut dpooled);

        let mut dpre = vec![0.0; 2 * cfg.maxout];
        for (i, &w) in out.winners.iter().enumerate() {
            dpre[w] = dpooled[i];
        }
        grads.out_hidden.add_outer(&dpre, h);
        p.out_hidden.matvec_t_add(&dpre, &mut dh);
        axpy(1.0, &dpre, &mut dpre_sum);
        if let Some(y) = y_prev {
            let cols = grads.out_prev.cols();
            let data = grads.out_prev.data_mut();
            for (i, d) in dpre.iter().enumerate() {
                data[i * cols + y] += d;
            }
        }

        let sg = cell_backward(&step.cell, &dh, &p.decoder, &mut grads.decoder, Some(&mut ctx_grads))?;
        if let Some(y) = y_prev {
            axpy(1.0, &sg.dx, grads.tgt_embed.row_mut(y));
        }
        dh = sg.dh_prev;
    }
    grads.out_context.add_outer(&dpre_sum, c);
    let mut dc = vec![0.0; n];
    p.out_context.matvec_t_add(&dpre_sum, &mut dc);
    axpy(1.0, &ctx_grads.apply(c, &p.decoder, &mut grads.decoder)?, &mut dc);

    // h'_0 = tanh(V' c)
    let dpre_init: Vec<f64> = dh
        .iter()
        .zip(&fwd.init_hidden)
        .map(|(d, h)| d * (1.0 - h * h))
        .collect();
    grads.decoder_init.add_outer(&dpre_init, c);
    p.decoder_init.matvec_t_add(&dpre_init, &mut dc);

    // c = tanh(V h_N)
    let dpre_ctx: Vec<f64> = dc.iter().zip(c).map(|(d, c)| d * (1.0 - c * c)).collect();
    grads.context_proj.add_outer(&dpre_ctx, &fwd.encoder.final_hidden);
    let mut dh = vec![0.0; n];
    p.context_proj.matvec_t_add(&dpre_ctx, &mut dh);

    for (t, step) in fwd.encoder.steps.iter().enumerate().rev() {
        let sg = cell_backward(step, &dh, &p.encoder, &mut grads.encoder, None)?;
        axpy(1.0, &sg.dx, grads.src_embed.row_mut(src_ids[t]));
        dh = sg.dh_prev;
    }

    Ok(-fwd.log_prob)
}

/// Gradient of `-log p(tgt | src)` with respect to every parameter.
pub fn model_backward(
    src_ids: &[TokenId],
    tgt_ids: &[TokenId],
    p: &ModelParams,
) -> Result<(f64, ModelParams)> {
    let mut grads = p.zeros_like();
    let nll = backward_into(src_ids, tgt_ids, p, &mut grads, 1.0)?;
    Ok((nll, grads))
}
