//! Training objective, parameter updates, the minibatch training loop and
//! the finite-difference gradient checker.

use std::fmt;
use std::time::Instant;

use crate::data::PhrasePair;
use crate::error::{Error, Result};
use crate::model::{backward_into, forward, model_backward, ForwardPass, ModelParams};
use crate::rng::Rng;

/// Mean negative log-likelihood of `pairs` and its gradient.
pub fn batch_nll(pairs: &[&PhrasePair], p: &ModelParams) -> Result<(f64, ModelParams)> {
    if pairs.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let scale = 1.0 / pairs.len() as f64;
    let mut grads = p.zeros_like();
    let mut total = 0.0;
    for pair in pairs {
        total += backward_into(&pair.src_ids, &pair.tgt_ids, p, &mut grads, scale)?;
    }
    Ok((total * scale, grads))
}

/// Decayed squared-gradient and squared-update accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct AdadeltaState {
    pub acc_grad_sq: ModelParams,
    pub acc_update_sq: ModelParams,
    pub rho: f64,
    pub eps: f64,
}

impl AdadeltaState {
    pub const DEFAULT_RHO: f64 = 0.95;
    pub const DEFAULT_EPS: f64 = 1e-6;

    pub fn new(params: &ModelParams, rho: f64, eps: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rho) || !(eps > 0.0) {
            return Err(Error::Parameter(format!(
                "adadelta needs 0 <= rho < 1 and eps > 0, got rho={rho} eps={eps}"
            )));
        }
        Ok(Self {
            acc_grad_sq: params.zeros_like(),
            acc_update_sq: params.zeros_like(),
            rho,
            eps,
        })
    }
}

/// Elementwise Adadelta update over parallel slices.
pub fn adadelta_update(
    param: &mut [f64],
    grad: &[f64],
    acc_grad_sq: &mut [f64],
    acc_update_sq: &mut [f64],
    rho: f64,
    eps: f64,
) {
    for i in 0..param.len() {
        let g = grad[i];
        let eg = rho * acc_grad_sq[i] + (1.0 - rho) * g * g;
        let delta = -((acc_update_sq[i] + eps).sqrt() / (eg + eps).sqrt()) * g;
        acc_grad_sq[i] = eg;
        acc_update_sq[i] = rho * acc_update_sq[i] + (1.0 - rho) * delta * delta;
        param[i] += delta;
    }
}

pub fn adadelta_step(p: &mut ModelParams, grads: &ModelParams, state: &mut AdadeltaState) -> Result<()> {
    p.check_layout(grads)?;
    p.check_layout(&state.acc_grad_sq)?;
    let (rho, eps) = (state.rho, state.eps);
    for (((w, g), eg), eu) in p
        .blocks_mut()
        .into_iter()
        .zip(grads.blocks())
        .zip(state.acc_grad_sq.blocks_mut())
        .zip(state.acc_update_sq.blocks_mut())
    {
        adadelta_update(w.data_mut(), g.data(), eg.data_mut(), eu.data_mut(), rho, eps);
    }
    Ok(())
}

pub fn sgd_step(p: &mut ModelParams, grads: &ModelParams, learning_rate: f64) -> Result<()> {
    if !(learning_rate > 0.0) || !learning_rate.is_finite() {
        return Err(Error::Parameter(format!(
            "learning rate must be positive, got {learning_rate}"
        )));
    }
    p.add_scaled(-learning_rate, grads)
}

/// Rescales `grads` so its global L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut ModelParams, max_norm: f64) -> f64 {
    let norm = grads.sum_sq().sqrt();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adadelta,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adadelta" => Ok(Self::Adadelta),
            "sgd" => Ok(Self::Sgd),
            other => Err(Error::Parameter(format!("unknown optimizer {other:?}"))),
        }
    }
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Adadelta => "adadelta",
            Self::Sgd => "sgd",
        }
    }
}

/// How minibatches are drawn from the pair pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    /// Independent uniform draws.
    WithReplacement,
    /// Walk a shuffled permutation, reshuffling when exhausted.
    WithoutReplacement,
}

impl std::str::FromStr for Sampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "with-replacement" | "replacement" => Ok(Self::WithReplacement),
            "without-replacement" | "epoch" => Ok(Self::WithoutReplacement),
            other => Err(Error::Parameter(format!("unknown sampling mode {other:?}"))),
        }
    }
}

impl Sampling {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::WithReplacement => "with-replacement",
            Self::WithoutReplacement => "without-replacement",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_updates: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Step size for plain SGD; ignored by Adadelta.
    pub learning_rate: f64,
    pub rho: f64,
    pub eps: f64,
    /// Global gradient-norm cap. Off by default.
    pub clip_norm: Option<f64>,
    pub sampling: Sampling,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            max_updates: 1000,
            seed: 1234,
            optimizer: OptimizerKind::Adadelta,
            learning_rate: 0.01,
            rho: AdadeltaState::DEFAULT_RHO,
            eps: AdadeltaState::DEFAULT_EPS,
            clip_norm: None,
            sampling: Sampling::WithReplacement,
            log_every: 100,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be at least 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Parameter("log_every must be at least 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Parameter("clip_norm must be positive".into()));
            }
        }
        if self.optimizer == OptimizerKind::Sgd && !(self.learning_rate > 0.0) {
            return Err(Error::Parameter("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the loss log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogLine {
    pub update: usize,
    /// Mean per-pair negative log-likelihood over the batches since the
    /// previous line.
    pub mean_nll: f64,
    /// Same losses divided by target tokens (EOS included).
    pub nll_per_token: f64,
    pub seconds: f64,
}

impl fmt::Display for LogLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{:.6}\t{:.3}", self.update, self.mean_nll, self.seconds)
    }
}

enum Optimizer {
    Adadelta(AdadeltaState),
    Sgd(f64),
}

/// Minibatch training loop state. Batches come from their own random
/// stream so that they do not depend on how parameters were initialized.
pub struct Trainer {
    params: ModelParams,
    optimizer: Optimizer,
    cfg: TrainConfig,
    pool: Vec<PhrasePair>,
    rng: Rng,
    order: Vec<usize>,
    cursor: usize,
    updates: usize,
    window_nll: f64,
    window_tokens: usize,
    window_pairs: usize,
    started: Instant,
}

/// Random stream used for batch selection.
pub const BATCH_STREAM: u64 = 1;

impl Trainer {
    pub fn new(params: ModelParams, pool: Vec<PhrasePair>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if pool.is_empty() {
            return Err(Error::Input("training set is empty".into()));
        }
        let optimizer = match cfg.optimizer {
            OptimizerKind::Adadelta => Optimizer::Adadelta(AdadeltaState::new(&params, cfg.rho, cfg.eps)?),
            OptimizerKind::Sgd => Optimizer::Sgd(cfg.learning_rate),
        };
        let rng = Rng::with_stream(cfg.seed, BATCH_STREAM);
        Ok(Self {
            params,
            optimizer,
            order: (0..pool.len()).collect(),
            cursor: pool.len(),
            pool,
            rng,
            cfg,
            updates: 0,
            window_nll: 0.0,
            window_tokens: 0,
            window_pairs: 0,
            started: Instant::now(),
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    fn next_batch(&mut self) -> Result<Vec<usize>> {
        match self.cfg.sampling {
            Sampling::WithReplacement => {
                let n = self.pool.len();
                Ok((0..self.cfg.batch_size).map(|_| self.rng.below(n)).collect())
            }
            Sampling::WithoutReplacement => {
                let mut batch = Vec::with_capacity(self.cfg.batch_size);
                while batch.len() < self.cfg.batch_size {
                    if self.cursor == self.order.len() {
                        self.rng.shuffle(&mut self.order);
                        self.cursor = 0;
                    }
                    batch.push(self.order[self.cursor]);
                    self.cursor += 1;
                }
                Ok(batch)
            }
        }
    }

    /// Runs one update. Returns a log line when one is due.
    pub fn step(&mut self) -> Result<Option<LogLine>> {
        let idx = self.next_batch()?;
        let batch: Vec<&PhrasePair> = idx.iter().map(|&i| &self.pool[i]).collect();
        let (loss, mut grads) = batch_nll(&batch, &self.params)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss is {loss} at update {}", self.updates + 1)));
        }
        self.window_tokens += batch.iter().map(|p| p.target_len()).sum::<usize>();
        self.window_nll += loss * batch.len() as f64;
        self.window_pairs += batch.len();
        if let Some(max) = self.cfg.clip_norm {
            clip_grad_norm(&mut grads, max);
        }
        match &mut self.optimizer {
            Optimizer::Adadelta(state) => adadelta_step(&mut self.params, &grads, state)?,
            Optimizer::Sgd(lr) => sgd_step(&mut self.params, &grads, *lr)?,
        }
        if !self.params.is_finite() {
            return Err(Error::Numeric(format!(
                "parameters became non-finite at update {}",
                self.updates + 1
            )));
        }
        self.updates += 1;
        if self.updates % self.cfg.log_every == 0 {
            let line = LogLine {
                update: self.updates,
                mean_nll: self.window_nll / self.window_pairs as f64,
                nll_per_token: self.window_nll / self.window_tokens as f64,
                seconds: self.started.elapsed().as_secs_f64(),
            };
            self.window_nll = 0.0;
            self.window_tokens = 0;
            self.window_pairs = 0;
            return Ok(Some(line));
        }
        Ok(None)
    }
}

/// Runs `cfg.max_updates` updates from `params`. `on_log` sees every log
/// line as it is produced.
pub fn train(
    dataset: Vec<PhrasePair>,
    cfg: &TrainConfig,
    params: ModelParams,
    mut on_log: impl FnMut(&LogLine),
) -> Result<(ModelParams, Vec<LogLine>)> {
    let mut trainer = Trainer::new(params, dataset, cfg.clone())?;
    let mut log = Vec::new();
    for _ in 0..cfg.max_updates {
        if let Some(line) = trainer.step()? {
            on_log(&line);
            log.push(line);
        }
    }
    Ok((trainer.into_params(), log))
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Finite-difference formula used by the gradient checker.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(θ+δ) - f(θ-δ)) / 2δ`, error O(δ²).
    #[default]
    Central,
    /// `(f(θ-2δ) - 8f(θ-δ) + 8f(θ+δ) - f(θ+2δ)) / 12δ`, error O(δ⁴). Allows
    /// a larger step, which keeps round-off in `f` from swamping entries
    /// whose true derivative is tiny.
    FivePoint,
}

impl std::str::FromStr for Stencil {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "central" | "three-point" => Ok(Self::Central),
            "five-point" => Ok(Self::FivePoint),
            other => Err(Error::Parameter(format!("unknown stencil {other:?}"))),
        }
    }
}

/// Compares `analytic` against central differences of `f` around `theta`,
/// one coordinate at a time. Returns the largest relative error and the
/// index where it occurs.
pub fn check_gradient(
    theta: &mut [f64],
    analytic: &[f64],
    step: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> (f64, usize) {
    let r = check_gradient_with(theta, analytic, step, Stencil::Central, |t| Some(f(t)));
    (r.max_rel_error, r.index)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientComparison {
    pub max_rel_error: f64,
    pub index: usize,
    /// Coordinates left out because `f` returned `None` for one of the
    /// perturbed points.
    pub skipped: usize,
}

/// Generalized [`check_gradient`]. `f` may return `None` to mark a point
/// where the difference quotient is meaningless, e.g. across a kink.
pub fn check_gradient_with(
    theta: &mut [f64],
    analytic: &[f64],
    step: f64,
    stencil: Stencil,
    mut f: impl FnMut(&[f64]) -> Option<f64>,
) -> GradientComparison {
    assert_eq!(theta.len(), analytic.len());
    let mut out = GradientComparison {
        max_rel_error: 0.0,
        index: 0,
        skipped: 0,
    };
    let mut at = |theta: &mut [f64], i: usize, v: f64| {
        theta[i] = v;
        f(theta)
    };
    for i in 0..theta.len() {
        let orig = theta[i];
        let numeric = match stencil {
            Stencil::Central => {
                let plus = at(theta, i, orig + step);
                let minus = at(theta, i, orig - step);
                plus.zip(minus).map(|(p, m)| (p - m) / (2.0 * step))
            }
            Stencil::FivePoint => {
                let pts = [
                    at(theta, i, orig + step),
                    at(theta, i, orig - step),
                    at(theta, i, orig + 2.0 * step),
                    at(theta, i, orig - 2.0 * step),
                ];
                match pts {
                    [Some(p1), Some(m1), Some(p2), Some(m2)] => {
                        Some((m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * step))
                    }
                    _ => None,
                }
            }
        };
        theta[i] = orig;
        let Some(numeric) = numeric else {
            out.skipped += 1;
            continue;
        };
        let err = relative_error(analytic[i], numeric);
        if err > out.max_rel_error {
            out.max_rel_error = err;
            out.index = i;
        }
    }
    out
}

/// Largest model size `grad_check` accepts; every entry costs two full
/// forward passes.
pub const GRAD_CHECK_MAX_PARAMS: usize = 100_000;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Block holding the worst entry.
    pub worst_block: String,
    pub entries: usize,
    /// Entries whose perturbation flipped a maxout winner, where the
    /// loss is not differentiable within the step.
    pub kinks: usize,
}

/// Finite-difference check of [`model_backward`] on one pair.
pub fn grad_check(p: &ModelParams, pair: &PhrasePair, step: f64) -> Result<GradCheckReport> {
    grad_check_with(p, pair, step, Stencil::Central)
}

pub fn grad_check_with(
    p: &ModelParams,
    pair: &PhrasePair,
    step: f64,
    stencil: Stencil,
) -> Result<GradCheckReport> {
    let count = p.parameter_count();
    if count > GRAD_CHECK_MAX_PARAMS {
        return Err(Error::Parameter(format!(
            "grad_check is limited to {GRAD_CHECK_MAX_PARAMS} parameters, model has {count}"
        )));
    }
    let (_, grads) = model_backward(&pair.src_ids, &pair.tgt_ids, p)?;
    let analytic = grads.to_flat();
    let mut theta = p.to_flat();
    let mut probe = p.clone();
    let mut failure = None;
    let winners = |fwd: &ForwardPass| -> Vec<usize> {
        fwd.steps.iter().flat_map(|s| s.output.winners.iter().copied()).collect()
    };
    let base = winners(&forward(&pair.src_ids, &pair.tgt_ids, p)?);
    let cmp = check_gradient_with(&mut theta, &analytic, step, stencil, |t| {
        probe.set_flat(t).expect("same layout");
        match forward(&pair.src_ids, &pair.tgt_ids, &probe) {
            Ok(fwd) if winners(&fwd) == base => Some(-fwd.log_prob),
            Ok(_) => None,
            Err(e) => {
                failure.get_or_insert(e);
                Some(f64::NAN)
            }
        }
    });
    let (max_rel_error, at) = (cmp.max_rel_error, cmp.index);
    if let Some(e) = failure {
        return Err(e);
    }
    let mut offset = 0;
    let mut worst_block = String::new();
    for (name, m) in p.named_blocks() {
        if at < offset + m.len() {
            worst_block = name;
            break;
        }
        offset += m.len();
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_block,
        entries: count,
        kinks: cmp.skipped,
    })
}
