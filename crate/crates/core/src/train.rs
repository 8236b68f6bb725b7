//! Loss assembly on the tape, Adam, and the training / evaluation loops.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{basis_coefficients, wmmse_power, wmmse_precoding, WmmseConfig};
use crate::channel::{generate_channel, ChannelRealization, ChannelTensor, SystemConfig};
use crate::error::{Error, Result};
use crate::gib::{task_reward, EvalChannel, Solution};
use crate::model::{Forward, HeadKind, Mode, Model, ParamSet};
use crate::tape::Var;

/// Losses below `-REWARD_FLOOR` in reward mean the run has blown up.
const REWARD_FLOOR: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TaskLoss {
    /// Negative sum SE on the evaluation channel.
    #[default]
    Unsupervised,
    /// Squared error against WMMSE run on the observed channel.
    SupervisedWmmse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: usize,
    /// Channel draws per step.
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub task_loss: TaskLoss,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 3000,
            batch_size: 8,
            seed: 0,
            grad_clip: Some(5.0),
            task_loss: TaskLoss::Unsupervised,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be finite and >= 0, got {}", self.lr));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("Adam moments must lie in [0,1) and eps > 0".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

/// Source of training channels.
#[derive(Debug, Clone)]
pub enum Sampler {
    /// Fresh draws at the given CSI-error level.
    Fresh { sigma_i_sq: f64 },
    /// The same realization every time.
    Fixed(Box<ChannelRealization>),
}

impl Sampler {
    pub fn draw(&self, sys: &SystemConfig, seed: u64) -> Result<ChannelRealization> {
        match self {
            Sampler::Fresh { sigma_i_sq } => generate_channel(sys, *sigma_i_sq, seed),
            Sampler::Fixed(r) => Ok((**r).clone()),
        }
    }
}

/// Splits a base seed into independent streams.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_CHANNEL: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_EVAL: u64 = 4;

/// Scalar components of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss: f64,
    pub reward: f64,
    pub a_term: f64,
    pub e_term: f64,
}

/// Tape nodes of an assembled loss.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub loss: Var,
    pub reward: Var,
    pub a_term: Option<Var>,
    pub e_term: Option<Var>,
}

fn eval_channel(model: &Model, real: &ChannelRealization) -> ChannelTensor {
    match model.config.gib.eval_channel {
        EvalChannel::True => real.h_true.clone(),
        EvalChannel::Observed => real.h_observed.clone(),
    }
}

/// WMMSE target in the head's canonical output layout.
pub fn wmmse_target(model: &Model, real: &ChannelRealization) -> Result<Vec<f64>> {
    let wcfg = WmmseConfig::default();
    match model.config.head {
        HeadKind::Precoding => {
            let w = wmmse_precoding(&real.h_observed, &model.sys, &wcfg)?.solution.w;
            Ok(w.as_slice().iter().flat_map(|c| [c.re, c.im]).collect())
        }
        HeadKind::Power { basis } => {
            let b = basis.build(&real.h_observed, &model.sys)?;
            Ok(wmmse_power(&real.h_observed, &b, &model.sys, &wcfg)?.solution.p)
        }
    }
}

/// Runs the model on `real.h_observed` and appends the training loss.
pub fn build_loss(
    model: &Model,
    params: &ParamSet,
    real: &ChannelRealization,
    mode: Mode,
    target: Option<&[f64]>,
    rng: &mut ChaCha8Rng,
) -> Result<(Forward, LossVars)> {
    let mut f = model.forward(params, &real.h_observed, mode, rng)?;
    let sys = &model.sys;
    let gib = &model.config.gib;
    let h_eval = eval_channel(model, real);
    let alpha = Arc::new(sys.fairness_weights.clone());
    let noise = sys.noise_power();
    let reward = match model.config.head {
        HeadKind::Precoding => f.tape.sum_se_precoding(f.output, Arc::new(h_eval), noise, alpha)?,
        HeadKind::Power { .. } => {
            let basis = f.basis.as_ref().ok_or_else(|| Error::InvalidConfig("missing basis".into()))?;
            let coef = Arc::new(basis_coefficients(&h_eval, basis));
            f.tape.sum_se_power(f.output, coef, sys.aps, sys.ues, noise, alpha)?
        }
    };
    let task = match target {
        Some(t) => f.tape.squared_error(f.output, t.to_vec())?,
        None => f.tape.scale(reward, -1.0),
    };

    let mut a_term = None;
    let mut e_term = None;
    let trace = f.trace.clone();
    for layer in &trace {
        if let Some(logits) = layer.logits {
            let kl = f.tape.kl_bernoulli_sum(logits, gib.alpha)?;
            a_term = Some(match a_term {
                Some(a) => f.tape.add(a, kl)?,
                None => kl,
            });
        }
        if let (Some(mu), Some(var)) = (layer.mu, layer.var) {
            let missing = || Error::InvalidConfig("missing mixture prior".into());
            let w = f.param("prior.w").ok_or_else(missing)?;
            let m = f.param("prior.mu").ok_or_else(missing)?;
            let lv = f.param("prior.logvar").ok_or_else(missing)?;
            let r = f.tape.mixture_log_ratio(layer.z, mu, var, w, m, lv)?;
            e_term = Some(match e_term {
                Some(e) => f.tape.add(e, r)?,
                None => r,
            });
        }
    }
    let mut loss = task;
    let bound = match (a_term, e_term) {
        (Some(a), Some(e)) => Some(f.tape.add(a, e)?),
        (a, e) => a.or(e),
    };
    if let Some(b) = bound {
        if gib.beta > 0.0 {
            let scaled = f.tape.scale(b, gib.beta);
            loss = f.tape.add(loss, scaled)?;
        }
    }
    Ok((
        f,
        LossVars {
            loss,
            reward,
            a_term,
            e_term,
        },
    ))
}

fn breakdown(f: &Forward, v: &LossVars) -> LossBreakdown {
    LossBreakdown {
        loss: f.tape.scalar(v.loss),
        reward: f.tape.scalar(v.reward),
        a_term: v.a_term.map_or(0.0, |a| f.tape.scalar(a)),
        e_term: v.e_term.map_or(0.0, |e| f.tape.scalar(e)),
    }
}

/// Loss value and its gradient with respect to every parameter, flattened in
/// `ParamSet` order.
pub fn loss_and_grad(
    model: &Model,
    params: &ParamSet,
    real: &ChannelRealization,
    mode: Mode,
    target: Option<&[f64]>,
    rng: &mut ChaCha8Rng,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let (f, vars) = build_loss(model, params, real, mode, target, rng)?;
    let b = breakdown(&f, &vars);
    if !b.loss.is_finite() {
        return Err(Error::NonFinite(format!("loss = {}", b.loss)));
    }
    let grads = f.tape.backward(vars.loss)?;
    let mut flat = Vec::with_capacity(params.scalar_count());
    for ((&v, name), vals) in f.params.iter().zip(&params.names).zip(&params.values) {
        let g = grads.get_or_zeros(v, vals.len());
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
        flat.extend(g);
    }
    Ok((b, flat))
}

/// Loss value only, without recording a backward pass result.
pub fn loss_value(
    model: &Model,
    params: &ParamSet,
    real: &ChannelRealization,
    mode: Mode,
    target: Option<&[f64]>,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let (f, vars) = build_loss(model, params, real, mode, target, rng)?;
    Ok(breakdown(&f, &vars))
}

#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            theta[i] -= cfg.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + cfg.eps);
        }
    }
}

/// Rescales `g` so its Euclidean norm is at most `max`. Returns the norm before clipping.
pub fn clip_global_norm(g: &mut [f64], max: Option<f64>) -> f64 {
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if let Some(c) = max {
        if norm > c {
            let s = c / norm;
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub loss: f64,
    pub reward: f64,
    pub a_term: f64,
    pub e_term: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub history: Vec<HistoryRow>,
}

impl TrainOutcome {
    /// Mean of each logged column over the last `n` steps.
    pub fn tail_mean(&self, n: usize) -> LossBreakdown {
        let tail = &self.history[self.history.len().saturating_sub(n)..];
        let k = tail.len().max(1) as f64;
        LossBreakdown {
            loss: tail.iter().map(|r| r.loss).sum::<f64>() / k,
            reward: tail.iter().map(|r| r.reward).sum::<f64>() / k,
            a_term: tail.iter().map(|r| r.a_term).sum::<f64>() / k,
            e_term: tail.iter().map(|r| r.e_term).sum::<f64>() / k,
        }
    }
}

/// Fresh parameters for `model` derived from `tcfg.seed`.
pub fn init_params(model: &Model, tcfg: &TrainConfig) -> ParamSet {
    model.init_params(&mut ChaCha8Rng::seed_from_u64(derive_seed(tcfg.seed, STREAM_INIT, 0)))
}

/// Trains from `init` for `tcfg.steps` Adam steps. The result is a pure
/// function of the arguments; batch elements run in parallel and are reduced
/// in batch order.
pub fn train(model: &Model, init: ParamSet, sampler: &Sampler, tcfg: &TrainConfig) -> Result<TrainOutcome> {
    tcfg.validate()?;
    let mut params = init;
    let mut theta = params.flatten();
    let mut adam = Adam::new(theta.len());
    let mut history = Vec::with_capacity(tcfg.steps);
    let start = Instant::now();
    let batch = tcfg.batch_size;
    for step in 0..tcfg.steps {
        let results: Vec<Result<(LossBreakdown, Vec<f64>)>> = (0..batch)
            .into_par_iter()
            .map(|b| {
                let idx = (step * batch + b) as u64;
                let real = sampler.draw(&model.sys, derive_seed(tcfg.seed, STREAM_CHANNEL, idx))?;
                let target = match tcfg.task_loss {
                    TaskLoss::Unsupervised => None,
                    TaskLoss::SupervisedWmmse => Some(wmmse_target(model, &real)?),
                };
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tcfg.seed, STREAM_NOISE, idx));
                loss_and_grad(model, &params, &real, Mode::Train, target.as_deref(), &mut rng)
            })
            .collect();
        let mut grad = vec![0.0; theta.len()];
        let mut mean = LossBreakdown::default();
        for r in results {
            let (b, g) = match r {
                Ok(x) => x,
                Err(Error::NonFinite(_)) | Err(Error::Diverged { .. }) => {
                    return Err(Error::TrainingDiverged {
                        step,
                        loss: f64::NAN,
                        reward: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            grad.iter_mut().zip(&g).for_each(|(a, x)| *a += x);
            mean.loss += b.loss;
            mean.reward += b.reward;
            mean.a_term += b.a_term;
            mean.e_term += b.e_term;
        }
        let inv = 1.0 / batch as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        mean.loss *= inv;
        mean.reward *= inv;
        mean.a_term *= inv;
        mean.e_term *= inv;
        if !mean.loss.is_finite() || mean.reward < -REWARD_FLOOR {
            return Err(Error::TrainingDiverged {
                step,
                loss: mean.loss,
                reward: mean.reward,
            });
        }
        let grad_norm = clip_global_norm(&mut grad, tcfg.grad_clip);
        adam.step(&mut theta, &grad, tcfg);
        if let Some(i) = theta.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient(params.name_of_flat(i).to_string()));
        }
        params.assign_flat(&theta)?;
        history.push(HistoryRow {
            step,
            loss: mean.loss,
            reward: mean.reward,
            a_term: mean.a_term,
            e_term: mean.e_term,
            grad_norm,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(TrainOutcome { params, history })
}

pub fn write_history<W: Write>(rows: &[HistoryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_history_file(rows: &[HistoryRow], path: &Path) -> Result<()> {
    write_history(rows, std::fs::File::create(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub mean_se: f64,
    pub std_se: f64,
    pub draws: usize,
}

impl EvalStats {
    pub fn from_samples(se: &[f64]) -> Self {
        let n = se.len().max(1) as f64;
        let mean = se.iter().sum::<f64>() / n;
        let var = se.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean_se: mean,
            std_se: var.sqrt(),
            draws: se.len(),
        }
    }
}

/// Held-out channel draws for evaluation, disjoint from training seeds.
pub fn test_set(sys: &SystemConfig, sigma_i_sq: f64, draws: usize, seed: u64) -> Result<Vec<ChannelRealization>> {
    (0..draws)
        .map(|i| generate_channel(sys, sigma_i_sq, derive_seed(seed, STREAM_EVAL, i as u64)))
        .collect()
}

/// Mean sum SE on the true channels of `set`, with hard neighbour sampling.
pub fn evaluate(model: &Model, params: &ParamSet, set: &[ChannelRealization], seed: u64) -> Result<EvalStats> {
    let se: Vec<f64> = set
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_NOISE ^ STREAM_EVAL, i as u64));
            let sol = model.predict(params, &r.h_observed, &mut rng)?;
            task_reward(&sol, &r.h_true, &model.sys)
        })
        .collect::<Result<_>>()?;
    Ok(EvalStats::from_samples(&se))
}

/// Evaluates an arbitrary solver on the true channels of `set`.
pub fn evaluate_solver<F>(set: &[ChannelRealization], sys: &SystemConfig, solve: F) -> Result<EvalStats>
where
    F: Fn(&ChannelRealization) -> Result<Solution> + Sync,
{
    let se: Vec<f64> = set
        .par_iter()
        .map(|r| task_reward(&solve(r)?, &r.h_true, sys))
        .collect::<Result<_>>()?;
    Ok(EvalStats::from_samples(&se))
}
