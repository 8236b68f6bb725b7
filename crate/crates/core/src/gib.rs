//! Information-bottleneck objectives: Bernoulli-KL structure term, Gaussian
//! mixture density-ratio representation term, task reward and the assembled
//! training loss.

use serde::{Deserialize, Serialize};

use crate::channel::{sum_se_power, sum_se_precoding, ChannelTensor, PowerSolution, PrecodingSolution, SystemConfig};
use crate::error::{Error, Result};
use crate::tape::simplex;

pub use crate::tape::kl_bernoulli;

/// Which channel the training reward is computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EvalChannel {
    /// The true channel; the network still sees the observed one.
    #[default]
    True,
    Observed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GibConfig {
    pub beta: f64,
    /// Bernoulli prior probability.
    pub alpha: f64,
    pub mixture_components: usize,
    /// 1-based layers with Gaussian representations.
    pub stochastic_layers: Vec<usize>,
    /// 1-based layers with sampled neighbour subsets.
    pub sampling_layers: Vec<usize>,
    /// Binary-concrete relaxation temperature.
    pub temperature: f64,
    #[serde(default)]
    pub eval_channel: EvalChannel,
}

impl Default for GibConfig {
    fn default() -> Self {
        Self {
            beta: 1e-4,
            alpha: 0.5,
            mixture_components: 5,
            stochastic_layers: Vec::new(),
            sampling_layers: Vec::new(),
            temperature: 0.5,
            eval_channel: EvalChannel::True,
        }
    }
}

impl GibConfig {
    /// Representation noise on the last layer only.
    pub fn representation(layers: usize) -> Self {
        Self {
            stochastic_layers: vec![layers],
            ..Self::default()
        }
    }

    /// Representation noise on the last layer and neighbour sampling everywhere.
    pub fn structure_and_representation(layers: usize) -> Self {
        Self {
            stochastic_layers: vec![layers],
            sampling_layers: (1..=layers).collect(),
            ..Self::default()
        }
    }

    pub fn is_stochastic(&self, layer: usize) -> bool {
        self.stochastic_layers.contains(&layer)
    }

    pub fn is_sampling(&self, layer: usize) -> bool {
        self.sampling_layers.contains(&layer)
    }

    /// Checks parameter ranges and the index-set rule for an `L`-layer model:
    /// the representation set is nonempty, and every layer after its largest
    /// index samples neighbour subsets.
    pub fn validate(&self, layers: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0,1), got {}", self.alpha));
        }
        if self.mixture_components == 0 {
            return bad("mixture needs at least one component".into());
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive".into());
        }
        let in_range = |s: &[usize]| s.iter().all(|&l| l >= 1 && l <= layers);
        if !in_range(&self.stochastic_layers) || !in_range(&self.sampling_layers) {
            return bad(format!("layer index outside 1..={layers}"));
        }
        let Some(&top) = self.stochastic_layers.iter().max() else {
            return bad("representation layer set is empty".into());
        };
        if let Some(l) = (top + 1..=layers).find(|l| !self.sampling_layers.contains(l)) {
            return bad(format!(
                "layer {l} follows the last representation layer {top} but does not sample neighbours"
            ));
        }
        Ok(())
    }
}

/// Trainable Gaussian-mixture prior; weights are a softmax of free logits so
/// they stay on the simplex under any update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixturePrior {
    pub weight_logits: Vec<f64>,
    pub means: Vec<f64>,
    pub log_vars: Vec<f64>,
}

impl MixturePrior {
    /// Zero means, unit variances and uniform weights.
    pub fn standard(components: usize) -> Self {
        Self {
            weight_logits: vec![0.0; components],
            means: vec![0.0; components],
            log_vars: vec![0.0; components],
        }
    }

    pub fn single(mean: f64, var: f64) -> Self {
        Self {
            weight_logits: vec![0.0],
            means: vec![mean],
            log_vars: vec![var.ln()],
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        simplex(&self.weight_logits)
    }

    pub fn variances(&self) -> Vec<f64> {
        self.log_vars.iter().map(|l| l.exp()).collect()
    }

    pub fn log_density(&self, z: f64) -> f64 {
        let w = self.weights();
        let v = self.variances();
        let terms: Vec<f64> = (0..w.len())
            .map(|x| w[x].ln() + log_normal(z, self.means[x], v[x]))
            .collect();
        let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
    }
}

pub fn log_normal(z: f64, mu: f64, var: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - (z - mu) * (z - mu) / (2.0 * var)
}

/// Structure term: KL of every sampled neighbour indicator against the prior,
/// summed over all traces passed in.
pub fn a_term<'a>(phis: impl IntoIterator<Item = &'a [f64]>, alpha: f64) -> f64 {
    phis.into_iter()
        .flat_map(|p| p.iter())
        .map(|&p| kl_bernoulli(p, alpha))
        .sum()
}

/// Representation term: single-sample density ratio
/// `log N(z; mu, var) - log sum_x w_x N(z; mu_x, var_x)`, summed over entries.
pub fn e_term(mu: &[f64], var: &[f64], z: &[f64], prior: &MixturePrior) -> Result<f64> {
    if mu.len() != var.len() || mu.len() != z.len() {
        return Err(crate::error::shape_err(mu.len(), var.len().max(z.len())));
    }
    let mut s = 0.0;
    for i in 0..mu.len() {
        if !(var[i] > 0.0) {
            return Err(Error::InvalidConfig(format!("variance {} at entry {i}", var[i])));
        }
        s += log_normal(z[i], mu[i], var[i]) - prior.log_density(z[i]);
    }
    if !s.is_finite() {
        return Err(Error::NonFinite("representation term".into()));
    }
    Ok(s)
}

/// `KL(N(mu, var) || N(mu0, var0))` in nats.
pub fn gaussian_kl(mu: f64, var: f64, mu0: f64, var0: f64) -> f64 {
    0.5 * ((var0 / var).ln() + (var + (mu - mu0).powi(2)) / var0 - 1.0)
}

/// Output of a model head.
#[derive(Debug, Clone, PartialEq)]
pub enum Solution {
    Precoding(PrecodingSolution),
    Power(PowerSolution),
}

/// How the task part of the loss is formed.
#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    /// Maximize sum SE on the evaluation channel.
    Unsupervised,
    /// Regress the raw head output onto a target (e.g. WMMSE precoders).
    Supervised { target: Vec<f64> },
}

/// Sum SE of a solution on `h_eval`.
pub fn task_reward(sol: &Solution, h_eval: &ChannelTensor, cfg: &SystemConfig) -> Result<f64> {
    match sol {
        Solution::Precoding(w) => sum_se_precoding(h_eval, w, cfg),
        Solution::Power(p) => sum_se_power(h_eval, p, cfg),
    }
}

/// Squared-error loss used in supervised mode.
pub fn supervised_loss(output: &[f64], target: &[f64]) -> Result<f64> {
    if output.len() != target.len() {
        return Err(crate::error::shape_err(target.len(), output.len()));
    }
    Ok(output.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum())
}

/// `-reward + beta * (a + e)`.
pub fn total_loss(reward: f64, a: f64, e: f64, beta: f64) -> f64 {
    -reward + beta * (a + e)
}
