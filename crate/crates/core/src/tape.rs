//! Minimal reverse-mode differentiation over the primitives used by the
//! models and losses in this crate. Every node holds a flat `f64` vector.

use std::f64::consts::LN_2;
use std::sync::Arc;

use num_complex::Complex64;

use crate::channel::ChannelTensor;
use crate::error::{shape_err, Error, Result};
use crate::perm::Layout;

pub const LEAKY_SLOPE: f64 = 0.01;
const PROB_CLAMP: f64 = 1e-7;
const POWER_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Structured {
        layout: Arc<Layout>,
        params: Var,
        x: Var,
    },
    MaskedStructured {
        layout: Arc<Layout>,
        params: Var,
        x: Var,
        masks: Var,
    },
    PairLogits {
        layout: Arc<Layout>,
        params: Var,
        x: Var,
        channels: usize,
    },
    Linear {
        w: Var,
        x: Var,
        cin: usize,
        cout: usize,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    LeakyRelu(Var),
    Softplus(Var),
    Logistic(Var),
    AffineConst {
        x: Var,
        scale: f64,
    },
    Gather {
        x: Var,
        idx: Arc<Vec<usize>>,
    },
    Reparam {
        mu: Var,
        var: Var,
        eps: Vec<f64>,
    },
    KlBernoulli {
        logits: Var,
        alpha: f64,
    },
    MixtureLogRatio {
        z: Var,
        mu: Var,
        var: Var,
        weights: Var,
        means: Var,
        logvars: Var,
    },
    ProjectRows {
        x: Var,
        budget: f64,
        row_len: usize,
    },
    SumSePrecoding {
        w: Var,
        h: Arc<ChannelTensor>,
        noise: f64,
        alpha: Arc<Vec<f64>>,
    },
    PowerSoftmax {
        logits: Var,
        slack: Var,
        aps: usize,
        ues: usize,
        budget: f64,
    },
    SumSePower {
        p: Var,
        coef: Arc<Vec<Complex64>>,
        aps: usize,
        ues: usize,
        noise: f64,
        alpha: Arc<Vec<f64>>,
    },
    VertexAggregate {
        x: Var,
        masks: Option<Var>,
        aps: usize,
        ues: usize,
        channels: usize,
    },
    VertexPairLogits {
        x: Var,
        params: Var,
        aps: usize,
        ues: usize,
        channels: usize,
    },
    Add(Var, Var),
    Scale(Var, f64),
    SumAll(Var),
    SquaredError {
        x: Var,
        target: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

/// Gradients of a scalar output with respect to every node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` if nothing reached it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; len])
    }
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_normal(z: f64, mu: f64, var: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - (z - mu) * (z - mu) / (2.0 * var)
}

/// Softmax of the prior weight logits.
pub fn simplex(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Log-density of a Gaussian mixture and the component responsibilities.
fn mixture_log_density(z: f64, w: &[f64], means: &[f64], vars: &[f64], resp: &mut [f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for x in 0..w.len() {
        resp[x] = w[x].ln() + log_normal(z, means[x], vars[x]);
        max = max.max(resp[x]);
    }
    let s: f64 = resp.iter().map(|r| (r - max).exp()).sum();
    let lse = max + s.ln();
    resp.iter_mut().for_each(|r| *r = (*r - lse).exp());
    lse
}

/// Bernoulli probability from a logit, clamped away from 0 and 1.
pub fn clamped_prob(logit: f64) -> (f64, bool) {
    let p = logistic(logit);
    if p < PROB_CLAMP {
        (PROB_CLAMP, true)
    } else if p > 1.0 - PROB_CLAMP {
        (1.0 - PROB_CLAMP, true)
    } else {
        (p, false)
    }
}

/// `KL(B(phi) || B(alpha))` in nats, with both probabilities clamped.
pub fn kl_bernoulli(phi: f64, alpha: f64) -> f64 {
    let c = |p: f64| p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let (p, a) = (c(phi), c(alpha));
    p * (p / a).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - a)).ln()
}

/// Cross gains `t[k][i] = sum_m h_mk^H w_mi` with `w` interleaved re/im in
/// canonical `(m, k, n)` order.
fn gains_from_interleaved(h: &ChannelTensor, w: &[f64]) -> Vec<Complex64> {
    let (aps, ues, ant) = h.dims();
    let mut t = vec![Complex64::new(0.0, 0.0); ues * ues];
    for m in 0..aps {
        for k in 0..ues {
            let hv = h.vector(m, k);
            for i in 0..ues {
                let base = ((m * ues + i) * ant) * 2;
                let mut acc = Complex64::new(0.0, 0.0);
                for n in 0..ant {
                    acc += hv[n].conj() * Complex64::new(w[base + 2 * n], w[base + 2 * n + 1]);
                }
                t[k * ues + i] += acc;
            }
        }
    }
    t
}

/// Sum SE and `dSE / d|t_ki|^2` for cross gains `t`.
fn se_and_sensitivity(t: &[Complex64], ues: usize, alpha: &[f64], noise: f64) -> (f64, Vec<f64>) {
    let mut se = 0.0;
    let mut sens = vec![0.0; ues * ues];
    for k in 0..ues {
        let total: f64 = (0..ues).map(|i| t[k * ues + i].norm_sqr()).sum::<f64>() + noise;
        let interf = total - t[k * ues + k].norm_sqr();
        se += alpha[k] * (total / interf).log2();
        for i in 0..ues {
            let mut s = 1.0 / total;
            if i != k {
                s -= 1.0 / interf;
            }
            sens[k * ues + i] = alpha[k] * s / LN_2;
        }
    }
    (se, sens)
}

fn power_gains(p: &[f64], coef: &[Complex64], aps: usize, ues: usize) -> Vec<Complex64> {
    let mut t = vec![Complex64::new(0.0, 0.0); ues * ues];
    for m in 0..aps {
        for k in 0..ues {
            for i in 0..ues {
                t[k * ues + i] += coef[(m * ues + k) * ues + i] * p[m * ues + i].max(0.0).sqrt();
            }
        }
    }
    t
}

fn vertex_mask_index(aps: usize, ues: usize, centre: usize, nb: usize) -> usize {
    if centre < aps {
        centre * ues + nb
    } else {
        aps * ues + (centre - aps) * aps + nb
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn len_of(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    fn expect_len(&self, v: Var, len: usize) -> Result<()> {
        if self.len_of(v) != len {
            return Err(shape_err(len, self.len_of(v)));
        }
        Ok(())
    }

    pub fn leaf(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn structured(&mut self, layout: &Arc<Layout>, params: Var, x: Var) -> Result<Var> {
        let y = layout.apply(self.value(params), self.value(x))?;
        Ok(self.push(
            y,
            Op::Structured {
                layout: layout.clone(),
                params,
                x,
            },
        ))
    }

    pub fn masked_structured(
        &mut self,
        layout: &Arc<Layout>,
        params: Var,
        x: Var,
        masks: Var,
    ) -> Result<Var> {
        let y = layout.apply_masked(self.value(params), self.value(x), self.value(masks))?;
        Ok(self.push(
            y,
            Op::MaskedStructured {
                layout: layout.clone(),
                params,
                x,
                masks,
            },
        ))
    }

    pub fn pair_logits(&mut self, layout: &Arc<Layout>, params: Var, x: Var, channels: usize) -> Result<Var> {
        let y = layout.pair_logits(self.value(params), self.value(x), channels)?;
        Ok(self.push(
            y,
            Op::PairLogits {
                layout: layout.clone(),
                params,
                x,
                channels,
            },
        ))
    }

    /// Per-position dense map: `y[co, e] = sum_ci w[ci * cout + co] x[ci, e]`.
    pub fn linear(&mut self, w: Var, x: Var, cin: usize, cout: usize) -> Result<Var> {
        self.expect_len(w, cin * cout)?;
        let xv = self.value(x);
        if cin == 0 || xv.len() % cin != 0 {
            return Err(shape_err(format!("multiple of {cin}"), xv.len()));
        }
        let e_n = xv.len() / cin;
        let wv = self.value(w);
        let mut y = vec![0.0; cout * e_n];
        for ci in 0..cin {
            for co in 0..cout {
                let wc = wv[ci * cout + co];
                if wc == 0.0 {
                    continue;
                }
                for e in 0..e_n {
                    y[co * e_n + e] += wc * xv[ci * e_n + e];
                }
            }
        }
        Ok(self.push(y, Op::Linear { w, x, cin, cout }))
    }

    /// `y[c, e] = x[c, e] + b[c]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.len_of(b);
        let xv = self.value(x);
        if c == 0 || xv.len() % c != 0 {
            return Err(shape_err(format!("multiple of {c}"), xv.len()));
        }
        let e_n = xv.len() / c;
        let bv = self.value(b);
        let y = xv.iter().enumerate().map(|(i, v)| v + bv[i / e_n]).collect();
        Ok(self.push(y, Op::AddBias { x, b }))
    }

    pub fn leaky_relu(&mut self, x: Var) -> Var {
        let y = self
            .value(x)
            .iter()
            .map(|&v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
            .collect();
        self.push(y, Op::LeakyRelu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let y = self.value(x).iter().map(|&v| softplus(v)).collect();
        self.push(y, Op::Softplus(x))
    }

    pub fn logistic(&mut self, x: Var) -> Var {
        let y = self.value(x).iter().map(|&v| logistic(v)).collect();
        self.push(y, Op::Logistic(x))
    }

    /// `y = scale * x + shift`.
    pub fn affine_const(&mut self, x: Var, scale: f64, shift: &[f64]) -> Result<Var> {
        self.expect_len(x, shift.len())?;
        let y = self
            .value(x)
            .iter()
            .zip(shift)
            .map(|(v, s)| scale * v + s)
            .collect();
        Ok(self.push(y, Op::AffineConst { x, scale }))
    }

    /// `y[i] = x[idx[i]]`.
    pub fn gather(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let n = self.len_of(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(shape_err(format!("index < {n}"), bad));
        }
        let xv = self.value(x);
        let y = idx.iter().map(|&i| xv[i]).collect();
        Ok(self.push(y, Op::Gather { x, idx }))
    }

    /// `z = mu + sqrt(var) * eps`.
    pub fn reparam(&mut self, mu: Var, var: Var, eps: Vec<f64>) -> Result<Var> {
        let n = self.len_of(mu);
        self.expect_len(var, n)?;
        if eps.len() != n {
            return Err(shape_err(n, eps.len()));
        }
        let (m, v) = (self.value(mu), self.value(var));
        let y = (0..n).map(|i| m[i] + v[i].sqrt() * eps[i]).collect();
        Ok(self.push(y, Op::Reparam { mu, var, eps }))
    }

    /// `sum_i KL(B(logistic(l_i)) || B(alpha))`.
    pub fn kl_bernoulli_sum(&mut self, logits: Var, alpha: f64) -> Result<Var> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidConfig(format!("prior probability {alpha} not in (0,1)")));
        }
        let s = self
            .value(logits)
            .iter()
            .map(|&l| kl_bernoulli(clamped_prob(l).0, alpha))
            .sum();
        Ok(self.push(vec![s], Op::KlBernoulli { logits, alpha }))
    }

    /// `sum_i [log N(z_i; mu_i, var_i) - log sum_x w_x N(z_i; m_x, exp(lv_x))]`
    /// with `w = softmax(weights)`.
    pub fn mixture_log_ratio(
        &mut self,
        z: Var,
        mu: Var,
        var: Var,
        weights: Var,
        means: Var,
        logvars: Var,
    ) -> Result<Var> {
        let n = self.len_of(z);
        self.expect_len(mu, n)?;
        self.expect_len(var, n)?;
        let x = self.len_of(weights);
        self.expect_len(means, x)?;
        self.expect_len(logvars, x)?;
        let w = simplex(self.value(weights));
        let pm = self.value(means).to_vec();
        let pv: Vec<f64> = self.value(logvars).iter().map(|l| l.exp()).collect();
        let (zv, mv, vv) = (self.value(z), self.value(mu), self.value(var));
        let mut resp = vec![0.0; x];
        let mut s = 0.0;
        for i in 0..n {
            s += log_normal(zv[i], mv[i], vv[i]) - mixture_log_density(zv[i], &w, &pm, &pv, &mut resp);
        }
        Ok(self.push(
            vec![s],
            Op::MixtureLogRatio {
                z,
                mu,
                var,
                weights,
                means,
                logvars,
            },
        ))
    }

    /// Rescales each row of length `row_len` whose squared norm exceeds
    /// `budget` back onto the budget sphere.
    pub fn project_rows(&mut self, x: Var, budget: f64, row_len: usize) -> Result<Var> {
        let n = self.len_of(x);
        if row_len == 0 || n % row_len != 0 {
            return Err(shape_err(format!("multiple of {row_len}"), n));
        }
        let mut y = self.value(x).to_vec();
        for row in y.chunks_mut(row_len) {
            let p: f64 = row.iter().map(|v| v * v).sum();
            if p > budget {
                let s = (budget / p).sqrt();
                row.iter_mut().for_each(|v| *v *= s);
            }
        }
        Ok(self.push(y, Op::ProjectRows { x, budget, row_len }))
    }

    /// Weighted sum SE of an interleaved precoder evaluated on `h`.
    pub fn sum_se_precoding(
        &mut self,
        w: Var,
        h: Arc<ChannelTensor>,
        noise: f64,
        alpha: Arc<Vec<f64>>,
    ) -> Result<Var> {
        let (aps, ues, ant) = h.dims();
        self.expect_len(w, 2 * aps * ues * ant)?;
        if alpha.len() != ues {
            return Err(shape_err(ues, alpha.len()));
        }
        let t = gains_from_interleaved(&h, self.value(w));
        let (se, _) = se_and_sensitivity(&t, ues, &alpha, noise);
        Ok(self.push(
            vec![se],
            Op::SumSePrecoding {
                w,
                h,
                noise,
                alpha,
            },
        ))
    }

    /// Per-AP softmax over `K` UE logits and one shared slack logit, scaled
    /// by the AP budget.
    pub fn power_softmax(&mut self, logits: Var, slack: Var, aps: usize, ues: usize, budget: f64) -> Result<Var> {
        self.expect_len(logits, aps * ues)?;
        self.expect_len(slack, 1)?;
        let l = self.value(logits);
        let s = self.value(slack)[0];
        let mut p = vec![0.0; aps * ues];
        for m in 0..aps {
            let row = &l[m * ues..(m + 1) * ues];
            let max = row.iter().cloned().fold(s, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum::<f64>() + (s - max).exp();
            for k in 0..ues {
                p[m * ues + k] = budget * (row[k] - max).exp() / z;
            }
        }
        Ok(self.push(
            p,
            Op::PowerSoftmax {
                logits,
                slack,
                aps,
                ues,
                budget,
            },
        ))
    }

    /// Weighted sum SE for powers `p[m * K + i]` over basis coefficients
    /// `coef[(m * K + k) * K + i] = h_mk^H v_mi`.
    pub fn sum_se_power(
        &mut self,
        p: Var,
        coef: Arc<Vec<Complex64>>,
        aps: usize,
        ues: usize,
        noise: f64,
        alpha: Arc<Vec<f64>>,
    ) -> Result<Var> {
        self.expect_len(p, aps * ues)?;
        if coef.len() != aps * ues * ues {
            return Err(shape_err(aps * ues * ues, coef.len()));
        }
        let t = power_gains(self.value(p), &coef, aps, ues);
        let (se, _) = se_and_sensitivity(&t, ues, &alpha, noise);
        Ok(self.push(
            vec![se],
            Op::SumSePower {
                p,
                coef,
                aps,
                ues,
                noise,
                alpha,
            },
        ))
    }

    /// Mean over bipartite neighbours: APs average UE states and vice versa.
    /// `x` is `[C, M + K]`; masks (if any) are `M*K` AP-centred entries
    /// followed by `K*M` UE-centred entries.
    pub fn vertex_aggregate(
        &mut self,
        x: Var,
        masks: Option<Var>,
        aps: usize,
        ues: usize,
        channels: usize,
    ) -> Result<Var> {
        let v_n = aps + ues;
        self.expect_len(x, channels * v_n)?;
        if let Some(m) = masks {
            self.expect_len(m, 2 * aps * ues)?;
        }
        let xv = self.value(x);
        let mv = masks.map(|m| self.value(m));
        let mut y = vec![0.0; channels * v_n];
        for c in 0..channels {
            for v in 0..v_n {
                let (range, count) = if v < aps { (aps..v_n, ues) } else { (0..aps, aps) };
                let mut acc = 0.0;
                for (j, u) in range.enumerate() {
                    let w = mv.map_or(1.0, |m| m[vertex_mask_index(aps, ues, v, j)]);
                    acc += w * xv[c * v_n + u];
                }
                y[c * v_n + v] = acc / count as f64;
            }
        }
        Ok(self.push(
            y,
            Op::VertexAggregate {
                x,
                masks,
                aps,
                ues,
                channels,
            },
        ))
    }

    /// Bipartite neighbour-selection logits, laid out like vertex masks.
    /// Parameters: two groups `[u (C), v (C), b]`, for AP and UE centres.
    pub fn vertex_pair_logits(
        &mut self,
        x: Var,
        params: Var,
        aps: usize,
        ues: usize,
        channels: usize,
    ) -> Result<Var> {
        let v_n = aps + ues;
        self.expect_len(x, channels * v_n)?;
        self.expect_len(params, 2 * (2 * channels + 1))?;
        let xv = self.value(x);
        let pv = self.value(params);
        let norm = 1.0 / (channels as f64).sqrt();
        let width = 2 * channels + 1;
        let mut out = vec![0.0; 2 * aps * ues];
        for v in 0..v_n {
            let t = usize::from(v >= aps);
            let p = &pv[t * width..(t + 1) * width];
            let range = if v < aps { aps..v_n } else { 0..aps };
            let su: f64 = (0..channels).map(|c| p[c] * xv[c * v_n + v]).sum();
            for (j, u) in range.enumerate() {
                let sv: f64 = (0..channels).map(|c| p[channels + c] * xv[c * v_n + u]).sum();
                out[vertex_mask_index(aps, ues, v, j)] = (su + sv) * norm + p[2 * channels];
            }
        }
        Ok(self.push(
            out,
            Op::VertexPairLogits {
                x,
                params,
                aps,
                ues,
                channels,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_len(b, self.len_of(a))?;
        let y = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let y = self.value(x).iter().map(|v| v * s).collect();
        self.push(y, Op::Scale(x, s))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![s], Op::SumAll(x))
    }

    /// `sum_i (x_i - target_i)^2`.
    pub fn squared_error(&mut self, x: Var, target: Vec<f64>) -> Result<Var> {
        if target.len() != self.len_of(x) {
            return Err(shape_err(self.len_of(x), target.len()));
        }
        let s = self
            .value(x)
            .iter()
            .zip(&target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(self.push(vec![s], Op::SquaredError { x, target }))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.len_of(out) != 1 {
            return Err(shape_err("scalar output", self.len_of(out)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![1.0]);
        for id in (0..=out.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[id];
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, len: usize| -> usize {
            if grads[v.0].is_none() {
                grads[v.0] = Some(vec![0.0; len]);
            }
            v.0
        };
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                let i = acc(grads, v, self.len_of(v));
                grads[i].as_mut().unwrap()
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Structured { layout, params, x } => {
                let mut gx = vec![0.0; self.len_of(*x)];
                let mut gp = vec![0.0; self.len_of(*params)];
                layout.apply_backward(self.value(*params), self.value(*x), g, &mut gx, &mut gp)?;
                add_into(slot!(*x), &gx);
                add_into(slot!(*params), &gp);
            }
            Op::MaskedStructured {
                layout,
                params,
                x,
                masks,
            } => {
                let mut gx = vec![0.0; self.len_of(*x)];
                let mut gp = vec![0.0; self.len_of(*params)];
                let mut gm = vec![0.0; self.len_of(*masks)];
                layout.apply_masked_backward(
                    self.value(*params),
                    self.value(*x),
                    self.value(*masks),
                    g,
                    &mut gx,
                    &mut gp,
                    &mut gm,
                )?;
                add_into(slot!(*x), &gx);
                add_into(slot!(*params), &gp);
                add_into(slot!(*masks), &gm);
            }
            Op::PairLogits {
                layout,
                params,
                x,
                channels,
            } => {
                let mut gx = vec![0.0; self.len_of(*x)];
                let mut gp = vec![0.0; self.len_of(*params)];
                layout.pair_logits_backward(self.value(*params), self.value(*x), *channels, g, &mut gx, &mut gp)?;
                add_into(slot!(*x), &gx);
                add_into(slot!(*params), &gp);
            }
            Op::Linear { w, x, cin, cout } => {
                let (cin, cout) = (*cin, *cout);
                let xv = self.value(*x);
                let wv = self.value(*w);
                let e_n = xv.len() / cin;
                let mut gw = vec![0.0; cin * cout];
                let mut gx = vec![0.0; xv.len()];
                for ci in 0..cin {
                    for co in 0..cout {
                        let mut s = 0.0;
                        let wc = wv[ci * cout + co];
                        for e in 0..e_n {
                            let gv = g[co * e_n + e];
                            s += gv * xv[ci * e_n + e];
                            gx[ci * e_n + e] += wc * gv;
                        }
                        gw[ci * cout + co] = s;
                    }
                }
                add_into(slot!(*x), &gx);
                add_into(slot!(*w), &gw);
            }
            Op::AddBias { x, b } => {
                let c = self.len_of(*b);
                let e_n = g.len() / c;
                let gb: Vec<f64> = (0..c).map(|i| g[i * e_n..(i + 1) * e_n].iter().sum()).collect();
                add_into(slot!(*x), g);
                add_into(slot!(*b), &gb);
            }
            Op::LeakyRelu(x) => {
                let xv = self.value(*x);
                let gx: Vec<f64> = g
                    .iter()
                    .zip(xv)
                    .map(|(gi, &v)| if v > 0.0 { *gi } else { LEAKY_SLOPE * gi })
                    .collect();
                add_into(slot!(*x), &gx);
            }
            Op::Softplus(x) => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(self.value(*x))
                    .map(|(gi, &v)| gi * logistic(v))
                    .collect();
                add_into(slot!(*x), &gx);
            }
            Op::Logistic(x) => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(&node.value)
                    .map(|(gi, &s)| gi * s * (1.0 - s))
                    .collect();
                add_into(slot!(*x), &gx);
            }
            Op::AffineConst { x, scale } => {
                let gx: Vec<f64> = g.iter().map(|v| v * scale).collect();
                add_into(slot!(*x), &gx);
            }
            Op::Gather { x, idx } => {
                let gx = slot!(*x);
                for (gi, &i) in g.iter().zip(idx.iter()) {
                    gx[i] += gi;
                }
            }
            Op::Reparam { mu, var, eps } => {
                let vv = self.value(*var);
                let gv: Vec<f64> = (0..g.len())
                    .map(|i| {
                        if eps[i] == 0.0 {
                            0.0
                        } else {
                            g[i] * eps[i] / (2.0 * vv[i].sqrt())
                        }
                    })
                    .collect();
                add_into(slot!(*mu), g);
                add_into(slot!(*var), &gv);
            }
            Op::KlBernoulli { logits, alpha } => {
                let la = (alpha / (1.0 - alpha)).ln();
                let gl: Vec<f64> = self
                    .value(*logits)
                    .iter()
                    .map(|&l| {
                        let (p, clamped) = clamped_prob(l);
                        if clamped {
                            0.0
                        } else {
                            g[0] * ((p / (1.0 - p)).ln() - la) * p * (1.0 - p)
                        }
                    })
                    .collect();
                add_into(slot!(*logits), &gl);
            }
            Op::MixtureLogRatio {
                z,
                mu,
                var,
                weights,
                means,
                logvars,
            } => {
                let w = simplex(self.value(*weights));
                let pm = self.value(*means).to_vec();
                let pv: Vec<f64> = self.value(*logvars).iter().map(|l| l.exp()).collect();
                let xn = w.len();
                let (zv, mv, vv) = (self.value(*z), self.value(*mu), self.value(*var));
                let n = zv.len();
                let mut gz = vec![0.0; n];
                let mut gm = vec![0.0; n];
                let mut gvar = vec![0.0; n];
                let mut gw = vec![0.0; xn];
                let mut gpm = vec![0.0; xn];
                let mut gpl = vec![0.0; xn];
                let mut resp = vec![0.0; xn];
                for i in 0..n {
                    let d = zv[i] - mv[i];
                    mixture_log_density(zv[i], &w, &pm, &pv, &mut resp);
                    let mut dz_prior = 0.0;
                    for x in 0..xn {
                        let dx = zv[i] - pm[x];
                        dz_prior += resp[x] * (-dx / pv[x]);
                        gpm[x] -= g[0] * resp[x] * dx / pv[x];
                        gpl[x] -= g[0] * resp[x] * (-0.5 + dx * dx / (2.0 * pv[x]));
                        gw[x] -= g[0] * (resp[x] - w[x]);
                    }
                    gz[i] = g[0] * (-d / vv[i] - dz_prior);
                    gm[i] = g[0] * d / vv[i];
                    gvar[i] = g[0] * (-0.5 / vv[i] + d * d / (2.0 * vv[i] * vv[i]));
                }
                add_into(slot!(*z), &gz);
                add_into(slot!(*mu), &gm);
                add_into(slot!(*var), &gvar);
                add_into(slot!(*weights), &gw);
                add_into(slot!(*means), &gpm);
                add_into(slot!(*logvars), &gpl);
            }
            Op::ProjectRows { x, budget, row_len } => {
                let xv = self.value(*x);
                let mut gx = vec![0.0; xv.len()];
                for (r, (xr, gr)) in xv.chunks(*row_len).zip(g.chunks(*row_len)).enumerate() {
                    let p: f64 = xr.iter().map(|v| v * v).sum();
                    let out = &mut gx[r * row_len..(r + 1) * row_len];
                    if p > *budget {
                        let s = (budget / p).sqrt();
                        let dot: f64 = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                        let ds = -budget.sqrt() * p.powf(-1.5);
                        for j in 0..xr.len() {
                            out[j] = s * gr[j] + dot * ds * xr[j];
                        }
                    } else {
                        out.copy_from_slice(gr);
                    }
                }
                add_into(slot!(*x), &gx);
            }
            Op::SumSePrecoding { w, h, noise, alpha } => {
                let (aps, ues, ant) = h.dims();
                let t = gains_from_interleaved(h, self.value(*w));
                let (_, sens) = se_and_sensitivity(&t, ues, alpha, *noise);
                let mut gw = vec![0.0; self.len_of(*w)];
                for m in 0..aps {
                    for i in 0..ues {
                        let base = ((m * ues + i) * ant) * 2;
                        for k in 0..ues {
                            let coef = t[k * ues + i] * (2.0 * sens[k * ues + i] * g[0]);
                            let hv = h.vector(m, k);
                            for n in 0..ant {
                                let gc = hv[n] * coef;
                                gw[base + 2 * n] += gc.re;
                                gw[base + 2 * n + 1] += gc.im;
                            }
                        }
                    }
                }
                add_into(slot!(*w), &gw);
            }
            Op::PowerSoftmax {
                logits,
                slack,
                aps,
                ues,
                budget,
            } => {
                let (aps, ues) = (*aps, *ues);
                let p = &node.value;
                let mut gl = vec![0.0; aps * ues];
                let mut gs = 0.0;
                for m in 0..aps {
                    let probs: Vec<f64> = (0..ues).map(|k| p[m * ues + k] / budget).collect();
                    let slack_prob = 1.0 - probs.iter().sum::<f64>();
                    let mean: f64 = (0..ues).map(|k| probs[k] * g[m * ues + k]).sum();
                    for k in 0..ues {
                        gl[m * ues + k] = budget * probs[k] * (g[m * ues + k] - mean);
                    }
                    gs += budget * slack_prob * (-mean);
                }
                add_into(slot!(*logits), &gl);
                add_into(slot!(*slack), &[gs]);
            }
            Op::SumSePower {
                p,
                coef,
                aps,
                ues,
                noise,
                alpha,
            } => {
                let (aps, ues) = (*aps, *ues);
                let pv = self.value(*p);
                let t = power_gains(pv, coef, aps, ues);
                let (_, sens) = se_and_sensitivity(&t, ues, alpha, *noise);
                let mut gp = vec![0.0; aps * ues];
                for m in 0..aps {
                    for i in 0..ues {
                        let q = pv[m * ues + i].max(POWER_FLOOR).sqrt();
                        let mut s = 0.0;
                        for k in 0..ues {
                            s += sens[k * ues + i] * (t[k * ues + i].conj() * coef[(m * ues + k) * ues + i]).re;
                        }
                        gp[m * ues + i] = g[0] * s / q;
                    }
                }
                add_into(slot!(*p), &gp);
            }
            Op::VertexAggregate {
                x,
                masks,
                aps,
                ues,
                channels,
            } => {
                let (aps, ues, channels) = (*aps, *ues, *channels);
                let v_n = aps + ues;
                let xv = self.value(*x);
                let mv = masks.map(|m| self.value(m).to_vec());
                let mut gx = vec![0.0; xv.len()];
                let mut gm = vec![0.0; 2 * aps * ues];
                for c in 0..channels {
                    for v in 0..v_n {
                        let (range, count) = if v < aps { (aps..v_n, ues) } else { (0..aps, aps) };
                        let gv = g[c * v_n + v] / count as f64;
                        for (j, u) in range.enumerate() {
                            let mi = vertex_mask_index(aps, ues, v, j);
                            let w = mv.as_ref().map_or(1.0, |m| m[mi]);
                            gx[c * v_n + u] += w * gv;
                            gm[mi] += gv * xv[c * v_n + u];
                        }
                    }
                }
                add_into(slot!(*x), &gx);
                if let Some(m) = masks {
                    add_into(slot!(*m), &gm);
                }
            }
            Op::VertexPairLogits {
                x,
                params,
                aps,
                ues,
                channels,
            } => {
                let (aps, ues, channels) = (*aps, *ues, *channels);
                let v_n = aps + ues;
                let xv = self.value(*x);
                let pv = self.value(*params);
                let norm = 1.0 / (channels as f64).sqrt();
                let width = 2 * channels + 1;
                let mut gx = vec![0.0; xv.len()];
                let mut gp = vec![0.0; pv.len()];
                for v in 0..v_n {
                    let t = usize::from(v >= aps);
                    let range = if v < aps { aps..v_n } else { 0..aps };
                    for (j, u) in range.enumerate() {
                        let gi = g[vertex_mask_index(aps, ues, v, j)];
                        for c in 0..channels {
                            gp[t * width + c] += gi * xv[c * v_n + v] * norm;
                            gp[t * width + channels + c] += gi * xv[c * v_n + u] * norm;
                            gx[c * v_n + v] += gi * pv[t * width + c] * norm;
                            gx[c * v_n + u] += gi * pv[t * width + channels + c] * norm;
                        }
                        gp[t * width + 2 * channels] += gi;
                    }
                }
                add_into(slot!(*x), &gx);
                add_into(slot!(*params), &gp);
            }
            Op::Add(a, b) => {
                add_into(slot!(*a), g);
                add_into(slot!(*b), g);
            }
            Op::Scale(x, s) => {
                let gx: Vec<f64> = g.iter().map(|v| v * s).collect();
                add_into(slot!(*x), &gx);
            }
            Op::SumAll(x) => {
                let gx = vec![g[0]; self.len_of(*x)];
                add_into(slot!(*x), &gx);
            }
            Op::SquaredError { x, target } => {
                let gx: Vec<f64> = self
                    .value(*x)
                    .iter()
                    .zip(target)
                    .map(|(a, b)| 2.0 * g[0] * (a - b))
                    .collect();
                add_into(slot!(*x), &gx);
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_channel, SystemConfig};
    use crate::perm::PermStructure;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rv(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(lo..hi)).collect()
    }

    /// Central-difference check of `build` on every entry of every input.
    fn check(inputs: Vec<Vec<f64>>, build: impl Fn(&mut Tape, &[Var]) -> Var, tol: f64) {
        let eval = |vals: &[Vec<f64>]| -> f64 {
            let mut t = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|v| t.leaf(v.clone())).collect();
            let out = build(&mut t, &vars);
            t.scalar(out)
        };
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|v| t.leaf(v.clone())).collect();
        let out = build(&mut t, &vars);
        let grads = t.backward(out).unwrap();
        for (a, v) in vars.iter().enumerate() {
            let g = grads.get_or_zeros(*v, inputs[a].len());
            for i in 0..inputs[a].len() {
                let h = 1e-6 * inputs[a][i].abs().max(1e-3);
                let mut plus = inputs.clone();
                plus[a][i] += h;
                let mut minus = inputs.clone();
                minus[a][i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
                assert!(err < tol, "input {a}[{i}]: fd {fd} vs analytic {}", g[i]);
            }
        }
    }

    #[test]
    fn quadratic_toy() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, -2.0, 3.0]);
        let l = t.squared_error(x, vec![0.0, 0.0, 1.0]).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, -4.0, 4.0]);
    }

    #[test]
    fn elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rv(&mut rng, 6, -2.0, 2.0);
        let w = rv(&mut rng, 6, -1.0, 1.0);
        check(
            vec![x, w],
            |t, v| {
                let a = t.leaky_relu(v[0]);
                let b = t.softplus(v[0]);
                let c = t.logistic(v[1]);
                let d = t.add(a, b).unwrap();
                let e = t.add(d, c).unwrap();
                let f = t.scale(e, 1.5);
                let g = t.affine_const(f, -0.5, &[0.1; 6]).unwrap();
                t.squared_error(g, vec![0.3; 6]).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn linear_bias_gather() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rv(&mut rng, 3 * 4, -1.0, 1.0);
        let w = rv(&mut rng, 3 * 2, -1.0, 1.0);
        let b = rv(&mut rng, 2, -1.0, 1.0);
        let idx = Arc::new(vec![0, 3, 3, 7, 1]);
        check(
            vec![x, w, b],
            move |t, v| {
                let y = t.linear(v[1], v[0], 3, 2).unwrap();
                let y = t.add_bias(y, v[2]).unwrap();
                let y = t.gather(y, idx.clone()).unwrap();
                t.squared_error(y, vec![0.5; 5]).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn structured_and_masked() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = PermStructure::nested(&[2, 3, 2], &[(0, 2)], 2, 3, true).unwrap();
        let layout = Arc::new(Layout::new(s).unwrap());
        let x = rv(&mut rng, layout.input_len(), -1.0, 1.0);
        let p = rv(&mut rng, layout.param_len(), -1.0, 1.0);
        let m = rv(&mut rng, layout.mask_len(), 0.0, 1.0);
        let sp = rv(&mut rng, layout.pair_score_len(2), -1.0, 1.0);
        let l2 = layout.clone();
        check(
            vec![x, p, m, sp],
            move |t, v| {
                let a = t.structured(&l2, v[1], v[0]).unwrap();
                let lg = t.pair_logits(&l2, v[3], v[0], 2).unwrap();
                let sig = t.logistic(lg);
                let b = t.masked_structured(&l2, v[1], v[0], sig).unwrap();
                let c = t.masked_structured(&l2, v[1], v[0], v[2]).unwrap();
                let ab = t.add(a, b).unwrap();
                let abc = t.add(ab, c).unwrap();
                t.squared_error(abc, vec![0.1; 3 * 12]).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn dense_structured() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = PermStructure::non_nested(&[3, 2], 2, 2, false).unwrap();
        s.mean_aggregation = true;
        let layout = Arc::new(Layout::new(s).unwrap());
        let x = rv(&mut rng, layout.input_len(), -1.0, 1.0);
        let p = rv(&mut rng, layout.param_len(), -1.0, 1.0);
        check(
            vec![x, p],
            move |t, v| {
                let a = t.structured(&layout, v[1], v[0]).unwrap();
                t.squared_error(a, vec![0.2; 12]).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn reparam_kl_mixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mu = rv(&mut rng, 5, -1.0, 1.0);
        let pre = rv(&mut rng, 5, -1.0, 1.0);
        let eps = rv(&mut rng, 5, -2.0, 2.0);
        let logits = rv(&mut rng, 4, -3.0, 3.0);
        let wl = rv(&mut rng, 3, -1.0, 1.0);
        let pm = rv(&mut rng, 3, -1.0, 1.0);
        let plv = rv(&mut rng, 3, -0.5, 0.5);
        check(
            vec![mu, pre, logits, wl, pm, plv],
            move |t, v| {
                let var = t.softplus(v[1]);
                let z = t.reparam(v[0], var, eps.clone()).unwrap();
                let e = t.mixture_log_ratio(z, v[0], var, v[3], v[4], v[5]).unwrap();
                let k = t.kl_bernoulli_sum(v[2], 0.3).unwrap();
                let s = t.sum_all(z);
                let ek = t.add(e, k).unwrap();
                t.add(ek, s).unwrap()
            },
            1e-5,
        );
    }

    #[test]
    fn projection_inside_and_outside() {
        let x = vec![0.1, 0.2, -0.1, 3.0, -2.0, 1.0];
        check(
            vec![x],
            |t, v| {
                let y = t.project_rows(v[0], 1.0, 3).unwrap();
                t.squared_error(y, vec![0.3, -0.1, 0.2, 0.1, 0.4, -0.2]).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn se_precoding_gradient() {
        let cfg = SystemConfig::new(2, 3, 2);
        let r = generate_channel(&cfg, 0.0, 9).unwrap();
        let h = Arc::new(r.h_true);
        let noise = cfg.noise_power();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = rv(&mut rng, 2 * 12, -0.5, 0.5);
        let alpha = Arc::new(vec![1.0, 0.5, 2.0]);
        check(
            vec![w],
            move |t, v| t.sum_se_precoding(v[0], h.clone(), noise, alpha.clone()).unwrap(),
            1e-5,
        );
    }

    #[test]
    fn se_single_user_scalar_gradient() {
        // d/dw log2(1 + |h w|^2 / s) for real h, w.
        let (h, w, s) = (0.7, 0.4, 0.05);
        let ht = Arc::new(ChannelTensor::from_vec(1, 1, 1, vec![Complex64::new(h, 0.0)]).unwrap());
        let mut t = Tape::new();
        let wv = t.leaf(vec![w, 0.0]);
        let se = t.sum_se_precoding(wv, ht, s, Arc::new(vec![1.0])).unwrap();
        let g = t.backward(se).unwrap();
        let expect = 2.0 * h * h * w / (s + h * h * w * w) / LN_2;
        assert!((g.get(wv).unwrap()[0] - expect).abs() < 1e-12);
        assert!((t.scalar(se) - (1.0 + h * h * w * w / s).log2()).abs() < 1e-14);
    }

    #[test]
    fn power_head_and_se() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (aps, ues) = (3, 2);
        let coef: Vec<Complex64> = (0..aps * ues * ues)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let coef = Arc::new(coef);
        let logits = rv(&mut rng, aps * ues, -1.0, 1.0);
        check(
            vec![logits, vec![0.3]],
            move |t, v| {
                let p = t.power_softmax(v[0], v[1], aps, ues, 2.0).unwrap();
                t.sum_se_power(p, coef.clone(), aps, ues, 0.1, Arc::new(vec![1.0; ues])).unwrap()
            },
            1e-5,
        );
    }

    #[test]
    fn equal_logits_split_evenly() {
        let mut t = Tape::new();
        let l = t.leaf(vec![0.5; 6]);
        let s = t.leaf(vec![0.5]);
        let p = t.power_softmax(l, s, 2, 3, 4.0).unwrap();
        for v in t.value(p) {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn vertex_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (aps, ues, c) = (3, 2, 2);
        let x = rv(&mut rng, c * 5, -1.0, 1.0);
        let p = rv(&mut rng, 2 * (2 * c + 1), -1.0, 1.0);
        check(
            vec![x, p],
            move |t, v| {
                let lg = t.vertex_pair_logits(v[0], v[1], aps, ues, c).unwrap();
                let m = t.logistic(lg);
                let a = t.vertex_aggregate(v[0], Some(m), aps, ues, c).unwrap();
                let b = t.vertex_aggregate(v[0], None, aps, ues, c).unwrap();
                let ab = t.add(a, b).unwrap();
                t.squared_error(ab, vec![0.2; c * 5]).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn kl_values() {
        assert_eq!(kl_bernoulli(0.3, 0.3), 0.0);
        let oracle = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        assert!((kl_bernoulli(0.9, 0.5) - oracle).abs() < 1e-15);
        assert!((kl_bernoulli(0.9, 0.5) - 0.3681).abs() < 1e-4);
        assert!((kl_bernoulli(0.1, 0.5) - kl_bernoulli(0.9, 0.5)).abs() < 1e-15);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0]);
        assert!(t.backward(x).is_err());
    }
}
