//! Optimization-theory baselines: WMMSE joint precoding with per-AP power
//! constraints, local ZF and L-MMSE precoding directions, and WMMSE-style
//! power control over a fixed set of directions.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{
    cross_gains, project_powers, sum_se_from_gains, ChannelTensor, PowerSolution, PrecodingSolution,
    SystemConfig,
};
use crate::error::{Error, Result};

const RIDGE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WmmseConfig {
    pub max_iters: usize,
    /// Relative objective change that stops the iteration.
    pub tol: f64,
    /// Relative bracket width for the per-AP multiplier search.
    pub bisection_tol: f64,
}

impl Default for WmmseConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: 1e-6,
            bisection_tol: 1e-8,
        }
    }
}

impl WmmseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || !(self.tol > 0.0) || !(self.bisection_tol > 0.0) {
            return Err(Error::InvalidConfig(format!("bad WMMSE config {self:?}")));
        }
        Ok(())
    }
}

/// Output of an iterative baseline along with its objective history.
#[derive(Debug, Clone)]
pub struct WmmseReport<S> {
    pub solution: S,
    /// Objective before the first iteration followed by one entry per iteration.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Local precoding directions together with a rank flag.
#[derive(Debug, Clone)]
pub struct BasisResult {
    pub basis: ChannelTensor,
    /// Set when some `H_m` was rank deficient and a pseudo-inverse was used.
    pub rank_deficient: bool,
}

/// Precoding basis used by the power-control task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisKind {
    Zf,
    Lmmse,
}

impl BasisKind {
    pub fn build(self, h: &ChannelTensor, cfg: &SystemConfig) -> Result<ChannelTensor> {
        match self {
            BasisKind::Zf => zf_basis(h, cfg).map(|b| b.basis),
            BasisKind::Lmmse => lmmse_basis(h, cfg),
        }
    }
}

fn check_input(h: &ChannelTensor, cfg: &SystemConfig) -> Result<()> {
    cfg.validate()?;
    h.check_dims(cfg.aps, cfg.ues, cfg.antennas)?;
    if !h.is_finite() {
        return Err(Error::NonFinite("channel".into()));
    }
    Ok(())
}

fn normalize_or_fallback(v: &mut [Complex64], fallback: &[Complex64]) {
    let norm = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    if norm > 0.0 && norm.is_finite() {
        v.iter_mut().for_each(|c| *c /= norm);
        return;
    }
    let fnorm = fallback.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    if fnorm > 0.0 {
        for (x, f) in v.iter_mut().zip(fallback) {
            *x = f / fnorm;
        }
    } else {
        v.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        v[0] = Complex64::new(1.0, 0.0);
    }
}

fn stack_ap(h: &ChannelTensor, m: usize) -> DMatrix<Complex64> {
    let (_, ues, antennas) = h.dims();
    DMatrix::from_fn(antennas, ues, |n, k| h.get(m, k, n))
}

/// Matched-filter directions `h_mk / ||h_mk||`.
pub fn mr_basis(h: &ChannelTensor) -> ChannelTensor {
    let mut out = h.clone();
    let (aps, ues, _) = h.dims();
    for m in 0..aps {
        for k in 0..ues {
            normalize_or_fallback(out.vector_mut(m, k), h.vector(m, k));
        }
    }
    out
}

/// Per-AP zero-forcing directions: unit-normalized columns of
/// `H_m (H_m^H H_m)^{-1}`, falling back to the pseudo-inverse of `H_m^H` when
/// `N < K` or `H_m` is rank deficient.
pub fn zf_basis(h: &ChannelTensor, cfg: &SystemConfig) -> Result<BasisResult> {
    check_input(h, cfg)?;
    let (aps, ues, antennas) = h.dims();
    let mut basis = ChannelTensor::zeros(aps, ues, antennas);
    let mut rank_deficient = false;
    for m in 0..aps {
        let hm = stack_ap(h, m);
        let gram = hm.adjoint() * &hm;
        let solved = if antennas >= ues {
            let svals = gram.clone().singular_values();
            let max = svals.max();
            let min = svals.min();
            if max > 0.0 && min > 1e-12 * max {
                gram.cholesky().map(|c| &hm * c.inverse())
            } else {
                None
            }
        } else {
            None
        };
        let directions = match solved {
            Some(d) => d,
            None => {
                rank_deficient = true;
                hm.adjoint()
                    .pseudo_inverse(1e-12 * hm.norm().max(f64::MIN_POSITIVE))
                    .map_err(|e| Error::InvalidConfig(format!("pseudo-inverse failed: {e}")))?
            }
        };
        for k in 0..ues {
            let v = basis.vector_mut(m, k);
            for n in 0..antennas {
                v[n] = directions[(n, k)];
            }
            normalize_or_fallback(v, h.vector(m, k));
        }
    }
    Ok(BasisResult {
        basis,
        rank_deficient,
    })
}

/// Per-AP local MMSE directions `(sum_i pbar h_mi h_mi^H + sigma^2 I)^{-1} h_mk`
/// with the provisional power `pbar = p_m / K`.
pub fn lmmse_basis(h: &ChannelTensor, cfg: &SystemConfig) -> Result<ChannelTensor> {
    check_input(h, cfg)?;
    lmmse_basis_with_noise(h, cfg.p_max_watt / cfg.ues as f64, cfg.noise_power())
}

/// L-MMSE directions with explicit provisional power and regularizer.
pub fn lmmse_basis_with_noise(h: &ChannelTensor, pbar: f64, noise: f64) -> Result<ChannelTensor> {
    let (aps, ues, antennas) = h.dims();
    let mut basis = ChannelTensor::zeros(aps, ues, antennas);
    for m in 0..aps {
        let hm = stack_ap(h, m);
        let mut r = (&hm * hm.adjoint()) * Complex64::new(pbar, 0.0);
        for n in 0..antennas {
            r[(n, n)] += Complex64::new(noise, 0.0);
        }
        let scale = r.norm().max(f64::MIN_POSITIVE);
        for n in 0..antennas {
            r[(n, n)] += Complex64::new(RIDGE * scale, 0.0);
        }
        let chol = r
            .cholesky()
            .ok_or_else(|| Error::InvalidConfig("L-MMSE matrix not positive definite".into()))?;
        let sol = chol.solve(&hm);
        for k in 0..ues {
            let v = basis.vector_mut(m, k);
            for n in 0..antennas {
                v[n] = sol[(n, k)];
            }
            normalize_or_fallback(v, h.vector(m, k));
        }
    }
    Ok(basis)
}

/// Uniform power split `p_m / K` over a basis.
pub fn equal_power(basis: ChannelTensor, cfg: &SystemConfig) -> PowerSolution {
    let p = vec![cfg.p_max_watt / cfg.ues as f64; cfg.aps * cfg.ues];
    PowerSolution {
        p,
        precoder_basis: basis,
    }
}

/// Receive scalars and MSE weights of one WMMSE sweep, already multiplied by
/// the fairness weights: `a_k = alpha_k lambda_k |u_k|^2`, `b_k = alpha_k lambda_k u_k`.
fn mse_weights(t: &[Complex64], ues: usize, alpha: &[f64], noise: f64) -> (Vec<f64>, Vec<Complex64>) {
    let mut a = vec![0.0; ues];
    let mut b = vec![Complex64::new(0.0, 0.0); ues];
    for k in 0..ues {
        let total: f64 = (0..ues).map(|i| t[k * ues + i].norm_sqr()).sum::<f64>() + noise;
        let u = t[k * ues + k] / total;
        let e = (1.0 - t[k * ues + k].norm_sqr() / total).max(noise / total);
        let lambda = 1.0 / e;
        a[k] = alpha[k] * lambda * u.norm_sqr();
        b[k] = u * (alpha[k] * lambda);
    }
    (a, b)
}

/// Finds the smallest multiplier `mu >= 0` with `power(mu) <= budget`, where
/// `power` is non-increasing. Returns `0` when already feasible.
fn bisect_multiplier(power: impl Fn(f64) -> f64, budget: f64, upper_hint: f64, rel_tol: f64) -> f64 {
    if power(0.0) <= budget {
        return 0.0;
    }
    let mut hi = upper_hint.max(f64::MIN_POSITIVE);
    while power(hi) > budget {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    while hi - lo > rel_tol * hi {
        let mid = 0.5 * (lo + hi);
        if power(mid) > budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Joint WMMSE precoding under per-AP power constraints.
///
/// Each iteration updates the receive scalars and MSE weights, then sweeps the
/// APs once, solving each AP's transmit subproblem exactly by bisection on its
/// power multiplier. The sum-SE objective is therefore non-decreasing.
pub fn wmmse_precoding(
    h: &ChannelTensor,
    cfg: &SystemConfig,
    wcfg: &WmmseConfig,
) -> Result<WmmseReport<PrecodingSolution>> {
    check_input(h, cfg)?;
    wcfg.validate()?;
    let (aps, ues, antennas) = h.dims();
    let noise = cfg.noise_power();
    let alpha = &cfg.fairness_weights;

    let mut w = mr_basis(h);
    let init_scale = (cfg.p_max_watt / ues as f64).sqrt();
    w.as_mut_slice().iter_mut().for_each(|c| *c *= init_scale);

    let mut t = cross_gains(h, &w);
    let mut objective = sum_se_from_gains(&t, ues, alpha, noise);
    let mut trace = vec![objective];
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..wcfg.max_iters {
        iterations += 1;
        let (a, b) = mse_weights(&t, ues, alpha, noise);
        for m in 0..aps {
            let hm = stack_ap(h, m);
            let mut amat = DMatrix::<Complex64>::zeros(antennas, antennas);
            for k in 0..ues {
                let col = hm.column(k);
                amat += (&col * col.adjoint()) * Complex64::new(a[k], 0.0);
            }
            // Enforce exact Hermitian symmetry before the eigendecomposition.
            let amat = (&amat + amat.adjoint()) * Complex64::new(0.5, 0.0);

            let mut old = DMatrix::<Complex64>::zeros(antennas, ues);
            for i in 0..ues {
                for n in 0..antennas {
                    old[(n, i)] = w.get(m, i, n);
                }
            }
            // own[k][i] = h_mk^H w_mi
            let own = hm.adjoint() * &old;
            let mut c = DMatrix::<Complex64>::zeros(antennas, ues);
            for i in 0..ues {
                let mut ci = hm.column(i) * b[i];
                for k in 0..ues {
                    let rest = t[k * ues + i] - own[(k, i)];
                    ci -= hm.column(k) * (rest * a[k]);
                }
                c.set_column(i, &ci);
            }

            let eig = SymmetricEigen::new(amat.clone());
            let lambdas: Vec<f64> = eig.eigenvalues.iter().map(|x| x.max(0.0)).collect();
            let lmax = lambdas.iter().cloned().fold(0.0, f64::max);
            let ridge = RIDGE * lmax.max(f64::MIN_POSITIVE);
            let proj = eig.eigenvectors.adjoint() * &c;
            let proj_sq: Vec<f64> = (0..antennas)
                .map(|j| (0..ues).map(|i| proj[(j, i)].norm_sqr()).sum())
                .collect();
            let power = |mu: f64| -> f64 {
                lambdas
                    .iter()
                    .zip(&proj_sq)
                    .map(|(l, s)| s / (l + mu).max(ridge).powi(2))
                    .sum()
            };
            let c_norm: f64 = proj_sq.iter().sum();
            let mu = bisect_multiplier(
                power,
                cfg.p_max_watt,
                (c_norm / cfg.p_max_watt).sqrt(),
                wcfg.bisection_tol,
            );
            let mut scaled = proj.clone();
            for j in 0..antennas {
                let d = (lambdas[j] + mu).max(ridge);
                for i in 0..ues {
                    scaled[(j, i)] /= d;
                }
            }
            let new = &eig.eigenvectors * scaled;

            // Keep the old block if numerical error made the new one worse.
            let sub_obj = |x: &DMatrix<Complex64>| -> f64 {
                let ax = &amat * x;
                let mut acc = 0.0;
                for i in 0..ues {
                    acc += x.column(i).dotc(&ax.column(i)).re;
                    acc -= 2.0 * c.column(i).dotc(&x.column(i)).re;
                }
                acc
            };
            if sub_obj(&new) > sub_obj(&old) {
                continue;
            }
            let delta = &new - &old;
            let dt = hm.adjoint() * &delta;
            for k in 0..ues {
                for i in 0..ues {
                    t[k * ues + i] += dt[(k, i)];
                }
            }
            for i in 0..ues {
                for n in 0..antennas {
                    w.set(m, i, n, new[(n, i)]);
                }
            }
        }
        t = cross_gains(h, &w);
        let next = sum_se_from_gains(&t, ues, alpha, noise);
        trace.push(next);
        let change = (next - objective).abs();
        objective = next;
        if change <= wcfg.tol * objective.abs().max(1e-12) {
            converged = true;
            break;
        }
    }

    // Clean up any bisection overshoot so the output is exactly feasible.
    let solution = crate::channel::project_precoding(&PrecodingSolution { w }, cfg)?;
    Ok(WmmseReport {
        solution,
        objective_trace: trace,
        iterations,
        converged,
    })
}

/// Coefficients `c[m][k][i] = h_mk^H v_mi`, row-major `[M, K, K]`.
pub fn basis_coefficients(h: &ChannelTensor, basis: &ChannelTensor) -> Vec<Complex64> {
    let (aps, ues, _) = h.dims();
    let mut c = vec![Complex64::new(0.0, 0.0); aps * ues * ues];
    for m in 0..aps {
        for k in 0..ues {
            let hv = h.vector(m, k);
            for i in 0..ues {
                let v = basis.vector(m, i);
                c[(m * ues + k) * ues + i] = hv.iter().zip(v).map(|(a, b)| a.conj() * b).sum();
            }
        }
    }
    c
}

/// WMMSE-style power control over fixed directions.
///
/// Works on amplitudes `q_mk = sqrt(p_mk) >= 0`; each AP's subproblem is
/// separable across UEs and is solved exactly with one multiplier.
pub fn wmmse_power(
    h: &ChannelTensor,
    basis: &ChannelTensor,
    cfg: &SystemConfig,
    wcfg: &WmmseConfig,
) -> Result<WmmseReport<PowerSolution>> {
    check_input(h, cfg)?;
    wcfg.validate()?;
    basis.check_dims(cfg.aps, cfg.ues, cfg.antennas)?;
    let (aps, ues, _) = h.dims();
    let noise = cfg.noise_power();
    let alpha = &cfg.fairness_weights;
    let coef = basis_coefficients(h, basis);
    let cf = |m: usize, k: usize, i: usize| coef[(m * ues + k) * ues + i];

    let gains = |q: &[f64]| -> Vec<Complex64> {
        let mut t = vec![Complex64::new(0.0, 0.0); ues * ues];
        for m in 0..aps {
            for k in 0..ues {
                for i in 0..ues {
                    t[k * ues + i] += cf(m, k, i) * q[m * ues + i];
                }
            }
        }
        t
    };

    let mut q = vec![(cfg.p_max_watt / ues as f64).sqrt(); aps * ues];
    let mut t = gains(&q);
    let mut objective = sum_se_from_gains(&t, ues, alpha, noise);
    let mut trace = vec![objective];
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..wcfg.max_iters {
        iterations += 1;
        let (a, b) = mse_weights(&t, ues, alpha, noise);
        for m in 0..aps {
            let mut quad = vec![0.0; ues];
            let mut raw = vec![0.0; ues];
            let mut lin = vec![0.0; ues];
            for i in 0..ues {
                let qi = q[m * ues + i];
                quad[i] = (0..ues).map(|k| a[k] * cf(m, k, i).norm_sqr()).sum();
                let mut r = (b[i].conj() * cf(m, i, i)).re;
                for k in 0..ues {
                    let rest = t[k * ues + i] - cf(m, k, i) * qi;
                    r -= a[k] * (cf(m, k, i).conj() * rest).re;
                }
                raw[i] = r;
                lin[i] = r.max(0.0);
            }
            let lmax = quad.iter().cloned().fold(0.0, f64::max);
            let ridge = RIDGE * lmax.max(f64::MIN_POSITIVE);
            let power = |mu: f64| -> f64 {
                (0..ues)
                    .map(|i| (lin[i] / (quad[i] + mu).max(ridge)).powi(2))
                    .sum()
            };
            let lin_norm: f64 = lin.iter().map(|x| x * x).sum();
            let mu = bisect_multiplier(
                power,
                cfg.p_max_watt,
                (lin_norm / cfg.p_max_watt).sqrt(),
                wcfg.bisection_tol,
            );
            let sub_obj = |qs: &[f64]| -> f64 {
                (0..ues)
                    .map(|i| quad[i] * qs[i] * qs[i] - 2.0 * raw[i] * qs[i])
                    .sum()
            };
            let new: Vec<f64> = (0..ues)
                .map(|i| lin[i] / (quad[i] + mu).max(ridge))
                .collect();
            let old: Vec<f64> = q[m * ues..(m + 1) * ues].to_vec();
            if sub_obj(&new) > sub_obj(&old) {
                continue;
            }
            for i in 0..ues {
                let dq = new[i] - old[i];
                for k in 0..ues {
                    t[k * ues + i] += cf(m, k, i) * dq;
                }
                q[m * ues + i] = new[i];
            }
        }
        t = gains(&q);
        let next = sum_se_from_gains(&t, ues, alpha, noise);
        trace.push(next);
        let change = (next - objective).abs();
        objective = next;
        if change <= wcfg.tol * objective.abs().max(1e-12) {
            converged = true;
            break;
        }
    }

    let p: Vec<f64> = q.iter().map(|x| x * x).collect();
    let p = project_powers(&p, cfg)?;
    Ok(WmmseReport {
        solution: PowerSolution {
            p,
            precoder_basis: basis.clone(),
        },
        objective_trace: trace,
        iterations,
        converged,
    })
}

/// Dense column vector view used by tests and the oracle helpers.
pub fn column(h: &ChannelTensor, m: usize, k: usize) -> DVector<Complex64> {
    DVector::from_column_slice(h.vector(m, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_channel, sum_se_power, sum_se_precoding};

    fn feasible(w: &ChannelTensor, cfg: &SystemConfig) -> bool {
        (0..cfg.aps).all(|m| w.ap_power(m) <= cfg.p_max_watt + 1e-9)
    }

    #[test]
    fn wmmse_single_user_closed_form() {
        let cfg = SystemConfig::new(1, 1, 1);
        for seed in 0..5 {
            let r = generate_channel(&cfg, 0.0, seed).unwrap();
            let rep = wmmse_precoding(&r.h_true, &cfg, &WmmseConfig::default()).unwrap();
            let se = sum_se_precoding(&r.h_true, &rep.solution, &cfg).unwrap();
            let g = r.h_true.get(0, 0, 0).norm_sqr();
            let expect = (1.0 + cfg.p_max_watt * g / cfg.noise_power()).log2();
            assert!((se - expect).abs() < 1e-9, "{se} vs {expect}");
        }
    }

    #[test]
    fn wmmse_monotone_and_feasible() {
        let cfg = SystemConfig::new(4, 2, 2);
        for seed in 0..10 {
            let r = generate_channel(&cfg, 0.0, seed).unwrap();
            let rep = wmmse_precoding(&r.h_true, &cfg, &WmmseConfig::default()).unwrap();
            for pair in rep.objective_trace.windows(2) {
                assert!(pair[1] >= pair[0] - 1e-8, "{pair:?}");
            }
            assert!(feasible(&rep.solution.w, &cfg));
        }
    }

    #[test]
    fn zf_single_user_is_matched_filter() {
        let cfg = SystemConfig::new(2, 1, 3);
        let r = generate_channel(&cfg, 0.0, 1).unwrap();
        let zf = zf_basis(&r.h_true, &cfg).unwrap();
        assert!(!zf.rank_deficient);
        let mr = mr_basis(&r.h_true);
        for (a, b) in zf.basis.as_slice().iter().zip(mr.as_slice()) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn zf_orthogonal_columns_match_matched_filter() {
        let cfg = SystemConfig::new(1, 2, 3);
        let c = |re: f64, im: f64| Complex64::new(re, im);
        let h = ChannelTensor::from_vec(
            1,
            2,
            3,
            vec![c(1.0, 1.0), c(0.0, 0.0), c(2.0, 0.0), c(0.0, 0.0), c(0.0, 3.0), c(0.0, 0.0)],
        )
        .unwrap();
        let zf = zf_basis(&h, &cfg).unwrap();
        let mr = mr_basis(&h);
        for (a, b) in zf.basis.as_slice().iter().zip(mr.as_slice()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn zf_nulls_interference() {
        let cfg = SystemConfig::new(3, 2, 4);
        for seed in 0..5 {
            let r = generate_channel(&cfg, 0.0, seed).unwrap();
            // Normalize the scale so the leakage bound is meaningful.
            let mut h = r.h_true.clone();
            let rms = (h.as_slice().iter().map(|c| c.norm_sqr()).sum::<f64>() / 24.0).sqrt();
            h.as_mut_slice().iter_mut().for_each(|c| *c /= rms);
            let zf = zf_basis(&h, &cfg).unwrap();
            for m in 0..3 {
                for k in 0..2 {
                    let v = zf.basis.vector(m, k);
                    let norm: f64 = v.iter().map(|c| c.norm_sqr()).sum();
                    assert!((norm - 1.0).abs() < 1e-9);
                    for i in 0..2 {
                        if i == k {
                            continue;
                        }
                        let leak: Complex64 =
                            h.vector(m, i).iter().zip(v).map(|(a, b)| a.conj() * b).sum();
                        assert!(leak.norm() < 1e-9, "leak {}", leak.norm());
                    }
                }
            }
        }
    }

    #[test]
    fn zf_rank_deficient_uses_pseudo_inverse() {
        let cfg = SystemConfig::new(2, 3, 2);
        let r = generate_channel(&cfg, 0.0, 4).unwrap();
        let zf = zf_basis(&r.h_true, &cfg).unwrap();
        assert!(zf.rank_deficient);
        for m in 0..2 {
            for k in 0..3 {
                let norm: f64 = zf.basis.vector(m, k).iter().map(|c| c.norm_sqr()).sum();
                assert!((norm - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn lmmse_limits_are_matched_filter() {
        let cfg = SystemConfig::new(2, 3, 4);
        let r = generate_channel(&cfg, 0.0, 8).unwrap();
        let mr = mr_basis(&r.h_true);
        // Regularization dominates.
        let big = lmmse_basis_with_noise(&r.h_true, 1.0, 1e6).unwrap();
        for (a, b) in big.as_slice().iter().zip(mr.as_slice()) {
            assert!((a - b).norm() < 1e-9);
        }
        // A single UE sees no interference, so any regularizer keeps the direction.
        let cfg1 = SystemConfig::new(2, 1, 4);
        let r1 = generate_channel(&cfg1, 0.0, 8).unwrap();
        let g = r1.h_true.as_slice().iter().map(|c| c.norm_sqr()).fold(0.0, f64::max);
        let small = lmmse_basis_with_noise(&r1.h_true, 1.0, 1e-3 * g).unwrap();
        let mr1 = mr_basis(&r1.h_true);
        for (a, b) in small.as_slice().iter().zip(mr1.as_slice()) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn wmmse_power_single_user_full_power() {
        let cfg = SystemConfig::new(3, 1, 2);
        let r = generate_channel(&cfg, 0.0, 2).unwrap();
        let basis = mr_basis(&r.h_true);
        let rep = wmmse_power(&r.h_true, &basis, &cfg, &WmmseConfig::default()).unwrap();
        for p in &rep.solution.p {
            assert!((p - cfg.p_max_watt).abs() < 1e-6, "{p}");
        }
    }

    #[test]
    fn wmmse_power_monotone_and_feasible() {
        let cfg = SystemConfig::new(4, 3, 4);
        for seed in 0..10 {
            let r = generate_channel(&cfg, 0.0, seed).unwrap();
            let basis = lmmse_basis(&r.h_true, &cfg).unwrap();
            let rep = wmmse_power(&r.h_true, &basis, &cfg, &WmmseConfig::default()).unwrap();
            for pair in rep.objective_trace.windows(2) {
                assert!(pair[1] >= pair[0] - 1e-8, "{pair:?}");
            }
            for row in rep.solution.p.chunks(3) {
                assert!(row.iter().all(|&p| p >= 0.0));
                assert!(row.iter().sum::<f64>() <= cfg.p_max_watt + 1e-9);
            }
            let se = sum_se_power(&r.h_true, &rep.solution, &cfg).unwrap();
            let eq = sum_se_power(&r.h_true, &equal_power(basis, &cfg), &cfg).unwrap();
            assert!(se >= eq - 1e-9);
        }
    }
}
