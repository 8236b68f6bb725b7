//! Cell-free massive MIMO environment.
//!
//! APs and single-antenna UEs are dropped uniformly in a square with
//! wrap-around (toroidal) distances. Each AP-UE link gets a large-scale gain
//! from a one-slope pathloss law and i.i.d. Rayleigh small-scale fading per
//! AP antenna. The observed channel is the true channel plus circular complex
//! Gaussian CSI error.
//!
//! Spectral efficiency follows the coherent joint-transmission model
//! `y_k = sum_m sum_i h_mk^H w_mi s_i + n_k`.

use std::io::{Read, Write};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Pathloss intercept in dB at 1 m.
pub const PATHLOSS_INTERCEPT_DB: f64 = -30.5;
/// Pathloss slope in dB per decade of distance.
pub const PATHLOSS_SLOPE_DB: f64 = 36.7;
/// Distances are clamped to this minimum before applying the pathloss law.
pub const MIN_DISTANCE_M: f64 = 10.0;

/// How the CSI error variance is scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CsiReference {
    /// Error entries have variance exactly `sigma_i_sq` (same units as `h`).
    Absolute,
    /// Error on link (m, k) has variance `sigma_i_sq * beta_mk`, so the CSI
    /// signal-to-error ratio is `1 / sigma_i_sq` on every link.
    #[default]
    LargeScaleGain,
}

/// Static description of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub aps: usize,
    pub ues: usize,
    pub antennas: usize,
    /// Side of the square deployment area in meters.
    pub area_side: f64,
    pub noise_power_dbm: f64,
    pub bandwidth_hz: f64,
    /// Maximum transmit power per AP in watts.
    pub p_max_watt: f64,
    /// Per-UE fairness weights in `[0, 1]`.
    pub fairness_weights: Vec<f64>,
    /// Standard deviation of log-normal shadowing in dB, `None` disables it.
    #[serde(default)]
    pub shadow_fading_db: Option<f64>,
    #[serde(default)]
    pub csi_reference: CsiReference,
}

impl SystemConfig {
    pub fn new(aps: usize, ues: usize, antennas: usize) -> Self {
        Self {
            aps,
            ues,
            antennas,
            area_side: 1000.0,
            noise_power_dbm: -94.0,
            bandwidth_hz: 20e6,
            p_max_watt: 1.0,
            fairness_weights: vec![1.0; ues],
            shadow_fading_db: None,
            csi_reference: CsiReference::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.aps == 0 || self.ues == 0 || self.antennas == 0 {
            return Err(Error::InvalidConfig(format!(
                "M, K, N must be >= 1 (got {}, {}, {})",
                self.aps, self.ues, self.antennas
            )));
        }
        if !(self.p_max_watt > 0.0 && self.p_max_watt.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "p_max_watt must be positive, got {}",
                self.p_max_watt
            )));
        }
        if !(self.area_side > 0.0 && self.area_side.is_finite()) {
            return Err(Error::InvalidConfig("area_side must be positive".into()));
        }
        if !self.noise_power_dbm.is_finite() {
            return Err(Error::InvalidConfig("noise_power_dbm must be finite".into()));
        }
        if self.fairness_weights.len() != self.ues {
            return Err(Error::InvalidConfig(format!(
                "expected {} fairness weights, got {}",
                self.ues,
                self.fairness_weights.len()
            )));
        }
        if let Some(a) = self
            .fairness_weights
            .iter()
            .find(|a| !(0.0..=1.0).contains(*a))
        {
            return Err(Error::InvalidConfig(format!(
                "fairness weight {a} outside [0, 1]"
            )));
        }
        Ok(())
    }

    /// Receiver noise power in watts.
    pub fn noise_power(&self) -> f64 {
        dbm_to_watt(self.noise_power_dbm)
    }

    /// Converts a sum SE into throughput in bits per second.
    pub fn throughput_bps(&self, sum_se: f64) -> f64 {
        sum_se * self.bandwidth_hz
    }

    /// The same configuration with different set sizes.
    pub fn resized(&self, aps: usize, ues: usize, antennas: usize) -> Self {
        let mut cfg = self.clone();
        cfg.aps = aps;
        cfg.ues = ues;
        cfg.antennas = antennas;
        cfg.fairness_weights = vec![1.0; ues];
        cfg
    }
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self::new(10, 4, 4)
    }
}

pub fn dbm_to_watt(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

/// Large-scale gain (linear) at distance `d` meters.
pub fn pathloss_gain(d: f64) -> f64 {
    let d = d.max(MIN_DISTANCE_M);
    10f64.powf((PATHLOSS_INTERCEPT_DB - PATHLOSS_SLOPE_DB * d.log10()) / 10.0)
}

/// Minimum-image distance on a square torus of side `side`.
pub fn wrapped_distance(a: (f64, f64), b: (f64, f64), side: f64) -> f64 {
    let wrap = |u: f64, v: f64| {
        let d = (u - v).abs() % side;
        d.min(side - d)
    };
    let dx = wrap(a.0, b.0);
    let dy = wrap(a.1, b.1);
    (dx * dx + dy * dy).sqrt()
}

/// Complex tensor indexed `[ap, ue, antenna]`; `h_mk` is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelTensor {
    aps: usize,
    ues: usize,
    antennas: usize,
    data: Vec<Complex64>,
}

impl ChannelTensor {
    pub fn zeros(aps: usize, ues: usize, antennas: usize) -> Self {
        Self {
            aps,
            ues,
            antennas,
            data: vec![Complex64::new(0.0, 0.0); aps * ues * antennas],
        }
    }

    pub fn from_vec(aps: usize, ues: usize, antennas: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != aps * ues * antennas {
            return Err(shape_err(aps * ues * antennas, data.len()));
        }
        Ok(Self {
            aps,
            ues,
            antennas,
            data,
        })
    }

    pub fn from_fn(
        aps: usize,
        ues: usize,
        antennas: usize,
        mut f: impl FnMut(usize, usize, usize) -> Complex64,
    ) -> Self {
        let mut data = Vec::with_capacity(aps * ues * antennas);
        for m in 0..aps {
            for k in 0..ues {
                for n in 0..antennas {
                    data.push(f(m, k, n));
                }
            }
        }
        Self {
            aps,
            ues,
            antennas,
            data,
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.aps, self.ues, self.antennas)
    }

    pub fn aps(&self) -> usize {
        self.aps
    }

    pub fn ues(&self) -> usize {
        self.ues
    }

    pub fn antennas(&self) -> usize {
        self.antennas
    }

    #[inline]
    pub fn index(&self, m: usize, k: usize, n: usize) -> usize {
        (m * self.ues + k) * self.antennas + n
    }

    #[inline]
    pub fn get(&self, m: usize, k: usize, n: usize) -> Complex64 {
        self.data[self.index(m, k, n)]
    }

    #[inline]
    pub fn set(&mut self, m: usize, k: usize, n: usize, v: Complex64) {
        let i = self.index(m, k, n);
        self.data[i] = v;
    }

    /// The length-N vector for the pair `(m, k)`.
    #[inline]
    pub fn vector(&self, m: usize, k: usize) -> &[Complex64] {
        let s = (m * self.ues + k) * self.antennas;
        &self.data[s..s + self.antennas]
    }

    #[inline]
    pub fn vector_mut(&mut self, m: usize, k: usize) -> &mut [Complex64] {
        let s = (m * self.ues + k) * self.antennas;
        &mut self.data[s..s + self.antennas]
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    /// Power transmitted (or received) at AP `m`: `sum_k ||x_mk||^2`.
    pub fn ap_power(&self, m: usize) -> f64 {
        let s = m * self.ues * self.antennas;
        self.data[s..s + self.ues * self.antennas]
            .iter()
            .map(|c| c.norm_sqr())
            .sum()
    }

    /// Reorders the three axes with the given index maps:
    /// `out[m, k, n] = self[ap_perm[m], ue_perm[k], ant_perm[n]]`.
    pub fn permuted(&self, ap_perm: &[usize], ue_perm: &[usize], ant_perm: &[usize]) -> Self {
        Self::from_fn(self.aps, self.ues, self.antennas, |m, k, n| {
            self.get(ap_perm[m], ue_perm[k], ant_perm[n])
        })
    }

    pub fn check_dims(&self, aps: usize, ues: usize, antennas: usize) -> Result<()> {
        if self.dims() != (aps, ues, antennas) {
            return Err(shape_err(
                format!("[{aps}, {ues}, {antennas}]"),
                format!("[{}, {}, {}]", self.aps, self.ues, self.antennas),
            ));
        }
        Ok(())
    }
}

/// One network draw.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub h_true: ChannelTensor,
    pub h_observed: ChannelTensor,
    pub sigma_i_sq: f64,
    /// Large-scale gains `beta_mk`, row-major `[M, K]`.
    pub large_scale: Vec<f64>,
    pub seed: u64,
}

/// Precoding vectors `w_mk`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecodingSolution {
    pub w: ChannelTensor,
}

/// Per-link powers over a fixed set of unit-norm precoding directions.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSolution {
    /// Row-major `[M, K]`.
    pub p: Vec<f64>,
    pub precoder_basis: ChannelTensor,
}

impl PowerSolution {
    /// Effective precoders `sqrt(p_mk) * basis_mk`.
    pub fn effective_precoder(&self) -> PrecodingSolution {
        let (aps, ues, antennas) = self.precoder_basis.dims();
        let w = ChannelTensor::from_fn(aps, ues, antennas, |m, k, n| {
            self.precoder_basis.get(m, k, n) * self.p[m * ues + k].max(0.0).sqrt()
        });
        PrecodingSolution { w }
    }
}

fn complex_normal(rng: &mut impl Rng, variance: f64) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re * s, im * s)
}

/// Draws one channel realization. Deterministic in `seed`.
pub fn generate_channel(cfg: &SystemConfig, sigma_i_sq: f64, seed: u64) -> Result<ChannelRealization> {
    cfg.validate()?;
    if !sigma_i_sq.is_finite() {
        return Err(Error::NonFinite("sigma_i_sq".into()));
    }
    if sigma_i_sq < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "sigma_i_sq must be >= 0, got {sigma_i_sq}"
        )));
    }
    let (aps, ues, antennas) = (cfg.aps, cfg.ues, cfg.antennas);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = cfg.area_side;
    let ap_pos: Vec<(f64, f64)> = (0..aps)
        .map(|_| (rng.random::<f64>() * side, rng.random::<f64>() * side))
        .collect();
    let ue_pos: Vec<(f64, f64)> = (0..ues)
        .map(|_| (rng.random::<f64>() * side, rng.random::<f64>() * side))
        .collect();

    let mut large_scale = Vec::with_capacity(aps * ues);
    for &a in &ap_pos {
        for &u in &ue_pos {
            let mut beta = pathloss_gain(wrapped_distance(a, u, side));
            if let Some(sd) = cfg.shadow_fading_db {
                let z: f64 = StandardNormal.sample(&mut rng);
                beta *= 10f64.powf(sd * z / 10.0);
            }
            large_scale.push(beta);
        }
    }

    let mut h_true = ChannelTensor::zeros(aps, ues, antennas);
    for m in 0..aps {
        for k in 0..ues {
            let beta = large_scale[m * ues + k];
            for x in h_true.vector_mut(m, k) {
                *x = complex_normal(&mut rng, beta);
            }
        }
    }

    let mut h_observed = h_true.clone();
    if sigma_i_sq > 0.0 {
        for m in 0..aps {
            for k in 0..ues {
                let var = match cfg.csi_reference {
                    CsiReference::Absolute => sigma_i_sq,
                    CsiReference::LargeScaleGain => sigma_i_sq * large_scale[m * ues + k],
                };
                for x in h_observed.vector_mut(m, k) {
                    *x += complex_normal(&mut rng, var);
                }
            }
        }
    }

    Ok(ChannelRealization {
        h_true,
        h_observed,
        sigma_i_sq,
        large_scale,
        seed,
    })
}

/// Cross gains `t[k][i] = sum_m h_mk^H w_mi`, row-major `[K, K]`.
pub fn cross_gains(h: &ChannelTensor, w: &ChannelTensor) -> Vec<Complex64> {
    let (aps, ues, _) = h.dims();
    let mut t = vec![Complex64::new(0.0, 0.0); ues * ues];
    for m in 0..aps {
        for k in 0..ues {
            let hv = h.vector(m, k);
            for i in 0..ues {
                let wv = w.vector(m, i);
                let mut acc = Complex64::new(0.0, 0.0);
                for (a, b) in hv.iter().zip(wv) {
                    acc += a.conj() * b;
                }
                t[k * ues + i] += acc;
            }
        }
    }
    t
}

/// Weighted sum SE from the cross-gain matrix.
pub fn sum_se_from_gains(t: &[Complex64], ues: usize, weights: &[f64], noise: f64) -> f64 {
    (0..ues)
        .map(|k| {
            let signal = t[k * ues + k].norm_sqr();
            let interference: f64 = (0..ues)
                .filter(|&i| i != k)
                .map(|i| t[k * ues + i].norm_sqr())
                .sum::<f64>()
                + noise;
            weights[k] * (1.0 + signal / interference).log2()
        })
        .sum()
}

/// Weighted sum SE (bits/s/Hz) of precoders `w` on channel `h`.
pub fn sum_se_precoding(h: &ChannelTensor, w: &PrecodingSolution, cfg: &SystemConfig) -> Result<f64> {
    h.check_dims(cfg.aps, cfg.ues, cfg.antennas)?;
    w.w.check_dims(cfg.aps, cfg.ues, cfg.antennas)?;
    if cfg.fairness_weights.len() != cfg.ues {
        return Err(shape_err(cfg.ues, cfg.fairness_weights.len()));
    }
    let t = cross_gains(h, &w.w);
    Ok(sum_se_from_gains(&t, cfg.ues, &cfg.fairness_weights, cfg.noise_power()))
}

/// Weighted sum SE of a power-control solution on channel `h`.
pub fn sum_se_power(h: &ChannelTensor, sol: &PowerSolution, cfg: &SystemConfig) -> Result<f64> {
    if sol.p.len() != cfg.aps * cfg.ues {
        return Err(shape_err(cfg.aps * cfg.ues, sol.p.len()));
    }
    for (idx, &p) in sol.p.iter().enumerate() {
        if !p.is_finite() {
            return Err(Error::NonFinite("power".into()));
        }
        if p < 0.0 {
            return Err(Error::NegativePower {
                ap: idx / cfg.ues,
                ue: idx % cfg.ues,
                value: p,
            });
        }
    }
    sum_se_precoding(h, &sol.effective_precoder(), cfg)
}

/// Scales every AP whose transmit power exceeds `p_max_watt` back onto the
/// budget. Feasible APs are left untouched.
pub fn project_precoding(w: &PrecodingSolution, cfg: &SystemConfig) -> Result<PrecodingSolution> {
    w.w.check_dims(cfg.aps, cfg.ues, cfg.antennas)?;
    if !w.w.is_finite() {
        return Err(Error::NonFinite("precoder".into()));
    }
    let mut out = w.w.clone();
    let per_ap = cfg.ues * cfg.antennas;
    for m in 0..cfg.aps {
        let power = w.w.ap_power(m);
        if power > cfg.p_max_watt {
            let s = (cfg.p_max_watt / power).sqrt();
            for x in &mut out.as_mut_slice()[m * per_ap..(m + 1) * per_ap] {
                *x *= s;
            }
        }
    }
    Ok(PrecodingSolution { w: out })
}

/// Power-domain counterpart of [`project_precoding`] on a row-major `[M, K]`
/// power matrix.
pub fn project_powers(p: &[f64], cfg: &SystemConfig) -> Result<Vec<f64>> {
    if p.len() != cfg.aps * cfg.ues {
        return Err(shape_err(cfg.aps * cfg.ues, p.len()));
    }
    if p.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("power".into()));
    }
    let mut out = p.to_vec();
    for row in out.chunks_mut(cfg.ues) {
        let total: f64 = row.iter().sum();
        if total > cfg.p_max_watt {
            let s = cfg.p_max_watt / total;
            row.iter_mut().for_each(|x| *x *= s);
        }
    }
    Ok(out)
}

/// Writes a binary snapshot: four little-endian `u64` header words
/// `M, K, N, seed`, then little-endian `f64`s: `sigma_i_sq`, the `M*K`
/// large-scale gains, `h_true` and `h_observed` as interleaved `(re, im)`.
pub fn write_snapshot(real: &ChannelRealization, mut out: impl Write) -> Result<()> {
    let (aps, ues, antennas) = real.h_true.dims();
    for v in [aps as u64, ues as u64, antennas as u64, real.seed] {
        out.write_all(&v.to_le_bytes())?;
    }
    out.write_all(&real.sigma_i_sq.to_le_bytes())?;
    for b in &real.large_scale {
        out.write_all(&b.to_le_bytes())?;
    }
    for t in [&real.h_true, &real.h_observed] {
        for c in t.as_slice() {
            out.write_all(&c.re.to_le_bytes())?;
            out.write_all(&c.im.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_snapshot(mut input: impl Read) -> Result<ChannelRealization> {
    let mut word = [0u8; 8];
    let mut next = |input: &mut dyn Read| -> Result<[u8; 8]> {
        input.read_exact(&mut word)?;
        Ok(word)
    };
    let aps = u64::from_le_bytes(next(&mut input)?) as usize;
    let ues = u64::from_le_bytes(next(&mut input)?) as usize;
    let antennas = u64::from_le_bytes(next(&mut input)?) as usize;
    let seed = u64::from_le_bytes(next(&mut input)?);
    let total = aps
        .checked_mul(ues)
        .and_then(|x| x.checked_mul(antennas))
        .filter(|&x| x > 0 && x < (1 << 28))
        .ok_or_else(|| Error::Format(format!("bad snapshot dims {aps}x{ues}x{antennas}")))?;
    let sigma_i_sq = f64::from_le_bytes(next(&mut input)?);
    let mut large_scale = Vec::with_capacity(aps * ues);
    for _ in 0..aps * ues {
        large_scale.push(f64::from_le_bytes(next(&mut input)?));
    }
    let mut read_tensor = |input: &mut dyn Read| -> Result<ChannelTensor> {
        let mut data = Vec::with_capacity(total);
        for _ in 0..total {
            let re = f64::from_le_bytes(next(input)?);
            let im = f64::from_le_bytes(next(input)?);
            data.push(Complex64::new(re, im));
        }
        ChannelTensor::from_vec(aps, ues, antennas, data)
    };
    let h_true = read_tensor(&mut input)?;
    let h_observed = read_tensor(&mut input)?;
    Ok(ChannelRealization {
        h_true,
        h_observed,
        sigma_i_sq,
        large_scale,
        seed,
    })
}

/// Dumps a realization as CSV with one row per `(m, k, n)` entry.
pub fn write_channel_csv(real: &ChannelRealization, mut out: impl Write) -> Result<()> {
    writeln!(out, "m,k,n,beta,true_re,true_im,obs_re,obs_im")?;
    let (aps, ues, antennas) = real.h_true.dims();
    for m in 0..aps {
        for k in 0..ues {
            for n in 0..antennas {
                let t = real.h_true.get(m, k, n);
                let o = real.h_observed.get(m, k, n);
                writeln!(
                    out,
                    "{m},{k},{n},{:e},{:e},{:e},{:e},{:e}",
                    real.large_scale[m * ues + k],
                    t.re,
                    t.im,
                    o.re,
                    o.im
                )?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_cfg(noise_dbm: f64) -> SystemConfig {
        let mut cfg = SystemConfig::new(1, 1, 1);
        cfg.noise_power_dbm = noise_dbm;
        cfg
    }

    #[test]
    fn zero_noise_is_exact() {
        let cfg = SystemConfig::default();
        let r = generate_channel(&cfg, 0.0, 7).unwrap();
        assert_eq!(r.h_true, r.h_observed);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = SystemConfig::default();
        let a = generate_channel(&cfg, 0.3, 11).unwrap();
        let b = generate_channel(&cfg, 0.3, 11).unwrap();
        assert_eq!(a, b);
        let c = generate_channel(&cfg, 0.3, 12).unwrap();
        assert_ne!(a.h_true, c.h_true);
    }

    #[test]
    fn rejects_bad_noise() {
        let cfg = SystemConfig::default();
        assert!(generate_channel(&cfg, f64::NAN, 1).is_err());
        assert!(generate_channel(&cfg, f64::INFINITY, 1).is_err());
        assert!(generate_channel(&cfg, -1.0, 1).is_err());
    }

    #[test]
    fn absolute_csi_error_variance() {
        let mut cfg = SystemConfig::new(1, 1, 1);
        cfg.csi_reference = CsiReference::Absolute;
        let draws = 10_000;
        let mut acc = 0.0;
        for s in 0..draws {
            let r = generate_channel(&cfg, 0.1, s).unwrap();
            acc += (r.h_observed.get(0, 0, 0) - r.h_true.get(0, 0, 0)).norm_sqr();
        }
        let var = acc / draws as f64;
        assert!((var - 0.1).abs() / 0.1 < 0.05, "sample variance {var}");
    }

    #[test]
    fn relative_csi_error_tracks_large_scale_gain() {
        let cfg = SystemConfig::new(3, 2, 8);
        let mut acc = 0.0;
        let mut count = 0usize;
        for s in 0..500 {
            let r = generate_channel(&cfg, 0.5, s).unwrap();
            for m in 0..3 {
                for k in 0..2 {
                    let beta = r.large_scale[m * 2 + k];
                    for n in 0..8 {
                        let e = r.h_observed.get(m, k, n) - r.h_true.get(m, k, n);
                        acc += e.norm_sqr() / beta;
                        count += 1;
                    }
                }
            }
        }
        let ratio = acc / count as f64;
        assert!((ratio - 0.5).abs() < 0.025, "normalized error variance {ratio}");
    }

    #[test]
    fn positions_respect_wrap_around() {
        assert!((wrapped_distance((10.0, 10.0), (990.0, 10.0), 1000.0) - 20.0).abs() < 1e-9);
        assert!((wrapped_distance((0.0, 0.0), (500.0, 500.0), 1000.0) - 500.0 * 2f64.sqrt()).abs() < 1e-9);
        assert_eq!(pathloss_gain(1.0), pathloss_gain(MIN_DISTANCE_M));
        let g100 = 10f64.powf((-30.5 - 36.7 * 2.0) / 10.0);
        assert!((pathloss_gain(100.0) / g100 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scalar_closed_form() {
        // noise_power_dbm = 30 dBm is 1 W.
        let cfg = scalar_cfg(30.0);
        let h = ChannelTensor::from_vec(1, 1, 1, vec![Complex64::new(1.0, 0.0)]).unwrap();
        for p in [0.0, 0.5, 1.0, 3.0] {
            let w = PrecodingSolution {
                w: ChannelTensor::from_vec(1, 1, 1, vec![Complex64::new(f64::sqrt(p), 0.0)]).unwrap(),
            };
            let se = sum_se_precoding(&h, &w, &cfg).unwrap();
            assert!((se - (1.0 + p).log2()).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_precoder_gives_zero_se() {
        let cfg = SystemConfig::new(3, 2, 2);
        let r = generate_channel(&cfg, 0.0, 3).unwrap();
        let w = PrecodingSolution {
            w: ChannelTensor::zeros(3, 2, 2),
        };
        assert_eq!(sum_se_precoding(&r.h_true, &w, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn power_se_rejects_negative_and_is_zero_at_zero() {
        let cfg = SystemConfig::new(2, 2, 2);
        let r = generate_channel(&cfg, 0.0, 5).unwrap();
        let basis = ChannelTensor::from_fn(2, 2, 2, |_, _, _| Complex64::new(0.5f64.sqrt(), 0.0));
        let mut sol = PowerSolution {
            p: vec![0.0; 4],
            precoder_basis: basis,
        };
        assert_eq!(sum_se_power(&r.h_true, &sol, &cfg).unwrap(), 0.0);
        sol.p[3] = -0.1;
        assert!(matches!(
            sum_se_power(&r.h_true, &sol, &cfg),
            Err(Error::NegativePower { ap: 1, ue: 1, .. })
        ));
    }

    #[test]
    fn single_ue_se_increases_with_power() {
        let cfg = SystemConfig::new(3, 1, 2);
        let r = generate_channel(&cfg, 0.0, 9).unwrap();
        let basis = ChannelTensor::from_fn(3, 1, 2, |m, k, n| {
            let v = r.h_true.vector(m, k);
            let norm = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
            r.h_true.get(m, k, n) / norm
        });
        let mut last = -1.0;
        for step in 0..=10 {
            let sol = PowerSolution {
                p: vec![0.3, step as f64 / 10.0, 0.2],
                precoder_basis: basis.clone(),
            };
            let se = sum_se_power(&r.h_true, &sol, &cfg).unwrap();
            assert!(se > last);
            last = se;
        }
    }

    #[test]
    fn projection_scales_and_is_idempotent() {
        let cfg = SystemConfig::new(2, 2, 2);
        let mut w = ChannelTensor::zeros(2, 2, 2);
        // AP 0 at 4x budget, AP 1 feasible.
        for (k, n) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            w.set(0, k, n, Complex64::new(1.0, 0.0));
            w.set(1, k, n, Complex64::new(0.1, 0.2));
        }
        let sol = PrecodingSolution { w };
        let once = project_precoding(&sol, &cfg).unwrap();
        assert!((once.w.ap_power(0) - 1.0).abs() < 1e-12);
        assert_eq!(once.w.vector(1, 0), sol.w.vector(1, 0));
        assert!((once.w.get(0, 1, 1).re - 0.5).abs() < 1e-12);
        let twice = project_precoding(&once, &cfg).unwrap();
        assert_eq!(once, twice);

        let p = project_powers(&[2.0, 2.0, 0.1, 0.2], &cfg).unwrap();
        assert_eq!(p, vec![0.5, 0.5, 0.1, 0.2]);
        assert_eq!(project_powers(&p, &cfg).unwrap(), p);
        assert!(project_powers(&[f64::NAN, 0.0, 0.0, 0.0], &cfg).is_err());
    }

    #[test]
    fn snapshot_round_trip() {
        let cfg = SystemConfig::new(2, 3, 2);
        let r = generate_channel(&cfg, 0.2, 77).unwrap();
        let mut buf = Vec::new();
        write_snapshot(&r, &mut buf).unwrap();
        assert_eq!(buf.len(), 8 * 4 + 8 * (1 + 6 + 2 * 2 * 12));
        assert_eq!(&buf[0..8], &2u64.to_le_bytes());
        let back = read_snapshot(&buf[..]).unwrap();
        assert_eq!(back, r);
        assert!(read_snapshot(&buf[..20]).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = SystemConfig::new(2, 2, 2);
        assert!(cfg.validate().is_ok());
        cfg.fairness_weights[0] = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = SystemConfig::new(2, 2, 2);
        cfg.p_max_watt = 0.0;
        assert!(cfg.validate().is_err());
        assert!(SystemConfig::new(0, 1, 1).validate().is_err());
        assert!((SystemConfig::default().noise_power() - 10f64.powf(-12.4)).abs() < 1e-25);
    }
}
