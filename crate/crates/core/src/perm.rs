//! Structured, parameter-shared linear maps over multidimensional index
//! spaces, the permutation operators they commute with, and the edge-graph
//! construction that maps problem entities onto permutable axes.

use std::io::{Read, Write};
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::SystemConfig;
use crate::error::{shape_err, Error, Result};

pub const DEFAULT_MATERIALIZE_CAP: usize = 10_000;
const MAX_PERM_AXES: usize = 12;
const WEIGHT_FORMAT_VERSION: u32 = 1;

/// How an axis behaves under permutation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AxisRole {
    /// Freely permutable; one "self" block and one shared "other" block.
    Set,
    /// Indexes independent subsets. Not permuted; every index value gets its own blocks.
    Outer,
    /// Permuted independently inside each index of the named outer axis.
    Inner { outer: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Axis {
    pub dim: usize,
    pub role: AxisRole,
}

/// Descriptor of a structured weight: axes, channel widths and sparsity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermStructure {
    pub axes: Vec<Axis>,
    pub channels_in: usize,
    pub channels_out: usize,
    /// Keep only blocks whose indices differ in at most one axis.
    pub topological: bool,
    /// Divide each neighbour sum by its number of terms.
    #[serde(default)]
    pub mean_aggregation: bool,
}

impl PermStructure {
    pub fn non_nested(dims: &[usize], cin: usize, cout: usize, topological: bool) -> Result<Self> {
        let axes = dims
            .iter()
            .map(|&dim| Axis {
                dim,
                role: AxisRole::Set,
            })
            .collect();
        Self::with_axes(axes, cin, cout, topological)
    }

    /// Nested structure; each `(outer, inner)` pair marks `inner` as permutable
    /// only within each index of `outer`.
    pub fn nested(
        dims: &[usize],
        pairs: &[(usize, usize)],
        cin: usize,
        cout: usize,
        topological: bool,
    ) -> Result<Self> {
        let mut axes: Vec<Axis> = dims
            .iter()
            .map(|&dim| Axis {
                dim,
                role: AxisRole::Set,
            })
            .collect();
        for &(o, i) in pairs {
            if o >= dims.len() || i >= dims.len() || o == i {
                return Err(Error::InvalidConfig(format!("bad nested pair ({o}, {i})")));
            }
            if axes[o].role != AxisRole::Set || axes[i].role != AxisRole::Set {
                return Err(Error::InvalidConfig(format!("axis reused in nested pair ({o}, {i})")));
            }
            axes[o].role = AxisRole::Outer;
            axes[i].role = AxisRole::Inner { outer: o };
        }
        Self::with_axes(axes, cin, cout, topological)
    }

    pub fn with_axes(axes: Vec<Axis>, cin: usize, cout: usize, topological: bool) -> Result<Self> {
        let s = Self {
            axes,
            channels_in: cin,
            channels_out: cout,
            topological,
            mean_aggregation: false,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.axes.is_empty() {
            return Err(Error::InvalidConfig("structure needs at least one axis".into()));
        }
        if self.channels_in == 0 || self.channels_out == 0 {
            return Err(Error::InvalidConfig("channel widths must be >= 1".into()));
        }
        let mut inner_seen = vec![false; self.axes.len()];
        for (j, a) in self.axes.iter().enumerate() {
            if a.dim == 0 {
                return Err(Error::InvalidConfig(format!("axis {j} has size 0")));
            }
            if let AxisRole::Inner { outer } = a.role {
                if outer >= self.axes.len() || self.axes[outer].role != AxisRole::Outer {
                    return Err(Error::InvalidConfig(format!(
                        "axis {j} nested in {outer}, which is not an outer axis"
                    )));
                }
                if inner_seen[outer] {
                    return Err(Error::InvalidConfig(format!("outer axis {outer} has two inner axes")));
                }
                inner_seen[outer] = true;
            }
        }
        if self.perm_axes().len() > MAX_PERM_AXES {
            return Err(Error::InvalidConfig("too many permutable axes".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.dim).collect()
    }

    /// Number of positions in the index space.
    pub fn edges(&self) -> usize {
        self.axes.iter().map(|a| a.dim).product()
    }

    /// Axes that take part in the self/other pattern (everything but outer axes).
    pub fn perm_axes(&self) -> Vec<usize> {
        (0..self.axes.len())
            .filter(|&j| self.axes[j].role != AxisRole::Outer)
            .collect()
    }

    pub fn outer_axes(&self) -> Vec<usize> {
        (0..self.axes.len())
            .filter(|&j| self.axes[j].role == AxisRole::Outer)
            .collect()
    }

    pub fn is_nested(&self) -> bool {
        self.axes.iter().any(|a| a.role == AxisRole::Outer)
    }

    /// Difference patterns (bitmasks over `perm_axes`) that carry a block.
    pub fn patterns(&self) -> Vec<u32> {
        let t = self.perm_axes().len();
        if self.topological {
            std::iter::once(0).chain((0..t).map(|a| 1u32 << a)).collect()
        } else {
            (0..(1u32 << t)).collect()
        }
    }

    pub fn outer_count(&self) -> usize {
        self.outer_axes().iter().map(|&j| self.axes[j].dim).product()
    }

    pub fn with_channels(&self, cin: usize, cout: usize) -> Self {
        Self {
            channels_in: cin,
            channels_out: cout,
            ..self.clone()
        }
    }
}

/// Number of distinct shared blocks, each of size `C_in x C_out`.
pub fn count_parameters(structure: &PermStructure) -> usize {
    structure.patterns().len() * structure.outer_count()
}

/// Blocks of an unshared map over the same index space: `2^(d_1 + ... + d_J)`.
/// `None` when it does not fit in 128 bits.
pub fn naive_parameter_count(dims: &[usize]) -> Option<u128> {
    let total: usize = dims.iter().sum();
    1u128.checked_shl(total as u32).filter(|_| total < 128)
}

/// Percentage of parameters removed relative to `naive`.
pub fn reduction_percent(count: usize, naive: u128) -> f64 {
    100.0 * (1.0 - count as f64 / naive as f64)
}

/// Precomputed index arithmetic for a structure.
#[derive(Debug, Clone)]
pub struct Layout {
    pub structure: PermStructure,
    dims: Vec<usize>,
    strides: Vec<usize>,
    edges: usize,
    perm_axes: Vec<usize>,
    patterns: Vec<u32>,
    outer_of: Vec<usize>,
    outer_count: usize,
    mask_offsets: Vec<usize>,
    mask_len: usize,
}

impl Layout {
    pub fn new(structure: PermStructure) -> Result<Self> {
        structure.validate()?;
        let dims = structure.dims();
        let mut strides = vec![1; dims.len()];
        for j in (0..dims.len().saturating_sub(1)).rev() {
            strides[j] = strides[j + 1] * dims[j + 1];
        }
        let edges = structure.edges();
        let perm_axes = structure.perm_axes();
        let patterns = structure.patterns();
        let outer_axes = structure.outer_axes();
        let outer_count = structure.outer_count();
        let outer_of = (0..edges)
            .map(|e| {
                outer_axes
                    .iter()
                    .fold(0, |acc, &j| acc * dims[j] + (e / strides[j]) % dims[j])
            })
            .collect();
        let mut mask_offsets = Vec::with_capacity(perm_axes.len());
        let mut acc = 0;
        for &a in &perm_axes {
            mask_offsets.push(acc);
            acc += edges * (dims[a] - 1);
        }
        Ok(Self {
            structure,
            dims,
            strides,
            edges,
            perm_axes,
            patterns,
            outer_of,
            outer_count,
            mask_offsets,
            mask_len: acc,
        })
    }

    pub fn edges(&self) -> usize {
        self.edges
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn channels_in(&self) -> usize {
        self.structure.channels_in
    }

    pub fn channels_out(&self) -> usize {
        self.structure.channels_out
    }

    pub fn patterns(&self) -> &[u32] {
        &self.patterns
    }

    /// Number of neighbour types (one per permutable axis).
    pub fn neighbour_types(&self) -> usize {
        self.perm_axes.len()
    }

    pub fn param_len(&self) -> usize {
        self.patterns.len() * self.outer_count * self.channels_in() * self.channels_out()
    }

    pub fn input_len(&self) -> usize {
        self.channels_in() * self.edges
    }

    pub fn output_len(&self) -> usize {
        self.channels_out() * self.edges
    }

    /// Length of a per-(type, edge, neighbour) mask vector.
    pub fn mask_len(&self) -> usize {
        self.mask_len
    }

    pub fn index_of(&self, e: usize, axis: usize) -> usize {
        (e / self.strides[axis]) % self.dims[axis]
    }

    pub fn multi_index(&self, e: usize) -> Vec<usize> {
        (0..self.dims.len()).map(|j| self.index_of(e, j)).collect()
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn outer_of(&self, e: usize) -> usize {
        self.outer_of[e]
    }

    fn block_offset(&self, pattern_pos: usize, outer: usize) -> usize {
        (pattern_pos * self.outer_count + outer) * self.channels_in() * self.channels_out()
    }

    fn pattern_scale(&self, pattern: u32) -> f64 {
        if !self.structure.mean_aggregation {
            return 1.0;
        }
        let n: usize = (0..self.perm_axes.len())
            .filter(|t| pattern & (1 << t) != 0)
            .map(|t| self.dims[self.perm_axes[t]] - 1)
            .product();
        if n == 0 {
            0.0
        } else {
            1.0 / n as f64
        }
    }

    /// Neighbour `j` (`0..d-1`, skipping self) of edge `e` along type `t`.
    pub fn neighbour(&self, e: usize, t: usize, j: usize) -> usize {
        let axis = self.perm_axes[t];
        let own = self.index_of(e, axis);
        let v = if j < own { j } else { j + 1 };
        e - own * self.strides[axis] + v * self.strides[axis]
    }

    pub fn neighbour_count(&self, t: usize) -> usize {
        self.dims[self.perm_axes[t]] - 1
    }

    pub fn mask_index(&self, t: usize, e: usize, j: usize) -> usize {
        self.mask_offsets[t] + e * self.neighbour_count(t) + j
    }

    /// Type of the neighbour relation between two edges: `Some(t)` when they
    /// differ in exactly the `t`-th permutable axis and nowhere else.
    pub fn neighbour_type(&self, a: usize, b: usize) -> Option<usize> {
        let mut found = None;
        for j in 0..self.dims.len() {
            if self.index_of(a, j) != self.index_of(b, j) {
                let t = self.perm_axes.iter().position(|&p| p == j)?;
                if found.is_some() {
                    return None;
                }
                found = Some(t);
            }
        }
        found
    }

    /// `out[c, e] = sum over all values of `axis` of x[c, e with that axis replaced]`.
    fn axis_sum(&self, x: &[f64], channels: usize, axis: usize) -> Vec<f64> {
        let d = self.dims[axis];
        let s = self.strides[axis];
        let mut out = vec![0.0; x.len()];
        for c in 0..channels {
            let row = &x[c * self.edges..(c + 1) * self.edges];
            let orow = &mut out[c * self.edges..(c + 1) * self.edges];
            for e in 0..self.edges {
                let own = (e / s) % d;
                if own != 0 {
                    orow[e] = orow[e - own * s];
                    continue;
                }
                orow[e] = (0..d).map(|v| row[e + v * s]).sum();
            }
        }
        out
    }

    /// `D_S x` for every pattern, in `patterns()` order: the sum of `x` over
    /// positions that differ from `e` in exactly the axes of `S`.
    pub fn aggregate_all(&self, x: &[f64], channels: usize) -> Vec<Vec<f64>> {
        let t = self.perm_axes.len();
        let need_all = !self.structure.topological;
        // Full sums F_T for every subset T that is needed.
        let mut full: Vec<Option<Vec<f64>>> = vec![None; 1 << t];
        full[0] = Some(x.to_vec());
        if need_all {
            for mask in 1u32..(1 << t) {
                let low = mask.trailing_zeros() as usize;
                let prev = full[(mask & (mask - 1)) as usize].as_ref().expect("computed earlier");
                full[mask as usize] = Some(self.axis_sum(prev, channels, self.perm_axes[low]));
            }
        } else {
            for a in 0..t {
                full[1 << a] = Some(self.axis_sum(x, channels, self.perm_axes[a]));
            }
        }
        self.patterns
            .iter()
            .map(|&s| {
                let mut d = vec![0.0; x.len()];
                // Inclusion-exclusion over subsets of S.
                let mut sub = s;
                loop {
                    let sign = if (s.count_ones() - sub.count_ones()) % 2 == 0 {
                        1.0
                    } else {
                        -1.0
                    };
                    let f = full[sub as usize].as_ref().expect("subset computed");
                    d.iter_mut().zip(f).for_each(|(di, fi)| *di += sign * fi);
                    if sub == 0 {
                        break;
                    }
                    sub = (sub - 1) & s;
                }
                let scale = self.pattern_scale(s);
                if scale != 1.0 {
                    d.iter_mut().for_each(|v| *v *= scale);
                }
                d
            })
            .collect()
    }

    fn check_len(&self, what: &str, got: usize, want: usize) -> Result<()> {
        if got != want {
            return Err(shape_err(format!("{what} of length {want}"), got));
        }
        Ok(())
    }

    /// `y[co, e] += sum_ci P[block(e)][ci][co] * d[ci, e]` for one pattern.
    fn block_forward(&self, params: &[f64], pattern_pos: usize, d: &[f64], y: &mut [f64]) {
        let (ci_n, co_n, e_n) = (self.channels_in(), self.channels_out(), self.edges);
        for e in 0..e_n {
            let off = self.block_offset(pattern_pos, self.outer_of[e]);
            for ci in 0..ci_n {
                let v = d[ci * e_n + e];
                if v == 0.0 {
                    continue;
                }
                let row = &params[off + ci * co_n..off + (ci + 1) * co_n];
                for co in 0..co_n {
                    y[co * e_n + e] += row[co] * v;
                }
            }
        }
    }

    /// `out[ci, e] = sum_co P[block(e)][ci][co] * g[co, e]`.
    fn block_transpose(&self, params: &[f64], pattern_pos: usize, g: &[f64]) -> Vec<f64> {
        let (ci_n, co_n, e_n) = (self.channels_in(), self.channels_out(), self.edges);
        let mut out = vec![0.0; ci_n * e_n];
        for e in 0..e_n {
            let off = self.block_offset(pattern_pos, self.outer_of[e]);
            for ci in 0..ci_n {
                let row = &params[off + ci * co_n..off + (ci + 1) * co_n];
                out[ci * e_n + e] = (0..co_n).map(|co| row[co] * g[co * e_n + e]).sum();
            }
        }
        out
    }

    /// `gp[block(e)][ci][co] += d[ci, e] * g[co, e]`.
    fn block_param_grad(&self, pattern_pos: usize, d: &[f64], g: &[f64], gp: &mut [f64]) {
        let (ci_n, co_n, e_n) = (self.channels_in(), self.channels_out(), self.edges);
        for e in 0..e_n {
            let off = self.block_offset(pattern_pos, self.outer_of[e]);
            for ci in 0..ci_n {
                let v = d[ci * e_n + e];
                if v == 0.0 {
                    continue;
                }
                for co in 0..co_n {
                    gp[off + ci * co_n + co] += v * g[co * e_n + e];
                }
            }
        }
    }

    /// Structured product without materialization. `x` is `[C_in, E]`.
    pub fn apply(&self, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.check_len("params", params.len(), self.param_len())?;
        self.check_len("input", x.len(), self.input_len())?;
        let agg = self.aggregate_all(x, self.channels_in());
        let mut y = vec![0.0; self.output_len()];
        for (s, d) in agg.iter().enumerate() {
            self.block_forward(params, s, d, &mut y);
        }
        Ok(y)
    }

    /// Adds the input and parameter gradients of `apply` for upstream `gy`.
    pub fn apply_backward(
        &self,
        params: &[f64],
        x: &[f64],
        gy: &[f64],
        gx: &mut [f64],
        gp: &mut [f64],
    ) -> Result<()> {
        self.check_len("upstream gradient", gy.len(), self.output_len())?;
        let agg = self.aggregate_all(x, self.channels_in());
        for (s, d) in agg.iter().enumerate() {
            self.block_param_grad(s, d, gy, gp);
            // "Differs exactly in S" is a symmetric relation, so D_S is self-adjoint.
            let bt = self.block_transpose(params, s, gy);
            let back = self.aggregate_single(&bt, self.channels_in(), s);
            gx.iter_mut().zip(back).for_each(|(a, b)| *a += b);
        }
        Ok(())
    }

    /// `D_S x` for the pattern at position `pattern_pos`.
    pub fn aggregate_single(&self, x: &[f64], channels: usize, pattern_pos: usize) -> Vec<f64> {
        let s = self.patterns[pattern_pos];
        let mut d = vec![0.0; x.len()];
        let mut sub = s;
        loop {
            let sign = if (s.count_ones() - sub.count_ones()) % 2 == 0 {
                1.0
            } else {
                -1.0
            };
            let mut f = x.to_vec();
            for t in 0..self.perm_axes.len() {
                if sub & (1 << t) != 0 {
                    f = self.axis_sum(&f, channels, self.perm_axes[t]);
                }
            }
            d.iter_mut().zip(&f).for_each(|(di, fi)| *di += sign * fi);
            if sub == 0 {
                break;
            }
            sub = (sub - 1) & s;
        }
        let scale = self.pattern_scale(s);
        if scale != 1.0 {
            d.iter_mut().for_each(|v| *v *= scale);
        }
        d
    }

    fn require_topological(&self) -> Result<()> {
        if !self.structure.topological {
            return Err(Error::InvalidConfig(
                "neighbour masks need a topological structure".into(),
            ));
        }
        Ok(())
    }

    /// Structured product where each neighbour term is scaled by a mask
    /// entry; the self term is always kept.
    pub fn apply_masked(&self, params: &[f64], x: &[f64], masks: &[f64]) -> Result<Vec<f64>> {
        self.require_topological()?;
        self.check_len("params", params.len(), self.param_len())?;
        self.check_len("input", x.len(), self.input_len())?;
        self.check_len("masks", masks.len(), self.mask_len)?;
        let (co_n, e_n) = (self.channels_out(), self.edges);
        let mut y = vec![0.0; self.output_len()];
        self.block_forward(params, 0, x, &mut y);
        for t in 0..self.perm_axes.len() {
            let mut q = vec![0.0; self.output_len()];
            self.block_forward(params, t + 1, x, &mut q);
            let scale = self.pattern_scale(1 << t);
            for e in 0..e_n {
                for j in 0..self.neighbour_count(t) {
                    let m = masks[self.mask_index(t, e, j)] * scale;
                    if m == 0.0 {
                        continue;
                    }
                    let nb = self.neighbour(e, t, j);
                    for co in 0..co_n {
                        y[co * e_n + e] += m * q[co * e_n + nb];
                    }
                }
            }
        }
        Ok(y)
    }

    /// Gradients of `apply_masked` with respect to input, parameters and masks.
    pub fn apply_masked_backward(
        &self,
        params: &[f64],
        x: &[f64],
        masks: &[f64],
        gy: &[f64],
        gx: &mut [f64],
        gp: &mut [f64],
        gm: &mut [f64],
    ) -> Result<()> {
        self.require_topological()?;
        self.check_len("upstream gradient", gy.len(), self.output_len())?;
        let (co_n, e_n) = (self.channels_out(), self.edges);
        self.block_param_grad(0, x, gy, gp);
        let bt = self.block_transpose(params, 0, gy);
        gx.iter_mut().zip(bt).for_each(|(a, b)| *a += b);
        for t in 0..self.perm_axes.len() {
            let mut q = vec![0.0; self.output_len()];
            self.block_forward(params, t + 1, x, &mut q);
            let scale = self.pattern_scale(1 << t);
            let mut gq = vec![0.0; self.output_len()];
            for e in 0..e_n {
                for j in 0..self.neighbour_count(t) {
                    let mi = self.mask_index(t, e, j);
                    let nb = self.neighbour(e, t, j);
                    let mut dot = 0.0;
                    for co in 0..co_n {
                        let g = gy[co * e_n + e];
                        dot += g * q[co * e_n + nb];
                        gq[co * e_n + nb] += masks[mi] * scale * g;
                    }
                    gm[mi] += dot * scale;
                }
            }
            self.block_param_grad(t + 1, x, &gq, gp);
            let bt = self.block_transpose(params, t + 1, &gq);
            gx.iter_mut().zip(bt).for_each(|(a, b)| *a += b);
        }
        Ok(())
    }

    /// Length of the neighbour-scoring parameter vector for `channels` input channels.
    pub fn pair_score_len(&self, channels: usize) -> usize {
        self.perm_axes.len() * (2 * channels + 1)
    }

    /// Neighbour-selection logits
    /// `(<u_t, x_e> + <v_t, x_nb>) / sqrt(C) + b_t`, laid out like masks.
    pub fn pair_logits(&self, params: &[f64], x: &[f64], channels: usize) -> Result<Vec<f64>> {
        self.check_len("score params", params.len(), self.pair_score_len(channels))?;
        self.check_len("input", x.len(), channels * self.edges)?;
        let e_n = self.edges;
        let norm = 1.0 / (channels as f64).sqrt();
        let mut out = vec![0.0; self.mask_len];
        for t in 0..self.perm_axes.len() {
            let p = &params[t * (2 * channels + 1)..(t + 1) * (2 * channels + 1)];
            let (u, rest) = p.split_at(channels);
            let (v, b) = rest.split_at(channels);
            let su: Vec<f64> = (0..e_n)
                .map(|e| (0..channels).map(|c| u[c] * x[c * e_n + e]).sum())
                .collect();
            let sv: Vec<f64> = (0..e_n)
                .map(|e| (0..channels).map(|c| v[c] * x[c * e_n + e]).sum())
                .collect();
            for e in 0..e_n {
                for j in 0..self.neighbour_count(t) {
                    let nb = self.neighbour(e, t, j);
                    out[self.mask_index(t, e, j)] = (su[e] + sv[nb]) * norm + b[0];
                }
            }
        }
        Ok(out)
    }

    pub fn pair_logits_backward(
        &self,
        params: &[f64],
        x: &[f64],
        channels: usize,
        g: &[f64],
        gx: &mut [f64],
        gp: &mut [f64],
    ) -> Result<()> {
        self.check_len("upstream gradient", g.len(), self.mask_len)?;
        let e_n = self.edges;
        let norm = 1.0 / (channels as f64).sqrt();
        let width = 2 * channels + 1;
        for t in 0..self.perm_axes.len() {
            let p = &params[t * width..(t + 1) * width];
            // Upstream mass reaching each edge as centre and as neighbour.
            let mut g_self = vec![0.0; e_n];
            let mut g_nb = vec![0.0; e_n];
            let mut g_bias = 0.0;
            for e in 0..e_n {
                for j in 0..self.neighbour_count(t) {
                    let gi = g[self.mask_index(t, e, j)];
                    g_self[e] += gi;
                    g_nb[self.neighbour(e, t, j)] += gi;
                    g_bias += gi;
                }
            }
            let gpt = &mut gp[t * width..(t + 1) * width];
            for c in 0..channels {
                for e in 0..e_n {
                    let xv = x[c * e_n + e];
                    gpt[c] += g_self[e] * xv * norm;
                    gpt[channels + c] += g_nb[e] * xv * norm;
                    gx[c * e_n + e] += (g_self[e] * p[c] + g_nb[e] * p[channels + c]) * norm;
                }
            }
            gpt[2 * channels] += g_bias;
        }
        Ok(())
    }

    /// Dense matrix of the map acting on `vec(x)` with index `c * E + e`.
    pub fn materialize(&self, params: &[f64], cap: usize) -> Result<DMatrix<f64>> {
        self.check_len("params", params.len(), self.param_len())?;
        let rows = self.output_len();
        let cols = self.input_len();
        if rows > cap || cols > cap {
            return Err(Error::CapExceeded {
                rows: rows.max(cols),
                cap,
            });
        }
        let (ci_n, co_n, e_n) = (self.channels_in(), self.channels_out(), self.edges);
        let mut m = DMatrix::zeros(rows, cols);
        for e in 0..e_n {
            for e2 in 0..e_n {
                if self.outer_of[e] != self.outer_of[e2] {
                    continue;
                }
                let mut pattern = 0u32;
                for (t, &a) in self.perm_axes.iter().enumerate() {
                    if self.index_of(e, a) != self.index_of(e2, a) {
                        pattern |= 1 << t;
                    }
                }
                let Some(pos) = self.patterns.iter().position(|&p| p == pattern) else {
                    continue;
                };
                let scale = self.pattern_scale(pattern);
                let off = self.block_offset(pos, self.outer_of[e]);
                for ci in 0..ci_n {
                    for co in 0..co_n {
                        m[(co * e_n + e, ci * e_n + e2)] = scale * params[off + ci * co_n + co];
                    }
                }
            }
        }
        Ok(m)
    }
}

/// A structured weight: layout plus its free blocks, stored
/// `[pattern][outer][C_in][C_out]`.
#[derive(Debug, Clone)]
pub struct StructuredWeight {
    pub layout: Arc<Layout>,
    pub params: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightHeader {
    version: u32,
    structure: PermStructure,
    param_len: usize,
}

impl StructuredWeight {
    pub fn zeros(structure: PermStructure) -> Result<Self> {
        let layout = Layout::new(structure)?;
        let params = vec![0.0; layout.param_len()];
        Ok(Self {
            layout: Arc::new(layout),
            params,
        })
    }

    pub fn from_params(structure: PermStructure, params: Vec<f64>) -> Result<Self> {
        let mut w = Self::zeros(structure)?;
        if params.len() != w.params.len() {
            return Err(shape_err(w.params.len(), params.len()));
        }
        w.params = params;
        Ok(w)
    }

    /// Uniform in `[-a, a]`, `a = sqrt(6 / (C_in + C_out)) / (1 + sum_j d_j)`.
    pub fn random<R: Rng + ?Sized>(structure: PermStructure, rng: &mut R) -> Result<Self> {
        let mut w = Self::zeros(structure)?;
        let a = init_scale(&w.layout.structure);
        w.params.iter_mut().for_each(|p| *p = rng.random_range(-a..=a));
        Ok(w)
    }

    pub fn structure(&self) -> &PermStructure {
        &self.layout.structure
    }

    /// Number of distinct blocks.
    pub fn block_count(&self) -> usize {
        count_parameters(self.structure())
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.layout.apply(&self.params, x)
    }

    pub fn materialize(&self, cap: usize) -> Result<DMatrix<f64>> {
        self.layout.materialize(&self.params, cap)
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let header = serde_json::to_vec(&WeightHeader {
            version: WEIGHT_FORMAT_VERSION,
            structure: self.structure().clone(),
            param_len: self.params.len(),
        })?;
        out.write_all(&(header.len() as u64).to_le_bytes())?;
        out.write_all(&header)?;
        for p in &self.params {
            out.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut len = [0u8; 8];
        input.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 24 {
            return Err(Error::Format("weight header too large".into()));
        }
        let mut header = vec![0u8; len];
        input.read_exact(&mut header)?;
        let header: WeightHeader = serde_json::from_slice(&header)?;
        if header.version != WEIGHT_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported weight version {}", header.version)));
        }
        let mut params = vec![0.0; header.param_len];
        let mut buf = [0u8; 8];
        for p in params.iter_mut() {
            input.read_exact(&mut buf)?;
            *p = f64::from_le_bytes(buf);
        }
        Self::from_params(header.structure, params)
    }
}

pub fn init_scale(structure: &PermStructure) -> f64 {
    let fan = (structure.channels_in + structure.channels_out) as f64;
    let dsum: usize = structure.axes.iter().map(|a| a.dim).sum();
    (6.0 / fan).sqrt() / (1.0 + dsum as f64)
}

/// Permutation of one axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AxisPerm {
    Identity,
    Global(Vec<usize>),
    /// One permutation per index of the outer axis.
    PerOuter(Vec<Vec<usize>>),
}

/// A permutation of a nested pair's joint `(outer, inner)` grid that may move
/// elements between subsets. Used to check that nesting is not over-shared.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointPerm {
    pub outer: usize,
    pub inner: usize,
    pub map: Vec<usize>,
}

/// Per-axis permutations; position `idx` moves to `pi(idx)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermOperator {
    dims: Vec<usize>,
    roles: Vec<AxisRole>,
    pub perms: Vec<AxisPerm>,
    pub joint: Option<JointPerm>,
}

fn is_bijection(p: &[usize], n: usize) -> bool {
    if p.len() != n {
        return false;
    }
    let mut seen = vec![false; n];
    p.iter().all(|&v| v < n && !std::mem::replace(&mut seen[v], true))
}

fn invert(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, &v) in p.iter().enumerate() {
        inv[v] = i;
    }
    inv
}

fn random_perm<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

impl PermOperator {
    pub fn identity(structure: &PermStructure) -> Self {
        Self {
            dims: structure.dims(),
            roles: structure.axes.iter().map(|a| a.role).collect(),
            perms: vec![AxisPerm::Identity; structure.axes.len()],
            joint: None,
        }
    }

    /// Builds an operator from explicit per-axis permutations, checking that
    /// each one is a bijection and respects the axis role.
    pub fn new(structure: &PermStructure, perms: Vec<AxisPerm>) -> Result<Self> {
        if perms.len() != structure.axes.len() {
            return Err(shape_err(structure.axes.len(), perms.len()));
        }
        for (j, (p, a)) in perms.iter().zip(&structure.axes).enumerate() {
            let ok = match (p, a.role) {
                (AxisPerm::Identity, _) => true,
                (AxisPerm::Global(v), AxisRole::Set) => is_bijection(v, a.dim),
                (AxisPerm::PerOuter(vs), AxisRole::Inner { outer }) => {
                    vs.len() == structure.axes[outer].dim && vs.iter().all(|v| is_bijection(v, a.dim))
                }
                _ => false,
            };
            if !ok {
                return Err(Error::InvalidConfig(format!("permutation for axis {j} is not admissible")));
            }
        }
        let mut op = Self::identity(structure);
        op.perms = perms;
        Ok(op)
    }

    /// A uniformly random admissible operator.
    pub fn random<R: Rng + ?Sized>(structure: &PermStructure, rng: &mut R) -> Self {
        let perms = structure
            .axes
            .iter()
            .map(|a| match a.role {
                AxisRole::Set => AxisPerm::Global(random_perm(a.dim, rng)),
                AxisRole::Outer => AxisPerm::Identity,
                AxisRole::Inner { outer } => AxisPerm::PerOuter(
                    (0..structure.axes[outer].dim)
                        .map(|_| random_perm(a.dim, rng))
                        .collect(),
                ),
            })
            .collect();
        Self::new(structure, perms).expect("random permutations are admissible")
    }

    /// A random permutation of the first nested pair's joint grid that moves
    /// at least one element into another subset.
    pub fn cross_subset<R: Rng + ?Sized>(structure: &PermStructure, rng: &mut R) -> Result<Self> {
        let (inner, outer) = structure
            .axes
            .iter()
            .enumerate()
            .find_map(|(j, a)| match a.role {
                AxisRole::Inner { outer } => Some((j, outer)),
                _ => None,
            })
            .ok_or_else(|| Error::InvalidConfig("structure has no nested pair".into()))?;
        let (d_o, d_i) = (structure.axes[outer].dim, structure.axes[inner].dim);
        if d_o < 2 {
            return Err(Error::InvalidConfig("need at least two subsets".into()));
        }
        let map = loop {
            let p = random_perm(d_o * d_i, rng);
            if p.iter().enumerate().any(|(i, &v)| i / d_i != v / d_i) {
                break p;
            }
        };
        let mut op = Self::identity(structure);
        op.joint = Some(JointPerm { outer, inner, map });
        Ok(op)
    }

    pub fn inverse(&self) -> Self {
        let perms = self
            .perms
            .iter()
            .enumerate()
            .map(|(j, p)| match p {
                AxisPerm::Identity => AxisPerm::Identity,
                AxisPerm::Global(v) => AxisPerm::Global(invert(v)),
                AxisPerm::PerOuter(vs) => {
                    // Outer axes are never moved, so the inverse uses the same subset.
                    let _ = j;
                    AxisPerm::PerOuter(vs.iter().map(|v| invert(v)).collect())
                }
            })
            .collect();
        Self {
            dims: self.dims.clone(),
            roles: self.roles.clone(),
            perms,
            joint: self.joint.as_ref().map(|jp| JointPerm {
                outer: jp.outer,
                inner: jp.inner,
                map: invert(&jp.map),
            }),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Permutation of a single axis as a global map, or `None` when the axis
    /// is permuted per subset or jointly.
    pub fn global(&self, axis: usize) -> Option<Vec<usize>> {
        match &self.perms[axis] {
            AxisPerm::Identity => Some((0..self.dims[axis]).collect()),
            AxisPerm::Global(v) => Some(v.clone()),
            AxisPerm::PerOuter(_) => None,
        }
    }

    /// Destination multi-index of `idx`.
    pub fn map_index(&self, idx: &[usize]) -> Vec<usize> {
        let mut out: Vec<usize> = idx
            .iter()
            .enumerate()
            .map(|(j, &i)| match &self.perms[j] {
                AxisPerm::Identity => i,
                AxisPerm::Global(v) => v[i],
                AxisPerm::PerOuter(vs) => match self.roles[j] {
                    AxisRole::Inner { outer } => vs[idx[outer]][i],
                    _ => i,
                },
            })
            .collect();
        if let Some(jp) = &self.joint {
            let d_i = self.dims[jp.inner];
            let v = jp.map[out[jp.outer] * d_i + out[jp.inner]];
            out[jp.outer] = v / d_i;
            out[jp.inner] = v % d_i;
        }
        out
    }

    /// `out[c, pi(e)] = z[c, e]` for a channel-first tensor.
    pub fn permute(&self, z: &[f64], channels: usize) -> Result<Vec<f64>> {
        let edges: usize = self.dims.iter().product();
        if z.len() != channels * edges {
            return Err(shape_err(channels * edges, z.len()));
        }
        let dest = self.destinations();
        let mut out = vec![0.0; z.len()];
        for c in 0..channels {
            for e in 0..edges {
                out[c * edges + dest[e]] = z[c * edges + e];
            }
        }
        Ok(out)
    }

    /// Flat destination of every flat position.
    pub fn destinations(&self) -> Vec<usize> {
        let edges: usize = self.dims.iter().product();
        let mut strides = vec![1; self.dims.len()];
        for j in (0..self.dims.len().saturating_sub(1)).rev() {
            strides[j] = strides[j + 1] * self.dims[j + 1];
        }
        (0..edges)
            .map(|e| {
                let idx: Vec<usize> = (0..self.dims.len())
                    .map(|j| (e / strides[j]) % self.dims[j])
                    .collect();
                self.map_index(&idx)
                    .iter()
                    .zip(&strides)
                    .map(|(i, s)| i * s)
                    .sum()
            })
            .collect()
    }
}

/// Physical entity behind an axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Entity {
    Ap,
    Ue,
    Antenna,
}

impl Entity {
    pub fn letter(self) -> char {
        match self {
            Entity::Ap => 'L',
            Entity::Ue => 'K',
            Entity::Antenna => 'U',
        }
    }

    pub fn size(self, cfg: &SystemConfig) -> usize {
        match self {
            Entity::Ap => cfg.aps,
            Entity::Ue => cfg.ues,
            Entity::Antenna => cfg.antennas,
        }
    }

    fn from_letter(c: &str) -> Option<Self> {
        match c {
            "L" => Some(Entity::Ap),
            "K" => Some(Entity::Ue),
            "U" => Some(Entity::Antenna),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Precoding,
    Power,
}

impl TaskKind {
    /// Entities of the canonical input tensor.
    pub fn input_entities(self) -> &'static [Entity] {
        &[Entity::Ap, Entity::Ue, Entity::Antenna]
    }

    /// Entities of the canonical output tensor.
    pub fn output_entities(self) -> &'static [Entity] {
        match self {
            TaskKind::Precoding => &[Entity::Ap, Entity::Ue, Entity::Antenna],
            TaskKind::Power => &[Entity::Ap, Entity::Ue],
        }
    }
}

/// Names of the structure rows, in display order.
pub const STRUCTURE_ROWS: [&str; 7] = [
    "1D-GNN-L",
    "1D-GNN-K",
    "1D-GNN-U",
    "2D-GNN-L-K",
    "2D-GNN-L-U",
    "2D-GNN-K-U",
    "3D-GNN-L-K-U",
];

/// Parses a row name like `2D-GNN-L-K` into its axes in canonical order.
pub fn parse_row(name: &str) -> Result<Vec<Entity>> {
    let parts: Vec<&str> = name.split('-').collect();
    let bad = || Error::Unknown(format!("structure row `{name}`"));
    if parts.len() < 3 || parts[1] != "GNN" {
        return Err(bad());
    }
    let d: usize = parts[0]
        .strip_suffix('D')
        .and_then(|s| s.parse().ok())
        .ok_or_else(bad)?;
    let mut axes = Vec::new();
    for p in &parts[2..] {
        axes.push(Entity::from_letter(p).ok_or_else(bad)?);
    }
    let canonical = [Entity::Ap, Entity::Ue, Entity::Antenna];
    let positions: Vec<usize> = axes
        .iter()
        .map(|a| canonical.iter().position(|c| c == a).unwrap())
        .collect();
    if d != axes.len() || positions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(bad());
    }
    Ok(axes)
}

/// Graph over hyper-edges: which entities are permutable axes, which fold
/// into feature channels, and the structure that ties weights together.
#[derive(Debug, Clone)]
pub struct EdgeGraph {
    pub task: TaskKind,
    pub row: String,
    pub nested: bool,
    pub axes: Vec<Entity>,
    /// Input entities folded into channels, in canonical order.
    pub folded_in: Vec<Entity>,
    /// Output entities folded into channels, in canonical order.
    pub folded_out: Vec<Entity>,
    /// Structure with unit channel widths; layers set their own widths.
    pub structure: PermStructure,
    pub layout: Arc<Layout>,
}

/// Builds the edge graph of a structure row for a task. When `nested` is set
/// and the AP axis is present, APs index independent subsets and the antenna
/// axis (if present) is permuted only within each AP.
pub fn build_graph(
    task: TaskKind,
    row: &str,
    nested: bool,
    topological: bool,
    cfg: &SystemConfig,
) -> Result<EdgeGraph> {
    let axes = parse_row(row)?;
    if task == TaskKind::Power && axes.contains(&Entity::Antenna) {
        return Err(Error::Unknown(format!(
            "row `{row}` for power control: the antenna axis is not permutable there"
        )));
    }
    let dims: Vec<usize> = axes.iter().map(|a| a.size(cfg)).collect();
    let ap = axes.iter().position(|&a| a == Entity::Ap);
    let structure = match (nested, ap) {
        (true, Some(o)) => {
            let mut roles: Vec<Axis> = dims
                .iter()
                .map(|&dim| Axis {
                    dim,
                    role: AxisRole::Set,
                })
                .collect();
            roles[o].role = AxisRole::Outer;
            if let Some(u) = axes.iter().position(|&a| a == Entity::Antenna) {
                roles[u].role = AxisRole::Inner { outer: o };
            }
            PermStructure::with_axes(roles, 1, 1, topological)?
        }
        _ => PermStructure::non_nested(&dims, 1, 1, topological)?,
    };
    let folded = |ents: &[Entity]| -> Vec<Entity> {
        ents.iter().copied().filter(|e| !axes.contains(e)).collect()
    };
    let layout = Arc::new(Layout::new(structure.clone())?);
    Ok(EdgeGraph {
        task,
        row: row.to_string(),
        nested: nested && ap.is_some(),
        folded_in: folded(task.input_entities()),
        folded_out: folded(task.output_entities()),
        axes,
        structure,
        layout,
    })
}

impl EdgeGraph {
    pub fn edges(&self) -> usize {
        self.layout.edges()
    }

    /// Neighbour relation `C(e_i, e_j) = t`: the single permutable axis in
    /// which the two edges differ, if any.
    pub fn neighbour_type(&self, a: usize, b: usize) -> Option<usize> {
        self.layout.neighbour_type(a, b)
    }

    /// Entity of each neighbour type.
    pub fn neighbour_entities(&self) -> Vec<Entity> {
        self.structure
            .perm_axes()
            .iter()
            .map(|&j| self.axes[j])
            .collect()
    }

    pub fn block_count(&self) -> usize {
        count_parameters(&self.structure)
    }
}
