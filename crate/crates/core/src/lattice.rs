//! Quantized lattices `[X]_η`, discrete sets on them, and the discrete
//! interior/outer operators with kernel-metric balls.

use thiserror::Error;

use crate::metric::{IntervalBox, MetricContext, MetricError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatticeError {
    #[error("quantization must be positive, got {0:?}")]
    BadEta(Vec<f64>),
    #[error("lattice dimension {eta} does not match bounds dimension {bounds}")]
    Arity { eta: usize, bounds: usize },
    #[error("no lattice point inside the bounds along axis {0}")]
    EmptyAxis(usize),
    #[error("malformed set line {0:?}")]
    Parse(String),
}

/// Points `x_j = z_j (2/√n) η_j` with integer `z` inside an axis-aligned box.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    eta: Vec<f64>,
    spacing: Vec<f64>,
    zmin: Vec<i64>,
    counts: Vec<usize>,
    strides: Vec<usize>,
    len: usize,
}

impl Lattice {
    pub fn new(eta: &[f64], bounds: &IntervalBox) -> Result<Self, LatticeError> {
        let n = eta.len();
        if n == 0 || eta.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return Err(LatticeError::BadEta(eta.to_vec()));
        }
        if bounds.dim() != n {
            return Err(LatticeError::Arity { eta: n, bounds: bounds.dim() });
        }
        let scale = 2.0 / (n as f64).sqrt();
        let spacing: Vec<f64> = eta.iter().map(|e| scale * e).collect();
        let mut zmin = Vec::with_capacity(n);
        let mut counts = Vec::with_capacity(n);
        for j in 0..n {
            let s = spacing[j];
            let mut lo = (bounds.lower[j] / s).ceil() as i64;
            while (lo as f64) * s < bounds.lower[j] {
                lo += 1;
            }
            while ((lo - 1) as f64) * s >= bounds.lower[j] {
                lo -= 1;
            }
            let mut hi = (bounds.upper[j] / s).floor() as i64;
            while (hi as f64) * s > bounds.upper[j] {
                hi -= 1;
            }
            while ((hi + 1) as f64) * s <= bounds.upper[j] {
                hi += 1;
            }
            if hi < lo {
                return Err(LatticeError::EmptyAxis(j));
            }
            zmin.push(lo);
            counts.push((hi - lo + 1) as usize);
        }
        let mut strides = vec![1; n];
        for j in (0..n.saturating_sub(1)).rev() {
            strides[j] = strides[j + 1] * counts[j + 1];
        }
        let len = counts.iter().product();
        Ok(Self { eta: eta.to_vec(), spacing, zmin, counts, strides, len })
    }

    pub fn dim(&self) -> usize {
        self.eta.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn eta(&self) -> &[f64] {
        &self.eta
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn zmin(&self) -> &[i64] {
        &self.zmin
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    /// Zero-based per-axis coordinates of a flat index.
    pub fn local(&self, idx: usize) -> Vec<usize> {
        let mut out = vec![0; self.dim()];
        self.local_into(idx, &mut out);
        out
    }

    pub fn local_into(&self, mut idx: usize, out: &mut [usize]) {
        for (o, s) in out.iter_mut().zip(&self.strides) {
            *o = idx / s;
            idx %= s;
        }
    }

    pub fn index_local(&self, c: &[usize]) -> usize {
        c.iter().zip(&self.strides).map(|(a, s)| a * s).sum()
    }

    /// Integer tuple `z` of a flat index.
    pub fn coords(&self, idx: usize) -> Vec<i64> {
        self.local(idx).iter().zip(&self.zmin).map(|(c, z)| *c as i64 + z).collect()
    }

    pub fn index_of(&self, z: &[i64]) -> Option<usize> {
        let mut idx = 0;
        for j in 0..self.dim() {
            let c = z[j] - self.zmin[j];
            if c < 0 || c as usize >= self.counts[j] {
                return None;
            }
            idx += c as usize * self.strides[j];
        }
        Some(idx)
    }

    /// Position along `axis` of zero-based coordinate `c`.
    pub fn axis_value(&self, axis: usize, c: usize) -> f64 {
        (c as i64 + self.zmin[axis]) as f64 * self.spacing[axis]
    }

    pub fn point(&self, idx: usize) -> Vec<f64> {
        self.local(idx).iter().enumerate().map(|(j, c)| self.axis_value(j, *c)).collect()
    }

    /// Nearest integer tuple of `x` (not restricted to the domain).
    pub fn nearest_coords(&self, x: &[f64]) -> Vec<i64> {
        x.iter().zip(&self.spacing).map(|(v, s)| (v / s).round() as i64).collect()
    }

    pub fn nearest(&self, x: &[f64]) -> Option<usize> {
        self.index_of(&self.nearest_coords(x))
    }

    /// Box spanned by the lattice points.
    pub fn hull(&self) -> IntervalBox {
        IntervalBox::new(
            (0..self.dim()).map(|j| self.axis_value(j, 0)).collect(),
            (0..self.dim()).map(|j| self.axis_value(j, self.counts[j] - 1)).collect(),
        )
    }

    /// Zero-based index range of cells whose center lies in `[lo, hi]` along
    /// `axis`, unclipped (may be negative or beyond the domain).
    pub fn cell_range(&self, axis: usize, lo: f64, hi: f64) -> (i64, i64) {
        let s = self.spacing[axis];
        let z0 = self.zmin[axis];
        let mut a = (lo / s).ceil() as i64;
        while ((a - 1) as f64) * s >= lo {
            a -= 1;
        }
        while (a as f64) * s < lo {
            a += 1;
        }
        let mut b = (hi / s).floor() as i64;
        while ((b + 1) as f64) * s <= hi {
            b += 1;
        }
        while (b as f64) * s > hi {
            b -= 1;
        }
        (a - z0, b - z0)
    }
}

/// Membership vector over the cells of a lattice.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LatticeSet {
    bits: Vec<bool>,
}

impl LatticeSet {
    pub fn empty(len: usize) -> Self {
        Self { bits: vec![false; len] }
    }

    pub fn full(len: usize) -> Self {
        Self { bits: vec![true; len] }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn from_indices(len: usize, idx: impl IntoIterator<Item = usize>) -> Self {
        let mut s = Self::empty(len);
        for i in idx {
            s.bits[i] = true;
        }
        s
    }

    pub fn universe_len(&self) -> usize {
        self.bits.len()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn insert(&mut self, i: usize) {
        self.bits[i] = true;
    }

    pub fn remove(&mut self, i: usize) {
        self.bits[i] = false;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_subset(&self, other: &LatticeSet) -> bool {
        self.bits.iter().zip(&other.bits).all(|(a, b)| !*a || *b)
    }

    pub fn intersection(&self, other: &LatticeSet) -> LatticeSet {
        Self { bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect() }
    }

    pub fn union(&self, other: &LatticeSet) -> LatticeSet {
        Self { bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect() }
    }

    /// Sorted integer tuples, one per line.
    pub fn to_lines(&self, lattice: &Lattice) -> String {
        let mut out = String::new();
        for i in self.iter() {
            let z: Vec<String> = lattice.coords(i).iter().map(|v| v.to_string()).collect();
            out.push_str(&z.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_lines(lattice: &Lattice, text: &str) -> Result<Self, LatticeError> {
        let mut s = Self::empty(lattice.len());
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let z: Vec<i64> = line
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| LatticeError::Parse(line.into())))
                .collect::<Result<_, _>>()?;
            if z.len() != lattice.dim() {
                return Err(LatticeError::Parse(line.into()));
            }
            let i = lattice.index_of(&z).ok_or_else(|| LatticeError::Parse(line.into()))?;
            s.insert(i);
        }
        Ok(s)
    }
}

/// Integer offsets of the union of kernel-metric balls `⋃_i B̃_{d_i}(0; γ_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Stencil {
    offsets: Vec<Vec<i64>>,
    reach: Vec<i64>,
}

/// Relative slack so that cells exactly on a ball boundary are included.
const BALL_SLACK: f64 = 1e-9;

impl Stencil {
    pub fn ball(lattice: &Lattice, ctx: &MetricContext, gamma: &[f64]) -> Result<Self, MetricError> {
        let r2 = ctx.ball_sq_radii(gamma)?;
        let ext = ctx.ball_extents(&r2);
        let n = lattice.dim();
        let reach: Vec<i64> = (0..n)
            .map(|j| (ext[j] * (1.0 + BALL_SLACK) / lattice.spacing()[j]).floor() as i64)
            .collect();
        let mut offsets = Vec::new();
        let mut k: Vec<i64> = reach.iter().map(|r| -r).collect();
        loop {
            let inside = r2.iter().enumerate().any(|(i, r)| {
                let w: f64 = (0..n)
                    .map(|j| {
                        let d = k[j] as f64 * lattice.spacing()[j];
                        d * d * ctx.inv_lx2[i][j]
                    })
                    .sum();
                w <= r * (1.0 + BALL_SLACK)
            });
            if inside {
                offsets.push(k.clone());
            }
            // odometer increment
            let mut j = n;
            loop {
                if j == 0 {
                    return Ok(Self { offsets, reach });
                }
                j -= 1;
                if k[j] < reach[j] {
                    k[j] += 1;
                    break;
                }
                k[j] = -reach[j];
            }
        }
    }

    pub fn from_offsets(offsets: Vec<Vec<i64>>) -> Self {
        let n = offsets.first().map_or(0, |o| o.len());
        let reach = (0..n).map(|j| offsets.iter().map(|o| o[j].abs()).max().unwrap_or(0)).collect();
        Self { offsets, reach }
    }

    pub fn offsets(&self) -> &[Vec<i64>] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Largest absolute offset per axis.
    pub fn reach(&self) -> &[i64] {
        &self.reach
    }
}

fn shifted(lattice: &Lattice, c: &[usize], k: &[i64]) -> Option<usize> {
    let mut idx = 0;
    for j in 0..c.len() {
        let v = c[j] as i64 + k[j];
        if v < 0 || v as usize >= lattice.counts()[j] {
            return None;
        }
        idx += v as usize * lattice.strides()[j];
    }
    Some(idx)
}

/// `⋂_i Ĩnt_{d_i}(set; γ_i)`: members whose whole stencil neighbourhood is in
/// the set. Cells outside the lattice domain count as non-members.
pub fn int_shrink(lattice: &Lattice, set: &LatticeSet, stencil: &Stencil) -> LatticeSet {
    let mut out = LatticeSet::empty(lattice.len());
    let mut c = vec![0; lattice.dim()];
    for i in set.iter() {
        lattice.local_into(i, &mut c);
        let keep = stencil
            .offsets()
            .iter()
            .all(|k| shifted(lattice, &c, k).is_some_and(|t| set.contains(t)));
        if keep {
            out.insert(i);
        }
    }
    out
}

/// Result of a dilation; `escaped` marks neighbourhoods leaving the domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Grown {
    pub set: LatticeSet,
    pub escaped: bool,
}

impl Grown {
    pub fn is_subset(&self, other: &LatticeSet) -> bool {
        !self.escaped && self.set.is_subset(other)
    }
}

/// `⋃_i Õut_{d_i}(set; γ_i)`.
pub fn out_grow(lattice: &Lattice, set: &LatticeSet, stencil: &Stencil) -> Grown {
    let mut out = LatticeSet::empty(lattice.len());
    let mut escaped = false;
    let mut c = vec![0; lattice.dim()];
    for i in set.iter() {
        lattice.local_into(i, &mut c);
        for k in stencil.offsets() {
            match shifted(lattice, &c, k) {
                Some(t) => out.insert(t),
                None => escaped = true,
            }
        }
    }
    Grown { set: out, escaped }
}

/// Summed-volume table answering "how many members lie in this cell box".
#[derive(Debug, Clone)]
pub struct BoxCounter {
    table: Vec<u32>,
    dims: Vec<usize>,
    strides: Vec<usize>,
}

impl BoxCounter {
    pub fn new(lattice: &Lattice, set: &LatticeSet) -> Self {
        let dims: Vec<usize> = lattice.counts().iter().map(|c| c + 1).collect();
        let n = dims.len();
        let mut strides = vec![1; n];
        for j in (0..n.saturating_sub(1)).rev() {
            strides[j] = strides[j + 1] * dims[j + 1];
        }
        let mut table = vec![0u32; dims.iter().product()];
        let mut c = vec![0; n];
        for i in set.iter() {
            lattice.local_into(i, &mut c);
            let t: usize = c.iter().zip(&strides).map(|(a, s)| (a + 1) * s).sum();
            table[t] = 1;
        }
        for j in 0..n {
            let s = strides[j];
            for t in 0..table.len() {
                if (t / s) % dims[j] > 0 {
                    table[t] += table[t - s];
                }
            }
        }
        Self { table, dims, strides }
    }

    /// Members in the inclusive zero-based box `[lo, hi]`.
    pub fn count(&self, lo: &[usize], hi: &[usize]) -> u32 {
        let n = self.dims.len();
        let mut total: i64 = 0;
        for mask in 0..(1usize << n) {
            let mut t = 0;
            let mut neg = false;
            let mut zero = false;
            for j in 0..n {
                let v = if mask >> j & 1 == 1 {
                    neg = !neg;
                    if lo[j] == 0 {
                        zero = true;
                    }
                    lo[j]
                } else {
                    hi[j] + 1
                };
                t += v * self.strides[j];
            }
            if zero {
                continue;
            }
            let v = self.table[t] as i64;
            total += if neg { -v } else { v };
        }
        total as u32
    }

    pub fn box_full(&self, lo: &[usize], hi: &[usize]) -> bool {
        let vol: usize = lo.iter().zip(hi).map(|(a, b)| b - a + 1).product();
        self.count(lo, hi) as usize == vol
    }
}

/// Squared Euclidean distance from every cell center to the nearest member,
/// `f64::INFINITY` everywhere when the set is empty.
pub fn squared_distance_transform(lattice: &Lattice, set: &LatticeSet) -> Vec<f64> {
    let mut f: Vec<f64> = set.bits().iter().map(|b| if *b { 0.0 } else { f64::INFINITY }).collect();
    let n = lattice.dim();
    for axis in 0..n {
        let m = lattice.counts()[axis];
        let stride = lattice.strides()[axis];
        let s2 = lattice.spacing()[axis].powi(2);
        let mut line = vec![0.0; m];
        let mut out = vec![0.0; m];
        for start in 0..lattice.len() {
            if (start / stride) % m != 0 {
                continue;
            }
            for (q, l) in line.iter_mut().enumerate() {
                *l = f[start + q * stride];
            }
            edt_1d(&line, s2, &mut out);
            for (q, o) in out.iter().enumerate() {
                f[start + q * stride] = *o;
            }
        }
    }
    f
}

/// Lower envelope of parabolas `s2 (q − p)² + f(p)`.
fn edt_1d(f: &[f64], s2: f64, out: &mut [f64]) {
    let m = f.len();
    let sites: Vec<usize> = (0..m).filter(|&p| f[p].is_finite()).collect();
    if sites.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let inter = |p: usize, q: usize| -> f64 {
        let (pf, qf) = (p as f64, q as f64);
        ((f[q] / s2 + qf * qf) - (f[p] / s2 + pf * pf)) / (2.0 * (qf - pf))
    };
    let mut v: Vec<usize> = Vec::with_capacity(sites.len());
    let mut z: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    for &q in &sites {
        while let Some(&p) = v.last() {
            if inter(p, q) <= z[z.len() - 1] {
                v.pop();
                z.pop();
            } else {
                break;
            }
        }
        if v.is_empty() {
            z.clear();
            z.push(f64::NEG_INFINITY);
        } else {
            let p = v[v.len() - 1];
            z.push(inter(p, q));
        }
        v.push(q);
    }
    z.push(f64::INFINITY);
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = s2 * d * d + f[p];
    }
}
