//! Truncated Fock model: occupation basis over (time slice, channel) modes with a
//! global particle ceiling, exponential vectors, bilinear/sesquilinear pairings,
//! and the diagonal weight scalings that define the weighted norms.
//!
//! Conventions, fixed once here and relied on everywhere else:
//! - The one-particle mode for (slice `s`, channel `i`) is the normalized indicator
//!   `1_{[t_s, t_{s+1})} e_i / sqrt(dt)`, so a step function `f` has mode coefficient
//!   `f_i(t_s) * sqrt(dt)`.
//! - Basis order is graded lexicographic: ascending total particle number, then
//!   ascending initial index, then lexicographic in the flattened occupation
//!   (mode index `s*d + i`). The order is stable across runs and serializations.
//! - `pair_bilinear` never conjugates; `inner` conjugates its first argument.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::HashMap;
use std::sync::Arc;

use crate::{QscError, Result};

pub type C64 = Complex64;

/// Channel space configuration: `d` noise channels with per-channel weights
/// `rho_i >= 1` (eigenvalues of the diagonal channel weight operator).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiplicityConfig {
    pub d: usize,
    pub rho: Vec<f64>,
}

/// Initial space configuration: dimension `m` with diagonal weights `alpha_k >= 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialConfig {
    pub m: usize,
    pub alpha: Vec<f64>,
}

/// Uniform time grid on `[0, T]` with `n` slices; `t_k = k*T/n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub slices: usize,
}

impl TimeGrid {
    pub fn dt(&self) -> f64 {
        self.horizon / self.slices as f64
    }

    pub fn point(&self, k: usize) -> f64 {
        self.horizon * k as f64 / self.slices as f64
    }

    /// Maps a time to its grid index, rejecting off-grid values.
    pub fn index_of_time(&self, t: f64) -> Result<usize> {
        let x = t / self.dt();
        let k = x.round() as i64;
        if k < 0 || k > self.slices as i64 || (x - k as f64).abs() > 1e-9 {
            return Err(QscError::NonGridTime(t));
        }
        Ok(k as usize)
    }
}

/// Exponent triple of the diagonal weight operator
/// `A^p = A^{p1} (x) Gamma(e^{p2} B^{p3})`: initial weights to power `p1`,
/// a factor `e^{p2}` and channel weight `rho_i^{p3}` per particle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightTriple {
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
}

impl WeightTriple {
    pub const ZERO: WeightTriple = WeightTriple { p1: 0.0, p2: 0.0, p3: 0.0 };

    pub fn new(p1: f64, p2: f64, p3: f64) -> Self {
        WeightTriple { p1, p2, p3 }
    }

    pub fn neg(&self) -> Self {
        WeightTriple::new(-self.p1, -self.p2, -self.p3)
    }

    pub fn sub(&self, q: &WeightTriple) -> Self {
        WeightTriple::new(self.p1 - q.p1, self.p2 - q.p2, self.p3 - q.p3)
    }

    pub fn is_nonneg(&self) -> bool {
        self.p1 >= 0.0 && self.p2 >= 0.0 && self.p3 >= 0.0
    }

    pub fn is_nonpos(&self) -> bool {
        self.p1 <= 0.0 && self.p2 <= 0.0 && self.p3 <= 0.0
    }

    /// Partial order used by the extraction hypothesis: `self - q` componentwise >= 0.
    pub fn dominates(&self, q: &WeightTriple) -> bool {
        self.sub(q).is_nonneg()
    }
}

/// One basis state: initial index, per-mode occupation, and cached totals.
#[derive(Debug, Clone)]
pub struct StateMeta {
    pub init: u16,
    pub occ: Box<[u8]>,
    pub total: u16,
    /// Per-channel particle counts (summed over slices); feeds the weights.
    pub chan: Box<[u16]>,
}

/// The full discretization context: configs plus the enumerated basis.
#[derive(Debug)]
pub struct ModelSpace {
    pub mult: MultiplicityConfig,
    pub init: InitialConfig,
    pub grid: TimeGrid,
    /// Global particle ceiling.
    pub ncut: usize,
    states: Vec<StateMeta>,
}

fn binomial_u128(n: u128, k: u128) -> u128 {
    let mut acc: u128 = 1;
    for j in 0..k {
        acc = acc.checked_mul(n - j).expect("binomial overflow");
        acc /= j + 1;
    }
    acc
}

/// Closed-form basis count: `m * sum_{k<=N} C(nd+k-1, k)`.
pub fn count_dimension(d: usize, m: usize, n: usize, ncut: usize) -> u128 {
    let modes = (n * d) as u128;
    let mut total: u128 = 0;
    for k in 0..=ncut as u128 {
        total += binomial_u128(modes + k - 1 + u128::from(k == 0), k); // C(modes-1+k, k), C(modes-1,0)=1
    }
    total * m as u128
}

fn compositions_lex(modes: usize, total: usize, out: &mut Vec<Box<[u8]>>) {
    let mut buf = vec![0u8; modes];
    fn rec(buf: &mut Vec<u8>, pos: usize, rem: usize, out: &mut Vec<Box<[u8]>>) {
        if pos + 1 == buf.len() {
            buf[pos] = rem as u8;
            out.push(buf.clone().into_boxed_slice());
            return;
        }
        for c in 0..=rem {
            buf[pos] = c as u8;
            rec(buf, pos + 1, rem - c, out);
        }
        buf[pos] = 0;
    }
    if modes == 0 {
        if total == 0 {
            out.push(Vec::new().into_boxed_slice());
        }
        return;
    }
    rec(&mut buf, 0, total, out);
}

impl ModelSpace {
    /// Enumerates the truncated basis. `budget` caps the dimension; exceeding it
    /// is an error that names the offending count.
    pub fn build(
        mult: MultiplicityConfig,
        init: InitialConfig,
        grid: TimeGrid,
        ncut: usize,
        budget: usize,
    ) -> Result<Arc<ModelSpace>> {
        if mult.d == 0 || mult.rho.len() != mult.d {
            return Err(QscError::Validation("channel count must be >= 1 with one rho per channel".into()));
        }
        if mult.rho.iter().any(|&r| !(r >= 1.0)) {
            return Err(QscError::Validation("every rho_i must be >= 1".into()));
        }
        if init.m == 0 || init.alpha.len() != init.m {
            return Err(QscError::Validation("initial dimension must be >= 1 with one alpha per index".into()));
        }
        if init.alpha.iter().any(|&a| !(a >= 1.0)) {
            return Err(QscError::Validation("every alpha_k must be >= 1".into()));
        }
        if grid.slices == 0 || !(grid.horizon > 0.0) {
            return Err(QscError::Validation("time grid needs horizon > 0 and at least one slice".into()));
        }
        if ncut == 0 {
            return Err(QscError::Validation("particle ceiling must be >= 1".into()));
        }
        let dim = count_dimension(mult.d, init.m, grid.slices, ncut);
        if dim > budget as u128 {
            return Err(QscError::DimensionBudget { dim, budget });
        }

        let modes = grid.slices * mult.d;
        let mut states = Vec::with_capacity(dim as usize);
        let mut occs = Vec::new();
        for total in 0..=ncut {
            occs.clear();
            compositions_lex(modes, total, &mut occs);
            for k in 0..init.m {
                for occ in &occs {
                    let mut chan = vec![0u16; mult.d];
                    for (mode, &c) in occ.iter().enumerate() {
                        chan[mode % mult.d] += c as u16;
                    }
                    states.push(StateMeta {
                        init: k as u16,
                        occ: occ.clone(),
                        total: total as u16,
                        chan: chan.into_boxed_slice(),
                    });
                }
            }
        }
        debug_assert_eq!(states.len() as u128, dim);
        Ok(Arc::new(ModelSpace { mult, init, grid, ncut, states }))
    }

    pub fn dim(&self) -> usize {
        self.states.len()
    }

    pub fn states(&self) -> &[StateMeta] {
        &self.states
    }

    pub fn state(&self, idx: usize) -> &StateMeta {
        &self.states[idx]
    }

    pub fn modes(&self) -> usize {
        self.grid.slices * self.mult.d
    }

    pub fn mode(&self, slice: usize, chan: usize) -> usize {
        slice * self.mult.d + chan
    }

    pub fn dt(&self) -> f64 {
        self.grid.dt()
    }

    fn cmp_key(a_init: u16, a_occ: &[u8], a_total: u16, b: &StateMeta) -> Ordering {
        a_total
            .cmp(&b.total)
            .then(a_init.cmp(&b.init))
            .then_with(|| a_occ.cmp(&b.occ))
    }

    /// Binary search in the canonical order.
    pub fn index_of(&self, init: u16, occ: &[u8]) -> Option<usize> {
        let total: u16 = occ.iter().map(|&c| c as u16).sum();
        if total as usize > self.ncut {
            return None;
        }
        self.states
            .binary_search_by(|s| Self::cmp_key(init, occ, total, s).reverse())
            .ok()
    }

    /// Creation on one mode: returns (target index, sqrt(nu+1)), or None when the
    /// ceiling drops the result.
    pub fn raise(&self, idx: usize, mode: usize) -> Option<(usize, f64)> {
        let s = &self.states[idx];
        if s.total as usize >= self.ncut {
            return None;
        }
        let mut occ = s.occ.to_vec();
        occ[mode] += 1;
        let target = self.index_of(s.init, &occ)?;
        Some((target, f64::from(occ[mode]).sqrt()))
    }

    /// Annihilation on one mode: returns (target index, sqrt(nu)), or None on an
    /// empty mode.
    pub fn lower(&self, idx: usize, mode: usize) -> Option<(usize, f64)> {
        let s = &self.states[idx];
        if s.occ[mode] == 0 {
            return None;
        }
        let nu = f64::from(s.occ[mode]);
        let mut occ = s.occ.to_vec();
        occ[mode] -= 1;
        let target = self.index_of(s.init, &occ)?;
        Some((target, nu.sqrt()))
    }

    /// Diagonal weight of one basis state under `A^p`.
    pub fn weight_of(&self, idx: usize, p: &WeightTriple) -> f64 {
        let s = &self.states[idx];
        let mut w = self.init.alpha[s.init as usize].powf(p.p1) * (p.p2 * f64::from(s.total)).exp();
        for (i, &c) in s.chan.iter().enumerate() {
            if c > 0 {
                w *= self.mult.rho[i].powf(p.p3 * f64::from(c));
            }
        }
        w
    }

    pub fn weight_vector(&self, p: &WeightTriple) -> Vec<f64> {
        (0..self.dim()).map(|i| self.weight_of(i, p)).collect()
    }

    /// True when the state has no particles in slices `>= boundary`.
    pub fn is_past(&self, idx: usize, boundary: usize) -> bool {
        let d = self.mult.d;
        self.states[idx].occ[boundary * d..].iter().all(|&c| c == 0)
    }

    /// Splits the basis along a grid boundary into past (initial space plus slices
    /// `< boundary`) and future occupation labels; label 0 is the future vacuum.
    pub fn factorization(&self, boundary: usize) -> Factorization {
        assert!(boundary <= self.grid.slices, "boundary out of range");
        let cut = boundary * self.mult.d;
        let mut past_full = Vec::new();
        let mut past_pos = vec![-1i32; self.dim()];
        let mut fut_label = vec![0u32; self.dim()];
        let mut fut_occs: Vec<Box<[u8]>> = Vec::new();
        let mut fut_ids: HashMap<Box<[u8]>, u32> = HashMap::new();
        let vac: Box<[u8]> = vec![0u8; self.modes() - cut].into_boxed_slice();
        fut_ids.insert(vac.clone(), 0);
        fut_occs.push(vac);

        for (idx, s) in self.states.iter().enumerate() {
            let fut: Box<[u8]> = s.occ[cut..].to_vec().into_boxed_slice();
            let label = *fut_ids.entry(fut.clone()).or_insert_with(|| {
                fut_occs.push(fut);
                (fut_occs.len() - 1) as u32
            });
            fut_label[idx] = label;
            if label == 0 {
                past_pos[idx] = past_full.len() as i32;
                past_full.push(idx as u32);
            }
        }

        let mut merge = HashMap::new();
        for (idx, s) in self.states.iter().enumerate() {
            let mut occ = s.occ.to_vec();
            for c in occ[cut..].iter_mut() {
                *c = 0;
            }
            let p = self.index_of(s.init, &occ).expect("past projection exists");
            merge.insert((past_pos[p] as u32, fut_label[idx]), idx as u32);
        }

        Factorization { boundary, past_full, past_pos, fut_label, fut_occs, merge }
    }
}

/// Index maps realizing the past/future tensor split at one grid boundary.
#[derive(Debug)]
pub struct Factorization {
    pub boundary: usize,
    /// Full-model indices of past (x) future-vacuum states, in canonical order;
    /// this order coincides with the canonical order of the sub-model on
    /// `boundary` slices.
    pub past_full: Vec<u32>,
    /// Full index -> position in `past_full`, or -1 when the future is occupied.
    pub past_pos: Vec<i32>,
    /// Full index -> future occupation label (0 = future vacuum).
    pub fut_label: Vec<u32>,
    pub fut_occs: Vec<Box<[u8]>>,
    merge: HashMap<(u32, u32), u32>,
}

impl Factorization {
    pub fn past_dim(&self) -> usize {
        self.past_full.len()
    }

    /// Recombines a past position and a future label into a full index, when the
    /// combined particle total fits the ceiling.
    pub fn merge(&self, past_position: u32, label: u32) -> Option<u32> {
        self.merge.get(&(past_position, label)).copied()
    }
}

/// Piecewise-constant test function `grid -> C^d`; value `f_i(t_s)` at `values[s*d+i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFunction {
    pub d: usize,
    pub n: usize,
    pub values: Vec<C64>,
}

impl StepFunction {
    pub fn zero(d: usize, n: usize) -> Self {
        StepFunction { d, n, values: vec![C64::new(0.0, 0.0); d * n] }
    }

    /// Constant value `c` on one channel over all slices.
    pub fn constant(d: usize, n: usize, chan: usize, c: C64) -> Self {
        let mut f = Self::zero(d, n);
        for s in 0..n {
            f.values[s * d + chan] = c;
        }
        f
    }

    /// Value `c` on one channel over `slices` (half-open range of slice indices).
    pub fn indicator(d: usize, n: usize, chan: usize, slices: std::ops::Range<usize>, c: C64) -> Self {
        let mut f = Self::zero(d, n);
        for s in slices {
            f.values[s * d + chan] = c;
        }
        f
    }

    pub fn value(&self, slice: usize, chan: usize) -> C64 {
        self.values[slice * self.d + chan]
    }

    pub fn scaled(&self, c: C64) -> Self {
        StepFunction { d: self.d, n: self.n, values: self.values.iter().map(|v| v * c).collect() }
    }

    /// Restriction to slices `< boundary` (zero elsewhere).
    pub fn truncated_to(&self, boundary: usize) -> Self {
        let mut f = self.clone();
        for s in boundary..self.n {
            for i in 0..self.d {
                f.values[s * self.d + i] = C64::new(0.0, 0.0);
            }
        }
        f
    }

    /// Bilinear discretized pairing `sum_{s,i} f_i(t_s) g_i(t_s) dt` (no conjugation).
    pub fn dot_bilinear(&self, g: &StepFunction, dt: f64) -> C64 {
        assert_eq!((self.d, self.n), (g.d, g.n));
        self.values.iter().zip(&g.values).map(|(a, b)| a * b).sum::<C64>() * dt
    }

    /// Discretized squared norm `sum |f_i(t_s)|^2 dt`.
    pub fn norm_sq(&self, dt: f64) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum::<f64>() * dt
    }

    /// Channel-weighted squared value at one slice: `sum_i rho_i^{2*w} |f_i(t_s)|^2`.
    pub fn weighted_sq_at(&self, slice: usize, rho: &[f64], w: f64) -> f64 {
        (0..self.d)
            .map(|i| rho[i].powf(2.0 * w) * self.value(slice, i).norm_sqr())
            .sum()
    }
}

/// Complex coefficient vector over the canonical basis.
#[derive(Debug, Clone)]
pub struct StateVector {
    pub model: Arc<ModelSpace>,
    pub coeffs: Vec<C64>,
}

impl StateVector {
    pub fn zero(model: &Arc<ModelSpace>) -> Self {
        StateVector { model: model.clone(), coeffs: vec![C64::new(0.0, 0.0); model.dim()] }
    }

    pub fn vacuum(model: &Arc<ModelSpace>) -> Self {
        elementary_vector(model, 0, &StepFunction::zero(model.mult.d, model.grid.slices))
    }

    pub fn same_model(&self, other: &StateVector) -> Result<()> {
        if Arc::ptr_eq(&self.model, &other.model) || self.model.dim() == other.model.dim() {
            Ok(())
        } else {
            Err(QscError::ModelMismatch)
        }
    }

    pub fn norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, c: C64) -> Self {
        StateVector { model: self.model.clone(), coeffs: self.coeffs.iter().map(|x| x * c).collect() }
    }

    pub fn add(&self, other: &StateVector) -> Result<StateVector> {
        self.same_model(other)?;
        Ok(StateVector {
            model: self.model.clone(),
            coeffs: self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn sub(&self, other: &StateVector) -> Result<StateVector> {
        self.same_model(other)?;
        Ok(StateVector {
            model: self.model.clone(),
            coeffs: self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a - b).collect(),
        })
    }
}

/// C-bilinear pairing: sums coefficient products without conjugation.
pub fn pair_bilinear(x: &StateVector, y: &StateVector) -> Result<C64> {
    x.same_model(y)?;
    Ok(x.coeffs.iter().zip(&y.coeffs).map(|(a, b)| a * b).sum())
}

/// Sesquilinear inner product, conjugating the first argument.
pub fn inner(x: &StateVector, y: &StateVector) -> Result<C64> {
    x.same_model(y)?;
    Ok(x.coeffs.iter().zip(&y.coeffs).map(|(a, b)| a.conj() * b).sum())
}

/// Exponential (coherent) vector of a step function, placed at initial index 0:
/// coefficient of a state is `prod_{s,i} (f_i(t_s) sqrt(dt))^nu / sqrt(nu!)`.
pub fn exponential_vector(model: &Arc<ModelSpace>, f: &StepFunction) -> StateVector {
    elementary_vector(model, 0, f)
}

/// `e_k (x) phi_f` for a single initial basis index `k`.
pub fn elementary_vector(model: &Arc<ModelSpace>, init_idx: usize, f: &StepFunction) -> StateVector {
    assert_eq!(f.d, model.mult.d);
    assert_eq!(f.n, model.grid.slices);
    let sqrt_dt = model.dt().sqrt();
    let mut v = StateVector::zero(model);
    'states: for (idx, s) in model.states().iter().enumerate() {
        if s.init as usize != init_idx {
            continue;
        }
        let mut c = C64::new(1.0, 0.0);
        for (mode, &nu) in s.occ.iter().enumerate() {
            if nu == 0 {
                continue;
            }
            let amp = f.values[mode] * sqrt_dt;
            if amp.norm_sqr() == 0.0 {
                continue 'states;
            }
            let mut fact = 1.0f64;
            for j in 1..=nu as u64 {
                fact *= j as f64;
            }
            c *= amp.powu(nu as u32) / fact.sqrt();
        }
        v.coeffs[idx] = c;
    }
    v
}

/// `u (x) phi_f` for an arbitrary initial-space vector `u`.
pub fn tensor_with_initial(model: &Arc<ModelSpace>, u: &[C64], f: &StepFunction) -> StateVector {
    assert_eq!(u.len(), model.init.m);
    let mut v = StateVector::zero(model);
    for (k, &uk) in u.iter().enumerate() {
        if uk.norm_sqr() == 0.0 {
            continue;
        }
        let part = elementary_vector(model, k, f);
        for (c, p) in v.coeffs.iter_mut().zip(part.coeffs) {
            *c += uk * p;
        }
    }
    v
}

/// Diagonal rescaling by the per-state weights of `A^p`.
pub fn apply_weight(p: &WeightTriple, v: &StateVector) -> StateVector {
    let w = v.model.weight_vector(p);
    StateVector {
        model: v.model.clone(),
        coeffs: v.coeffs.iter().zip(w).map(|(c, wi)| c * wi).collect(),
    }
}

/// `|| A^p v ||` in the unweighted norm.
pub fn weighted_norm(p: &WeightTriple, v: &StateVector) -> f64 {
    apply_weight(p, v).norm()
}

/// Exact tail norm of the truncation gap: `sqrt(sum_{k>N} ||f||^{2k} / k!)` with
/// `||f||^2` the discretized squared norm. Drives oracle-comparison tolerances.
pub fn truncation_bound(f: &StepFunction, ncut: usize, dt: f64) -> f64 {
    let x = f.norm_sq(dt);
    if x == 0.0 {
        return 0.0;
    }
    // term_k = x^k / k!, starting at k = N+1
    let mut term = 1.0f64;
    for k in 1..=ncut + 1 {
        term *= x / k as f64;
    }
    let mut tail = 0.0f64;
    let mut k = ncut + 1;
    while term > tail * 1e-18 + 1e-300 {
        tail += term;
        k += 1;
        term *= x / k as f64;
    }
    tail.sqrt()
}

/// Truncated exponential `sum_{k<=N} z^k / k!`.
pub fn truncated_exp(z: C64, ncut: usize) -> C64 {
    let mut acc = C64::new(1.0, 0.0);
    let mut term = C64::new(1.0, 0.0);
    for k in 1..=ncut {
        term *= z / k as f64;
        acc += term;
    }
    acc
}
