//! Integrand recovery from sampled martingales by two independent routes: direct
//! slice-block reading, and the unitary-conjugation pipeline through the
//! displacement martingale U, the composite martingale Y, its creation blocks
//! M_j, and the rescaled differences L_ij. Cross-validating the two routes is
//! the core correctness gate for the whole engine.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::fock::{C64, Factorization, ModelSpace, StateVector, StepFunction, WeightTriple};
use crate::linalg::{expm_apply, hermitian_residual, inverse_with_condition, min_eig_hermitian, spectral_norm, weighted_spectral_norm};
use crate::operators::{ampliate, annihilation, creation, increment, weyl, BasicKind, OperatorMatrix, ProcessSample, Sparse};
use crate::qsi::{qs_integrate, IntegrandQuadruple};
use crate::{QscError, Result};

/// Recovered integrand families plus, per slice, the largest entry of whatever
/// part of the increment does not fit the noise-block pattern (multi-particle
/// content, cross-slice leakage). Zero for anything produced by the slice-sum
/// integrator from block-consistent integrands. The masked variant restricts
/// rows and columns to totals strictly below the ceiling, separating genuine
/// discretization error from ceiling-truncation junk.
#[derive(Debug, Clone)]
pub struct ExtractionResult {
    pub quad: IntegrandQuadruple,
    pub q: WeightTriple,
    pub per_slice_defect: Vec<f64>,
    pub per_slice_defect_masked: Vec<f64>,
}

impl ExtractionResult {
    pub fn max_defect(&self) -> f64 {
        self.per_slice_defect.iter().cloned().fold(0.0, f64::max)
    }

    pub fn max_defect_masked(&self) -> f64 {
        self.per_slice_defect_masked.iter().cloned().fold(0.0, f64::max)
    }
}

/// Full index of the state obtained by adding one particle in slice-`k`
/// channel `i` to each past state; `None` where the ceiling is hit.
fn lift_table(
    model: &Arc<ModelSpace>,
    fact: &Factorization,
    k: usize,
) -> Vec<Vec<Option<u32>>> {
    let d = model.mult.d;
    (0..d)
        .map(|i| {
            fact.past_full
                .iter()
                .map(|&fz| {
                    let meta = model.state(fz as usize);
                    if (meta.total as usize) >= model.ncut {
                        return None;
                    }
                    let mut occ = meta.occ.to_vec();
                    occ[model.mode(k, i)] += 1;
                    model.index_of(meta.init, &occ).map(|x| x as u32)
                })
                .collect()
        })
        .collect()
}

struct SliceBlocks {
    g: Vec<DMatrix<C64>>,
    f: Vec<DMatrix<C64>>,
    e1: Vec<DMatrix<C64>>,
    e4: DMatrix<C64>,
}

/// Reads the noise blocks of one slice increment: rows and columns are past
/// states at the slice's left boundary, optionally lifted by one slice particle.
fn read_slice_blocks(
    delta: &Sparse,
    model: &Arc<ModelSpace>,
    fact: &Factorization,
    lifts: &[Vec<Option<u32>>],
) -> SliceBlocks {
    let d = model.mult.d;
    let np = fact.past_dim();
    let dt = model.dt();
    let sqrt_dt = dt.sqrt();
    // reverse map: full index -> (channel, past position) for lifted states
    let mut unlift: Vec<Option<(usize, u32)>> = vec![None; model.dim()];
    for (i, table) in lifts.iter().enumerate() {
        for (pz, l) in table.iter().enumerate() {
            if let Some(l) = l {
                unlift[*l as usize] = Some((i, pz as u32));
            }
        }
    }
    let zero = DMatrix::<C64>::zeros(np, np);
    let mut g = vec![zero.clone(); d];
    let mut f = vec![zero.clone(); d];
    let mut e1 = vec![zero.clone(); d * d];
    let mut e4 = zero;
    for (pz, &fz) in fact.past_full.iter().enumerate() {
        // vacuum row: dt block and annihilation blocks
        for &(col, val) in &delta.rows()[fz as usize] {
            if let Some(px) = fact_past_pos(fact, col) {
                e4[(pz, px as usize)] = val / C64::new(dt, 0.0);
            } else if let Some((j, px)) = unlift[col as usize] {
                f[j][(pz, px as usize)] = val / C64::new(sqrt_dt, 0.0);
            }
        }
        // lifted rows: creation and conservation blocks
        for i in 0..d {
            let Some(lz) = lifts[i][pz] else { continue };
            for &(col, val) in &delta.rows()[lz as usize] {
                if let Some(px) = fact_past_pos(fact, col) {
                    g[i][(pz, px as usize)] = val / C64::new(sqrt_dt, 0.0);
                } else if let Some((j, px)) = unlift[col as usize] {
                    e1[i * d + j][(pz, px as usize)] = val;
                }
            }
        }
    }
    // the diagonal conservation reading picks up the dt block as well
    let below: Vec<bool> = fact
        .past_full
        .iter()
        .map(|&fz| (model.state(fz as usize).total as usize) < model.ncut)
        .collect();
    for i in 0..d {
        for pz in 0..np {
            for px in 0..np {
                if below[pz] && below[px] {
                    let sub = e4[(pz, px)] * C64::new(dt, 0.0);
                    e1[i * d + i][(pz, px)] -= sub;
                }
            }
        }
    }
    SliceBlocks { g, f, e1, e4 }
}

fn fact_past_pos(fact: &Factorization, col: u32) -> Option<i32> {
    let p = fact.past_pos[col as usize];
    if p >= 0 {
        Some(p)
    } else {
        None
    }
}

/// Direct integrand recovery: for each slice, read the matrix blocks of the
/// increment between slice-occupation levels and promote them to full-space
/// operators carried at the slice's left boundary. The time block is read even
/// though a martingale has none — a nonzero value is a diagnostic.
pub fn extract_blocks(
    sample: &ProcessSample,
    p: WeightTriple,
    q: WeightTriple,
) -> Result<ExtractionResult> {
    let model = &sample.model;
    let d = model.mult.d;
    let n = model.grid.slices;
    let dt = model.dt();
    let mut quad = IntegrandQuadruple::zero(model, p);
    let mut per_slice_defect = Vec::with_capacity(n);
    let mut per_slice_defect_masked = Vec::with_capacity(n);
    let below_full: Vec<bool> = (0..model.dim())
        .map(|idx| (model.state(idx).total as usize) < model.ncut)
        .collect();
    for k in 0..n {
        let fact = model.factorization(k);
        let lifts = lift_table(model, &fact, k);
        let delta = sample.ops[k + 1].sub(&sample.ops[k])?;
        let blocks = read_slice_blocks(&delta.sp, model, &fact, &lifts);
        for i in 0..d {
            quad.e3[i][k] = ampliate(model, &fact, &blocks.g[i]);
            quad.e2[i][k] = ampliate(model, &fact, &blocks.f[i]);
            for j in 0..d {
                quad.e1[i * d + j][k] = ampliate(model, &fact, &blocks.e1[i * d + j]);
            }
        }
        quad.e4[k] = ampliate(model, &fact, &blocks.e4);
        // rebuild the increment from the recovered blocks; what is left over is
        // exactly the content the representation cannot carry
        let mut rebuilt = quad.e4[k].scale(C64::new(dt, 0.0));
        for i in 0..d {
            if quad.e3[i][k].max_abs() != 0.0 {
                let inc = increment(model, BasicKind::Creation { chan: i }, k);
                rebuilt = rebuilt.add(&quad.e3[i][k].mul(&inc)?)?;
            }
            if quad.e2[i][k].max_abs() != 0.0 {
                let inc = increment(model, BasicKind::Annihilation { chan: i }, k);
                rebuilt = rebuilt.add(&quad.e2[i][k].mul(&inc)?)?;
            }
            for j in 0..d {
                if quad.e1[i * d + j][k].max_abs() != 0.0 {
                    let inc = increment(model, BasicKind::Conservation { from: j, to: i }, k);
                    rebuilt = rebuilt.add(&quad.e1[i * d + j][k].mul(&inc)?)?;
                }
            }
        }
        let diff = delta.sub(&rebuilt)?;
        per_slice_defect.push(diff.max_abs());
        per_slice_defect_masked.push(
            diff.sp
                .masked(|r| below_full[r], |c| below_full[c])
                .max_abs(),
        );
    }
    Ok(ExtractionResult { quad, q, per_slice_defect, per_slice_defect_masked })
}

/// Splits the sample into its creation/annihilation part `S` (re-integrated from
/// the recovered blocks) and the remainder `Z = Xi - S`, which carries the
/// conservation content plus any time-block diagnostic.
pub fn build_s_z(
    sample: &ProcessSample,
    ex: &ExtractionResult,
) -> Result<(ProcessSample, ProcessSample)> {
    let model = &sample.model;
    let mut s_quad = ex.quad.clone();
    for fam in s_quad.e1.iter_mut() {
        for op in fam.iter_mut() {
            *op = OperatorMatrix::zero(model);
        }
    }
    for op in s_quad.e4.iter_mut() {
        *op = OperatorMatrix::zero(model);
    }
    let s = qs_integrate(&s_quad)?;
    let mut z_ops = Vec::with_capacity(sample.ops.len());
    for (xi, sk) in sample.ops.iter().zip(&s.ops) {
        z_ops.push(xi.sub(sk)?);
    }
    let z = ProcessSample::new(model, z_ops)?;
    Ok((s, z))
}

/// Discretization schemes for the displacement martingale driven by one channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeylScheme {
    /// Exponential of the generator at each grid point, times the compensating
    /// scalar growth.
    ClosedForm,
    /// First-order recursion for the unitary factor including its dt correction,
    /// times the scalar growth; converges at first order.
    #[serde(alias = "qsde")]
    EulerIto,
    /// Same recursion without the dt correction but still with the scalar
    /// growth; kept to demonstrate that dropping the correction destroys
    /// convergence.
    EulerNaive,
    /// Plain product of increment factors; solves the displacement equation
    /// exactly at the discrete level and is the pipeline default.
    DiscreteProduct,
}

impl WeylScheme {
    pub fn name(&self) -> &'static str {
        match self {
            WeylScheme::ClosedForm => "closed_form",
            WeylScheme::EulerIto => "euler_ito",
            WeylScheme::EulerNaive => "euler_naive",
            WeylScheme::DiscreteProduct => "discrete_product",
        }
    }
}

/// Grid samples of the displacement martingale for one channel. All schemes
/// start at the identity.
pub fn weyl_martingale_u(
    model: &Arc<ModelSpace>,
    chan: usize,
    scheme: WeylScheme,
) -> Result<ProcessSample> {
    let n = model.grid.slices;
    let dt = model.dt();
    let mut ops = Vec::with_capacity(n + 1);
    match scheme {
        WeylScheme::ClosedForm => {
            for k in 0..=n {
                let h = StepFunction::indicator(model.mult.d, n, chan, 0..k, C64::new(1.0, 0.0));
                let mut w = weyl(model, &h);
                w = w.scale(C64::new((0.5 * model.grid.point(k)).exp(), 0.0));
                w.adapted_to = Some(k);
                ops.push(w);
            }
        }
        WeylScheme::EulerIto | WeylScheme::EulerNaive | WeylScheme::DiscreteProduct => {
            let mut acc = OperatorMatrix::identity(model);
            ops.push(acc.clone());
            for k in 0..n {
                let mut factor = OperatorMatrix::identity(model);
                factor = factor.add(&increment(model, BasicKind::Creation { chan }, k))?;
                factor = factor.sub(&increment(model, BasicKind::Annihilation { chan }, k))?;
                if scheme == WeylScheme::EulerIto {
                    factor = factor
                        .sub(&OperatorMatrix::identity(model).scale(C64::new(0.5 * dt, 0.0)))?;
                }
                acc = factor.mul(&acc)?;
                acc.adapted_to = Some(k + 1);
                ops.push(acc.clone());
            }
            if matches!(scheme, WeylScheme::EulerIto | WeylScheme::EulerNaive) {
                for (k, op) in ops.iter_mut().enumerate() {
                    *op = op.scale(C64::new((0.5 * model.grid.point(k)).exp(), 0.0));
                    op.adapted_to = Some(k);
                }
            }
        }
    }
    ProcessSample::new(model, ops)
}

/// State-vector path of the displacement martingale applied to an initial
/// vector, avoiding any dense matrix work; usable at dimensions where the
/// matrix samples are not.
pub fn weyl_u_vector_path(
    model: &Arc<ModelSpace>,
    chan: usize,
    scheme: WeylScheme,
    start: &StateVector,
) -> Result<Vec<StateVector>> {
    let n = model.grid.slices;
    let dt = model.dt();
    let mut out = Vec::with_capacity(n + 1);
    match scheme {
        WeylScheme::ClosedForm => {
            for k in 0..=n {
                let h = StepFunction::indicator(model.mult.d, n, chan, 0..k, C64::new(1.0, 0.0));
                let gen = creation(model, &h).sub(&annihilation(model, &h))?;
                let coeffs = expm_apply(|x| gen.sp.apply(x), &start.coeffs);
                let mut v = StateVector { model: model.clone(), coeffs };
                v = v.scaled(C64::new((0.5 * model.grid.point(k)).exp(), 0.0));
                out.push(v);
            }
        }
        WeylScheme::EulerIto | WeylScheme::EulerNaive | WeylScheme::DiscreteProduct => {
            let mut acc = start.clone();
            out.push(acc.clone());
            for k in 0..n {
                let up = increment(model, BasicKind::Creation { chan }, k).apply(&acc)?;
                let down = increment(model, BasicKind::Annihilation { chan }, k).apply(&acc)?;
                let mut next = acc.add(&up)?.sub(&down)?;
                if scheme == WeylScheme::EulerIto {
                    next = next.sub(&acc.scaled(C64::new(0.5 * dt, 0.0)))?;
                }
                acc = next;
                out.push(acc.clone());
            }
            if matches!(scheme, WeylScheme::EulerIto | WeylScheme::EulerNaive) {
                for (k, v) in out.iter_mut().enumerate() {
                    *v = v.scaled(C64::new((0.5 * model.grid.point(k)).exp(), 0.0));
                }
            }
        }
    }
    Ok(out)
}

fn diag_scale(m: &DMatrix<C64>, row: &[f64], col: &[f64]) -> DMatrix<C64> {
    let mut out = m.clone();
    for r in 0..out.nrows() {
        for c in 0..out.ncols() {
            out[(r, c)] *= C64::new(row[r] * col[c], 0.0);
        }
    }
    out
}

/// Composite martingale for one channel:
/// `Y(t_K) = A^q ( Xi(t_K) A^{-p} U(t_K) - c_i sum_{l<K} dt F*_i(t_l) A^{-p} U(t_l) )`
/// with `c_i = e^{-p2} rho_i^{-p3}`. The subtracted Riemann sum cancels the
/// annihilation residue of the cross term exactly when the integrands stay
/// below the ceiling, so Y has no time block.
pub fn build_y(
    sample: &ProcessSample,
    ex: &ExtractionResult,
    chan: usize,
    u_proc: &ProcessSample,
) -> Result<ProcessSample> {
    let model = &sample.model;
    let p = ex.quad.p;
    let q = ex.q;
    let n = model.grid.slices;
    let dt = model.dt();
    let c_i = (-p.p2).exp() * model.mult.rho[chan].powf(-p.p3);
    let wq: Vec<C64> =
        model.weight_vector(&q).into_iter().map(|x| C64::new(x, 0.0)).collect();
    let wp_inv: Vec<C64> =
        model.weight_vector(&p).into_iter().map(|x| C64::new(1.0 / x, 0.0)).collect();
    let a_q = OperatorMatrix { model: model.clone(), sp: Sparse::diagonal(&wq), adapted_to: None };
    let a_mp =
        OperatorMatrix { model: model.clone(), sp: Sparse::diagonal(&wp_inv), adapted_to: None };
    let mut ops = Vec::with_capacity(n + 1);
    let mut running = OperatorMatrix::zero(model);
    for k in 0..=n {
        let main = sample.ops[k].mul(&a_mp)?.mul(&u_proc.ops[k])?;
        let y = a_q.mul(&main.sub(&running.scale(C64::new(c_i, 0.0)))?)?;
        ops.push(y);
        if k < n {
            let term = ex.quad.e2[chan][k].mul(&a_mp)?.mul(&u_proc.ops[k])?;
            running = running.add(&term.scale(C64::new(dt, 0.0)))?;
        }
    }
    ProcessSample::new(model, ops)
}

/// Creation blocks of the composite martingale's increments, per slice and
/// channel, as matrices on the past space at the slice boundary. Also reports,
/// per slice, the norm of the increment content on past columns that the blocks
/// do not carry: restricted to vacuum and one-particle rows it must vanish
/// (structural zero), while the full leftover is the two-particle cross-term
/// remainder, of order dt per slice.
#[derive(Debug, Clone)]
pub struct MjiRead {
    /// `m[k][j]` — creation block for row channel `j` at slice `k`.
    pub m: Vec<Vec<DMatrix<C64>>>,
    pub masked_residual: Vec<f64>,
    pub full_residual: Vec<f64>,
}

pub fn extract_mji(y: &ProcessSample) -> Result<MjiRead> {
    let model = &y.model;
    let d = model.mult.d;
    let n = model.grid.slices;
    let sqrt_dt = model.dt().sqrt();
    let mut m = Vec::with_capacity(n);
    let mut masked_residual = Vec::with_capacity(n);
    let mut full_residual = Vec::with_capacity(n);
    for k in 0..n {
        let fact = model.factorization(k);
        let lifts = lift_table(model, &fact, k);
        let delta = y.ops[k + 1].sub(&y.ops[k])?;
        let blocks = read_slice_blocks(&delta.sp, model, &fact, &lifts);
        // subtract the carried content back out of the increment on past columns
        let np = fact.past_dim();
        let dim = model.dim();
        let dense = delta.to_dense();
        let mut leftover = DMatrix::<C64>::zeros(dim, np);
        for (px, &fx) in fact.past_full.iter().enumerate() {
            for r in 0..dim {
                leftover[(r, px)] = dense[(r, fx as usize)];
            }
        }
        for j in 0..d {
            for (pz, l) in lifts[j].iter().enumerate() {
                let Some(l) = l else { continue };
                for px in 0..np {
                    leftover[(*l as usize, px)] -=
                        blocks.g[j][(pz, px)] * C64::new(sqrt_dt, 0.0);
                }
            }
        }
        let full = spectral_norm(&leftover);
        // restricted to vacuum and one-particle rows the leftover is a
        // structural zero: one-particle rows were read off, vacuum rows cancel
        // through the compensating time sum
        let mut keep_rows = vec![false; dim];
        for &fz in &fact.past_full {
            keep_rows[fz as usize] = true;
        }
        for table in &lifts {
            for l in table.iter().flatten() {
                keep_rows[*l as usize] = true;
            }
        }
        let mut worst = 0.0f64;
        for r in 0..dim {
            if keep_rows[r] {
                for px in 0..np {
                    worst = worst.max(leftover[(r, px)].norm());
                }
            }
        }
        masked_residual.push(worst);
        full_residual.push(full);
        m.push(blocks.g);
    }
    Ok(MjiRead { m, masked_residual, full_residual })
}

/// Output of the unitary-conjugation route: the conservation family assembled
/// from the rescaled block differences, with the numerical conditioning of the
/// inversions, the worst residual of the block identity linking the read blocks
/// to the direct integrands, and the residual of re-integrating the assembled
/// family against the conservation part of the input.
#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub e1: Vec<Vec<OperatorMatrix>>,
    pub max_condition: f64,
    pub identity_residual: f64,
    pub reintegration_residual: f64,
}

/// Runs the full pipeline for every channel with the given displacement scheme
/// and assembles the conservation integrands:
/// `L_ij = A^{-q} M_j U^{-1} A^{p} - e^{q2} rho_j^{q3} (G_j + delta_ij c_i XiTilde_k)`
/// followed by `E_ij-recovered = e^{p2-q2} rho_j^{-q3} rho_i^{p3} L_ij` stored at
/// row channel j, column channel i. `XiTilde` is the running integral as the
/// one-particle sector of the read slice sees it: the integral re-accumulated
/// with every integrand masked to totals strictly below the ceiling, then
/// masked again on both sides. Masking only the finished integral would be
/// wrong whenever an earlier integrand couples ceiling-grade states downward.
pub fn pipeline_extract(
    sample: &ProcessSample,
    ex: &ExtractionResult,
    scheme: WeylScheme,
) -> Result<PipelineResult> {
    let model = &sample.model;
    let d = model.mult.d;
    let n = model.grid.slices;
    let p = ex.quad.p;
    let q = ex.q;
    let mut e1: Vec<Vec<OperatorMatrix>> = (0..d * d)
        .map(|_| (0..n).map(|_| OperatorMatrix::zero(model)).collect())
        .collect();
    let mut max_condition = 1.0f64;
    let mut identity_residual = 0.0f64;
    let w_q = model.weight_vector(&q);
    let w_p = model.weight_vector(&p);
    // the cross term sees the running integral only through the one-particle
    // sector of the slice being read; that action is the integral of the
    // below-ceiling-masked integrands, not the masked integral
    let below_full: Vec<bool> = (0..model.dim())
        .map(|idx| (model.state(idx).total as usize) < model.ncut)
        .collect();
    let mut masked_quad = ex.quad.clone();
    {
        let mask = |op: &mut OperatorMatrix| {
            op.sp = op.sp.masked(|r| below_full[r], |c| below_full[c]);
        };
        for fam in masked_quad
            .e1
            .iter_mut()
            .chain(masked_quad.e2.iter_mut())
            .chain(masked_quad.e3.iter_mut())
        {
            for op in fam.iter_mut() {
                mask(op);
            }
        }
        for op in masked_quad.e4.iter_mut() {
            mask(op);
        }
    }
    let xi_tilde = qs_integrate(&masked_quad)?;
    for i in 0..d {
        let c_i = (-p.p2).exp() * model.mult.rho[i].powf(-p.p3);
        let u_proc = weyl_martingale_u(model, i, scheme)?;
        let y = build_y(sample, ex, i, &u_proc)?;
        let mji = extract_mji(&y)?;
        for k in 0..n {
            let fact = model.factorization(k);
            let np = fact.past_dim();
            let wq_inv_past: Vec<f64> =
                fact.past_full.iter().map(|&z| 1.0 / w_q[z as usize]).collect();
            let wp_past: Vec<f64> = fact.past_full.iter().map(|&z| w_p[z as usize]).collect();
            let u_past = u_proc.ops[k].past_block(&fact);
            let (u_inv, cond) = inverse_with_condition(&u_past)?;
            max_condition = max_condition.max(cond);
            // doubly masked past block of the sector-consistent running integral
            let mut xi_mask = xi_tilde.ops[k].past_block(&fact);
            let below: Vec<bool> = fact
                .past_full
                .iter()
                .map(|&z| (model.state(z as usize).total as usize) < model.ncut)
                .collect();
            for r in 0..np {
                for c in 0..np {
                    if !(below[r] && below[c]) {
                        xi_mask[(r, c)] = C64::new(0.0, 0.0);
                    }
                }
            }
            for j in 0..d {
                let scale_j = q.p2.exp() * model.mult.rho[j].powf(q.p3);
                let ml = diag_scale(&(&mji.m[k][j] * &u_inv), &wq_inv_past, &wp_past);
                let g_past = ex.quad.e3[j][k].past_block(&fact);
                let mut l = ml.clone();
                l -= &g_past * C64::new(scale_j, 0.0);
                if i == j {
                    l -= &xi_mask * C64::new(scale_j * c_i, 0.0);
                }
                // residual of the block identity against the directly read
                // conservation integrand
                let direct = ex.quad.e1[j * d + i][k].past_block(&fact);
                let ident = &l - direct * C64::new(scale_j * c_i, 0.0);
                identity_residual =
                    identity_residual.max(ident.iter().map(|c| c.norm()).fold(0.0, f64::max));
                let assemble = (p.p2 - q.p2).exp()
                    * model.mult.rho[j].powf(-q.p3)
                    * model.mult.rho[i].powf(p.p3);
                e1[j * d + i][k] = ampliate(model, &fact, &(&l * C64::new(assemble, 0.0)));
            }
        }
    }
    // re-integrate the assembled conservation family and compare against the
    // conservation part of the input
    let (_, z) = build_s_z(sample, ex)?;
    let mut cons_quad = IntegrandQuadruple::zero(model, p);
    cons_quad.e1 = e1.clone();
    let rebuilt = qs_integrate(&cons_quad)?;
    let mut reint = 0.0f64;
    for k in 0..=n {
        // the conservation part may carry a time-block diagnostic; compare
        // against Z minus its own time content
        let mut want = z.ops[k].clone();
        for l in 0..k {
            want = want.sub(&ex.quad.e4[l].scale(C64::new(model.dt(), 0.0)))?;
        }
        reint = reint.max(rebuilt.ops[k].sub(&want)?.max_abs());
    }
    Ok(PipelineResult {
        e1,
        max_condition,
        identity_residual,
        reintegration_residual: reint,
    })
}

/// Largest entrywise distance between two conservation families.
pub fn compare_e1_families(a: &[Vec<OperatorMatrix>], b: &[Vec<OperatorMatrix>]) -> Result<f64> {
    let mut worst = 0.0f64;
    for (fa, fb) in a.iter().zip(b) {
        for (oa, ob) in fa.iter().zip(fb) {
            worst = worst.max(oa.sub(ob)?.max_abs());
        }
    }
    Ok(worst)
}

/// Per-slice Gram sums of the recovered families with their weighted norms;
/// these are the operators whose weak limits the representation controls.
#[derive(Debug, Clone)]
pub struct WeakLimitSums {
    pub g_ops: Vec<DMatrix<C64>>,
    pub f_ops: Vec<DMatrix<C64>>,
    pub g_norms: Vec<f64>,
    pub f_norms: Vec<f64>,
    pub max_hermitian_residual: f64,
    pub min_eigenvalue: f64,
    /// Worst ratio of component norm to the measure density (<= 1 passes).
    pub worst_ratio: f64,
}

pub fn weak_limit_sums(
    ex: &ExtractionResult,
    measure: &crate::martingale::RadonMeasureEstimate,
) -> Result<WeakLimitSums> {
    let model = &ex.quad.model;
    let d = model.mult.d;
    let n = model.grid.slices;
    let p = ex.quad.p;
    let q = ex.q;
    let w2q: Vec<C64> = model
        .weight_vector(&WeightTriple::new(2.0 * q.p1, 2.0 * q.p2, 2.0 * q.p3))
        .into_iter()
        .map(|x| C64::new(x, 0.0))
        .collect();
    let wm2p: Vec<C64> = model
        .weight_vector(&WeightTriple::new(-2.0 * p.p1, -2.0 * p.p2, -2.0 * p.p3))
        .into_iter()
        .map(|x| C64::new(x, 0.0))
        .collect();
    let diag_2q = Sparse::diagonal(&w2q);
    let diag_m2p = Sparse::diagonal(&wm2p);
    let wp_inv: Vec<f64> = model.weight_vector(&p).into_iter().map(|x| 1.0 / x).collect();
    let w_q = model.weight_vector(&q);
    let mut out = WeakLimitSums {
        g_ops: Vec::with_capacity(n),
        f_ops: Vec::with_capacity(n),
        g_norms: Vec::with_capacity(n),
        f_norms: Vec::with_capacity(n),
        max_hermitian_residual: 0.0,
        min_eigenvalue: f64::INFINITY,
        worst_ratio: 0.0,
    };
    for k in 0..n {
        let dim = model.dim();
        let mut g = Sparse::zero(dim);
        let mut f = Sparse::zero(dim);
        for i in 0..d {
            let rho = model.mult.rho[i];
            let e3 = &ex.quad.e3[i][k].sp;
            if e3.nnz() > 0 {
                g = g.add_scaled(
                    &e3.adjoint().mul(&diag_2q).mul(e3),
                    C64::new(rho.powf(2.0 * q.p3), 0.0),
                );
            }
            let e2 = &ex.quad.e2[i][k].sp;
            if e2.nnz() > 0 {
                f = f.add_scaled(
                    &e2.mul(&diag_m2p).mul(&e2.adjoint()),
                    C64::new(rho.powf(-2.0 * p.p3), 0.0),
                );
            }
        }
        let gd = g.to_dense();
        let fd = f.to_dense();
        out.max_hermitian_residual = out
            .max_hermitian_residual
            .max(hermitian_residual(&gd))
            .max(hermitian_residual(&fd));
        out.min_eigenvalue =
            out.min_eigenvalue.min(min_eig_hermitian(&gd)).min(min_eig_hermitian(&fd));
        let gn = weighted_spectral_norm(&gd, &wp_inv, &wp_inv);
        let fn_ = weighted_spectral_norm(&fd, &w_q, &w_q);
        let density = measure.density[k];
        let top = gn.max(fn_);
        if density > 0.0 {
            out.worst_ratio = out.worst_ratio.max(top / density);
        } else if top > 1e-14 {
            out.worst_ratio = f64::INFINITY;
        }
        out.g_norms.push(gn);
        out.f_norms.push(fn_);
        out.g_ops.push(gd);
        out.f_ops.push(fd);
    }
    Ok(out)
}

/// Validation guard used by callers that require the representation hypothesis:
/// the incoming scale must dominate the outgoing one componentwise.
pub fn require_representation_hypothesis(p: &WeightTriple, q: &WeightTriple) -> Result<()> {
    if !p.sub(q).is_nonneg() {
        return Err(QscError::Validation(format!(
            "martingale representation hypothesis requires p - q to be componentwise \
             nonnegative; got p = ({}, {}, {}), q = ({}, {}, {})",
            p.p1, p.p2, p.p3, q.p1, q.p2, q.p3
        )));
    }
    Ok(())
}
