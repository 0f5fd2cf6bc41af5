//! File interchange: model descriptors (JSON), basis dumps (CSV), operator and
//! process dumps (CSV triplets), quadruple descriptors (JSON), and measure
//! files (JSON). All floats are written in exponent form with shortest
//! round-trip mantissas, so dump-then-parse is exact and output is byte-stable.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::fock::{
    C64, InitialConfig, ModelSpace, MultiplicityConfig, TimeGrid, WeightTriple,
};
use crate::martingale::{RadonMeasureEstimate, RegularityReport};
use crate::operators::{OperatorMatrix, ProcessSample, Sparse};
use crate::qsi::IntegrandQuadruple;
use crate::represent::ExtractionResult;
use crate::{QscError, Result};

/// Basis-dimension budget: the `QSC_MAX_DIM` environment variable, or a default
/// that keeps dense per-slice blocks comfortably in memory.
pub fn default_budget() -> usize {
    std::env::var("QSC_MAX_DIM")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(200_000)
}

/// Serializable model description: channel count `d` with channel weights
/// `rho`, initial dimension `m` with initial weights `alpha`, horizon `T`,
/// slice count `n`, and particle ceiling `N`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelDescriptor {
    pub d: usize,
    pub rho: Vec<f64>,
    pub m: usize,
    pub alpha: Vec<f64>,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub n: usize,
    #[serde(rename = "N")]
    pub ncut: usize,
}

impl ModelDescriptor {
    pub fn build(&self, budget: usize) -> Result<Arc<ModelSpace>> {
        ModelSpace::build(
            MultiplicityConfig { d: self.d, rho: self.rho.clone() },
            InitialConfig { m: self.m, alpha: self.alpha.clone() },
            TimeGrid { horizon: self.horizon, slices: self.n },
            self.ncut,
            budget,
        )
    }

    pub fn from_model(model: &ModelSpace) -> Self {
        ModelDescriptor {
            d: model.mult.d,
            rho: model.mult.rho.clone(),
            m: model.init.m,
            alpha: model.init.alpha.clone(),
            horizon: model.grid.horizon,
            n: model.grid.slices,
            ncut: model.ncut,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("descriptor serialization cannot fail")
    }
}

/// Canonical basis listing: `index,init,occ_0,..,occ_{nd-1}` with occupation
/// columns flattened slice-major (slice 0 channels first).
pub fn basis_dump_csv(model: &ModelSpace) -> String {
    let modes = model.modes();
    let mut out = String::from("index,init");
    for mode in 0..modes {
        out.push_str(&format!(",occ_{mode}"));
    }
    out.push('\n');
    for idx in 0..model.dim() {
        let s = model.state(idx);
        out.push_str(&format!("{idx},{}", s.init));
        for &o in s.occ.iter() {
            out.push_str(&format!(",{o}"));
        }
        out.push('\n');
    }
    out
}

fn fmt_c(v: C64) -> String {
    format!("{:e},{:e}", v.re, v.im)
}

fn parse_f(field: &str, line_no: usize) -> Result<f64> {
    field
        .trim()
        .parse()
        .map_err(|_| QscError::Parse(format!("line {line_no}: bad float {field:?}")))
}

fn parse_u(field: &str, line_no: usize) -> Result<usize> {
    field
        .trim()
        .parse()
        .map_err(|_| QscError::Parse(format!("line {line_no}: bad index {field:?}")))
}

fn is_header(line: &str) -> bool {
    line.chars().next().is_some_and(|c| c.is_ascii_alphabetic())
}

/// Operator dump: `row,col,re,im` triplet lines over the canonical basis
/// ordering, sorted by row then column.
pub fn operator_to_csv(op: &OperatorMatrix) -> String {
    let mut out = String::from("row,col,re,im\n");
    for (r, row) in op.sp.rows().iter().enumerate() {
        let mut entries: Vec<&(u32, C64)> = row.iter().collect();
        entries.sort_by_key(|(c, _)| *c);
        for (c, v) in entries {
            out.push_str(&format!("{r},{c},{}\n", fmt_c(*v)));
        }
    }
    out
}

/// Parses an operator dump against `model`'s basis. The adaptedness certificate
/// is left empty: files carry no claim about which slices the operator touches.
pub fn operator_from_csv(model: &Arc<ModelSpace>, text: &str) -> Result<OperatorMatrix> {
    let dim = model.dim();
    let mut trips = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (no == 0 && is_header(line)) {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(QscError::Parse(format!("line {}: expected row,col,re,im", no + 1)));
        }
        let r = parse_u(parts[0], no + 1)?;
        let c = parse_u(parts[1], no + 1)?;
        if r >= dim || c >= dim {
            return Err(QscError::Parse(format!("line {}: index beyond basis dimension {dim}", no + 1)));
        }
        let v = C64::new(parse_f(parts[2], no + 1)?, parse_f(parts[3], no + 1)?);
        trips.push((r as u32, c as u32, v));
    }
    Ok(OperatorMatrix {
        model: model.clone(),
        sp: Sparse::from_triplets(dim, trips),
        adapted_to: None,
    })
}

/// Process dump: `time_index,row,col,re,im` lines for every grid point with a
/// nonzero operator; absent time indices decode to the zero operator.
pub fn process_to_csv(sample: &ProcessSample) -> String {
    let mut out = String::from("time_index,row,col,re,im\n");
    for (k, op) in sample.ops.iter().enumerate() {
        for (r, row) in op.sp.rows().iter().enumerate() {
            let mut entries: Vec<&(u32, C64)> = row.iter().collect();
            entries.sort_by_key(|(c, _)| *c);
            for (c, v) in entries {
                out.push_str(&format!("{k},{r},{c},{}\n", fmt_c(*v)));
            }
        }
    }
    out
}

pub fn process_from_csv(model: &Arc<ModelSpace>, text: &str) -> Result<ProcessSample> {
    let dim = model.dim();
    let points = model.grid.slices + 1;
    let mut trips: Vec<Vec<(u32, u32, C64)>> = vec![Vec::new(); points];
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (no == 0 && is_header(line)) {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(QscError::Parse(format!(
                "line {}: expected time_index,row,col,re,im",
                no + 1
            )));
        }
        let k = parse_u(parts[0], no + 1)?;
        if k >= points {
            return Err(QscError::Parse(format!(
                "line {}: time index {k} beyond grid ({} points)",
                no + 1,
                points
            )));
        }
        let r = parse_u(parts[1], no + 1)?;
        let c = parse_u(parts[2], no + 1)?;
        if r >= dim || c >= dim {
            return Err(QscError::Parse(format!("line {}: index beyond basis dimension {dim}", no + 1)));
        }
        let v = C64::new(parse_f(parts[3], no + 1)?, parse_f(parts[4], no + 1)?);
        trips[k].push((r as u32, c as u32, v));
    }
    let ops = trips
        .into_iter()
        .map(|t| OperatorMatrix {
            model: model.clone(),
            sp: Sparse::from_triplets(dim, t),
            adapted_to: None,
        })
        .collect();
    ProcessSample::new(model, ops)
}

/// One integrand position in a quadruple descriptor: a preset name (`"zero"`,
/// `"identity"`, `"scaled:<c>"`) or a reference to an operator dump file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum OperatorEntry {
    Preset(String),
    File { file: String },
}

/// Either one entry reused on every slice, or one entry per slice.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum EntrySpec {
    Constant(OperatorEntry),
    PerSlice(Vec<OperatorEntry>),
}

/// Serializable integrand quadruple. Conservation keys are `"to,from"`
/// (0-based), matching the `dL_{to+1}{from+1}` increment labels; annihilation
/// and creation keys are channel indices. Omitted families are zero.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct QuadrupleDescriptor {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<WeightTriple>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub conservation: BTreeMap<String, EntrySpec>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub annihilation: BTreeMap<String, EntrySpec>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub creation: BTreeMap<String, EntrySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<EntrySpec>,
}

fn resolve_entry(
    model: &Arc<ModelSpace>,
    entry: &OperatorEntry,
    slice: usize,
    base: &Path,
) -> Result<OperatorMatrix> {
    match entry {
        OperatorEntry::Preset(name) => {
            if name == "zero" {
                return Ok(OperatorMatrix::zero(model));
            }
            if name == "identity" {
                return Ok(OperatorMatrix::identity(model));
            }
            if let Some(cstr) = name.strip_prefix("scaled:") {
                let c: f64 = cstr
                    .parse()
                    .map_err(|_| QscError::Parse(format!("bad scale in preset {name:?}")))?;
                return Ok(OperatorMatrix::identity(model).scale(C64::new(c, 0.0)));
            }
            Err(QscError::Parse(format!(
                "unknown operator preset {name:?} (expected zero, identity, scaled:<c>, or a file reference)"
            )))
        }
        OperatorEntry::File { file } => {
            let text = std::fs::read_to_string(base.join(file))?;
            let mut op = operator_from_csv(model, &text)?;
            // a file placed at slice k is taken at its word as adapted there;
            // the adaptedness check scenario exists to audit that claim
            op.adapted_to = Some(slice);
            Ok(op)
        }
    }
}

fn resolve_spec(
    model: &Arc<ModelSpace>,
    spec: &EntrySpec,
    base: &Path,
) -> Result<Vec<OperatorMatrix>> {
    let n = model.grid.slices;
    match spec {
        EntrySpec::Constant(e) => (0..n).map(|k| resolve_entry(model, e, k, base)).collect(),
        EntrySpec::PerSlice(list) => {
            if list.len() != n {
                return Err(QscError::Validation(format!(
                    "per-slice entry list has {} items, grid has {n} slices",
                    list.len()
                )));
            }
            list.iter()
                .enumerate()
                .map(|(k, e)| resolve_entry(model, e, k, base))
                .collect()
        }
    }
}

fn parse_chan(key: &str, d: usize) -> Result<usize> {
    let i: usize = key
        .trim()
        .parse()
        .map_err(|_| QscError::Parse(format!("bad channel key {key:?}")))?;
    if i >= d {
        return Err(QscError::Validation(format!("channel key {key:?} out of range (d = {d})")));
    }
    Ok(i)
}

impl QuadrupleDescriptor {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("descriptor serialization cannot fail")
    }

    /// Builds the quadruple over `model`, reading file references relative to
    /// `base`. `p` defaults to the descriptor's triple, then to zero.
    pub fn resolve(
        &self,
        model: &Arc<ModelSpace>,
        base: &Path,
        p_override: Option<WeightTriple>,
    ) -> Result<IntegrandQuadruple> {
        let d = model.mult.d;
        let p = p_override.or(self.p).unwrap_or(WeightTriple::ZERO);
        let mut quad = IntegrandQuadruple::zero(model, p);
        for (key, spec) in &self.conservation {
            let (to_s, from_s) = key
                .split_once(',')
                .ok_or_else(|| QscError::Parse(format!("conservation key {key:?} is not \"to,from\"")))?;
            let to = parse_chan(to_s, d)?;
            let from = parse_chan(from_s, d)?;
            quad.e1[to * d + from] = resolve_spec(model, spec, base)?;
        }
        for (key, spec) in &self.annihilation {
            let i = parse_chan(key, d)?;
            quad.e2[i] = resolve_spec(model, spec, base)?;
        }
        for (key, spec) in &self.creation {
            let i = parse_chan(key, d)?;
            quad.e3[i] = resolve_spec(model, spec, base)?;
        }
        if let Some(spec) = &self.time {
            quad.e4 = resolve_spec(model, spec, base)?;
        }
        Ok(quad)
    }
}

fn classify(op: &OperatorMatrix) -> Option<OperatorEntry> {
    if op.sp.nnz() == 0 {
        return Some(OperatorEntry::Preset("zero".into()));
    }
    let dim = op.sp.dim;
    if op.sp.nnz() != dim {
        return None;
    }
    let mut scale = None;
    for (r, row) in op.sp.rows().iter().enumerate() {
        for &(c, v) in row {
            if c as usize != r || v.im != 0.0 {
                return None;
            }
            match scale {
                None => scale = Some(v.re),
                Some(s) if s == v.re => {}
                _ => return None,
            }
        }
    }
    match scale {
        Some(s) if s == 1.0 => Some(OperatorEntry::Preset("identity".into())),
        Some(s) => Some(OperatorEntry::Preset(format!("scaled:{s:e}"))),
        None => None,
    }
}

fn dump_family(
    ops: &[OperatorMatrix],
    prefix: &str,
    dir: &Path,
) -> Result<Option<EntrySpec>> {
    if ops.iter().all(|op| op.sp.nnz() == 0) {
        return Ok(None);
    }
    let mut entries = Vec::with_capacity(ops.len());
    for (k, op) in ops.iter().enumerate() {
        if let Some(e) = classify(op) {
            entries.push(e);
        } else {
            let name = format!("{prefix}_k{k}.csv");
            std::fs::write(dir.join(&name), operator_to_csv(op))?;
            entries.push(OperatorEntry::File { file: name });
        }
    }
    if entries.iter().all(|e| e == &entries[0]) {
        return Ok(Some(EntrySpec::Constant(entries.remove(0))));
    }
    Ok(Some(EntrySpec::PerSlice(entries)))
}

/// Writes a quadruple as a descriptor, dumping non-preset integrands as
/// operator CSVs named `<family>_k<slice>.csv` inside `dir`.
pub fn quadruple_to_descriptor(
    quad: &IntegrandQuadruple,
    dir: &Path,
) -> Result<QuadrupleDescriptor> {
    let d = quad.d();
    let mut desc = QuadrupleDescriptor { p: Some(quad.p), ..Default::default() };
    for to in 0..d {
        for from in 0..d {
            if let Some(spec) =
                dump_family(&quad.e1[to * d + from], &format!("cons_{to}{from}"), dir)?
            {
                desc.conservation.insert(format!("{to},{from}"), spec);
            }
        }
    }
    for i in 0..d {
        if let Some(spec) = dump_family(&quad.e2[i], &format!("ann_{i}"), dir)? {
            desc.annihilation.insert(format!("{i}"), spec);
        }
        if let Some(spec) = dump_family(&quad.e3[i], &format!("cre_{i}"), dir)? {
            desc.creation.insert(format!("{i}"), spec);
        }
    }
    desc.time = dump_family(&quad.e4, "time", dir)?;
    Ok(desc)
}

pub fn measure_from_json(text: &str) -> Result<RadonMeasureEstimate> {
    let m: RadonMeasureEstimate = serde_json::from_str(text)?;
    if m.density.iter().any(|&x| x < 0.0) {
        return Err(QscError::Validation("measure density must be nonnegative".into()));
    }
    Ok(m)
}

pub fn measure_to_json(m: &RadonMeasureEstimate) -> String {
    serde_json::to_string_pretty(m).expect("measure serialization cannot fail")
}

/// Regularity table: `v,u,lhs_forward,lhs_adjoint,m,pass` per grid pair.
pub fn regularity_csv(report: &RegularityReport) -> String {
    let mut out = String::from("v,u,lhs_forward,lhs_adjoint,m,pass\n");
    for p in &report.pairs {
        let pass = p.forward_sq <= p.available + 1e-12 && p.adjoint_sq <= p.available + 1e-12;
        out.push_str(&format!(
            "{},{},{:e},{:e},{:e},{}\n",
            p.v, p.u, p.forward_sq, p.adjoint_sq, p.available, pass
        ));
    }
    out
}

/// Per-slice extraction defect table: `slice,defect,defect_below_ceiling`.
pub fn defect_csv(ex: &ExtractionResult) -> String {
    let mut out = String::from("slice,defect,defect_below_ceiling\n");
    for (k, (full, masked)) in ex
        .per_slice_defect
        .iter()
        .zip(&ex.per_slice_defect_masked)
        .enumerate()
    {
        out.push_str(&format!("{k},{full:e},{masked:e}\n"));
    }
    out
}
