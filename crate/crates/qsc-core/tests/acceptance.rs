//! Verification gate. Runs the full battery from `configs/verify-all.json`
//! once (shared across tests), then each test gathers the report lines backing
//! one advertised guarantee and prints a single pass/fail verdict for it.
//!
//! Run with `--nocapture` to see the twelve verdict lines.

use std::collections::HashMap;
use std::path::Path;
use std::sync::OnceLock;

use qsc_core::io;
use qsc_core::report::{CheckLine, CheckReport};
use qsc_core::scenario::{load_config, run_config};

const MASTER_SEED: u64 = 7;

fn reports() -> &'static HashMap<String, CheckReport> {
    static REPORTS: OnceLock<HashMap<String, CheckReport>> = OnceLock::new();
    REPORTS.get_or_init(|| {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let cfg = load_config(&dir.join("verify-all.json")).expect("battery config loads");
        run_config(&cfg, &dir, io::default_budget(), MASTER_SEED, true)
            .expect("battery runs to completion")
            .into_iter()
            .collect()
    })
}

/// Gather the lines behind one criterion as `(scenario, filter)` parts, where
/// a `Some` filter keeps only lines whose name contains the needle. Every part
/// must contribute at least one line, and all gathered lines must pass.
fn criterion(number: usize, label: &str, parts: &[(&str, Option<&str>)]) {
    let all = reports();
    let mut picked: Vec<&CheckLine> = Vec::new();
    for (scenario, filter) in parts {
        let rep = all
            .get(*scenario)
            .unwrap_or_else(|| panic!("scenario {scenario} missing from battery"));
        let before = picked.len();
        for line in &rep.lines {
            if filter.map_or(true, |needle| line.name.contains(needle)) {
                picked.push(line);
            }
        }
        assert!(
            picked.len() > before,
            "scenario {scenario} produced no lines matching {filter:?}"
        );
    }
    let pass = picked.iter().all(|l| l.pass);
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!(
        "criterion {number:02} {verdict} — {label} ({} checks)",
        picked.len()
    );
    if !pass {
        for l in picked.iter().filter(|l| !l.pass) {
            println!(
                "    failed: {}  measured {:.6e}  target {:.6e}",
                l.name, l.measured, l.target
            );
        }
    }
    assert!(pass, "criterion {number:02} failed: {label}");
}

#[test]
fn criterion_01_coherent_pairing_matches_closed_form() {
    criterion(
        1,
        "coherent pairings match the truncated series and the continuum exponential",
        &[("coherent-pairing", None)],
    );
}

#[test]
fn criterion_02_product_table_and_remainder_order() {
    criterion(
        2,
        "increment product table is exact and the dropped remainder is second order",
        &[("product-table", None)],
    );
}

#[test]
fn criterion_03_integrals_match_series_oracle() {
    criterion(
        3,
        "integral matrix elements match the series oracle on presets and random draws",
        &[("integral-oracle", None)],
    );
}

#[test]
fn criterion_04_integral_norms_within_exponential_bound() {
    criterion(
        4,
        "weighted integral norms stay within the exponential growth bound",
        &[("exponential-bound", None)],
    );
}

#[test]
fn criterion_05_compression_defects() {
    criterion(
        5,
        "past-compression defect vanishes off the time family and equals elapsed time on it",
        &[
            ("martingale-defect", Some("defect")),
            ("martingale-defect", Some("time family")),
        ],
    );
}

#[test]
fn criterion_06_increment_bounds_with_and_without_weights() {
    criterion(
        6,
        "forward and adjoint increment bounds hold at zero and nonzero weights",
        &[
            ("regularity-unweighted", Some("increment bound")),
            ("regularity-weighted", Some("increment bound")),
        ],
    );
}

#[test]
fn criterion_07_truncation_bound_and_scheme_orders() {
    criterion(
        7,
        "vacuum overlap obeys the truncation bound and the schemes converge at their orders",
        &[("displacement-overlap", None), ("displacement-convergence", None)],
    );
}

#[test]
fn criterion_08_recovery_round_trip_and_refinement() {
    criterion(
        8,
        "integrand recovery round-trips and its defect decays under grid refinement",
        &[("integrand-recovery", None), ("recovery-refinement", None)],
    );
}

#[test]
fn criterion_09_conjugated_recovery_matches_conservation_family() {
    criterion(
        9,
        "conjugated recovery reproduces the conservation family at zero and nonzero weights",
        &[("conjugation-presets", None), ("conjugation-weighted", None)],
    );
}

#[test]
fn criterion_10_components_within_dominating_density() {
    criterion(
        10,
        "recovered component norms stay within the dominating density",
        &[
            ("regularity-unweighted", Some("within density")),
            ("regularity-unweighted", Some("hermitian residual")),
            ("regularity-unweighted", Some("minimum eigenvalue")),
            ("regularity-weighted", Some("within density")),
            ("regularity-weighted", Some("hermitian residual")),
            ("regularity-weighted", Some("minimum eigenvalue")),
        ],
    );
}

#[test]
fn criterion_11_classical_isometry_monte_carlo() {
    criterion(
        11,
        "sample means of the classical integrals match the quantum pairing",
        &[("classical-isometry", None)],
    );
}

#[test]
fn criterion_12_running_norms_nondecreasing() {
    criterion(
        12,
        "running squared norms are nondecreasing along the grid",
        &[
            ("martingale-defect", Some("monotonicity")),
            ("regularity-unweighted", Some("monotonicity")),
            ("regularity-weighted", Some("monotonicity")),
        ],
    );
}
