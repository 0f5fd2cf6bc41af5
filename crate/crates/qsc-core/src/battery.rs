//! Shared test batteries: small families of (u, f, v, g) data used to probe
//! operators through matrix elements `<X u (x) phi_f, v (x) phi_g>`.

use std::sync::Arc;

use crate::fock::{C64, ModelSpace, StepFunction};

#[derive(Debug, Clone)]
pub struct BatteryElement {
    pub name: String,
    pub u: Vec<C64>,
    pub f: StepFunction,
    pub v: Vec<C64>,
    pub g: StepFunction,
}

fn e0(m: usize) -> Vec<C64> {
    let mut u = vec![C64::new(0.0, 0.0); m];
    u[0] = C64::new(1.0, 0.0);
    u
}

fn e_last(m: usize) -> Vec<C64> {
    let mut u = vec![C64::new(0.0, 0.0); m];
    u[m - 1] = C64::new(1.0, 0.0);
    u
}

/// Nine (u, f, v, g) tuples covering vacuum, single-channel, opposite-sign,
/// cross-channel, and mixed-channel coherent data. Channel indicators have unit
/// height, so `||f||^2 <= 2` on the unit horizon.
pub fn full_battery(model: &Arc<ModelSpace>) -> Vec<BatteryElement> {
    let d = model.mult.d;
    let n = model.grid.slices;
    let m = model.init.m;
    let one = C64::new(1.0, 0.0);
    let c1 = StepFunction::constant(d, n, 0, one);
    let c1m = StepFunction::constant(d, n, 0, -one);
    let c2 = if d >= 2 {
        StepFunction::constant(d, n, 1, one)
    } else {
        StepFunction::constant(d, n, 0, C64::new(-0.5, 0.0))
    };
    let mixed = {
        let mut f = c1.clone();
        for (a, b) in f.values.iter_mut().zip(&c2.values) {
            *a = (*a + *b) * C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        }
        f
    };
    let zero = StepFunction::zero(d, n);
    let items: Vec<(&str, StepFunction, StepFunction)> = vec![
        ("vacuum-vacuum", zero.clone(), zero.clone()),
        ("ch1-vacuum", c1.clone(), zero.clone()),
        ("vacuum-ch1", zero.clone(), c1.clone()),
        ("ch1-ch1", c1.clone(), c1.clone()),
        ("ch1-negch1", c1.clone(), c1m),
        ("ch1-ch2", c1.clone(), c2.clone()),
        ("ch2-ch1", c2.clone(), c1.clone()),
        ("mixed-ch1", mixed.clone(), c1),
        ("mixed-mixed", mixed.clone(), mixed),
    ];
    items
        .into_iter()
        .enumerate()
        .map(|(idx, (name, f, g))| {
            // exercise a second initial index on two entries when available
            let u = if m > 1 && idx == 3 { e_last(m) } else { e0(m) };
            let v = if m > 1 && idx == 7 { e_last(m) } else { e0(m) };
            BatteryElement { name: name.into(), u, f, v, g }
        })
        .collect()
}

/// Battery elements with `f_i(t_s) * g_i(t_s) = 0` at every mode: pairings of the
/// coherent tails vanish termwise, so identities that lose only ceiling terms
/// become exact at machine precision on these inputs.
pub fn disjoint_battery(model: &Arc<ModelSpace>) -> Vec<BatteryElement> {
    let d = model.mult.d;
    let n = model.grid.slices;
    let m = model.init.m;
    let one = C64::new(1.0, 0.0);
    let half = n / 2;
    let early = StepFunction::indicator(d, n, 0, 0..half.max(1), one);
    let late = StepFunction::indicator(d, n, 0, half.max(1)..n, one);
    let zero = StepFunction::zero(d, n);
    let mut items: Vec<(&str, StepFunction, StepFunction)> = vec![
        ("vacuum-vacuum", zero.clone(), zero.clone()),
        ("ch1-vacuum", StepFunction::constant(d, n, 0, one), zero.clone()),
        ("vacuum-ch1", zero, StepFunction::constant(d, n, 0, one)),
        ("early-late", early.clone(), late.clone()),
        ("late-early", late, early),
    ];
    if d >= 2 {
        items.push(("ch1-ch2", StepFunction::constant(d, n, 0, one), StepFunction::constant(d, n, 1, one)));
        items.push(("ch2-ch1", StepFunction::constant(d, n, 1, one), StepFunction::constant(d, n, 0, one)));
    }
    items
        .into_iter()
        .map(|(name, f, g)| BatteryElement { name: name.into(), u: e0(m), f, v: e0(m), g })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::{InitialConfig, MultiplicityConfig, ModelSpace, TimeGrid};

    #[test]
    fn disjoint_battery_has_no_common_support() {
        let m = ModelSpace::build(
            MultiplicityConfig { d: 2, rho: vec![1.0, 1.0] },
            InitialConfig { m: 1, alpha: vec![1.0] },
            TimeGrid { horizon: 1.0, slices: 4 },
            3,
            1 << 20,
        )
        .unwrap();
        for el in disjoint_battery(&m) {
            for (a, b) in el.f.values.iter().zip(&el.g.values) {
                assert!(
                    (a * b).norm() == 0.0,
                    "element {} has overlapping support",
                    el.name
                );
            }
        }
        assert_eq!(full_battery(&m).len(), 9);
    }
}
