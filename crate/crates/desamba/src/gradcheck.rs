//! Finite-difference verification of analytic parameter gradients.
//!
//! `check_all_params` rebuilds the forward graph from scratch for every
//! probe, perturbing one stored parameter element at a time with a central
//! difference, and compares against the tape gradient. Everything runs in
//! f64; the relative error uses `|a - n| / max(|a|, |n|, floor)` so that
//! pairs of near-zero gradients do not blow up the ratio.

use crate::nn::ParamStore;
use crate::tape::{Tape, Var};

pub struct GradCheckReport {
    /// Number of scalar parameter elements probed.
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter name and element index of the worst probe.
    pub worst: String,
}

/// Compare analytic gradients of a scalar loss against central differences
/// for every element of every parameter in the store.
pub fn check_all_params(
    store: &mut ParamStore,
    build: &dyn Fn(&mut Tape, &ParamStore) -> Var,
    eps: f64,
    floor: f64,
) -> GradCheckReport {
    let eval = |store: &ParamStore| -> f64 {
        let mut tape = Tape::new();
        let loss = build(&mut tape, store);
        assert_eq!(tape.value(loss).len(), 1, "gradcheck loss must be scalar");
        tape.value(loss).data()[0]
    };

    let mut tape = Tape::new();
    let loss = build(&mut tape, store);
    let grads = tape.backward(loss);
    let mut analytic: Vec<Option<Vec<f64>>> = vec![None; store.len()];
    for &(slot, node) in tape.bound_params() {
        analytic[slot] = Some(
            grads
                .wrt(Var(node))
                .map(|a| a.data().to_vec())
                .unwrap_or_else(|| vec![0.0; store.value(slot).len()]),
        );
    }

    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, worst: String::new() };
    for slot in 0..store.len() {
        let Some(analytic_slot) = analytic[slot].clone() else { continue };
        let name = store.params()[slot].name.clone();
        for i in 0..store.value(slot).len() {
            let orig = store.value(slot).data()[i];
            store.value_mut(slot).data_mut()[i] = orig + eps;
            let up = eval(store);
            store.value_mut(slot).data_mut()[i] = orig - eps;
            let down = eval(store);
            store.value_mut(slot).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic_slot[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = format!("{name}[{i}]: analytic {a} numeric {numeric}");
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Init, Linear};
    use crate::tensor::Array;

    #[test]
    fn passes_on_a_small_mlp() {
        let mut store = ParamStore::new(5);
        let fc1 = Linear::new(&mut store, "fc1", 3, 4, Init::TruncNormal(0.5), true);
        let fc2 = Linear::new(&mut store, "fc2", 4, 2, Init::TruncNormal(0.5), true);
        let report = check_all_params(
            &mut store,
            &move |t, s| {
                let x = t.leaf(Array::from_vec(&[2, 3], vec![0.3, -0.6, 1.2, 0.8, 0.1, -0.4]));
                let h = fc1.forward(t, s, x);
                let h = t.gelu(h);
                let y = fc2.forward(t, s, h);
                let sq = t.mul(y, y);
                t.sum_all(sq)
            },
            1e-5,
            1e-6,
        );
        assert_eq!(report.checked, 3 * 4 + 4 + 4 * 2 + 2);
        assert!(report.max_rel_err < 1e-6, "worst: {}", report.worst);
    }
}
