//! Finite-difference verification of reverse-mode gradients.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::Real;

/// Compares the analytic gradient of a scalar-valued graph against central
/// finite differences, entry by entry over every parameter in the store.
/// Returns the maximum relative error
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// `build` must be a deterministic function of the store contents: it is
/// re-invoked on perturbed copies for every scalar entry.
pub fn grad_check<F, B>(store: &mut ParamStore<F>, eps: f64, build: B) -> f64
where
    F: Real,
    B: for<'t> Fn(&'t Tape<F>, &ParamStore<F>) -> Var<'t, F>,
{
    assert!(
        (1e-7..=1e-3).contains(&eps),
        "finite-difference step {eps} outside [1e-7, 1e-3]"
    );

    // One backward sweep for the analytic gradients, summed per name in
    // case a parameter is pulled onto the tape more than once.
    let mut analytic: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
    {
        let tape: Tape<F> = Tape::new();
        let root = build(&tape, store);
        let grads = tape.backward(root);
        for (name, index) in tape.named_params() {
            let shape = store
                .get(&name)
                .expect("tape params come from the store")
                .value
                .raw_dim();
            let contribution = grads
                .by_index(index)
                .map(|g| g.mapv(Real::to_f64))
                .unwrap_or_else(|| ArrayD::zeros(shape));
            analytic
                .entry(name)
                .and_modify(|acc| *acc += &contribution)
                .or_insert(contribution);
        }
    }

    let eval = |store: &ParamStore<F>| -> f64 {
        let tape: Tape<F> = Tape::new();
        build(&tape, store).scalar_value().to_f64()
    };

    let names: Vec<String> = store.iter().map(|(n, _)| n.to_owned()).collect();
    let step = F::cast(eps);
    let mut max_rel = 0.0f64;
    for name in names {
        let len = store.get(&name).expect("iterating store names").value.len();
        let analytic_entry = analytic
            .get(&name)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(store.get(&name).unwrap().value.raw_dim()));
        let flat_analytic: Vec<f64> = analytic_entry.iter().copied().collect();
        for i in 0..len {
            let original = {
                let entry = store.get_mut(&name).expect("name exists");
                let slot = entry.value.iter_mut().nth(i).expect("index in range");
                let original = *slot;
                *slot = original + step;
                original
            };
            let f_plus = eval(store);
            {
                let entry = store.get_mut(&name).expect("name exists");
                *entry.value.iter_mut().nth(i).expect("index in range") = original - step;
            }
            let f_minus = eval(store);
            {
                let entry = store.get_mut(&name).expect("name exists");
                *entry.value.iter_mut().nth(i).expect("index in range") = original;
            }
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = flat_analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
    }
    max_rel
}
