#![allow(dead_code)]

use longscape::params::{init_params, Bound, ParamSpec, ParamStore};
use longscape_tensor::gradcheck::{check_gradients, FdOptions, FdReport};
use longscape_tensor::{Result, Tape, Tensor, Var};

/// Parameters drawn by the regular initialiser, then jittered so that norm
/// affines and biases are not at their identity values.
pub fn random_store(specs: &[ParamSpec], seed: u64) -> ParamStore<f64> {
    let mut store: ParamStore<f64> = init_params(specs, seed).unwrap();
    for (i, spec) in specs.iter().enumerate() {
        let base = store.value(&spec.name).unwrap().clone();
        let noise = Tensor::<f64>::randn(&spec.shape, 0.1, seed ^ (0x5eed + i as u64)).unwrap();
        let v = base.zip_map(&noise, "jitter", |a, b| a + b).unwrap();
        store.set_value(&spec.name, v).unwrap();
    }
    store
}

/// Binds `vars` to the names of `specs`, in order.
pub fn bind_vars(specs: &[ParamSpec], vars: &[Var<f64>]) -> Bound<f64> {
    assert_eq!(specs.len(), vars.len());
    Bound::from_pairs(specs.iter().map(|s| s.name.clone()).zip(vars.iter().cloned()))
}

/// `sum(out * r)` for a fixed random `r`, so every output element matters.
pub fn weighted_sum(out: &Var<f64>, seed: u64) -> Result<Var<f64>> {
    let r = Tensor::<f64>::randn(out.shape(), 1.0, seed)?;
    out.mul(&out.tape().constant(r))?.sum()
}

/// [`weighted_sum`] with weights of variance `1 / len`, keeping the loss of
/// large outputs near unit scale so round-off stays below the tolerance.
pub fn normalized_sum(out: &Var<f64>, seed: u64) -> Result<Var<f64>> {
    let n = out.value().len() as f64;
    let r = Tensor::<f64>::randn(out.shape(), 1.0 / n.sqrt(), seed)?;
    out.mul(&out.tape().constant(r))?.sum()
}

/// Finite-difference check of a block: `extra` inputs first, then every
/// parameter in `specs`, refining probes that straddle activation kinks.
pub fn check_block<F>(specs: &[ParamSpec], seed: u64, extra: Vec<Tensor<f64>>, max_coords: usize, f: F) -> FdReport
where
    F: Fn(&[Var<f64>], &Bound<f64>) -> Result<Var<f64>>,
{
    let store = random_store(specs, seed);
    let k = extra.len();
    let mut inputs = extra;
    inputs.extend(specs.iter().map(|s| store.value(&s.name).unwrap().clone()));
    let opts = FdOptions {
        step: 1e-5,
        max_coords,
        seed,
        refine: true,
    };
    let report = check_gradients(
        &inputs,
        |vars| {
            let bound = bind_vars(specs, &vars[k..]);
            f(&vars[..k], &bound)
        },
        opts,
    )
    .unwrap();
    assert_resolved(&report);
    report
}

/// Unresolved probes are excluded from the error; keep them a small minority.
pub fn assert_resolved(r: &FdReport) {
    assert!(r.probes > 0 && r.unresolved * 10 <= r.probes, "too many unresolved probes: {r:?}");
}

pub fn constant_bound(store: &ParamStore<f64>, tape: &Tape<f64>) -> Bound<f64> {
    store.bind(tape, false)
}
