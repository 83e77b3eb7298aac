//! Central finite-difference checks of tape gradients, used by the test
//! suites of every crate in the workspace.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub struct FdOptions {
    pub step: f64,
    /// Coordinates probed per input; inputs at most this large are probed fully.
    pub max_coords: usize,
    pub seed: u64,
    /// Re-estimate mismatching probes over a ladder of step sizes, for
    /// functions with activation kinks or sharp curvature (shorter steps) or
    /// exactly cancelling terms (longer steps, less round-off). One-sided
    /// estimates are tried too, since a probe lying on a kink has only
    /// one-sided derivatives. Only converged estimates count: two
    /// neighbouring steps of the same kind must agree. The
    /// converged estimate closest to the analytic value is kept, so a wrong
    /// gradient, which misses every converged estimate, still fails. Probes
    /// with no converged estimate are counted in `unresolved` and excluded.
    pub refine: bool,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            step: 1e-4,
            max_coords: 24,
            seed: 0,
            refine: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// `(input index, flat coordinate, analytic, numeric)` of the worst probe.
    pub worst: Option<(usize, usize, f64, f64)>,
    /// Probes that entered `max_rel_err`.
    pub probes: usize,
    /// Probes that needed the step ladder, including unresolved ones.
    pub refined: usize,
    pub unresolved: usize,
}

/// Multiples of the base step tried by refinement, longest first.
const REFINE_LADDER: [f64; 7] = [10.0, 1.0, 0.1, 1e-2, 1e-3, 1e-4, 1e-5];
/// Neighbouring estimates within this relative distance have converged.
const PLATEAU_TOL: f64 = 2e-6;
/// Mismatches below this are round-off and never refined.
const REFINE_TRIGGER: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the tape gradient of the scalar `f(inputs)` with central
/// differences on a sample of coordinates of every input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, opts: FdOptions) -> Result<FdReport>
where
    F: Fn(&[Var<f64>]) -> Result<Var<f64>>,
{
    let tape = Tape::new();
    let leaves: Vec<Var<f64>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&leaves)?;
    let refs: Vec<&Var<f64>> = leaves.iter().collect();
    let analytic = tape.grad(&loss, &refs, false)?;

    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let t = Tape::new();
        let vars: Vec<Var<f64>> = probe.iter().map(|x| t.constant(x.clone())).collect();
        Ok(f(&vars)?.value().item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst: None,
        probes: 0,
        refined: 0,
        unresolved: 0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = if input.len() <= opts.max_coords {
            (0..input.len()).collect()
        } else {
            sample(&mut rng, input.len(), opts.max_coords).into_vec()
        };
        for k in coords {
            let orig = input.data()[k];
            let mut at = |h: f64| -> Result<f64> {
                probe[i].data_mut()[k] = orig + h;
                let v = eval(&probe);
                probe[i].data_mut()[k] = orig;
                v
            };
            let a = analytic[i].value().data()[k];
            let mut numeric = (at(opts.step)? - at(-opts.step)?) / (2.0 * opts.step);
            let mut err = rel_err(a, numeric);
            if opts.refine && err > REFINE_TRIGGER {
                report.refined += 1;
                let f0 = at(0.0)?;
                // central, forward and backward second-order estimates per step
                let mut prev: Option<[f64; 3]> = None;
                let mut converged: Option<f64> = None;
                for &m in &REFINE_LADDER {
                    let h = opts.step * m;
                    let (p1, p2, m1, m2) = (at(h)?, at(2.0 * h)?, at(-h)?, at(-2.0 * h)?);
                    let cur = [
                        (p1 - m1) / (2.0 * h),
                        (4.0 * p1 - p2 - 3.0 * f0) / (2.0 * h),
                        (3.0 * f0 - 4.0 * m1 + m2) / (2.0 * h),
                    ];
                    if let Some(prev) = prev {
                        for (&x, &y) in prev.iter().zip(&cur) {
                            let closer = converged.map_or(true, |c| (y - a).abs() < (c - a).abs());
                            if rel_err(x, y) <= PLATEAU_TOL && closer {
                                converged = Some(y);
                            }
                        }
                    }
                    if converged.is_some_and(|c| rel_err(a, c) <= REFINE_TRIGGER) {
                        break;
                    }
                    prev = Some(cur);
                }
                match converged {
                    Some(v) => (numeric, err) = (v, rel_err(a, v)),
                    None => {
                        report.unresolved += 1;
                        continue;
                    }
                }
            }
            report.probes += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst = Some((i, k, a, numeric));
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn relu_sum(x: Tensor<f64>, refine: bool) -> FdReport {
        let opts = FdOptions {
            step: 1e-5,
            refine,
            ..FdOptions::default()
        };
        check_gradients(&[x], |v| v[0].relu()?.scale(3.0)?.sum(), opts).unwrap()
    }

    #[test]
    fn probe_across_a_kink_is_refined_only_when_asked() {
        let x = Tensor::from_vec(&[3], vec![0.5, 3e-6, -0.7]).unwrap();
        let strict = relu_sum(x.clone(), false);
        assert!(strict.max_rel_err > 0.1);
        let refined = relu_sum(x, true);
        assert_eq!((refined.probes, refined.refined, refined.unresolved), (3, 1, 0));
        assert!(refined.max_rel_err < 1e-8);
    }

    #[test]
    fn probe_on_a_kink_matches_a_one_sided_derivative() {
        let x = Tensor::from_vec(&[2], vec![0.0, 0.4]).unwrap();
        let r = relu_sum(x, true);
        assert_eq!((r.probes, r.refined, r.unresolved), (2, 1, 0));
        assert!(r.max_rel_err < 1e-8, "{r:?}");
    }

    #[test]
    fn smooth_probes_are_not_refined() {
        let x = Tensor::from_vec(&[3], vec![0.5, 0.2, -0.7]).unwrap();
        let r = relu_sum(x, true);
        assert_eq!((r.probes, r.refined), (3, 0));
    }

    #[test]
    fn refinement_does_not_hide_a_wrong_gradient() {
        let x = Tensor::from_vec(&[2], vec![0.3, -0.4]).unwrap();
        let opts = FdOptions {
            step: 1e-5,
            refine: true,
            ..FdOptions::default()
        };
        // the constant copy hides 5x from the tape but not from the probes
        let r = check_gradients(
            &[x],
            |v| {
                let frozen = v[0].tape().constant(v[0].value().clone());
                v[0].square()?.add(&frozen.scale(5.0)?)?.sum()
            },
            opts,
        )
        .unwrap();
        assert!(r.max_rel_err > 0.5, "{r:?}");
    }
}
