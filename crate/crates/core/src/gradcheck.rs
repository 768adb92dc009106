//! Central-finite-difference verification of tape gradients.
//!
//! Runs at 64-bit. Callers must keep sampling coordinates away from integer
//! lattice points: bilinear interpolation has kinks there and the comparison
//! is meaningless.

use crate::rng::SeedStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Step size used throughout the crate's checks.
pub const DEFAULT_H: f64 = 1e-5;

/// Relative tolerance used throughout the crate's checks.
pub const DEFAULT_TOL: f64 = 1e-4;

/// Per-input outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    /// Number of elements compared (all, unless sampling was requested).
    pub checked: usize,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.entries.iter().all(|e| e.max_rel_err < tol)
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.entries.extend(other.entries);
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare tape gradients of a scalar-valued computation against central
/// finite differences `(f(x+h) - f(x-h)) / 2h`, elementwise per input.
///
/// `build` must construct the same computation on any tape it is given,
/// reading inputs from the supplied leaf vars in order. With
/// `samples_per_input = None` every element is checked; otherwise up to that
/// many elements per input are drawn from a stream seeded by `sample_seed`.
pub fn gradcheck<F>(
    build: F,
    inputs: &[(&str, Tensor<f64>)],
    h: f64,
    samples_per_input: Option<usize>,
    sample_seed: u64,
) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |tensors: &[Tensor<f64>]| -> (f64, Tape<f64>, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        let v = tape.val(loss).item();
        (v, tape, vars, loss)
    };

    let base: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let (_, tape, vars, loss) = eval(&base);
    let grads = tape.backward(loss);

    let mut rng = SeedStream::new(sample_seed, "gradcheck-samples");
    let mut report = GradCheckReport::default();
    for (ii, (name, tensor)) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[ii], tensor.shape());
        let numel = tensor.numel();
        let elems: Vec<usize> = match samples_per_input {
            Some(k) if k < numel => {
                let mut picked: Vec<usize> =
                    (0..k).map(|_| (rng.gen_u64() % numel as u64) as usize).collect();
                picked.sort_unstable();
                picked.dedup();
                picked
            }
            _ => (0..numel).collect(),
        };
        let mut max_err = 0.0f64;
        for &e in &elems {
            let orig = base[ii].data()[e];
            let mut plus = base.clone();
            plus[ii].data_mut()[e] = orig + h;
            let (fp, _, _, _) = eval(&plus);
            let mut minus = base.clone();
            minus[ii].data_mut()[e] = orig - h;
            let (fm, _, _, _) = eval(&minus);
            let numeric = (fp - fm) / (2.0 * h);
            max_err = max_err.max(rel_err(analytic.data()[e], numeric));
        }
        report.entries.push(GradCheckEntry {
            name: name.to_string(),
            max_rel_err: max_err,
            checked: elems.len(),
        });
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    #[test]
    fn quadratic_passes_tightly() {
        let mut rng = SeedStream::new(30, "gc");
        let x: Tensor<f64> = rng.uniform_tensor(vec![5], -2.0, 2.0);
        let report = gradcheck(
            |tape, vars| {
                let sq = tape.mul(vars[0], vars[0]);
                tape.sum_all(sq)
            },
            &[("x", x)],
            DEFAULT_H,
            None,
            0,
        );
        assert!(report.max_rel_err() < 1e-8, "rel err {}", report.max_rel_err());
    }

    #[test]
    fn bilinear_sample_passes_at_fractional_coords() {
        let mut rng = SeedStream::new(31, "gc");
        let f: Tensor<f64> = rng.uniform_tensor(vec![4, 4, 2], -1.0, 1.0);
        // Strictly fractional, strictly interior coordinates.
        let coords = Tensor::new(
            vec![3, 2],
            vec![0.37, 1.21, 2.63, 0.55, 1.49, 2.71],
        );
        let probe: Tensor<f64> = rng.uniform_tensor(vec![3, 2], -1.0, 1.0);
        let report = gradcheck(
            |tape, vars| {
                let out = tape.bilinear_sample(vars[0], vars[1]);
                let probe = tape.leaf(vars_probe());
                let weighted = tape.mul(out, probe);
                tape.sum_all(weighted)
            },
            &[("f", f), ("coords", coords)],
            DEFAULT_H,
            None,
            0,
        );
        fn vars_probe() -> Tensor<f64> {
            let mut rng = SeedStream::new(99, "probe");
            rng.uniform_tensor(vec![3, 2], -1.0, 1.0)
        }
        let _ = probe;
        assert!(report.passes(DEFAULT_TOL), "entries: {:?}", report.entries);
    }
}
