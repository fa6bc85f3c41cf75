//! Central finite-difference verification of tape gradients.
//!
//! Used by unit tests and the acceptance gradient suite: build a scalar
//! expression from a set of differentiable inputs, then compare the tape's
//! analytic gradient against (f(x+h) - f(x-h)) / 2h element by element.

use ndarray::ArrayD;

use crate::tape::{Graph, Var};

pub struct FdCheck {
    /// Central-difference step.
    pub step: f64,
    /// Relative tolerance on |analytic - numeric|.
    pub rel_tol: f64,
    /// Absolute slack added to the tolerance so near-zero gradients do not
    /// fail on roundoff alone.
    pub abs_floor: f64,
}

impl Default for FdCheck {
    fn default() -> Self {
        FdCheck { step: 1e-4, rel_tol: 1e-3, abs_floor: 1e-7 }
    }
}

pub struct FdReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<String>,
}

impl FdReport {
    pub fn is_ok(&self) -> bool {
        self.failures.is_empty()
    }

    #[track_caller]
    pub fn assert_ok(&self) {
        assert!(
            self.is_ok(),
            "{} of {} gradient entries out of tolerance:\n{}",
            self.failures.len(),
            self.checked,
            self.failures.join("\n")
        );
    }
}

impl FdCheck {
    /// `build` receives a fresh graph plus one differentiable input per
    /// entry of `inputs` and returns the scalar to differentiate. It is
    /// re-invoked for every probe, so it must be a pure function of the
    /// input values.
    pub fn run<F>(&self, inputs: &[ArrayD<f64>], build: F) -> FdReport
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let eval = |arrays: &[ArrayD<f64>]| -> f64 {
            let mut g = Graph::new();
            let vars: Vec<Var> = arrays.iter().map(|a| g.input(a.clone())).collect();
            let root = build(&mut g, &vars);
            g.scalar_value(root)
        };

        // One analytic pass.
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|a| g.input(a.clone())).collect();
        let root = build(&mut g, &vars);
        let grads = g.backward(root);
        let analytic: Vec<ArrayD<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(v, a)| {
                grads
                    .wrt(*v)
                    .cloned()
                    .unwrap_or_else(|| ArrayD::zeros(a.raw_dim()))
            })
            .collect();

        let mut report = FdReport { checked: 0, max_rel_err: 0.0, failures: Vec::new() };
        let mut probe = inputs.to_vec();
        for (k, input) in inputs.iter().enumerate() {
            for (idx, &x0) in input.indexed_iter() {
                probe[k][&idx] = x0 + self.step;
                let plus = eval(&probe);
                probe[k][&idx] = x0 - self.step;
                let minus = eval(&probe);
                probe[k][&idx] = x0;

                let numeric = (plus - minus) / (2.0 * self.step);
                let a = analytic[k][&idx];
                let denom = a.abs().max(numeric.abs()).max(1.0);
                let rel = (a - numeric).abs() / denom;
                report.checked += 1;
                report.max_rel_err = report.max_rel_err.max(rel);
                if (a - numeric).abs() > self.rel_tol * a.abs().max(numeric.abs()) + self.abs_floor
                    && report.failures.len() < 10
                {
                    report.failures.push(format!(
                        "input {k} at {idx:?}: analytic {a:.9}, numeric {numeric:.9}"
                    ));
                }
            }
        }
        report
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn arr(shape: &[usize], vals: &[f64]) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(shape), vals.to_vec()).unwrap()
    }

    #[test]
    fn passes_on_smooth_composite() {
        let inputs = vec![arr(&[2, 2], &[0.3, -0.7, 1.2, 0.05]), arr(&[2, 2], &[0.9, 0.4, -0.2, 1.5])];
        FdCheck::default()
            .run(&inputs, |g, v| {
                let s = g.sigmoid(v[0]);
                let t = g.tanh(v[1]);
                let p = g.mul(s, t);
                let e = g.exp(p);
                g.sum_all(e)
            })
            .assert_ok();
    }

    #[test]
    fn flags_a_genuine_mismatch() {
        // abs() probed exactly at its kink: the analytic subgradient (0 by
        // our convention) disagrees with any one-sided slope the central
        // difference cannot see, but a shifted |x - 0.5h| style mismatch
        // does. Simplest reliable trip wire: |x| at x = h/2, where the
        // numeric slope is 0.5 but the analytic slope is 1.
        let step = 1e-4;
        let at_kink = vec![arr(&[1], &[step / 2.0])];
        let report = FdCheck { step, rel_tol: 1e-6, abs_floor: 0.0 }.run(&at_kink, |g, v| {
            let a = g.abs(v[0]);
            g.sum_all(a)
        });
        assert!(!report.is_ok(), "abs straddling its kink must fail the check");
    }
}
