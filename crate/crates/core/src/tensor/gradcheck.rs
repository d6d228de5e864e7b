use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore, Tape, TensorError, Var};

/// Result of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
    pub coords_checked: usize,
}

/// Finite-difference gradient checker.
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, floor)`; the
/// floor keeps coordinates whose true gradient is zero from dividing by
/// round-off noise.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub eps: f64,
    pub floor: f64,
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-5,
            floor: 1e-6,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

impl GradCheck {
    pub fn sampled(mut self, coords: usize, seed: u64) -> Self {
        self.max_coords_per_param = Some(coords);
        self.seed = seed;
        self
    }

    pub fn run<F>(&self, store: &ParamStore, f: F) -> Result<GradCheckReport, TensorError>
    where
        F: Fn(&mut Tape, &ParamStore) -> Result<Var, TensorError>,
    {
        let mut analytic = store.clone();
        analytic.zero_grad();
        let mut tape = Tape::new();
        let out = f(&mut tape, &analytic)?;
        if tape.value(out).len() != 1 {
            return Err(TensorError::contract(
                "grad_check",
                format!("function must be scalar, got {:?}", tape.value(out).shape()),
            ));
        }
        tape.backward(out, &mut analytic)?;

        let eval = |s: &ParamStore| -> Result<f64, TensorError> {
            let mut t = Tape::new();
            let v = f(&mut t, s)?;
            Ok(t.value(v).item())
        };

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst: None,
            coords_checked: 0,
        };
        let mut probe = store.clone();
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let n = store.get(id).len();
            let coords: Vec<usize> = match self.max_coords_per_param {
                Some(k) if k < n => {
                    let mut c = sample(&mut rng, n, k).into_vec();
                    c.sort_unstable();
                    c
                }
                _ => (0..n).collect(),
            };
            for j in coords {
                let orig = store.get(id).data()[j];
                probe.get_mut(id).data_mut()[j] = orig + self.eps;
                let plus = eval(&probe)?;
                probe.get_mut(id).data_mut()[j] = orig - self.eps;
                let minus = eval(&probe)?;
                probe.get_mut(id).data_mut()[j] = orig;
                let numeric = (plus - minus) / (2.0 * self.eps);
                let a = analytic.grad(id).data()[j];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(self.floor);
                report.coords_checked += 1;
                if report.worst.is_none() || rel > report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst = Some((store.canonical_name(id).to_string(), j, a, numeric));
                }
            }
        }
        Ok(report)
    }
}

/// Convenience wrapper: full (unsampled) check with the given step.
pub fn grad_check<F>(store: &ParamStore, eps: f64, f: F) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var, TensorError>,
{
    GradCheck {
        eps,
        ..GradCheck::default()
    }
    .run(store, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::scalar(3.0));
        let report = grad_check(&store, 1e-5, |t, s| {
            let x = t.param(s, id);
            t.mul(x, x)
        })
        .unwrap();
        let (_, _, analytic, numeric) = report.worst.clone().unwrap();
        assert_eq!(analytic, 6.0);
        assert!((numeric - 6.0).abs() < 1e-6);
        assert!(report.max_rel_error < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_grads() {
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::row(vec![1.0, 2.0]));
        let report = grad_check(&store, 1e-5, |t, s| {
            let _x = t.param(s, id);
            Ok(t.constant(Tensor::scalar(4.0)))
        })
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        let (_, _, a, n) = report.worst.unwrap();
        assert_eq!((a, n), (0.0, 0.0));
    }

    #[test]
    fn non_scalar_output_is_contract_error() {
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::row(vec![1.0, 2.0]));
        let err = grad_check(&store, 1e-5, |t, s| Ok(t.param(s, id))).unwrap_err();
        assert!(matches!(err, TensorError::Contract { op: "grad_check", .. }));
    }
}
