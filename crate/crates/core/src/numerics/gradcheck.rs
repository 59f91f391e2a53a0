use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{Gradients, ParamStore};
use crate::error::{Error, Result};

/// Denominator floor for the relative error. Coordinates whose true gradient
/// is below this magnitude are compared in absolute terms against it.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares the analytic gradient of `loss` against central differences.
///
/// `loss(params, want_grad)` must be deterministic and return the gradient
/// (aligned with `params`) when `want_grad` is true. At most `samples`
/// coordinates are checked: one from every tensor, the rest drawn uniformly.
pub fn grad_check<F>(
    params: &ParamStore<f64>,
    h: f64,
    samples: usize,
    seed: u64,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>, bool) -> Result<(f64, Option<Gradients<f64>>)>,
{
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let (base, grads) = loss(params, true)?;
    if !base.is_finite() {
        return Err(Error::NonFinite {
            context: "loss at unperturbed parameters".into(),
        });
    }
    let grads = grads.ok_or_else(|| Error::Contract("loss closure returned no gradient".into()))?;

    let coords = sample_coords(params, samples, seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (p, i) in coords {
        let name = params.name_of(p).to_string();
        let orig = params.by_index(p).data()[i];
        work.by_index_mut(p).data_mut()[i] = orig + h;
        let (up, _) = loss(&work, false)?;
        work.by_index_mut(p).data_mut()[i] = orig - h;
        let (down, _) = loss(&work, false)?;
        work.by_index_mut(p).data_mut()[i] = orig;
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::NonFinite { context: name });
        }
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.get(p).map(|g| g[i]).unwrap_or(0.0);
        let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
        let rel = (analytic - numeric).abs() / denom;
        report.checked += 1;
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((name, i));
            report.analytic = analytic;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

fn sample_coords(params: &ParamStore<f64>, samples: usize, seed: u64) -> Vec<(usize, usize)> {
    let total = params.num_coords();
    if samples >= total {
        return params
            .iter()
            .enumerate()
            .flat_map(|(p, (_, t))| (0..t.len()).map(move |i| (p, i)))
            .collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(samples);
    for (p, (_, t)) in params.iter().enumerate() {
        if out.len() == samples {
            break;
        }
        if !t.is_empty() {
            out.push((p, rng.random_range(0..t.len())));
        }
    }
    let offsets: Vec<usize> = params
        .iter()
        .scan(0, |acc, (_, t)| {
            let start = *acc;
            *acc += t.len();
            Some(start)
        })
        .collect();
    while out.len() < samples {
        let flat = rng.random_range(0..total);
        let p = offsets.partition_point(|&o| o <= flat) - 1;
        out.push((p, flat - offsets[p]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Tape, Tensor};

    fn quadratic_store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::new(vec![3], vec![0.5, -1.5, 2.0]).unwrap())
            .unwrap();
        s.insert("b", Tensor::new(vec![2, 2], vec![1.0, 0.0, -0.25, 3.0]).unwrap())
            .unwrap();
        s
    }

    // ‖θ‖² built from tape ops as a sum of per-row self dot products.
    fn norm_sq(p: &ParamStore<f64>, want: bool) -> Result<(f64, Option<Gradients<f64>>)> {
        let mut tape = Tape::new(p);
        let mut terms = Vec::new();
        for name in ["a", "b"] {
            let v = tape.param(name)?;
            let (rows, _) = tape.shape(v);
            for i in 0..rows {
                let sel = tape.select_rows(v, &[i])?;
                let prod = tape.matmul_t(sel, sel)?;
                terms.push(prod);
            }
        }
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = tape.add(acc, t)?;
        }
        let loss = tape.sum(acc);
        let grads = if want {
            Some(tape.backward(loss)?.param_grads(&tape))
        } else {
            None
        };
        Ok((tape.scalar(loss), grads))
    }

    #[test]
    fn quadratic_is_exact() {
        let p = quadratic_store();
        let r = grad_check(&p, 1e-5, 100, 1, norm_sq).unwrap();
        assert_eq!(r.checked, 7);
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn zero_step_is_rejected() {
        let p = quadratic_store();
        assert!(matches!(
            grad_check(&p, 0.0, 10, 1, norm_sq),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn non_finite_loss_names_the_parameter() {
        let p = quadratic_store();
        let r = grad_check(&p, 1e-5, 100, 1, |s, want| {
            let (l, g) = norm_sq(s, want)?;
            let touched = s.get("b").unwrap().data()[0] != 1.0;
            Ok((if touched { f64::NAN } else { l }, g))
        });
        assert!(matches!(r, Err(Error::NonFinite { context }) if context == "b"));
    }

    #[test]
    fn sampling_covers_every_tensor() {
        let p = quadratic_store();
        let coords = sample_coords(&p, 3, 7);
        assert_eq!(coords.len(), 3);
        assert!(coords.iter().any(|&(t, _)| t == 0));
        assert!(coords.iter().any(|&(t, _)| t == 1));
    }
}
