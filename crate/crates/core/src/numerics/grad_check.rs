use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::params::ParamStore;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Check at most this many coordinates per parameter tensor (sampled
    /// without replacement); `None` checks every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Lower bound on the denominator of the relative error. Gradients
    /// smaller than this are below what central differences resolve on an
    /// O(1) loss, so they are compared in absolute terms scaled by it.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-4,
            max_coords: None,
            seed: 0,
            floor: 1e-7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter with the largest error.
    pub worst: Option<String>,
    pub coords_checked: usize,
    /// Coordinates left out because the ± step changed the branch of a
    /// piecewise operation, where no derivative exists to compare against.
    pub coords_skipped: usize,
}

/// Compares reverse-mode gradients of `loss_fn` against central finite
/// differences for every trainable entry of `store`.
///
/// The error for one parameter tensor is `‖a − n‖ / max(‖a‖, ‖n‖, floor)`
/// over the checked coordinates (analytic `a`, numeric `n`). The report
/// carries the maximum over tensors. A coordinate whose ± step crosses a
/// kink of a piecewise operation is skipped and counted.
pub fn grad_check<F>(loss_fn: F, store: &ParamStore, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let root = loss_fn(&mut g, s)?;
        let v = g.value(root).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check loss".into()));
        }
        Ok((v, g.branch_signature()))
    };

    let mut g = Graph::new();
    let root = loss_fn(&mut g, store)?;
    let base = g.branch_signature();
    let grads = g.backward(root)?;
    let analytic = g.param_grads(&grads, store);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        coords_checked: 0,
        coords_skipped: 0,
    };
    let h = opts.step;

    for id in store.ids() {
        let entry = store.entry(id);
        if !entry.trainable {
            continue;
        }
        let len = entry.value.len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < len => sample(&mut rng, len, m).into_vec(),
            _ => (0..len).collect(),
        };
        let mut diff_sq = 0.0;
        let mut a_sq = 0.0;
        let mut n_sq = 0.0;
        for &c in &coords {
            let orig = store.get(id).data()[c];
            probe.get_mut(id).data_mut()[c] = orig + h;
            let (plus, sp) = eval(&probe)?;
            probe.get_mut(id).data_mut()[c] = orig - h;
            let (minus, sm) = eval(&probe)?;
            probe.get_mut(id).data_mut()[c] = orig;
            if sp != base || sm != base {
                report.coords_skipped += 1;
                continue;
            }
            report.coords_checked += 1;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[id.0].as_ref().map_or(0.0, |t| t.data()[c]);
            diff_sq += (a - numeric) * (a - numeric);
            a_sq += a * a;
            n_sq += numeric * numeric;
        }
        let scale = a_sq.sqrt().max(n_sq.sqrt()).max(opts.floor);
        let err = diff_sq.sqrt() / scale;
        if err > report.max_relative_error || report.worst.is_none() {
            if err >= report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some(entry.name.clone());
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn quadratic_half_norm() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::row_vector(&[1.0, 2.0]));
        let loss = |g: &mut Graph, s: &ParamStore| {
            let x = g.param(s, crate::numerics::ParamId(0));
            let sq = g.mul(x, x)?;
            let ones = g.constant(Tensor::new(vec![2, 1], vec![0.5, 0.5])?);
            g.matmul(sq, ones)
        };
        let mut g = Graph::new();
        let root = loss(&mut g, &store).unwrap();
        let grads = g.backward(root).unwrap();
        let pg = g.param_grads(&grads, &store);
        assert_eq!(pg[0].as_ref().unwrap().data(), &[1.0, 2.0]);
        let r = grad_check(loss, &store, &GradCheckOptions::default()).unwrap();
        assert!(r.max_relative_error < 1e-6, "{r:?}");
    }

    #[test]
    fn steps_across_a_max_pool_tie_are_skipped() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::new(vec![2, 1], vec![1.0, 1.0 + 1e-6]).unwrap());
        let loss = |g: &mut Graph, s: &ParamStore| {
            let x = g.param(s, crate::numerics::ParamId(0));
            let m = g.col_max(x)?;
            Ok(g.mul(m, m)?)
        };
        let r = grad_check(loss, &store, &GradCheckOptions::default()).unwrap();
        assert_eq!(r.coords_skipped, 2);
        assert_eq!(r.coords_checked, 0);
        store.get_mut(crate::numerics::ParamId(0)).data_mut()[1] = 2.0;
        let r = grad_check(loss, &store, &GradCheckOptions::default()).unwrap();
        assert_eq!((r.coords_checked, r.coords_skipped), (2, 0));
        assert!(r.max_relative_error < 1e-8, "{r:?}");
    }

    #[test]
    fn constant_loss_has_zero_error() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::row_vector(&[3.0, -1.0]));
        let loss = |g: &mut Graph, s: &ParamStore| {
            let x = g.param(s, crate::numerics::ParamId(0));
            let z = g.scale(x, 0.0);
            let ones = g.constant(Tensor::new(vec![2, 1], vec![1.0, 1.0])?);
            g.matmul(z, ones)
        };
        let r = grad_check(loss, &store, &GradCheckOptions::default()).unwrap();
        assert_eq!(r.max_relative_error, 0.0);
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::row_vector(&[f64::NAN]));
        let loss = |g: &mut Graph, s: &ParamStore| {
            let x = g.param(s, crate::numerics::ParamId(0));
            Ok(g.scale(x, 1.0))
        };
        assert!(matches!(
            grad_check(loss, &store, &GradCheckOptions::default()),
            Err(Error::NonFinite(_))
        ));
    }
}
