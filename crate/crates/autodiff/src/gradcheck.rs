//! Central-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Gradients, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of `|analytic - fd| / (|analytic| + |fd| + 1e-8)`
    pub max_rel_error: f64,
    /// `(param name, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
    pub coordinates: usize,
}

/// Evaluates `f` on a fresh graph and returns the loss with its gradients.
pub fn value_and_grad<F>(store: &ParamStore, f: &F) -> Result<(f64, Gradients)>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let loss = f(&mut g)?;
    let v = g.value(loss).item();
    if !v.is_finite() {
        return Err(Error::NonFiniteLoss(v));
    }
    Ok((v, g.backward(loss)?))
}

fn loss_only<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let loss = f(&mut g)?;
    let v = g.value(loss).item();
    if !v.is_finite() {
        return Err(Error::NonFiniteLoss(v));
    }
    Ok(v)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-8)
}

/// Compares the tape gradient of every parameter coordinate against a
/// central difference with step `eps`.
pub fn grad_check<F>(store: &ParamStore, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    grad_check_sampled(store, eps, usize::MAX, 0, f)
}

/// Like [`grad_check`] but the numeric side is the Richardson combination
/// `(4 D(eps/2) - D(eps)) / 3` of two central differences, which cancels
/// the `eps^2` truncation term. A larger `eps` then keeps roundoff low on
/// coordinates with tiny gradients.
pub fn grad_check_extrapolated<F>(store: &ParamStore, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    check(store, eps, usize::MAX, 0, true, f)
}

/// Like [`grad_check`] but checks at most `max_coords` coordinates, chosen
/// uniformly with a seeded RNG.
pub fn grad_check_sampled<F>(
    store: &ParamStore,
    eps: f64,
    max_coords: usize,
    seed: u64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    check(store, eps, max_coords, seed, false, f)
}

fn check<F>(store: &ParamStore, eps: f64, max_coords: usize, seed: u64, extrapolate: bool, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument {
            op: "grad_check",
            message: format!("eps {eps} outside [1e-7, 1e-3]"),
        });
    }
    let (_, analytic) = value_and_grad(store, &f)?;

    let mut coords: Vec<(String, usize)> = store
        .iter()
        .flat_map(|(name, t)| (0..t.len()).map(move |i| (name.clone(), i)))
        .collect();
    if coords.len() > max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked: Vec<usize> = sample(&mut rng, coords.len(), max_coords).into_vec();
        picked.sort_unstable();
        coords = picked.into_iter().map(|i| coords[i].clone()).collect();
    }

    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: coords.len(),
    };
    for (name, i) in coords {
        let orig = work.get(&name)?.data()[i];
        let mut central = |h: f64| -> Result<f64> {
            work.get_mut(&name)?.data_mut()[i] = orig + h;
            let plus = loss_only(&work, &f)?;
            work.get_mut(&name)?.data_mut()[i] = orig - h;
            let minus = loss_only(&work, &f)?;
            work.get_mut(&name)?.data_mut()[i] = orig;
            Ok((plus - minus) / (2.0 * h))
        };
        let numeric = if extrapolate {
            (4.0 * central(eps / 2.0)? - central(eps)?) / 3.0
        } else {
            central(eps)?
        };
        let a = analytic.get(&name).map_or(0.0, |t| t.data()[i]);
        let err = relative_error(a, numeric);
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((name.clone(), i, a, numeric));
        }
    }
    Ok(report)
}
