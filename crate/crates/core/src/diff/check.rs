//! Central-difference gradient oracle.

use super::graph::{Graph, NodeId};
use super::params::Parameterized;
use crate::error::{Error, Result};

/// Denominator floor of the relative error. Central differences at
/// `epsilon = 1e-4` carry roundoff near `1e-12`, so gradients that are
/// exactly zero would otherwise be scored on noise alone.
pub const REL_FLOOR: f64 = 1e-6;

/// Outcome of [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over coordinates of `|a - b| / max(|a|, |b|, REL_FLOOR)`.
    pub max_rel_error: f64,
    /// Parameter name and flat coordinate where the max was attained.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

fn eval<S, F>(system: &S, f: &F) -> Result<f64>
where
    F: Fn(&S, &mut Graph) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let loss = f(system, &mut g)?;
    let v = g.value(loss);
    if !v.is_scalar() {
        return Err(Error::Contract(format!("loss must be scalar, got {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Compares reverse-mode gradients of `f` against `(f(p+e) - f(p-e)) / 2e`
/// for every coordinate of every parameter that requires a gradient.
pub fn grad_check<S, F>(system: &mut S, epsilon: f64, f: F) -> Result<GradCheckReport>
where
    S: Parameterized,
    F: Fn(&S, &mut Graph) -> Result<NodeId>,
{
    let first = eval(system, &f)?;
    let second = eval(system, &f)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism(format!("{first} then {second}")));
    }

    let analytic = {
        let mut g = Graph::new();
        let loss = f(system, &mut g)?;
        g.backward(loss)?
    };

    let keys: Vec<_> = system
        .stores()
        .iter()
        .enumerate()
        .flat_map(|(s, store)| {
            store
                .ids()
                .filter(|&id| store.requires_grad(id))
                .map(move |id| (s, id))
                .collect::<Vec<_>>()
        })
        .collect();

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, coordinates: 0 };
    for (s, id) in keys {
        let (key, name, n) = {
            let store = &system.stores()[s];
            (store.key(id), store.name(id).to_string(), store.get(id).numel())
        };
        let grad = analytic.by_key(&key).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        for (i, &a) in grad.iter().enumerate() {
            let orig = system.stores()[s].get(id).data()[i];
            system.stores_mut()[s].get_mut(id).data_mut()[i] = orig + epsilon;
            let plus = eval(system, &f);
            system.stores_mut()[s].get_mut(id).data_mut()[i] = orig - epsilon;
            let minus = eval(system, &f);
            system.stores_mut()[s].get_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * epsilon);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.coordinates += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
