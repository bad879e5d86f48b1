use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Bound, Graph, Var};
use super::{NnError, ParameterSet};

/// Compares reverse-mode gradients against central differences.
///
/// `loss` builds a scalar loss on a fresh graph from bound parameters. Up to
/// `samples_per_param` coordinates of every parameter are checked; the
/// returned value is the largest
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn gradient_check<F>(
    params: &ParameterSet,
    epsilon: f64,
    samples_per_param: usize,
    seed: u64,
    loss: F,
) -> Result<f64, NnError>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var, NnError>,
{
    if !(1e-7..=1e-4).contains(&epsilon) {
        return Err(NnError::Config(format!("epsilon {epsilon} outside [1e-7, 1e-4]")));
    }
    let eval = |p: &ParameterSet| -> Result<f64, NnError> {
        let mut g = Graph::new();
        let b = g.bind(p);
        let l = loss(&mut g, &b)?;
        let v = g.value(l)[0];
        if v.is_finite() {
            Ok(v)
        } else {
            Err(NnError::NonFinite(format!("gradient check loss = {v}")))
        }
    };

    let mut analytic = params.clone();
    {
        let mut g = Graph::new();
        let b = g.bind(&analytic);
        let l = loss(&mut g, &b)?;
        let v = g.value(l)[0];
        if !v.is_finite() {
            return Err(NnError::NonFinite(format!("gradient check loss = {v}")));
        }
        g.backward(l, &mut analytic)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut probe = params.clone();
    for name in names {
        let n = params.get(&name)?.len();
        let grad = analytic.get(&name)?.grad().map(<[f64]>::to_vec).unwrap_or_default();
        for idx in sample(&mut rng, n, samples_per_param.min(n)) {
            let orig = params.get(&name)?.data()[idx];
            probe.get_mut(&name)?.data_mut()[idx] = orig + epsilon;
            let up = eval(&probe)?;
            probe.get_mut(&name)?.data_mut()[idx] = orig - epsilon;
            let down = eval(&probe)?;
            probe.get_mut(&name)?.data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = grad.get(idx).copied().unwrap_or(0.0);
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
