use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::AutodiffError;

/// Worst relative error between the tape's gradient and central finite
/// differences, over every scalar in `store`.
///
/// `f` builds the scalar objective on a fresh graph from the given parameter
/// values. Relative error per coordinate is `|a − n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<F>(store: &ParamStore, eps: f64, f: F) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, AutodiffError>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let analytic = g.backward(loss)?.param_grads(store);

    let eval = |s: &ParamStore| -> Result<f64, AutodiffError> {
        let mut g = Graph::new();
        let v = f(&mut g, s)?;
        Ok(g.value(v).item())
    };

    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    for id in store.ids() {
        for j in 0..store.value(id).len() {
            let orig = store.value(id).data()[j];
            probe.value_mut(id).data_mut()[j] = orig + eps;
            let up = eval(&probe)?;
            probe.value_mut(id).data_mut()[j] = orig - eps;
            let down = eval(&probe)?;
            probe.value_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.get(id).data()[j];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
