use std::collections::BTreeMap;

use super::{ParamStore, Tensor};
use crate::error::Result;

/// Central-difference gradient of `f` at `params`, one coordinate at a time.
pub fn finite_diff<F>(f: F, params: &ParamStore, eps: f64) -> Result<BTreeMap<String, Tensor>>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    let mut work = params.clone();
    let mut out = BTreeMap::new();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let len = params.get(&name).unwrap().len();
        let mut g = Tensor::zeros(params.get(&name).unwrap().shape());
        for i in 0..len {
            let orig = work.get(&name).unwrap().data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = orig + eps;
            let up = f(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig - eps;
            let down = f(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * eps);
        }
        out.insert(name, g);
    }
    Ok(out)
}

/// Largest norm-wise relative error `‖a−b‖ / max(‖a‖, ‖b‖)` over the tensors
/// present in both maps. Pairs that are both (numerically) zero count as 0.
pub fn max_rel_error(a: &BTreeMap<String, Tensor>, b: &BTreeMap<String, Tensor>) -> f64 {
    let mut worst: f64 = 0.0;
    for (name, ta) in a {
        let Some(tb) = b.get(name) else { continue };
        let diff = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let na = ta.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = tb.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = na.max(nb);
        if scale < 1e-12 {
            continue;
        }
        worst = worst.max(diff / scale);
    }
    worst
}
