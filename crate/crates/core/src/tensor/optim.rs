use std::collections::BTreeMap;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, Default, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// First/second moment estimates and step counts, tracked per parameter so a
/// parameter that sits out a step keeps its own bias correction.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of updates applied to `name` so far.
    pub fn steps(&self, name: &str) -> u64 {
        self.moments.get(name).map_or(0, |m| m.step)
    }
}

/// One Adam update of every parameter named in `grads`. Parameters absent
/// from `grads` are left untouched; a gradient without a matching parameter
/// (or with a different shape) is a contract error.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
    state: &mut AdamState,
) -> Result<()> {
    for (name, g) in grads {
        match params.get(name) {
            Some(p) if p.shape() == g.shape() => {}
            Some(_) => {
                return Err(Error::Contract(format!("gradient shape mismatch for {name}")))
            }
            None => return Err(Error::Contract(format!("gradient for unknown parameter {name}"))),
        }
    }
    for (name, g) in grads {
        let p = params.get_mut(name).unwrap();
        let mo = state.moments.entry(name.clone()).or_insert_with(|| Moments {
            m: vec![0.0; g.len()],
            v: vec![0.0; g.len()],
            step: 0,
        });
        mo.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(mo.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(mo.step as i32);
        for (((w, &gi), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(mo.m.iter_mut())
            .zip(mo.v.iter_mut())
        {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * gi;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * gi * gi;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *w -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ParamStore {
        let mut p = ParamStore::new(0);
        p.insert("w", Tensor::from_vec(vec![v])).unwrap();
        p
    }

    fn grads(g: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("w".to_string(), Tensor::from_vec(vec![g]))])
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = single(2.5);
        let mut s = AdamState::new();
        adam_step(&mut p, &grads(0.0), 1e-3, &mut s).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 2.5);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        for g in [3.0, -0.2] {
            let mut p = single(1.0);
            let mut s = AdamState::new();
            adam_step(&mut p, &grads(g), 1e-3, &mut s).unwrap();
            let moved = p.get("w").unwrap().item() - 1.0;
            assert!(moved * g < 0.0);
            assert!((moved.abs() - 1e-3).abs() < 1e-8);
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        // from w=1 the iterate is still ringing at step 200 (|w| ≈ 0.016)
        let mut p = single(0.5);
        let mut s = AdamState::new();
        for _ in 0..200 {
            let w = p.get("w").unwrap().item();
            adam_step(&mut p, &grads(2.0 * w), 1e-2, &mut s).unwrap();
        }
        assert!(p.get("w").unwrap().item().abs() < 1e-2);
    }

    #[test]
    fn unknown_key_is_contract_error() {
        let mut p = single(1.0);
        let mut s = AdamState::new();
        let g = BTreeMap::from([("x".to_string(), Tensor::from_vec(vec![1.0]))]);
        assert!(matches!(
            adam_step(&mut p, &g, 1e-3, &mut s),
            Err(Error::Contract(_))
        ));
    }
}
