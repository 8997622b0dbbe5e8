//! Named parameter collections, initializers, tape bindings, and the Adam
//! optimizer. Parameter maps are ordered (BTreeMap) so every iteration,
//! reduction, and serialization walks names in the same order.

use crate::autodiff::{Gradients, Tape, Var};
use crate::scalar::Scalar;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use std::collections::BTreeMap;

pub type ParamSet<F> = BTreeMap<String, ArrayD<F>>;

/// Total number of scalar parameters.
pub fn param_count<F: Scalar>(params: &ParamSet<F>) -> usize {
    params.values().map(|t| t.len()).sum()
}

/// Maps parameter names to tape leaves for one forward/backward pass.
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    /// Insert every parameter as a leaf; `trainable` decides per name
    /// whether gradients are tracked.
    pub fn bind<F: Scalar>(
        tape: &mut Tape<F>,
        params: &ParamSet<F>,
        trainable: impl Fn(&str) -> bool,
    ) -> Binding {
        let mut vars = BTreeMap::new();
        for (name, value) in params {
            let v = tape.leaf(value.clone(), trainable(name));
            vars.insert(name.clone(), v);
        }
        Binding { vars }
    }

    pub fn bind_all<F: Scalar>(tape: &mut Tape<F>, params: &ParamSet<F>) -> Binding {
        Self::bind(tape, params, |_| true)
    }

    pub fn bind_frozen<F: Scalar>(tape: &mut Tape<F>, params: &ParamSet<F>) -> Binding {
        Self::bind(tape, params, |_| false)
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter `{name}`"))
    }

    /// Collect gradients back out of a tape pass, keyed by parameter name.
    /// Parameters that received no gradient are omitted.
    pub fn gradients<F: Scalar>(&self, grads: &Gradients<F>) -> ParamSet<F> {
        let mut out = ParamSet::new();
        for (name, var) in &self.vars {
            if let Some(g) = grads.get(*var) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

/// Accumulate `delta` into `acc` (missing keys are inserted), in name order.
pub fn accumulate<F: Scalar>(acc: &mut ParamSet<F>, delta: &ParamSet<F>) {
    for (name, g) in delta {
        match acc.get_mut(name) {
            Some(a) => *a += g,
            None => {
                acc.insert(name.clone(), g.clone());
            }
        }
    }
}

pub fn scale_params<F: Scalar>(params: &mut ParamSet<F>, c: F) {
    for v in params.values_mut() {
        v.mapv_inplace(|x| x * c);
    }
}

/// Gaussian init with the given standard deviation.
pub fn randn_init<F: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> ArrayD<F> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let z: F = F::standard_normal(rng);
        z * F::from_f64(std)
    })
}

/// He-style fan-in scaled init for conv/linear weights.
pub fn kaiming_init<F: Scalar, R: Rng>(rng: &mut R, shape: &[usize]) -> ArrayD<F> {
    let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
    randn_init(rng, shape, (1.0 / fan_in as f64).sqrt())
}

pub fn zeros<F: Scalar>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::zeros(IxDyn(shape))
}

/// Adam with fixed element order; moments are named tensors so the whole
/// optimizer state round-trips through checkpoints.
#[derive(Debug, Clone)]
pub struct Adam<F: Scalar> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    pub step: u64,
    pub m: ParamSet<F>,
    pub v: ParamSet<F>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr: F::from_f64(lr),
            beta1: F::from_f64(0.9),
            beta2: F::from_f64(0.999),
            eps: F::from_f64(1e-8),
            step: 0,
            m: ParamSet::new(),
            v: ParamSet::new(),
        }
    }

    /// One update over all gradient entries. Parameters without a gradient
    /// this step keep their moments untouched.
    pub fn update(&mut self, params: &mut ParamSet<F>, grads: &ParamSet<F>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = F::one() - self.beta1.powi(t);
        let bc2 = F::one() - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter `{name}`"));
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (F::one() - b1) * g;
                    *v = b2 * *v + (F::one() - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p = *p - lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn adam_minimizes_quadratic() {
        // f(p) = |p - target|^2
        let target = 3.5f64;
        let mut params = ParamSet::new();
        params.insert("p".to_string(), ArrayD::from_elem(IxDyn(&[1]), 0.0f64));
        let mut opt = Adam::new(0.1);
        for _ in 0..400 {
            let p = params["p"][[0]];
            let mut grads = ParamSet::new();
            grads.insert(
                "p".to_string(),
                ArrayD::from_elem(IxDyn(&[1]), 2.0 * (p - target)),
            );
            opt.update(&mut params, &grads);
        }
        assert!((params["p"][[0]] - target).abs() < 1e-3);
    }

    #[test]
    fn kaiming_init_scale() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let w: ArrayD<f64> = kaiming_init(&mut rng, &[64, 32, 3, 3]);
        let var: f64 = w.iter().map(|x| x * x).sum::<f64>() / w.len() as f64;
        let expect = 1.0 / (32.0 * 9.0);
        assert!((var - expect).abs() / expect < 0.2, "var {var} vs {expect}");
    }

    #[test]
    fn accumulate_inserts_and_adds() {
        let mut acc: ParamSet<f64> = ParamSet::new();
        let mut d = ParamSet::new();
        d.insert("a".into(), ArrayD::from_elem(IxDyn(&[2]), 1.0));
        accumulate(&mut acc, &d);
        accumulate(&mut acc, &d);
        assert_eq!(acc["a"][[0]], 2.0);
    }
}
