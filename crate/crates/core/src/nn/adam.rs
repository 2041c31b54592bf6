use std::collections::BTreeMap;

use ndarray::{ArrayD, Zip};

use crate::datamodel::is_buffer_key;
use crate::meanteacher::ModelAdapter;
use crate::{Result, Scalar};

/// Adam over the trainable entries of a [`ModelAdapter`].
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: BTreeMap<String, ArrayD<F>>,
    v: BTreeMap<String, ArrayD<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(momenta: [f64; 2]) -> Self {
        Self {
            beta1: momenta[0],
            beta2: momenta[1],
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Applies one update with the model's accumulated gradients.
    pub fn step<M: ModelAdapter<F>>(&mut self, model: &mut M, lr: f64) -> Result<()> {
        self.t += 1;
        let grads = model.gradients();
        let mut params = model.read_params();
        let (b1, b2) = (F::lit(self.beta1), F::lit(self.beta2));
        let c1 = F::lit(1.0 - self.beta1.powi(self.t));
        let c2 = F::lit(1.0 - self.beta2.powi(self.t));
        let lr = F::lit(lr);
        let eps = F::lit(self.eps);
        for (key, g) in &grads.entries {
            if is_buffer_key(key) {
                continue;
            }
            let m = self.m.entry(key.clone()).or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self.v.entry(key.clone()).or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let p = params.entries.get_mut(key).expect("gradient keys are parameter keys");
            Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (F::one() - b1) * g;
                *v = b2 * *v + (F::one() - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= lr * mh / (vh.sqrt() + eps);
            });
        }
        model.write_params(&params)
    }
}
