use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::params::Params;

/// Stochastic gradient descent with heavy-ball momentum:
/// `v <- momentum * v + g`, `p <- p - lr * v`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    /// Rescales the whole gradient to at most this L2 norm.
    pub clip_norm: Option<f64>,
    velocity: BTreeMap<String, ArrayD<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, clip_norm: Option<f64>) -> Self {
        Sgd {
            lr,
            momentum,
            clip_norm,
            velocity: BTreeMap::new(),
        }
    }

    /// Applies one update. Returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut Params, grads: &[(String, ArrayD<f64>)]) -> Result<f64> {
        let norm = grads.iter().map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Numerical("non-finite gradient".into()));
        }
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape(format!("gradient for {name}"), p.shape(), g.shape()));
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| *v = self.momentum * *v + scale * g);
            ndarray::Zip::from(p).and(&*v).for_each(|p, &v| *p -= self.lr * v);
        }
        Ok(norm)
    }
}
