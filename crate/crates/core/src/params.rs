//! Named parameter storage and binding onto a tape.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Parameter arrays keyed by canonical names such as `backbone.conv1.weight`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    arrays: BTreeMap<String, ArrayD<f64>>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.arrays.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<f64>> {
        self.arrays
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.arrays.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Copies every array under `from.` to the same suffix under `to.`.
    pub fn copy_prefix(&mut self, from: &str, to: &str, layers: &[&str]) -> Result<()> {
        for layer in layers {
            for kind in ["weight", "bias"] {
                let src = format!("{from}.{layer}.{kind}");
                let value = self.get(&src)?.clone();
                self.insert(format!("{to}.{layer}.{kind}"), value);
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.arrays.values().all(|a| a.iter().all(|v| v.is_finite()))
    }

    /// Puts every parameter on `tape`; names accepted by `trainable` become
    /// differentiable leaves, the rest constants.
    pub fn bind(&self, tape: &mut Tape, trainable: &dyn Fn(&str) -> bool) -> Bound {
        let vars = self
            .arrays
            .iter()
            .map(|(name, value)| {
                let v = if trainable(name) {
                    tape.var(value.clone())
                } else {
                    tape.constant(value.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters placed on a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Names and vars of the differentiable leaves.
    pub fn trainable(&self, tape: &Tape) -> Vec<(String, Var)> {
        self.vars
            .iter()
            .filter(|(_, v)| tape.requires_grad(**v))
            .map(|(k, v)| (k.clone(), *v))
            .collect()
    }
}

/// He-normal weights scaled by `gain`, zero bias.
pub fn init_conv<R: Rng>(rng: &mut R, out_c: usize, in_c: usize, k: usize, gain: f64) -> (ArrayD<f64>, ArrayD<f64>) {
    let std = gain * (2.0 / (in_c * k * k) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let w = ArrayD::from_shape_fn(IxDyn(&[out_c, in_c, k, k]), |_| normal.sample(rng));
    let b = ArrayD::zeros(IxDyn(&[out_c]));
    (w, b)
}
