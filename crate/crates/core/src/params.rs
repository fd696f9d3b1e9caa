//! Named, shape-tagged parameter registry.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Running statistics, updated by forward passes in training mode.
    Buffer,
}

impl ParamKind {
    /// Kind implied by a parameter name; checkpoints store names only.
    pub fn from_name(name: &str) -> Self {
        if name.ends_with(".running_mean") || name.ends_with(".running_var") {
            ParamKind::Buffer
        } else {
            ParamKind::Trainable
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub kind: ParamKind,
}

/// Every learnable quantity of the model plus batch-norm statistics, keyed
/// by a unique dotted name. Iteration order is name-sorted.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelParams {
    map: BTreeMap<String, Param>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter; names must be unique.
    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.map.contains_key(name) {
            return Err(Error::Integrity(alloc::format!(
                "duplicate parameter name `{name}`"
            )));
        }
        let kind = ParamKind::from_name(name);
        if kind == ParamKind::Buffer
            && name.ends_with(".running_var")
            && tensor.data().iter().any(|&v| !(v > 0.0))
        {
            return Err(Error::Integrity(alloc::format!(
                "running variance `{name}` must be strictly positive"
            )));
        }
        self.map.insert(name.to_string(), Param { tensor, kind });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.map.get(name).map(|p| p.kind)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map
            .iter()
            .filter(|(_, p)| p.kind == ParamKind::Trainable)
            .map(|(k, p)| (k.as_str(), &p.tensor))
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|p| p.tensor.len()).sum()
    }

    /// Rounds every value through `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for p in self.map.values_mut() {
            for v in p.tensor.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn fan_in_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / math::sqrt(fan_in.max(1) as f64);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

pub fn normal<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Registers `{prefix}.weight` (`out x in`) and a zero `{prefix}.bias`.
pub fn init_linear<R: Rng>(
    params: &mut ModelParams,
    rng: &mut R,
    prefix: &str,
    out: usize,
    inp: usize,
) -> Result<()> {
    params.insert(
        &alloc::format!("{prefix}.weight"),
        fan_in_uniform(rng, &[out, inp], inp),
    )?;
    params.insert(&alloc::format!("{prefix}.bias"), Tensor::zeros(&[out]))
}

/// Registers a conv kernel `out x in x width` and a zero bias.
pub fn init_conv1d<R: Rng>(
    params: &mut ModelParams,
    rng: &mut R,
    prefix: &str,
    out: usize,
    inp: usize,
    width: usize,
) -> Result<()> {
    params.insert(
        &alloc::format!("{prefix}.weight"),
        fan_in_uniform(rng, &[out, inp, width], inp * width),
    )?;
    params.insert(&alloc::format!("{prefix}.bias"), Tensor::zeros(&[out]))
}

/// Unit scale, zero shift, zero running mean, unit running variance.
pub fn init_batch_norm(params: &mut ModelParams, prefix: &str, dim: usize) -> Result<()> {
    params.insert(&alloc::format!("{prefix}.scale"), Tensor::filled(&[dim], 1.0))?;
    params.insert(&alloc::format!("{prefix}.shift"), Tensor::zeros(&[dim]))?;
    params.insert(&alloc::format!("{prefix}.running_mean"), Tensor::zeros(&[dim]))?;
    params.insert(&alloc::format!("{prefix}.running_var"), Tensor::filled(&[dim], 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ModelParams::new();
        p.insert("a.weight", Tensor::zeros(&[2])).unwrap();
        assert!(matches!(
            p.insert("a.weight", Tensor::zeros(&[2])),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn running_variance_must_be_positive() {
        let mut p = ModelParams::new();
        assert!(p.insert("bn.running_var", Tensor::zeros(&[2])).is_err());
        p.insert("bn.running_var", Tensor::filled(&[2], 0.5)).unwrap();
        assert_eq!(p.kind("bn.running_var"), Some(ParamKind::Buffer));
        assert_eq!(ParamKind::from_name("bn.scale"), ParamKind::Trainable);
    }
}
