use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParamError {
    #[error("parameter `{0}` registered twice")]
    Duplicate(String),
    #[error("unknown parameter group `{0}` (expected backbone, adapters, saca, dgp or head)")]
    UnknownGroup(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("parameter `{name}`: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("missing parameter `{0}` in loaded arrays")]
    Missing(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Freezing unit. Every parameter belongs to exactly one group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Backbone,
    Adapters,
    Saca,
    Dgp,
    Head,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] =
        [ParamGroup::Backbone, ParamGroup::Adapters, ParamGroup::Saca, ParamGroup::Dgp, ParamGroup::Head];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Adapters => "adapters",
            ParamGroup::Saca => "saca",
            ParamGroup::Dgp => "dgp",
            ParamGroup::Head => "head",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParamGroup {
    type Err = ParamError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ParamGroup::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| ParamError::UnknownGroup(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named parameters in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor) -> Result<ParamId, ParamError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(ParamError::Duplicate(name));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, group, tensor, trainable: true });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn num_scalars_in(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Mark the named groups untrainable. Other groups keep their flag.
    pub fn freeze(&mut self, groups: &[ParamGroup]) {
        for p in &mut self.params {
            if groups.contains(&p.group) {
                p.trainable = false;
            }
        }
    }

    pub fn freeze_by_name<S: AsRef<str>>(&mut self, groups: &[S]) -> Result<(), ParamError> {
        let groups = groups
            .iter()
            .map(|g| g.as_ref().parse())
            .collect::<Result<Vec<ParamGroup>, _>>()?;
        self.freeze(&groups);
        Ok(())
    }

    pub fn unfreeze_all(&mut self) {
        self.params.iter_mut().for_each(|p| p.trainable = true);
    }

    pub fn group_norm(&self, group: ParamGroup) -> f64 {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .flat_map(|p| p.tensor.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Round every value to the nearest 32-bit float.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            for x in p.tensor.data_mut() {
                *x = *x as f32 as f64;
            }
        }
    }

    /// Add `N(0, std^2)` noise to every value. Zero-initialized projections
    /// otherwise hide the gradients of everything upstream of them.
    pub fn perturb(&mut self, rng: &mut impl Rng, std: f64) {
        for p in &mut self.params {
            for x in p.tensor.data_mut() {
                *x += std * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }

    /// Replace values from `(name, tensor)` pairs; names and shapes must match
    /// the registered parameters exactly.
    pub fn load_named(&mut self, arrays: Vec<(String, Tensor)>) -> Result<(), ParamError> {
        let mut seen = vec![false; self.params.len()];
        for (name, tensor) in arrays {
            let id = self.find(&name).ok_or_else(|| ParamError::UnknownParameter(name.clone()))?;
            let p = &mut self.params[id.0];
            if p.tensor.shape() != tensor.shape() {
                return Err(ParamError::ShapeMismatch {
                    name,
                    expected: p.tensor.shape().to_vec(),
                    found: tensor.shape().to_vec(),
                });
            }
            p.tensor = tensor;
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(ParamError::Missing(self.params[i].name.clone()));
        }
        Ok(())
    }
}

/// Gaussian-initialized matrix with standard deviation `std`.
pub fn init_normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).expect("shape matches data")
}
