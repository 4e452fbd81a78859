//! Named trainable tensors and the non-negativity constraint.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A tensor with a name and an optional `≥ 0` constraint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    name: String,
    value: Tensor,
    non_negative: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor, non_negative: bool) -> Self {
        Parameter {
            name: name.into(),
            value,
            non_negative,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn non_negative(&self) -> bool {
        self.non_negative
    }

    /// Clamps negative entries to zero if the parameter is constrained.
    pub fn project(&mut self) {
        if self.non_negative {
            for v in self.value.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.non_negative {
            if let Some((index, &value)) = self
                .value
                .data()
                .iter()
                .enumerate()
                .find(|(_, v)| !(**v >= 0.0))
            {
                return Err(Error::NonNegativity {
                    name: self.name.clone(),
                    index,
                    value,
                });
            }
        }
        Ok(())
    }
}

/// Ordered collection of parameters addressed by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Parameter>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, p: Parameter) -> Result<()> {
        if self.index.contains_key(p.name()) {
            return Err(Error::Contract(alloc::format!(
                "duplicate parameter `{}`",
                p.name()
            )));
        }
        self.index.insert(p.name.clone(), self.params.len());
        self.params.push(p);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| Error::MissingParameter(name.into()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i]),
            None => Err(Error::MissingParameter(name.into())),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn project_all(&mut self) {
        self.params.iter_mut().for_each(Parameter::project);
    }

    /// Fails on the first constrained parameter holding a negative entry.
    pub fn check_constraints(&self) -> Result<()> {
        self.params.iter().try_for_each(Parameter::check)
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }
}
