//! Named slices of the flat parameter vector.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LayerSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl LayerSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> core::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered layers whose ranges tile `0..total` without gaps.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Layout {
    pub layers: Vec<LayerSpec>,
}

impl Layout {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize]) {
        let offset = self.total();
        self.layers.push(LayerSpec { name: name.into(), shape: shape.to_vec(), offset });
    }

    pub fn total(&self) -> usize {
        self.layers.last().map_or(0, |l| l.offset + l.len())
    }

    pub fn get(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn range(&self, name: &str) -> core::ops::Range<usize> {
        match self.get(name) {
            Some(l) => l.range(),
            None => panic!("layer {name} missing from layout"),
        }
    }

    /// Checks that offsets partition `0..total` in order.
    pub fn validate(&self) -> Result<()> {
        let mut next = 0;
        for l in &self.layers {
            if l.offset != next || l.is_empty() {
                return Err(Error::Validation(format!("layer {} at offset {} (expected {next})", l.name, l.offset)));
            }
            next += l.len();
        }
        Ok(())
    }
}
