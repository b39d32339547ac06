use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// A learnable tensor with its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Scalar> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

/// Named parameters, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T: Scalar> {
    entries: BTreeMap<String, Param<T>>,
}

/// Shape and flags of one parameter, as recorded in checkpoint indexes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub shape: [usize; 4],
    pub trainable: bool,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        let grad = Tensor::zeros(value.shape());
        self.entries.insert(name, Param { value, grad, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.value)
    }

    /// Replaces a value, keeping the shape.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self.get_mut(name)?;
        value.expect_shape(p.value.shape())?;
        p.value = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.fill(T::zero());
        }
    }

    pub fn fill_values(&mut self, value: T) {
        for p in self.entries.values_mut() {
            p.value.fill(value);
        }
    }

    pub fn layout(&self) -> BTreeMap<String, ParamInfo> {
        self.entries
            .iter()
            .map(|(k, p)| {
                (
                    k.clone(),
                    ParamInfo {
                        shape: p.value.shape().0,
                        trainable: p.trainable,
                    },
                )
            })
            .collect()
    }

    /// Converts element type, keeping gradients.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            grad: p.grad.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Fails unless `other` has the same names, shapes and flags.
    pub fn check_layout(&self, expected: &BTreeMap<String, ParamInfo>) -> Result<()> {
        let actual = self.layout();
        for (name, info) in expected {
            match actual.get(name) {
                None => return Err(Error::shape(format!("checkpoint lacks parameter {name}"))),
                Some(a) if a.shape != info.shape => {
                    return Err(Error::shape(format!(
                        "parameter {name}: model expects {:?}, checkpoint has {:?}",
                        Shape(a.shape),
                        Shape(info.shape)
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = actual.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::shape(format!("model parameter {extra} missing from checkpoint")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grads_match_values_and_zero() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", Tensor::full(Shape::new(2, 1, 1, 1), 1.0), true).unwrap();
        s.insert("b", Tensor::full(Shape::new(1, 3, 1, 1), 2.0), false).unwrap();
        assert!(s.insert("a", Tensor::zeros(Shape::new(1, 1, 1, 1)), true).is_err());
        for (_, p) in s.iter_mut() {
            assert_eq!(p.grad.shape(), p.value.shape());
            p.grad.fill(5.0);
        }
        s.zero_grads();
        assert!(s.iter().all(|(_, p)| p.grad.data().iter().all(|&g| g == 0.0)));
        assert_eq!(s.names().collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(s.numel(), 5);
    }

    #[test]
    fn layout_check_detects_mismatch() {
        let mut s = ParamStore::<f32>::new();
        s.insert("w", Tensor::zeros(Shape::new(2, 2, 3, 3)), true).unwrap();
        let mut layout = s.layout();
        assert!(s.check_layout(&layout).is_ok());
        layout.get_mut("w").unwrap().shape = [2, 4, 3, 3];
        assert!(matches!(s.check_layout(&layout), Err(Error::Shape(_))));
        layout.clear();
        assert!(s.check_layout(&layout).is_err());
    }
}
