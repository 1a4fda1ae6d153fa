use super::network::ParameterSet;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradients for every tensor of a [`ParameterSet`], in the same order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl GradientSet {
    /// Free-standing gradient set; names must be unique.
    pub fn new(names: Vec<String>, tensors: Vec<Tensor>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::Shape(format!("{} names for {} tensors", names.len(), tensors.len())));
        }
        Ok(Self { names, tensors })
    }

    /// Single-tensor gradient set, handy for synthetic vectors.
    pub fn from_vector(values: Vec<f64>) -> Self {
        Self {
            names: vec!["g".into()],
            tensors: vec![Tensor::vector(values)],
        }
    }

    pub fn zeros_like(params: &ParameterSet) -> Self {
        Self {
            names: params.entries().iter().map(|(n, _)| n.clone()).collect(),
            tensors: params.tensors().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn from_tensors(params: &ParameterSet, tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != params.entries().len() {
            return Err(Error::Shape(format!(
                "{} gradient tensors for {} parameters",
                tensors.len(),
                params.entries().len()
            )));
        }
        for ((name, p), g) in params.entries().iter().zip(&tensors) {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient for {name} has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        Ok(Self {
            names: params.entries().iter().map(|(n, _)| n.clone()).collect(),
            tensors,
        })
    }

    /// Builds a gradient set from one flat vector laid out like [`Self::flatten`].
    pub fn from_flat(template: &GradientSet, flat: &[f64]) -> Result<Self> {
        if flat.len() != template.num_scalars() {
            return Err(Error::Shape(format!(
                "flat gradient has {} entries, expected {}",
                flat.len(),
                template.num_scalars()
            )));
        }
        let mut offset = 0;
        let tensors = template
            .tensors
            .iter()
            .map(|t| {
                let part = flat[offset..offset + t.len()].to_vec();
                offset += t.len();
                Tensor::from_parts(t.shape().to_vec(), part).expect("layout from template")
            })
            .collect();
        Ok(Self {
            names: template.names.clone(),
            tensors,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn same_layout(&self, other: &GradientSet) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn dot(&self, other: &GradientSet) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()))
            .map(|(x, y)| x * y)
            .sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data().iter().all(|v| v.is_finite()))
    }

    /// `self + alpha * other`, elementwise.
    pub fn axpy(&self, alpha: f64, other: &GradientSet) -> GradientSet {
        let tensors = self
            .tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| {
                let data = a.data().iter().zip(b.data()).map(|(x, y)| x + alpha * y).collect();
                Tensor::from_parts(a.shape().to_vec(), data).expect("same layout")
            })
            .collect();
        GradientSet {
            names: self.names.clone(),
            tensors,
        }
    }

    pub fn scaled(&self, c: f64) -> GradientSet {
        let tensors = self
            .tensors
            .iter()
            .map(|a| {
                let data = a.data().iter().map(|x| c * x).collect();
                Tensor::from_parts(a.shape().to_vec(), data).expect("same layout")
            })
            .collect();
        GradientSet {
            names: self.names.clone(),
            tensors,
        }
    }
}

/// Differentiates `loss` with respect to the parameter leaves `vars`.
pub fn backward(tape: &Tape<'_>, loss: Var, vars: &[Var], params: &ParameterSet) -> Result<GradientSet> {
    let tensors = tape.backward(loss, vars)?;
    GradientSet::from_tensors(params, tensors)
}
