//! Named, seeded parameter storage shared by all trainable modules.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};

use crate::error::{Error, Result};
use crate::rng::{normal_vec, SeededRng};
use crate::tensor_io::{StoredTensor, LAYOUT_ROW_MAJOR};

#[derive(Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("params", &self.vars.len())
            .field("elements", &self.num_elements())
            .field("dtype", &self.dtype)
            .finish()
    }
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, tensor: Tensor) -> Result<Var> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("parameter `{name}` registered twice")));
        }
        let var = Var::from_tensor(&tensor.to_dtype(self.dtype)?)?;
        self.vars.insert(name.to_string(), var.clone());
        Ok(var)
    }

    /// Gaussian init with the given standard deviation.
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut SeededRng) -> Result<Var> {
        let n = shape.iter().product();
        let v: Vec<f64> = normal_vec(rng, n).into_iter().map(|x| x * std).collect();
        let t = Tensor::from_vec(v, shape, &self.device)?;
        self.insert(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Var> {
        let t = Tensor::zeros(shape, self.dtype, &self.device)?;
        self.insert(name, t)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<Var> {
        let t = Tensor::ones(shape, self.dtype, &self.device)?;
        self.insert(name, t)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Parameters whose name starts with `prefix`, in name order.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Var)> {
        self.vars
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, v)| (n.clone(), v.clone()))
            .collect()
    }

    pub fn all(&self) -> Vec<(String, Var)> {
        self.with_prefix("")
    }

    /// Host copy of every parameter as `f32`.
    pub fn snapshot(&self) -> Result<BTreeMap<String, StoredTensor>> {
        self.vars
            .iter()
            .map(|(n, v)| Ok((n.clone(), to_stored(v.as_tensor())?)))
            .collect()
    }

    /// Overwrites parameters from stored tensors. Every model parameter must
    /// be present with a matching shape.
    pub fn load(&self, stored: &BTreeMap<String, StoredTensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let src = stored
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter `{name}`")))?;
            if src.shape != var.dims() {
                return Err(Error::ParamShape {
                    name: name.clone(),
                    expected: var.dims().to_vec(),
                    found: src.shape.clone(),
                });
            }
            var.set(&from_stored(src, self.dtype, &self.device)?)?;
        }
        for name in stored.keys() {
            if !self.vars.contains_key(name) {
                return Err(Error::Config(format!(
                    "checkpoint parameter `{name}` does not exist in the model"
                )));
            }
        }
        Ok(())
    }

    /// Overwrites the parameters that `stored` provides and returns the names
    /// it lacks, which keep their current values. Shapes must still match.
    pub fn load_matching(&self, stored: &BTreeMap<String, StoredTensor>) -> Result<Vec<String>> {
        let mut missing = Vec::new();
        for (name, var) in &self.vars {
            let Some(src) = stored.get(name) else {
                missing.push(name.clone());
                continue;
            };
            if src.shape != var.dims() {
                return Err(Error::ParamShape {
                    name: name.clone(),
                    expected: var.dims().to_vec(),
                    found: src.shape.clone(),
                });
            }
            var.set(&from_stored(src, self.dtype, &self.device)?)?;
        }
        Ok(missing)
    }

    /// Copies values from another store with the same names and shapes.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        self.load(&other.snapshot()?)
    }
}

pub fn to_stored(t: &Tensor) -> Result<StoredTensor> {
    let data: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    StoredTensor::new(t.dims().to_vec(), LAYOUT_ROW_MAJOR, data)
}

pub fn from_stored(s: &StoredTensor, dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(s.data.clone(), s.shape.as_slice(), device)?.to_dtype(dtype)?)
}
