use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    Normal(f64),
}

struct Inner {
    vars: BTreeMap<String, Var>,
    seed: u64,
    dtype: DType,
    device: Device,
}

/// Named trainable parameters.
///
/// Every parameter is initialized from its own ChaCha stream keyed by
/// `(seed, full name)`, so initial values do not depend on construction order.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
    prefix: String,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf29ce484222325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                vars: BTreeMap::new(),
                seed,
                dtype,
                device: Device::Cpu,
            })),
            prefix: String::new(),
        }
    }

    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        Self {
            inner: self.inner.clone(),
            prefix: self.path(name.as_ref()),
        }
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn dtype(&self) -> DType {
        self.inner.lock().unwrap().dtype
    }

    pub fn device(&self) -> Device {
        self.inner.lock().unwrap().device.clone()
    }

    pub fn get(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Tensor> {
        let shape = shape.into();
        let full = self.path(name);
        let mut inner = self.inner.lock().unwrap();
        if let Some(v) = inner.vars.get(&full) {
            if v.shape() != &shape {
                return Err(Error::Shape(format!(
                    "parameter {full} exists with shape {:?}, requested {:?}",
                    v.shape(),
                    shape
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let n = shape.elem_count();
        let mut rng = ChaCha8Rng::seed_from_u64(inner.seed ^ fnv1a(full.as_bytes()));
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
            Init::Normal(std) => (0..n)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        };
        let t = Tensor::from_vec(data, shape, &inner.device)?.to_dtype(inner.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        inner.vars.insert(full, var);
        Ok(out)
    }

    /// All parameters under this store's prefix, sorted by name.
    pub fn vars(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().unwrap();
        inner
            .vars
            .iter()
            .filter(|(k, _)| self.prefix.is_empty() || k.starts_with(&format!("{}.", self.prefix)))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn named_tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars()
            .into_iter()
            .map(|(k, v)| (k, v.as_tensor().clone()))
            .collect()
    }

    /// Overwrites existing parameters in place; every parameter must be present.
    pub fn load_tensors(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.vars() {
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.shape() != var.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: checkpoint shape {:?} != model shape {:?}",
                    t.shape(),
                    var.shape()
                )));
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }

    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let inner = self.inner.lock().unwrap();
        let var = inner
            .vars
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        var.set(&value.to_dtype(var.dtype())?)?;
        Ok(())
    }

    /// Sets every parameter whose name satisfies `pred` to zero.
    pub fn zero_where(&self, pred: impl Fn(&str) -> bool) -> Result<usize> {
        let mut n = 0;
        for (name, var) in self.vars() {
            if pred(&name) {
                var.set(&var.as_tensor().zeros_like()?)?;
                n += 1;
            }
        }
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_keyed_by_seed_and_name() {
        let a = ParamStore::new(3, DType::F32);
        let b = ParamStore::new(3, DType::F32);
        // different creation order
        let _ = b.pp("x").get("w", (4, 4), Init::Normal(1.0)).unwrap();
        let ta = a.pp("y").get("w", (2, 3), Init::Uniform(0.5)).unwrap();
        let tb = b.pp("y").get("w", (2, 3), Init::Uniform(0.5)).unwrap();
        assert_eq!(ta.to_vec2::<f32>().unwrap(), tb.to_vec2::<f32>().unwrap());
        let c = ParamStore::new(4, DType::F32);
        let tc = c.pp("y").get("w", (2, 3), Init::Uniform(0.5)).unwrap();
        assert_ne!(ta.to_vec2::<f32>().unwrap(), tc.to_vec2::<f32>().unwrap());
    }

    #[test]
    fn repeated_get_shares_storage_and_checks_shape() {
        let ps = ParamStore::new(0, DType::F64);
        let t = ps.get("w", 3, Init::Zeros).unwrap();
        ps.set("w", &Tensor::new(&[1.0f64, 2.0, 3.0], &Device::Cpu).unwrap()).unwrap();
        assert_eq!(t.to_vec1::<f64>().unwrap(), vec![1.0, 2.0, 3.0]);
        assert!(ps.get("w", 4, Init::Zeros).is_err());
        assert_eq!(ps.num_params(), 3);
    }
}
