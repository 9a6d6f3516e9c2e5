//! Named, seeded parameter storage shared by every module.
//!
//! Each parameter draws its initial values from an RNG seeded by
//! `(store seed, parameter name)`, so initialisation does not depend on the
//! order in which layers are built.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::ops;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    Uniform(f64),
    Normal(f64),
}

/// FNV-1a, used to derive per-parameter seeds from names.
pub fn name_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    seed: u64,
    params: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            dtype,
            seed,
            params: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn device(&self) -> Device {
        Device::Cpu
    }

    /// Creates the named parameter (or returns the existing one).
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.params.get(name) {
            if v.dims() != shape {
                return Err(Error::shape(format!(
                    "parameter {name} exists with shape {:?}, requested {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Uniform(bound) => {
                let d = Uniform::new_inclusive(-bound, bound);
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).map_err(|e| Error::Domain(e.to_string()))?;
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
        };
        let var = Var::from_tensor(&ops::from_f64(data, shape, self.dtype)?)?;
        let t = var.as_tensor().clone();
        self.params.insert(name.to_string(), var);
        Ok(t)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Parameters whose name starts with `prefix.`.
    pub fn group<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Var)> + 'a {
        self.params
            .iter()
            .filter(move |(k, _)| k.split('.').next() == Some(prefix))
    }

    /// Overwrites a parameter's value in place; all layer handles see the change.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .params
            .get(name)
            .ok_or_else(|| Error::shape(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::shape(format!(
                "parameter {name}: shape {:?} vs {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Byte-level snapshot of every parameter (little-endian f64), for equality checks.
    pub fn snapshot(&self, prefix: Option<&str>) -> Result<BTreeMap<String, Vec<f64>>> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.params {
            if let Some(p) = prefix {
                if k.split('.').next() != Some(p) {
                    continue;
                }
            }
            out.insert(k.clone(), ops::to_vec_f64(v.as_tensor())?);
        }
        Ok(out)
    }
}
