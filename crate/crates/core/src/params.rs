//! Named parameter sets and their binding onto an autograd tape.

use std::io::{Read, Write};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Buffers such as running statistics are stored alongside weights but
    /// never receive gradients.
    pub trainable: bool,
}

/// The parameters of one sub-network.
///
/// A frozen store is never differentiated and any attempt to apply an
/// optimizer step to it fails with [`Error::FrozenUpdate`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    name: String,
    params: Vec<Param>,
    frozen: bool,
}

/// How a store enters a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BindMode {
    /// Trainable parameters of an unfrozen store become differentiable leaves.
    Train,
    /// Everything enters as a constant; gradients may still flow *through*.
    Constant,
}

/// Tape handles for every parameter of a store, in store order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    differentiable: Vec<bool>,
}

impl Bound {
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Extracts per-parameter gradients, `None` for parameters that were bound
    /// as constants or did not influence the loss.
    pub fn grads(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.vars
            .iter()
            .zip(&self.differentiable)
            .map(|(&v, &d)| if d { grads.get(v).cloned() } else { None })
            .collect()
    }
}

const BLOB_MAGIC: &[u8; 8] = b"TSDAPRM1";

impl ParamStore {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            params: Vec::new(),
            frozen: false,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> usize {
        self.params.push(Param {
            name: name.into(),
            value,
            trainable,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn value(&self, i: usize) -> &Tensor {
        &self.params[i].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    /// Total number of scalar values.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Overwrites a non-trainable buffer. Weights change only via optimizers,
    /// EMA updates or [`ParamStore::load_values`].
    pub fn set_buffer(&mut self, i: usize, value: Tensor) -> Result<()> {
        if self.frozen {
            return Err(Error::FrozenUpdate(format!("buffer of frozen `{}`", self.name)));
        }
        let p = &mut self.params[i];
        if p.trainable || p.value.shape() != value.shape() {
            return Err(Error::shape("set_buffer", format!("`{}`", p.name)));
        }
        p.value = value;
        Ok(())
    }

    /// Overwrites any entry with a same-shaped value, bypassing optimizers.
    pub fn set_value(&mut self, i: usize, value: Tensor) -> Result<()> {
        let len = self.params.len();
        let p = self.params.get_mut(i).ok_or(Error::IndexOutOfRange { index: i, len })?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_value",
                format!("`{}` is {:?}, got {:?}", p.name, p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    pub(crate) fn values_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
    }

    /// Copies all values from `other`, which must have the same layout.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::shape(
                "load_values",
                format!("`{}` and `{}` differ in layout", self.name, other.name),
            ));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            dst.value = src.value.clone();
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, mode: BindMode) -> Bound {
        let mut vars = Vec::with_capacity(self.params.len());
        let mut differentiable = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let d = mode == BindMode::Train && !self.frozen && p.trainable;
            vars.push(if d {
                tape.leaf(p.value.clone())
            } else {
                tape.constant(p.value.clone())
            });
            differentiable.push(d);
        }
        Bound { vars, differentiable }
    }

    /// Serializes names, shapes, trainability and values (f64, little endian).
    pub fn write_blob(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(BLOB_MAGIC)?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            let name = p.name.as_bytes();
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[u8::from(p.trainable)])?;
            w.write_all(&(p.value.ndim() as u64).to_le_bytes())?;
            for &d in p.value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_blob(name: impl Into<String>, mut r: impl Read) -> std::result::Result<Self, String> {
        fn u64_of(r: &mut impl Read) -> std::result::Result<u64, String> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|e| e.to_string())?;
            Ok(u64::from_le_bytes(b))
        }
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| e.to_string())?;
        if &magic != BLOB_MAGIC {
            return Err("bad magic".into());
        }
        let count = u64_of(&mut r)? as usize;
        let mut store = ParamStore::new(name);
        for _ in 0..count {
            let len = u64_of(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(|e| e.to_string())?;
            let name = String::from_utf8(name).map_err(|e| e.to_string())?;
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag).map_err(|e| e.to_string())?;
            let ndim = u64_of(&mut r)? as usize;
            let shape = (0..ndim)
                .map(|_| u64_of(&mut r).map(|d| d as usize))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| u64_of(&mut r).map(f64::from_bits))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let value = Tensor::new(&shape, data).map_err(|e| e.to_string())?;
            store.add(name, value, flag[0] == 1);
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_store_binds_constants() {
        let mut s = ParamStore::new("s");
        s.add("w", Tensor::scalar(1.0), true);
        s.add("buf", Tensor::scalar(2.0), false);
        let mut tape = Tape::new();
        let b = s.bind(&mut tape, BindMode::Train);
        assert!(tape.requires_grad(b.var(0)));
        assert!(!tape.requires_grad(b.var(1)));
        s.set_frozen(true);
        let b = s.bind(&mut tape, BindMode::Train);
        assert!(!tape.requires_grad(b.var(0)));
    }

    #[test]
    fn blob_roundtrip_is_bit_exact() {
        let mut s = ParamStore::new("enc");
        s.add(
            "w",
            Tensor::new(&[2, 2], vec![0.1, -3.5, f64::MIN_POSITIVE, 1e300]).unwrap(),
            true,
        );
        s.add("running_var", Tensor::new(&[1], vec![0.25]).unwrap(), false);
        let mut buf = Vec::new();
        s.write_blob(&mut buf).unwrap();
        let back = ParamStore::read_blob("enc", buf.as_slice()).unwrap();
        assert_eq!(back, s);
        assert!(ParamStore::read_blob("x", &b"garbage!"[..]).is_err());
    }
}
