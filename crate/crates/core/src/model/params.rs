use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named parameter tensors of one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {}", name);
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Replaces every tensor with the same-named entry of `named`.
    pub fn load_named<'a>(
        &mut self,
        prefix: &str,
        named: impl Iterator<Item = (&'a str, &'a Tensor)>,
    ) -> Result<()> {
        let mut found = vec![false; self.len()];
        for (name, t) in named {
            let Some(rest) = name.strip_prefix(prefix) else {
                continue;
            };
            let Some(i) = self.names.iter().position(|n| n == rest) else {
                continue;
            };
            if self.tensors[i].shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    name,
                    t.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = t.clone();
            found[i] = true;
        }
        if let Some(i) = found.iter().position(|f| !f) {
            return Err(Error::Checkpoint(format!(
                "missing parameter {}{}",
                prefix, self.names[i]
            )));
        }
        Ok(())
    }

    /// Records every tensor as a graph leaf.
    pub fn bind(&self, g: &Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Graph leaves of a [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps externally created leaves, one per store entry in order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}

/// Uniform in `±sqrt(3 / fan_in)`: unit-variance preserving for linear maps.
pub(crate) fn fan_in_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (3.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * bound)
        .collect();
    Tensor::from_vec(shape, data).expect("shape matches count")
}

/// A 2-D convolution layer: kernel and bias parameters plus geometry.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            fan_in_uniform(rng, &[c_out, c_in, k, k], c_in * k * k),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[c_out]));
        Conv { w, b, stride, pad }
    }

    /// Same-size 3x3 convolution.
    pub fn same3(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        Self::new(store, rng, name, c_in, c_out, 3, 1, 1)
    }

    /// 1x1 channel mixing.
    pub fn pointwise(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        Self::new(store, rng, name, c_in, c_out, 1, 1, 0)
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.w), Some(p.var(self.b)), self.stride, self.pad)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            fan_in_uniform(rng, &[d_out, d_in], d_in),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[d_out]));
        Linear { w, b }
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p.var(self.w), Some(p.var(self.b)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checksum_tracks_values() {
        let mut s = ParamStore::new();
        let id = s.add("a", Tensor::zeros(&[2]));
        let before = s.checksum();
        s.get_mut(id).data_mut()[1] = 1e-300;
        assert_ne!(before, s.checksum());
    }

    #[test]
    fn load_named_requires_every_entry() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        Conv::same3(&mut s, &mut rng, "c", 1, 2);
        let other = s.clone();
        let mut t = s.clone();
        t.load_named("", other.iter()).unwrap();
        assert_eq!(t, other);
        let partial: Vec<(&str, &Tensor)> = other.iter().take(1).collect();
        assert!(t.load_named("", partial.into_iter()).is_err());
    }
}
