//! Named parameter storage and the small layer set built on it.

use std::collections::HashMap;

use rand::Rng;

use crate::{ConvSpec, Error, Grads, Result, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
    decay: bool,
}

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. `decay` marks it for decoupled weight decay.
    pub fn add(&mut self, name: &str, value: Tensor, decay: bool) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            decay,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.entries[id.0].decay
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    /// Total number of scalars across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Overwrite a parameter by name, checking the shape.
    pub fn load(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::invalid("load", format!("unknown parameter {name}")))?;
        let current = self.get(id);
        if current.shape() != value.shape() {
            return Err(Error::shape("load", current.shape(), value.shape()));
        }
        *self.get_mut(id) = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    /// Place every parameter on `tape` as a trainable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|e| tape.leaf(e.value.clone()))
                .collect(),
        }
    }
}

/// Parameters placed on a tape for one forward/backward pass.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Gradient per parameter in store order; unused parameters get zeros.
    pub fn grads(&self, grads: &Grads) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(&v.shape()))
            })
            .collect()
    }
}

/// Affine map over the last dimension: `x W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            &format!("{name}.weight"),
            Tensor::randn(&[fan_in, fan_out], std, rng),
            true,
        );
        let bias =
            bias.then(|| store.add(&format!("{name}.bias"), Tensor::zeros(&[fan_out]), false));
        Self { weight, bias }
    }

    /// Linear layer whose weights start at zero.
    pub fn zeroed(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add(
            &format!("{name}.weight"),
            Tensor::zeros(&[fan_in, fan_out]),
            true,
        );
        let bias = Some(store.add(&format!("{name}.bias"), Tensor::zeros(&[fan_out]), false));
        Self { weight, bias }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(p.get(self.weight))?;
        match self.bias {
            Some(b) => y.add(p.get(b)),
            None => Ok(y),
        }
    }
}

/// Layer normalization followed by a learned scale and shift.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(&format!("{name}.gain"), Tensor::ones(&[dim]), false),
            shift: store.add(&format!("{name}.shift"), Tensor::zeros(&[dim]), false),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm().mul(p.get(self.gain))?.add(p.get(self.shift))
    }
}

/// Convolution (or transposed convolution) with bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
    pub transpose: bool,
}

impl Conv {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        spec: ConvSpec,
        transpose: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_c * spec.kernel * spec.kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let shape = if transpose {
            [in_c, out_c, spec.kernel, spec.kernel]
        } else {
            [out_c, in_c, spec.kernel, spec.kernel]
        };
        Self {
            weight: store.add(
                &format!("{name}.weight"),
                Tensor::randn(&shape, std, rng),
                true,
            ),
            bias: store.add(&format!("{name}.bias"), Tensor::zeros(&[out_c]), false),
            spec,
            transpose,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let (w, b) = (p.get(self.weight), p.get(self.bias));
        if self.transpose {
            x.conv_transpose2d(w, b, self.spec)
        } else {
            x.conv2d(w, b, self.spec)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn unused_parameters_get_zero_gradients() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let used = Linear::new(&mut store, "used", 2, 2, 0.1, true, &mut rng);
        let _unused = Linear::new(&mut store, "unused", 2, 2, 0.1, true, &mut rng);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(Tensor::ones(&[1, 2]));
        let loss = used.forward(&p, x).unwrap().sum();
        let grads = p.grads(&tape.backward(loss).unwrap());
        assert_eq!(grads.len(), 4);
        assert!(grads[2].data().iter().all(|&g| g == 0.0));
        assert!(grads[0].data().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn load_checks_shape() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::zeros(&[2]), false);
        assert!(store.load("a", Tensor::zeros(&[3])).is_err());
        assert!(store.load("b", Tensor::zeros(&[2])).is_err());
        store.load("a", Tensor::ones(&[2])).unwrap();
        assert_eq!(store.get(store.find("a").unwrap()).data(), &[1.0, 1.0]);
    }
}
