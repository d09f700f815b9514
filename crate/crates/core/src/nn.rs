//! Parameter storage and the small set of layers the network is built from.

use rand::Rng;

use crate::autograd::{ConvGeom, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered parameter tensors. Order is registration order and is
/// what checkpoints serialise.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::shape(format!(
                "parameter {} has shape {:?}, got {:?}",
                self.names[id.0],
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Kaiming-uniform bound for ReLU networks: `sqrt(6 / fan_in)`.
pub fn kaiming_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
}

/// Convolution layer with a `[O, C, k, k]` weight and `[O]` bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeom,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    /// Registers `<name>.weight` (Kaiming-uniform) and `<name>.bias` (zero).
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        geom: ConvGeom,
        rng: &mut impl Rng,
    ) -> Self {
        let shape = [out_channels, in_channels, kernel, kernel];
        let weight = store.insert(
            format!("{name}.weight"),
            kaiming_uniform(&shape, in_channels * kernel * kernel, rng),
        );
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Self {
            weight,
            bias,
            geom,
            in_channels,
            out_channels,
            kernel,
        }
    }

    /// 1×1 convolution, also used as a dense layer on `[C, 1, 1]` vectors.
    pub fn pointwise<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self::new(store, name, in_channels, out_channels, 1, ConvGeom::UNIT, rng)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, Some(b), self.geom)
    }
}

/// Two-layer perceptron on `[C, 1, 1]` vectors with a ReLU in between.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub hidden: Conv2d,
    pub out: Conv2d,
}

impl Mlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            hidden: Conv2d::pointwise(store, &format!("{name}.fc1"), input, hidden, rng),
            out: Conv2d::pointwise(store, &format!("{name}.fc2"), hidden, output, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, store, x)?;
        let h = g.relu(h);
        self.out.forward(g, store, h)
    }
}
