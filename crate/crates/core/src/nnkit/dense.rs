use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{NnError, ParamGroup, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
struct DenseCache {
    input: Array2<f64>,
    output: Array2<f64>,
}

/// Fully connected layer `y = act(W x + b)` operating on row batches.
///
/// `forward` pushes its intermediates on an internal stack and `backward`
/// pops them, so a layer used several times in one pass is unwound in
/// reverse order.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    cache: Vec<DenseCache>,
}

impl DenseLayer {
    /// Glorot-uniform weights, zero bias.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = store.add_uniform(
            format!("{name}/weight"),
            &[out_dim, in_dim],
            ParamGroup::Network,
            bound,
            rng,
        )?;
        let bias = store.add_zeros(format!("{name}/bias"), &[out_dim], ParamGroup::Network)?;
        Ok(Self::from_params(name, weight, bias, in_dim, out_dim, activation))
    }

    pub fn from_params(
        name: &str,
        weight: ParamId,
        bias: ParamId,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
    ) -> Self {
        Self {
            name: name.to_string(),
            weight,
            bias,
            in_dim,
            out_dim,
            activation,
            cache: Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.out_dim * (self.in_dim + 1)
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<(), NnError> {
        if x.ncols() != self.in_dim {
            return Err(NnError::Shape {
                what: format!("{} input", self.name),
                expected: self.in_dim,
                got: x.ncols(),
            });
        }
        Ok(())
    }

    fn compute(&self, store: &ParamStore, x: &ArrayView2<f64>) -> Array2<f64> {
        let w = ArrayView2::from_shape((self.out_dim, self.in_dim), store.value(self.weight))
            .expect("weight shape");
        let b = ndarray::ArrayView1::from(store.value(self.bias));
        let mut y = x.dot(&w.t());
        y += &b;
        if self.activation != Activation::Identity {
            let act = self.activation;
            y.mapv_inplace(|v| act.apply(v));
        }
        y
    }

    /// Forward without recording intermediates.
    pub fn infer(&self, store: &ParamStore, x: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        self.check_input(&x)?;
        Ok(self.compute(store, &x))
    }

    /// Forward that records intermediates for [`DenseLayer::backward`].
    pub fn forward(&mut self, store: &ParamStore, x: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        self.check_input(&x)?;
        let y = self.compute(store, &x);
        self.cache.push(DenseCache {
            input: x.to_owned(),
            output: y.clone(),
        });
        Ok(y)
    }

    pub fn forward_vec(&mut self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>, NnError> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row");
        Ok(self.forward(store, view)?.into_raw_vec_and_offset().0)
    }

    pub fn infer_vec(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>, NnError> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row");
        Ok(self.infer(store, view)?.into_raw_vec_and_offset().0)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, store: &mut ParamStore, dy: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        let cache = self
            .cache
            .pop()
            .ok_or_else(|| NnError::NoForwardCache(self.name.clone()))?;
        if dy.dim() != cache.output.dim() {
            return Err(NnError::Shape {
                what: format!("{} upstream gradient", self.name),
                expected: cache.output.len(),
                got: dy.len(),
            });
        }
        let act = self.activation;
        let dz = if act == Activation::Identity {
            dy.to_owned()
        } else {
            let mut dz = dy.to_owned();
            dz.zip_mut_with(&cache.output, |d, &y| *d *= act.derivative_from_output(y));
            dz
        };
        let dw = dz.t().dot(&cache.input);
        let db: Array1<f64> = dz.sum_axis(Axis(0));
        {
            let gw = store.grad_mut(self.weight);
            for (g, d) in gw.iter_mut().zip(dw.iter()) {
                *g += d;
            }
        }
        {
            let gb = store.grad_mut(self.bias);
            for (g, d) in gb.iter_mut().zip(db.iter()) {
                *g += d;
            }
        }
        let w = ArrayView2::from_shape((self.out_dim, self.in_dim), store.value(self.weight))
            .expect("weight shape");
        Ok(dz.dot(&w))
    }

    pub fn backward_vec(&mut self, store: &mut ParamStore, dy: &[f64]) -> Result<Vec<f64>, NnError> {
        let view = ArrayView2::from_shape((1, dy.len()), dy).expect("row");
        Ok(self.backward(store, view)?.into_raw_vec_and_offset().0)
    }

    pub fn pending(&self) -> usize {
        self.cache.len()
    }

    pub fn clear_cache(&mut self) {
        self.cache.clear();
    }
}

/// A stack of dense layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`; hidden layers use `hidden`, the last uses `output`.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                DenseLayer::new(store, &format!("{name}/l{i}"), dims[i], dims[i + 1], act, rng)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    pub fn last(&self) -> &DenseLayer {
        self.layers.last().unwrap()
    }

    pub fn infer(&self, store: &ParamStore, x: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        let mut h = self.layers[0].infer(store, x)?;
        for l in &self.layers[1..] {
            h = l.infer(store, h.view())?;
        }
        Ok(h)
    }

    pub fn forward(&mut self, store: &ParamStore, x: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        let (first, rest) = self.layers.split_first_mut().unwrap();
        let mut h = first.forward(store, x)?;
        for l in rest {
            h = l.forward(store, h.view())?;
        }
        Ok(h)
    }

    pub fn backward(&mut self, store: &mut ParamStore, dy: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        let mut g = dy.to_owned();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(store, g.view())?;
        }
        Ok(g)
    }

    pub fn forward_vec(&mut self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>, NnError> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row");
        Ok(self.forward(store, view)?.into_raw_vec_and_offset().0)
    }

    pub fn infer_vec(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>, NnError> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row");
        Ok(self.infer(store, view)?.into_raw_vec_and_offset().0)
    }

    pub fn backward_vec(&mut self, store: &mut ParamStore, dy: &[f64]) -> Result<Vec<f64>, NnError> {
        let view = ArrayView2::from_shape((1, dy.len()), dy).expect("row");
        Ok(self.backward(store, view)?.into_raw_vec_and_offset().0)
    }

    pub fn clear_cache(&mut self) {
        self.layers.iter_mut().for_each(DenseLayer::clear_cache);
    }
}
