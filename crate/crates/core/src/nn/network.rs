use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layer::{self, ConvGeometry, LayerSpec};
use super::tensor::{Shape, Tensor};
use crate::error::{Error, Result};

/// Sequential network `L_1 ∘ ... ∘ L_k` with its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    input: Shape,
    layers: Vec<LayerSpec>,
    /// Output shape of every layer.
    shapes: Vec<Shape>,
    params: ParamGrads,
}

/// Per-layer weight and bias vectors. Shared by weights, gradients and
/// momentum buffers; layers without parameters hold empty vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            weights: net.params.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: net.params.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(&self.biases).flatten()
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.biases.iter_mut()).flatten()
    }

    pub fn scale(&mut self, factor: f64) {
        self.values_mut().for_each(|v| *v *= factor);
    }

    pub fn fill(&mut self, value: f64) {
        self.values_mut().for_each(|v| *v = value);
    }

    pub fn is_zero(&self) -> bool {
        self.values().all(|&v| v == 0.0)
    }

    pub fn len(&self) -> usize {
        self.values().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same_layout(&self, other: &ParamGrads) -> bool {
        let lens = |p: &ParamGrads| -> Vec<usize> {
            p.weights.iter().chain(&p.biases).map(Vec::len).collect()
        };
        lens(self) == lens(other)
    }
}

/// Activations recorded by [`Network::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct Cache {
    /// Input of every layer; `inputs[i]` feeds layer `i`.
    inputs: Vec<Tensor>,
    output: Tensor,
    /// Per-layer state kept for the backward pass.
    aux: Vec<Aux>,
}

#[derive(Clone, Debug)]
enum Aux {
    None,
    /// Flat input position of every pooled maximum.
    Argmax(Vec<u32>),
    /// The unfolded input of a convolution.
    Columns(Vec<f64>),
}

impl Cache {
    pub fn output(&self) -> &Tensor {
        &self.output
    }

    /// Input to layer `idx` (equivalently the output of layer `idx - 1`).
    pub fn layer_input(&self, idx: usize) -> &Tensor {
        &self.inputs[idx]
    }
}

/// Result of a full backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub params: ParamGrads,
    pub input: Tensor,
}

impl Network {
    /// Network with every weight and bias set to zero.
    pub fn zeroed(input: Shape, layers: Vec<LayerSpec>) -> Result<Self> {
        let shapes = chain_shapes(input, &layers)?;
        let mut weights = Vec::with_capacity(layers.len());
        let mut biases = Vec::with_capacity(layers.len());
        let mut prev = input;
        for (spec, &out) in layers.iter().zip(&shapes) {
            let (nw, nb) = spec.param_lens(prev);
            weights.push(vec![0.0; nw]);
            biases.push(vec![0.0; nb]);
            prev = out;
        }
        Ok(Self {
            input,
            layers,
            shapes,
            params: ParamGrads { weights, biases },
        })
    }

    /// He-initialized weights (normal with variance `2 / fan_in`), zero biases.
    pub fn init<R: Rng + ?Sized>(input: Shape, layers: Vec<LayerSpec>, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeroed(input, layers)?;
        let mut prev = input;
        for i in 0..net.layers.len() {
            let fan_in = net.layers[i].fan_in(prev);
            if fan_in > 0 {
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                    .expect("positive standard deviation");
                for w in &mut net.params.weights[i] {
                    *w = normal.sample(rng);
                }
            }
            prev = net.shapes[i];
        }
        Ok(net)
    }

    /// Rebuilds a network from explicit parameters, checking every length.
    pub fn from_parts(
        input: Shape,
        layers: Vec<LayerSpec>,
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let mut net = Self::zeroed(input, layers)?;
        let given = ParamGrads { weights, biases };
        if !net.params.same_layout(&given) {
            return Err(Error::Config(
                "weight or bias arrays do not match the layer list".into(),
            ));
        }
        if given.values().any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite parameter".into()));
        }
        net.params = given;
        Ok(net)
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn output_shape(&self) -> Shape {
        self.shapes.last().copied().unwrap_or(self.input)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Output shape of every layer.
    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub fn params(&self) -> &ParamGrads {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamGrads {
        &mut self.params
    }

    /// Layer count with activations fused into their producers.
    pub fn depth(&self) -> usize {
        self.layers.iter().filter(|l| !l.is_activation()).count()
    }

    pub fn has_sigmoid_head(&self) -> bool {
        matches!(self.layers.last(), Some(LayerSpec::Sigmoid))
    }

    fn layer_input_shape(&self, idx: usize) -> Shape {
        if idx == 0 {
            self.input
        } else {
            self.shapes[idx - 1]
        }
    }

    fn geometry(&self, idx: usize) -> Option<ConvGeometry> {
        match self.layers[idx] {
            LayerSpec::Conv {
                filter,
                stride,
                padding,
                ..
            }
            | LayerSpec::MaxPool {
                filter,
                stride,
                padding,
            } => Some(ConvGeometry {
                filter,
                stride,
                padding,
                input: self.layer_input_shape(idx),
                output: self.shapes[idx],
            }),
            _ => None,
        }
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let flat_ok = matches!(self.layers.first(), Some(LayerSpec::FullyConnected { .. }))
            && input.shape().len() == self.input.len();
        if input.shape() != self.input && !flat_ok {
            return Err(Error::Shape {
                layer: 0,
                message: format!("expected input {}, got {}", self.input, input.shape()),
            });
        }
        Ok(())
    }

    fn apply(&self, idx: usize, x: &Tensor) -> (Tensor, Aux) {
        let w = &self.params.weights[idx];
        let b = &self.params.biases[idx];
        match self.layers[idx] {
            LayerSpec::Conv { .. } => {
                let geo = self.geometry(idx).expect("conv geometry");
                let (y, col) = geo.forward(x, w, b);
                (y, Aux::Columns(col))
            }
            LayerSpec::MaxPool { .. } => {
                let geo = self.geometry(idx).expect("pool geometry");
                let (y, argmax) = layer::max_pool_forward(&geo, x);
                (y, Aux::Argmax(argmax))
            }
            LayerSpec::FullyConnected { .. } => (layer::fc_forward(x, w, b, self.shapes[idx]), Aux::None),
            LayerSpec::Relu => (layer::relu_forward(x), Aux::None),
            LayerSpec::Sigmoid => (layer::sigmoid_forward(x), Aux::None),
        }
    }

    /// Runs every layer and keeps what the backward pass needs.
    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, Cache)> {
        self.check_input(input)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut aux = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for idx in 0..self.layers.len() {
            let (y, a) = self.apply(idx, &x);
            inputs.push(x);
            aux.push(a);
            x = y;
        }
        let cache = Cache {
            inputs,
            output: x.clone(),
            aux,
        };
        Ok((x, cache))
    }

    /// Forward pass without recording activations.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let mut x = input.clone();
        for idx in 0..self.layers.len() {
            x = self.apply(idx, &x).0;
        }
        Ok(x)
    }

    /// Scalar score of a sigmoid-headed single-output network.
    pub fn predict(&self, input: &Tensor) -> Result<f64> {
        if !self.has_sigmoid_head() || self.output_shape().len() != 1 {
            return Err(Error::Config(
                "predict needs a network ending in a single sigmoid unit".into(),
            ));
        }
        Ok(self.infer(input)?.data()[0])
    }

    fn check_cache(&self, cache: &Cache, upto: usize) -> Result<()> {
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::StaleCache(format!(
                "cache holds {} layers, network has {}",
                cache.inputs.len(),
                self.layers.len()
            )));
        }
        for (idx, x) in cache.inputs.iter().enumerate().take(upto) {
            let expected = self.layer_input_shape(idx);
            if x.shape().len() != expected.len() {
                return Err(Error::StaleCache(format!(
                    "layer {idx} input is {}, expected {expected}",
                    x.shape()
                )));
            }
        }
        Ok(())
    }

    /// Gradients of every parameter and of the input given `dL/d output`.
    pub fn backward(&self, cache: &Cache, grad_output: &Tensor) -> Result<Gradients> {
        let mut params = ParamGrads::zeros_like(self);
        let input = self.backward_accumulate(cache, self.layers.len(), grad_output, &mut params)?;
        Ok(Gradients { params, input })
    }

    /// Back-propagates `grad` (taken with respect to the output of layer
    /// `upto - 1`) through layers `upto - 1 ..= 0`, adding parameter
    /// gradients into `acc`. Returns the input gradient.
    pub fn backward_accumulate(
        &self,
        cache: &Cache,
        upto: usize,
        grad: &Tensor,
        acc: &mut ParamGrads,
    ) -> Result<Tensor> {
        Ok(self
            .backprop(cache, upto, grad, acc, true)?
            .expect("input gradient requested"))
    }

    /// [`Network::backward_accumulate`] without the input gradient, which
    /// training never needs.
    pub fn accumulate_param_grads(
        &self,
        cache: &Cache,
        upto: usize,
        grad: &Tensor,
        acc: &mut ParamGrads,
    ) -> Result<()> {
        self.backprop(cache, upto, grad, acc, false).map(drop)
    }

    fn backprop(
        &self,
        cache: &Cache,
        upto: usize,
        grad: &Tensor,
        acc: &mut ParamGrads,
        input_grad: bool,
    ) -> Result<Option<Tensor>> {
        if upto > self.layers.len() {
            return Err(Error::StaleCache(format!("no layer {upto}")));
        }
        self.check_cache(cache, upto)?;
        let expected = if upto == 0 {
            self.input
        } else {
            self.shapes[upto - 1]
        };
        if grad.shape().len() != expected.len() {
            return Err(Error::StaleCache(format!(
                "upstream gradient is {}, expected {expected}",
                grad.shape()
            )));
        }
        if !acc.same_layout(&self.params) {
            return Err(Error::StaleCache("gradient buffer layout differs".into()));
        }
        let mut g = grad.clone();
        for idx in (0..upto).rev() {
            let need_dx = input_grad || idx > 0;
            if !need_dx && !matches!(self.layers[idx], LayerSpec::Conv { .. } | LayerSpec::FullyConnected { .. }) {
                return Ok(None);
            }
            let x = &cache.inputs[idx];
            let w = &self.params.weights[idx];
            let (gw, gb) = (&mut acc.weights[idx], &mut acc.biases[idx]);
            let dx = match (&self.layers[idx], &cache.aux[idx]) {
                (LayerSpec::Conv { .. }, Aux::Columns(col)) => {
                    let geo = self.geometry(idx).expect("conv geometry");
                    geo.backward(col, w, g.data(), gw, gb, need_dx)
                }
                (LayerSpec::MaxPool { .. }, Aux::Argmax(argmax)) => {
                    Some(layer::max_pool_backward(x.shape(), argmax, g.data()))
                }
                (LayerSpec::FullyConnected { .. }, _) => layer::fc_backward(x, w, g.data(), gw, gb, need_dx),
                (LayerSpec::Relu, _) => Some(layer::relu_backward(x, g.data())),
                (LayerSpec::Sigmoid, _) => {
                    let y = cache.inputs.get(idx + 1).unwrap_or(&cache.output);
                    Some(layer::sigmoid_backward(y, g.data()))
                }
                _ => return Err(Error::StaleCache(format!("layer {idx} state does not match its kind"))),
            };
            match dx {
                Some(dx) => g = dx,
                None => return Ok(None),
            }
        }
        Ok(Some(g))
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ModelDoc {
            input_shape: self.input,
            layers: self.layers.clone(),
            weights: self.params.weights.clone(),
            biases: self.params.biases.clone(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDoc = serde_json::from_str(text)?;
        Self::from_parts(doc.input_shape, doc.layers, doc.weights, doc.biases)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::parse(path, e.to_string()))
    }
}

/// On-disk model document: layer list plus row-major parameter arrays.
#[derive(Serialize, Deserialize)]
struct ModelDoc {
    input_shape: Shape,
    layers: Vec<LayerSpec>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

/// Output shape of each layer, failing at the first layer that cannot accept its input.
pub fn chain_shapes(input: Shape, layers: &[LayerSpec]) -> Result<Vec<Shape>> {
    let mut shapes = Vec::with_capacity(layers.len());
    let mut cur = input;
    for (idx, spec) in layers.iter().enumerate() {
        spec.validate().map_err(|e| Error::Shape {
            layer: idx,
            message: e.to_string(),
        })?;
        cur = spec.output_shape(cur).map_err(|e| Error::Shape {
            layer: idx,
            message: e.to_string(),
        })?;
        shapes.push(cur);
    }
    Ok(shapes)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn two_by_two() -> Tensor {
        Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap()
    }

    #[test]
    fn conv_sums_unit_kernel() {
        let mut net = Network::zeroed(Shape::new(1, 2, 2), vec![LayerSpec::conv(2, 1, 0, 1)]).unwrap();
        net.params_mut().weights[0].fill(1.0);
        let (out, _) = net.forward(&two_by_two()).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 1, 1));
        assert_eq!(out.data(), &[10.0]);
    }

    #[test]
    fn max_pool_picks_block_max() {
        let net = Network::zeroed(Shape::new(1, 2, 2), vec![LayerSpec::max_pool(2, 2)]).unwrap();
        let (out, _) = net.forward(&two_by_two()).unwrap();
        assert_eq!(out.data(), &[4.0]);
    }

    #[test]
    fn zero_net_sigmoid_head_gives_half() {
        let layers = vec![
            LayerSpec::conv(3, 1, 1, 2),
            LayerSpec::Relu,
            LayerSpec::fully_connected(3),
            LayerSpec::Sigmoid,
        ];
        let net = Network::zeroed(Shape::new(1, 4, 4), layers).unwrap();
        let out = net.infer(&Tensor::filled(Shape::new(1, 4, 4), 0.7)).unwrap();
        assert_eq!(out.data(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let layers = vec![LayerSpec::conv(3, 1, 0, 2), LayerSpec::conv(3, 1, 0, 2)];
        match Network::zeroed(Shape::new(1, 4, 4), layers) {
            Err(Error::Shape { layer, .. }) => assert_eq!(layer, 1),
            other => panic!("unexpected {other:?}"),
        }
        let net = Network::zeroed(Shape::new(1, 4, 4), vec![LayerSpec::Relu]).unwrap();
        match net.forward(&Tensor::zeros(Shape::new(1, 5, 4))) {
            Err(Error::Shape { layer: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layers = vec![
            LayerSpec::conv(3, 1, 1, 2),
            LayerSpec::Relu,
            LayerSpec::max_pool(2, 2),
            LayerSpec::fully_connected(2),
        ];
        let net = Network::init(Shape::new(1, 4, 4), layers, &mut rng).unwrap();
        let x = Tensor::filled(Shape::new(1, 4, 4), 0.3);
        let (out, cache) = net.forward(&x).unwrap();
        let g = net.backward(&cache, &Tensor::zeros(out.shape())).unwrap();
        assert!(g.params.is_zero());
        assert!(g.input.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fc_weight_gradient_is_input() {
        let mut net = Network::zeroed(Shape::flat(1), vec![LayerSpec::fully_connected(1)]).unwrap();
        net.params_mut().weights[0][0] = 0.7;
        let x = Tensor::new(Shape::flat(1), vec![2.5]).unwrap();
        let (out, cache) = net.forward(&x).unwrap();
        assert_eq!(out.data(), &[1.75]);
        let g = net.backward(&cache, &Tensor::filled(Shape::flat(1), 1.0)).unwrap();
        assert_eq!(g.params.weights[0], vec![2.5]);
        assert_eq!(g.params.biases[0], vec![1.0]);
        assert_eq!(g.input.data(), &[0.7]);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let a = Network::zeroed(Shape::new(1, 4, 4), vec![LayerSpec::Relu]).unwrap();
        let b = Network::zeroed(Shape::new(1, 4, 4), vec![LayerSpec::Relu, LayerSpec::Relu]).unwrap();
        let (out, cache) = a.forward(&Tensor::zeros(Shape::new(1, 4, 4))).unwrap();
        assert!(matches!(b.backward(&cache, &out), Err(Error::StaleCache(_))));
        let wrong = Tensor::zeros(Shape::new(1, 2, 2));
        assert!(matches!(a.backward(&cache, &wrong), Err(Error::StaleCache(_))));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layers = vec![
            LayerSpec::conv(3, 1, 1, 2),
            LayerSpec::Relu,
            LayerSpec::max_pool(2, 2),
            LayerSpec::fully_connected(1),
            LayerSpec::Sigmoid,
        ];
        let mut net = Network::init(Shape::new(1, 6, 6), layers, &mut rng).unwrap();
        net.params_mut().biases[0] = vec![0.1 + 0.2, 1e-300];
        let text = net.to_json().unwrap();
        let back = Network::from_json(&text).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn from_parts_rejects_bad_lengths() {
        let layers = vec![LayerSpec::fully_connected(2)];
        assert!(Network::from_parts(Shape::flat(3), layers, vec![vec![0.0; 5]], vec![vec![0.0; 2]]).is_err());
    }
}
