//! Fully connected encoder+head classifier with reverse-mode gradients.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::concept::argmax_first;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, Matrix};
use crate::scalar::Scalar;
use crate::store::format::{self, Dtype, Section, MODEL_MAGIC};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    None,
}

impl Activation {
    fn apply<T: Scalar>(self, v: &mut [T]) {
        if self == Activation::Relu {
            for x in v {
                if *x < T::zero() {
                    *x = T::zero();
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    /// `out × in`; row `r` holds the incoming weights of neuron `r`.
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
    pub activation: Activation,
}

impl<T: Scalar> Layer<T> {
    pub fn new(weights: Matrix<T>, bias: Vec<T>, activation: Activation) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::DimensionMismatch(format!(
                "layer bias of length {} for {} neurons",
                bias.len(),
                weights.rows()
            )));
        }
        Ok(Self { weights, bias, activation })
    }

    pub fn input_width(&self) -> usize {
        self.weights.cols()
    }

    pub fn width(&self) -> usize {
        self.weights.rows()
    }

    fn forward_into(&self, x: &[T], out: &mut Vec<T>) {
        out.clear();
        out.extend(self.weights.iter_rows().zip(&self.bias).map(|(w, &b)| dot(w, x) + b));
        self.activation.apply(out);
    }
}

/// Stack of affine layers split into an encoder (`layers[..split_index]`)
/// and a head (`layers[split_index..]`).
#[derive(Debug, Clone, PartialEq)]
pub struct DeskModel<T> {
    pub layers: Vec<Layer<T>>,
    pub split_index: usize,
}

/// Activations recorded by [`DeskModel::forward`]: `activations[0]` is the
/// input, `activations[l + 1]` the output of layer `l`.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub activations: Vec<Vec<T>>,
}

impl<T> ForwardCache<T> {
    pub fn logits(&self) -> &[T] {
        self.activations.last().expect("cache holds at least the input")
    }
}

impl<T: Scalar> DeskModel<T> {
    pub fn new(layers: Vec<Layer<T>>, split_index: usize) -> Result<Self> {
        let m = Self { layers, split_index };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.layers.len();
        if n < 2 {
            return Err(Error::Invariant("a desk model needs at least two layers".into()));
        }
        if self.split_index < 1 || self.split_index >= n {
            return Err(Error::Invariant(format!("split index {} outside 1..{n}", self.split_index)));
        }
        for (l, pair) in self.layers.windows(2).enumerate() {
            if pair[0].width() != pair[1].input_width() {
                return Err(Error::DimensionMismatch(format!(
                    "layer {l} outputs {} values, layer {} expects {}",
                    pair[0].width(),
                    l + 1,
                    pair[1].input_width()
                )));
            }
        }
        if self.layers[n - 1].activation != Activation::None {
            return Err(Error::Invariant("the last layer must be linear".into()));
        }
        for layer in &self.layers {
            if !layer.weights.is_finite() || layer.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::NonFinite("desk model parameters".into()));
            }
        }
        Ok(())
    }

    /// He-uniform initialization; ReLU everywhere except the last layer.
    pub fn init(widths: &[usize], split_index: usize, seed: u64) -> Result<Self> {
        if widths.len() < 3 {
            return Err(Error::Config("widths must list input, at least one hidden layer and output".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_layers = widths.len() - 1;
        let layers = (0..n_layers)
            .map(|l| {
                let (fan_in, fan_out) = (widths[l], widths[l + 1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                let w = Matrix::from_fn(fan_out, fan_in, |_, _| T::from_f64_lossy(rng.random_range(-bound..bound)));
                let act = if l + 1 == n_layers { Activation::None } else { Activation::Relu };
                Layer::new(w, vec![T::zero(); fan_out], act)
            })
            .collect::<Result<_>>()?;
        Self::new(layers, split_index)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_width()
    }

    pub fn n_classes(&self) -> usize {
        self.layers.last().unwrap().width()
    }

    pub fn embedding_dim(&self) -> usize {
        self.layers[self.split_index - 1].width()
    }

    /// Same weights, different encoder/head boundary.
    pub fn with_split(&self, split_index: usize) -> Result<Self> {
        Self::new(self.layers.clone(), split_index)
    }

    fn check_input(&self, x: &[T], expected: usize) -> Result<()> {
        if x.len() != expected {
            return Err(Error::DimensionMismatch(format!("input of length {} for width {expected}", x.len())));
        }
        Ok(())
    }

    fn run(&self, range: std::ops::Range<usize>, x: &[T]) -> Vec<T> {
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for layer in &self.layers[range] {
            layer.forward_into(&cur, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    pub fn forward(&self, x: &[T]) -> Result<ForwardCache<T>> {
        self.check_input(x, self.input_dim())?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_vec());
        for layer in &self.layers {
            let mut out = Vec::with_capacity(layer.width());
            layer.forward_into(activations.last().unwrap(), &mut out);
            activations.push(out);
        }
        Ok(ForwardCache { activations })
    }

    pub fn logits(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_input(x, self.input_dim())?;
        Ok(self.run(0..self.layers.len(), x))
    }

    /// Argmax of the logits; ties go to the lowest class index.
    pub fn predict(&self, x: &[T]) -> Result<usize> {
        let logits = self.logits(x)?;
        Ok(argmax_of(&logits))
    }

    pub fn encode(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_input(x, self.input_dim())?;
        Ok(self.run(0..self.split_index, x))
    }

    pub fn head(&self, embedding: &[T]) -> Result<Vec<T>> {
        self.check_input(embedding, self.embedding_dim())?;
        Ok(self.run(self.split_index..self.layers.len(), embedding))
    }

    pub fn encode_rows(&self, xs: &Matrix<T>) -> Result<Matrix<T>> {
        let rows: Vec<Vec<T>> = xs.iter_rows().map(|x| self.encode(x)).collect::<Result<_>>()?;
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, self.embedding_dim()));
        }
        Matrix::from_rows(&rows)
    }

    pub fn predict_rows(&self, xs: &Matrix<T>) -> Result<Vec<usize>> {
        xs.iter_rows().map(|x| self.predict(x)).collect()
    }

    pub fn accuracy(&self, xs: &Matrix<T>, labels: &[usize]) -> Result<f64> {
        if labels.is_empty() {
            return Ok(0.0);
        }
        let preds = self.predict_rows(xs)?;
        Ok(preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
    }

    /// Softmax cross-entropy of `target` and its gradient with respect to the
    /// logits.
    fn loss_and_logit_grad(logits: &[T], target: usize) -> (T, Vec<T>) {
        let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
        let sum: T = exps.iter().copied().sum();
        let loss = sum.ln() + max - logits[target];
        let mut grad: Vec<T> = exps.into_iter().map(|e| e / sum).collect();
        grad[target] -= T::one();
        (loss, grad)
    }

    /// Backpropagates `delta` (gradient at the logits) through the cached
    /// forward pass. Calls `on_layer(l, delta_l, input_l)` with the gradient at
    /// the pre-activation of layer `l`, and returns the gradient at the input.
    fn backward(&self, cache: &ForwardCache<T>, mut delta: Vec<T>, mut on_layer: impl FnMut(usize, &[T], &[T])) -> Vec<T> {
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            if layer.activation == Activation::Relu {
                for (d, &a) in delta.iter_mut().zip(&cache.activations[l + 1]) {
                    if a <= T::zero() {
                        *d = T::zero();
                    }
                }
            }
            on_layer(l, &delta, &cache.activations[l]);
            delta = layer.weights.t_matvec(&delta);
        }
        delta
    }

    /// Cross-entropy loss of `target` at `x`.
    pub fn loss(&self, x: &[T], target: usize) -> Result<T> {
        let logits = self.logits(x)?;
        self.check_class(target)?;
        Ok(Self::loss_and_logit_grad(&logits, target).0)
    }

    fn check_class(&self, c: usize) -> Result<()> {
        if c >= self.n_classes() {
            return Err(Error::UnknownClass(c.to_string()));
        }
        Ok(())
    }

    /// Gradient of the cross-entropy loss of `target` with respect to the input.
    pub fn gradient_input(&self, x: &[T], target: usize) -> Result<Vec<T>> {
        self.check_class(target)?;
        let cache = self.forward(x)?;
        let (_, delta) = Self::loss_and_logit_grad(cache.logits(), target);
        Ok(self.backward(&cache, delta, |_, _, _| {}))
    }

    /// Accumulates parameter gradients of one example into `grads`; returns
    /// the loss.
    pub(crate) fn accumulate_param_grads(&self, x: &[T], target: usize, grads: &mut [Layer<T>]) -> Result<T> {
        let cache = self.forward(x)?;
        let (loss, delta) = Self::loss_and_logit_grad(cache.logits(), target);
        self.backward(&cache, delta, |l, d, input| {
            let g = &mut grads[l];
            for (r, &dr) in d.iter().enumerate() {
                if dr != T::zero() {
                    axpy(dr, input, g.weights.row_mut(r));
                    g.bias[r] += dr;
                }
            }
        });
        Ok(loss)
    }

    pub fn zeros_like(&self) -> Vec<Layer<T>> {
        self.layers
            .iter()
            .map(|l| Layer {
                weights: Matrix::zeros(l.width(), l.input_width()),
                bias: vec![T::zero(); l.width()],
                activation: l.activation,
            })
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> DeskModel<U> {
        DeskModel {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weights: l.weights.cast(),
                    bias: l.bias.iter().map(|&b| U::from_f64_lossy(b.to_f64_lossy())).collect(),
                    activation: l.activation,
                })
                .collect(),
            split_index: self.split_index,
        }
    }
}

pub(crate) fn argmax_of<T: Scalar>(values: &[T]) -> usize {
    let v: Vec<f64> = values.iter().map(|x| x.to_f64_lossy()).collect();
    argmax_first(&v).unwrap_or(0)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    kind: String,
    split_index: usize,
    activations: Vec<Activation>,
}

pub fn encode_model<T: Scalar>(model: &DeskModel<T>) -> Result<Vec<u8>> {
    model.validate()?;
    let dtype = if std::mem::size_of::<T>() == 8 { Dtype::F64 } else { Dtype::F32 };
    let header = ModelHeader {
        kind: "desk_model".into(),
        split_index: model.split_index,
        activations: model.layers.iter().map(|l| l.activation).collect(),
    };
    let Value::Object(header) = serde_json::to_value(&header)? else { unreachable!() };
    let mut sections = Vec::with_capacity(model.layers.len() * 2);
    for (l, layer) in model.layers.iter().enumerate() {
        sections.push(Section { name: format!("weight_{l}"), dtype, matrix: layer.weights.cast() });
        let bias = Matrix::new(1, layer.bias.len(), layer.bias.clone())?;
        sections.push(Section { name: format!("bias_{l}"), dtype, matrix: bias.cast() });
    }
    format::encode_container(MODEL_MAGIC, &header, &sections)
}

pub fn decode_model<T: Scalar>(bytes: &[u8]) -> Result<DeskModel<T>> {
    let c = format::decode_container(MODEL_MAGIC, bytes)?;
    let header: ModelHeader =
        serde_json::from_value(Value::Object(c.header.clone())).map_err(|e| Error::Metadata(e.to_string()))?;
    let layers = header
        .activations
        .iter()
        .enumerate()
        .map(|(l, &act)| {
            let w = c.require(&format!("weight_{l}"))?.matrix.cast::<T>();
            let b = c.require(&format!("bias_{l}"))?.matrix.cast::<T>().into_data();
            Layer::new(w, b, act)
        })
        .collect::<Result<_>>()?;
    DeskModel::new(layers, header.split_index)
}

/// Writes an `SHD1` file.
pub fn save_model<T: Scalar>(model: &DeskModel<T>, path: impl AsRef<Path>) -> Result<()> {
    format::write_file(path.as_ref(), &encode_model(model)?)
}

pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<DeskModel<T>> {
    decode_model(&format::read_file(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_model(seed: u64, widths: &[usize], split: usize) -> DeskModel<f64> {
        let mut m = DeskModel::<f64>::init(widths, split, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        for l in &mut m.layers {
            for b in &mut l.bias {
                *b = rng.random_range(-0.5..0.5);
            }
        }
        m
    }

    fn naive_forward(m: &DeskModel<f64>, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for l in &m.layers {
            let mut out = vec![0.0; l.width()];
            for r in 0..l.width() {
                let mut s = l.bias[r];
                for c in 0..l.input_width() {
                    s += l.weights.get(r, c) * cur[c];
                }
                out[r] = if l.activation == Activation::Relu { s.max(0.0) } else { s };
            }
            cur = out;
        }
        cur
    }

    #[test]
    fn zero_model_predicts_class_zero() {
        let mut m = DeskModel::<f64>::init(&[3, 4, 5], 1, 0).unwrap();
        for l in &mut m.layers {
            l.weights.data_mut().iter_mut().for_each(|w| *w = 0.0);
        }
        assert_eq!(m.logits(&[1.0, 2.0, 3.0]).unwrap(), vec![0.0; 5]);
        assert_eq!(m.predict(&[1.0, 2.0, 3.0]).unwrap(), 0);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let id = Layer::new(Matrix::<f64>::identity(3), vec![0.0; 3], Activation::None).unwrap();
        let m = DeskModel { layers: vec![id.clone(), id], split_index: 1 };
        assert_eq!(m.logits(&[0.5, -1.0, 2.0]).unwrap(), vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn forward_matches_naive_oracle() {
        let m = random_model(3, &[6, 8, 8, 4], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let got = m.logits(&x).unwrap();
            for (a, b) in got.iter().zip(naive_forward(&m, &x)) {
                assert!((a - b).abs() < 1e-6);
            }
            assert_eq!(m.forward(&x).unwrap().logits(), got.as_slice());
        }
    }

    #[test]
    fn encode_head_compose_bitwise() {
        let m = random_model(4, &[5, 7, 7, 7, 3], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for split in 1..4 {
            let ms = m.with_split(split).unwrap();
            for _ in 0..100 {
                let x: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
                let composed = ms.head(&ms.encode(&x).unwrap()).unwrap();
                let direct = ms.logits(&x).unwrap();
                assert!(composed.iter().zip(&direct).all(|(a, b)| a.to_bits() == b.to_bits()));
            }
        }
        let penultimate = m.with_split(3).unwrap().encode(&[0.1; 5]).unwrap();
        assert_eq!(penultimate, m.forward(&[0.1; 5]).unwrap().activations[3]);
    }

    #[test]
    fn resplit_changes_embedding_dim() {
        let m = random_model(5, &[4, 6, 9, 3], 2);
        assert_eq!(m.embedding_dim(), 9);
        assert_eq!(m.with_split(1).unwrap().embedding_dim(), 6);
        assert!(m.with_split(0).is_err());
        assert!(m.with_split(3).is_err());
    }

    #[test]
    fn constant_logits_give_zero_gradient() {
        let mut m = random_model(6, &[4, 5, 3], 1);
        m.layers[0].weights.data_mut().iter_mut().for_each(|w| *w = 0.0);
        let g = m.gradient_input(&[0.3, -0.2, 1.0, 0.0], 1).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_vanishes_at_convex_optimum() {
        // logits (x, -x, 0) → loss of class 2 is log(e^x + e^-x + 1), minimal at x = 0
        let w = Matrix::new(3, 1, vec![1.0, -1.0, 0.0]).unwrap();
        let head = Layer::new(w, vec![0.0; 3], Activation::None).unwrap();
        let id = Layer::new(Matrix::<f64>::identity(1), vec![0.0], Activation::None).unwrap();
        let m = DeskModel { layers: vec![id, head], split_index: 1 };
        assert!(m.gradient_input(&[0.0], 2).unwrap()[0].abs() < 1e-15);
        assert!(m.gradient_input(&[0.5], 2).unwrap()[0] > 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = random_model(7, &[5, 6, 6, 3], 2);
        let x = [0.4, -0.3, 0.9, 0.1, -1.2];
        let g = m.gradient_input(&x, 1).unwrap();
        let h = 1e-5;
        for i in 0..5 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let fd = (m.loss(&xp, 1).unwrap() - m.loss(&xm, 1).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn validation_errors() {
        let m = random_model(8, &[3, 4, 2], 1);
        assert!(matches!(m.logits(&[1.0]), Err(Error::DimensionMismatch(_))));
        let mut bad = m.clone();
        bad.layers[1].activation = Activation::Relu;
        assert!(bad.validate().is_err());
        assert!(m.gradient_input(&[0.0; 3], 7).is_err());
    }

    #[test]
    fn model_file_round_trip() {
        let m = random_model(9, &[3, 4, 4, 2], 2);
        let bytes = encode_model(&m).unwrap();
        assert_eq!(&bytes[..4], b"SHD1");
        assert_eq!(decode_model::<f64>(&bytes).unwrap(), m);
        let single = m.cast::<f32>();
        assert_eq!(decode_model::<f32>(&encode_model(&single).unwrap()).unwrap(), single);
    }
}
