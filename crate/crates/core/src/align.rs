//! Affine alignment `z ↦ M z + b` from the model's embedding space into the
//! oracle space, fitted either by minibatch SGD or in closed form.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::linalg::{axpy, solve_spd, Matrix};
use crate::scalar::Scalar;
use crate::store::format::{self, Dtype, Section, MAP_MAGIC};

#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap<T> {
    /// `target_dim × source_dim`.
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> AffineMap<T> {
    pub fn new(weights: Matrix<T>, bias: Vec<T>) -> Result<Self> {
        if weights.rows() == 0 || weights.cols() == 0 {
            return Err(Error::DimensionMismatch("affine map dimensions must be at least 1".into()));
        }
        if bias.len() != weights.rows() {
            return Err(Error::DimensionMismatch(format!(
                "bias of length {} for {} outputs",
                bias.len(),
                weights.rows()
            )));
        }
        if !weights.is_finite() || bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("affine map".into()));
        }
        Ok(Self { weights, bias })
    }

    pub fn identity(dim: usize) -> Self {
        Self { weights: Matrix::identity(dim), bias: vec![T::zero(); dim] }
    }

    pub fn source_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn target_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn apply(&self, z: &[T]) -> Result<Vec<T>> {
        if z.len() != self.source_dim() {
            return Err(Error::DimensionMismatch(format!(
                "input of length {} for a map from dim {}",
                z.len(),
                self.source_dim()
            )));
        }
        let mut out = self.weights.matvec(z);
        for (o, &b) in out.iter_mut().zip(&self.bias) {
            *o += b;
        }
        Ok(out)
    }

    /// Applies the map to every row.
    pub fn apply_rows(&self, rows: &Matrix<T>) -> Result<Matrix<T>> {
        let mapped: Vec<Vec<T>> = rows.iter_rows().map(|r| self.apply(r)).collect::<Result<_>>()?;
        if mapped.is_empty() {
            return Ok(Matrix::zeros(0, self.target_dim()));
        }
        Matrix::from_rows(&mapped)
    }

    pub fn cast<U: Scalar>(&self) -> AffineMap<U> {
        AffineMap {
            weights: self.weights.cast(),
            bias: self.bias.iter().map(|&b| U::from_f64_lossy(b.to_f64_lossy())).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    /// 50 epochs, learning rate 0.01, momentum 0.9, weight decay 5e-4,
    /// minibatches of 256.
    fn default() -> Self {
        Self { epochs: 50, learning_rate: 0.01, momentum: 0.9, weight_decay: 5e-4, batch_size: 256, seed: 0 }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub final_mse: f64,
    pub r_squared: f64,
    /// Mean minibatch loss of each epoch.
    pub loss_curve: Vec<f64>,
}

fn check_pair<T: Scalar>(source: &Matrix<T>, target: &Matrix<T>) -> Result<()> {
    if source.rows() != target.rows() {
        return Err(Error::DimensionMismatch(format!(
            "{} source rows vs {} target rows",
            source.rows(),
            target.rows()
        )));
    }
    if source.rows() == 0 {
        return Err(Error::Empty("alignment needs at least one pair".into()));
    }
    if source.cols() == 0 || target.cols() == 0 {
        return Err(Error::DimensionMismatch("zero-width embeddings".into()));
    }
    Ok(())
}

/// Minimizes the mean squared residual norm by minibatch SGD with heavy-ball
/// momentum. Weight decay applies to `M` only. The shuffle order is drawn
/// from `cfg.seed`, so runs are reproducible bit for bit.
pub fn fit_sgd<T: Scalar>(
    source: &Matrix<T>,
    target: &Matrix<T>,
    cfg: &FitConfig,
) -> Result<(AffineMap<T>, FitReport)> {
    check_pair(source, target)?;
    cfg.validate()?;
    let (n, d_in, d_out) = (source.rows(), source.cols(), target.cols());
    let lr = T::from_f64_lossy(cfg.learning_rate);
    let mu = T::from_f64_lossy(cfg.momentum);
    let wd = T::from_f64_lossy(cfg.weight_decay);
    let two = T::from_f64_lossy(2.0);

    let mut weights = Matrix::<T>::zeros(d_out, d_in);
    let mut bias = vec![T::zero(); d_out];
    let mut vel_w = Matrix::<T>::zeros(d_out, d_in);
    let mut vel_b = vec![T::zero(); d_out];
    let mut grad_w = Matrix::<T>::zeros(d_out, d_in);
    let mut grad_b = vec![T::zero(); d_out];
    let mut residual = vec![T::zero(); d_out];

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            grad_w.data_mut().iter_mut().for_each(|g| *g = T::zero());
            grad_b.iter_mut().for_each(|g| *g = T::zero());
            let mut batch_loss = 0.0f64;
            for &i in batch {
                let z = source.row(i);
                let y = target.row(i);
                for k in 0..d_out {
                    residual[k] = crate::linalg::dot(weights.row(k), z) + bias[k] - y[k];
                    batch_loss += residual[k].to_f64_lossy().powi(2);
                }
                for k in 0..d_out {
                    axpy(residual[k], z, grad_w.row_mut(k));
                    grad_b[k] += residual[k];
                }
            }
            let scale = two / T::from_count(batch.len());
            for k in 0..d_out {
                let (g_row, w_row, v_row) = (grad_w.row(k), weights.row(k), vel_w.row_mut(k));
                for j in 0..d_in {
                    let g = scale * g_row[j] + wd * w_row[j];
                    v_row[j] = mu * v_row[j] + g;
                }
                vel_b[k] = mu * vel_b[k] + scale * grad_b[k];
            }
            for (w, &v) in weights.data_mut().iter_mut().zip(vel_w.data()) {
                *w -= lr * v;
            }
            for (b, &v) in bias.iter_mut().zip(&vel_b) {
                *b -= lr * v;
            }
            epoch_loss += batch_loss / batch.len() as f64;
            batches += 1;
        }
        let mean = epoch_loss / batches as f64;
        if !mean.is_finite() || !weights.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        loss_curve.push(mean);
    }

    let map = AffineMap::new(weights, bias).map_err(|_| Error::Diverged { epoch: cfg.epochs - 1 })?;
    let fit = evaluate(&map, source, target)?;
    Ok((map, FitReport { final_mse: fit.mse, r_squared: fit.r_squared, loss_curve }))
}

/// Closed-form ridge solution on the augmented design `[source | 1]`.
/// The ridge term penalizes `M` only; the bias stays free. Normal equations
/// are accumulated in `f64`.
pub fn fit_least_squares<T: Scalar>(source: &Matrix<T>, target: &Matrix<T>, ridge: f64) -> Result<AffineMap<T>> {
    check_pair(source, target)?;
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(Error::Config("ridge must be a finite non-negative number".into()));
    }
    let (d_in, d_out) = (source.cols(), target.cols());
    let p = d_in + 1;
    let mut gram = Matrix::<f64>::zeros(p, p);
    let mut rhs = Matrix::<f64>::zeros(p, d_out);
    let mut x = vec![0.0f64; p];
    for (z, y) in source.iter_rows().zip(target.iter_rows()) {
        for (xi, &zi) in x.iter_mut().zip(z) {
            *xi = zi.to_f64_lossy();
        }
        x[d_in] = 1.0;
        for a in 0..p {
            let xa = x[a];
            let g = gram.row_mut(a);
            for b in 0..p {
                g[b] += xa * x[b];
            }
            let r = rhs.row_mut(a);
            for (rk, &yk) in r.iter_mut().zip(y) {
                *rk += xa * yk.to_f64_lossy();
            }
        }
    }
    for a in 0..d_in {
        let v = gram.get(a, a) + ridge;
        gram.set(a, a, v);
    }
    let solution = solve_spd(&gram, &rhs)?;
    // solution is p × d_out; M is its top block transposed
    let weights = Matrix::from_fn(d_out, d_in, |k, j| T::from_f64_lossy(solution.get(j, k)));
    let bias = (0..d_out).map(|k| T::from_f64_lossy(solution.get(d_in, k))).collect();
    AffineMap::new(weights, bias)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitQuality {
    pub mse: f64,
    pub r_squared: f64,
}

/// Mean squared residual norm per sample, and the global coefficient of
/// determination over all flattened components (total sum of squares taken
/// about the per-dimension target mean).
pub fn evaluate<T: Scalar>(map: &AffineMap<T>, source: &Matrix<T>, target: &Matrix<T>) -> Result<FitQuality> {
    check_pair(source, target)?;
    if source.cols() != map.source_dim() || target.cols() != map.target_dim() {
        return Err(Error::DimensionMismatch(format!(
            "map {}→{} evaluated on {}→{} data",
            map.source_dim(),
            map.target_dim(),
            source.cols(),
            target.cols()
        )));
    }
    let n = source.rows();
    let d_out = target.cols();
    let mut mean = vec![0.0f64; d_out];
    for y in target.iter_rows() {
        for (m, &v) in mean.iter_mut().zip(y) {
            *m += v.to_f64_lossy();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut ss_res = 0.0f64;
    let mut ss_tot = 0.0f64;
    for (z, y) in source.iter_rows().zip(target.iter_rows()) {
        let pred = map.apply(z)?;
        for k in 0..d_out {
            let yk = y[k].to_f64_lossy();
            ss_res += (pred[k].to_f64_lossy() - yk).powi(2);
            ss_tot += (yk - mean[k]).powi(2);
        }
    }
    let mse = ss_res / n as f64;
    let r_squared = if ss_tot == 0.0 {
        if ss_res == 0.0 {
            1.0
        } else {
            return Err(Error::ZeroVarianceTarget);
        }
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok(FitQuality { mse, r_squared })
}

fn dtype_of<T: Scalar>() -> Dtype {
    if std::mem::size_of::<T>() == 8 {
        Dtype::F64
    } else {
        Dtype::F32
    }
}

pub fn encode_map<T: Scalar>(map: &AffineMap<T>) -> Result<Vec<u8>> {
    let dtype = dtype_of::<T>();
    let bias = Matrix::new(1, map.bias.len(), map.bias.clone())?;
    let sections = [
        Section { name: "weights".into(), dtype, matrix: map.weights.cast() },
        Section { name: "bias".into(), dtype, matrix: bias.cast() },
    ];
    let mut header = Map::new();
    header.insert("kind".into(), Value::String("affine_map".into()));
    format::encode_container(MAP_MAGIC, &header, &sections)
}

pub fn decode_map<T: Scalar>(bytes: &[u8]) -> Result<AffineMap<T>> {
    let c = format::decode_container(MAP_MAGIC, bytes)?;
    let weights = c.require("weights")?.matrix.cast::<T>();
    let bias = c.require("bias")?;
    if bias.matrix.rows() != 1 {
        return Err(Error::DimensionMismatch("bias section must be a single row".into()));
    }
    AffineMap::new(weights, bias.matrix.cast::<T>().into_data())
}

/// Writes an `SHM1` file: `weights` then `bias` as a 1-row section.
pub fn save_map<T: Scalar>(map: &AffineMap<T>, path: impl AsRef<Path>) -> Result<()> {
    format::write_file(path.as_ref(), &encode_map(map)?)
}

pub fn load_map<T: Scalar>(path: impl AsRef<Path>) -> Result<AffineMap<T>> {
    decode_map(&format::read_file(path.as_ref())?)
}
