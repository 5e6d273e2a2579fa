//! Minibatch SGD on softmax cross-entropy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::DeskModel;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, learning_rate: 0.02, momentum: 0.9, batch_size: 32, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean cross-entropy over each epoch, measured during the pass.
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
}

/// Trains `model` in place. Examples are visited sequentially in a seeded
/// shuffle order, so the result is deterministic.
pub fn train<T: Scalar>(
    model: &mut DeskModel<T>,
    inputs: &Matrix<T>,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    model.validate()?;
    if inputs.rows() != labels.len() {
        return Err(Error::DimensionMismatch(format!("{} inputs but {} labels", inputs.rows(), labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= model.n_classes()) {
        return Err(Error::UnknownClass(bad.to_string()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut velocity = model.zeros_like();
    let lr = T::from_f64_lossy(cfg.learning_rate);
    let mu = T::from_f64_lossy(cfg.momentum);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = model.zeros_like();
            for &i in batch {
                total += model.accumulate_param_grads(inputs.row(i), labels[i], &mut grads)?.to_f64_lossy();
            }
            let scale = T::one() / T::from_count(batch.len());
            for ((layer, v), g) in model.layers.iter_mut().zip(&mut velocity).zip(&grads) {
                let params = layer.weights.data_mut().iter_mut().chain(layer.bias.iter_mut());
                let vel = v.weights.data_mut().iter_mut().chain(v.bias.iter_mut());
                let grad = g.weights.data().iter().chain(&g.bias);
                for ((p, v), &g) in params.zip(vel).zip(grad) {
                    *v = mu * *v + g * scale;
                    *p -= lr * *v;
                }
            }
        }
        let mean = total / labels.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        epoch_losses.push(mean);
    }
    let train_accuracy = model.accuracy(inputs, labels)?;
    Ok(TrainReport { epoch_losses, train_accuracy })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs() -> (Matrix<f64>, Vec<usize>) {
        let centers = [[2.0, 0.0], [-2.0, 1.0], [0.0, -2.0]];
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..150 {
            let c = i % 3;
            let t = i as f64 * 0.37;
            data.push(centers[c][0] + 0.3 * t.sin());
            data.push(centers[c][1] + 0.3 * t.cos());
            labels.push(c);
        }
        (Matrix::new(150, 2, data).unwrap(), labels)
    }

    #[test]
    fn separable_blobs_are_learned() {
        let (x, y) = blobs();
        let mut m = DeskModel::<f64>::init(&[2, 8, 3], 1, 3).unwrap();
        let report = train(&mut m, &x, &y, &TrainConfig::default()).unwrap();
        assert_eq!(report.train_accuracy, 1.0);
        assert_eq!(report.epoch_losses.len(), 30);
        assert!(report.epoch_losses[..5].windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn training_is_deterministic() {
        let (x, y) = blobs();
        let cfg = TrainConfig { epochs: 4, seed: 11, ..TrainConfig::default() };
        let mut a = DeskModel::<f64>::init(&[2, 8, 3], 1, 3).unwrap();
        let mut b = a.clone();
        assert_eq!(train(&mut a, &x, &y, &cfg).unwrap(), train(&mut b, &x, &y, &cfg).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let (x, y) = blobs();
        let mut m = DeskModel::<f64>::init(&[2, 8, 3], 1, 3).unwrap();
        assert!(train(&mut m, &x, &y[..10], &TrainConfig::default()).is_err());
        let cfg = TrainConfig { momentum: 1.0, ..TrainConfig::default() };
        assert!(matches!(train(&mut m, &x, &y, &cfg), Err(Error::Config(_))));
        let mut wrong = y.clone();
        wrong[0] = 5;
        assert!(matches!(train(&mut m, &x, &wrong, &TrainConfig::default()), Err(Error::UnknownClass(_))));
    }
}
