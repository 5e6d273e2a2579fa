//! Gradient attacks under ℓ∞ and ℓ2 budgets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::DeskModel;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    PgdLinf,
    PgdL2,
    Fgsm,
    /// Picks one of the other three per sample.
    Mixture,
}

impl AttackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::PgdLinf => "pgd_linf",
            AttackKind::PgdL2 => "pgd_l2",
            AttackKind::Fgsm => "fgsm",
            AttackKind::Mixture => "mixture",
        }
    }

    pub fn is_l2(self) -> bool {
        self == AttackKind::PgdL2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Budget in the attack's norm.
    pub epsilon: f64,
    /// Ignored by FGSM.
    pub steps: usize,
    pub step_size: f64,
    pub seed: u64,
}

impl AttackSpec {
    /// Twenty steps of size `epsilon / 4`.
    pub fn new(kind: AttackKind, epsilon: f64, seed: u64) -> Self {
        Self { kind, epsilon, steps: 20, step_size: epsilon / 4.0, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config("attack epsilon must be finite and non-negative".into()));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config("attack step_size must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Perturbed input and the attack that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Adversarial<T> {
    pub input: Vec<T>,
    pub kind: AttackKind,
}

fn clamp_domain<T: Scalar>(x: &mut [T], bounds: Option<(f64, f64)>) {
    if let Some((lo, hi)) = bounds {
        let (lo, hi) = (T::from_f64_lossy(lo), T::from_f64_lossy(hi));
        for v in x {
            *v = v.max(lo).min(hi);
        }
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Attacks one input. `index` selects the per-sample random stream, so batch
/// results do not depend on scheduling.
pub fn attack<T: Scalar>(
    model: &DeskModel<T>,
    x0: &[T],
    label: usize,
    spec: &AttackSpec,
    index: u64,
    bounds: Option<(f64, f64)>,
) -> Result<Adversarial<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let kind = match spec.kind {
        AttackKind::Mixture => [AttackKind::PgdLinf, AttackKind::PgdL2, AttackKind::Fgsm][rng.random_range(0..3)],
        k => k,
    };
    let eps = spec.epsilon;
    let x0f: Vec<f64> = x0.iter().map(|v| v.to_f64_lossy()).collect();
    let to_t = |d: &[f64]| -> Vec<T> {
        let mut x: Vec<T> = x0f.iter().zip(d).map(|(a, b)| T::from_f64_lossy(a + b)).collect();
        clamp_domain(&mut x, bounds);
        x
    };
    let grad_at = |d: &[f64]| -> Result<Vec<f64>> {
        Ok(model.gradient_input(&to_t(d), label)?.iter().map(|g| g.to_f64_lossy()).collect())
    };
    let n = x0.len();
    let delta: Vec<f64> = match kind {
        AttackKind::Fgsm => grad_at(&vec![0.0; n])?.into_iter().map(|g| eps * sign(g)).collect(),
        AttackKind::PgdLinf => {
            let mut d: Vec<f64> = (0..n).map(|_| if eps > 0.0 { rng.random_range(-eps..=eps) } else { 0.0 }).collect();
            let step = spec.step_size;
            for _ in 0..spec.steps {
                let g = grad_at(&d)?;
                for (di, gi) in d.iter_mut().zip(g) {
                    *di = (*di + step * sign(gi)).clamp(-eps, eps);
                }
            }
            d
        }
        AttackKind::PgdL2 => {
            let dir: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = l2(&dir);
            let radius = eps * rng.random_range(0.0..=1.0);
            let mut d: Vec<f64> = dir.iter().map(|v| if norm > 0.0 { v / norm * radius } else { 0.0 }).collect();
            let step = spec.step_size;
            for _ in 0..spec.steps {
                let g = grad_at(&d)?;
                let gn = l2(&g);
                if gn > 0.0 {
                    d.iter_mut().zip(&g).for_each(|(di, gi)| *di += step * gi / gn);
                }
                let dn = l2(&d);
                if dn > eps {
                    d.iter_mut().for_each(|di| *di *= eps / dn);
                }
            }
            d
        }
        AttackKind::Mixture => unreachable!("resolved above"),
    };
    Ok(Adversarial { input: to_t(&delta), kind })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Attacks every row in parallel; row `i` uses stream `i`.
pub fn attack_rows<T: Scalar>(
    model: &DeskModel<T>,
    inputs: &Matrix<T>,
    labels: &[usize],
    spec: &AttackSpec,
    bounds: Option<(f64, f64)>,
) -> Result<(Matrix<T>, Vec<AttackKind>)> {
    if inputs.rows() != labels.len() {
        return Err(Error::DimensionMismatch(format!("{} inputs but {} labels", inputs.rows(), labels.len())));
    }
    let advs: Vec<Adversarial<T>> = (0..labels.len())
        .into_par_iter()
        .map(|i| attack(model, inputs.row(i), labels[i], spec, i as u64, bounds))
        .collect::<Result<_>>()?;
    let kinds = advs.iter().map(|a| a.kind).collect();
    let rows: Vec<Vec<T>> = advs.into_iter().map(|a| a.input).collect();
    let m = if rows.is_empty() { Matrix::zeros(0, inputs.cols()) } else { Matrix::from_rows(&rows)? };
    Ok((m, kinds))
}

/// Norm of the perturbation in the metric of `kind`.
pub fn perturbation_norm<T: Scalar>(x0: &[T], x: &[T], kind: AttackKind) -> f64 {
    let d: Vec<f64> = x0.iter().zip(x).map(|(a, b)| b.to_f64_lossy() - a.to_f64_lossy()).collect();
    if kind.is_l2() {
        l2(&d)
    } else {
        d.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}
