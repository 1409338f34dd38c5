use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate, par_chunks, project, sign, AttackResult};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::scalar::Scalar;
use crate::seed::stream_rng;
use crate::tensor::Tensor;

/// Probe points evaluated per forward pass.
const PROBE_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpsaConfig {
    pub epsilon: f64,
    pub iters: usize,
    /// Probe evaluations per step; consumed as `samples_per_step / 2`
    /// antithetic pairs.
    pub samples_per_step: usize,
    #[serde(default = "default_delta")]
    pub perturbation: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub base_seed: u64,
}

fn default_delta() -> f64 {
    0.01
}

fn default_lr() -> f64 {
    0.01
}

impl SpsaConfig {
    pub fn new(epsilon: f64, iters: usize, samples_per_step: usize) -> Self {
        Self {
            epsilon,
            iters,
            samples_per_step,
            perturbation: default_delta(),
            learning_rate: default_lr(),
            base_seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.base_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Contract(format!(
                "epsilon {} outside [0, 1]",
                self.epsilon
            )));
        }
        if self.samples_per_step < 2 || !self.samples_per_step.is_multiple_of(2) {
            return Err(Error::Contract(format!(
                "samples_per_step must be even and at least 2, got {}",
                self.samples_per_step
            )));
        }
        if !(self.perturbation > 0.0) || !(self.learning_rate > 0.0) {
            return Err(Error::Contract(
                "perturbation and learning rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Antithetic Rademacher estimate of `∇f(x)`:
/// `mean_p [f(x+δv_p) − f(x−δv_p)] / (2δ) · v_p` over `samples / 2` pairs.
///
/// `f` maps a stack of probe points (leading axis, shape `[m, ..x.shape]`)
/// to one value per probe.
pub fn spsa_gradient_estimate<T, R, F>(
    x: &Tensor<T>,
    samples: usize,
    delta: f64,
    rng: &mut R,
    mut f: F,
) -> Result<Tensor<T>>
where
    T: Scalar,
    R: Rng,
    F: FnMut(&Tensor<T>) -> Result<Vec<T>>,
{
    let pairs = samples / 2;
    if pairs == 0 {
        return Err(Error::Contract("SPSA needs at least one pair".into()));
    }
    let d = x.len();
    let dt = T::from_f64_lossy(delta);
    let mut grad = vec![T::zero(); d];
    let mut probe_shape = vec![0];
    probe_shape.extend_from_slice(x.shape());
    let mut done = 0;
    while done < pairs {
        let m = (pairs - done).clamp(1, PROBE_BATCH / 2);
        let dirs: Vec<Vec<T>> = (0..m)
            .map(|_| {
                (0..d)
                    .map(|_| if rng.random::<bool>() { T::one() } else { -T::one() })
                    .collect()
            })
            .collect();
        let mut probes = Vec::with_capacity(2 * m * d);
        for v in &dirs {
            probes.extend(x.data().iter().zip(v).map(|(&a, &s)| a + dt * s));
            probes.extend(x.data().iter().zip(v).map(|(&a, &s)| a - dt * s));
        }
        probe_shape[0] = 2 * m;
        let values = f(&Tensor::new(probe_shape.clone(), probes)?)?;
        if values.len() != 2 * m {
            return Err(Error::Dimension(format!(
                "probe function returned {} values for {} probes",
                values.len(),
                2 * m
            )));
        }
        for (p, v) in dirs.iter().enumerate() {
            let (up, down) = (values[2 * p], values[2 * p + 1]);
            if !(up.is_finite() && down.is_finite()) {
                return Err(Error::Evaluation(format!("probe value {up} / {down}")));
            }
            let coef = (up - down) / (dt + dt);
            for (g, &s) in grad.iter_mut().zip(v) {
                *g += coef * s;
            }
        }
        done += m;
    }
    let inv = T::one() / T::from_usize(pairs).expect("pair count fits");
    Tensor::new(x.shape().to_vec(), grad.into_iter().map(|g| g * inv).collect())
}

fn spsa_example<T: Scalar>(
    model: &Model<T>,
    x0: &Tensor<T>,
    label: usize,
    config: &SpsaConfig,
    index: usize,
) -> Result<AttackResult<T>> {
    let eps = T::from_f64_lossy(config.epsilon);
    let lr = T::from_f64_lossy(config.learning_rate);
    let mut rng = stream_rng(config.base_seed, index as u64);
    let mut x = x0.clone();
    let mut example_shape = vec![1];
    example_shape.extend_from_slice(model.input_shape());
    let c = model.classes();
    for _ in 0..config.iters {
        let point = x.reshape(model.input_shape())?;
        let g = spsa_gradient_estimate(
            &point,
            config.samples_per_step,
            config.perturbation,
            &mut rng,
            |probes| {
                let ls = model.logits(probes)?.log_softmax_rows()?;
                Ok(ls.data().chunks_exact(c).map(|row| -row[label]).collect())
            },
        )
        .map_err(|e| Error::Attack {
            example: index,
            detail: e.to_string(),
        })?;
        let data = x.data_mut();
        for (v, &gi) in data.iter_mut().zip(g.data()) {
            *v += lr * sign(gi);
        }
        project(data, x0.data(), eps);
    }
    let ev = evaluate(model, &x, &[label], &[label], false, index)?;
    Ok(AttackResult {
        x_adv: x,
        final_loss: ev.true_loss.clone(),
        objective_loss: ev.true_loss,
        success: ev.success,
        predictions: ev.predictions,
        restart_index: vec![0],
        targets: vec![label],
    })
}

/// Gradient-free untargeted attack: sign ascent on the SPSA estimate of the
/// true-label cross-entropy, projected like PGD. Forward passes only.
pub fn spsa<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
    y: &[usize],
    config: &SpsaConfig,
) -> Result<AttackResult<T>> {
    config.validate()?;
    let n = model.check_batch(x)?;
    model.check_labels(y, n)?;
    let parts = par_chunks(n, 1, |s, _| spsa_example(model, &x.slice_rows(s, s + 1)?, y[s], config, s))?;
    AttackResult::concat(parts)
}
