//! L∞ attacks: PGD (untargeted and targeted, with restarts) and SPSA.

mod spsa;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::scalar::Scalar;
use crate::seed::stream_rng;
use crate::tensor::Tensor;

pub use spsa::{spsa, spsa_gradient_estimate, SpsaConfig};

/// Examples per unit of parallel work. Fixed so that results never depend on
/// the number of workers.
pub const ATTACK_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    #[default]
    Untargeted,
    RandomTarget,
    LeastLikely,
}

impl TargetMode {
    pub fn is_targeted(self) -> bool {
        self != TargetMode::Untargeted
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub step: f64,
    pub iters: usize,
    pub restarts: usize,
    #[serde(default)]
    pub target_mode: TargetMode,
    /// `None` means: random start iff `restarts > 1`.
    #[serde(default)]
    pub random_init: Option<bool>,
    #[serde(default)]
    pub base_seed: u64,
}

impl AttackConfig {
    pub fn new(epsilon: f64, step: f64, iters: usize, restarts: usize) -> Self {
        Self {
            epsilon,
            step,
            iters,
            restarts,
            target_mode: TargetMode::Untargeted,
            random_init: None,
            base_seed: 0,
        }
    }

    /// Step 0.01, 40 iterations, 1 restart.
    pub fn default_pgd(epsilon: f64) -> Self {
        Self::new(epsilon, 0.01, 40, 1)
    }

    pub fn with_target_mode(mut self, mode: TargetMode) -> Self {
        self.target_mode = mode;
        self
    }

    pub fn with_random_init(mut self, random_init: bool) -> Self {
        self.random_init = Some(random_init);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.base_seed = seed;
        self
    }

    pub fn uses_random_init(&self) -> bool {
        self.random_init.unwrap_or(self.restarts > 1)
    }

    /// Copy with the random-start choice made explicit.
    pub fn resolved(&self) -> Self {
        Self {
            random_init: Some(self.uses_random_init()),
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Contract(format!(
                "epsilon {} outside [0, 1]",
                self.epsilon
            )));
        }
        if self.iters > 0 && !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Contract(format!(
                "step must be positive when iters > 0, got {}",
                self.step
            )));
        }
        if self.restarts == 0 {
            return Err(Error::Contract("restarts must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-example outcome of an attack.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult<T> {
    pub x_adv: Tensor<T>,
    /// Cross-entropy at the true label on `x_adv`.
    pub final_loss: Vec<T>,
    /// What the attack optimised: true-label CE (untargeted, maximised) or
    /// target CE (targeted, minimised).
    pub objective_loss: Vec<T>,
    pub success: Vec<bool>,
    /// Predicted class on `x_adv`.
    pub predictions: Vec<usize>,
    pub restart_index: Vec<usize>,
    pub targets: Vec<usize>,
}

impl<T: Scalar> AttackResult<T> {
    pub fn len(&self) -> usize {
        self.success.len()
    }

    pub fn is_empty(&self) -> bool {
        self.success.is_empty()
    }

    /// Fraction of examples still classified as the true label.
    pub fn accuracy(&self, labels: &[usize]) -> f64 {
        let right = labels
            .iter()
            .zip(&self.predictions)
            .filter(|(a, b)| a == b)
            .count();
        right as f64 / labels.len().max(1) as f64
    }

    fn concat(parts: Vec<Self>) -> Result<Self> {
        let x_adv = Tensor::concat_rows(&parts.iter().map(|p| p.x_adv.clone()).collect::<Vec<_>>())?;
        let mut out = Self {
            x_adv,
            final_loss: Vec::new(),
            objective_loss: Vec::new(),
            success: Vec::new(),
            predictions: Vec::new(),
            restart_index: Vec::new(),
            targets: Vec::new(),
        };
        for p in parts {
            out.final_loss.extend(p.final_loss);
            out.objective_loss.extend(p.objective_loss);
            out.success.extend(p.success);
            out.predictions.extend(p.predictions);
            out.restart_index.extend(p.restart_index);
            out.targets.extend(p.targets);
        }
        Ok(out)
    }
}

/// Target labels for each example. Streams of `seed` are keyed by example
/// index, so a slice of the batch gets the same targets as the whole.
pub fn select_target<T: Scalar>(
    mode: TargetMode,
    logits: &Tensor<T>,
    labels: &[usize],
    seed: u64,
) -> Result<Vec<usize>> {
    select_target_from(mode, logits, labels, seed, 0)
}

pub(crate) fn select_target_from<T: Scalar>(
    mode: TargetMode,
    logits: &Tensor<T>,
    labels: &[usize],
    seed: u64,
    first_index: usize,
) -> Result<Vec<usize>> {
    let classes = logits.shape().get(1).copied().unwrap_or(0);
    match mode {
        TargetMode::Untargeted => Ok(labels.to_vec()),
        TargetMode::LeastLikely => logits.argmin_rows(),
        TargetMode::RandomTarget => {
            if classes < 2 {
                return Err(Error::Contract(
                    "random target needs at least 2 classes".into(),
                ));
            }
            Ok(labels
                .iter()
                .enumerate()
                .map(|(b, &y)| {
                    let mut rng = stream_rng(seed, (first_index + b) as u64);
                    let t = rng.random_range(0..classes - 1);
                    if t >= y {
                        t + 1
                    } else {
                        t
                    }
                })
                .collect())
        }
    }
}

fn sign<T: Scalar>(g: T) -> T {
    if g > T::zero() {
        T::one()
    } else if g < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Projects `x` onto the L∞ ball of radius `eps` around `x0`, then onto `[0, 1]`.
pub(crate) fn project<T: Scalar>(x: &mut [T], x0: &[T], eps: T) {
    for (v, &o) in x.iter_mut().zip(x0) {
        *v = v.max(o - eps).min(o + eps).max(T::zero()).min(T::one());
    }
}

pub(crate) struct Evaluation<T> {
    pub true_loss: Vec<T>,
    pub objective_loss: Vec<T>,
    pub success: Vec<bool>,
    pub predictions: Vec<usize>,
}

/// True-label CE, objective CE, success and prediction for every row of `x`.
pub(crate) fn evaluate<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    targets: &[usize],
    targeted: bool,
    first_index: usize,
) -> Result<Evaluation<T>> {
    let logits = model.logits(x)?;
    let ls = logits.log_softmax_rows()?;
    let preds = logits.argmax_rows()?;
    let c = model.classes();
    let mut true_loss = Vec::with_capacity(labels.len());
    let mut obj = Vec::with_capacity(labels.len());
    let mut success = Vec::with_capacity(labels.len());
    for (b, (&y, &t)) in labels.iter().zip(targets).enumerate() {
        let l = -ls.data()[b * c + y];
        if !l.is_finite() {
            return Err(Error::Attack {
                example: first_index + b,
                detail: format!("final loss is {l}"),
            });
        }
        true_loss.push(l);
        obj.push(if targeted { -ls.data()[b * c + t] } else { l });
        success.push(if targeted { preds[b] == t } else { preds[b] != y });
    }
    Ok(Evaluation {
        true_loss,
        objective_loss: obj,
        success,
        predictions: preds,
    })
}

/// One PGD restart on a chunk whose first row is example `first_index`.
pub(crate) fn pgd_chunk<T: Scalar>(
    model: &Model<T>,
    x0: &Tensor<T>,
    labels: &[usize],
    targets: &[usize],
    config: &AttackConfig,
    restart: usize,
    first_index: usize,
) -> Result<AttackResult<T>> {
    let eps = T::from_f64_lossy(config.epsilon);
    let step = T::from_f64_lossy(config.step);
    let targeted = config.target_mode.is_targeted();
    let seed = config.base_seed.wrapping_add(restart as u64);
    let mut x = x0.clone();
    let per = x0.len() / labels.len().max(1);
    if config.uses_random_init() && config.epsilon > 0.0 {
        let data = x.data_mut();
        for b in 0..labels.len() {
            let mut rng = stream_rng(seed, (first_index + b) as u64);
            for v in &mut data[b * per..(b + 1) * per] {
                let d: f64 = rng.random_range(-config.epsilon..=config.epsilon);
                *v += T::from_f64_lossy(d);
            }
        }
        project(x.data_mut(), x0.data(), eps);
    }
    let direction = if targeted { -T::one() } else { T::one() };
    let aim = if targeted { targets } else { labels };
    for _ in 0..config.iters {
        let ig = model.input_gradient(&x, aim)?;
        if let Some(b) = ig.losses.iter().position(|l| !l.is_finite()) {
            return Err(Error::Attack {
                example: first_index + b,
                detail: format!("loss is {} during PGD", ig.losses[b]),
            });
        }
        let data = x.data_mut();
        for (v, &g) in data.iter_mut().zip(ig.grad.data()) {
            *v += direction * step * sign(g);
        }
        project(data, x0.data(), eps);
    }
    let ev = evaluate(model, &x, labels, targets, targeted, first_index)?;
    Ok(AttackResult {
        x_adv: x,
        final_loss: ev.true_loss,
        objective_loss: ev.objective_loss,
        success: ev.success,
        predictions: ev.predictions,
        restart_index: vec![restart; labels.len()],
        targets: targets.to_vec(),
    })
}

/// `true` if `(s_new, l_new)` is strictly more harmful than `(s_old, l_old)`.
fn better<T: Scalar>(targeted: bool, s_new: bool, l_new: T, s_old: bool, l_old: T) -> bool {
    match (s_new, s_old) {
        (true, false) => true,
        (false, true) => false,
        _ if targeted => l_new < l_old,
        _ => l_new > l_old,
    }
}

/// How later restarts treat examples that are already fooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum RestartPolicy {
    /// Run every restart on every example.
    All,
    /// Skip examples whose kept restart already succeeded. The success flags
    /// (hence accuracy) equal those of [`RestartPolicy::All`].
    SkipSucceeded,
}

/// Restarts on one chunk. `record` receives every restart's true-label losses.
fn restarts_chunk<T: Scalar>(
    model: &Model<T>,
    x0: &Tensor<T>,
    labels: &[usize],
    config: &AttackConfig,
    first_index: usize,
    policy: RestartPolicy,
    mut record: Option<&mut Vec<Vec<T>>>,
) -> Result<AttackResult<T>> {
    let targets = if config.target_mode.is_targeted() {
        let logits = model.logits(x0)?;
        select_target_from(config.target_mode, &logits, labels, config.base_seed, first_index)?
    } else {
        labels.to_vec()
    };
    let targeted = config.target_mode.is_targeted();
    let mut kept = pgd_chunk(model, x0, labels, &targets, config, 0, first_index)?;
    if let Some(rec) = record.as_deref_mut() {
        rec.push(kept.final_loss.clone());
    }
    let per = x0.len() / labels.len().max(1);
    for restart in 1..config.restarts {
        let rows: Vec<usize> = match policy {
            RestartPolicy::All => (0..labels.len()).collect(),
            RestartPolicy::SkipSucceeded => {
                (0..labels.len()).filter(|&b| !kept.success[b]).collect()
            }
        };
        if rows.is_empty() {
            break;
        }
        let cand = if rows.len() == labels.len() {
            pgd_chunk(model, x0, labels, &targets, config, restart, first_index)?
        } else {
            let mut parts = Vec::with_capacity(rows.len());
            for &b in &rows {
                parts.push(pgd_chunk(
                    model,
                    &x0.slice_rows(b, b + 1)?,
                    &labels[b..b + 1],
                    &targets[b..b + 1],
                    config,
                    restart,
                    first_index + b,
                )?);
            }
            AttackResult::concat(parts)?
        };
        if let Some(rec) = record.as_deref_mut() {
            rec.push(cand.final_loss.clone());
        }
        let kept_data = kept.x_adv.data_mut();
        for (k, &b) in rows.iter().enumerate() {
            if better(
                targeted,
                cand.success[k],
                cand.objective_loss[k],
                kept.success[b],
                kept.objective_loss[b],
            ) {
                kept_data[b * per..(b + 1) * per]
                    .copy_from_slice(&cand.x_adv.data()[k * per..(k + 1) * per]);
                kept.final_loss[b] = cand.final_loss[k];
                kept.objective_loss[b] = cand.objective_loss[k];
                kept.success[b] = cand.success[k];
                kept.predictions[b] = cand.predictions[k];
                kept.restart_index[b] = restart;
            }
        }
    }
    Ok(kept)
}

fn check_inputs<T: Scalar>(model: &Model<T>, x: &Tensor<T>, y: &[usize]) -> Result<usize> {
    let n = model.check_batch(x)?;
    model.check_labels(y, n)?;
    if n == 0 {
        return Err(Error::Contract("attack on an empty batch".into()));
    }
    Ok(n)
}

/// Splits `0..n` into fixed chunks and runs `f(start, end)` in parallel,
/// returning results in chunk order.
pub(crate) fn par_chunks<R: Send>(
    n: usize,
    chunk: usize,
    f: impl Fn(usize, usize) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let count = n.div_ceil(chunk);
    (0..count)
        .into_par_iter()
        .map(|c| f(c * chunk, ((c + 1) * chunk).min(n)))
        .collect()
}

pub(crate) fn pgd_restarts_with<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
    y: &[usize],
    config: &AttackConfig,
    policy: RestartPolicy,
) -> Result<AttackResult<T>> {
    config.validate()?;
    let n = check_inputs(model, x, y)?;
    let parts = par_chunks(n, ATTACK_CHUNK, |s, e| {
        restarts_chunk(model, &x.slice_rows(s, e)?, &y[s..e], config, s, policy, None)
    })?;
    AttackResult::concat(parts)
}

/// Single-restart PGD (restart index 0, seed `base_seed`).
pub fn pgd<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
    y: &[usize],
    config: &AttackConfig,
) -> Result<AttackResult<T>> {
    let single = AttackConfig {
        restarts: 1,
        random_init: Some(config.uses_random_init()),
        ..*config
    };
    pgd_restarts_with(model, x, y, &single, RestartPolicy::All)
}

/// PGD with `config.restarts` restarts (seed `base_seed + restart`), keeping
/// per example the most harmful restart: success first, then loss.
pub fn pgd_restarts<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
    y: &[usize],
    config: &AttackConfig,
) -> Result<AttackResult<T>> {
    pgd_restarts_with(model, x, y, config, RestartPolicy::All)
}

/// Like [`pgd_restarts`] but also returns every restart's true-label loss,
/// indexed `[restart][example]`.
pub fn pgd_restarts_recorded<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
    y: &[usize],
    config: &AttackConfig,
) -> Result<(AttackResult<T>, Vec<Vec<T>>)> {
    config.validate()?;
    let n = check_inputs(model, x, y)?;
    let parts = par_chunks(n, ATTACK_CHUNK, |s, e| {
        let mut rec = Vec::new();
        let r = restarts_chunk(
            model,
            &x.slice_rows(s, e)?,
            &y[s..e],
            config,
            s,
            RestartPolicy::All,
            Some(&mut rec),
        )?;
        Ok((r, rec))
    })?;
    let mut losses = vec![Vec::with_capacity(n); config.restarts];
    let mut results = Vec::with_capacity(parts.len());
    for (r, rec) in parts {
        for (dst, src) in losses.iter_mut().zip(rec) {
            dst.extend(src);
        }
        results.push(r);
    }
    Ok((AttackResult::concat(results)?, losses))
}
