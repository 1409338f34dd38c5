//! Adam optimization loop over the training objectives.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::attacks::{pgd_restarts, AttackConfig};
use crate::autodiff::Graph;
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::nn::{save_checkpoint, LayerSpec, Model, Param, TrainingMetadata};
use crate::objectives::{mean_pair_distance, training_loss, LossSeeds, TrainObjective};
use crate::scalar::Scalar;
use crate::seed::derive_seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moments per parameter, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, params: &[Param<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<T: Scalar>(
    params: &mut [Param<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam step over {} params with {} grads and {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.value.shape() != g.shape() || p.value.shape() != m.shape() {
            return Err(Error::Contract(format!(
                "parameter {} has shape {:?}, gradient {:?}, moment {:?}",
                p.name,
                p.value.shape(),
                g.shape(),
                m.shape()
            )));
        }
    }
    state.t += 1;
    let c = state.config;
    let t = state.t as i32;
    let lit = T::from_f64_lossy;
    let (b1, b2) = (lit(c.beta1), lit(c.beta2));
    let (one_b1, one_b2) = (lit(1.0 - c.beta1), lit(1.0 - c.beta2));
    let corr1 = lit(1.0 - c.beta1.powi(t));
    let corr2 = lit(1.0 - c.beta2.powi(t));
    let (lr, eps) = (lit(c.learning_rate), lit(c.epsilon));
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let (pd, md, vd) = (p.value.data_mut(), m.data_mut(), v.data_mut());
        for (((pi, &gi), mi), vi) in pd.iter_mut().zip(g.data()).zip(md).zip(vd) {
            *mi = b1 * *mi + one_b1 * gi;
            *vi = b2 * *vi + one_b2 * gi * gi;
            let m_hat = *mi / corr1;
            let v_hat = *vi / corr2;
            *pi -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrainSeeds {
    pub init: u64,
    pub shuffle: u64,
    pub noise: u64,
    pub attack: u64,
}

impl TrainSeeds {
    pub fn from_base(base: u64) -> Self {
        Self {
            init: derive_seed(base, &[0]),
            shuffle: derive_seed(base, &[1]),
            noise: derive_seed(base, &[2]),
            attack: derive_seed(base, &[3]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub objective: TrainObjective,
    pub epochs: usize,
    pub batch_size: usize,
    pub seeds: TrainSeeds,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Write `epoch_NNNN.arlb` into `checkpoint_dir` every this many epochs.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Examples of the evaluation set scored each epoch (all when `None`).
    #[serde(default)]
    pub eval_examples: Option<usize>,
    /// Attack for the per-epoch quick robustness check.
    #[serde(default)]
    pub quick_pgd: Option<AttackConfig>,
    /// Size of the fixed probe batch for the clean/adversarial logit distance.
    #[serde(default)]
    pub probe_examples: Option<usize>,
}

impl TrainRun {
    pub fn new(objective: TrainObjective, epochs: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            objective,
            epochs,
            batch_size,
            seeds: TrainSeeds::from_base(seed),
            adam: AdamConfig::default(),
            checkpoint_every: None,
            checkpoint_dir: None,
            eval_examples: None,
            quick_pgd: None,
            probe_examples: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        if self.epochs == 0 {
            return Err(Error::Contract("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Contract("batch size must be at least 1".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Contract("checkpoint cadence must be at least 1".into()));
        }
        if self.checkpoint_every.is_some() && self.checkpoint_dir.is_none() {
            return Err(Error::Contract("checkpoint cadence set without a directory".into()));
        }
        if let Some(a) = &self.quick_pgd {
            a.validate()?;
        }
        Ok(())
    }

    /// A freshly initialized model from the run's init seed.
    pub fn init_model<T: Scalar>(
        &self,
        layers: Vec<LayerSpec>,
        input_shape: &[usize],
        classes: usize,
    ) -> Result<Model<T>> {
        Model::init(layers, input_shape, classes, self.seeds.init)
    }

    /// Checkpoint metadata describing this run.
    pub fn metadata(&self) -> TrainingMetadata {
        let mut extra = std::collections::BTreeMap::new();
        let mut put = |k: &str, v: serde_json::Value| {
            extra.insert(k.to_string(), v);
        };
        put("optimizer", serde_json::json!({"adam": self.adam}));
        put("batch_size", self.batch_size.into());
        put("seeds", serde_json::to_value(self.seeds).expect("seeds serialize"));
        if let Some(a) = &self.objective.inner_attack {
            put("inner_attack", serde_json::to_value(a.resolved()).expect("attack serializes"));
        }
        TrainingMetadata {
            objective: self.objective.kind.name().to_string(),
            lambda: self.objective.lambda,
            noise_sigma: self.objective.noise_sigma,
            adv_fraction: self.objective.adv_fraction,
            epochs: self.epochs,
            seed: self.seeds.init,
            extra,
        }
    }
}

/// One JSON-lines record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub clean_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quick_pgd_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_pair_distance: Option<f64>,
}

pub fn metrics_jsonl(metrics: &[EpochMetrics]) -> String {
    metrics
        .iter()
        .map(|m| serde_json::to_string(m).expect("metrics serialize") + "\n")
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub metrics: Vec<EpochMetrics>,
}

pub fn train<T: Scalar>(
    model: Model<T>,
    data: &Dataset<T>,
    run: &TrainRun,
) -> Result<TrainOutcome<T>> {
    train_with(model, data, None, run, |_| Ok(()))
}

/// Trains on `data`, scoring each epoch on `eval` (or `data` when absent) and
/// handing every record to `on_epoch` as soon as it exists.
pub fn train_with<T: Scalar>(
    mut model: Model<T>,
    data: &Dataset<T>,
    eval: Option<&Dataset<T>>,
    run: &TrainRun,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    run.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let eval = eval.unwrap_or(data);
    let eval = match run.eval_examples {
        Some(n) if n < eval.len() => eval.take(n)?,
        _ => eval.clone(),
    };
    let probe = match run.probe_examples {
        Some(n) if n > 0 => Some(data.take(n.min(data.len()))?),
        _ => None,
    };
    let probe_attack = run
        .objective
        .inner_attack
        .or(run.quick_pgd)
        .map(|a| a.with_seed(derive_seed(run.seeds.attack, &[u64::MAX])));

    let mut state = AdamState::new(run.adam, model.params());
    let mut metrics = Vec::with_capacity(run.epochs);
    for epoch in 1..=run.epochs {
        let e = epoch as u64;
        let mut loss_sum = 0.0;
        let mut rows = 0usize;
        for (bi, batch) in batches(data, run.batch_size, derive_seed(run.seeds.shuffle, &[e]))?.enumerate() {
            let b = bi as u64;
            let seeds = LossSeeds {
                noise: derive_seed(run.seeds.noise, &[e, b]),
                attack: derive_seed(run.seeds.attack, &[e, b]),
                pairing: derive_seed(run.seeds.shuffle, &[e, b]),
            };
            let mut g = Graph::new();
            let vars = model.bind(&mut g, true);
            let terms = training_loss(&model, &mut g, &vars, &batch.images, &batch.labels, &run.objective, seeds)?;
            let loss = g.value(terms.loss).data()[0].to_f64_lossy();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            let mut grads = g.backward(terms.loss)?;
            let grads: Vec<Tensor<T>> = vars
                .iter()
                .zip(model.params())
                .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
                .collect();
            adam_step(model.params_mut(), &grads, &mut state)?;
            loss_sum += loss * batch.labels.len() as f64;
            rows += batch.labels.len();
        }

        let clean_accuracy = crate::harness::clean_accuracy(&model, &eval)?;
        let quick_pgd_accuracy = match &run.quick_pgd {
            Some(a) => {
                let cfg = a.with_seed(derive_seed(run.seeds.attack, &[e, u64::MAX]));
                Some(pgd_restarts(&model, eval.images(), eval.labels(), &cfg)?.accuracy(eval.labels()))
            }
            None => None,
        };
        let probe_pair_distance = match (&probe, &probe_attack) {
            (Some(p), Some(a)) => {
                let adv = pgd_restarts(&model, p.images(), p.labels(), a)?.x_adv;
                Some(mean_pair_distance(&model.logits(p.images())?, &model.logits(&adv)?)?)
            }
            _ => None,
        };
        let record = EpochMetrics {
            epoch,
            mean_loss: loss_sum / rows as f64,
            clean_accuracy,
            quick_pgd_accuracy,
            probe_pair_distance,
        };
        on_epoch(&record)?;
        metrics.push(record);

        if let (Some(every), Some(dir)) = (run.checkpoint_every, &run.checkpoint_dir) {
            if epoch % every == 0 {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                save_checkpoint(&model, &run.metadata(), dir.join(format!("epoch_{epoch:04}.arlb")))?;
            }
        }
    }
    Ok(TrainOutcome { model, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthSpec};
    use crate::nn::{encode_checkpoint, mlp_layers};

    fn scalar_param(v: f64) -> Vec<Param<f64>> {
        vec![Param {
            name: "p".into(),
            value: Tensor::from_f64(vec![1], &[v]).unwrap(),
        }]
    }

    fn grad(v: f64) -> Vec<Tensor<f64>> {
        vec![Tensor::from_f64(vec![1], &[v]).unwrap()]
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar_param(1.0);
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        };
        let mut s = AdamState::new(cfg, &p);
        adam_step(&mut p, &grad(1.0), &mut s).unwrap();
        let expect = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p[0].value.data()[0] - expect).abs() < 1e-12);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = scalar_param(0.37);
        let mut s = AdamState::new(AdamConfig::default(), &p);
        for _ in 0..3 {
            adam_step(&mut p, &grad(0.0), &mut s).unwrap();
        }
        assert_eq!(p[0].value.data()[0], 0.37);
    }

    #[test]
    fn two_steps_descend_a_parabola() {
        let mut p = scalar_param(1.0);
        let mut s = AdamState::new(AdamConfig::default(), &p);
        let mut f = 1.0;
        for _ in 0..2 {
            let x = p[0].value.data()[0];
            adam_step(&mut p, &grad(2.0 * x), &mut s).unwrap();
            let y = p[0].value.data()[0];
            assert!(y * y < f);
            f = y * y;
        }
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let mut p = scalar_param(1.0);
        let mut s = AdamState::new(AdamConfig::default(), &p);
        let g = vec![Tensor::<f64>::zeros(&[2])];
        assert!(matches!(adam_step(&mut p, &g, &mut s), Err(Error::Contract(_))));
    }

    fn synth() -> Dataset<f32> {
        synth_dataset(SynthSpec {
            classes: 4,
            per_class: 60,
            side: 8,
            seed: 3,
        })
        .unwrap()
    }

    fn plain_run() -> TrainRun {
        TrainRun::new(TrainObjective::plain(), 3, 20, 11)
    }

    #[test]
    fn plain_training_separates_synthetic_blobs() {
        let d = synth();
        let run = plain_run();
        let m = run.init_model(mlp_layers(4), &[1, 8, 8], 4).unwrap();
        let out = train(m, &d, &run).unwrap();
        assert_eq!(out.metrics.len(), 3);
        assert!(out.metrics.iter().all(|r| r.mean_loss.is_finite()));
        let acc = out.metrics.last().unwrap().clean_accuracy;
        assert!(acc > 0.95, "clean accuracy {acc}");
    }

    #[test]
    fn identical_seeds_give_identical_checkpoints() {
        let d = synth();
        let mut run = plain_run();
        run.epochs = 1;
        let bytes = || {
            let m = run.init_model(mlp_layers(4), &[1, 8, 8], 4).unwrap();
            encode_checkpoint(&train(m, &d, &run).unwrap().model, &run.metadata()).unwrap()
        };
        assert_eq!(bytes(), bytes());
    }

    #[test]
    fn empty_and_invalid_runs_rejected() {
        let d = synth();
        let m = plain_run().init_model::<f32>(mlp_layers(4), &[1, 8, 8], 4).unwrap();
        let mut run = plain_run();
        run.epochs = 0;
        assert!(train(m.clone(), &d, &run).is_err());
        let mut run = plain_run();
        run.checkpoint_every = Some(1);
        assert!(train(m, &d, &run).is_err());
    }

    #[test]
    fn diverging_run_reports_coordinates() {
        let d = synth();
        let mut run = plain_run();
        run.adam.learning_rate = 1e30;
        let m = run.init_model::<f32>(mlp_layers(4), &[1, 8, 8], 4).unwrap();
        match train(m, &d, &run) {
            Err(Error::NonFiniteLoss { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected a non-finite loss, got {:?}", other.map(|o| o.metrics)),
        }
    }

    #[test]
    fn cadence_writes_checkpoints_and_metrics_stream() {
        let d = synth();
        let dir = tempfile::tempdir().unwrap();
        let mut run = plain_run();
        run.epochs = 2;
        run.checkpoint_every = Some(1);
        run.checkpoint_dir = Some(dir.path().to_path_buf());
        run.quick_pgd = Some(AttackConfig::new(0.1, 0.05, 3, 1));
        run.probe_examples = Some(8);
        let m = run.init_model::<f32>(mlp_layers(4), &[1, 8, 8], 4).unwrap();
        let mut seen = 0;
        let out = train_with(m, &d, None, &run, |_| {
            seen += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, 2);
        assert!(dir.path().join("epoch_0001.arlb").exists());
        assert!(dir.path().join("epoch_0002.arlb").exists());
        let text = metrics_jsonl(&out.metrics);
        let back: Vec<EpochMetrics> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(back, out.metrics);
        assert!(back.iter().all(|r| r.quick_pgd_accuracy.is_some() && r.probe_pair_distance.is_some()));
    }
}
