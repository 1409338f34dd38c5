//! Evaluation instruments: adversarial accuracy, step × iteration heatmaps,
//! restart-loss histograms and random-subspace loss surfaces.

mod report;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{
    par_chunks, pgd_chunk, pgd_restarts_with, select_target_from, spsa, AttackConfig,
    RestartPolicy, SpsaConfig,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::scalar::Scalar;
use crate::seed::{derive_seed, stream_rng};
use crate::tensor::Tensor;

pub use report::{
    build_report, heatmap_csv, histogram_csv, histogram_metadata, surface_csv, write_text,
    ArtifactRef, EvalReport, HistogramMetadata, ModelInfo, ReportRow,
};

/// Points per forward pass when sweeping surfaces or clean accuracy.
const EVAL_CHUNK: usize = 64;

pub const DEFAULT_SWEEP_STEPS: [f64; 6] = [0.01, 0.02, 0.05, 0.1, 0.2, 0.3];
pub const DEFAULT_SWEEP_ITERS: [usize; 4] = [10, 40, 100, 200];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Attack {
    Pgd(AttackConfig),
    Spsa(SpsaConfig),
}

impl Attack {
    /// Copy with every implicit default spelled out.
    pub fn resolved(&self) -> Self {
        match self {
            Attack::Pgd(c) => Attack::Pgd(c.resolved()),
            Attack::Spsa(c) => Attack::Spsa(*c),
        }
    }

    pub fn epsilon(&self) -> f64 {
        match self {
            Attack::Pgd(c) => c.epsilon,
            Attack::Spsa(c) => c.epsilon,
        }
    }
}

/// Which test points an evaluation uses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSlice {
    pub source: String,
    pub examples: usize,
    pub seed: u64,
}

impl EvalSlice {
    pub fn select<T: Scalar>(&self, dataset: &Dataset<T>) -> Result<Dataset<T>> {
        dataset.random_slice(self.examples, self.seed)
    }
}

/// `ln C`: a true-label cross-entropy above it means `p_true < 1/C`, so some
/// other class is strictly more probable.
pub fn misclassification_threshold(classes: usize) -> f64 {
    (classes as f64).ln()
}

pub fn clean_accuracy<T: Scalar>(model: &Model<T>, data: &Dataset<T>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract("accuracy on an empty slice".into()));
    }
    let x = data.images();
    let preds = par_chunks(data.len(), EVAL_CHUNK, |s, e| model.predict(&x.slice_rows(s, e)?))?;
    let right = preds
        .into_iter()
        .flatten()
        .zip(data.labels())
        .filter(|(p, y)| p == *y)
        .count();
    Ok(right as f64 / data.len() as f64)
}

/// Fraction of the slice still classified as the true label after the
/// attack (targeted attacks included).
pub fn adversarial_accuracy<T: Scalar>(
    model: &Model<T>,
    data: &Dataset<T>,
    attack: &Attack,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract("adversarial accuracy on an empty slice".into()));
    }
    let result = match attack {
        Attack::Pgd(c) => pgd_restarts_with(
            model,
            data.images(),
            data.labels(),
            c,
            RestartPolicy::SkipSucceeded,
        )?,
        Attack::Spsa(c) => spsa(model, data.images(), data.labels(), c)?,
    };
    Ok(result.accuracy(data.labels()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapGrid {
    pub steps: Vec<f64>,
    pub iters: Vec<usize>,
    /// `accuracy[s][n]` for `steps[s]`, `iters[n]`.
    pub accuracy: Vec<Vec<f64>>,
    pub epsilon: f64,
    pub restarts: usize,
    pub base_seed: u64,
    pub eval: Option<EvalSlice>,
}

/// One adversarial accuracy per (step, iters) cell with shared ε, restarts
/// and seed. Axes are sorted ascending and deduplicated.
pub fn grid_sweep<T: Scalar>(
    model: &Model<T>,
    data: &Dataset<T>,
    epsilon: f64,
    steps: &[f64],
    iters: &[usize],
    restarts: usize,
    base_seed: u64,
) -> Result<HeatmapGrid> {
    if steps.is_empty() || iters.is_empty() {
        return Err(Error::Contract("grid sweep needs non-empty axes".into()));
    }
    let mut steps = steps.to_vec();
    steps.sort_by(|a, b| a.total_cmp(b));
    steps.dedup();
    let mut iters = iters.to_vec();
    iters.sort_unstable();
    iters.dedup();
    let mut accuracy = Vec::with_capacity(steps.len());
    for &step in &steps {
        let mut row = Vec::with_capacity(iters.len());
        for &n in &iters {
            let cfg = AttackConfig::new(epsilon, step, n, restarts).with_seed(base_seed);
            row.push(adversarial_accuracy(model, data, &Attack::Pgd(cfg))?);
        }
        accuracy.push(row);
    }
    Ok(HeatmapGrid {
        steps,
        iters,
        accuracy,
        epsilon,
        restarts,
        base_seed,
        eval: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartHistogram {
    pub example: usize,
    pub label: usize,
    /// True-label cross-entropy after every restart, in restart order.
    pub losses: Vec<f64>,
    pub threshold: f64,
    pub config: AttackConfig,
}

impl RestartHistogram {
    pub fn max_loss(&self) -> f64 {
        self.losses.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

fn single_example<T: Scalar>(model: &Model<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut shape = vec![1];
    shape.extend_from_slice(model.input_shape());
    if x.shape() == model.input_shape() || x.shape() == shape.as_slice() {
        x.reshape(&shape)
    } else {
        Err(Error::Dimension(format!(
            "expected one example of shape {:?}, got {:?}",
            model.input_shape(),
            x.shape()
        )))
    }
}

/// Final loss of every restart on one example. Random starts are drawn as
/// for a one-row batch, so the maximum matches [`crate::attacks::pgd_restarts`]
/// on that row.
pub fn restart_histogram<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
    label: usize,
    config: &AttackConfig,
    example: usize,
) -> Result<RestartHistogram> {
    config.validate()?;
    let x = single_example(model, x)?;
    model.check_labels(&[label], 1)?;
    let targets = if config.target_mode.is_targeted() {
        select_target_from(config.target_mode, &model.logits(&x)?, &[label], config.base_seed, 0)?
    } else {
        vec![label]
    };
    let losses = (0..config.restarts)
        .into_par_iter()
        .map(|r| {
            let res = pgd_chunk(model, &x, &[label], &targets, config, r, 0)?;
            Ok(res.final_loss[0].to_f64_lossy())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(RestartHistogram {
        example,
        label,
        losses,
        threshold: misclassification_threshold(model.classes()),
        config: config.resolved(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceSample {
    pub example: usize,
    pub label: usize,
    pub epsilon: f64,
    pub k: usize,
    /// `losses[i + k][j + k]` at `clip(x + (i/k)·ε·u + (j/k)·ε·v)`.
    pub losses: Vec<Vec<f64>>,
    pub seed_u: u64,
    pub seed_v: u64,
}

impl SurfaceSample {
    pub fn center(&self) -> f64 {
        self.losses[self.k][self.k]
    }
}

fn signed_direction<T: Scalar>(len: usize, seed: u64) -> Vec<T> {
    let mut rng = stream_rng(seed, 0);
    (0..len)
        .map(|_| if rng.random::<bool>() { T::one() } else { -T::one() })
        .collect()
}

/// True-label cross-entropy on the `(2k+1)²` lattice spanned by two random
/// signed directions scaled by `epsilon`.
pub fn loss_surface<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
    label: usize,
    epsilon: f64,
    k: usize,
    seed: u64,
    example: usize,
) -> Result<SurfaceSample> {
    if k == 0 {
        return Err(Error::Contract("surface resolution k must be at least 1".into()));
    }
    let x = single_example(model, x)?;
    model.check_labels(&[label], 1)?;
    let (seed_u, seed_v) = (derive_seed(seed, &[0]), derive_seed(seed, &[1]));
    let d = x.len();
    let u = signed_direction::<T>(d, seed_u);
    let v = signed_direction::<T>(d, seed_v);
    let side = 2 * k + 1;
    let (kf, eps) = (k as f64, epsilon);
    let point = |cell: usize| -> Vec<T> {
        let (i, j) = ((cell / side) as f64 - kf, (cell % side) as f64 - kf);
        let (a, b) = (T::from_f64_lossy(i / kf * eps), T::from_f64_lossy(j / kf * eps));
        x.data()
            .iter()
            .zip(&u)
            .zip(&v)
            .map(|((&p, &du), &dv)| (p + a * du + b * dv).max(T::zero()).min(T::one()))
            .collect()
    };
    let c = model.classes();
    let mut shape = vec![0];
    shape.extend_from_slice(model.input_shape());
    let flat = par_chunks(side * side, EVAL_CHUNK, |s, e| {
        let mut data = Vec::with_capacity((e - s) * d);
        for cell in s..e {
            data.extend(point(cell));
        }
        let mut sh = shape.clone();
        sh[0] = e - s;
        let ls = model.logits(&Tensor::new(sh, data)?)?.log_softmax_rows()?;
        Ok(ls
            .data()
            .chunks_exact(c)
            .map(|row| -row[label].to_f64_lossy())
            .collect::<Vec<f64>>())
    })?
    .concat();
    Ok(SurfaceSample {
        example,
        label,
        epsilon,
        k,
        losses: flat.chunks(side).map(<[f64]>::to_vec).collect(),
        seed_u,
        seed_v,
    })
}
