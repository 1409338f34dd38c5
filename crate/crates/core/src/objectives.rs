//! Training losses: cross-entropy, logit squeezing (LSQ), clean logit
//! pairing (CLP), adversarial logit pairing (ALP) and mixed-minibatch
//! adversarial training.
//!
//! Penalty forms:
//!
//! | kind | penalty                                   |
//! |------|-------------------------------------------|
//! | lsq  | `λ · (1/B) Σ_b ‖z_b‖²`                    |
//! | clp  | `λ · (1/P) Σ_p ‖z_a,p − z_b,p‖²`          |
//! | alp  | `λ · (1/B) Σ_b ‖z_clean,b − z_adv,b‖²`    |
//!
//! CLP pairs row `p` with row `p + P` after shuffling the batch with the
//! pairing seed. In the 50% regime the cross-entropy is the mean of the
//! clean-half and adversarial-half cross-entropies.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd_restarts, AttackConfig};
use crate::autodiff::{Graph, Var};
use crate::data::{gaussian_augment, AugmentConfig};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::scalar::{lit, shape_str, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    #[default]
    Plain,
    Clp,
    Lsq,
    Alp,
}

impl ObjectiveKind {
    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Plain => "plain",
            ObjectiveKind::Clp => "clp",
            ObjectiveKind::Lsq => "lsq",
            ObjectiveKind::Alp => "alp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainObjective {
    pub kind: ObjectiveKind,
    #[serde(default)]
    pub lambda: f64,
    /// 0, 0.5 or 1.
    #[serde(default)]
    pub adv_fraction: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub inner_attack: Option<AttackConfig>,
}

impl Default for TrainObjective {
    fn default() -> Self {
        Self::plain()
    }
}

impl TrainObjective {
    pub fn plain() -> Self {
        Self {
            kind: ObjectiveKind::Plain,
            lambda: 0.0,
            adv_fraction: 0.0,
            noise_sigma: 0.0,
            inner_attack: None,
        }
    }

    pub fn lsq(lambda: f64, noise_sigma: f64) -> Self {
        Self {
            kind: ObjectiveKind::Lsq,
            lambda,
            noise_sigma,
            ..Self::plain()
        }
    }

    pub fn clp(lambda: f64, noise_sigma: f64) -> Self {
        Self {
            kind: ObjectiveKind::Clp,
            lambda,
            noise_sigma,
            ..Self::plain()
        }
    }

    pub fn alp(lambda: f64, adv_fraction: f64, inner_attack: AttackConfig) -> Self {
        Self {
            kind: ObjectiveKind::Alp,
            lambda,
            adv_fraction,
            inner_attack: Some(inner_attack),
            ..Self::plain()
        }
    }

    /// Plain CE on a mix of clean and PGD examples.
    pub fn adversarial(adv_fraction: f64, inner_attack: AttackConfig) -> Self {
        Self {
            adv_fraction,
            inner_attack: Some(inner_attack),
            ..Self::plain()
        }
    }

    /// Training-time PGD: step 0.01, 40 iterations, one restart.
    pub fn inner_attack_for(epsilon: f64) -> AttackConfig {
        AttackConfig::new(epsilon, 0.01, 40, 1)
    }

    pub fn needs_attack(&self) -> bool {
        self.adv_fraction > 0.0 || self.kind == ObjectiveKind::Alp
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Contract(format!("lambda must be ≥ 0, got {}", self.lambda)));
        }
        if ![0.0, 0.5, 1.0].contains(&self.adv_fraction) {
            return Err(Error::Contract(format!(
                "adv_fraction must be 0, 0.5 or 1, got {}",
                self.adv_fraction
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Contract(format!(
                "noise_sigma must be ≥ 0, got {}",
                self.noise_sigma
            )));
        }
        match (&self.inner_attack, self.needs_attack()) {
            (None, true) => Err(Error::Contract(format!(
                "{} with adv_fraction {} requires an inner attack",
                self.kind.name(),
                self.adv_fraction
            ))),
            (Some(a), _) => a.validate(),
            (None, false) => Ok(()),
        }
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda >= 0.0 {
        Ok(())
    } else {
        Err(Error::Contract(format!("lambda must be ≥ 0, got {lambda}")))
    }
}

// ---- graph-level terms ----

/// Mean over rows of `−log softmax(z)[label]`.
pub fn ce_loss_node<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let ls = g.log_softmax(logits)?;
    let picked = g.pick_columns(ls, labels)?;
    let mean = g.mean_all(picked)?;
    Ok(g.scale(mean, -T::one()))
}

fn sum_sq_node<T: Scalar>(g: &mut Graph<T>, a: Var) -> Result<Var> {
    let sq = g.mul(a, a)?;
    g.sum_all(sq)
}

fn rows<T: Scalar>(g: &Graph<T>, v: Var) -> usize {
    g.value(v).shape().first().copied().unwrap_or(1)
}

pub fn lsq_penalty_node<T: Scalar>(g: &mut Graph<T>, logits: Var, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    let b = rows(g, logits);
    let s = sum_sq_node(g, logits)?;
    Ok(g.scale(s, lit::<T>(lambda) / lit::<T>(b as f64)))
}

/// `λ · (1/P) Σ_p ‖a_p − b_p‖²`; shared by CLP and ALP.
pub fn pair_penalty_node<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    let (sa, sb) = (g.value(a).shape(), g.value(b).shape());
    if sa != sb {
        return Err(Error::Dimension(format!(
            "logit pair shapes differ: {} vs {}",
            shape_str(sa),
            shape_str(sb)
        )));
    }
    let p = rows(g, a);
    let d = g.sub(a, b)?;
    let s = sum_sq_node(g, d)?;
    Ok(g.scale(s, lit::<T>(lambda) / lit::<T>(p as f64)))
}

// ---- value-level terms ----

fn eval<T: Scalar>(build: impl FnOnce(&mut Graph<T>) -> Result<Var>) -> Result<T> {
    let mut g = Graph::new();
    let out = build(&mut g)?;
    g.value(out).item()
}

pub fn ce_loss<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    eval(|g| {
        let z = g.constant(logits.clone());
        ce_loss_node(g, z, labels)
    })
}

pub fn lsq_penalty<T: Scalar>(logits: &Tensor<T>, lambda: f64) -> Result<T> {
    eval(|g| {
        let z = g.constant(logits.clone());
        lsq_penalty_node(g, z, lambda)
    })
}

pub fn clp_penalty<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, lambda: f64) -> Result<T> {
    eval(|g| {
        let (a, b) = (g.constant(a.clone()), g.constant(b.clone()));
        pair_penalty_node(g, a, b, lambda)
    })
}

pub fn alp_penalty<T: Scalar>(clean: &Tensor<T>, adv: &Tensor<T>, lambda: f64) -> Result<T> {
    clp_penalty(clean, adv, lambda)
}

/// Mean over rows of `‖a_b − b_b‖₂`.
pub fn mean_pair_distance<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() || a.rank() != 2 {
        return Err(Error::Dimension(format!(
            "pair distance needs equal B×C tensors, got {} and {}",
            shape_str(a.shape()),
            shape_str(b.shape())
        )));
    }
    let c = a.shape()[1];
    let total: f64 = a
        .data()
        .chunks_exact(c)
        .zip(b.data().chunks_exact(c))
        .map(|(ra, rb)| {
            ra.iter()
                .zip(rb)
                .map(|(&x, &y)| (x - y).to_f64_lossy().powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / a.shape()[0] as f64)
}

// ---- assembly ----

/// Seeds for the random parts of one batch's loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LossSeeds {
    pub noise: u64,
    pub attack: u64,
    pub pairing: u64,
}

/// A batch after augmentation and (detached) adversarial crafting.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedBatch<T> {
    /// Augmented clean images (shuffled for CLP).
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    /// PGD images for rows `adv_start..B`.
    pub adversarial: Option<Tensor<T>>,
    pub adv_start: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub loss: Var,
    pub ce: Var,
    pub penalty: Option<Var>,
}

/// Augments, shuffles (CLP) and crafts adversarial rows with the current
/// parameters. The returned tensors carry no graph history.
pub fn prepare_batch<T: Scalar>(
    model: &Model<T>,
    images: &Tensor<T>,
    labels: &[usize],
    objective: &TrainObjective,
    seeds: LossSeeds,
) -> Result<PreparedBatch<T>> {
    objective.validate()?;
    let b = model.check_batch(images)?;
    model.check_labels(labels, b)?;
    let (mut images, mut labels) = (images.clone(), labels.to_vec());
    if objective.kind == ObjectiveKind::Clp {
        let mut order: Vec<usize> = (0..b).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seeds.pairing));
        images = images.select_rows(&order)?;
        labels = order.iter().map(|&i| labels[i]).collect();
    }
    let images = gaussian_augment(
        &images,
        AugmentConfig {
            sigma: objective.noise_sigma,
            seed: seeds.noise,
        },
    );
    let adv_start = if objective.adv_fraction == 1.0 {
        0
    } else if objective.adv_fraction == 0.5 {
        b - b / 2
    } else if objective.kind == ObjectiveKind::Alp {
        0
    } else {
        b
    };
    let adversarial = match objective.inner_attack {
        Some(attack) if adv_start < b => {
            let x = images.slice_rows(adv_start, b)?;
            let cfg = attack.with_seed(seeds.attack);
            Some(pgd_restarts(model, &x, &labels[adv_start..], &cfg)?.x_adv)
        }
        _ => None,
    };
    Ok(PreparedBatch {
        images,
        labels,
        adversarial,
        adv_start,
    })
}

/// Builds the differentiable loss for a prepared batch on `g`, with the
/// model's parameters bound at `params`.
pub fn assemble_loss<T: Scalar>(
    model: &Model<T>,
    g: &mut Graph<T>,
    params: &[Var],
    batch: &PreparedBatch<T>,
    objective: &TrainObjective,
) -> Result<LossTerms> {
    let b = batch.labels.len();
    let s = batch.adv_start;
    let adv = batch.adversarial.as_ref();
    // Clean CE rows: all rows without AT, the leading rows for 50%, none for 100%.
    let clean_end = if objective.adv_fraction == 0.0 { b } else { s };
    let n_adv = adv.map_or(0, |_| b - s);
    let alp = objective.kind == ObjectiveKind::Alp;
    // Clean copies of the attacked rows, when they are not already present.
    let extra_clean = alp && objective.adv_fraction > 0.0;

    let mut parts = Vec::new();
    if clean_end > 0 {
        parts.push(batch.images.slice_rows(0, clean_end)?);
    }
    if let Some(a) = adv {
        parts.push(a.clone());
    }
    if extra_clean {
        parts.push(batch.images.slice_rows(s, b)?);
    }
    let x = g.constant(Tensor::concat_rows(&parts)?);
    let z = model.forward(g, params, x)?;

    let adv_rows = clean_end..clean_end + n_adv;
    let ce = match (objective.adv_fraction, clean_end > 0, n_adv > 0) {
        (f, _, true) if f > 0.0 => {
            let za = g.slice_rows(z, adv_rows.start, adv_rows.end)?;
            let ce_adv = ce_loss_node(g, za, &batch.labels[s..])?;
            if clean_end > 0 {
                let zc = g.slice_rows(z, 0, clean_end)?;
                let ce_clean = ce_loss_node(g, zc, &batch.labels[..clean_end])?;
                let sum = g.add(ce_clean, ce_adv)?;
                g.scale(sum, lit(0.5))
            } else {
                ce_adv
            }
        }
        _ => {
            let zc = g.slice_rows(z, 0, clean_end)?;
            ce_loss_node(g, zc, &batch.labels[..clean_end])?
        }
    };
    let ce_rows = if objective.adv_fraction > 0.0 {
        clean_end + n_adv
    } else {
        clean_end
    };

    let penalty = match objective.kind {
        ObjectiveKind::Plain => None,
        ObjectiveKind::Lsq => {
            let zc = g.slice_rows(z, 0, ce_rows)?;
            Some(lsq_penalty_node(g, zc, objective.lambda)?)
        }
        ObjectiveKind::Clp => {
            let p = ce_rows / 2;
            if p == 0 {
                None
            } else {
                let za = g.slice_rows(z, 0, p)?;
                let zb = g.slice_rows(z, p, 2 * p)?;
                Some(pair_penalty_node(g, za, zb, objective.lambda)?)
            }
        }
        ObjectiveKind::Alp => {
            if n_adv == 0 {
                None
            } else {
                let za = g.slice_rows(z, adv_rows.start, adv_rows.end)?;
                let zc = if extra_clean {
                    let start = adv_rows.end;
                    g.slice_rows(z, start, start + n_adv)?
                } else {
                    g.slice_rows(z, 0, clean_end)?
                };
                Some(pair_penalty_node(g, zc, za, objective.lambda)?)
            }
        }
    };
    let loss = match penalty {
        Some(p) => g.add(ce, p)?,
        None => ce,
    };
    Ok(LossTerms { loss, ce, penalty })
}

/// [`prepare_batch`] followed by [`assemble_loss`].
pub fn training_loss<T: Scalar>(
    model: &Model<T>,
    g: &mut Graph<T>,
    params: &[Var],
    images: &Tensor<T>,
    labels: &[usize],
    objective: &TrainObjective,
    seeds: LossSeeds,
) -> Result<LossTerms> {
    let batch = prepare_batch(model, images, labels, objective, seeds)?;
    assemble_loss(model, g, params, &batch, objective)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::nn::mlp_layers_with_hidden;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn ce_closed_forms() {
        let z = Tensor::<f64>::zeros(&[1, 10]);
        assert!(close(ce_loss(&z, &[3]).unwrap(), std::f64::consts::LN_10, 1e-6));
        let mut big = vec![0.0; 10];
        big[4] = 1000.0;
        let z = Tensor::from_f64(vec![1, 10], &big).unwrap();
        assert!(ce_loss::<f64>(&z, &[4]).unwrap() < 1e-12);
        let z = Tensor::<f64>::from_f64(vec![1, 2], &[1.0, 0.0]).unwrap();
        assert!(close(ce_loss(&z, &[0]).unwrap(), 0.3133, 1e-4));
        assert!(matches!(ce_loss(&z, &[2]), Err(Error::Contract(_))));
    }

    #[test]
    fn penalty_closed_forms() {
        let z = Tensor::<f64>::from_f64(vec![1, 2], &[3.0, 4.0]).unwrap();
        assert!(close(lsq_penalty(&z, 0.1).unwrap(), 2.5, 1e-12));
        assert_eq!(lsq_penalty(&Tensor::<f64>::zeros(&[3, 4]), 1.0).unwrap(), 0.0);
        let z2 = z.scale(2.0);
        assert!(close(
            lsq_penalty(&z2, 0.1).unwrap(),
            4.0 * lsq_penalty(&z, 0.1).unwrap(),
            1e-12
        ));
        let a = Tensor::<f64>::from_f64(vec![1, 2], &[1.0, 0.0]).unwrap();
        let b = Tensor::<f64>::from_f64(vec![1, 2], &[0.0, 1.0]).unwrap();
        assert!(close(clp_penalty(&a, &b, 0.5).unwrap(), 1.0, 1e-12));
        assert_eq!(clp_penalty(&a, &b, 0.5).unwrap(), clp_penalty(&b, &a, 0.5).unwrap());
        assert_eq!(clp_penalty(&a, &a, 0.5).unwrap(), 0.0);
        let unit = Tensor::<f64>::from_f64(vec![1, 2], &[1.0, 1.0]).unwrap();
        assert!(close(alp_penalty(&a, &unit, 1.0).unwrap(), 1.0, 1e-12));
        let wide = Tensor::<f64>::zeros(&[2, 2]);
        assert!(matches!(clp_penalty(&a, &wide, 1.0), Err(Error::Dimension(_))));
        assert!(matches!(lsq_penalty(&a, -1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn penalties_linear_in_lambda() {
        let a = Tensor::<f64>::from_fn(&[4, 3], |i| (i as f64 * 0.37).sin());
        let b = Tensor::<f64>::from_fn(&[4, 3], |i| (i as f64 * 0.11).cos());
        for lam in [0.0, 0.25, 1.0, 3.0] {
            assert!(close(
                clp_penalty(&a, &b, lam).unwrap(),
                lam * clp_penalty(&a, &b, 1.0).unwrap(),
                1e-12
            ));
            assert!(close(
                lsq_penalty(&a, lam).unwrap(),
                lam * lsq_penalty(&a, 1.0).unwrap(),
                1e-12
            ));
        }
    }

    #[test]
    fn pair_penalty_gradient_reaches_both_arguments() {
        let z = Tensor::<f64>::from_fn(&[6, 3], |i| (i as f64 * 0.7).sin());
        let r = finite_diff_check(
            |g, z| {
                let a = g.slice_rows(z, 0, 3)?;
                let b = g.slice_rows(z, 3, 6)?;
                let p = pair_penalty_node(g, a, b, 1.0)?;
                let ce = ce_loss_node(g, z, &[0, 1, 2, 0, 1, 2])?;
                g.add(p, ce)
            },
            &z,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.checked, 18);
    }

    fn small_model() -> Model<f64> {
        Model::init(mlp_layers_with_hidden(5, 3), &[1, 2, 2], 3, 4).unwrap()
    }

    fn batch(n: usize) -> (Tensor<f64>, Vec<usize>) {
        let x = Tensor::from_fn(&[n, 1, 2, 2], |i| ((i * 7) % 11) as f64 / 10.0);
        (x, (0..n).map(|i| i % 3).collect())
    }

    fn loss_value(m: &Model<f64>, x: &Tensor<f64>, y: &[usize], obj: &TrainObjective) -> f64 {
        let mut g = Graph::new();
        let p = m.bind(&mut g, true);
        let t = training_loss(m, &mut g, &p, x, y, obj, LossSeeds::default()).unwrap();
        g.value(t.loss).item().unwrap()
    }

    #[test]
    fn degenerate_configs() {
        let m = small_model();
        let (x, y) = batch(6);
        let ce = ce_loss(&m.logits(&x).unwrap(), &y).unwrap();
        assert_eq!(loss_value(&m, &x, &y, &TrainObjective::plain()), ce);
        assert_eq!(loss_value(&m, &x, &y, &TrainObjective::lsq(0.0, 0.0)), ce);
        let alp = TrainObjective::alp(1.0, 0.0, AttackConfig::new(0.0, 0.01, 3, 1));
        assert_eq!(loss_value(&m, &x, &y, &alp), ce);
    }

    #[test]
    fn objective_validation() {
        assert!(TrainObjective::plain().validate().is_ok());
        let mut o = TrainObjective::plain();
        o.adv_fraction = 0.3;
        assert!(o.validate().is_err());
        o.adv_fraction = 0.5;
        assert!(o.validate().is_err());
        o.kind = ObjectiveKind::Alp;
        o.adv_fraction = 0.0;
        assert!(o.validate().is_err());
        assert!(TrainObjective::lsq(-0.1, 0.0).validate().is_err());
    }

    #[test]
    fn crafting_is_detached() {
        let m = small_model();
        let (x, y) = batch(6);
        let attack = AttackConfig::new(0.3, 0.05, 5, 1);
        let obj = TrainObjective::adversarial(1.0, attack);
        let seeds = LossSeeds { attack: 3, ..Default::default() };

        let mut g = Graph::new();
        let p = m.bind(&mut g, true);
        let t = training_loss(&m, &mut g, &p, &x, &y, &obj, seeds).unwrap();
        let grads = g.backward(t.loss).unwrap();

        // Same crafted inputs, entered as plain constants against a frozen copy.
        let frozen = m.clone();
        let x_adv = pgd_restarts(&frozen, &x, &y, &attack.with_seed(3)).unwrap().x_adv;
        let mut g2 = Graph::new();
        let p2 = m.bind(&mut g2, true);
        let xa = g2.constant(x_adv);
        let z = m.forward(&mut g2, &p2, xa).unwrap();
        let ce = ce_loss_node(&mut g2, z, &y).unwrap();
        let grads2 = g2.backward(ce).unwrap();
        for (a, b) in p.iter().zip(&p2) {
            assert_eq!(grads.wrt(*a).unwrap(), grads2.wrt(*b).unwrap());
        }
    }

    #[test]
    fn half_regime_averages_halves() {
        let m = small_model();
        let (x, y) = batch(6);
        let attack = AttackConfig::new(0.2, 0.05, 3, 1);
        let obj = TrainObjective::adversarial(0.5, attack);
        let got = loss_value(&m, &x, &y, &obj);
        let adv = pgd_restarts(&m, &x.slice_rows(3, 6).unwrap(), &y[3..], &attack).unwrap();
        let clean = ce_loss(&m.logits(&x.slice_rows(0, 3).unwrap()).unwrap(), &y[..3]).unwrap();
        let advl = ce_loss(&m.logits(&adv.x_adv).unwrap(), &y[3..]).unwrap();
        assert!(close(got, 0.5 * (clean + advl), 1e-12));
    }

    #[test]
    fn gradient_additivity() {
        let m = small_model();
        let (x, y) = batch(4);
        for obj in [
            TrainObjective::lsq(0.5, 0.0),
            TrainObjective::clp(0.5, 0.0),
            TrainObjective::alp(1.0, 0.5, AttackConfig::new(0.1, 0.05, 2, 1)),
        ] {
            let prep = prepare_batch(&m, &x, &y, &obj, LossSeeds::default()).unwrap();
            let w = m.params()[0].value.clone();
            let r = finite_diff_check(
                |g, leaf| {
                    let mut ps = m.bind(g, false);
                    ps[0] = leaf;
                    let t = assemble_loss(&m, g, &ps, &prep, &obj)?;
                    Ok(t.loss)
                },
                &w,
                1e-6,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-6, "{:?} {r:?}", obj.kind);
        }
    }
}
