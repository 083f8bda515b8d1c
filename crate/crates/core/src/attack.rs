//! The ASK attack (projected sign-gradient ascent on the ASK loss), the
//! cross-entropy PGD used as the defense's first generator, hyperparameter
//! cross-validation, and robust-accuracy evaluation.
//!
//! Every iteration applies the step, clips the perturbation into the
//! l-infinity ball around the clean input, then clips into the unit box, so
//! feasibility holds by construction for every emitted example.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::knn::{dknn_predict, KnnIndex, ReferenceMode, ReferenceSet};
use crate::loss::{ask_loss_grad, AskLossConfig, LayerLossConfig, SForm};
use crate::model::{backward_params, Encoder, SoftmaxHead};
use crate::rng::SeedSplitter;

/// Projection budget for one PGD run. `steps == 0` is the explicit no-op
/// attack: the clean input is returned untouched.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Budget {
    /// l-infinity radius on the [0,1] pixel scale.
    pub epsilon: f64,
    /// Per-iteration step size; must satisfy `0 < step <= epsilon`.
    pub step_size: f64,
    pub steps: usize,
}

impl Budget {
    pub fn new(epsilon: f64, step_size: f64, steps: usize) -> Result<Self> {
        let b = Budget {
            epsilon,
            step_size,
            steps,
        };
        b.validate()?;
        Ok(b)
    }

    /// The default step rule `2.5 * epsilon / steps`, clamped to `epsilon`.
    pub fn with_default_step(epsilon: f64, steps: usize) -> Result<Self> {
        let step = if steps == 0 {
            epsilon
        } else {
            (2.5 * epsilon / steps as f64).min(epsilon)
        };
        Budget::new(epsilon, step, steps)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::rejected(format!(
                "epsilon must lie in (0,1), got {}",
                self.epsilon
            )));
        }
        if !(self.step_size > 0.0 && self.step_size <= self.epsilon) {
            return Err(Error::rejected(format!(
                "step size must lie in (0, epsilon], got {}",
                self.step_size
            )));
        }
        Ok(())
    }
}

/// How the targeted variant picks its class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetSelection {
    Explicit(usize),
    /// The out-class with the highest mean similarity to the clean anchor.
    Nearest,
}

/// All hyperparameters of one ASK-attack run.
#[derive(Debug, Clone)]
pub struct AttackConfig {
    pub budget: Budget,
    pub k_pos: usize,
    pub k_neg: usize,
    pub reference_mode: ReferenceMode,
    pub loss: AskLossConfig,
    pub targeted: Option<TargetSelection>,
    /// Re-select reference sets from the perturbed input every iteration
    /// (ablation path; the default anchors them to the clean input once).
    pub reseed_references: bool,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(budget: Budget, k: usize, loss: AskLossConfig, seed: u64) -> Result<Self> {
        let cfg = AttackConfig {
            budget,
            k_pos: k,
            k_neg: k,
            reference_mode: ReferenceMode::Knn,
            loss,
            targeted: None,
            reseed_references: false,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.budget.validate()?;
        if self.k_pos == 0 || self.k_neg == 0 {
            return Err(Error::rejected("reference counts must be positive"));
        }
        if self.loss.s_form != SForm::Attack {
            return Err(Error::rejected("ask_attack requires the attack-form loss"));
        }
        Ok(())
    }

    pub fn with_epsilon(mut self, epsilon: f64, step_size: f64) -> Self {
        self.budget.epsilon = epsilon;
        self.budget.step_size = step_size;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

fn check_box(x: &[f64]) -> Result<()> {
    if x.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::rejected("input must lie in the unit box"));
    }
    Ok(())
}

fn sign(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One PGD run of the ASK loss against fixed per-layer reference sets.
///
/// Used by the defense generator G2, whose references come from the sampled
/// reference batch rather than from kNN search.
pub(crate) fn pgd_fixed_refs(
    x: &[f64],
    encoder: &Encoder,
    loss_cfg: &AskLossConfig,
    refs: &BTreeMap<usize, ReferenceSet>,
    budget: &Budget,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if budget.steps == 0 {
        return Ok(x.to_vec());
    }
    budget.validate()?;
    let eps = budget.epsilon;
    let mut current: Vec<f64> = x
        .iter()
        .map(|&v| (v + rng.random_range(-eps..=eps)).clamp(0.0, 1.0))
        .collect();
    for _ in 0..budget.steps {
        let (_, grad) = ask_loss_grad(loss_cfg, encoder, &current, refs)?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(
                "ask loss gradient is not finite".into(),
            ));
        }
        for i in 0..current.len() {
            let stepped = current[i] + budget.step_size * sign(grad[i]);
            let delta = (stepped - x[i]).clamp(-eps, eps);
            current[i] = (x[i] + delta).clamp(0.0, 1.0);
        }
    }
    Ok(current)
}

/// Maximizes the weighted ASK loss inside the l-infinity ball around `x`.
///
/// Reference sets are selected once from the clean input (kNN per class by
/// default); `reseed_references` re-selects them from the current iterate
/// every step instead.
pub fn ask_attack(
    x: &[f64],
    y: usize,
    encoder: &Encoder,
    indexes: &BTreeMap<usize, KnnIndex>,
    cfg: &AttackConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_box(x)?;
    if x.len() != encoder.input_dim() {
        return Err(Error::rejected(format!(
            "input has dimension {}, encoder expects {}",
            x.len(),
            encoder.input_dim()
        )));
    }
    for &layer in cfg.loss.layers.keys() {
        if !indexes.contains_key(&layer) {
            return Err(Error::contract(format!(
                "no index supplied for attacked layer {layer}"
            )));
        }
    }
    if cfg.budget.steps == 0 {
        return Ok(x.to_vec());
    }
    let splitter = SeedSplitter::new(cfg.seed);
    let mut rng_refs = splitter.fork("attack.refs");
    let mut rng_init = splitter.fork("attack.init");

    let select = |anchor: &[f64], rng: &mut ChaCha8Rng| -> Result<BTreeMap<usize, ReferenceSet>> {
        let feats = encoder.forward(anchor)?;
        let mut refs = BTreeMap::new();
        for &layer in cfg.loss.layers.keys() {
            let index = &indexes[&layer];
            let feat = feats.get(&layer).ok_or_else(|| {
                Error::contract(format!("encoder does not tap attacked layer {layer}"))
            })?;
            refs.insert(
                layer,
                index.select_reference(feat, y, cfg.k_pos, cfg.k_neg, cfg.reference_mode, rng)?,
            );
        }
        Ok(refs)
    };

    let clean_refs = select(x, &mut rng_refs)?;
    let target = match cfg.targeted {
        None => None,
        Some(TargetSelection::Explicit(t)) => {
            if t == y {
                return Err(Error::rejected(format!(
                    "target class {t} equals the true label"
                )));
            }
            Some(t)
        }
        Some(TargetSelection::Nearest) => Some(nearest_other_class(
            encoder,
            x,
            &cfg.loss,
            &clean_refs,
        )?),
    };
    let loss_cfg = cfg.loss.clone().with_target(target);

    let eps = cfg.budget.epsilon;
    let mut current: Vec<f64> = x
        .iter()
        .map(|&v| (v + rng_init.random_range(-eps..=eps)).clamp(0.0, 1.0))
        .collect();
    let mut refs = clean_refs;
    for _ in 0..cfg.budget.steps {
        let (_, grad) = ask_loss_grad(&loss_cfg, encoder, &current, &refs)?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(
                "ask loss gradient is not finite".into(),
            ));
        }
        for i in 0..current.len() {
            let stepped = current[i] + cfg.budget.step_size * sign(grad[i]);
            let delta = (stepped - x[i]).clamp(-eps, eps);
            current[i] = (x[i] + delta).clamp(0.0, 1.0);
        }
        if cfg.reseed_references {
            refs = select(&current, &mut rng_refs)?;
        }
    }
    Ok(current)
}

/// The out-class whose selected references have the highest weighted mean
/// similarity to the clean anchor (ties break to the lowest class index).
fn nearest_other_class(
    encoder: &Encoder,
    x: &[f64],
    loss: &AskLossConfig,
    refs: &BTreeMap<usize, ReferenceSet>,
) -> Result<usize> {
    let feats = encoder.forward(x)?;
    let mut scores: BTreeMap<usize, f64> = BTreeMap::new();
    for (&layer, lc) in &loss.layers {
        let rs = &refs[&layer];
        let feat = &feats[&layer];
        for (&c, class_refs) in &rs.out_class {
            let mut acc = 0.0;
            for r in class_refs {
                acc += crate::loss::similarity(&lc.similarity, feat, r)?;
            }
            *scores.entry(c).or_insert(0.0) += lc.weight * acc / class_refs.len() as f64;
        }
    }
    scores
        .into_iter()
        .max_by(|a, b| (a.1, std::cmp::Reverse(a.0)).partial_cmp(&(b.1, std::cmp::Reverse(b.0))).unwrap())
        .map(|(c, _)| c)
        .ok_or_else(|| Error::contract("no out-of-class references to pick a target from"))
}

/// Standard cross-entropy PGD inside the same projection scheme.
pub fn ce_pgd_attack(
    x: &[f64],
    y: usize,
    encoder: &Encoder,
    head: &SoftmaxHead,
    budget: &Budget,
    seed: u64,
) -> Result<Vec<f64>> {
    check_box(x)?;
    if y >= head.classes {
        return Err(Error::rejected(format!(
            "label {y} out of range for {} classes",
            head.classes
        )));
    }
    if budget.steps == 0 {
        return Ok(x.to_vec());
    }
    budget.validate()?;
    let mut rng = SeedSplitter::new(seed).fork("attack.init");
    let eps = budget.epsilon;
    let mut current: Vec<f64> = x
        .iter()
        .map(|&v| (v + rng.random_range(-eps..=eps)).clamp(0.0, 1.0))
        .collect();
    for _ in 0..budget.steps {
        let bundle = backward_params(encoder, head, &current, y)?;
        if bundle.grad_input.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(
                "cross-entropy gradient is not finite".into(),
            ));
        }
        for i in 0..current.len() {
            let stepped = current[i] + budget.step_size * sign(bundle.grad_input[i]);
            let delta = (stepped - x[i]).clamp(-eps, eps);
            current[i] = (x[i] + delta).clamp(0.0, 1.0);
        }
    }
    Ok(current)
}

/// Candidate temperatures and layer-weight vectors for cross-validation.
#[derive(Debug, Clone)]
pub struct TuneGrid {
    /// Temperatures applied uniformly to every attacked layer.
    pub taus: Vec<f64>,
    /// Full per-layer weight vectors (each must sum to 1), aligned with the
    /// ascending layer set of the base attack.
    pub omegas: Vec<Vec<f64>>,
}

/// Grid argmin of post-attack DkNN accuracy on a validation batch.
///
/// Candidates are visited in grid order and the first minimum wins, so the
/// result is deterministic for a fixed seed.
pub fn tune_temperature_and_weights(
    batch: &LabeledDataset,
    grid: &TuneGrid,
    encoder: &Encoder,
    indexes: &BTreeMap<usize, KnnIndex>,
    base: &AttackConfig,
    classifier_k: usize,
) -> Result<(BTreeMap<usize, f64>, BTreeMap<usize, f64>)> {
    if batch.len() < 50 {
        return Err(Error::rejected(format!(
            "validation batch has {} rows, need at least 50",
            batch.len()
        )));
    }
    if grid.taus.is_empty() || grid.omegas.is_empty() {
        return Err(Error::contract("tuning grid must not be empty"));
    }
    let layers = base.loss.layer_set();
    for omega in &grid.omegas {
        if omega.len() != layers.len() {
            return Err(Error::contract(format!(
                "weight vector has {} entries for {} layers",
                omega.len(),
                layers.len()
            )));
        }
        let total: f64 = omega.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::rejected("candidate weights must sum to 1"));
        }
    }

    let mut best: Option<(f64, f64, Vec<f64>)> = None;
    for &tau in &grid.taus {
        for omega in &grid.omegas {
            let mut layer_cfgs = BTreeMap::new();
            for (&layer, &w) in layers.iter().zip(omega) {
                let sim = base.loss.layers[&layer].similarity;
                layer_cfgs.insert(
                    layer,
                    LayerLossConfig {
                        weight: w,
                        similarity: crate::loss::SimilarityConfig::new(sim.kind, tau)?,
                    },
                );
            }
            let loss = AskLossConfig::new(base.loss.s_form, layer_cfgs, None)?;
            let cand = AttackConfig {
                loss,
                ..base.clone()
            };
            let acc = attacked_accuracy(batch, encoder, indexes, indexes, &cand, classifier_k)?;
            if best.as_ref().is_none_or(|(b, _, _)| acc < *b) {
                best = Some((acc, tau, omega.clone()));
            }
        }
    }
    let (_, tau, omega) = best.expect("grid is nonempty");
    let taus = layers.iter().map(|&l| (l, tau)).collect();
    let omegas = layers.iter().zip(omega).map(|(&l, w)| (l, w)).collect();
    Ok((taus, omegas))
}

fn attacked_accuracy(
    data: &LabeledDataset,
    encoder: &Encoder,
    attack_indexes: &BTreeMap<usize, KnnIndex>,
    classifier_indexes: &BTreeMap<usize, KnnIndex>,
    cfg: &AttackConfig,
    classifier_k: usize,
) -> Result<f64> {
    let results: Result<Vec<bool>> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let per_example = cfg
                .clone()
                .with_seed(SeedSplitter::new(cfg.seed).child_seed(&format!("example/{i}")));
            let adv = ask_attack(data.row(i), data.label(i), encoder, attack_indexes, &per_example)?;
            let (pred, _) = dknn_predict(&adv, encoder, classifier_indexes, classifier_k)?;
            Ok(pred == data.label(i))
        })
        .collect();
    let hits = results?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

/// Step-size rule for an epsilon sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    Fixed(f64),
    /// `factor * epsilon / steps`.
    Relative(f64),
}

impl StepRule {
    pub fn resolve(&self, epsilon: f64, steps: usize) -> f64 {
        let raw = match self {
            StepRule::Fixed(k) => *k,
            StepRule::Relative(f) => {
                if steps == 0 {
                    epsilon
                } else {
                    f * epsilon / steps as f64
                }
            }
        };
        raw.min(epsilon)
    }
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub base: AttackConfig,
    pub epsilons: Vec<f64>,
    pub step_rule: StepRule,
    pub classifier_k: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct RobustnessRow {
    pub epsilon: f64,
    pub robust_acc: f64,
    /// Single-layer DkNN accuracy per classifier layer.
    pub per_layer_acc: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone)]
pub struct RobustnessReport {
    pub n: usize,
    pub clean_acc: f64,
    pub clean_per_layer: BTreeMap<usize, f64>,
    pub rows: Vec<RobustnessRow>,
}

/// Clean accuracy plus robust accuracy for every epsilon in the sweep.
///
/// `attack_indexes` drive reference selection; `classifier_indexes` drive the
/// DkNN votes, so gray-box layer mismatches are expressible by passing
/// different maps. Examples run on parallel workers and are reduced in input
/// order, so the report does not depend on the worker count.
pub fn evaluate_robust_accuracy(
    subset: &LabeledDataset,
    encoder: &Encoder,
    attack_indexes: &BTreeMap<usize, KnnIndex>,
    classifier_indexes: &BTreeMap<usize, KnnIndex>,
    cfg: &EvalConfig,
) -> Result<RobustnessReport> {
    if subset.is_empty() {
        return Err(Error::rejected("evaluation subset is empty"));
    }
    let layer_list: Vec<usize> = classifier_indexes.keys().copied().collect();
    let single_maps: Vec<BTreeMap<usize, KnnIndex>> = layer_list
        .iter()
        .map(|&l| [(l, classifier_indexes[&l].clone())].into_iter().collect())
        .collect();
    let classify = |x: &[f64], y: usize| -> Result<(bool, Vec<bool>)> {
        let (pred, _) = dknn_predict(x, encoder, classifier_indexes, cfg.classifier_k)?;
        let mut per_layer = Vec::with_capacity(layer_list.len());
        for single in &single_maps {
            let (p, _) = dknn_predict(x, encoder, single, cfg.classifier_k)?;
            per_layer.push(p == y);
        }
        Ok((pred == y, per_layer))
    };

    let clean: Result<Vec<(bool, Vec<bool>)>> = (0..subset.len())
        .into_par_iter()
        .map(|i| classify(subset.row(i), subset.label(i)))
        .collect();
    let clean = clean?;
    let n = subset.len() as f64;
    let clean_acc = clean.iter().filter(|(h, _)| *h).count() as f64 / n;
    let clean_per_layer: BTreeMap<usize, f64> = layer_list
        .iter()
        .enumerate()
        .map(|(j, &l)| {
            (
                l,
                clean.iter().filter(|(_, per)| per[j]).count() as f64 / n,
            )
        })
        .collect();

    let mut rows = Vec::with_capacity(cfg.epsilons.len());
    for &eps in &cfg.epsilons {
        let step = cfg.step_rule.resolve(eps, cfg.base.budget.steps);
        let results: Result<Vec<(bool, Vec<bool>)>> = (0..subset.len())
            .into_par_iter()
            .map(|i| {
                let per_example = cfg
                    .base
                    .clone()
                    .with_epsilon(eps, step)
                    .with_seed(SeedSplitter::new(cfg.seed).child_seed(&format!("example/{i}")));
                let adv = ask_attack(
                    subset.row(i),
                    subset.label(i),
                    encoder,
                    attack_indexes,
                    &per_example,
                )?;
                classify(&adv, subset.label(i))
            })
            .collect();
        let results = results?;
        let robust_acc = results.iter().filter(|(h, _)| *h).count() as f64 / n;
        let per_layer_acc = layer_list
            .iter()
            .enumerate()
            .map(|(j, &l)| {
                (
                    l,
                    results.iter().filter(|(_, per)| per[j]).count() as f64 / n,
                )
            })
            .collect();
        rows.push(RobustnessRow {
            epsilon: eps,
            robust_acc,
            per_layer_acc,
        });
    }
    Ok(RobustnessReport {
        n: subset.len(),
        clean_acc,
        clean_per_layer,
        rows,
    })
}
