//! Minimax defense training: a cross-entropy generator (G1) hardens the
//! softmax head while an ASK-loss generator (G2) hardens the tapped feature
//! layers, mixed by the penalty `lambda`. `lambda = 0` reduces the update to
//! conventional adversarial training exactly.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::attack::{ce_pgd_attack, pgd_fixed_refs, Budget};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::knn::ReferenceSet;
use crate::loss::{ask_param_grad_batch, AskLossConfig, SForm};
use crate::model::{backward_params, Encoder, SoftmaxHead};
use crate::rng::SeedSplitter;

/// All hyperparameters of one defense training run.
#[derive(Debug, Clone)]
pub struct DefenseConfig {
    /// Penalty weight on the ASK term; 0 recovers plain adversarial training.
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Budget of the cross-entropy generator G1.
    pub g1: Budget,
    /// Budget of the ASK generator G2 (defaults equal to G1 in practice).
    pub g2: Budget,
    /// Defense-form ASK loss over the hardened layer set.
    pub ask: AskLossConfig,
    /// Reference points sampled per class for every batch (M).
    pub ref_per_class: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::rejected("lambda must be nonnegative"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::rejected("epochs and batch size must be positive"));
        }
        if self.ref_per_class == 0 {
            return Err(Error::rejected("reference batch needs at least one point per class"));
        }
        if self.learning_rate.is_nan() || self.learning_rate < 0.0 {
            return Err(Error::rejected("learning rate must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::rejected("momentum must lie in [0, 1)"));
        }
        if self.lambda > 0.0 && self.ask.s_form != SForm::Defense {
            return Err(Error::rejected("defense training requires the defense-form ASK loss"));
        }
        Ok(())
    }
}

/// Class-stratified reference points for one training step, plus their
/// adversarial counterparts once G2 has run.
#[derive(Debug, Clone)]
pub struct ReferenceBatch {
    /// Source row indices per class, ascending.
    pub indices: Vec<Vec<usize>>,
    /// Clean points per class (M each).
    pub clean: Vec<Vec<Vec<f64>>>,
    /// Adversarial counterparts per class; empty until G2 fills it.
    pub adversarial: Vec<Vec<Vec<f64>>>,
}

impl ReferenceBatch {
    /// Clean and adversarial points of class `c`, concatenated.
    pub fn union(&self, c: usize) -> Vec<Vec<f64>> {
        let mut v = self.clean[c].clone();
        v.extend(self.adversarial[c].iter().cloned());
        v
    }
}

/// Draws `m` points per class uniformly without replacement, excluding the
/// rows of the current training batch.
pub fn sample_reference_batch(
    data: &LabeledDataset,
    current_batch: &[usize],
    m: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<ReferenceBatch> {
    let mut in_batch = vec![false; data.len()];
    for &i in current_batch {
        if i >= data.len() {
            return Err(Error::rejected(format!("batch row {i} out of range")));
        }
        in_batch[i] = true;
    }
    let mut indices = Vec::with_capacity(data.class_count());
    let mut clean = Vec::with_capacity(data.class_count());
    for c in 0..data.class_count() {
        let candidates: Vec<usize> = data
            .class_indices(c)
            .into_iter()
            .filter(|&i| !in_batch[i])
            .collect();
        if candidates.len() < m {
            return Err(Error::rejected(format!(
                "class {c} has {} rows outside the batch, need {m}",
                candidates.len()
            )));
        }
        let mut picks: Vec<usize> = rand::seq::index::sample(rng, candidates.len(), m)
            .into_iter()
            .map(|j| candidates[j])
            .collect();
        picks.sort_unstable();
        clean.push(picks.iter().map(|&i| data.row(i).to_vec()).collect());
        indices.push(picks);
    }
    Ok(ReferenceBatch {
        indices,
        clean,
        adversarial: Vec::new(),
    })
}

/// G1: per-example cross-entropy PGD over the batch.
pub fn generator_g1(
    batch: &[(Vec<f64>, usize)],
    encoder: &Encoder,
    head: &SoftmaxHead,
    budget: &Budget,
    splitter: &SeedSplitter,
) -> Result<Vec<Vec<f64>>> {
    batch
        .par_iter()
        .enumerate()
        .map(|(i, (x, y))| {
            ce_pgd_attack(x, *y, encoder, head, budget, splitter.child_seed(&format!("g1/{i}")))
        })
        .collect()
}

/// Per-layer features of every reference point, encoded once per phase and
/// shared by all anchors.
struct EncodedRefs {
    layers: Vec<usize>,
    /// `feats[class][point][layer]`.
    feats: Vec<Vec<BTreeMap<usize, Vec<f64>>>>,
}

fn encode_refs(encoder: &Encoder, ask: &AskLossConfig, points: &[Vec<Vec<f64>>]) -> Result<EncodedRefs> {
    let mut feats = Vec::with_capacity(points.len());
    for class_pts in points {
        let per: Result<Vec<_>> = class_pts.iter().map(|p| encoder.forward(p)).collect();
        feats.push(per?);
    }
    Ok(EncodedRefs {
        layers: ask.layer_set(),
        feats,
    })
}

/// One [`ReferenceSet`] per loss layer for the given anchor label.
///
/// `exclude` optionally removes one in-class point (a reference being
/// perturbed does not score against itself).
fn assemble_sets(
    encoded: &EncodedRefs,
    anchor_label: usize,
    exclude: Option<usize>,
) -> Result<BTreeMap<usize, ReferenceSet>> {
    let mut out = BTreeMap::new();
    for &layer in &encoded.layers {
        let mut in_class = Vec::new();
        for (k, f) in encoded.feats[anchor_label].iter().enumerate() {
            if exclude == Some(k) {
                continue;
            }
            in_class.push(f[&layer].clone());
        }
        if in_class.is_empty() {
            return Err(Error::contract(
                "excluding the anchor left no in-class references",
            ));
        }
        let mut out_class = BTreeMap::new();
        for (c, per) in encoded.feats.iter().enumerate() {
            if c == anchor_label {
                continue;
            }
            out_class.insert(c, per.iter().map(|f| f[&layer].clone()).collect());
        }
        out.insert(
            layer,
            ReferenceSet {
                anchor_label,
                in_class,
                out_class,
            },
        );
    }
    Ok(out)
}

/// Encode-then-assemble in one call (used by tests).
#[cfg(test)]
fn reference_sets_for(
    encoder: &Encoder,
    ask: &AskLossConfig,
    points: &[Vec<Vec<f64>>],
    anchor_label: usize,
    exclude: Option<usize>,
) -> Result<BTreeMap<usize, ReferenceSet>> {
    assemble_sets(&encode_refs(encoder, ask, points)?, anchor_label, exclude)
}

/// G2: perturbs the reference batch, then the training batch, both by
/// maximizing the defense-form ASK loss. Returns the adversarial batch and
/// the completed reference batch.
pub fn generator_g2(
    batch: &[(Vec<f64>, usize)],
    encoder: &Encoder,
    ask: &AskLossConfig,
    mut refs: ReferenceBatch,
    budget: &Budget,
    splitter: &SeedSplitter,
) -> Result<(Vec<Vec<f64>>, ReferenceBatch)> {
    let class_count = refs.clean.len();
    // phase 1: adversarial counterparts of the reference points, each anchored
    // at its own class against the clean reference batch (minus itself)
    let encoded_clean = encode_refs(encoder, ask, &refs.clean)?;
    let jobs: Vec<(usize, usize)> = (0..class_count)
        .flat_map(|c| (0..refs.clean[c].len()).map(move |k| (c, k)))
        .collect();
    let adv_flat: Result<Vec<Vec<f64>>> = jobs
        .par_iter()
        .map(|&(c, k)| {
            let sets = assemble_sets(&encoded_clean, c, Some(k))?;
            let mut rng = splitter.fork_indexed("g2.ref", (c * refs.clean[c].len() + k) as u64);
            pgd_fixed_refs(&refs.clean[c][k], encoder, ask, &sets, budget, &mut rng)
        })
        .collect();
    let adv_flat = adv_flat?;
    let mut adversarial: Vec<Vec<Vec<f64>>> = vec![Vec::new(); class_count];
    for ((c, _), adv) in jobs.into_iter().zip(adv_flat) {
        adversarial[c].push(adv);
    }
    refs.adversarial = adversarial;

    // phase 2: perturb the training batch against clean + adversarial refs
    let union: Vec<Vec<Vec<f64>>> = (0..class_count).map(|c| refs.union(c)).collect();
    let encoded_union = encode_refs(encoder, ask, &union)?;
    let per_label_sets: Result<Vec<_>> = (0..class_count)
        .map(|y| assemble_sets(&encoded_union, y, None))
        .collect();
    let per_label_sets = per_label_sets?;
    let adv_batch: Result<Vec<Vec<f64>>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, (x, y))| {
            let mut rng = splitter.fork_indexed("g2.batch", i as u64);
            pgd_fixed_refs(x, encoder, ask, &per_label_sets[*y], budget, &mut rng)
        })
        .collect();
    Ok((adv_batch?, refs))
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingRow {
    pub epoch: usize,
    pub batch: usize,
    pub ce_loss: f64,
    pub ask_loss: f64,
    pub combined: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingLog {
    pub rows: Vec<TrainingRow>,
}

fn shuffled_order(n: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Mean cross-entropy loss and parameter gradient over a batch.
fn ce_batch_grad(
    encoder: &Encoder,
    head: &SoftmaxHead,
    batch: &[(Vec<f64>, usize)],
) -> Result<(f64, Vec<f64>)> {
    let total = encoder.param_count() + head.param_count();
    let mut grad = vec![0.0; total];
    let mut loss = 0.0;
    for (x, y) in batch {
        let b = backward_params(encoder, head, x, *y)?;
        loss += b.loss;
        for (g, d) in grad.iter_mut().zip(&b.grad_params) {
            *g += d;
        }
    }
    let scale = 1.0 / batch.len() as f64;
    loss *= scale;
    for g in &mut grad {
        *g *= scale;
    }
    Ok((loss, grad))
}

struct Sgd {
    velocity: Vec<f64>,
    momentum: f64,
    lr: f64,
}

impl Sgd {
    fn new(n: usize, momentum: f64, lr: f64) -> Self {
        Sgd {
            velocity: vec![0.0; n],
            momentum,
            lr,
        }
    }

    fn step(&mut self, encoder: &mut Encoder, head: &mut SoftmaxHead, grad: &[f64]) -> Result<()> {
        for (v, g) in self.velocity.iter_mut().zip(grad) {
            *v = self.momentum * *v + g;
        }
        let enc_n = encoder.param_count();
        encoder.apply_step(&self.velocity[..enc_n], -self.lr)?;
        head.apply_step(&self.velocity[enc_n..], -self.lr)?;
        Ok(())
    }
}

/// Full defense training loop (minimax: G1 hardens the head, G2
/// hardens the tapped features, `lambda` balances the two update terms).
pub fn train(
    data: &LabeledDataset,
    encoder: &mut Encoder,
    head: &mut SoftmaxHead,
    cfg: &DefenseConfig,
) -> Result<TrainingLog> {
    train_with_callback(data, encoder, head, cfg, |_, _, _| Ok(()))
}

/// [`train`] with a per-epoch callback (checkpointing hook).
pub fn train_with_callback(
    data: &LabeledDataset,
    encoder: &mut Encoder,
    head: &mut SoftmaxHead,
    cfg: &DefenseConfig,
    mut on_epoch: impl FnMut(usize, &Encoder, &SoftmaxHead) -> Result<()>,
) -> Result<TrainingLog> {
    cfg.validate()?;
    for &layer in cfg.ask.layers.keys() {
        if !encoder.taps().contains(&layer) {
            return Err(Error::rejected(format!(
                "defended layer {layer} is not tapped by the encoder"
            )));
        }
    }
    let splitter = SeedSplitter::new(cfg.seed);
    let mut shuffle_rng = splitter.fork("train.shuffle");
    let mut opt = Sgd::new(
        encoder.param_count() + head.param_count(),
        cfg.momentum,
        cfg.learning_rate,
    );
    let mut log = TrainingLog::default();
    let enc_n = encoder.param_count();

    for epoch in 0..cfg.epochs {
        let order = shuffled_order(data.len(), &mut shuffle_rng);
        for (batch_id, rows) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(Vec<f64>, usize)> = rows
                .iter()
                .map(|&i| (data.row(i).to_vec(), data.label(i)))
                .collect();
            let g1_split = SeedSplitter::new(splitter.child_seed(&format!("g1/{epoch}/{batch_id}")));
            let adv1: Vec<(Vec<f64>, usize)> = generator_g1(&batch, encoder, head, &cfg.g1, &g1_split)?
                .into_iter()
                .zip(rows.iter().map(|&i| data.label(i)))
                .collect();
            let (ce_loss, mut grad) = ce_batch_grad(encoder, head, &adv1)?;
            if !ce_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_id,
                    term: "cross-entropy",
                });
            }

            let mut ask_loss = 0.0;
            if cfg.lambda > 0.0 {
                let mut ref_rng = splitter.fork(&format!("refs/{epoch}/{batch_id}"));
                let clean_refs =
                    sample_reference_batch(data, rows, cfg.ref_per_class, &mut ref_rng)?;
                let g2_split =
                    SeedSplitter::new(splitter.child_seed(&format!("g2/{epoch}/{batch_id}")));
                let (adv2, completed) =
                    generator_g2(&batch, encoder, &cfg.ask, clean_refs, &cfg.g2, &g2_split)?;
                let anchors: Vec<(Vec<f64>, usize)> = adv2
                    .into_iter()
                    .zip(rows.iter().map(|&i| data.label(i)))
                    .collect();
                let ref_union: BTreeMap<usize, Vec<Vec<f64>>> = (0..data.class_count())
                    .map(|c| (c, completed.union(c)))
                    .collect();
                let (l, g_ask) = ask_param_grad_batch(&cfg.ask, encoder, &anchors, &ref_union)?;
                ask_loss = l;
                if !ask_loss.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        batch: batch_id,
                        term: "ask",
                    });
                }
                for (g, d) in grad[..enc_n].iter_mut().zip(&g_ask) {
                    *g += cfg.lambda * d;
                }
            }

            opt.step(encoder, head, &grad)?;
            log.rows.push(TrainingRow {
                epoch,
                batch: batch_id,
                ce_loss,
                ask_loss,
                combined: ce_loss + cfg.lambda * ask_loss,
            });
        }
        on_epoch(epoch, encoder, head)?;
    }
    Ok(log)
}

/// Standalone adversarial-training loop: shuffle, G1, cross-entropy update.
///
/// Uses the same stream labels as [`train`], so a `lambda = 0` defense run
/// must reproduce this trajectory bit for bit.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_train(
    data: &LabeledDataset,
    encoder: &mut Encoder,
    head: &mut SoftmaxHead,
    epochs: usize,
    batch_size: usize,
    g1: &Budget,
    learning_rate: f64,
    momentum: f64,
    seed: u64,
) -> Result<TrainingLog> {
    let splitter = SeedSplitter::new(seed);
    let mut shuffle_rng = splitter.fork("train.shuffle");
    let mut opt = Sgd::new(
        encoder.param_count() + head.param_count(),
        momentum,
        learning_rate,
    );
    let mut log = TrainingLog::default();
    for epoch in 0..epochs {
        let order = shuffled_order(data.len(), &mut shuffle_rng);
        for (batch_id, rows) in order.chunks(batch_size).enumerate() {
            let batch: Vec<(Vec<f64>, usize)> = rows
                .iter()
                .map(|&i| (data.row(i).to_vec(), data.label(i)))
                .collect();
            let g1_split = SeedSplitter::new(splitter.child_seed(&format!("g1/{epoch}/{batch_id}")));
            let adv1: Vec<(Vec<f64>, usize)> = generator_g1(&batch, encoder, head, g1, &g1_split)?
                .into_iter()
                .zip(rows.iter().map(|&i| data.label(i)))
                .collect();
            let (ce_loss, grad) = ce_batch_grad(encoder, head, &adv1)?;
            if !ce_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_id,
                    term: "cross-entropy",
                });
            }
            opt.step(encoder, head, &grad)?;
            log.rows.push(TrainingRow {
                epoch,
                batch: batch_id,
                ce_loss,
                ask_loss: 0.0,
                combined: ce_loss,
            });
        }
    }
    Ok(log)
}
