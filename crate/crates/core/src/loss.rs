//! The ASK loss in attack and defense form, its analytic gradients, and the
//! mutual-information lower-bound diagnostic.
//!
//! Per layer the loss is `-log( S+ / (S+ + sum_c S_c-) )` where `S` is a
//! class-similarity mass built from temperature-scaled pairwise similarities.
//! The attack form uses `S = exp(mean_k A_k)`, the defense form
//! `S = sum_k exp(A_k)`. All evaluation happens in log space with max
//! shifting, so extreme temperatures cannot overflow.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::knn::{Metric, ReferenceSet};
use crate::model::Encoder;

/// Pairwise similarity: metric kind plus the per-layer temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityConfig {
    pub kind: Metric,
    pub temperature: f64,
}

impl SimilarityConfig {
    pub fn new(kind: Metric, temperature: f64) -> Result<Self> {
        if !temperature.is_finite() || temperature <= 0.0 {
            return Err(Error::rejected(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(SimilarityConfig { kind, temperature })
    }
}

/// Which class-similarity mass `S` aggregates the pairwise terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SForm {
    /// `exp((1/K) sum_k A_k)` — used by the attack.
    Attack,
    /// `sum_k exp(A_k)` — used by the defense.
    Defense,
}

/// Larger is more similar: `cos/tau` for cosine, `-(1/tau)*||u-v||` for
/// negative-l2.
pub fn similarity(cfg: &SimilarityConfig, u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::rejected(format!(
            "similarity arguments differ in dimension: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    match cfg.kind {
        Metric::NegL2 => {
            let d: f64 = u
                .iter()
                .zip(v)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            Ok(-d / cfg.temperature)
        }
        Metric::Cosine => {
            let (nu, nv) = (norm(u), norm(v));
            if nu <= 0.0 || nv <= 0.0 {
                return Err(Error::rejected("cosine similarity undefined for zero vectors"));
            }
            let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
            Ok(dot / (nu * nv * cfg.temperature))
        }
    }
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Similarity together with its gradients with respect to both arguments.
///
/// The negative-l2 gradient at coincident points is taken as zero.
fn similarity_with_grads(
    cfg: &SimilarityConfig,
    u: &[f64],
    v: &[f64],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if u.len() != v.len() {
        return Err(Error::rejected("similarity arguments differ in dimension"));
    }
    let tau = cfg.temperature;
    match cfg.kind {
        Metric::NegL2 => {
            let mut d2 = 0.0;
            for (a, b) in u.iter().zip(v) {
                d2 += (a - b) * (a - b);
            }
            let d = d2.sqrt();
            let a = -d / tau;
            if d <= 0.0 {
                return Ok((a, vec![0.0; u.len()], vec![0.0; u.len()]));
            }
            let scale = -1.0 / (tau * d);
            let du: Vec<f64> = u.iter().zip(v).map(|(x, y)| scale * (x - y)).collect();
            let dv: Vec<f64> = du.iter().map(|g| -g).collect();
            Ok((a, du, dv))
        }
        Metric::Cosine => {
            let (nu, nv) = (norm(u), norm(v));
            if nu <= 0.0 || nv <= 0.0 {
                return Err(Error::rejected("cosine similarity undefined for zero vectors"));
            }
            let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
            let cos = dot / (nu * nv);
            let a = cos / tau;
            // d cos / du = v_hat/|u| - cos * u_hat/|u|
            let du: Vec<f64> = u
                .iter()
                .zip(v)
                .map(|(&x, &y)| (y / nv - cos * x / nu) / (nu * tau))
                .collect();
            let dv: Vec<f64> = u
                .iter()
                .zip(v)
                .map(|(&x, &y)| (x / nu - cos * y / nv) / (nv * tau))
                .collect();
            Ok((a, du, dv))
        }
    }
}

/// Log of the class-similarity mass `S`.
pub fn class_log_similarity(
    cfg: &SimilarityConfig,
    s_form: SForm,
    x_feat: &[f64],
    refs: &[Vec<f64>],
) -> Result<f64> {
    if refs.is_empty() {
        return Err(Error::contract("class similarity needs at least one reference"));
    }
    let sims: Result<Vec<f64>> = refs.iter().map(|r| similarity(cfg, x_feat, r)).collect();
    let sims = sims?;
    Ok(match s_form {
        SForm::Attack => sims.iter().sum::<f64>() / sims.len() as f64,
        SForm::Defense => log_sum_exp(&sims),
    })
}

/// The class-similarity mass itself. Always positive; may overflow to
/// infinity for exponents beyond ~709 — the loss path never exponentiates.
pub fn class_similarity(
    cfg: &SimilarityConfig,
    s_form: SForm,
    x_feat: &[f64],
    refs: &[Vec<f64>],
) -> Result<f64> {
    Ok(class_log_similarity(cfg, s_form, x_feat, refs)?.exp())
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Per-layer term of the ASK loss: weight and similarity settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerLossConfig {
    pub weight: f64,
    pub similarity: SimilarityConfig,
}

/// Full ASK loss configuration over a set of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct AskLossConfig {
    pub s_form: SForm,
    pub layers: BTreeMap<usize, LayerLossConfig>,
    /// Targeted variant: score the ratio against this class only.
    pub target_class: Option<usize>,
}

impl AskLossConfig {
    pub fn new(
        s_form: SForm,
        layers: BTreeMap<usize, LayerLossConfig>,
        target_class: Option<usize>,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::rejected("loss needs at least one layer"));
        }
        let mut total = 0.0;
        for (l, cfg) in &layers {
            if cfg.weight < 0.0 {
                return Err(Error::rejected(format!("layer {l} weight is negative")));
            }
            if !cfg.similarity.temperature.is_finite() || cfg.similarity.temperature <= 0.0 {
                return Err(Error::rejected(format!("layer {l} temperature must be positive")));
            }
            total += cfg.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::rejected(format!(
                "layer weights must sum to 1, got {total}"
            )));
        }
        Ok(AskLossConfig {
            s_form,
            layers,
            target_class,
        })
    }

    /// Single layer with weight 1.
    pub fn single_layer(layer: usize, kind: Metric, temperature: f64, s_form: SForm) -> Result<Self> {
        let mut layers = BTreeMap::new();
        layers.insert(
            layer,
            LayerLossConfig {
                weight: 1.0,
                similarity: SimilarityConfig::new(kind, temperature)?,
            },
        );
        AskLossConfig::new(s_form, layers, None)
    }

    pub fn with_target(mut self, target: Option<usize>) -> Self {
        self.target_class = target;
        self
    }

    pub fn layer_set(&self) -> Vec<usize> {
        self.layers.keys().copied().collect()
    }
}

/// References for one layer term, grouped per class; the anchor's own class
/// appears exactly once.
struct ClassGroup<'a> {
    class: usize,
    feats: &'a [Vec<f64>],
}

/// Per-reference similarity gradients: `(dA/d anchor, dA/d reference)`.
type PairGrads = Vec<Vec<(Vec<f64>, Vec<f64>)>>;

/// Loss and `d loss / d A_ck` coefficients for one layer.
///
/// With `z_c = log S_c` the loss is `lse(z) - z_y`, so `d/dz_c = q_c - [c=y]`
/// with `q = softmax(z)`. The attack form contributes `1/K` per pair, the
/// defense form its within-class softmax.
fn layer_term(
    sim: &SimilarityConfig,
    s_form: SForm,
    anchor: &[f64],
    y: usize,
    groups: &[ClassGroup],
    grads: bool,
) -> Result<(f64, Vec<Vec<f64>>, PairGrads)> {
    let mut z = Vec::with_capacity(groups.len());
    let mut a_all: Vec<Vec<f64>> = Vec::with_capacity(groups.len());
    let mut g_all: PairGrads = Vec::with_capacity(groups.len());
    for g in groups {
        if g.feats.is_empty() {
            return Err(Error::contract(format!(
                "class {} supplies no reference points",
                g.class
            )));
        }
        let mut a_vals = Vec::with_capacity(g.feats.len());
        let mut a_grads = Vec::with_capacity(if grads { g.feats.len() } else { 0 });
        for r in g.feats {
            if grads {
                let (a, du, dv) = similarity_with_grads(sim, anchor, r)?;
                a_vals.push(a);
                a_grads.push((du, dv));
            } else {
                a_vals.push(similarity(sim, anchor, r)?);
            }
        }
        z.push(match s_form {
            SForm::Attack => a_vals.iter().sum::<f64>() / a_vals.len() as f64,
            SForm::Defense => log_sum_exp(&a_vals),
        });
        a_all.push(a_vals);
        g_all.push(a_grads);
    }
    let lse = log_sum_exp(&z);
    let y_pos = groups
        .iter()
        .position(|g| g.class == y)
        .ok_or_else(|| Error::contract("anchor class missing from reference groups"))?;
    let loss = lse - z[y_pos];

    let mut coefs = Vec::with_capacity(groups.len());
    for (gi, g) in groups.iter().enumerate() {
        let q = (z[gi] - lse).exp();
        let dz = q - if gi == y_pos { 1.0 } else { 0.0 };
        let k = a_all[gi].len();
        let w: Vec<f64> = match s_form {
            SForm::Attack => vec![1.0 / k as f64; k],
            SForm::Defense => a_all[gi].iter().map(|&a| (a - z[gi]).exp()).collect(),
        };
        let _ = g;
        coefs.push(w.into_iter().map(|wk| dz * wk).collect());
    }
    Ok((loss, coefs, g_all))
}

fn reference_groups<'a>(
    refs: &'a ReferenceSet,
    target: Option<usize>,
) -> Result<Vec<ClassGroup<'a>>> {
    let y = refs.anchor_label;
    let mut groups = vec![ClassGroup {
        class: y,
        feats: &refs.in_class,
    }];
    match target {
        Some(t) => {
            if t == y {
                return Err(Error::rejected(format!(
                    "target class {t} equals the anchor label"
                )));
            }
            let feats = refs
                .out_class
                .get(&t)
                .ok_or_else(|| Error::contract(format!("no references for target class {t}")))?;
            groups.push(ClassGroup { class: t, feats });
        }
        None => {
            if refs.out_class.is_empty() {
                return Err(Error::contract("reference set has no out-of-class points"));
            }
            for (&c, feats) in &refs.out_class {
                if c == y {
                    return Err(Error::contract("out-of-class map contains the anchor class"));
                }
                groups.push(ClassGroup { class: c, feats });
            }
        }
    }
    Ok(groups)
}

/// Weighted multi-layer ASK loss over precomputed features.
pub fn ask_loss(
    cfg: &AskLossConfig,
    features: &BTreeMap<usize, Vec<f64>>,
    refs: &BTreeMap<usize, ReferenceSet>,
) -> Result<f64> {
    let mut total = 0.0;
    for (&layer, lc) in &cfg.layers {
        let feat = features
            .get(&layer)
            .ok_or_else(|| Error::contract(format!("missing features for layer {layer}")))?;
        let rs = refs
            .get(&layer)
            .ok_or_else(|| Error::contract(format!("missing references for layer {layer}")))?;
        let groups = reference_groups(rs, cfg.target_class)?;
        let (loss, _, _) = layer_term(&lc.similarity, cfg.s_form, feat, rs.anchor_label, &groups, false)?;
        total += lc.weight * loss;
    }
    Ok(total)
}

/// ASK loss and its analytic gradient with respect to the encoder input.
pub fn ask_loss_grad(
    cfg: &AskLossConfig,
    encoder: &Encoder,
    x: &[f64],
    refs: &BTreeMap<usize, ReferenceSet>,
) -> Result<(f64, Vec<f64>)> {
    for &layer in cfg.layers.keys() {
        if !encoder.taps().contains(&layer) {
            return Err(Error::contract(format!(
                "loss layer {layer} is not tapped by the encoder"
            )));
        }
    }
    let trace = encoder.forward_trace(x)?;
    let mut total = 0.0;
    let mut upstreams: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (&layer, lc) in &cfg.layers {
        let feat = trace.layer_output(layer);
        let rs = refs
            .get(&layer)
            .ok_or_else(|| Error::contract(format!("missing references for layer {layer}")))?;
        let groups = reference_groups(rs, cfg.target_class)?;
        let (loss, coefs, grads) =
            layer_term(&lc.similarity, cfg.s_form, feat, rs.anchor_label, &groups, true)?;
        total += lc.weight * loss;
        let up = upstreams.entry(layer).or_insert_with(|| vec![0.0; feat.len()]);
        for (gc, gg) in coefs.iter().zip(&grads) {
            for (&c, (du, _)) in gc.iter().zip(gg) {
                if c != 0.0 {
                    for (u, d) in up.iter_mut().zip(du) {
                        *u += lc.weight * c * d;
                    }
                }
            }
        }
    }
    let grad = encoder.backward_from(&trace, &upstreams, None)?;
    Ok((total, grad))
}

/// Defense-side ASK loss where references are input-space points encoded by
/// the current parameters. Returns the loss averaged over anchors and the
/// encoder parameter gradient, which includes the reference feature paths.
///
/// `ref_inputs[c]` holds the reference points of class `c`; every class must
/// be present (the anchor's class provides the in-class mass).
pub fn ask_param_grad_batch(
    cfg: &AskLossConfig,
    encoder: &Encoder,
    anchors: &[(Vec<f64>, usize)],
    ref_inputs: &BTreeMap<usize, Vec<Vec<f64>>>,
) -> Result<(f64, Vec<f64>)> {
    if anchors.is_empty() {
        return Err(Error::contract("parameter gradient needs at least one anchor"));
    }
    for &layer in cfg.layers.keys() {
        if !encoder.taps().contains(&layer) {
            return Err(Error::contract(format!(
                "loss layer {layer} is not tapped by the encoder"
            )));
        }
    }
    // encode every reference point once
    let classes: Vec<usize> = ref_inputs.keys().copied().collect();
    let mut ref_traces: BTreeMap<usize, Vec<crate::model::Trace>> = BTreeMap::new();
    for (&c, pts) in ref_inputs {
        if pts.is_empty() {
            return Err(Error::contract(format!("class {c} supplies no reference points")));
        }
        let traces: Result<Vec<_>> = pts.iter().map(|p| encoder.forward_trace(p)).collect();
        ref_traces.insert(c, traces?);
    }
    let mut ref_upstreams: BTreeMap<usize, Vec<BTreeMap<usize, Vec<f64>>>> = ref_inputs
        .iter()
        .map(|(&c, pts)| (c, vec![BTreeMap::new(); pts.len()]))
        .collect();

    let scale = 1.0 / anchors.len() as f64;
    let mut total = 0.0;
    let mut param_grads = vec![0.0; encoder.param_count()];

    for (x, y) in anchors {
        if !classes.contains(y) {
            return Err(Error::contract(format!(
                "anchor label {y} has no reference class"
            )));
        }
        let trace = encoder.forward_trace(x)?;
        let mut anchor_up: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (&layer, lc) in &cfg.layers {
            let feat = trace.layer_output(layer);
            // assemble per-class feature views at this layer
            let group_classes: Vec<usize> = match cfg.target_class {
                Some(t) => {
                    if t == *y {
                        return Err(Error::rejected("target class equals the anchor label"));
                    }
                    vec![*y, t]
                }
                None => {
                    let mut v = vec![*y];
                    v.extend(classes.iter().copied().filter(|c| c != y));
                    v
                }
            };
            let feats_per_group: Vec<Vec<Vec<f64>>> = group_classes
                .iter()
                .map(|c| {
                    ref_traces[c]
                        .iter()
                        .map(|t| t.layer_output(layer).to_vec())
                        .collect()
                })
                .collect();
            let groups: Vec<ClassGroup> = group_classes
                .iter()
                .zip(&feats_per_group)
                .map(|(&class, feats)| ClassGroup { class, feats })
                .collect();
            let (loss, coefs, grads) =
                layer_term(&lc.similarity, cfg.s_form, feat, *y, &groups, true)?;
            total += scale * lc.weight * loss;
            let w = scale * lc.weight;
            let up = anchor_up
                .entry(layer)
                .or_insert_with(|| vec![0.0; feat.len()]);
            for (gi, (gc, gg)) in coefs.iter().zip(&grads).enumerate() {
                let class = group_classes[gi];
                let ups = ref_upstreams.get_mut(&class).unwrap();
                for (k, (&c, (du, dv))) in gc.iter().zip(gg).enumerate() {
                    if c == 0.0 {
                        continue;
                    }
                    for (u, d) in up.iter_mut().zip(du) {
                        *u += w * c * d;
                    }
                    let rup = ups[k]
                        .entry(layer)
                        .or_insert_with(|| vec![0.0; dv.len()]);
                    for (u, d) in rup.iter_mut().zip(dv) {
                        *u += w * c * d;
                    }
                }
            }
        }
        encoder.backward_from(&trace, &anchor_up, Some(&mut param_grads))?;
    }
    // reference paths: one backward pass per reference point
    for (&c, ups) in &ref_upstreams {
        for (k, up) in ups.iter().enumerate() {
            if up.is_empty() {
                continue;
            }
            let trace = &ref_traces[&c][k];
            encoder.backward_from(trace, up, Some(&mut param_grads))?;
        }
    }
    Ok((total, param_grads))
}

/// Information diagnostic: `-loss + ln(C-1)` lower-bounds the mutual
/// information between the perturbed input and its in-class references.
pub fn mi_lower_bound(loss: f64, class_count: usize) -> f64 {
    debug_assert!(class_count >= 2);
    -loss + ((class_count - 1) as f64).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedSplitter;
    use rand::Rng;

    fn neg_l2(tau: f64) -> SimilarityConfig {
        SimilarityConfig::new(Metric::NegL2, tau).unwrap()
    }

    fn cosine(tau: f64) -> SimilarityConfig {
        SimilarityConfig::new(Metric::Cosine, tau).unwrap()
    }

    #[test]
    fn similarity_spot_values() {
        let u = [1.0, 2.0, 3.0];
        assert!((similarity(&cosine(1.0), &u, &u).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(similarity(&neg_l2(0.7), &u, &u).unwrap(), 0.0);
        let a = similarity(&neg_l2(0.5), &[0.0, 0.0], &[3.0, 4.0]).unwrap();
        assert!((a - (-10.0)).abs() < 1e-12);
    }

    #[test]
    fn similarity_is_symmetric() {
        let u = [0.3, -0.2, 0.9];
        let v = [1.1, 0.4, -0.5];
        for cfg in [neg_l2(0.3), cosine(0.3)] {
            let a = similarity(&cfg, &u, &v).unwrap();
            let b = similarity(&cfg, &v, &u).unwrap();
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn cosine_rejects_zero_vector() {
        assert!(matches!(
            similarity(&cosine(1.0), &[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::RejectedInput(_))
        ));
    }

    #[test]
    fn class_similarity_spot_values() {
        let x = [0.0, 0.0];
        let refs = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
        // all A = 0
        let s = class_similarity(&neg_l2(1.0), SForm::Attack, &x, &refs).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
        let s = class_similarity(&neg_l2(1.0), SForm::Defense, &x, &refs).unwrap();
        assert!((s - 2.0).abs() < 1e-12);
        // attack form with A in {-1, -3} -> exp(-2)
        let refs = vec![vec![1.0, 0.0], vec![3.0, 0.0]];
        let s = class_similarity(&neg_l2(1.0), SForm::Attack, &x, &refs).unwrap();
        assert!((s - (-2.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn class_similarity_rejects_empty_refs() {
        assert!(matches!(
            class_similarity(&neg_l2(1.0), SForm::Attack, &[0.0], &[]),
            Err(Error::Contract(_))
        ));
    }

    fn symmetric_refs(d: f64) -> BTreeMap<usize, ReferenceSet> {
        // anchor at origin equidistant from both classes' references
        let rs = ReferenceSet {
            anchor_label: 0,
            in_class: vec![vec![d, 0.0]],
            out_class: [(1usize, vec![vec![-d, 0.0]])].into_iter().collect(),
        };
        [(0usize, rs)].into_iter().collect()
    }

    #[test]
    fn equidistant_two_class_loss_is_ln2() {
        let cfg = AskLossConfig::single_layer(0, Metric::NegL2, 0.5, SForm::Attack).unwrap();
        let feats: BTreeMap<usize, Vec<f64>> = [(0usize, vec![0.0, 0.0])].into_iter().collect();
        let loss = ask_loss(&cfg, &feats, &symmetric_refs(1.5)).unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn uniform_ten_class_loss_is_ln10() {
        let mut out = BTreeMap::new();
        for c in 1..10usize {
            out.insert(c, vec![vec![1.0, 0.0]]);
        }
        let rs = ReferenceSet {
            anchor_label: 0,
            in_class: vec![vec![1.0, 0.0]],
            out_class: out,
        };
        let refs: BTreeMap<usize, ReferenceSet> = [(0usize, rs)].into_iter().collect();
        let feats: BTreeMap<usize, Vec<f64>> = [(0usize, vec![0.0, 0.0])].into_iter().collect();
        for s_form in [SForm::Attack, SForm::Defense] {
            let cfg = AskLossConfig::single_layer(0, Metric::NegL2, 0.3, s_form).unwrap();
            let loss = ask_loss(&cfg, &feats, &refs).unwrap();
            assert!((loss - 10.0f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn log_space_matches_naive_formula_in_range() {
        let mut rng = SeedSplitter::new(12).fork("loss");
        for _ in 0..50 {
            let x: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<f64>> {
                (0..4)
                    .map(|_| (0..3).map(|_| rng.random::<f64>() * 2.0).collect())
                    .collect()
            };
            let rs = ReferenceSet {
                anchor_label: 0,
                in_class: mk(&mut rng),
                out_class: [(1usize, mk(&mut rng)), (2usize, mk(&mut rng))]
                    .into_iter()
                    .collect(),
            };
            let refs: BTreeMap<usize, ReferenceSet> = [(0usize, rs.clone())].into_iter().collect();
            let feats: BTreeMap<usize, Vec<f64>> = [(0usize, x.clone())].into_iter().collect();
            for s_form in [SForm::Attack, SForm::Defense] {
                let sim = neg_l2(0.9);
                let cfg = AskLossConfig::single_layer(0, Metric::NegL2, 0.9, s_form).unwrap();
                let loss = ask_loss(&cfg, &feats, &refs).unwrap();
                // naive: direct unstabilized ratio
                let sp = class_similarity(&sim, s_form, &x, &rs.in_class).unwrap();
                let mut denom = sp;
                for (_, r) in &rs.out_class {
                    denom += class_similarity(&sim, s_form, &x, r).unwrap();
                }
                let naive = -(sp / denom).ln();
                assert!((loss - naive).abs() < 1e-10, "{loss} vs {naive}");
            }
        }
    }

    #[test]
    fn log_space_survives_extreme_exponents() {
        // A values near +-700: the naive formula overflows, the loss must not
        let rs = ReferenceSet {
            anchor_label: 0,
            in_class: vec![vec![700.0 * 0.01]],
            out_class: [(1usize, vec![vec![-700.0 * 0.01]])].into_iter().collect(),
        };
        let refs: BTreeMap<usize, ReferenceSet> = [(0usize, rs)].into_iter().collect();
        let feats: BTreeMap<usize, Vec<f64>> = [(0usize, vec![0.0])].into_iter().collect();
        let cfg = AskLossConfig::single_layer(0, Metric::NegL2, 0.01, SForm::Attack).unwrap();
        let loss = ask_loss(&cfg, &feats, &refs).unwrap();
        assert!(loss.is_finite());
        assert!(loss >= 0.0);
    }

    #[test]
    fn loss_is_nonnegative_and_monotone() {
        // increasing in-class similarity (moving refs closer) lowers the loss;
        // increasing out-class similarity raises it
        let cfg = AskLossConfig::single_layer(0, Metric::NegL2, 0.5, SForm::Attack).unwrap();
        let feats: BTreeMap<usize, Vec<f64>> = [(0usize, vec![0.0, 0.0])].into_iter().collect();
        let build = |din: f64, dout: f64| -> BTreeMap<usize, ReferenceSet> {
            let rs = ReferenceSet {
                anchor_label: 0,
                in_class: vec![vec![din, 0.0]],
                out_class: [(1usize, vec![vec![-dout, 0.0]])].into_iter().collect(),
            };
            [(0usize, rs)].into_iter().collect()
        };
        let base = ask_loss(&cfg, &feats, &build(1.0, 1.0)).unwrap();
        let closer_in = ask_loss(&cfg, &feats, &build(0.5, 1.0)).unwrap();
        let closer_out = ask_loss(&cfg, &feats, &build(1.0, 0.5)).unwrap();
        assert!(base >= 0.0);
        assert!(closer_in < base);
        assert!(closer_out > base);
    }

    #[test]
    fn symmetric_arrangement_has_zero_gradient_component() {
        // mirror-symmetric references about the anchor: gradient along the
        // symmetry axis must vanish
        let enc = Encoder::identity(2);
        let rs = ReferenceSet {
            anchor_label: 0,
            in_class: vec![vec![1.0, 1.0], vec![1.0, -1.0]],
            out_class: [(1usize, vec![vec![-1.0, 1.0], vec![-1.0, -1.0]])]
                .into_iter()
                .collect(),
        };
        let refs: BTreeMap<usize, ReferenceSet> = [(0usize, rs)].into_iter().collect();
        let cfg = AskLossConfig::single_layer(0, Metric::NegL2, 0.5, SForm::Attack).unwrap();
        let (_, g) = ask_loss_grad(&cfg, &enc, &[0.0, 0.0], &refs).unwrap();
        assert!(g[1].abs() < 1e-12, "symmetry axis component {}", g[1]);
    }

    #[test]
    fn uniform_similarities_give_zero_gradient() {
        // every class scores against the same reference point: the softmax is
        // uniform and the coefficients sum to zero, so the gradient cancels
        // exactly no matter the temperature
        let enc = Encoder::identity(2);
        for tau in [0.5, 1.0] {
            let shared = vec![vec![0.7, -0.3]];
            let mut out = BTreeMap::new();
            for c in 1..10usize {
                out.insert(c, shared.clone());
            }
            let rs = ReferenceSet {
                anchor_label: 0,
                in_class: shared.clone(),
                out_class: out,
            };
            let refs: BTreeMap<usize, ReferenceSet> = [(0usize, rs)].into_iter().collect();
            let cfg = AskLossConfig::single_layer(0, Metric::NegL2, tau, SForm::Attack).unwrap();
            let (loss, g) = ask_loss_grad(&cfg, &enc, &[0.1, 0.2], &refs).unwrap();
            assert!((loss - 10.0f64.ln()).abs() < 1e-12);
            assert!(g.iter().all(|v| v.abs() < 1e-12));
        }
    }

    /// Central finite differences of the loss for the gradient oracle.
    fn fd_grad(
        cfg: &AskLossConfig,
        enc: &Encoder,
        x: &[f64],
        refs: &BTreeMap<usize, ReferenceSet>,
        h: f64,
    ) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + h;
            let fp = ask_loss(cfg, &enc.forward(&xp).unwrap(), refs).unwrap();
            xp[i] = x[i] - h;
            let fm = ask_loss(cfg, &enc.forward(&xp).unwrap(), refs).unwrap();
            xp[i] = x[i];
            g[i] = (fp - fm) / (2.0 * h);
        }
        g
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = SeedSplitter::new(99).fork("fd");
        let enc_id = Encoder::identity(4);
        let mut enc_rng = SeedSplitter::new(99).fork("mlp");
        let enc_mlp = Encoder::mlp(&[4, 6, 5], &[1], &mut enc_rng).unwrap();
        for case in 0..20 {
            for kind in [Metric::NegL2, Metric::Cosine] {
                for s_form in [SForm::Attack, SForm::Defense] {
                    for (enc, layer) in [(&enc_id, 0usize), (&enc_mlp, 1usize)] {
                        let dim = enc.layer_dim(layer);
                        let x: Vec<f64> = (0..enc.input_dim())
                            .map(|_| rng.random::<f64>() + 0.2)
                            .collect();
                        let mk = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<f64>> {
                            (0..3)
                                .map(|_| (0..dim).map(|_| rng.random::<f64>() + 0.2).collect())
                                .collect()
                        };
                        let rs = ReferenceSet {
                            anchor_label: 0,
                            in_class: mk(&mut rng),
                            out_class: [(1usize, mk(&mut rng)), (2usize, mk(&mut rng))]
                                .into_iter()
                                .collect(),
                        };
                        let refs: BTreeMap<usize, ReferenceSet> =
                            [(layer, rs)].into_iter().collect();
                        let cfg =
                            AskLossConfig::single_layer(layer, kind, 0.4, s_form).unwrap();
                        let (_, g) = ask_loss_grad(&cfg, enc, &x, &refs).unwrap();
                        let fd = fd_grad(&cfg, enc, &x, &refs, 1e-5);
                        let num: f64 = g
                            .iter()
                            .zip(&fd)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            .sqrt();
                        let den = fd
                            .iter()
                            .map(|v| v * v)
                            .sum::<f64>()
                            .sqrt()
                            .max(g.iter().map(|v| v * v).sum::<f64>().sqrt())
                            .max(1e-8);
                        assert!(
                            num / den < 1e-6,
                            "case {case} {kind:?} {s_form:?}: rel err {}",
                            num / den
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn mi_lower_bound_spot_values() {
        let l = (9.0f64).ln();
        assert!((mi_lower_bound(l, 10)).abs() < 1e-12);
        assert!((mi_lower_bound(0.0, 10) - (9.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn targeted_loss_uses_only_target_class() {
        let feats: BTreeMap<usize, Vec<f64>> = [(0usize, vec![0.0, 0.0])].into_iter().collect();
        let rs = ReferenceSet {
            anchor_label: 0,
            in_class: vec![vec![1.0, 0.0]],
            out_class: [
                (1usize, vec![vec![-1.0, 0.0]]),
                (2usize, vec![vec![-50.0, 0.0]]),
            ]
            .into_iter()
            .collect(),
        };
        let refs: BTreeMap<usize, ReferenceSet> = [(0usize, rs)].into_iter().collect();
        let cfg = AskLossConfig::single_layer(0, Metric::NegL2, 0.5, SForm::Attack)
            .unwrap()
            .with_target(Some(1));
        let loss = ask_loss(&cfg, &feats, &refs).unwrap();
        // equidistant two-way ratio: ln 2 regardless of the far class 2
        assert!((loss - 2.0f64.ln()).abs() < 1e-12);
        let bad = AskLossConfig::single_layer(0, Metric::NegL2, 0.5, SForm::Attack)
            .unwrap()
            .with_target(Some(0));
        assert!(ask_loss(&bad, &feats, &refs).is_err());
    }

    #[test]
    fn weights_must_sum_to_one() {
        let mut layers = BTreeMap::new();
        layers.insert(
            0usize,
            LayerLossConfig {
                weight: 0.6,
                similarity: neg_l2(1.0),
            },
        );
        layers.insert(
            1usize,
            LayerLossConfig {
                weight: 0.5,
                similarity: neg_l2(1.0),
            },
        );
        assert!(AskLossConfig::new(SForm::Attack, layers, None).is_err());
    }
}
