//! Experiment orchestration: fail-fast loading, the tune / attack / defend /
//! evaluate pipeline, and report emission.

use std::collections::BTreeMap;
use std::path::PathBuf;

use ask_core::attack::{
    ask_attack, evaluate_robust_accuracy, tune_temperature_and_weights, AttackConfig, Budget,
    EvalConfig, RobustnessReport, TuneGrid,
};
use ask_core::defense::{train_with_callback, DefenseConfig};
use ask_core::knn::{build_index, dknn_predict, KnnIndex};
use ask_core::loss::{AskLossConfig, LayerLossConfig, SForm, SimilarityConfig};
use ask_core::model::{Encoder, SoftmaxHead};
use ask_core::rng::SeedSplitter;
use ask_core::{io, Error, LabeledDataset, Result};
use rayon::prelude::*;

use crate::config::{EncoderSpec, ExperimentConfig, KeyValues};
use crate::report;

/// Everything loaded and validated, before any compute.
pub struct LoadedExperiment {
    pub cfg: ExperimentConfig,
    pub canonical: String,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub encoder: Encoder,
    pub head: Option<SoftmaxHead>,
}

/// Parses, validates, and loads every input named by the config. No stage
/// output is produced here; any failure aborts before compute starts.
pub fn load(kv: &KeyValues) -> Result<LoadedExperiment> {
    let cfg = ExperimentConfig::from_keyvalues(kv)?;
    cfg.check_files()?;
    let canonical = kv.canonical_text();

    let train_full = io::load_idx(&cfg.train_images, &cfg.train_labels)?;
    let test_full = io::load_idx(&cfg.test_images, &cfg.test_labels)?;
    if train_full.dim() != test_full.dim() {
        return Err(Error::rejected(format!(
            "train dimension {} does not match test dimension {}",
            train_full.dim(),
            test_full.dim()
        )));
    }
    let train = if cfg.train_subset > 0 {
        train_full.head(cfg.train_subset)?
    } else {
        train_full
    };
    let test = if cfg.test_subset > 0 {
        test_full.head(cfg.test_subset)?
    } else {
        test_full
    };

    let splitter = SeedSplitter::new(cfg.seed);
    let (encoder, head) = match &cfg.encoder {
        EncoderSpec::Identity => {
            if cfg.taps != vec![0] {
                return Err(Error::rejected("identity encoder exposes only tap 0"));
            }
            (Encoder::identity(train.dim()), None)
        }
        EncoderSpec::Mlp(dims) => {
            if dims[0] != train.dim() {
                return Err(Error::rejected(format!(
                    "mlp input dimension {} does not match data dimension {}",
                    dims[0],
                    train.dim()
                )));
            }
            let mut rng = splitter.fork("encoder.init");
            let enc = Encoder::mlp(dims, &cfg.taps, &mut rng)?;
            let mut hrng = splitter.fork("head.init");
            let head = SoftmaxHead::init(train.class_count(), enc.output_dim(), &mut hrng);
            (enc, Some(head))
        }
        EncoderSpec::File(path) => {
            let (enc, head) = io::load_model(path)?;
            (enc.with_taps(cfg.taps.clone())?, head)
        }
    };
    if encoder.input_dim() != train.dim() {
        return Err(Error::rejected(format!(
            "encoder input dimension {} does not match data dimension {}",
            encoder.input_dim(),
            train.dim()
        )));
    }

    Ok(LoadedExperiment {
        cfg,
        canonical,
        train,
        test,
        encoder,
        head,
    })
}

/// One index per tapped layer over the reference pool.
pub fn build_indexes(
    train: &LabeledDataset,
    encoder: &Encoder,
    cfg: &ExperimentConfig,
) -> Result<BTreeMap<usize, KnnIndex>> {
    cfg.taps
        .iter()
        .map(|&l| Ok((l, build_index(train, encoder, l, cfg.metric)?)))
        .collect()
}

fn attack_loss_config(cfg: &ExperimentConfig, tau: f64, omegas: &BTreeMap<usize, f64>) -> Result<AskLossConfig> {
    let layers: BTreeMap<usize, LayerLossConfig> = cfg
        .attack_layers
        .iter()
        .map(|&l| {
            Ok((
                l,
                LayerLossConfig {
                    weight: omegas[&l],
                    similarity: SimilarityConfig::new(cfg.metric, tau)?,
                },
            ))
        })
        .collect::<Result<_>>()?;
    AskLossConfig::new(SForm::Attack, layers, None)
}

fn base_attack_config(cfg: &ExperimentConfig, tau: f64, omegas: &BTreeMap<usize, f64>) -> Result<AttackConfig> {
    let eps0 = cfg.epsilons[0];
    Ok(AttackConfig {
        budget: Budget {
            epsilon: eps0,
            step_size: cfg.step_rule.resolve(eps0, cfg.steps),
            steps: cfg.steps,
        },
        k_pos: cfg.k_pos,
        k_neg: cfg.k_neg,
        reference_mode: cfg.reference_mode,
        loss: attack_loss_config(cfg, tau, omegas)?,
        targeted: None,
        reseed_references: false,
        seed: cfg.seed,
    })
}

fn default_omegas(cfg: &ExperimentConfig) -> BTreeMap<usize, f64> {
    cfg.attack_layers
        .iter()
        .zip(&cfg.omegas)
        .map(|(&l, &w)| (l, w))
        .collect()
}

/// Summary returned by [`run_experiment`], one entry per emitted file.
pub struct RunOutputs {
    pub files: Vec<PathBuf>,
    pub clean_acc: f64,
    pub robust_acc: Vec<(f64, f64)>,
}

/// Prefixes message-carrying errors with the pipeline stage that failed.
/// The manifest is written last, so its absence marks an incomplete run.
fn stage_err(stage: &str, e: Error) -> Error {
    match e {
        Error::RejectedInput(m) => Error::RejectedInput(format!("{stage} stage: {m}")),
        Error::Contract(m) => Error::Contract(format!("{stage} stage: {m}")),
        Error::NonFiniteGradient(m) => Error::NonFiniteGradient(format!("{stage} stage: {m}")),
        other => other,
    }
}

/// Full pipeline: tune (optional) -> attack sweep -> defense (optional) ->
/// evaluation. Emits CSV reports and a reproducibility manifest; every output
/// is a deterministic function of (config, seed, dataset bytes).
pub fn run_experiment(kv: &KeyValues) -> Result<RunOutputs> {
    let loaded = load(kv)?;
    let cfg = &loaded.cfg;
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out)?;
    let mut files = Vec::new();

    let indexes =
        build_indexes(&loaded.train, &loaded.encoder, cfg).map_err(|e| stage_err("index", e))?;

    // ---- tune ----
    let mut tau = cfg.tau;
    let mut omegas = default_omegas(cfg);
    if !cfg.tune_taus.is_empty() {
        let batch = loaded.test.head(cfg.tune_batch.min(loaded.test.len()))?;
        let base = base_attack_config(cfg, tau, &omegas)?;
        let grid = TuneGrid {
            taus: cfg.tune_taus.clone(),
            omegas: vec![cfg.omegas.clone()],
        };
        let (taus, tuned_omegas) = tune_temperature_and_weights(
            &batch,
            &grid,
            &loaded.encoder,
            &indexes,
            &base,
            cfg.classifier_k,
        )
        .map_err(|e| stage_err("tune", e))?;
        tau = taus.values().next().copied().unwrap_or(cfg.tau);
        omegas = tuned_omegas.clone();
        let path = out.join("tune.csv");
        report::write_text(&path, &report::tune_csv(&taus, &tuned_omegas))?;
        files.push(path);
    }

    // ---- attack sweep ----
    let eval_cfg = EvalConfig {
        base: base_attack_config(cfg, tau, &omegas)?,
        epsilons: cfg.epsilons.clone(),
        step_rule: cfg.step_rule,
        classifier_k: cfg.classifier_k,
        seed: cfg.seed,
    };
    let sweep = evaluate_robust_accuracy(
        &loaded.test,
        &loaded.encoder,
        &indexes,
        &indexes,
        &eval_cfg,
    )
    .map_err(|e| stage_err("attack", e))?;
    let report_path = out.join("report.csv");
    report::write_text(
        &report_path,
        &report::robustness_csv(&sweep, &cfg.attack_layers, cfg.k_pos, cfg.classifier_k),
    )?;
    files.push(report_path);
    let layers_path = out.join("report_layers.csv");
    report::write_text(&layers_path, &report::per_layer_csv(&sweep))?;
    files.push(layers_path);

    if cfg.save_adversarial {
        for (i, &eps) in cfg.epsilons.iter().enumerate() {
            let (advs, _, _) = attack_subset(
                &loaded.test,
                &loaded.encoder,
                &indexes,
                &indexes,
                cfg,
                tau,
                &omegas,
                eps,
            )?;
            let path = out.join(format!("adversarial_eps{i}.askm"));
            io::save_matrix(&path, &advs)?;
            files.push(path);
        }
        let labels_path = out.join("adversarial_labels.askl");
        io::save_labels(&labels_path, loaded.test.labels(), loaded.test.class_count())?;
        files.push(labels_path);
    }

    // ---- defense (optional) ----
    if cfg.defend {
        let (defended_files, _) =
            run_defense(&loaded, &mut files).map_err(|e| stage_err("defense", e))?;
        files.extend(defended_files);
    }

    // ---- manifest ----
    let manifest_path = out.join("manifest.txt");
    report::write_text(&manifest_path, &report::manifest_text(&loaded.canonical, cfg.seed))?;
    files.push(manifest_path);

    Ok(RunOutputs {
        files,
        clean_acc: sweep.clean_acc,
        robust_acc: sweep.rows.iter().map(|r| (r.epsilon, r.robust_acc)).collect(),
    })
}

/// Attacks every test row at one epsilon, returning the adversarial matrix
/// plus clean/robust accuracy.
#[allow(clippy::too_many_arguments)]
pub fn attack_subset(
    test: &LabeledDataset,
    encoder: &Encoder,
    attack_indexes: &BTreeMap<usize, KnnIndex>,
    classifier_indexes: &BTreeMap<usize, KnnIndex>,
    cfg: &ExperimentConfig,
    tau: f64,
    omegas: &BTreeMap<usize, f64>,
    eps: f64,
) -> Result<(io::Matrix, f64, f64)> {
    let base = base_attack_config(cfg, tau, omegas)?
        .with_epsilon(eps, cfg.step_rule.resolve(eps, cfg.steps));
    let rows: Result<Vec<(Vec<f64>, bool, bool)>> = (0..test.len())
        .into_par_iter()
        .map(|i| {
            let per_example = base
                .clone()
                .with_seed(SeedSplitter::new(cfg.seed).child_seed(&format!("example/{i}")));
            let adv = ask_attack(test.row(i), test.label(i), encoder, attack_indexes, &per_example)?;
            let clean_ok = dknn_predict(test.row(i), encoder, classifier_indexes, cfg.classifier_k)?
                .0
                == test.label(i);
            let adv_ok = dknn_predict(&adv, encoder, classifier_indexes, cfg.classifier_k)?.0
                == test.label(i);
            Ok((adv, clean_ok, adv_ok))
        })
        .collect();
    let rows = rows?;
    let n = rows.len();
    let clean = rows.iter().filter(|(_, c, _)| *c).count() as f64 / n as f64;
    let robust = rows.iter().filter(|(_, _, a)| *a).count() as f64 / n as f64;
    let mut values = Vec::with_capacity(n * test.dim());
    for (adv, _, _) in rows {
        values.extend(adv);
    }
    Ok((io::Matrix::new(n, test.dim(), values)?, clean, robust))
}

/// Defense training plus post-defense evaluation sweep.
fn run_defense(loaded: &LoadedExperiment, files: &mut Vec<PathBuf>) -> Result<(Vec<PathBuf>, RobustnessReport)> {
    let cfg = &loaded.cfg;
    let out = &cfg.output_dir;
    let mut encoder = loaded.encoder.clone();
    if encoder.param_count() == 0 {
        return Err(Error::rejected(
            "defense training needs a parametric encoder (identity has no weights)",
        ));
    }
    let mut head = loaded
        .head
        .clone()
        .ok_or_else(|| Error::rejected("defense training needs a classification head"))?;

    let deepest = *cfg.taps.iter().max().unwrap();
    let ask = AskLossConfig::single_layer(deepest, cfg.metric, cfg.defense_tau, SForm::Defense)?;
    let g_budget = Budget::new(
        cfg.defense_epsilon,
        (2.5 * cfg.defense_epsilon / cfg.defense_steps.max(1) as f64).min(cfg.defense_epsilon),
        cfg.defense_steps,
    )?;
    let dcfg = DefenseConfig {
        lambda: cfg.defense_lambda,
        epochs: cfg.defense_epochs,
        batch_size: cfg.defense_batch_size,
        g1: g_budget,
        g2: g_budget,
        ask,
        ref_per_class: cfg.defense_m,
        learning_rate: cfg.defense_lr,
        momentum: cfg.defense_momentum,
        seed: cfg.seed,
    };
    let ckpt_dir = out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    let mut ckpt_files = Vec::new();
    let log = train_with_callback(&loaded.train, &mut encoder, &mut head, &dcfg, |epoch, enc, h| {
        let p = ckpt_dir.join(format!("epoch{epoch}.aske"));
        io::save_model(&p, enc, Some(h))?;
        ckpt_files.push(p);
        Ok(())
    })?;
    files.extend(ckpt_files);

    let log_path = out.join("defense_log.csv");
    report::write_text(&log_path, &report::training_log_csv(&log))?;
    let model_path = out.join("model_defended.aske");
    io::save_model(&model_path, &encoder, Some(&head))?;

    // evaluate the defended model under the same sweep
    let indexes = build_indexes(&loaded.train, &encoder, cfg)?;
    let omegas = default_omegas(cfg);
    let eval_cfg = EvalConfig {
        base: base_attack_config(cfg, cfg.tau, &omegas)?,
        epsilons: cfg.epsilons.clone(),
        step_rule: cfg.step_rule,
        classifier_k: cfg.classifier_k,
        seed: cfg.seed,
    };
    let sweep = evaluate_robust_accuracy(&loaded.test, &encoder, &indexes, &indexes, &eval_cfg)?;
    let report_path = out.join("defense_report.csv");
    report::write_text(
        &report_path,
        &report::robustness_csv(&sweep, &cfg.attack_layers, cfg.k_pos, cfg.classifier_k),
    )?;

    Ok((vec![log_path, model_path, report_path], sweep))
}

/// DkNN predictions for the test subset: `(row, label, prediction)` triples.
pub fn predict_subset(
    test: &LabeledDataset,
    encoder: &Encoder,
    indexes: &BTreeMap<usize, KnnIndex>,
    k: usize,
) -> Result<Vec<(usize, usize, usize)>> {
    (0..test.len())
        .into_par_iter()
        .map(|i| {
            let (pred, _) = dknn_predict(test.row(i), encoder, indexes, k)?;
            Ok((i, test.label(i), pred))
        })
        .collect()
}
