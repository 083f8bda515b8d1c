//! `ask` — soft-kNN adversarial robustness harness.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ask_cli::config::KeyValues;
use ask_cli::{config, experiment, report};
use ask_core::attack::TuneGrid;
use ask_core::{io, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "ask",
    about = "Soft-kNN adversarial robustness toolkit: DkNN prediction, ASK attack, ASK defense"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Key-value config file.
    #[arg(long, short)]
    config: PathBuf,
    /// Inline overrides, e.g. `-S seed=7 -S k=10`.
    #[arg(long = "set", short = 'S')]
    set: Vec<String>,
}

impl ConfigArgs {
    fn keyvalues(&self) -> Result<KeyValues> {
        let mut kv = KeyValues::from_file(&self.config)?;
        kv.apply_overrides(&self.set)?;
        Ok(kv)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build per-layer kNN indexes over the reference pool and persist them.
    Index(ConfigArgs),
    /// DkNN predictions for the test subset; writes predictions.csv.
    Predict(ConfigArgs),
    /// Attack the test subset at the first configured epsilon; writes the
    /// adversarial matrix and a report row.
    Attack(ConfigArgs),
    /// Run defense training; writes the training log, checkpoints, and the
    /// defended model.
    Defend(ConfigArgs),
    /// Cross-validate temperature/weights on a small batch; writes tune.csv.
    Tune(ConfigArgs),
    /// Full experiment: tune -> attack sweep -> optional defense -> reports.
    Eval(ConfigArgs),
    /// Summarize the reports in an output directory.
    Report {
        /// Output directory of a previous run.
        #[arg(long, short)]
        dir: PathBuf,
    },
}

fn cmd_index(args: &ConfigArgs) -> Result<()> {
    let kv = args.keyvalues()?;
    let loaded = experiment::load(&kv)?;
    let indexes = experiment::build_indexes(&loaded.train, &loaded.encoder, &loaded.cfg)?;
    std::fs::create_dir_all(&loaded.cfg.output_dir)?;
    for (layer, index) in &indexes {
        let path = loaded.cfg.output_dir.join(format!("index_layer{layer}.aski"));
        io::save_index(&path, index)?;
        println!("wrote {}", path.display());
    }
    write_manifest(&loaded)?;
    Ok(())
}

// every emitted report is accompanied by the seed-bearing manifest
fn write_manifest(loaded: &experiment::LoadedExperiment) -> Result<()> {
    report::write_text(
        &loaded.cfg.output_dir.join("manifest.txt"),
        &report::manifest_text(&loaded.canonical, loaded.cfg.seed),
    )
}

fn cmd_predict(args: &ConfigArgs) -> Result<()> {
    let kv = args.keyvalues()?;
    let loaded = experiment::load(&kv)?;
    let indexes = experiment::build_indexes(&loaded.train, &loaded.encoder, &loaded.cfg)?;
    let rows = experiment::predict_subset(
        &loaded.test,
        &loaded.encoder,
        &indexes,
        loaded.cfg.classifier_k,
    )?;
    let mut csv = String::from("row,label,prediction\n");
    let mut hits = 0usize;
    for (i, y, p) in &rows {
        csv.push_str(&format!("{i},{y},{p}\n"));
        if y == p {
            hits += 1;
        }
    }
    let path = loaded.cfg.output_dir.join("predictions.csv");
    report::write_text(&path, &csv)?;
    write_manifest(&loaded)?;
    println!(
        "accuracy {:.4} over {} rows -> {}",
        hits as f64 / rows.len() as f64,
        rows.len(),
        path.display()
    );
    Ok(())
}

fn cmd_attack(args: &ConfigArgs) -> Result<()> {
    let kv = args.keyvalues()?;
    let loaded = experiment::load(&kv)?;
    let cfg = &loaded.cfg;
    let indexes = experiment::build_indexes(&loaded.train, &loaded.encoder, cfg)?;
    let omegas = cfg
        .attack_layers
        .iter()
        .zip(&cfg.omegas)
        .map(|(&l, &w)| (l, w))
        .collect();
    let eps = cfg.epsilons[0];
    let (advs, clean, robust) = experiment::attack_subset(
        &loaded.test,
        &loaded.encoder,
        &indexes,
        &indexes,
        cfg,
        cfg.tau,
        &omegas,
        eps,
    )?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let adv_path = cfg.output_dir.join("adversarial.askm");
    io::save_matrix(&adv_path, &advs)?;
    let lab_path = cfg.output_dir.join("adversarial_labels.askl");
    io::save_labels(&lab_path, loaded.test.labels(), loaded.test.class_count())?;
    let csv = format!(
        "epsilon,layer_set,K_attack,K_classifier,clean_acc,robust_acc,n\n{:.6},{},{},{},{:.6},{:.6},{}\n",
        eps,
        cfg.attack_layers
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join("+"),
        cfg.k_pos,
        cfg.classifier_k,
        clean,
        robust,
        loaded.test.len()
    );
    let report_path = cfg.output_dir.join("report.csv");
    report::write_text(&report_path, &csv)?;
    write_manifest(&loaded)?;
    println!(
        "epsilon {eps:.6}: clean {clean:.4} -> robust {robust:.4}; wrote {}, {}",
        adv_path.display(),
        report_path.display()
    );
    Ok(())
}

fn cmd_tune(args: &ConfigArgs) -> Result<()> {
    let kv = args.keyvalues()?;
    let loaded = experiment::load(&kv)?;
    let cfg = &loaded.cfg;
    if cfg.tune_taus.is_empty() {
        return Err(ask_core::Error::rejected(
            "tune requires a nonempty tune_taus list",
        ));
    }
    let indexes = experiment::build_indexes(&loaded.train, &loaded.encoder, cfg)?;
    let batch = loaded.test.head(cfg.tune_batch.min(loaded.test.len()))?;
    let omegas = cfg
        .attack_layers
        .iter()
        .zip(&cfg.omegas)
        .map(|(&l, &w)| (l, w))
        .collect();
    let base = experiment_base(cfg, &omegas)?;
    let grid = TuneGrid {
        taus: cfg.tune_taus.clone(),
        omegas: vec![cfg.omegas.clone()],
    };
    let (taus, tuned) = ask_core::attack::tune_temperature_and_weights(
        &batch,
        &grid,
        &loaded.encoder,
        &indexes,
        &base,
        cfg.classifier_k,
    )?;
    let path = cfg.output_dir.join("tune.csv");
    report::write_text(&path, &report::tune_csv(&taus, &tuned))?;
    write_manifest(&loaded)?;
    println!("tuned tau {taus:?} -> {}", path.display());
    Ok(())
}

// the tune subcommand needs the same base config the pipeline builds
fn experiment_base(
    cfg: &config::ExperimentConfig,
    omegas: &std::collections::BTreeMap<usize, f64>,
) -> Result<ask_core::attack::AttackConfig> {
    use ask_core::attack::{AttackConfig, Budget};
    use ask_core::loss::{AskLossConfig, LayerLossConfig, SForm, SimilarityConfig};
    let eps0 = cfg.epsilons[0];
    let layers = cfg
        .attack_layers
        .iter()
        .map(|&l| {
            Ok((
                l,
                LayerLossConfig {
                    weight: omegas[&l],
                    similarity: SimilarityConfig::new(cfg.metric, cfg.tau)?,
                },
            ))
        })
        .collect::<Result<_>>()?;
    Ok(AttackConfig {
        budget: Budget {
            epsilon: eps0,
            step_size: cfg.step_rule.resolve(eps0, cfg.steps),
            steps: cfg.steps,
        },
        k_pos: cfg.k_pos,
        k_neg: cfg.k_neg,
        reference_mode: cfg.reference_mode,
        loss: AskLossConfig::new(SForm::Attack, layers, None)?,
        targeted: None,
        reseed_references: false,
        seed: cfg.seed,
    })
}

fn cmd_defend(args: &ConfigArgs) -> Result<()> {
    let mut kv = args.keyvalues()?;
    kv.apply_overrides(&["defend=true".to_string()])?;
    let out = experiment::run_experiment(&kv)?;
    println!("clean accuracy {:.4}", out.clean_acc);
    for (eps, acc) in &out.robust_acc {
        println!("epsilon {eps:.6}: robust accuracy {acc:.4}");
    }
    for f in &out.files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn cmd_eval(args: &ConfigArgs) -> Result<()> {
    let kv = args.keyvalues()?;
    let out = experiment::run_experiment(&kv)?;
    println!("clean accuracy {:.4}", out.clean_acc);
    for (eps, acc) in &out.robust_acc {
        println!("epsilon {eps:.6}: robust accuracy {acc:.4}");
    }
    for f in &out.files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn cmd_report(dir: &Path) -> Result<()> {
    let mut found = false;
    for name in ["report.csv", "defense_report.csv", "tune.csv", "defense_log.csv"] {
        let path = dir.join(name);
        if path.is_file() {
            found = true;
            println!("== {} ==", path.display());
            print!("{}", std::fs::read_to_string(&path)?);
        }
    }
    if !found {
        return Err(ask_core::Error::rejected(format!(
            "no reports found under {}",
            dir.display()
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Index(args) => cmd_index(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Attack(args) => cmd_attack(args),
        Command::Defend(args) => cmd_defend(args),
        Command::Tune(args) => cmd_tune(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Report { dir } => cmd_report(dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(ask_cli::exit_code(&e) as u8)
        }
    }
}
