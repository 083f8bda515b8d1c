//! Deterministic CSV reports and the reproducibility manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ask_core::attack::RobustnessReport;
use ask_core::defense::TrainingLog;
use ask_core::Result;

fn fmt_acc(v: f64) -> String {
    format!("{v:.6}")
}

/// Attack report rows: one line per epsilon of the sweep.
pub fn robustness_csv(
    report: &RobustnessReport,
    layer_set: &[usize],
    k_attack: usize,
    k_classifier: usize,
) -> String {
    let layers = layer_set
        .iter()
        .map(|l| l.to_string())
        .collect::<Vec<_>>()
        .join("+");
    let mut out = String::from("epsilon,layer_set,K_attack,K_classifier,clean_acc,robust_acc,n\n");
    for row in &report.rows {
        let _ = writeln!(
            out,
            "{:.6},{},{},{},{},{},{}",
            row.epsilon,
            layers,
            k_attack,
            k_classifier,
            fmt_acc(report.clean_acc),
            fmt_acc(row.robust_acc),
            report.n
        );
    }
    out
}

/// Per-layer accuracy breakdown for every epsilon (plus the clean row).
pub fn per_layer_csv(report: &RobustnessReport) -> String {
    let mut out = String::from("epsilon,layer,accuracy\n");
    for (l, acc) in &report.clean_per_layer {
        let _ = writeln!(out, "clean,{l},{}", fmt_acc(*acc));
    }
    for row in &report.rows {
        for (l, acc) in &row.per_layer_acc {
            let _ = writeln!(out, "{:.6},{l},{}", row.epsilon, fmt_acc(*acc));
        }
    }
    out
}

pub fn training_log_csv(log: &TrainingLog) -> String {
    let mut out = String::from("epoch,batch,ce_loss,ask_loss,combined\n");
    for r in &log.rows {
        let _ = writeln!(
            out,
            "{},{},{:.8},{:.8},{:.8}",
            r.epoch, r.batch, r.ce_loss, r.ask_loss, r.combined
        );
    }
    out
}

pub fn tune_csv(taus: &std::collections::BTreeMap<usize, f64>, omegas: &std::collections::BTreeMap<usize, f64>) -> String {
    let mut out = String::from("layer,tau,omega\n");
    for (l, tau) in taus {
        let _ = writeln!(out, "{l},{:.6},{:.6}", tau, omegas[l]);
    }
    out
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over the canonical config text; stable across platforms.
pub fn config_hash(canonical: &str) -> u64 {
    let mut h = FNV_OFFSET;
    for b in canonical.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Reproducibility manifest: everything needed to re-run the experiment.
pub fn manifest_text(canonical_config: &str, seed: u64) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "config_hash = {:016x}", config_hash(canonical_config));
    let _ = writeln!(out, "seed = {seed}");
    let _ = writeln!(out, "ask_cli_version = {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(out, "report_schema = 1");
    out.push_str("--- config ---\n");
    out.push_str(canonical_config);
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}
