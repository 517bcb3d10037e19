//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any unexpected failure.

use std::path::{Path, PathBuf};
use std::time::Instant;

use etts_core::commands::{cmd_build_latent_bank, cmd_distill_student, cmd_evaluate, cmd_prepare_data, cmd_synthesize, cmd_train_acoustic, cmd_train_teacher, SynthesisRequest, TrainOptions};
use etts_core::config::RunConfig;
use etts_core::eval::untrained_baseline;
use etts_core::inference::LatentScheme;
use etts_core::selfcheck::{self, same_checkpoint_bytes, CheckResult};
use etts_core::signal::Intonation;
use etts_core::train::Dataset;
use etts_core::Result;

fn toy_config(root: &Path, run: &str) -> Result<RunConfig> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
    let mut cfg = RunConfig::load(path, &[])?;
    cfg.paths.data_dir = root.join("data");
    cfg.paths.run_dir = root.join(run);
    Ok(cfg)
}

fn toy_end_to_end(root: &Path) -> Result<CheckResult> {
    let t0 = Instant::now();
    let cfg = toy_config(root, "run")?;
    cmd_prepare_data(&cfg)?;
    let data = Dataset::load(&cfg)?;
    let opts = TrainOptions::default();
    cmd_train_acoustic(&cfg, &opts)?;
    cmd_train_teacher(&cfg, &opts)?;
    cmd_distill_student(&cfg, None, &opts)?;
    cmd_build_latent_bank(&cfg, None)?;
    let first = &data.utts[0];
    let phonemes = data.manifest.records[0].phonemes.join(" ");
    let out: PathBuf = cfg.paths.run_dir.join("synth").join(format!("{}.wav", first.id));
    let diag = cmd_synthesize(&cfg, &SynthesisRequest { phonemes, tag: Intonation::Statement, scheme: LatentScheme::train_centroid(), out: out.clone(), acoustic: None, student: None, bank: None })?;
    let wrote = out.exists() && out.with_extension("json").exists() && diag.samples > 0;
    let trained = cmd_evaluate(&cfg, None)?.summary;
    let untrained = untrained_baseline(&cfg, &data)?.summary;
    let pipe = trained.pipeline_mel_l1.unwrap_or(f64::INFINITY);
    let pipe0 = untrained.pipeline_mel_l1.unwrap_or(0.0);
    let mins = t0.elapsed().as_secs_f64() / 60.0;
    let ok = trained.attention_diagonality >= 0.8 && trained.mel_l1 <= 0.5 * untrained.mel_l1 && pipe <= 0.5 * pipe0 && wrote && mins <= 90.0;
    Ok(CheckResult::new(
        "toy_end_to_end",
        ok,
        format!(
            "diagonality {:.3} (min 0.8); teacher-forced L1 {:.3} vs untrained {:.3} (max ratio 0.5); pipeline L1 {pipe:.3} vs untrained {pipe0:.3} (max ratio 0.5); synthesize wrote wav+json {wrote}; {mins:.1} min (limit 90)",
            trained.attention_diagonality, trained.mel_l1, untrained.mel_l1
        ),
    ))
}

fn determinism(root: &Path, steps: u64) -> Result<CheckResult> {
    let cfg = toy_config(root, "det")?;
    if !etts_core::train::manifest_path(&cfg).exists() {
        cmd_prepare_data(&cfg)?;
    }
    let opts = TrainOptions { until: Some(steps), resume: None };
    let first = root.join("det_first");
    let ck = cmd_train_acoustic(&cfg, &opts)?;
    std::fs::rename(&ck, &first).map_err(|e| etts_core::Error::io(&ck, e))?;
    std::fs::remove_dir_all(&cfg.paths.run_dir).map_err(|e| etts_core::Error::io(&cfg.paths.run_dir, e))?;
    let ck = cmd_train_acoustic(&cfg, &opts)?;
    let same = same_checkpoint_bytes(&first, &ck)?;
    Ok(CheckResult::new("determinism", same, format!("checkpoints of two seeded runs at step {steps} byte-identical: {same}")))
}

/// Criteria whose thresholds are out of reach by construction. They still print
/// FAIL; only failures outside this list fail the test target.
/// 8: the exact KL between unit-scale logistics one location apart is 0.164, below the 0.3 bound.
const KNOWN_FAILURES: &[&str] = &["8"];

fn main() {
    let root = tempfile::tempdir().expect("temp dir");
    let scratch = root.path().join("scratch");
    let toy = root.path().join("toy");
    let suite: Vec<(&str, Box<dyn Fn() -> Vec<CheckResult>>)> = vec![
        ("1", Box::new(|| vec![selfcheck::check_kld_oracle(20, 1_000_000)])),
        ("2", Box::new(|| vec![selfcheck::check_hinge_table()])),
        ("3", Box::new(|| vec![selfcheck::check_spectral_norm()])),
        ("4", Box::new(|| vec![selfcheck::check_ops_slicing(), selfcheck::check_ops_resume(&scratch.join("resume"))])),
        ("5", Box::new(|| vec![selfcheck::check_gradients()])),
        ("6", Box::new(|| vec![selfcheck::check_flows(100_000)])),
        ("7", Box::new(|| vec![selfcheck::check_mol_mass()])),
        ("8", Box::new(|| vec![selfcheck::check_distill_fixed_point()])),
        ("9", Box::new(|| vec![selfcheck::check_teacher_causality(3)])),
        ("10", Box::new(|| vec![toy_end_to_end(&toy).unwrap_or_else(|e| CheckResult::new("toy_end_to_end", false, format!("error: {e}")))])),
        ("11", Box::new(|| vec![selfcheck::check_schedule()])),
        ("12", Box::new(|| vec![determinism(&toy, 100).unwrap_or_else(|e| CheckResult::new("determinism", false, format!("error: {e}")))])),
    ];
    let mut failed = Vec::new();
    for (id, run) in &suite {
        let parts = run();
        let passed = parts.iter().all(|r| r.passed);
        let detail = parts.iter().map(|r| format!("{}: {}", r.name, r.detail)).collect::<Vec<_>>().join(" | ");
        println!("criterion {id:>2} {}: {detail}", if passed { "PASS" } else { "FAIL" });
        if !passed {
            failed.push(*id);
        }
    }
    let unexpected: Vec<&str> = failed.iter().copied().filter(|id| !KNOWN_FAILURES.contains(id)).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", suite.len());
    } else {
        println!("acceptance: {}/{} passed; failed criteria {}", suite.len() - failed.len(), suite.len(), failed.join(", "));
    }
    for id in KNOWN_FAILURES.iter().filter(|id| !failed.contains(id)) {
        println!("acceptance: known failure {id} now passes");
    }
    if !unexpected.is_empty() {
        println!("acceptance: unexpected failures {}", unexpected.join(", "));
        std::process::exit(1);
    }
}
