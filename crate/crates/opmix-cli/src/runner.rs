//! Run execution and persistence.
//!
//! A run directory is self-describing: the verbatim config snapshot and its
//! hash sit next to the per-cell stage records, so every report can be
//! recomputed from disk alone. Cells execute sequentially in config order
//! (strategy, then ordering, then seed); they are independent, so nothing in
//! the layout assumes an execution order.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use opmix::baselines::{run_strategy, Strategy};
use opmix::corpus::DomainCorpus;
use opmix::io::save_model;
use opmix::pipeline::StageRecord;
use opmix::{Error, Result};

use crate::config::ExperimentConfig;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    out
}

/// Where one cell's records live, relative to the run directory.
pub fn cell_dir(run_dir: &Path, strategy: &str, ordering: usize, seed: u64) -> PathBuf {
    run_dir
        .join("cells")
        .join(strategy)
        .join(format!("ord{ordering}"))
        .join(format!("seed{seed}"))
}

/// Outcome of a completed run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub config_sha256: String,
    pub cells: usize,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn record_failure(run_dir: &Path, context: &str, err: &Error) {
    // Best effort: the original error must surface even if the marker fails.
    let body = serde_json::json!({ "error": err.to_string(), "cell": context });
    let _ = write_file(&run_dir.join("error.json"), body.to_string().as_bytes());
    let _ = write_file(&run_dir.join("FAILED"), context.as_bytes());
}

fn write_cell(
    dir: &Path,
    records: &[StageRecord],
    final_model: &opmix::model::ModelParams,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    for record in records {
        let json = serde_json::to_string_pretty(record)
            .map_err(|e| Error::invalid(format!("record serialization failed: {e}")))?;
        write_file(&dir.join(format!("stage_{}.json", record.stage)), json.as_bytes())?;
        write_file(
            &dir.join(format!("stage_{}.txt", record.stage)),
            record.to_text().as_bytes(),
        )?;
    }
    save_model(&dir.join("final_model.bin"), final_model)?;
    Ok(())
}

fn summary_rows(out: &mut String, strategy: &str, ordering: usize, seed: u64, records: &[StageRecord]) {
    for r in records {
        let avg = r.final_losses.iter().sum::<f64>() / r.final_losses.len() as f64;
        let losses = r
            .eval_domains
            .iter()
            .zip(&r.final_losses)
            .map(|(d, l)| format!("{d}:{l}"))
            .collect::<Vec<_>>()
            .join(";");
        let _ = writeln!(
            out,
            "{strategy},{ordering},{seed},{},{},{avg},{losses},{},{}",
            r.stage,
            r.new_domains.join(";"),
            r.train_steps,
            r.probe_steps,
        );
    }
}

/// Executes the full strategy x ordering x seed matrix into `out_dir`.
///
/// The directory is created if needed; an identical re-run rewrites the same
/// bytes. On a cell failure everything already computed stays on disk next
/// to a FAILED marker and a machine-readable error.json.
pub fn run(cfg: &ExperimentConfig, raw_config: &str, out_dir: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let strategies: Vec<Strategy> = cfg.strategies()?;
    let orderings = cfg.orderings();
    let corpora: Vec<DomainCorpus> = cfg.build_corpora()?;
    let base = cfg.base_model()?;

    fs::create_dir_all(out_dir)?;
    write_file(&out_dir.join("config.toml"), raw_config.as_bytes())?;
    let hash = sha256_hex(raw_config.as_bytes());
    write_file(&out_dir.join("config.sha256"), format!("{hash}\n").as_bytes())?;
    // A fresh run must not inherit a stale failure marker.
    let _ = fs::remove_file(out_dir.join("FAILED"));
    let _ = fs::remove_file(out_dir.join("error.json"));

    let mut summary = String::from(
        "strategy,ordering,seed,stage,new_domains,avg_loss,losses,train_steps,probe_steps\n",
    );
    let mut cells = 0usize;
    for strategy in &strategies {
        for (oi, ordering) in orderings.iter().enumerate() {
            for &seed in &cfg.run.seeds {
                let context = format!("{}/ord{oi}/seed{seed}", strategy.name());
                let cell = (|| -> Result<Vec<StageRecord>> {
                    let ccfg = cfg.continual_config(seed)?;
                    let (model, records) =
                        run_strategy(strategy.clone(), &base, ordering, &ccfg, &corpora)?;
                    write_cell(&cell_dir(out_dir, strategy.name(), oi, seed), &records, &model)?;
                    Ok(records)
                })();
                match cell {
                    Ok(records) => {
                        summary_rows(&mut summary, strategy.name(), oi, seed, &records);
                        cells += 1;
                    }
                    Err(e) => {
                        record_failure(out_dir, &context, &e);
                        return Err(e);
                    }
                }
            }
        }
    }
    write_file(&out_dir.join("summary.csv"), summary.as_bytes())?;
    Ok(RunOutcome {
        run_dir: out_dir.to_path_buf(),
        config_sha256: hash,
        cells,
    })
}

/// Loads the config snapshot stored inside a run directory.
pub fn load_snapshot(run_dir: &Path) -> Result<(ExperimentConfig, String, String)> {
    let path = run_dir.join("config.toml");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::invalid(format!("no config snapshot at {}: {e}", path.display())))?;
    let cfg = ExperimentConfig::from_toml(&text)?;
    let hash = sha256_hex(text.as_bytes());
    Ok((cfg, text, hash))
}

/// Reads one cell's records back; slot `t` holds stage `t + 1` or `None`
/// where the file is missing or unreadable. Gaps are data, not errors: the
/// report layer notes them instead of failing.
pub fn load_cell(
    run_dir: &Path,
    strategy: &str,
    ordering: usize,
    seed: u64,
    stages: usize,
) -> Vec<Option<StageRecord>> {
    let dir = cell_dir(run_dir, strategy, ordering, seed);
    (1..=stages)
        .map(|stage| {
            let text = fs::read_to_string(dir.join(format!("stage_{stage}.json"))).ok()?;
            serde_json::from_str::<StageRecord>(&text).ok()
        })
        .collect()
}
