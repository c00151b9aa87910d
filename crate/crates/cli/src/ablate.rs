//! Grid runs. A grid file is a config file in which any value may be a
//! comma-separated list; one cell is trained per element of the cartesian
//! product, keys varying in file order with the last key fastest.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use jointnlu::config::RunConfig;
use jointnlu::corpus::{load_split, SplitName};
use jointnlu::training::evaluate;
use jointnlu::Error;

use crate::{clean_outputs, run_training, write_file, CmdResult, Failure};

pub const ABLATION_HEADER: &str = "encoder,embedding,bidirectional,slot_f1,intent_acc,semantic_acc";

/// Expand a grid file into one resolved configuration per cell.
pub fn expand_grid(text: &str) -> Result<Vec<RunConfig>, Error> {
    let mut axes: Vec<(String, Vec<String>)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("grid line {}: expected key = v1, v2, ...", i + 1)))?;
        let values: Vec<String> = v.split(',').map(|s| s.trim().to_string()).collect();
        axes.push((k.trim().to_string(), values));
    }
    let mut cells = vec![RunConfig::default()];
    for (k, values) in &axes {
        let mut next = Vec::with_capacity(cells.len() * values.len());
        for base in &cells {
            for v in values {
                let mut c = base.clone();
                c.set(k, v)?;
                next.push(c);
            }
        }
        cells = next;
    }
    for c in &cells {
        c.validate()?;
    }
    Ok(cells)
}

fn embedding_name(c: &RunConfig) -> String {
    match &c.embedding_file {
        None => "learned".into(),
        Some(p) => p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    }
}

pub fn cmd_ablate(data: &Path, grid: &Path, out: &Path) -> CmdResult {
    let text = fs::read_to_string(grid).map_err(|e| Error::Io {
        path: grid.to_path_buf(),
        source: e,
    })?;
    let cells = expand_grid(&text)?;
    let test = load_split(data, SplitName::Test)?;
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let mut csv = format!("{ABLATION_HEADER}\n");
    let mut failed = Vec::new();
    for (i, cfg) in cells.iter().enumerate() {
        let dir = out.join(format!("cell{i:03}"));
        let existed = dir.exists();
        log::info!(
            "cell {}/{}: {} {} bidirectional={}",
            i + 1,
            cells.len(),
            cfg.encoder,
            embedding_name(cfg),
            cfg.bidirectional
        );
        let result = run_training(data, cfg, &dir).and_then(|run| {
            evaluate(
                &run.model,
                &run.outcome.best_params,
                &run.vocabs,
                &test,
                cfg.strict_spans,
            )
        });
        let bidi = if cfg.bidirectional { "on" } else { "off" };
        let prefix = format!("{},{},{bidi}", cfg.encoder, embedding_name(cfg));
        match result {
            Ok(r) => {
                let _ = writeln!(
                    csv,
                    "{prefix},{:.4},{:.4},{:.4}",
                    r.slot_f1, r.intent_acc, r.semantic_acc
                );
            }
            Err(e) => {
                log::error!("cell {i}: error[{}]: {e}", e.code());
                clean_outputs(&dir, existed);
                let _ = writeln!(csv, "{prefix},NaN,NaN,NaN");
                failed.push(format!("cell{i:03}: error[{}]: {e}", e.code()));
            }
        }
        write_file(&out.join("ablation.csv"), &csv)?;
    }
    print!("{csv}");
    if failed.is_empty() {
        return Ok(());
    }
    let errors = out.join("ablation_errors.txt");
    write_file(&errors, &(failed.join("\n") + "\n"))?;
    Err(Failure::new(
        "E_ABLATE",
        format!(
            "{} of {} cells failed, see {}",
            failed.len(),
            cells.len(),
            errors.display()
        ),
    ))
}
