//! Writes bi-objective and positional tables and plots for a finished run
//! directory, e.g. one produced by the `run_matrix` example.

use std::path::PathBuf;

use graphstitch::evaluation::read_records;
use graphstitch::harness::write_report;

fn main() -> graphstitch::Result<()> {
    let root = PathBuf::from(std::env::args().nth(1).expect("usage: report <run dir> [stitch approach dir]"));
    let mut records = Vec::new();
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(&root)
        .map_err(|e| graphstitch::Error::MissingArtifact(format!("{}: {e}", root.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    dirs.sort();
    for d in dirs.iter().filter(|d| d.join("test.csv").exists()) {
        records.extend(read_records(&d.join("test.csv"))?);
    }
    let candidates = match std::env::args().nth(2) {
        Some(s) => Some(read_records(&root.join(s).join("candidates_test.csv"))?),
        None => None,
    };
    for p in write_report(&records, candidates.as_deref(), &root.join("report"))? {
        println!("{}", p.display());
    }
    Ok(())
}
