//! Matches two differently sized U-Nets with the linear-space alignment and
//! prints the chosen layer pairs.

use graphstitch::graph::{annotate_progress, build_unet_template, UNetConfig};
use graphstitch::matching::{match_graphs, validate_acyclic, MatchReport, MatchingConfig};

fn main() -> graphstitch::Result<()> {
    let a = build_unet_template(&UNetConfig { image_size: 16, seed: 1, ..UNetConfig::default() })?;
    let b = build_unet_template(&UNetConfig { image_size: 16, depth: 2, base_channels: 6, seed: 2, ..UNetConfig::default() })?;
    let cfg = MatchingConfig::default();
    let m = match_graphs(&a, &b, &cfg)?;
    println!("{} pairs, total similarity {:.3}, acyclic: {}", m.pairs.len(), m.total_score, validate_acyclic(&a, &b, &m)?);
    let report = MatchReport::new(&a, &annotate_progress(&a)?, &b, &annotate_progress(&b)?, &m, &cfg)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
