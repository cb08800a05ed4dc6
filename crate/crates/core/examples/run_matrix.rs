//! Runs the full approach matrix of the default two-party scenario and
//! prints per-approach wall time and test Dice.

use std::time::Instant;

use graphstitch::evaluation::{mean_dice, read_records};
use graphstitch::harness::{Approach, Pipeline, ScenarioConfig};

fn main() -> graphstitch::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let out = std::env::temp_dir().join("graphstitch-matrix");
    let scenario = ScenarioConfig { seed, ..ScenarioConfig::default() };
    let pipeline = Pipeline::new(scenario, &out, 1)?;
    let labels: Vec<String> = pipeline.labels().iter().map(|s| s.to_string()).collect();
    let total = Instant::now();
    for a in Approach::all() {
        let t = Instant::now();
        let paths = pipeline.run(a)?;
        let mut line = format!("{:<20} {:>7.1}s", pipeline.label(a), t.elapsed().as_secs_f64());
        if let Some(test) = paths.iter().find(|p| p.ends_with("test.csv")) {
            let recs = read_records(test)?;
            for l in &labels {
                let approach = recs.iter().map(|r| r.approach.clone()).find(|x| !x.contains('/') || x.ends_with("/s2")).unwrap_or_default();
                let own: Vec<_> = recs.iter().filter(|r| &r.dataset == l && r.approach == approach).cloned().collect();
                line += &format!("  dice[{l}]={:.3}", mean_dice(&own));
            }
        }
        println!("{line}");
    }
    println!("total {:.1}s in {}", total.elapsed().as_secs_f64(), pipeline.root.display());
    Ok(())
}
