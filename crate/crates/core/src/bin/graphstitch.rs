use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use graphstitch::evaluation::{read_records, EvaluationRecord};
use graphstitch::harness::{read_selection, reselect, rerun_manifest, run_matrix, write_report, Approach, Pipeline, RunManifest, ScenarioConfig};
use graphstitch::training::StitchMethod;
use graphstitch::{Error, Result};

/// Graph stitching of independently trained segmentation networks on
/// synthetic two-party scenarios.
#[derive(Parser)]
#[command(name = "graphstitch", version)]
struct Cli {
    /// Overrides the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Scenario document (TOML); defaults to the built-in scenario.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root; runs land in `<out>/<scenario hash>/`.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Worker threads for fold-level parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Direct,
    Db,
    All,
}

impl MethodArg {
    fn methods(self) -> Vec<StitchMethod> {
        match self {
            MethodArg::Direct => vec![StitchMethod::Direct],
            MethodArg::Db => vec![StitchMethod::DoubleBatched],
            MethodArg::All => vec![StitchMethod::Direct, StitchMethod::DoubleBatched],
        }
    }
}

#[derive(Args)]
struct StitchArgs {
    #[arg(long, value_enum, default_value = "all")]
    method: MethodArg,
    /// Party whose data trains and selects the stitches; all parties if unset.
    #[arg(long)]
    perspective: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate both parties' datasets and fold splits.
    GenData,
    /// Train basis networks.
    Train {
        /// Parties to train; all if unset.
        #[arg(long)]
        party: Vec<String>,
    },
    /// Fine-tune one party's basis networks on another party's data.
    Finetune {
        #[arg(long)]
        from: Option<String>,
        #[arg(long)]
        to: Option<String>,
    },
    /// Match the basis networks and write match reports.
    Match,
    /// Build combined networks with untrained stitches.
    Stitch,
    /// Train stitches with the chosen method(s).
    TrainStitches(StitchArgs),
    /// Score randomly stitched networks at increasing stitch counts.
    SampleRobustness(StitchArgs),
    /// Score every stitch-ensemble candidate and select by each strategy.
    EnumerateEnsembles(StitchArgs),
    /// Recompute stitch selections from the validation candidate records.
    Select(StitchArgs),
    /// Train federated-averaging models.
    Federated,
    /// Train on the merged dataset of both parties.
    MergeTrain,
    /// Run approaches in dependency order and write a manifest.
    Evaluate {
        /// Approach labels (e.g. `a`, `a->b`, `a&b`, `stitch-db@a`); all if unset.
        #[arg(long)]
        approach: Vec<String>,
        /// Re-run a manifest instead of the scenario.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Write bi-objective and positional tables and plots.
    Report {
        /// Stitch approach for the positional table.
        #[arg(long)]
        stitch: Option<String>,
    },
}

fn scenario(cli: &Cli) -> Result<ScenarioConfig> {
    let mut s = match &cli.config {
        Some(p) => ScenarioConfig::load(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(seed) = cli.seed {
        s.seed = seed;
    }
    Ok(s)
}

fn parties(p: &Pipeline, names: &[String]) -> Result<Vec<usize>> {
    if names.is_empty() {
        return Ok((0..p.labels().len()).collect());
    }
    names.iter().map(|n| p.scenario.party_index(n)).collect()
}

fn print_paths(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn stitch_targets(p: &Pipeline, args: &StitchArgs) -> Result<Vec<(StitchMethod, usize)>> {
    let persp = parties(p, args.perspective.as_slice())?;
    Ok(persp.iter().flat_map(|&q| args.method.methods().into_iter().map(move |m| (m, q))).collect())
}

fn collect_records(root: &Path, name: &str) -> Result<Vec<EvaluationRecord>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::MissingArtifact(format!("{}: {e}", root.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|d| d.join(name).exists())
        .collect();
    dirs.sort();
    let mut out = Vec::new();
    for d in dirs {
        out.extend(read_records(&d.join(name))?);
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Evaluate { manifest: Some(path), .. } = &cli.command {
        let m = RunManifest::load(path)?;
        let (_, p) = rerun_manifest(&m, &cli.out, cli.workers)?;
        println!("{}", p.root.join("manifest.json").display());
        return Ok(());
    }
    let scenario = scenario(&cli)?;
    let p = Pipeline::new(scenario.clone(), &cli.out, cli.workers)?;
    match &cli.command {
        Command::GenData => print_paths(&p.write_data()?),
        Command::Train { party } => {
            for q in parties(&p, party)? {
                print_paths(&p.run(Approach::Basis { party: q })?);
            }
        }
        Command::Finetune { from, to } => {
            let n = p.labels().len();
            let pick = |x: &Option<String>| -> Result<Vec<usize>> { x.as_ref().map_or(Ok((0..n).collect()), |l| Ok(vec![p.scenario.party_index(l)?])) };
            for f in pick(from)? {
                for t in pick(to)? {
                    if f != t {
                        print_paths(&p.run(Approach::FineTune { from: f, to: t })?);
                    }
                }
            }
        }
        Command::Match => print_paths(&p.write_match_reports()?),
        Command::Stitch => print_paths(&p.write_combined()?),
        Command::TrainStitches(args) => {
            for (m, q) in stitch_targets(&p, args)? {
                let nets = p.stitched_networks(m, q, true)?;
                println!("{} trained stitched networks for {}", nets.len(), p.label(Approach::Stitch { method: m, perspective: q }));
            }
        }
        Command::SampleRobustness(args) => {
            for (method, perspective) in stitch_targets(&p, args)? {
                print_paths(&p.run(Approach::Robustness { method, perspective })?);
            }
        }
        Command::EnumerateEnsembles(args) => {
            for (method, perspective) in stitch_targets(&p, args)? {
                print_paths(&p.run(Approach::Stitch { method, perspective })?);
            }
        }
        Command::Select(args) => {
            let labels = p.labels();
            for (method, perspective) in stitch_targets(&p, args)? {
                let dir = p.dir(Approach::Stitch { method, perspective });
                let recomputed = reselect(&dir.join("candidates_validation.csv"), &labels, perspective)?;
                let stored = read_selection(&dir.join("selection.json"))?;
                if recomputed != stored {
                    return Err(Error::Malformed(format!("{}: stored selection differs from validation records", dir.display())));
                }
                println!("{} {}", p.label(Approach::Stitch { method, perspective }), serde_json::to_string(&recomputed)?);
            }
        }
        Command::Federated => print_paths(&p.run(Approach::Federated)?),
        Command::MergeTrain => print_paths(&p.run(Approach::Merged)?),
        Command::Evaluate { approach, .. } => {
            let labels = scenario.labels();
            let list = if approach.is_empty() {
                Approach::all()
            } else {
                approach.iter().map(|a| Approach::parse(a, &labels)).collect::<Result<_>>()?
            };
            let (m, p) = run_matrix(&scenario, &list, &cli.out, cli.workers)?;
            for o in &m.outputs {
                println!("{}", cli.out.join(o).display());
            }
            println!("{}", p.root.join("manifest.json").display());
        }
        Command::Report { stitch } => {
            let records = collect_records(&p.root, "test.csv")?;
            let candidates = match stitch {
                Some(label) => {
                    let a = Approach::parse(label, &p.labels())?;
                    Some(read_records(&p.dir(a).join("candidates_test.csv"))?)
                }
                None => None,
            };
            print_paths(&write_report(&records, candidates.as_deref(), &p.root.join("report"))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
