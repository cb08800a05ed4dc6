//! Federated averaging between two shifted synthetic parties against each
//! party's own training, scored on both test splits.

use graphstitch::baselines::{federated_train, train_model, FedWeighting, Party, SegTrainConfig};
use graphstitch::data::{AccessAudit, Purpose};
use graphstitch::evaluation::{evaluate_view, mean_dice, EvalContext};
use graphstitch::graph::{build_unet_template, execute, Mode, NetworkGraph};
use graphstitch::harness::{Pipeline, ScenarioConfig};

fn main() -> graphstitch::Result<()> {
    let scenario = ScenarioConfig::default();
    let p = Pipeline::new(scenario.clone(), &std::env::temp_dir().join("graphstitch-federated"), 1)?;
    let audit = AccessAudit::new();
    let parties: Vec<Party<'_>> = (0..2).map(|i| p.party(i)).collect();
    let cfg = SegTrainConfig { epochs: 20, ..scenario.train_config() };
    let template = build_unet_template(&scenario.architecture(0))?;
    let fed = federated_train(&parties, &[&template, &template], &cfg, FedWeighting::Unweighted, &audit, false)?;
    let own: Vec<NetworkGraph> = parties
        .iter()
        .map(|q| train_model(&template, &q.train_view(0, &audit, Purpose::Training), &cfg, 0).map(|r| r.0))
        .collect::<graphstitch::Result<_>>()?;
    let ctx = EvalContext { approach: "", fold: 0, spacing: [1.0, 1.0], batch: 16 };
    for (name, model) in [("federated", &fed[0]), ("only a", &own[0]), ("only b", &own[1])] {
        let scores: Vec<String> = parties
            .iter()
            .map(|q| {
                let recs = evaluate_view(&q.test_view(q.label, &audit), &ctx, |x| execute(model, x, Mode::Eval, None))?;
                Ok(format!("{} {:.3}", q.label, mean_dice(&recs)))
            })
            .collect::<graphstitch::Result<_>>()?;
        println!("{name:<10} {}", scores.join("  "));
    }
    println!("cross-party training reads: {}", audit.cross_party_reads("a").len() + audit.cross_party_reads("b").len());
    Ok(())
}
