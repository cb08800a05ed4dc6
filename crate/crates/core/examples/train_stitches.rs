//! Trains the stitches of two trained networks with direct matching and
//! with the double-batched loss, and compares fully stitched Dice.

use graphstitch::baselines::{train_model, SegTrainConfig};
use graphstitch::data::{DataView, SplitKind};
use graphstitch::evaluation::{evaluate_view, mean_dice, split_dataset, EvalContext};
use graphstitch::graph::{build_unet_template, OutputSelector, SwitchMode, UNetConfig};
use graphstitch::harness::{generate_synthetic_party, PartySpec};
use graphstitch::matching::{match_graphs, MatchingConfig};
use graphstitch::stitching::combine;
use graphstitch::training::{train_stitches, StitchMethod, StitchTrainConfig};

fn main() -> graphstitch::Result<()> {
    let size = 32;
    let data = generate_synthetic_party(&PartySpec::default(), size, 0)?;
    let plan = split_dataset(data.len(), None, 0)?;
    let train = DataView::new(&data, plan.train(0), SplitKind::Train);
    let val = DataView::new(&data, plan.fold(0), SplitKind::Validation);
    let cfg = SegTrainConfig { epochs: 20, ..SegTrainConfig::default() };
    let a = train_model(&build_unet_template(&UNetConfig { image_size: size, seed: 1, ..UNetConfig::default() })?, &train, &cfg, 1)?.0;
    let b = train_model(&build_unet_template(&UNetConfig { image_size: size, seed: 2, ..UNetConfig::default() })?, &train, &cfg, 2)?.0;
    let combined = combine(&a, &b, &match_graphs(&a, &b, &MatchingConfig::default())?)?;
    let ctx = EvalContext { approach: "stitched", fold: 0, spacing: [1.0, 1.0], batch: 8 };
    for method in [StitchMethod::Direct, StitchMethod::DoubleBatched] {
        let mut net = combined.clone();
        let report = train_stitches(&mut net, &train, &StitchTrainConfig::new(method))?;
        let view = net.configure(&net.uniform_config(SwitchMode::Stitched, OutputSelector::HeadB))?;
        let dice = mean_dice(&evaluate_view(&val, &ctx, |x| view.run(x))?);
        println!("{method:?}: final loss {:.5}, all-stitched Dice {dice:.3}", report.final_total().unwrap_or(f64::NAN));
    }
    Ok(())
}
