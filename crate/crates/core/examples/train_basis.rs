//! Trains one basis network on a synthetic party and reports its
//! validation Dice.

use std::time::Instant;

use graphstitch::baselines::{train_model, SegTrainConfig};
use graphstitch::data::{DataView, SplitKind};
use graphstitch::evaluation::{evaluate_view, mean_dice, split_dataset, EvalContext};
use graphstitch::graph::{build_unet_template, execute, Mode, UNetConfig};
use graphstitch::harness::{generate_synthetic_party, PartySpec};

fn main() -> graphstitch::Result<()> {
    let size = 32;
    let data = generate_synthetic_party(&PartySpec::default(), size, 0)?;
    let plan = split_dataset(data.len(), None, 0)?;
    let template = build_unet_template(&UNetConfig { image_size: size, ..UNetConfig::default() })?;
    let train = DataView::new(&data, plan.train(0), SplitKind::Train);
    let start = Instant::now();
    let cfg = SegTrainConfig::default();
    let (model, curve) = train_model(&template, &train, &cfg, 0)?;
    println!(
        "{} steps in {:.1}s, loss {:.3} -> {:.3}",
        curve.losses.len(),
        start.elapsed().as_secs_f64(),
        curve.losses[0],
        curve.losses.last().copied().unwrap_or(f64::NAN)
    );
    let val = DataView::new(&data, plan.fold(0), SplitKind::Validation);
    let ctx = EvalContext { approach: "a", fold: 0, spacing: [1.0, 1.0], batch: 8 };
    let records = evaluate_view(&val, &ctx, |x| execute(&model, x, Mode::Eval, None))?;
    println!("validation dice {:.3}", mean_dice(&records));
    Ok(())
}
