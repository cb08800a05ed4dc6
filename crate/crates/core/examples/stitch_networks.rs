//! Combines two networks with stitches and switches, then compares the
//! outputs of several switch configurations against the parents.

use graphstitch::graph::{build_unet_template, execute, Mode, OutputSelector, SwitchMode, UNetConfig};
use graphstitch::matching::{match_graphs, MatchingConfig};
use graphstitch::stitching::{combine, sample_switch_configs};
use graphstitch::tensor::Tensor;

fn max_diff(p: &Tensor, q: &Tensor) -> f32 {
    p.data().iter().zip(q.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
}

fn main() -> graphstitch::Result<()> {
    let cfg = UNetConfig { image_size: 16, ..UNetConfig::default() };
    let a = build_unet_template(&UNetConfig { seed: 1, ..cfg.clone() })?;
    let b = build_unet_template(&UNetConfig { seed: 2, ..cfg })?;
    let net = combine(&a, &b, &match_graphs(&a, &b, &MatchingConfig::default())?)?;
    println!("{} pairs, {} switches, {} combined nodes", net.pairs.len(), net.switches().len(), net.graph.len());

    let x = Tensor::from_fn(&[2, 1, 16, 16], |q| ((q * 7919) % 97) as f32 / 97.0);
    let pa = execute(&a, &x, Mode::Eval, None)?;
    let original = net.run(&x, &net.uniform_config(SwitchMode::Original, OutputSelector::HeadA))?;
    println!("all-original head A vs parent A: max diff {}", max_diff(&original, &pa));
    let stitched = net.run(&x, &net.uniform_config(SwitchMode::Stitched, OutputSelector::HeadA))?;
    println!("all-stitched head A vs parent A: max diff {:.4}", max_diff(&stitched, &pa));
    for (k, sw) in sample_switch_configs(&net, 2, 3, 7)?.iter().enumerate() {
        let out = net.run(&x, sw)?;
        println!("sample {k}: {} stitched, head {:?}, max diff to parent A {:.4}", sw.count(SwitchMode::Stitched), sw.selector, max_diff(&out, &pa));
    }
    Ok(())
}
