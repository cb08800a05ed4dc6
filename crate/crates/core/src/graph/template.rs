use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{NetworkGraph, NodeId, NodeKind, NodeSpec};
use crate::error::{Error, Result};
use crate::tensor::{Op, Tensor};

/// Encoder-decoder segmentation network with skip connections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    /// Number of resolution levels; `depth - 1` downsamplings.
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    /// Output classes including background.
    pub classes: usize,
    pub image_size: usize,
    pub seed: u64,
    pub leaky_slope: f32,
    pub norm_eps: f32,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            depth: 3,
            base_channels: 4,
            in_channels: 1,
            classes: 2,
            image_size: 32,
            seed: 0,
            leaky_slope: 0.01,
            norm_eps: 1e-5,
        }
    }
}

struct Builder {
    g: NetworkGraph,
    rng: ChaCha8Rng,
    cfg: UNetConfig,
}

impl Builder {
    fn he_uniform(&mut self, shape: &[usize]) -> Tensor {
        let fan_in: usize = shape[1..].iter().product();
        let bound = (6.0 / fan_in as f32).sqrt();
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound)).with_requires_grad(true)
    }

    fn conv(&mut self, label: String, x: NodeId, cin: usize, cout: usize, k: usize, scale: i32, side: usize) -> Result<NodeId> {
        let weight = self.he_uniform(&[cout, cin, k, k]);
        let op = if k == 1 { Op::Conv2d1x1 } else { Op::Conv2d { padding: k / 2 } };
        let spec = NodeSpec::new(NodeKind::Operator { op }, label, scale, vec![cout, side, side])
            .with_param("weight", weight)
            .with_param("bias", Tensor::zeros(&[cout]).with_requires_grad(true));
        self.g.add_node(spec, &[x])
    }

    fn norm(&mut self, label: String, x: NodeId, c: usize, scale: i32, side: usize) -> Result<NodeId> {
        let spec = NodeSpec::new(
            NodeKind::Operator {
                op: Op::InstanceNorm { eps: self.cfg.norm_eps },
            },
            label,
            scale,
            vec![c, side, side],
        )
        .with_param("weight", Tensor::full(&[c], 1.0).with_requires_grad(true))
        .with_param("bias", Tensor::zeros(&[c]).with_requires_grad(true))
        .with_buffer("running_mean", Tensor::zeros(&[c]))
        .with_buffer("running_var", Tensor::full(&[c], 1.0));
        self.g.add_node(spec, &[x])
    }

    fn simple(&mut self, op: Op, label: String, args: &[NodeId], scale: i32, shape: Vec<usize>) -> Result<NodeId> {
        self.g.add_node(NodeSpec::new(NodeKind::Operator { op }, label, scale, shape), args)
    }

    /// Two conv3x3 -> norm -> leaky-relu stages.
    fn block(&mut self, name: &str, x: NodeId, cin: usize, cout: usize, scale: i32, side: usize) -> Result<NodeId> {
        let mut h = x;
        let mut c = cin;
        for stage in 0..2 {
            h = self.conv(format!("{name}.conv{stage}"), h, c, cout, 3, scale, side)?;
            h = self.norm(format!("{name}.norm{stage}"), h, cout, scale, side)?;
            h = self.simple(
                Op::LeakyRelu {
                    slope: self.cfg.leaky_slope,
                },
                format!("{name}.act{stage}"),
                &[h],
                scale,
                vec![cout, side, side],
            )?;
            c = cout;
        }
        Ok(h)
    }
}

/// Builds the segmentation template. Parameters are drawn in insertion
/// order from a generator seeded with `cfg.seed`.
pub fn build_unet_template(cfg: &UNetConfig) -> Result<NetworkGraph> {
    if cfg.depth == 0 || cfg.base_channels == 0 || cfg.in_channels == 0 || cfg.classes < 2 {
        return Err(Error::InvalidConfig(format!("degenerate template {cfg:?}")));
    }
    let factor = 1usize << (cfg.depth - 1);
    if cfg.image_size == 0 || cfg.image_size % factor != 0 {
        return Err(Error::InvalidConfig(format!(
            "image size {} is not divisible by {factor}",
            cfg.image_size
        )));
    }
    let mut b = Builder {
        g: NetworkGraph::new(),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        cfg: cfg.clone(),
    };
    let channels = |l: usize| cfg.base_channels << l;
    let side = |l: usize| cfg.image_size >> l;

    let input = b.g.add_node(
        NodeSpec::new(NodeKind::Input, "input", 0, vec![cfg.in_channels, cfg.image_size, cfg.image_size]),
        &[],
    )?;
    let mut skips = Vec::new();
    let mut h = input;
    let mut c = cfg.in_channels;
    for l in 0..cfg.depth {
        if l > 0 {
            h = b.simple(Op::MaxPool, format!("down{l}.pool"), &[h], l as i32, vec![c, side(l), side(l)])?;
        }
        h = b.block(&format!("enc{l}"), h, c, channels(l), l as i32, side(l))?;
        c = channels(l);
        skips.push(h);
    }
    for l in (0..cfg.depth - 1).rev() {
        let up = b.simple(
            Op::NearestUpsample,
            format!("up{l}.upsample"),
            &[h],
            l as i32,
            vec![c, side(l), side(l)],
        )?;
        let cat_c = c + channels(l);
        let cat = b.simple(
            Op::ChannelConcat,
            format!("up{l}.concat"),
            &[up, skips[l]],
            l as i32,
            vec![cat_c, side(l), side(l)],
        )?;
        h = b.block(&format!("dec{l}"), cat, cat_c, channels(l), l as i32, side(l))?;
        c = channels(l);
    }
    let logits = b.conv("head.conv".into(), h, c, cfg.classes, 1, 0, side(0))?;
    let probs = b.simple(Op::Softmax, "head.softmax".into(), &[logits], 0, vec![cfg.classes, side(0), side(0)])?;
    b.g.add_node(NodeSpec::new(NodeKind::Output, "output", 0, vec![cfg.classes, side(0), side(0)]), &[probs])?;
    b.g.validate()?;
    Ok(b.g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{annotate_progress, execute, Mode};

    #[test]
    fn template_runs_and_outputs_probabilities() {
        let cfg = UNetConfig {
            image_size: 8,
            ..UNetConfig::default()
        };
        let g = build_unet_template(&cfg).unwrap();
        let x = Tensor::from_fn(&[2, 1, 8, 8], |i| (i % 7) as f32 / 7.0);
        let y = execute(&g, &x, Mode::Eval, None).unwrap();
        assert_eq!(y.shape(), &[2, 2, 8, 8]);
        for q in 0..64 {
            let s = y.data()[q] + y.data()[64 + q];
            assert!((s - 1.0).abs() < 1e-5);
        }
        annotate_progress(&g).unwrap();
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = UNetConfig::default();
        let a = build_unet_template(&cfg).unwrap();
        let b = build_unet_template(&cfg).unwrap();
        assert_eq!(a, b);
        let c = build_unet_template(&UNetConfig { seed: 1, ..cfg }).unwrap();
        assert!(a.same_structure(&c));
        assert_ne!(a, c);
    }

    #[test]
    fn scales_follow_resolution() {
        let g = build_unet_template(&UNetConfig::default()).unwrap();
        for n in g.nodes() {
            if n.out_shape.len() == 3 {
                assert_eq!(n.out_shape[1], 32 >> n.scale, "{}", n.label);
            }
        }
    }

    #[test]
    fn indivisible_size_is_rejected() {
        let cfg = UNetConfig {
            image_size: 30,
            ..UNetConfig::default()
        };
        assert!(build_unet_template(&cfg).is_err());
    }
}
