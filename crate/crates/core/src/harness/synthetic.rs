use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Distribution of one party's images: ellipse-union foreground blobs over a
/// flat background, with striped foreground texture and Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PartySpec {
    pub label: String,
    pub samples: usize,
    /// Inclusive range of blobs per image.
    pub blobs: [usize; 2],
    /// Range of ellipse semi-axes as a fraction of the image size.
    pub radius: [f64; 2],
    pub background: f64,
    pub foreground: f64,
    /// Amplitude of the foreground stripe texture.
    pub texture: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Near-duplicate frames per group, imitating video sources.
    pub frames_per_group: Option<usize>,
}

impl Default for PartySpec {
    fn default() -> Self {
        PartySpec {
            label: "a".into(),
            samples: 60,
            blobs: [1, 2],
            radius: [0.12, 0.25],
            background: 0.2,
            foreground: 0.8,
            texture: 0.1,
            noise: 0.05,
            frames_per_group: None,
        }
    }
}

impl PartySpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(format!("party `{}`: {msg}", self.label)));
        if self.samples == 0 {
            return bad("no samples");
        }
        if self.blobs[1] == 0 || self.blobs[0] > self.blobs[1] {
            return bad("blob count range must be non-empty and positive");
        }
        if !(self.radius[0] > 0.0 && self.radius[0] <= self.radius[1]) {
            return bad("blob radii must be positive and ordered");
        }
        if !(self.noise >= 0.0 && self.texture >= 0.0) {
            return bad("noise and texture must be non-negative");
        }
        if self.frames_per_group == Some(0) {
            return bad("groups need at least one frame");
        }
        Ok(())
    }

    /// Whether two specs describe the same distribution.
    pub fn same_distribution(&self, other: &PartySpec) -> bool {
        PartySpec {
            label: String::new(),
            samples: 0,
            ..self.clone()
        } == PartySpec {
            label: String::new(),
            samples: 0,
            ..other.clone()
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, r: f64, c: f64) -> bool {
        let (dy, dx) = (r - self.cy, c - self.cx);
        let (s, co) = self.angle.sin_cos();
        let u = (dy * co + dx * s) / self.ry;
        let v = (-dy * s + dx * co) / self.rx;
        u * u + v * v <= 1.0
    }
}

fn draw_scene(spec: &PartySpec, size: usize, rng: &mut ChaCha8Rng) -> Vec<Ellipse> {
    let n = rng.gen_range(spec.blobs[0]..=spec.blobs[1]).max(1);
    let s = size as f64;
    (0..n)
        .map(|_| {
            let ry = rng.gen_range(spec.radius[0]..=spec.radius[1]) * s;
            let rx = rng.gen_range(spec.radius[0]..=spec.radius[1]) * s;
            let margin = 0.5 * ry.min(rx);
            Ellipse {
                cy: rng.gen_range(margin..=s - margin),
                cx: rng.gen_range(margin..=s - margin),
                ry,
                rx,
                angle: rng.gen_range(0.0..std::f64::consts::PI),
            }
        })
        .collect()
}

fn jitter(scene: &[Ellipse], rng: &mut ChaCha8Rng) -> Vec<Ellipse> {
    scene
        .iter()
        .map(|e| Ellipse {
            cy: e.cy + rng.gen_range(-1.0..=1.0),
            cx: e.cx + rng.gen_range(-1.0..=1.0),
            ry: e.ry * rng.gen_range(0.95..=1.05),
            rx: e.rx * rng.gen_range(0.95..=1.05),
            angle: e.angle + rng.gen_range(-0.1..=0.1),
        })
        .collect()
}

fn render(spec: &PartySpec, size: usize, scene: &[Ellipse], rng: &mut ChaCha8Rng) -> (Tensor, Vec<u8>) {
    let mut mask: Vec<u8> = (0..size * size)
        .map(|q| {
            let (r, c) = ((q / size) as f64 + 0.5, (q % size) as f64 + 0.5);
            u8::from(scene.iter().any(|e| e.contains(r, c)))
        })
        .collect();
    if mask.iter().all(|&m| m == 0) {
        let e = scene[0];
        let clamp = |v: f64| (v.floor().max(0.0) as usize).min(size - 1);
        mask[clamp(e.cy) * size + clamp(e.cx)] = 1;
    }
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let dir = rng.gen_range(0.0..std::f64::consts::PI);
    let (ds, dc) = dir.sin_cos();
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let image = Tensor::from_fn(&[1, size, size], |q| {
        let (r, c) = ((q / size) as f64, (q % size) as f64);
        let fg = f64::from(mask[q]);
        let stripes = (std::f64::consts::TAU / 3.0 * (r * dc + c * ds) + phase).sin();
        let mut v = spec.background + fg * (spec.foreground - spec.background + spec.texture * stripes);
        if spec.noise > 0.0 {
            v += noise.sample(rng);
        }
        v as f32
    });
    (image, mask)
}

/// Dataset of `spec.samples` images of `size x size` pixels. Masks are the
/// exact support of the blobs. With grouping, each group shares one scene
/// and its frames are jittered copies.
pub fn generate_synthetic_party(spec: &PartySpec, size: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if size < 4 {
        return Err(Error::InvalidConfig(format!("image size {size} is too small")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(spec.samples);
    let mut scene = Vec::new();
    for id in 0..spec.samples {
        let (ellipses, group) = match spec.frames_per_group {
            Some(f) => {
                if id % f == 0 {
                    scene = draw_scene(spec, size, &mut rng);
                }
                (jitter(&scene, &mut rng), Some(id / f))
            }
            None => (draw_scene(spec, size, &mut rng), None),
        };
        let (image, mask) = render(spec, size, &ellipses, &mut rng);
        samples.push(Sample { id, image, mask, group });
    }
    Ok(Dataset {
        owner: spec.label.clone(),
        channels: 1,
        size,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_single_blob_mask_is_the_thresholded_image() {
        let spec = PartySpec {
            blobs: [1, 1],
            noise: 0.0,
            texture: 0.0,
            samples: 10,
            ..PartySpec::default()
        };
        let d = generate_synthetic_party(&spec, 16, 4).unwrap();
        for s in &d.samples {
            let thr: Vec<u8> = s.image.data().iter().map(|&v| u8::from(v > 0.5)).collect();
            assert_eq!(thr, s.mask);
            assert!(s.mask.iter().any(|&m| m == 1));
        }
    }

    #[test]
    fn generation_is_seeded() {
        let spec = PartySpec::default();
        assert_eq!(
            generate_synthetic_party(&spec, 16, 1).unwrap(),
            generate_synthetic_party(&spec, 16, 1).unwrap()
        );
        assert_ne!(
            generate_synthetic_party(&spec, 16, 1).unwrap(),
            generate_synthetic_party(&spec, 16, 2).unwrap()
        );
    }

    #[test]
    fn groups_are_near_duplicates() {
        let spec = PartySpec {
            frames_per_group: Some(4),
            samples: 12,
            ..PartySpec::default()
        };
        let d = generate_synthetic_party(&spec, 16, 0).unwrap();
        assert_eq!(d.group_sizes().unwrap(), vec![(0, 4), (1, 4), (2, 4)]);
        let overlap = |a: &[u8], b: &[u8]| a.iter().zip(b).filter(|(x, y)| **x == 1 && **y == 1).count();
        let same = overlap(&d.samples[0].mask, &d.samples[1].mask);
        assert!(same > 0);
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        for spec in [
            PartySpec { radius: [0.0, 0.1], ..PartySpec::default() },
            PartySpec { blobs: [0, 0], ..PartySpec::default() },
            PartySpec { samples: 0, ..PartySpec::default() },
        ] {
            assert!(generate_synthetic_party(&spec, 16, 0).is_err());
        }
    }
}
