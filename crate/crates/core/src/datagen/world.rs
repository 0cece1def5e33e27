use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoders::TextEncoder;
use crate::error::{contract, Result};
use crate::rng;
use crate::tensor::Tensor;

/// One sinusoidal texture component of a class template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveComponent {
    /// Cycles across the image.
    pub frequency: f64,
    /// Radians.
    pub orientation: f64,
    pub phase: f64,
    /// Per input channel.
    pub amplitude: Vec<f64>,
}

/// Texture template of a class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototype {
    pub name: String,
    pub base_intensity: Vec<f64>,
    pub components: Vec<WaveComponent>,
}

#[derive(Debug, Clone, PartialEq)]
struct WaveSlot {
    frequency: f64,
    orientation: f64,
    phase: f64,
}

/// Fixed rule turning class semantics into texture parameters.
///
/// Each class draws amplitudes for a shared bank of wave slots from a linear
/// projection of its word embedding, so visual appearance and class name are
/// tied together the same way for every class, seen or unseen.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternWorld {
    shape: [usize; 3],
    slots: Vec<WaveSlot>,
    /// `[(slots * C) x d]`
    amplitude_proj: Tensor,
    /// `[C x d]`
    base_proj: Tensor,
}

pub const WAVE_SLOTS: usize = 8;
const AMPLITUDE_SCALE: f64 = 0.35;
const BASE_SCALE: f64 = 0.3;

impl PatternWorld {
    pub fn new(seed: u64, shape: [usize; 3], embed_dim: usize) -> Self {
        let mut r = rng::stream(seed, "pattern-world");
        let slots = (0..WAVE_SLOTS)
            .map(|j| WaveSlot {
                frequency: 1.0 + (j % 4) as f64,
                orientation: r.random_range(0.0..PI),
                phase: r.random_range(0.0..2.0 * PI),
            })
            .collect();
        let c = shape[2];
        let inv = 1.0 / (embed_dim as f64).sqrt();
        let amplitude_proj = Tensor::randn(&[WAVE_SLOTS * c, embed_dim], AMPLITUDE_SCALE * inv, &mut r);
        let base_proj = Tensor::randn(&[c, embed_dim], BASE_SCALE * inv, &mut r);
        Self {
            shape,
            slots,
            amplitude_proj,
            base_proj,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn prototype(&self, name: &str, text: &TextEncoder) -> Result<ClassPrototype> {
        let e = text.class_embedding(name)?.embedding;
        let unit = 1.0 / text.word_scale();
        let d = e.len();
        let c = self.shape[2];
        let project = |m: &Tensor, row: usize| -> f64 {
            m.data()[row * d..(row + 1) * d]
                .iter()
                .zip(e.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
                * unit
        };
        let base_intensity = (0..c).map(|ch| project(&self.base_proj, ch)).collect();
        let components = self
            .slots
            .iter()
            .enumerate()
            .map(|(j, s)| WaveComponent {
                frequency: s.frequency,
                orientation: s.orientation,
                phase: s.phase,
                amplitude: (0..c).map(|ch| project(&self.amplitude_proj, j * c + ch)).collect(),
            })
            .collect();
        Ok(ClassPrototype {
            name: name.to_string(),
            base_intensity,
            components,
        })
    }
}

impl ClassPrototype {
    /// Noise-free `W x H x C` template.
    pub fn template(&self, shape: [usize; 3]) -> Tensor {
        let [w, h, c] = shape;
        let mut data = vec![0.0; w * h * c];
        for x in 0..w {
            for y in 0..h {
                let base = (x * h + y) * c;
                data[base..base + c].copy_from_slice(&self.base_intensity[..c]);
                for comp in &self.components {
                    let u = (x as f64 * comp.orientation.cos() + y as f64 * comp.orientation.sin())
                        / w as f64;
                    let wave = (2.0 * PI * comp.frequency * u + comp.phase).sin();
                    for ch in 0..c {
                        data[base + ch] += comp.amplitude[ch] * wave;
                    }
                }
            }
        }
        Tensor::new(&[w, h, c], data).expect("template shape")
    }
}

/// Per-domain style: `x' = gain * x + bias + texture_amplitude * texture + noise`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: usize,
    /// Shift magnitude that scaled `gain - 1`, `bias` and `texture_amplitude`.
    pub shift: f64,
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    pub texture_amplitude: f64,
    pub texture_frequency: f64,
    pub texture_orientation: f64,
    /// Per-channel sign/weight of the domain texture.
    pub texture_mix: Vec<f64>,
    pub noise: f64,
}

impl DomainSpec {
    /// Style of domain `id` at shift `shift`. Directions are drawn from the
    /// seed; `shift = 0` gives the identity transform.
    pub fn new(seed: u64, id: usize, channels: usize, shift: f64, noise: f64) -> Self {
        let mut r = rng::stream(seed, &format!("domain:{id}"));
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let gain = (0..channels)
            .map(|_| 1.0 + shift * 0.5 * unit.sample(&mut r))
            .collect();
        let bias = (0..channels)
            .map(|_| shift * 0.8 * unit.sample(&mut r))
            .collect();
        let texture_mix = (0..channels).map(|_| unit.sample(&mut r)).collect();
        Self {
            id,
            shift,
            gain,
            bias,
            texture_amplitude: shift * 0.6,
            texture_frequency: r.random_range(5.0..7.0),
            texture_orientation: r.random_range(0.0..PI),
            texture_mix,
            noise,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.gain.iter().all(|g| *g == 1.0)
            && self.bias.iter().all(|b| *b == 0.0)
            && self.texture_amplitude == 0.0
    }

    /// Applies the deterministic part of the style to an image in place.
    pub fn stylize(&self, image: &mut Tensor) {
        let shape = image.shape().to_vec();
        let (w, h, c) = (shape[0], shape[1], shape[2]);
        let (cos, sin) = (self.texture_orientation.cos(), self.texture_orientation.sin());
        let data = image.data_mut();
        for x in 0..w {
            for y in 0..h {
                let u = (x as f64 * cos + y as f64 * sin) / w as f64;
                let tex = (2.0 * PI * self.texture_frequency * u).sin();
                let base = (x * h + y) * c;
                for ch in 0..c {
                    let v = &mut data[base + ch];
                    *v = self.gain[ch] * *v + self.bias[ch] + self.texture_amplitude * self.texture_mix[ch] * tex;
                }
            }
        }
    }
}

/// `style(domain, template(proto)) + N(0, noise^2)`.
pub fn generate_sample<R: Rng + ?Sized>(
    proto: &ClassPrototype,
    domain: &DomainSpec,
    shape: [usize; 3],
    rng: &mut R,
) -> Tensor {
    let mut img = proto.template(shape);
    domain.stylize(&mut img);
    if domain.noise > 0.0 {
        let n = Normal::new(0.0, domain.noise).expect("finite noise");
        img.data_mut().iter_mut().for_each(|v| *v += n.sample(rng));
    }
    img
}

/// Default class names; extra classes get generated names.
pub const CLASS_NAMES: [&str; 24] = [
    "airport", "beach", "bridge", "desert", "forest", "harbor", "meadow", "mountain",
    "overpass", "parking", "railway", "residential", "river", "runway", "stadium", "farmland",
    "lake", "wetland", "church", "glacier", "island", "orchard", "quarry", "terrace",
];

pub fn class_names(n: usize) -> Result<Vec<String>> {
    if n == 0 {
        return contract("need at least one class name");
    }
    Ok((0..n)
        .map(|i| match CLASS_NAMES.get(i) {
            Some(s) => s.to_string(),
            None => format!("scene{i}"),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderConfig;

    const SHAPE: [usize; 3] = [16, 16, 3];

    fn world() -> (PatternWorld, TextEncoder) {
        let cfg = EncoderConfig::default();
        (PatternWorld::new(11, SHAPE, 32), TextEncoder::new(&cfg).unwrap())
    }

    #[test]
    fn zero_shift_zero_noise_is_exact_template() {
        let (w, t) = world();
        let p = w.prototype("forest", &t).unwrap();
        let dom = DomainSpec::new(3, 2, 3, 0.0, 0.0);
        assert!(dom.is_identity());
        let mut r = rng::stream(1, "s");
        let img = generate_sample(&p, &dom, SHAPE, &mut r);
        assert_eq!(img, p.template(SHAPE));
    }

    #[test]
    fn same_rng_state_same_image() {
        let (w, t) = world();
        let p = w.prototype("river", &t).unwrap();
        let dom = DomainSpec::new(3, 1, 3, 0.5, 0.1);
        let a = generate_sample(&p, &dom, SHAPE, &mut rng::stream(9, "x"));
        let b = generate_sample(&p, &dom, SHAPE, &mut rng::stream(9, "x"));
        assert_eq!(a, b);
    }

    #[test]
    fn bias_only_style_shifts_mean_by_bias() {
        let (w, t) = world();
        let p = w.prototype("beach", &t).unwrap();
        let template = p.template(SHAPE);
        let mut dom = DomainSpec::new(3, 1, 3, 0.0, 0.0);
        dom.bias = vec![0.25, -0.5, 1.0];
        let img = generate_sample(&p, &dom, SHAPE, &mut rng::stream(0, "x"));
        for ch in 0..3 {
            let mean = |t: &Tensor| {
                t.data().iter().skip(ch).step_by(3).sum::<f64>() / 256.0
            };
            let shift = mean(&img) - mean(&template);
            assert!((shift - dom.bias[ch]).abs() < 1e-12, "channel {ch}: {shift}");
        }
    }

    #[test]
    fn distinct_classes_distinct_patterns() {
        let (w, t) = world();
        let names = class_names(16).unwrap();
        let protos: Vec<_> = names.iter().map(|n| w.prototype(n, &t).unwrap()).collect();
        for i in 0..protos.len() {
            for j in i + 1..protos.len() {
                assert_ne!(protos[i].components, protos[j].components);
            }
        }
    }
}
