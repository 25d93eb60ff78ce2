//! A small procedurally rendered image dataset.
//!
//! Each class is a fixed smooth pattern (a few signed Gaussian blobs plus a
//! faint grating). Samples jitter the pattern's position and contrast and
//! add pixel noise, so classes overlap enough for forgetting to show while a
//! small network still separates them.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{DatasetIndex, Sample, Source, Split};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Procedural {
    pub name: &'static str,
    pub classes: usize,
    pub size: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Maximum translation in pixels.
    pub jitter: f64,
    pub noise: f64,
}

/// Ten grayscale 16x16 classes.
pub const SYNTH10: Procedural = Procedural {
    name: "synth10",
    classes: 10,
    size: 16,
    train_per_class: 120,
    test_per_class: 60,
    jitter: 2.0,
    noise: 0.35,
};

const PATTERN_SEED: u64 = 0x5eed_0f_c1a55;

struct Blob {
    x: f64,
    y: f64,
    sigma: f64,
    amp: f64,
}

struct Pattern {
    blobs: Vec<Blob>,
    freq: f64,
    angle: f64,
    phase: f64,
}

impl Pattern {
    fn of_class(class: usize, size: usize) -> Self {
        let mut rng = seed::rng(PATTERN_SEED, &[class as u64]);
        let s = size as f64;
        let blobs = (0..3)
            .map(|k| Blob {
                x: rng.random_range(0.2 * s..0.8 * s),
                y: rng.random_range(0.2 * s..0.8 * s),
                sigma: rng.random_range(0.1 * s..0.2 * s),
                amp: if k == 0 { 1.0 } else if rng.random_bool(0.5) { 0.8 } else { -0.8 },
            })
            .collect();
        Pattern {
            blobs,
            freq: rng.random_range(0.15..0.45),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let mut v = 0.0;
        for b in &self.blobs {
            let d2 = (x - b.x).powi(2) + (y - b.y).powi(2);
            v += b.amp * (-d2 / (2.0 * b.sigma * b.sigma)).exp();
        }
        let u = x * self.angle.cos() + y * self.angle.sin();
        v + 0.3 * (self.freq * u + self.phase).sin()
    }
}

impl Procedural {
    pub fn image_shape(&self) -> [usize; 3] {
        [1, self.size, self.size]
    }

    pub fn index(&self, split: Split) -> DatasetIndex {
        let per_class = match split {
            Split::Train => self.train_per_class,
            Split::Test => self.test_per_class,
        };
        let split_tag = match split {
            Split::Train => 0,
            Split::Test => 1,
        };
        let samples = (0..self.classes * per_class)
            .map(|i| {
                let class = i % self.classes;
                Sample {
                    id: i as u64,
                    source: Source::Procedural {
                        class,
                        seed: seed::derive(split_tag, &[i as u64]),
                    },
                    label: class,
                }
            })
            .collect();
        DatasetIndex {
            name: self.name.to_string(),
            split,
            image_shape: self.image_shape(),
            classes: (0..self.classes).collect(),
            class_names: (0..self.classes).map(|c| format!("pattern-{c}")).collect(),
            samples,
        }
    }

    /// Renders one sample into `out` (length `size * size`), values in [-1, 1].
    pub fn render(&self, class: usize, sample_seed: u64, out: &mut [f64]) {
        let pattern = Pattern::of_class(class, self.size);
        let mut rng = seed::rng(sample_seed, &[]);
        let dx = rng.random_range(-self.jitter..=self.jitter);
        let dy = rng.random_range(-self.jitter..=self.jitter);
        let contrast = rng.random_range(0.6..1.4);
        let noise = Normal::new(0.0, self.noise).expect("finite noise scale");
        for r in 0..self.size {
            for c in 0..self.size {
                let v = contrast * pattern.at(c as f64 - dx, r as f64 - dy) + noise.sample(&mut rng);
                out[r * self.size + c] = v.clamp(-1.0, 1.0);
            }
        }
    }
}
