//! Reference trajectories: the tracking helix and the seeded excitation used
//! for offline data collection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TrainingConfig;

/// Position, velocity and acceleration reference at one instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefPoint {
    pub p: [f64; 3],
    pub v: [f64; 3],
    pub a: [f64; 3],
}

impl RefPoint {
    pub fn state(&self) -> [f64; 6] {
        [self.p[0], self.p[1], self.p[2], self.v[0], self.v[1], self.v[2]]
    }
}

pub trait Reference {
    fn at(&self, t: f64) -> RefPoint;
}

/// `x = 2 sin t`, `y = 2 cos t`, `z` stepping through 2, 3, 4 m in thirds of
/// the mission. The z steps carry no velocity reference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Helix {
    pub duration: f64,
    pub radius: f64,
    pub levels: [f64; 3],
}

impl Helix {
    pub fn new(duration: f64) -> Self {
        Self {
            duration,
            radius: 2.0,
            levels: [2.0, 3.0, 4.0],
        }
    }
}

impl Reference for Helix {
    fn at(&self, t: f64) -> RefPoint {
        let (s, c) = t.sin_cos();
        let r = self.radius;
        let third = self.duration / 3.0;
        let z = if t < third {
            self.levels[0]
        } else if t < 2.0 * third {
            self.levels[1]
        } else {
            self.levels[2]
        };
        RefPoint {
            p: [r * s, r * c, z],
            v: [r * c, -r * s, 0.0],
            a: [-r * s, -r * c, 0.0],
        }
    }
}

pub fn generate_reference(helix: &Helix, t: f64) -> RefPoint {
    helix.at(t)
}

/// Per-axis sum of sinusoids with seeded frequencies and phases, scaled so
/// each axis stays within `center ± amplitude`.
#[derive(Clone, Debug, PartialEq)]
pub struct Excitation {
    center: [f64; 3],
    /// `(amplitude, frequency, phase)` per axis.
    terms: [Vec<(f64, f64, f64)>; 3],
}

impl Excitation {
    pub fn new(cfg: &TrainingConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e8c1);
        let k = cfg.components.max(1);
        let terms = std::array::from_fn(|axis| {
            (0..k)
                .map(|_| {
                    let f = rng.random_range(cfg.min_frequency..=cfg.max_frequency);
                    let phase = rng.random_range(0.0..std::f64::consts::TAU);
                    (cfg.amplitude[axis] / k as f64, f, phase)
                })
                .collect()
        });
        Self {
            center: cfg.center,
            terms,
        }
    }
}

impl Reference for Excitation {
    fn at(&self, t: f64) -> RefPoint {
        let mut out = RefPoint {
            p: self.center,
            v: [0.0; 3],
            a: [0.0; 3],
        };
        for (axis, terms) in self.terms.iter().enumerate() {
            for &(amp, f, ph) in terms {
                let (s, c) = (f * t + ph).sin_cos();
                out.p[axis] += amp * s;
                out.v[axis] += amp * f * c;
                out.a[axis] -= amp * f * f * s;
            }
        }
        out
    }
}
