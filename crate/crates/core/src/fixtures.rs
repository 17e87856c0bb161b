//! Seeded synthetic videos for tests, demos and benchmarks. Frames are
//! generated on demand, so arbitrarily long fixtures cost no memory.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::latent::LatentGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixtureKind {
    /// Textured background with the same content in every frame.
    Static,
    /// Colored shapes drifting over a fixed textured background.
    TranslatingShapes,
    /// Slow cross-fades between a sequence of textured scenes.
    MixingScenes,
}

impl std::str::FromStr for FixtureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(Self::Static),
            "shapes" => Ok(Self::TranslatingShapes),
            "mixing" => Ok(Self::MixingScenes),
            other => Err(Error::config(format!(
                "unknown fixture {other:?} (expected static, shapes or mixing)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Texture {
    base: [f64; 3],
    freq: [f64; 4],
    phase: [f64; 2],
    amp: f64,
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        Self {
            base: [
                rng.gen_range(0.25..0.75),
                rng.gen_range(0.25..0.75),
                rng.gen_range(0.25..0.75),
            ],
            freq: [
                rng.gen_range(5.0..17.0),
                rng.gen_range(5.0..17.0),
                rng.gen_range(9.0..23.0),
                rng.gen_range(9.0..23.0),
            ],
            phase: [rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3)],
            amp: rng.gen_range(0.08..0.18),
        }
    }

    fn at(&self, c: usize, x: f64, y: f64) -> f64 {
        use std::f64::consts::TAU;
        let wave = (TAU * x / self.freq[0] + self.phase[0]).sin()
            + (TAU * y / self.freq[1] + self.phase[1]).cos()
                * (TAU * (x / self.freq[2] + y / self.freq[3])).sin();
        self.base[c] + self.amp * wave * (1.0 - 0.2 * c as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Shape {
    color: [f64; 3],
    origin: (f64, f64),
    velocity: (f64, f64),
    radius: f64,
    square: bool,
}

/// A reproducible synthetic video.
#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    kind: FixtureKind,
    frames: usize,
    width: usize,
    height: usize,
    textures: Vec<Texture>,
    shapes: Vec<Shape>,
}

impl Fixture {
    /// Scenes of the mixing fixture last this many frames each.
    pub const SCENE_FRAMES: usize = 60;

    pub fn new(
        kind: FixtureKind,
        frames: usize,
        width: usize,
        height: usize,
        seed: u64,
    ) -> Result<Self> {
        if frames == 0 || width < 8 || height < 8 {
            return Err(Error::config(format!(
                "fixture needs at least one frame of 8x8 or more, got {frames} frames of {width}x{height}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scenes = match kind {
            FixtureKind::MixingScenes => frames / Self::SCENE_FRAMES + 2,
            _ => 1,
        };
        let textures = (0..scenes).map(|_| Texture::random(&mut rng)).collect();
        let shapes = match kind {
            FixtureKind::TranslatingShapes => (0..3)
                .map(|_| {
                    let speed: f64 = rng.gen_range(0.5..1.0);
                    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                    Shape {
                        color: [rng.gen(), rng.gen(), rng.gen()],
                        origin: (
                            rng.gen_range(0.0..width as f64),
                            rng.gen_range(0.0..height as f64),
                        ),
                        velocity: (speed * angle.cos(), speed * angle.sin()),
                        radius: rng.gen_range(0.08..0.16) * width.min(height) as f64,
                        square: rng.gen(),
                    }
                })
                .collect(),
            _ => Vec::new(),
        };
        Ok(Self {
            kind,
            frames,
            width,
            height,
            textures,
            shapes,
        })
    }

    pub fn len(&self) -> usize {
        self.frames
    }

    pub fn is_empty(&self) -> bool {
        self.frames == 0
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Frame `i`, quantized to 8-bit levels so that it survives PPM storage
    /// unchanged.
    pub fn frame(&self, i: usize) -> LatentGrid {
        let (w, h) = (self.width as f64, self.height as f64);
        let t = i as f64;
        LatentGrid::from_fn(3, self.height, self.width, |c, y, x| {
            let (xf, yf) = (x as f64, y as f64);
            let mut v = match self.kind {
                FixtureKind::MixingScenes => {
                    let s = i / Self::SCENE_FRAMES;
                    let a = (i % Self::SCENE_FRAMES) as f64 / Self::SCENE_FRAMES as f64;
                    (1.0 - a) * self.textures[s].at(c, xf, yf)
                        + a * self.textures[s + 1].at(c, xf, yf)
                }
                _ => self.textures[0].at(c, xf, yf),
            };
            for s in &self.shapes {
                let cx = (s.origin.0 + s.velocity.0 * t).rem_euclid(w);
                let cy = (s.origin.1 + s.velocity.1 * t).rem_euclid(h);
                // wrap-around distance keeps shapes on screen
                let dx = ((xf - cx + w / 2.0).rem_euclid(w) - w / 2.0).abs();
                let dy = ((yf - cy + h / 2.0).rem_euclid(h) - h / 2.0).abs();
                let inside = if s.square {
                    dx.max(dy) <= s.radius
                } else {
                    dx.hypot(dy) <= s.radius
                };
                if inside {
                    v = s.color[c];
                }
            }
            (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
        })
    }

    pub fn frames(&self) -> Vec<LatentGrid> {
        (0..self.frames).map(|i| self.frame(i)).collect()
    }
}
