//! Procedural scenes: a coloured gradient with a static fine texture, plus
//! textured sprites translating by whole pixels each frame. Because sprite
//! textures are evaluated in sprite coordinates, motion is an exact shift and
//! the true optical flow is known.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sub_seed, Frame};
use crate::temporal::flow::FlowField;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub kx: f32,
    pub ky: f32,
    pub phase: f32,
    pub amp: f32,
}

/// Band-limited random texture: a sum of a few plane waves per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub waves: Vec<Wave>,
    pub gains: [f32; 3],
}

impl Texture {
    pub fn random(rng: &mut impl Rng, amplitude: f32, min_period: f32, max_period: f32) -> Self {
        let count = 4;
        let waves = (0..count)
            .map(|_| {
                let period = rng.random_range(min_period..max_period);
                let angle = rng.random_range(0.0..std::f32::consts::PI);
                let k = 2.0 * std::f32::consts::PI / period;
                Wave {
                    kx: k * angle.cos(),
                    ky: k * angle.sin(),
                    phase: rng.random_range(0.0..2.0 * std::f32::consts::PI),
                    amp: amplitude / count as f32,
                }
            })
            .collect();
        let gains = [rng.random_range(0.6..1.0), rng.random_range(0.6..1.0), rng.random_range(0.6..1.0)];
        Self { waves, gains }
    }

    /// Same waves and gains with freshly drawn phases.
    pub fn rephased(&self, rng: &mut impl Rng) -> Self {
        let waves = self
            .waves
            .iter()
            .map(|w| Wave { phase: rng.random_range(0.0..2.0 * std::f32::consts::PI), ..*w })
            .collect();
        Self { waves, gains: self.gains }
    }

    pub fn value(&self, x: f32, y: f32) -> f32 {
        self.waves.iter().map(|w| w.amp * (w.kx * x + w.ky * y + w.phase).sin()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Rectangle,
    Ellipse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    /// Constant velocity `(vx, vy)` pixels per frame.
    Constant { vx: i32, vy: i32 },
    /// Constant velocity until frame `at`, then the negated velocity.
    Reversing { vx: i32, vy: i32, at: usize },
}

impl Motion {
    pub fn offset(&self, t: usize) -> (i32, i32) {
        match *self {
            Motion::Constant { vx, vy } => (vx * t as i32, vy * t as i32),
            Motion::Reversing { vx, vy, at } => {
                let fwd = t.min(at) as i32;
                let back = t.saturating_sub(at) as i32;
                (vx * (fwd - back), vy * (fwd - back))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sprite {
    pub shape: Shape,
    /// Top-left corner at frame 0.
    pub x0: i32,
    pub y0: i32,
    pub width: i32,
    pub height: i32,
    pub color: [f32; 3],
    pub texture: Texture,
    pub motion: Motion,
}

impl Sprite {
    fn contains_local(&self, lx: i32, ly: i32) -> bool {
        if lx < 0 || ly < 0 || lx >= self.width || ly >= self.height {
            return false;
        }
        match self.shape {
            Shape::Rectangle => true,
            Shape::Ellipse => {
                let rx = self.width as f32 / 2.0;
                let ry = self.height as f32 / 2.0;
                let dx = (lx as f32 + 0.5 - rx) / rx;
                let dy = (ly as f32 + 0.5 - ry) / ry;
                dx * dx + dy * dy <= 1.0
            }
        }
    }

    fn origin(&self, t: usize) -> (i32, i32) {
        let (dx, dy) = self.motion.offset(t);
        (self.x0 + dx, self.y0 + dy)
    }

    /// Sprite-local coordinates of pixel `(x, y)` at frame `t`, if covered.
    fn local(&self, x: i32, y: i32, t: usize) -> Option<(i32, i32)> {
        let (ox, oy) = self.origin(t);
        let (lx, ly) = (x - ox, y - oy);
        self.contains_local(lx, ly).then_some((lx, ly))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub sprites: usize,
    pub max_speed: i32,
    pub texture_amplitude: f32,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { height: 64, width: 64, frames: 9, sprites: 2, max_speed: 2, texture_amplitude: 0.12 }
    }
}

/// Everything needed to re-render a scene exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub corners: [[f32; 3]; 4],
    pub background: Texture,
    pub sprites: Vec<Sprite>,
}

impl Scene {
    pub fn random(cfg: &SceneConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 0x5ce7e));
        let color = |rng: &mut ChaCha8Rng| {
            [rng.random_range(0.15..0.85), rng.random_range(0.15..0.85), rng.random_range(0.15..0.85)]
        };
        let corners = [color(&mut rng), color(&mut rng), color(&mut rng), color(&mut rng)];
        let background = Texture::random(&mut rng, cfg.texture_amplitude, 3.0, 9.0);
        let (h, w) = (cfg.height as i32, cfg.width as i32);
        let sprites = (0..cfg.sprites)
            .map(|_| {
                let sw = rng.random_range((w / 6).max(2)..=(w / 3).max(3));
                let sh = rng.random_range((h / 6).max(2)..=(h / 3).max(3));
                let speed = cfg.max_speed.max(0);
                let motion = Motion::Constant {
                    vx: rng.random_range(-speed..=speed),
                    vy: rng.random_range(-speed..=speed),
                };
                Sprite {
                    shape: if rng.random_bool(0.5) { Shape::Rectangle } else { Shape::Ellipse },
                    x0: rng.random_range(0..(w - sw).max(1)),
                    y0: rng.random_range(0..(h - sh).max(1)),
                    width: sw,
                    height: sh,
                    color: color(&mut rng),
                    texture: Texture::random(&mut rng, 2.0 * cfg.texture_amplitude, 4.0, 12.0),
                    motion,
                }
            })
            .collect();
        Self { height: cfg.height, width: cfg.width, corners, background, sprites }
    }

    /// A scene with nothing but one sprite on the gradient background.
    pub fn single_sprite(height: usize, width: usize, sprite: Sprite, seed: u64) -> Self {
        let mut base = Self::random(
            &SceneConfig { height, width, frames: 1, sprites: 0, ..SceneConfig::default() },
            seed,
        );
        base.sprites = vec![sprite];
        base
    }

    pub fn gradient(&self, x: usize, y: usize, c: usize) -> f32 {
        let u = x as f32 / (self.width.max(2) - 1) as f32;
        let v = y as f32 / (self.height.max(2) - 1) as f32;
        let [tl, tr, bl, br] = &self.corners;
        let top = tl[c] * (1.0 - u) + tr[c] * u;
        let bottom = bl[c] * (1.0 - u) + br[c] * u;
        top * (1.0 - v) + bottom * v
    }

    /// Index of the topmost sprite covering `(x, y)` at frame `t`.
    pub fn sprite_at(&self, x: usize, y: usize, t: usize) -> Option<(usize, i32, i32)> {
        self.sprites
            .iter()
            .enumerate()
            .rev()
            .find_map(|(i, s)| s.local(x as i32, y as i32, t).map(|(lx, ly)| (i, lx, ly)))
    }

    /// Background pixel with an arbitrary texture (used for inpainting fills).
    pub fn background_with(&self, texture: &Texture, x: usize, y: usize, c: usize) -> f32 {
        self.gradient(x, y, c) + texture.gains[c] * texture.value(x as f32, y as f32)
    }

    pub fn render(&self, t: usize) -> Frame {
        let mut frame = Array3::<f32>::zeros((3, self.height, self.width));
        for y in 0..self.height {
            for x in 0..self.width {
                let hit = self.sprite_at(x, y, t);
                for c in 0..3 {
                    let v = match hit {
                        Some((i, lx, ly)) => {
                            let s = &self.sprites[i];
                            s.color[c] + s.texture.gains[c] * s.texture.value(lx as f32, ly as f32)
                        }
                        None => self.background_with(&self.background, x, y, c),
                    };
                    frame[[c, y, x]] = v.clamp(0.0, 1.0);
                }
            }
        }
        frame
    }

    /// True flow from frame `from` to frame `to`: the displacement of the
    /// topmost sprite under each pixel of `from`, zero on the background.
    pub fn flow(&self, from: usize, to: usize) -> FlowField {
        let mut field = FlowField::zeros(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                if let Some((i, _, _)) = self.sprite_at(x, y, from) {
                    let s = &self.sprites[i];
                    let (ax, ay) = s.origin(from);
                    let (bx, by) = s.origin(to);
                    field.u[[y, x]] = (bx - ax) as f32;
                    field.v[[y, x]] = (by - ay) as f32;
                }
            }
        }
        field
    }

    /// Pixels covered by sprite `index` at frame `t`.
    pub fn sprite_mask(&self, index: usize, t: usize) -> ndarray::Array2<u8> {
        ndarray::Array2::from_shape_fn((self.height, self.width), |(y, x)| {
            matches!(self.sprite_at(x, y, t), Some((i, _, _)) if i == index) as u8
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_motion_is_an_exact_shift() {
        let cfg = SceneConfig { sprites: 0, ..SceneConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sprite = Sprite {
            shape: Shape::Rectangle,
            x0: 10,
            y0: 12,
            width: 20,
            height: 16,
            color: [0.5, 0.4, 0.3],
            texture: Texture::random(&mut rng, 0.2, 4.0, 10.0),
            motion: Motion::Constant { vx: 2, vy: 0 },
        };
        let scene = Scene::single_sprite(cfg.height, cfg.width, sprite, 4);
        let a = scene.render(0);
        let b = scene.render(1);
        for y in 12..28 {
            for x in 10..30 {
                for c in 0..3 {
                    assert_eq!(a[[c, y, x]], b[[c, y, x + 2]]);
                }
            }
        }
        let flow = scene.flow(0, 1);
        assert_eq!(flow.u[[15, 15]], 2.0);
        assert_eq!(flow.u[[0, 0]], 0.0);
    }

    #[test]
    fn reversing_motion_returns() {
        let m = Motion::Reversing { vx: 3, vy: -1, at: 4 };
        assert_eq!(m.offset(4), (12, -4));
        assert_eq!(m.offset(5), (9, -3));
        assert_eq!(m.offset(8), (0, 0));
    }

    #[test]
    fn render_is_deterministic() {
        let cfg = SceneConfig::default();
        assert_eq!(Scene::random(&cfg, 9).render(3), Scene::random(&cfg, 9).render(3));
    }
}
