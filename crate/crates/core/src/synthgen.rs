//! Procedural textured multi-object videos with instance masks.
//!
//! All geometry is integer fixed-point (1/16 pixel) and all coverage and
//! texture tests are integer predicates, so output bytes depend only on the
//! config and seed.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sub-pixel units per pixel.
const FX: i64 = 16;
const MAX_ATTEMPTS: u64 = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureKind {
    Flat,
    Stripes,
    Checker,
    Dots,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Texture {
    pub kind: TextureKind,
    pub period: i64,
    /// 0 horizontal, 1 vertical, 2 and 3 the two diagonals (stripes only).
    pub orientation: u8,
    pub colors: [[u8; 3]; 2],
}

impl Texture {
    pub fn texel(&self, lx: i64, ly: i64) -> [u8; 3] {
        let p = self.period.max(1);
        let second = match self.kind {
            TextureKind::Flat => false,
            TextureKind::Stripes => {
                let u = match self.orientation {
                    0 => ly,
                    1 => lx,
                    2 => lx + ly,
                    _ => lx - ly,
                };
                u.div_euclid(p).rem_euclid(2) == 1
            }
            TextureKind::Checker => (lx.div_euclid(p) + ly.div_euclid(p)).rem_euclid(2) == 1,
            TextureKind::Dots => {
                let cx = 2 * lx.rem_euclid(p) - (p - 1);
                let cy = 2 * ly.rem_euclid(p) - (p - 1);
                // dot radius p/3, tested as 9·d² ≤ 4·p² on the doubled grid
                9 * (cx * cx + cy * cy) <= 4 * p * p
            }
        };
        self.colors[second as usize]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub image_size: usize,
    pub num_objects: (usize, usize),
    pub num_frames: usize,
    pub textures: Vec<TextureKind>,
    pub texture_period: (i64, i64),
    /// Half-extent of objects in pixels.
    pub object_size: (i64, i64),
    /// Maximum object speed in pixels per frame.
    pub max_speed: f64,
    pub background_textured: bool,
    pub camera_pan: bool,
    /// Maximum camera translation in whole pixels per frame.
    pub max_pan: i64,
    pub static_fraction: f64,
    pub seed: u64,
}

pub const PATCH_SIZES: [usize; 3] = [4, 16, 32];

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let (kmin, kmax) = self.num_objects;
        if kmin < 1 || kmax < kmin {
            return Err(Error::config(format!("num_objects range ({kmin}, {kmax}) invalid")));
        }
        if kmax > 255 {
            return Err(Error::config("at most 255 objects fit an 8-bit mask"));
        }
        if self.num_frames < 1 {
            return Err(Error::config("num_frames must be >= 1"));
        }
        if self.image_size == 0 || PATCH_SIZES.iter().any(|p| self.image_size % p != 0) {
            return Err(Error::config(format!(
                "image_size {} must be divisible by every patch size {PATCH_SIZES:?}",
                self.image_size
            )));
        }
        let (smin, smax) = self.object_size;
        if smin < 1 || smax < smin {
            return Err(Error::config(format!("object_size range ({smin}, {smax}) invalid")));
        }
        if 2 * smax >= self.image_size as i64 {
            return Err(Error::config(format!(
                "objects of half-extent {smax} cannot fit a {}px frame",
                self.image_size
            )));
        }
        if self.textures.is_empty() {
            return Err(Error::config("texture bank is empty"));
        }
        let (pmin, pmax) = self.texture_period;
        if pmin < 2 || pmax < pmin {
            return Err(Error::config(format!("texture_period range ({pmin}, {pmax}) invalid")));
        }
        if !(0.0..=1.0).contains(&self.static_fraction) {
            return Err(Error::config("static_fraction must lie in [0, 1]"));
        }
        if !(self.max_speed >= 0.0) || self.max_pan < 0 {
            return Err(Error::config("speeds must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectMeta {
    /// Mask label; equal to the depth rank (1 is nearest).
    pub label: u8,
    pub shape: Shape,
    pub texture: Texture,
    pub depth_rank: u8,
    pub half_extent: i64,
    /// Screen-space velocity in pixels per frame at t = 0.
    pub velocity: [f64; 2],
    pub is_static: bool,
}

/// Frames are `T×H×W×3` in [0,1]; labels are `T×H×W`, 0 = background.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub id: String,
    pub seed: u64,
    pub image_size: usize,
    pub num_frames: usize,
    pub frames: Vec<f32>,
    pub labels: Vec<u8>,
    pub objects: Vec<ObjectMeta>,
}

impl VideoClip {
    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.image_size * self.image_size * 3;
        &self.frames[t * n..(t + 1) * n]
    }

    pub fn label_frame(&self, t: usize) -> &[u8] {
        let n = self.image_size * self.image_size;
        &self.labels[t * n..(t + 1) * n]
    }

    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    /// A copy restricted to frames `start..start + len`.
    pub fn window(&self, start: usize, len: usize) -> VideoClip {
        let fp = self.image_size * self.image_size;
        VideoClip {
            id: self.id.clone(),
            seed: self.seed,
            image_size: self.image_size,
            num_frames: len,
            frames: self.frames[start * fp * 3..(start + len) * fp * 3].to_vec(),
            labels: self.labels[start * fp..(start + len) * fp].to_vec(),
            objects: self.objects.clone(),
        }
    }
}

/// One object's placement and motion in fixed-point screen coordinates.
#[derive(Debug, Clone)]
pub struct PlacedObject {
    pub meta: ObjectMeta,
    /// Centre at t = 0, in 1/16 px.
    pub pos: (i64, i64),
    /// Screen velocity in 1/16 px per frame.
    pub vel: (i64, i64),
}

impl PlacedObject {
    /// Integer coverage test for the pixel `(px, py)`, centre at `(cx, cy)` (1/16 px).
    pub fn covers(&self, cx: i64, cy: i64, px: i64, py: i64) -> bool {
        let dx = px * FX + FX / 2 - cx;
        let dy = py * FX + FX / 2 - cy;
        let s = self.meta.half_extent * FX;
        match self.meta.shape {
            Shape::Square => dx.abs() < s && dy.abs() < s,
            Shape::Circle => dx * dx + dy * dy < s * s,
            // apex at the top (dy = -s), base at dy = s
            Shape::Triangle => dy.abs() < s && 2 * dx.abs() <= dy + s,
        }
    }

    /// Texture coordinates relative to the object's top-left corner, so the
    /// texture travels with the object.
    fn local(&self, cx: i64, cy: i64, px: i64, py: i64) -> (i64, i64) {
        let lx = (px * FX + FX / 2 - cx).div_euclid(FX) + self.meta.half_extent;
        let ly = (py * FX + FX / 2 - cy).div_euclid(FX) + self.meta.half_extent;
        (lx, ly)
    }
}

/// A fully specified scene; `render` is a pure function of it.
#[derive(Debug, Clone)]
pub struct Scene {
    pub image_size: usize,
    pub num_frames: usize,
    /// Sorted by label (1 = nearest).
    pub objects: Vec<PlacedObject>,
    pub background: Texture,
    pub background_textured: bool,
    /// Camera translation per frame in whole pixels.
    pub pan: (i64, i64),
}

impl Scene {
    /// Object centres at frame `t` (1/16 px): moving objects bounce elastically
    /// inside the frame; static objects stay fixed in the world and are held
    /// at the border if the camera would carry them out of view.
    pub fn centres(&self, t: usize) -> Vec<(i64, i64)> {
        let size = self.image_size as i64 * FX;
        self.objects
            .iter()
            .map(|o| {
                let lo = o.meta.half_extent * FX;
                let hi = size - lo;
                if o.meta.is_static {
                    let x = (o.pos.0 - self.pan.0 * FX * t as i64).clamp(lo, hi);
                    let y = (o.pos.1 - self.pan.1 * FX * t as i64).clamp(lo, hi);
                    (x, y)
                } else {
                    (
                        bounce(o.pos.0, o.vel.0, t as i64, lo, hi),
                        bounce(o.pos.1, o.vel.1, t as i64, lo, hi),
                    )
                }
            })
            .collect()
    }

    /// Renders frame `t` into `rgb` (`H·W·3` bytes) and `labels` (`H·W`).
    pub fn render(&self, t: usize, rgb: &mut [u8], labels: &mut [u8]) {
        let n = self.image_size as i64;
        let centres = self.centres(t);
        let (ox, oy) = (self.pan.0 * t as i64, self.pan.1 * t as i64);
        for py in 0..n {
            for px in 0..n {
                let idx = (py * n + px) as usize;
                let mut colour = if self.background_textured {
                    self.background.texel(px + ox, py + oy)
                } else {
                    self.background.colors[0]
                };
                let mut label = 0u8;
                // objects are sorted nearest first, so the first hit wins
                for (o, &(cx, cy)) in self.objects.iter().zip(&centres) {
                    if o.covers(cx, cy, px, py) {
                        let (lx, ly) = o.local(cx, cy, px, py);
                        colour = o.meta.texture.texel(lx, ly);
                        label = o.meta.label;
                        break;
                    }
                }
                labels[idx] = label;
                rgb[idx * 3..idx * 3 + 3].copy_from_slice(&colour);
            }
        }
    }

    pub fn to_clip(&self, id: String, seed: u64) -> VideoClip {
        let fp = self.image_size * self.image_size;
        let mut rgb = vec![0u8; self.num_frames * fp * 3];
        let mut labels = vec![0u8; self.num_frames * fp];
        for t in 0..self.num_frames {
            self.render(
                t,
                &mut rgb[t * fp * 3..(t + 1) * fp * 3],
                &mut labels[t * fp..(t + 1) * fp],
            );
        }
        VideoClip {
            id,
            seed,
            image_size: self.image_size,
            num_frames: self.num_frames,
            frames: rgb.iter().map(|&b| b as f32 / 255.0).collect(),
            labels,
            objects: self.objects.iter().map(|o| o.meta.clone()).collect(),
        }
    }
}

/// Position after `t` frames of linear motion reflected at `[lo, hi]`.
fn bounce(p0: i64, v: i64, t: i64, lo: i64, hi: i64) -> i64 {
    let span = hi - lo;
    if span <= 0 {
        return lo;
    }
    let raw = (p0 - lo + v * t).rem_euclid(2 * span);
    lo + if raw > span { 2 * span - raw } else { raw }
}

fn random_texture(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> Texture {
    let kind = *cfg.textures.choose(rng).expect("non-empty bank");
    let period = rng.gen_range(cfg.texture_period.0..=cfg.texture_period.1);
    let c0: [u8; 3] = [rng.gen(), rng.gen(), rng.gen()];
    // second colour pushed away from the first so the pattern is visible
    let c1 = c0.map(|c| c.wrapping_add(rng.gen_range(64..192)));
    Texture {
        kind,
        period,
        orientation: rng.gen_range(0..4),
        colors: [c0, c1],
    }
}

fn sample_scene(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Scene {
    let size = cfg.image_size as i64;
    let k = rng.gen_range(cfg.num_objects.0..=cfg.num_objects.1);
    let pan = if cfg.camera_pan && cfg.max_pan > 0 {
        (
            rng.gen_range(-cfg.max_pan..=cfg.max_pan),
            rng.gen_range(-cfg.max_pan..=cfg.max_pan),
        )
    } else {
        (0, 0)
    };
    let max_v = (cfg.max_speed * FX as f64).round() as i64;
    let mut objects = Vec::with_capacity(k);
    for i in 0..k {
        let half = rng.gen_range(cfg.object_size.0..=cfg.object_size.1);
        let shape = *[Shape::Square, Shape::Circle, Shape::Triangle]
            .choose(rng)
            .expect("non-empty");
        let texture = random_texture(rng, cfg);
        let pos = (
            rng.gen_range(half * FX..=(size - half) * FX),
            rng.gen_range(half * FX..=(size - half) * FX),
        );
        let is_static = rng.gen_bool(cfg.static_fraction);
        let vel = if is_static {
            (-pan.0 * FX, -pan.1 * FX)
        } else {
            (
                rng.gen_range(-max_v..=max_v) - pan.0 * FX,
                rng.gen_range(-max_v..=max_v) - pan.1 * FX,
            )
        };
        let label = (i + 1) as u8;
        objects.push(PlacedObject {
            meta: ObjectMeta {
                label,
                shape,
                texture,
                depth_rank: label,
                half_extent: half,
                velocity: [vel.0 as f64 / FX as f64, vel.1 as f64 / FX as f64],
                is_static,
            },
            pos,
            vel,
        });
    }
    let background = random_texture(rng, cfg);
    Scene {
        image_size: cfg.image_size,
        num_frames: cfg.num_frames,
        objects,
        background,
        background_textured: cfg.background_textured,
        pan,
    }
}

/// Generates one clip. Scenes in which some object is never visible are
/// redrawn from a derived seed, so every label 1..K appears somewhere.
pub fn generate_clip(cfg: &SceneConfig) -> Result<VideoClip> {
    generate_clip_with_id(cfg, format!("clip_{:06}", cfg.seed))
}

pub fn generate_clip_with_id(cfg: &SceneConfig, id: String) -> Result<VideoClip> {
    cfg.validate()?;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(attempt);
        let scene = sample_scene(cfg, &mut rng);
        let clip = scene.to_clip(id.clone(), cfg.seed);
        let first = clip.label_frame(0);
        let mut seen = vec![false; clip.objects.len() + 1];
        for &l in &clip.labels {
            seen[l as usize] = true;
        }
        if seen[1..].iter().all(|&s| s) && first.iter().any(|&l| l != 0) {
            return Ok(clip);
        }
    }
    Err(Error::config(format!(
        "could not place {:?} objects visibly in a {}px frame",
        cfg.num_objects, cfg.image_size
    )))
}

/// Generates `count` clips with seeds `base + i`, in parallel.
pub fn generate_clips(cfg: &SceneConfig, count: usize) -> Result<Vec<VideoClip>> {
    use rayon::prelude::*;
    cfg.validate()?;
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut c = cfg.clone();
            c.seed = cfg.seed.wrapping_add(i as u64);
            generate_clip_with_id(&c, format!("clip_{i:05}"))
        })
        .collect()
}
