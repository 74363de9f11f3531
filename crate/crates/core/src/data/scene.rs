use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::Raster;
use crate::error::{Error, Result};

/// Output sizes `(h, w)` of the two views.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ViewSizes {
    pub ground_hw: (usize, usize),
    pub aerial_hw: (usize, usize),
}

impl ViewSizes {
    pub const DESK: ViewSizes = ViewSizes {
        ground_hw: (32, 64),
        aerial_hw: (32, 32),
    };
}

/// One matched ground panorama and aerial tile rendered from the same scene.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair {
    pub pair_id: u64,
    pub ground: Raster,
    pub aerial: Raster,
    pub tile_origin: (f64, f64),
    pub tile_size: f64,
}

type Rgb = [f32; 3];

#[derive(Clone, Debug)]
struct Road {
    a: (f32, f32),
    b: (f32, f32),
    half_width: f32,
    color: Rgb,
}

#[derive(Clone, Debug)]
struct Blob {
    center: (f32, f32),
    radius: f32,
    height: f32,
    color: Rgb,
}

/// Latent layout in tile-local coordinates, `[0, 1]^2` with the camera at
/// the center.
#[derive(Clone, Debug)]
struct Scene {
    background: Rgb,
    texture: Rgb,
    texture_freq: (f32, f32),
    roads: Vec<Road>,
    blobs: Vec<Blob>,
}

const SKY: Rgb = [0.62, 0.72, 0.86];
const WORLD_EXTENT: f64 = 1000.0;
const TILE_SIZE: f64 = 1.0;

fn random_color(rng: &mut impl Rng) -> Rgb {
    [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)]
}

impl Scene {
    fn sample(rng: &mut impl Rng) -> Self {
        let background = random_color(rng);
        let texture = random_color(rng);
        let texture_freq = (rng.random_range(4.0..14.0), rng.random_range(4.0..14.0));
        let roads = (0..rng.random_range(1..=3))
            .map(|_| {
                let through = (rng.random_range(0.2..0.8f32), rng.random_range(0.2..0.8f32));
                let angle: f32 = rng.random_range(0.0..std::f32::consts::PI);
                let (dx, dy) = (angle.cos() * 1.5, angle.sin() * 1.5);
                Road {
                    a: (through.0 - dx, through.1 - dy),
                    b: (through.0 + dx, through.1 + dy),
                    half_width: rng.random_range(0.02..0.06),
                    color: random_color(rng),
                }
            })
            .collect();
        let blobs = (0..rng.random_range(2..=5))
            .map(|_| Blob {
                center: (rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)),
                radius: rng.random_range(0.05..0.16),
                height: rng.random_range(0.02..0.08),
                color: random_color(rng),
            })
            .collect();
        Scene {
            background,
            texture,
            texture_freq,
            roads,
            blobs,
        }
    }

    fn ground_color(&self, x: f32, y: f32) -> Rgb {
        if let Some(b) = self.blobs.iter().rev().find(|b| {
            let (dx, dy) = (x - b.center.0, y - b.center.1);
            dx * dx + dy * dy <= b.radius * b.radius
        }) {
            return b.color;
        }
        if let Some(r) = self.roads.iter().rev().find(|r| segment_distance((x, y), r.a, r.b) <= r.half_width) {
            return r.color;
        }
        let t = 0.5 + 0.5 * ((x * self.texture_freq.0).sin() * (y * self.texture_freq.1).cos());
        let t = 0.35 * t;
        [
            self.background[0] * (1.0 - t) + self.texture[0] * t,
            self.background[1] * (1.0 - t) + self.texture[1] * t,
            self.background[2] * (1.0 - t) + self.texture[2] * t,
        ]
    }

    /// Nearest blob hit by the ray from the tile center along `(dx, dy)`.
    fn ray_blob(&self, dx: f32, dy: f32) -> Option<(f32, &Blob)> {
        let (ox, oy) = (0.5f32, 0.5f32);
        let mut best: Option<(f32, &Blob)> = None;
        for b in &self.blobs {
            let (cx, cy) = (b.center.0 - ox, b.center.1 - oy);
            let along = cx * dx + cy * dy;
            let perp2 = cx * cx + cy * cy - along * along;
            let r2 = b.radius * b.radius;
            if perp2 > r2 {
                continue;
            }
            let t = along - (r2 - perp2).sqrt();
            let t = if t < 0.0 {
                if cx * cx + cy * cy <= r2 {
                    0.0
                } else {
                    continue;
                }
            } else {
                t
            };
            if t <= 0.75 && best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, b));
            }
        }
        best
    }
}

fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (abx, aby) = (b.0 - a.0, b.1 - a.1);
    let len2 = abx * abx + aby * aby;
    let t = (((p.0 - a.0) * abx + (p.1 - a.1) * aby) / len2).clamp(0.0, 1.0);
    let (qx, qy) = (a.0 + t * abx, a.1 + t * aby);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

fn jitter(rng: &mut impl Rng, c: Rgb, scale: f32, amount: f32) -> Rgb {
    let mut out = [0.0; 3];
    for (o, &v) in out.iter_mut().zip(&c) {
        *o = (v * scale + rng.random_range(-amount..amount)).clamp(0.0, 1.0);
    }
    out
}

fn render_aerial(scene: &Scene, (h, w): (usize, usize), rng: &mut impl Rng) -> Raster {
    let mut r = Raster::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let c = scene.ground_color((x as f32 + 0.5) / w as f32, (y as f32 + 0.5) / h as f32);
            r.set(y, x, jitter(rng, c, 1.0, 0.04));
        }
    }
    r
}

/// Cylindrical panorama from the tile center: columns sweep the azimuth
/// clockwise from north, the lower half looks at the ground out to the tile
/// edge, and blobs rise above the horizon with height falling off by distance.
fn render_ground(scene: &Scene, (h, w): (usize, usize), rng: &mut impl Rng) -> Raster {
    let mut r = Raster::new(h, w);
    let horizon = h / 2;
    for x in 0..w {
        let theta = 2.0 * std::f32::consts::PI * (x as f32 + 0.5) / w as f32;
        let (dx, dy) = (theta.sin(), -theta.cos());
        let hit = scene.ray_blob(dx, dy);
        for y in 0..h {
            let c = if y >= horizon {
                let t = (y - horizon) as f32 + 0.5;
                let rho = 0.5 * (1.0 - t / (h - horizon) as f32) + 0.02;
                let c = scene.ground_color(0.5 + rho * dx, 0.5 + rho * dy);
                jitter(rng, c, 0.9, 0.04)
            } else {
                let above = (horizon - y) as f32 - 0.5;
                match hit {
                    Some((t, b)) if above < (b.height / (t + 0.05)) * horizon as f32 * 0.5 => {
                        jitter(rng, b.color, 0.8, 0.04)
                    }
                    _ => jitter(rng, SKY, 1.0, 0.03),
                }
            };
            r.set(y, x, c);
        }
    }
    r
}

fn item_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 33)).wrapping_mul(0xff51_afd7_ed55_8ccd);
    z = (z ^ (z >> 33)).wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    z ^ (z >> 33)
}

/// Renders `n` matched pairs, each from its own latent scene. Output depends
/// only on `(seed, n, sizes)`.
pub fn generate_scene_pairs(seed: u64, n: usize, sizes: ViewSizes) -> Result<Vec<ScenePair>> {
    if n == 0 {
        return Err(Error::contract("need at least one pair"));
    }
    let (gh, gw) = sizes.ground_hw;
    let (ah, aw) = sizes.aerial_hw;
    if gh < 2 || gw == 0 || ah == 0 || aw == 0 {
        return Err(Error::dim("view sizes must be positive (ground height >= 2)"));
    }
    Ok((0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(item_seed(seed, i));
            let scene = Scene::sample(&mut rng);
            let origin = (
                rng.random_range(0.0..WORLD_EXTENT),
                rng.random_range(0.0..WORLD_EXTENT),
            );
            let aerial = render_aerial(&scene, sizes.aerial_hw, &mut rng);
            let ground = render_ground(&scene, sizes.ground_hw, &mut rng);
            ScenePair {
                pair_id: i,
                ground,
                aerial,
                tile_origin: origin,
                tile_size: TILE_SIZE,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = generate_scene_pairs(3, 4, ViewSizes::DESK).unwrap();
        let b = generate_scene_pairs(3, 4, ViewSizes::DESK).unwrap();
        assert_eq!(a, b);
        let c = generate_scene_pairs(4, 4, ViewSizes::DESK).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sizes_and_ids() {
        let pairs = generate_scene_pairs(0, 5, ViewSizes::DESK).unwrap();
        assert_eq!(pairs.len(), 5);
        for (i, p) in pairs.iter().enumerate() {
            assert_eq!(p.pair_id, i as u64);
            assert_eq!((p.ground.height(), p.ground.width()), (32, 64));
            assert_eq!((p.aerial.height(), p.aerial.width()), (32, 32));
        }
    }

    use crate::data::{transform_aerial, transform_ground, ViewTransform};

    fn move_point(p: (f32, f32), t: ViewTransform) -> (f32, f32) {
        let (mut dx, mut dy) = (p.0 - 0.5, p.1 - 0.5);
        if t.mirror {
            dx = -dx;
        }
        for _ in 0..t.quarter_turns {
            (dx, dy) = (-dy, dx);
        }
        (0.5 + dx, 0.5 + dy)
    }

    fn moved(scene: &Scene, t: ViewTransform) -> Scene {
        let mut s = scene.clone();
        for b in &mut s.blobs {
            b.center = move_point(b.center, t);
        }
        for r in &mut s.roads {
            (r.a, r.b) = (move_point(r.a, t), move_point(r.b, t));
        }
        s
    }

    fn close_fraction(a: &Raster, b: &Raster) -> f64 {
        let close = a
            .pixels()
            .iter()
            .zip(b.pixels())
            .filter(|(x, y)| x.abs_diff(**y) <= 30)
            .count();
        close as f64 / a.pixels().len() as f64
    }

    #[test]
    fn raster_transforms_follow_the_latent_scene() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut scene = Scene::sample(&mut rng);
            // the texture pattern is not rotation-covariant
            scene.texture = scene.background;
            for t in ViewTransform::ALL {
                let a = render_aerial(&scene, (32, 32), &mut rng);
                let g = render_ground(&scene, (32, 64), &mut rng);
                let s2 = moved(&scene, t);
                let a2 = render_aerial(&s2, (32, 32), &mut rng);
                let g2 = render_ground(&s2, (32, 64), &mut rng);
                let fa = close_fraction(&transform_aerial(&a, t).unwrap(), &a2);
                let fg = close_fraction(&transform_ground(&g, t).unwrap(), &g2);
                assert!(fa > 0.98 && fg > 0.98, "seed {seed} {t:?}: {fa} {fg}");
            }
        }
    }

    #[test]
    fn zero_pairs_rejected() {
        assert!(generate_scene_pairs(0, 0, ViewSizes::DESK).is_err());
    }
}
