use crate::data::Raster;
use crate::error::{Error, Result};

/// A rigid motion of the scene about the camera that both views can follow
/// exactly: `quarter_turns` clockwise rotations, applied after an optional
/// east-west mirror.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ViewTransform {
    pub quarter_turns: u8,
    pub mirror: bool,
}

impl ViewTransform {
    pub const ALL: [ViewTransform; 8] = {
        let mut out = [ViewTransform {
            quarter_turns: 0,
            mirror: false,
        }; 8];
        let mut i = 0;
        while i < 8 {
            out[i] = ViewTransform {
                quarter_turns: (i % 4) as u8,
                mirror: i >= 4,
            };
            i += 1;
        }
        out
    };

    pub fn is_identity(self) -> bool {
        self.quarter_turns.is_multiple_of(4) && !self.mirror
    }
}

/// Whether a pair of these sizes can follow every [`ViewTransform`]: the
/// aerial tile must be square and the panorama width a multiple of 4.
pub fn supports_transforms(ground_hw: (usize, usize), aerial_hw: (usize, usize)) -> bool {
    aerial_hw.0 == aerial_hw.1 && ground_hw.1.is_multiple_of(4)
}

fn remap(src: &Raster, height: usize, width: usize, from: impl Fn(usize, usize) -> (usize, usize)) -> Raster {
    let mut pixels = Vec::with_capacity(height * width * 3);
    for y in 0..height {
        for x in 0..width {
            let (sy, sx) = from(y, x);
            pixels.extend_from_slice(&src.get(sy, sx));
        }
    }
    Raster::from_pixels(height, width, pixels).expect("sizes match")
}

/// Mirrors left-right, then rotates clockwise.
pub fn transform_aerial(aerial: &Raster, t: ViewTransform) -> Result<Raster> {
    let (h, w) = (aerial.height(), aerial.width());
    if h != w {
        return Err(Error::dim(format!("aerial tile {h}x{w} is not square")));
    }
    let mut out = if t.mirror {
        remap(aerial, h, w, |y, x| (y, w - 1 - x))
    } else {
        aerial.clone()
    };
    for _ in 0..t.quarter_turns % 4 {
        out = remap(&out, h, w, |y, x| (h - 1 - x, y));
    }
    Ok(out)
}

/// Column `x` of a panorama looks along azimuth `2π(x + 0.5)/W` clockwise
/// from north, so a mirror reverses the columns and a clockwise quarter turn
/// rolls them right by `W/4`.
pub fn transform_ground(ground: &Raster, t: ViewTransform) -> Result<Raster> {
    let (h, w) = (ground.height(), ground.width());
    if w % 4 != 0 {
        return Err(Error::dim(format!("panorama width {w} is not a multiple of 4")));
    }
    let shift = (t.quarter_turns % 4) as usize * w / 4;
    Ok(remap(ground, h, w, |y, x| {
        let rolled = (x + w - shift) % w;
        (y, if t.mirror { w - 1 - rolled } else { rolled })
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numbered(h: usize, w: usize) -> Raster {
        let pixels = (0..h * w).flat_map(|i| [i as u8, (i / 256) as u8, 0]).collect();
        Raster::from_pixels(h, w, pixels).unwrap()
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let a = numbered(5, 5);
        let g = numbered(3, 8);
        let t = ViewTransform {
            quarter_turns: 1,
            mirror: false,
        };
        let (mut a2, mut g2) = (a.clone(), g.clone());
        for _ in 0..4 {
            a2 = transform_aerial(&a2, t).unwrap();
            g2 = transform_ground(&g2, t).unwrap();
        }
        assert_eq!((a2, g2), (a, g));
    }

    #[test]
    fn quarter_turn_sends_north_to_east() {
        let a = numbered(4, 4);
        let t = ViewTransform {
            quarter_turns: 1,
            mirror: false,
        };
        let r = transform_aerial(&a, t).unwrap();
        // top-left corner moves to the top-right
        assert_eq!(r.get(0, 3), a.get(0, 0));
        let g = numbered(1, 8);
        let rg = transform_ground(&g, t).unwrap();
        assert_eq!(rg.get(0, 2), g.get(0, 0));
    }

    #[test]
    fn mirror_is_an_involution() {
        let t = ViewTransform {
            quarter_turns: 0,
            mirror: true,
        };
        let a = numbered(4, 4);
        let g = numbered(2, 8);
        let a2 = transform_aerial(&transform_aerial(&a, t).unwrap(), t).unwrap();
        let g2 = transform_ground(&transform_ground(&g, t).unwrap(), t).unwrap();
        assert_eq!(transform_ground(&g, t).unwrap().get(0, 0), g.get(0, 7));
        assert_eq!((a2, g2), (a, g));
    }

    #[test]
    fn rejects_unsupported_sizes() {
        let t = ViewTransform::default();
        assert!(transform_aerial(&numbered(4, 6), t).is_err());
        assert!(transform_ground(&numbered(4, 6), t).is_err());
        assert!(supports_transforms((32, 64), (32, 32)));
        assert!(!supports_transforms((32, 62), (32, 32)));
    }

    #[test]
    fn all_transforms_are_distinct() {
        let a = numbered(4, 4);
        let mut seen: Vec<Raster> = ViewTransform::ALL.iter().map(|&t| transform_aerial(&a, t).unwrap()).collect();
        seen.sort_by(|x, y| x.pixels().cmp(y.pixels()));
        seen.dedup();
        assert_eq!(seen.len(), 8);
    }
}
