//! Synthetic matched ground/aerial pairs, field-of-view crops, overlap
//! labels, and the on-disk dataset layout.

mod augment;
mod manifest;
mod overlap;
mod scene;

pub use augment::{supports_transforms, transform_aerial, transform_ground, ViewTransform};
pub use manifest::{load_dataset, load_manifest, save_dataset, Manifest, ManifestItem, MANIFEST_VERSION};
pub use overlap::{iou, iou_label, mask_for_batch, OverlapLabels, Tile, POSITIVE_IOU, SEMI_POSITIVE_IOU};
pub use scene::{generate_scene_pairs, ScenePair, ViewSizes};

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// 8-bit RGB image, row-major, channels interleaved.
#[derive(Clone, PartialEq, Eq)]
pub struct Raster {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for Raster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Raster({}x{})", self.height, self.width)
    }
}

impl Raster {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0; height * width * 3],
        }
    }

    pub fn from_pixels(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::dim(format!(
                "{} bytes for a {height}x{width} RGB raster",
                pixels.len()
            )));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Stores a color given in `[0, 1]`, quantized to 8 bits.
    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        for c in 0..3 {
            self.pixels[i + c] = (rgb[c].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }

    /// Channels-first `[3, h, w]` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let plane = self.height * self.width;
        let mut data = vec![0.0f32; 3 * plane];
        for (p, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + p] = px[c] as f32 / 255.0;
            }
        }
        Tensor::from_vec(&[3, self.height, self.width], data).expect("finite pixels")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let encode_err = |e: png::EncodingError| Error::Parse {
            field: path.display().to_string(),
            detail: e.to_string(),
        };
        let mut writer = enc.write_header().map_err(encode_err)?;
        writer.write_image_data(&self.pixels).map_err(encode_err)?;
        writer.finish().map_err(encode_err)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let decode_err = |e: png::DecodingError| Error::Parse {
            field: path.display().to_string(),
            detail: e.to_string(),
        };
        let mut reader = png::Decoder::new(std::io::BufReader::new(file))
            .read_info()
            .map_err(decode_err)?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf).map_err(decode_err)?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Parse {
                field: path.display().to_string(),
                detail: format!("expected 8-bit RGB, got {:?} {:?}", info.color_type, info.bit_depth),
            });
        }
        buf.truncate(info.buffer_size());
        Raster::from_pixels(info.height as usize, info.width as usize, buf)
    }
}

/// Limited field-of-view crop of a 360 degree panorama `[3, h, w]`.
///
/// Keeps `round(w * fov / 360)` columns starting at column
/// `round(w * orientation / 360)`, wrapping around the seam.
pub fn fov_crop(panorama: &Tensor<f32>, fov_deg: f64, orientation_deg: f64) -> Result<Tensor<f32>> {
    let s = panorama.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dim(format!("panorama must be [3, h, w], got {s:?}")));
    }
    if !(fov_deg > 0.0 && fov_deg <= 360.0) {
        return Err(Error::contract(format!("field of view {fov_deg} outside (0, 360]")));
    }
    if !orientation_deg.is_finite() {
        return Err(Error::contract("orientation must be finite"));
    }
    let (h, w) = (s[1], s[2]);
    let width = (w as f64 * fov_deg / 360.0).round() as usize;
    if width == 0 {
        return Err(Error::contract(format!(
            "field of view {fov_deg} keeps no columns of a {w}-wide panorama"
        )));
    }
    let start = (w as f64 * orientation_deg.rem_euclid(360.0) / 360.0).round() as usize;
    let src = panorama.data();
    let mut out = Vec::with_capacity(3 * h * width);
    for c in 0..3 {
        for y in 0..h {
            let row = &src[(c * h + y) * w..(c * h + y + 1) * w];
            out.extend((0..width).map(|k| row[(start + k) % w]));
        }
    }
    Tensor::from_vec(&[3, h, width], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize) -> Tensor<f32> {
        let data = (0..3 * 2 * w).map(|i| (i % w) as f32).collect();
        Tensor::from_vec(&[3, 2, w], data).unwrap()
    }

    #[test]
    fn fov_width_and_wrap() {
        let p = ramp(8);
        let c = fov_crop(&p, 90.0, 315.0).unwrap();
        assert_eq!(c.shape(), &[3, 2, 2]);
        assert_eq!(&c.data()[..2], &[7.0, 0.0]);
        let full = fov_crop(&p, 360.0, 0.0).unwrap();
        assert_eq!(full, p);
    }

    #[test]
    fn fov_rejects_bad_angles() {
        let p = ramp(8);
        assert!(fov_crop(&p, 0.0, 0.0).is_err());
        assert!(fov_crop(&p, 400.0, 0.0).is_err());
        assert!(fov_crop(&p, 10.0, 0.0).is_err());
    }

    #[test]
    fn png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = Raster::new(3, 5);
        r.set(1, 2, [0.2, 0.5, 1.0]);
        let path = dir.path().join("x.png");
        r.save_png(&path).unwrap();
        assert_eq!(Raster::load_png(&path).unwrap(), r);
    }

    #[test]
    fn tensor_layout_is_channels_first() {
        let mut r = Raster::new(1, 2);
        r.set(0, 1, [1.0, 0.0, 0.0]);
        let t = r.to_tensor();
        assert_eq!(t.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }
}
