use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// RGB raster with values in `[0, 1]`, stored row-major and channel-last.
/// Used both for whole frames and for crops cut out of them.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageCrop {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageCrop {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{height}×{width} RGB image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Per-channel mean.
    pub fn channel_mean(&self) -> [f64; 3] {
        let mut m = [0.0; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                m[c] += px[c];
            }
        }
        let n = (self.height * self.width).max(1) as f64;
        m.map(|v| v / n)
    }

    /// Mirror image about the vertical axis.
    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| {
            self.pixel(y, self.width - 1 - x)
        })
    }

    /// 8-bit quantized RGB bytes.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            bytes.iter().map(|b| *b as f64 / 255.0).collect(),
        )
    }

    /// Reads an 8-bit RGB raster (PPM or PNG).
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        Self::from_rgb8(rgb.height() as usize, rgb.width() as usize, rgb.as_raw())
    }

    /// Writes a binary PPM.
    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_rgb8());
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Non-overlapping `p×p` patches in row-major order, each flattened
/// channel-last into a row of `p·p·3` values.
pub fn patchify(img: &ImageCrop, p: usize) -> Result<Tensor> {
    if p == 0 || !img.height.is_multiple_of(p) || !img.width.is_multiple_of(p) {
        return Err(Error::Geometry(format!(
            "{}×{} image is not divisible into {p}×{p} patches",
            img.height, img.width
        )));
    }
    let (gh, gw) = (img.height / p, img.width / p);
    let dim = p * p * 3;
    let mut data = Vec::with_capacity(gh * gw * dim);
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..p {
                let start = ((py * p + y) * img.width + px * p) * 3;
                data.extend_from_slice(&img.data[start..start + p * 3]);
            }
        }
    }
    Tensor::new(vec![gh * gw, dim], data)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, height: usize, width: usize, p: usize) -> Result<ImageCrop> {
    if p == 0 || !height.is_multiple_of(p) || !width.is_multiple_of(p) {
        return Err(Error::Geometry(format!(
            "{height}×{width} not divisible by {p}"
        )));
    }
    let (gh, gw) = (height / p, width / p);
    if patches.rows() != gh * gw || patches.cols() != p * p * 3 {
        return Err(Error::Shape(
            "patch tensor does not match the image grid".into(),
        ));
    }
    let mut data = vec![0.0; height * width * 3];
    for py in 0..gh {
        for px in 0..gw {
            let row = patches.row(py * gw + px);
            for y in 0..p {
                let start = ((py * p + y) * width + px * p) * 3;
                data[start..start + p * 3].copy_from_slice(&row[y * p * 3..(y + 1) * p * 3]);
            }
        }
    }
    ImageCrop::new(height, width, data)
}

/// Splits a `grid×grid` patch grid into its central `central×central` block
/// and the surrounding ring. Both index lists are row-major and ascending.
pub fn dynamic_split(grid: usize, central: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if central == 0 || central > grid || !(grid - central).is_multiple_of(2) {
        return Err(Error::Geometry(format!(
            "central {central}×{central} block is not centered in a {grid}×{grid} grid"
        )));
    }
    let lo = (grid - central) / 2;
    let hi = lo + central;
    let mut inner = Vec::with_capacity(central * central);
    let mut ring = Vec::with_capacity(grid * grid - central * central);
    for i in 0..grid {
        for j in 0..grid {
            if (lo..hi).contains(&i) && (lo..hi).contains(&j) {
                inner.push(i * grid + j);
            } else {
                ring.push(i * grid + j);
            }
        }
    }
    Ok((inner, ring))
}

/// Dynamic-target and dynamic-background patch indices of a square region
/// whose central `central_px` square holds the target.
pub fn split_dynamic_region(
    region: &ImageCrop,
    p: usize,
    central_px: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if region.height != region.width {
        return Err(Error::Geometry("dynamic region must be square".into()));
    }
    if p == 0 || !region.height.is_multiple_of(p) || !central_px.is_multiple_of(p) {
        return Err(Error::Geometry(format!(
            "central {central_px} px square is not patch-aligned for patch {p}"
        )));
    }
    dynamic_split(region.height / p, central_px / p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn patch_counts() {
        let img = ImageCrop::filled(128, 128, [0.5; 3]);
        assert_eq!(patchify(&img, 16).unwrap().rows(), 64);
        let img = ImageCrop::filled(256, 256, [0.5; 3]);
        assert_eq!(patchify(&img, 16).unwrap().rows(), 256);
        let img = ImageCrop::from_fn(16, 16, |y, x| [y as f64 / 16.0, x as f64 / 16.0, 0.1]);
        let p = patchify(&img, 16).unwrap();
        assert_eq!(p.shape(), &[1, 768]);
        assert_eq!(p.data(), img.data());
        assert!(matches!(patchify(&img, 5), Err(Error::Geometry(_))));
    }

    #[test]
    fn patch_order_is_row_major_channel_last() {
        let img = ImageCrop::from_fn(4, 4, |y, x| [(y * 4 + x) as f64, 0.0, 0.0]);
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.row(1)[0], 2.0);
        assert_eq!(p.row(2)[0], 8.0);
        assert_eq!(p.row(0)[3], 1.0);
        assert_eq!(p.row(0)[6], 4.0);
    }

    #[test]
    fn dynamic_region_splits() {
        let region = ImageCrop::filled(192, 192, [0.0; 3]);
        let (dt, db) = split_dynamic_region(&region, 16, 128).unwrap();
        assert_eq!((dt.len(), db.len()), (64, 80));
        let small = ImageCrop::filled(48, 48, [0.0; 3]);
        let (dt, db) = split_dynamic_region(&small, 16, 16).unwrap();
        assert_eq!(dt, vec![4]);
        assert_eq!(db.len(), 8);
        assert!(split_dynamic_region(&region, 16, 112).is_err());
    }

    proptest! {
        #[test]
        fn unpatchify_inverts_patchify(gh in 1usize..5, gw in 1usize..5, p in 1usize..5, seed in 0u64..1000) {
            let img = ImageCrop::from_fn(gh * p, gw * p, |y, x| {
                let v = ((y * 31 + x * 17) as u64 ^ seed) % 251;
                [v as f64 / 251.0, (v % 7) as f64 / 7.0, 0.25]
            });
            let back = unpatchify(&patchify(&img, p).unwrap(), gh * p, gw * p, p).unwrap();
            prop_assert_eq!(back, img);
        }

        #[test]
        fn dynamic_split_is_partition(half in 0usize..4, c in 1usize..6) {
            let grid = c + 2 * half;
            let (a, b) = dynamic_split(grid, c).unwrap();
            let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..grid * grid).collect::<Vec<_>>());
            prop_assert_eq!(a.len(), c * c);
        }
    }
}
