use crate::error::{Error, Result};
use crate::geometry::{CenterBox, Rect};
use crate::tokenization::ImageCrop;

/// Square frame window resampled to `out_size × out_size` pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropTransform {
    /// Frame coordinates of the window's top-left corner.
    pub x0: f64,
    pub y0: f64,
    /// Window side in frame pixels.
    pub side: f64,
    pub out_size: usize,
}

impl CropTransform {
    /// Window of side `factor·sqrt(w·h)` centered on `r`.
    pub fn around(r: &Rect, factor: f64, out_size: usize) -> Result<Self> {
        let side = factor * (r.w * r.h).sqrt();
        if !(side.is_finite() && side > 0.0) || out_size == 0 {
            return Err(Error::Tracking(format!(
                "degenerate crop of side {side} around {r:?}"
            )));
        }
        let (cx, cy) = r.center();
        Ok(Self {
            x0: cx - side / 2.0,
            y0: cy - side / 2.0,
            side,
            out_size,
        })
    }

    /// Maps a box in normalized crop coordinates to frame pixels.
    pub fn to_frame(&self, b: &CenterBox) -> Rect {
        Rect::from_center(
            self.x0 + b.cx * self.side,
            self.y0 + b.cy * self.side,
            b.w * self.side,
            b.h * self.side,
        )
    }

    /// Maps a frame box into normalized crop coordinates.
    pub fn to_crop(&self, r: &Rect) -> CenterBox {
        let (cx, cy) = r.center();
        CenterBox::new(
            (cx - self.x0) / self.side,
            (cy - self.y0) / self.side,
            r.w / self.side,
            r.h / self.side,
        )
    }

    /// Bilinear resampling of the window; samples outside the frame take
    /// the frame's channel mean.
    pub fn sample(&self, frame: &ImageCrop) -> ImageCrop {
        let mean = frame.channel_mean();
        let scale = self.side / self.out_size as f64;
        let (fh, fw) = (frame.height() as isize, frame.width() as isize);
        let fetch = |y: isize, x: isize| -> [f64; 3] {
            if y < 0 || x < 0 || y >= fh || x >= fw {
                mean
            } else {
                frame.pixel(y as usize, x as usize)
            }
        };
        ImageCrop::from_fn(self.out_size, self.out_size, |v, u| {
            let fx = self.x0 + (u as f64 + 0.5) * scale - 0.5;
            let fy = self.y0 + (v as f64 + 0.5) * scale - 0.5;
            let (x0, y0) = (fx.floor(), fy.floor());
            let (ax, ay) = (fx - x0, fy - y0);
            let (xi, yi) = (x0 as isize, y0 as isize);
            let p00 = fetch(yi, xi);
            let p01 = fetch(yi, xi + 1);
            let p10 = fetch(yi + 1, xi);
            let p11 = fetch(yi + 1, xi + 1);
            let mut out = [0.0; 3];
            for c in 0..3 {
                let top = p00[c] * (1.0 - ax) + p01[c] * ax;
                let bot = p10[c] * (1.0 - ax) + p11[c] * ax;
                out[c] = top * (1.0 - ay) + bot * ay;
            }
            out
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalized_box_to_frame() {
        let t = CropTransform {
            x0: 100.0,
            y0: 60.0,
            side: 128.0,
            out_size: 128,
        };
        let r = t.to_frame(&CenterBox::new(0.5, 0.5, 0.25, 0.25));
        assert_eq!(r.center(), (164.0, 124.0));
        assert_eq!((r.w, r.h), (32.0, 32.0));
    }

    #[test]
    fn identity_crop_reproduces_frame() {
        let frame = ImageCrop::from_fn(8, 8, |y, x| [y as f64 / 8.0, x as f64 / 8.0, 0.5]);
        let t = CropTransform {
            x0: 0.0,
            y0: 0.0,
            side: 8.0,
            out_size: 8,
        };
        let c = t.sample(&frame);
        for (a, b) in c.data().iter().zip(frame.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn outside_is_mean_padded() {
        let frame = ImageCrop::from_fn(4, 4, |y, _| [y as f64 / 3.0, 0.0, 1.0]);
        let t = CropTransform {
            x0: -100.0,
            y0: -100.0,
            side: 8.0,
            out_size: 4,
        };
        let c = t.sample(&frame);
        let m = frame.channel_mean();
        assert!(c
            .data()
            .chunks(3)
            .all(|p| (p[0] - m[0]).abs() < 1e-12 && p[2] == 1.0));
    }

    #[test]
    fn zero_size_box_is_tracking_error() {
        let r = Rect::new(10.0, 10.0, 0.0, 5.0);
        assert!(matches!(
            CropTransform::around(&r, 4.0, 64),
            Err(Error::Tracking(_))
        ));
    }

    proptest! {
        #[test]
        fn crop_round_trip(x in -50.0f64..300.0, y in -50.0f64..300.0, w in 1.0f64..100.0, h in 1.0f64..100.0,
                           bx in 0.0f64..200.0, by in 0.0f64..200.0, bw in 1.0f64..80.0, bh in 1.0f64..80.0) {
            let t = CropTransform::around(&Rect::new(x, y, w, h), 4.0, 64).unwrap();
            let r = Rect::new(bx, by, bw, bh);
            let back = t.to_frame(&t.to_crop(&r));
            prop_assert!((back.x - r.x).abs() < 0.5 && (back.y - r.y).abs() < 0.5);
            prop_assert!((back.w - r.w).abs() < 0.5 && (back.h - r.h).abs() < 0.5);
        }
    }
}
