//! Host-side grayscale raster images and plane-level resampling kernels.
//!
//! The bilinear kernel here is the single implementation shared by the
//! tensor resize op, dataset loading, augmentation, and the peekaboo
//! crop/drop pipeline, so every resampling in the system follows the same
//! convention: half-pixel centers (src = (i + 0.5) * scale - 0.5), edge
//! clamped.

use crate::scalar::Scalar;

/// Bilinear sample weights for one output coordinate axis.
#[inline]
pub(crate) fn bilinear_axis(i: usize, scale: f64, src_len: usize) -> (usize, usize, f64) {
    let pos = (i as f64 + 0.5) * scale - 0.5;
    let pos = pos.clamp(0.0, (src_len - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, pos - lo as f64)
}

/// Resize one row-major plane from (sh, sw) to (dh, dw).
pub fn bilinear_plane<F: Scalar>(src: &[F], sh: usize, sw: usize, dst: &mut [F], dh: usize, dw: usize) {
    assert_eq!(src.len(), sh * sw);
    assert_eq!(dst.len(), dh * dw);
    assert!(sh > 0 && sw > 0 && dh > 0 && dw > 0);
    let sy = sh as f64 / dh as f64;
    let sx = sw as f64 / dw as f64;
    for r in 0..dh {
        let (r0, r1, wr) = bilinear_axis(r, sy, sh);
        let wr = F::cast_from(wr);
        let one_wr = F::one() - wr;
        for c in 0..dw {
            let (c0, c1, wc) = bilinear_axis(c, sx, sw);
            let wc = F::cast_from(wc);
            let one_wc = F::one() - wc;
            let v = one_wr * (one_wc * src[r0 * sw + c0] + wc * src[r0 * sw + c1])
                + wr * (one_wc * src[r1 * sw + c0] + wc * src[r1 * sw + c1]);
            dst[r * dw + c] = v;
        }
    }
}

/// Grayscale image with values in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f64>) -> Self {
        assert_eq!(pixels.len(), width * height);
        GrayImage {
            width,
            height,
            pixels,
        }
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8], maxval: u16) -> Self {
        let inv = 1.0 / maxval as f64;
        GrayImage {
            width,
            height,
            pixels: bytes.iter().map(|&b| b as f64 * inv).collect(),
        }
    }

    /// Quantize to 8-bit (round, clamp).
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn resize(&self, width: usize, height: usize) -> GrayImage {
        let mut out = GrayImage::new(width, height);
        bilinear_plane(
            &self.pixels,
            self.height,
            self.width,
            &mut out.pixels,
            height,
            width,
        );
        out
    }

    pub fn flip_horizontal(&self) -> GrayImage {
        let mut out = self.clone();
        for r in 0..self.height {
            for c in 0..self.width {
                out.pixels[r * self.width + c] = self.get(r, self.width - 1 - c);
            }
        }
        out
    }

    /// Rotate about the image center by `degrees`, bilinear sampling,
    /// zero fill outside the source. Zero degrees is an exact identity.
    pub fn rotate(&self, degrees: f64) -> GrayImage {
        if degrees == 0.0 {
            return self.clone();
        }
        let rad = degrees.to_radians();
        let (sin, cos) = rad.sin_cos();
        let cy = (self.height as f64 - 1.0) / 2.0;
        let cx = (self.width as f64 - 1.0) / 2.0;
        let mut out = GrayImage::new(self.width, self.height);
        for r in 0..self.height {
            for c in 0..self.width {
                let dy = r as f64 - cy;
                let dx = c as f64 - cx;
                // inverse rotation back into the source
                let sr = cy + dy * cos - dx * sin;
                let sc = cx + dy * sin + dx * cos;
                out.pixels[r * self.width + c] = self.sample_zero(sr, sc);
            }
        }
        out
    }

    fn sample_zero(&self, row: f64, col: f64) -> f64 {
        if row < -1.0 || col < -1.0 || row > self.height as f64 || col > self.width as f64 {
            return 0.0;
        }
        let r0 = row.floor();
        let c0 = col.floor();
        let wr = row - r0;
        let wc = col - c0;
        let mut acc = 0.0;
        for (dr, wy) in [(0.0, 1.0 - wr), (1.0, wr)] {
            for (dc, wx) in [(0.0, 1.0 - wc), (1.0, wc)] {
                let rr = r0 + dr;
                let cc = c0 + dc;
                if rr >= 0.0 && cc >= 0.0 && rr < self.height as f64 && cc < self.width as f64 {
                    acc += wy * wx * self.get(rr as usize, cc as usize);
                }
            }
        }
        acc
    }

    /// Crop a half-open pixel box and return it as its own image.
    pub fn crop(&self, row0: usize, col0: usize, row1: usize, col1: usize) -> GrayImage {
        assert!(row0 < row1 && row1 <= self.height);
        assert!(col0 < col1 && col1 <= self.width);
        let mut out = GrayImage::new(col1 - col0, row1 - row0);
        for r in row0..row1 {
            let src = &self.pixels[r * self.width + col0..r * self.width + col1];
            let dst_row = r - row0;
            out.pixels[dst_row * (col1 - col0)..(dst_row + 1) * (col1 - col0)]
                .copy_from_slice(src);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_resize_is_identity() {
        let img = GrayImage::from_pixels(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let r = img.resize(3, 2);
        assert_eq!(r.pixels, img.pixels);
    }

    #[test]
    fn upscale_constant_stays_constant() {
        let img = GrayImage::from_pixels(2, 2, vec![0.5; 4]);
        let r = img.resize(7, 5);
        assert!(r.pixels.iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn flip_is_involution() {
        let img = GrayImage::from_pixels(3, 2, vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.125]);
        assert_eq!(img.flip_horizontal().flip_horizontal().pixels, img.pixels);
    }

    #[test]
    fn rotate_zero_is_identity() {
        let img = GrayImage::from_pixels(4, 4, (0..16).map(|i| i as f64 / 16.0).collect());
        assert_eq!(img.rotate(0.0).pixels, img.pixels);
    }

    #[test]
    fn crop_extracts_block() {
        let img = GrayImage::from_pixels(3, 3, (0..9).map(f64::from).collect());
        let c = img.crop(1, 1, 3, 3);
        assert_eq!(c.pixels, vec![4.0, 5.0, 7.0, 8.0]);
    }

    #[test]
    fn downscale_averages_linear_ramp() {
        // A 4-wide linear ramp downsampled to 2 keeps the ramp midpoints.
        let img = GrayImage::from_pixels(4, 1, vec![0.0, 1.0, 2.0, 3.0]);
        let r = img.resize(2, 1);
        assert!((r.pixels[0] - 0.5).abs() < 1e-12);
        assert!((r.pixels[1] - 2.5).abs() < 1e-12);
    }
}
