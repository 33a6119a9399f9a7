use crate::error::{Error, Result};

pub const DEFAULT_WIDTH: usize = 192;
pub const DEFAULT_HEIGHT: usize = 48;
pub const BACKGROUND: u8 = 255;
pub const INK: u8 = 0;

/// 8-bit grayscale image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl RasterImage {
    /// Blank (all background) image.
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, BACKGROUND)
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        RasterImage {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(RasterImage {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    /// Sets a pixel if it lies on the canvas.
    pub fn ink(&mut self, x: i64, y: i64) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = INK;
        }
    }

    /// `t x t` stamp anchored at the top-left.
    pub fn stamp(&mut self, x: i64, y: i64, t: u32) {
        for dy in 0..t as i64 {
            for dx in 0..t as i64 {
                self.ink(x + dx, y + dy);
            }
        }
    }

    /// Integer midpoint line between two points, inclusive.
    pub fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), t: u32) {
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.stamp(x, y, t);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    pub fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.ink(x, y);
            }
        }
    }

    /// Evaluates `curve` once per column in `[x0, x1]` and joins successive
    /// columns vertically so the stroke has no gaps.
    pub fn curve(&mut self, x0: i64, x1: i64, t: u32, curve: impl Fn(f64) -> f64) {
        let mut prev: Option<i64> = None;
        for x in x0..=x1 {
            let y = curve(x as f64).round() as i64;
            match prev {
                Some(p) if (p - y).abs() > 1 => {
                    let step = if y > p { 1 } else { -1 };
                    let mut yy = p + step;
                    while yy != y {
                        self.stamp(x, yy, t);
                        yy += step;
                    }
                    self.stamp(x, y, t);
                }
                _ => self.stamp(x, y, t),
            }
            prev = Some(y);
        }
    }

    /// Unions the image with its horizontal mirror (darker pixel wins).
    pub fn symmetrize(&mut self) {
        let w = self.width;
        for row in self.pixels.chunks_mut(w) {
            for x in 0..w / 2 {
                let m = row[x].min(row[w - 1 - x]);
                row[x] = m;
                row[w - 1 - x] = m;
            }
        }
    }

    pub fn is_mirror_symmetric(&self) -> bool {
        let w = self.width;
        self.pixels
            .chunks(w)
            .all(|row| (0..w / 2).all(|x| row[x] == row[w - 1 - x]))
    }

    pub fn background_fraction(&self) -> f64 {
        self.pixels.iter().filter(|&&v| v == BACKGROUND).count() as f64 / self.pixels.len() as f64
    }

    /// Mean absolute per-pixel difference.
    pub fn mean_l1(&self, other: &RasterImage) -> f64 {
        assert_eq!(
            (self.width, self.height),
            (other.width, other.height),
            "images must share dims"
        );
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(&a, &b)| (a as i32 - b as i32).unsigned_abs() as f64)
            .sum::<f64>()
            / self.pixels.len() as f64
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<RasterImage> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::Shape(format!(
                "crop {width}x{height}+{x0}+{y0} outside {}x{}",
                self.width, self.height
            )));
        }
        let mut pixels = Vec::with_capacity(width * height);
        for y in y0..y0 + height {
            pixels.extend_from_slice(&self.pixels[y * self.width + x0..y * self.width + x0 + width]);
        }
        RasterImage::from_pixels(width, height, pixels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_endpoints_and_length() {
        let mut img = RasterImage::new(10, 10);
        img.line((1, 1), (8, 4), 1);
        assert_eq!(img.get(1, 1), INK);
        assert_eq!(img.get(8, 4), INK);
        let inked = img.pixels().iter().filter(|&&v| v == INK).count();
        assert_eq!(inked, 8);
    }

    #[test]
    fn curve_has_no_vertical_gaps() {
        let mut img = RasterImage::new(20, 20);
        img.curve(0, 19, 1, |x| 0.05 * (x - 10.0).powi(2));
        for x in 1..20 {
            let col = |x: usize| (0..20).filter(|&y| img.get(x, y) == INK).collect::<Vec<_>>();
            let (a, b) = (col(x - 1), col(x));
            let touch = a.iter().any(|ya| b.iter().any(|yb| (*ya as i64 - *yb as i64).abs() <= 1));
            assert!(touch, "gap between columns {} and {x}", x - 1);
        }
    }

    #[test]
    fn symmetrize_makes_mirror_image() {
        let mut img = RasterImage::new(7, 3);
        img.set(1, 0, INK);
        img.set(5, 2, 100);
        img.symmetrize();
        assert!(img.is_mirror_symmetric());
        assert_eq!(img.get(5, 0), INK);
        assert_eq!(img.get(1, 2), 100);
    }
}
