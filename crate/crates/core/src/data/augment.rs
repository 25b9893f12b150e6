use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// One draw of the training augmentation: flips, a pad-and-crop shift, and
/// per-channel brightness. The geometric part can be replayed on masks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augment {
    pub hflip: bool,
    pub vflip: bool,
    /// Crop offsets into the zero-padded image, in `0..=2 * pad`.
    pub dy: usize,
    pub dx: usize,
    pub pad: usize,
    pub brightness: [f32; 3],
}

impl Augment {
    pub const PAD: usize = 4;

    pub fn identity() -> Self {
        Self {
            hflip: false,
            vflip: false,
            dy: Self::PAD,
            dx: Self::PAD,
            pad: Self::PAD,
            brightness: [1.0; 3],
        }
    }

    pub fn draw(rng: &mut impl Rng) -> Self {
        let pad = Self::PAD;
        Self {
            hflip: rng.random_bool(0.5),
            vflip: rng.random_bool(0.5),
            dy: rng.random_range(0..=2 * pad),
            dx: rng.random_range(0..=2 * pad),
            pad,
            brightness: std::array::from_fn(|_| rng.random_range(0.8..=1.2)),
        }
    }

    /// Source pixel for output `(y, x)`, or `None` if it falls in the padding.
    fn source(&self, y: usize, x: usize, h: usize, w: usize) -> Option<(usize, usize)> {
        let sy = (y + self.dy).checked_sub(self.pad).filter(|&v| v < h)?;
        let sx = (x + self.dx).checked_sub(self.pad).filter(|&v| v < w)?;
        let sy = if self.vflip { h - 1 - sy } else { sy };
        let sx = if self.hflip { w - 1 - sx } else { sx };
        Some((sy, sx))
    }

    pub fn apply_image(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let shape = image.shape();
        if shape.len() != 3 || shape[2] != 3 {
            return Err(Error::shape("augment", shape, &[0, 0, 3]));
        }
        let (h, w) = (shape[0], shape[1]);
        let src = image.data();
        let mut out = vec![0.0f32; src.len()];
        for y in 0..h {
            for x in 0..w {
                if let Some((sy, sx)) = self.source(y, x, h, w) {
                    for c in 0..3 {
                        out[(y * w + x) * 3 + c] = (src[(sy * w + sx) * 3 + c] * self.brightness[c]).clamp(0.0, 1.0);
                    }
                }
            }
        }
        Tensor::new(shape, out)
    }

    /// Same flips and crop applied to a row-major `[h, w]` mask.
    pub fn apply_mask(&self, mask: &[bool], h: usize, w: usize) -> Result<Vec<bool>> {
        if mask.len() != h * w {
            return Err(Error::shape("augment mask", &[h, w], &[mask.len()]));
        }
        Ok((0..h * w)
            .map(|i| self.source(i / w, i % w, h, w).is_some_and(|(sy, sx)| mask[sy * w + sx]))
            .collect())
    }
}
