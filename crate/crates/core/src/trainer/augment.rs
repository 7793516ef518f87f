//! Train-time augmentation: zero padding with a random crop back to the
//! source size, bilinear resize to the model input, and random erasing.

use rand::Rng;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub pad: usize,
    pub erasing_prob: f64,
    /// Erased area as a fraction of the image.
    pub erasing_area: (f64, f64),
    /// Height-to-width ratio range of the erased rectangle.
    pub erasing_aspect: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { pad: 10, erasing_prob: 0.5, erasing_area: (0.02, 0.4), erasing_aspect: (0.3, 3.3) }
    }
}

/// Erased rectangle `(y, x, height, width)`.
pub type Rect = (usize, usize, usize, usize);

/// Returns the augmented `[3, out_h, out_w]` image and the erased rectangle,
/// if any.
pub fn augment(
    image: &Tensor<f32>,
    (out_h, out_w): (usize, usize),
    config: &AugmentConfig,
    rng: &mut impl Rng,
) -> (Tensor<f32>, Option<Rect>) {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let p = config.pad;
    let dy = rng.random_range(0..=2 * p) as isize - p as isize;
    let dx = rng.random_range(0..=2 * p) as isize - p as isize;
    let src = image.data();
    let cropped = Tensor::from_fn([3, h, w], |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        let (sy, sx) = (y as isize + dy, x as isize + dx);
        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
            0.0
        } else {
            src[(c * h + sy as usize) * w + sx as usize]
        }
    });
    let mut out = resize(&cropped, out_h, out_w);
    let mut erased = None;
    if rng.random_bool(config.erasing_prob) {
        let rect = erasing_rect(out_h, out_w, config, rng);
        let (y0, x0, rh, rw) = rect;
        let data = out.data_mut();
        for c in 0..3 {
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    data[(c * out_h + y) * out_w + x] = rng.random();
                }
            }
        }
        erased = Some(rect);
    }
    (out, erased)
}

fn erasing_rect(h: usize, w: usize, config: &AugmentConfig, rng: &mut impl Rng) -> Rect {
    let area = (h * w) as f64;
    for _ in 0..100 {
        let target = rng.random_range(config.erasing_area.0..=config.erasing_area.1) * area;
        let aspect = rng.random_range(config.erasing_aspect.0.ln()..=config.erasing_aspect.1.ln()).exp();
        let rh = (target * aspect).sqrt().round() as usize;
        let rw = (target / aspect).sqrt().round() as usize;
        if (1..h).contains(&rh) && (1..w).contains(&rw) {
            return (rng.random_range(0..=h - rh), rng.random_range(0..=w - rw), rh, rw);
        }
    }
    // tiny images: fall back to a single pixel
    (rng.random_range(0..h), rng.random_range(0..w), 1, 1)
}

/// Bilinear resize with half-pixel centers; the identity when sizes match.
pub fn resize(image: &Tensor<f32>, out_h: usize, out_w: usize) -> Tensor<f32> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if (h, w) == (out_h, out_w) {
        return image.clone();
    }
    let src = image.data();
    let coord = |o: usize, n_out: usize, n_in: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(n_in - 1), (s - i0 as f64) as f32)
    };
    Tensor::from_fn([3, out_h, out_w], |i| {
        let (c, y, x) = (i / (out_h * out_w), (i / out_w) % out_h, i % out_w);
        let (y0, y1, ty) = coord(y, out_h, h);
        let (x0, x1, tx) = coord(x, out_w, w);
        let at = |yy: usize, xx: usize| src[(c * h + yy) * w + xx];
        let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
        let bottom = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
        top * (1.0 - ty) + bottom * ty
    })
}
