//! Class-conditional coloured-blob images for desk-scale runs.
//!
//! Each image is a noisy grey background with one filled disc whose colour is
//! fixed by the class; position and radius vary. The disc covers at least
//! `(r_min / size)^2 * pi` of the image, so the mean RGB vector alone separates
//! the classes.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{io_err, Error, Result};
use crate::seed::rng_for;

/// Saturated, well-separated colour for class `c` of `n`.
pub fn class_colour(c: usize, n: usize) -> [u8; 3] {
    const FIXED: [[u8; 3]; 6] = [
        [220, 30, 30],
        [30, 200, 40],
        [40, 60, 230],
        [230, 210, 20],
        [200, 40, 210],
        [20, 200, 210],
    ];
    if n <= FIXED.len() {
        return FIXED[c];
    }
    let h = c as f64 / n as f64 * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [r, g, b].map(|v: f64| (30.0 + 200.0 * v).round() as u8)
}

pub fn blob_image<R: Rng + ?Sized>(class: usize, n_classes: usize, size: u32, rng: &mut R) -> image::RgbImage {
    let colour = class_colour(class, n_classes);
    let s = size as f64;
    let radius = rng.random_range(0.25 * s..0.35 * s);
    let cx = rng.random_range(radius..s - radius);
    let cy = rng.random_range(radius..s - radius);
    image::RgbImage::from_fn(size, size, |x, y| {
        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        let noise: i16 = rng.random_range(-12..=12);
        let base = if dx * dx + dy * dy <= radius * radius {
            colour
        } else {
            [110, 110, 110]
        };
        image::Rgb(base.map(|v| (v as i16 + noise).clamp(0, 255) as u8))
    })
}

/// Writes `per_class` PNGs for each of `classes` classes under
/// `root/class_XX/img_YYYY.png`. Output depends only on the arguments.
pub fn write_dataset(root: &Path, classes: usize, per_class: usize, size: u32, seed: u64) -> Result<()> {
    if classes == 0 || per_class == 0 || size < 8 {
        return Err(Error::InvalidArgument(
            "synthetic dataset needs at least one class, one image and 8x8 pixels".into(),
        ));
    }
    (0..classes).into_par_iter().try_for_each(|c| {
        let dir = root.join(format!("class_{c:02}"));
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut rng = rng_for(seed, &["synthetic", &c.to_string()]);
        for j in 0..per_class {
            let path = dir.join(format!("img_{j:04}.png"));
            blob_image(c, classes, size, &mut rng)
                .save(&path)
                .map_err(|source| Error::Image { path, source })?;
        }
        Ok(())
    })
}
