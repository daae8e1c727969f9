//! Procedural test scenes: piecewise-smooth shapes over a gradient with a
//! little texture, plus darkening and noise helpers. Used for smoke runs and
//! tests where no photo corpus is available.

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub fn scene<R: Rng + ?Sized>(rng: &mut R, width: u32, height: u32) -> RgbImage {
    let top: [f32; 3] = std::array::from_fn(|_| rng.random_range(90.0..220.0));
    let bottom: [f32; 3] = std::array::from_fn(|_| rng.random_range(60.0..200.0));
    let mut buf: Vec<[f32; 3]> = (0..height)
        .flat_map(|y| {
            let t = y as f32 / height.max(2) as f32;
            let px: [f32; 3] = std::array::from_fn(|c| top[c] * (1.0 - t) + bottom[c] * t);
            std::iter::repeat_n(px, width as usize)
        })
        .collect();

    let shapes = rng.random_range(4..10);
    for _ in 0..shapes {
        let color: [f32; 3] = std::array::from_fn(|_| rng.random_range(20.0..250.0));
        let cx = rng.random_range(0.0..width as f32);
        let cy = rng.random_range(0.0..height as f32);
        let rx = rng.random_range(0.05..0.35) * width as f32;
        let ry = rng.random_range(0.05..0.35) * height as f32;
        let disk = rng.random_bool(0.5);
        for y in 0..height {
            for x in 0..width {
                let dx = (x as f32 - cx) / rx;
                let dy = (y as f32 - cy) / ry;
                let inside = if disk {
                    dx * dx + dy * dy <= 1.0
                } else {
                    dx.abs() <= 1.0 && dy.abs() <= 1.0
                };
                if inside {
                    buf[(y * width + x) as usize] = color;
                }
            }
        }
    }

    let waves: Vec<(f32, f32, f32, f32)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.02..0.3),
                rng.random_range(0.02..0.3),
                rng.random_range(0.0..std::f32::consts::TAU),
                rng.random_range(3.0..10.0),
            )
        })
        .collect();
    let grain = Normal::new(0.0f32, 2.0).expect("valid std");
    let mut img = RgbImage::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let texture: f32 = waves
                .iter()
                .map(|&(fx, fy, phase, amp)| amp * (fx * x as f32 + fy * y as f32 + phase).sin())
                .sum();
            let base = buf[(y * width + x) as usize];
            let px = std::array::from_fn(|c| {
                (base[c] + texture + grain.sample(rng)).round().clamp(0.0, 255.0) as u8
            });
            img.put_pixel(x, y, Rgb(px));
        }
    }
    img
}

/// Scales intensities by `factor`.
pub fn darken(img: &RgbImage, factor: f32) -> RgbImage {
    let mut out = img.clone();
    for v in out.iter_mut() {
        *v = (*v as f32 * factor).round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Adds i.i.d. Gaussian noise with standard deviation `sigma` (0-255 scale).
pub fn add_gaussian_noise<R: Rng + ?Sized>(img: &RgbImage, sigma: f32, rng: &mut R) -> RgbImage {
    let noise = Normal::new(0.0f32, sigma).expect("valid std");
    let mut out = img.clone();
    for v in out.iter_mut() {
        *v = (*v as f32 + noise.sample(rng)).round().clamp(0.0, 255.0) as u8;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::mean_intensity;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scenes_are_seeded_and_darkening_darkens() {
        let a = scene(&mut ChaCha8Rng::seed_from_u64(1), 32, 24);
        let b = scene(&mut ChaCha8Rng::seed_from_u64(1), 32, 24);
        assert_eq!(a, b);
        assert_eq!(a.dimensions(), (32, 24));
        let dark = darken(&a, 0.2);
        assert!(mean_intensity(&dark) < 0.25 * mean_intensity(&a));
    }
}
