//! Image transforms on `[C, H, W]` arrays with values in `[0, 1]`.

use ndarray::{s, Array2, Array3, ArrayView3, Axis, Zip};
use rand::seq::SliceRandom;
use rand::Rng;

use super::{ColorJitter, CropParams};

/// Rotates counter-clockwise by `quarter_turns` × 90 degrees. Requires a square image
/// for odd turn counts to keep the output shape.
pub fn rotate90(img: ArrayView3<'_, f64>, quarter_turns: u8) -> Array3<f64> {
    let (c, h, w) = img.dim();
    match quarter_turns % 4 {
        0 => img.to_owned(),
        // out[i, j] = in[j, w-1-i]
        1 => Array3::from_shape_fn((c, w, h), |(ch, i, j)| img[[ch, j, w - 1 - i]]),
        2 => Array3::from_shape_fn((c, h, w), |(ch, i, j)| img[[ch, h - 1 - i, w - 1 - j]]),
        // out[i, j] = in[h-1-j, i]
        _ => Array3::from_shape_fn((c, w, h), |(ch, i, j)| img[[ch, h - 1 - j, i]]),
    }
}

pub fn hflip(img: ArrayView3<'_, f64>) -> Array3<f64> {
    img.slice(s![.., .., ..;-1]).to_owned()
}

/// Random crop with random area and aspect ratio, resized back to `out` × `out`.
pub fn random_resized_crop<R: Rng + ?Sized>(
    img: ArrayView3<'_, f64>,
    params: &CropParams,
    out: usize,
    rng: &mut R,
) -> Array3<f64> {
    let (_, h, w) = img.dim();
    let area = (h * w) as f64;
    let (log_lo, log_hi) = (params.ratio[0].ln(), params.ratio[1].ln());
    for _ in 0..10 {
        let target = area * rng.random_range(params.scale[0]..=params.scale[1]);
        let ratio = rng.random_range(log_lo..=log_hi).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return resize_bilinear(img.slice(s![.., top..top + ch, left..left + cw]), out, out);
        }
    }
    // Fallback: central crop clamped to the allowed ratio range.
    let in_ratio = w as f64 / h as f64;
    let (cw, ch) = if in_ratio < params.ratio[0] {
        (w, ((w as f64 / params.ratio[0]).round() as usize).clamp(1, h))
    } else if in_ratio > params.ratio[1] {
        (((h as f64 * params.ratio[1]).round() as usize).clamp(1, w), h)
    } else {
        (w, h)
    };
    let top = (h - ch) / 2;
    let left = (w - cw) / 2;
    resize_bilinear(img.slice(s![.., top..top + ch, left..left + cw]), out, out)
}

/// Bilinear resize with half-pixel centers.
pub fn resize_bilinear(img: ArrayView3<'_, f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (c, h, w) = img.dim();
    if h == out_h && w == out_w {
        return img.to_owned();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let coord = |o: usize, scale: f64, n: usize| {
        let p = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, p - i0 as f64)
    };
    let ys: Vec<_> = (0..out_h).map(|o| coord(o, sy, h)).collect();
    let xs: Vec<_> = (0..out_w).map(|o| coord(o, sx, w)).collect();
    Array3::from_shape_fn((c, out_h, out_w), |(ch, i, j)| {
        let (y0, y1, fy) = ys[i];
        let (x0, x1, fx) = xs[j];
        let top = img[[ch, y0, x0]] * (1.0 - fx) + img[[ch, y0, x1]] * fx;
        let bot = img[[ch, y1, x0]] * (1.0 - fx) + img[[ch, y1, x1]] * fx;
        top * (1.0 - fy) + bot * fy
    })
}

fn luminance(img: ArrayView3<'_, f64>) -> Array2<f64> {
    if img.dim().0 == 3 {
        &img.index_axis(Axis(0), 0) * 0.299 + &img.index_axis(Axis(0), 1) * 0.587 + &img.index_axis(Axis(0), 2) * 0.114
    } else {
        img.index_axis(Axis(0), 0).to_owned()
    }
}

/// Replaces every channel with the luminance.
pub fn grayscale(img: ArrayView3<'_, f64>) -> Array3<f64> {
    let lum = luminance(img);
    let mut out = Array3::zeros(img.dim());
    for mut ch in out.axis_iter_mut(Axis(0)) {
        ch.assign(&lum);
    }
    out
}

fn blend(img: &mut Array3<f64>, other: &Array3<f64>, factor: f64) {
    Zip::from(img).and(other).for_each(|a, &b| *a = (factor * *a + (1.0 - factor) * b).clamp(0.0, 1.0));
}

fn adjust_hue(img: &mut Array3<f64>, shift: f64) {
    let (_, h, w) = img.dim();
    for i in 0..h {
        for j in 0..w {
            let (r, g, b) = (img[[0, i, j]], img[[1, i, j]], img[[2, i, j]]);
            let (hue, sat, val) = rgb_to_hsv(r, g, b);
            let (r, g, b) = hsv_to_rgb((hue + shift).rem_euclid(1.0), sat, val);
            img[[0, i, j]] = r;
            img[[1, i, j]] = g;
            img[[2, i, j]] = b;
        }
    }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let hue = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let sat = if max == 0.0 { 0.0 } else { delta / max };
    (hue, sat, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Brightness, contrast, saturation and hue jitter applied in random order.
pub fn color_jitter<R: Rng + ?Sized>(img: &mut Array3<f64>, cfg: &ColorJitter, rng: &mut R) {
    let mut order = [0u8, 1, 2, 3];
    order.shuffle(rng);
    let rgb = img.dim().0 == 3;
    for op in order {
        match op {
            0 if cfg.brightness > 0.0 => {
                let f = rng.random_range((1.0 - cfg.brightness).max(0.0)..=1.0 + cfg.brightness);
                img.mapv_inplace(|v| (v * f).clamp(0.0, 1.0));
            }
            1 if cfg.contrast > 0.0 => {
                let f = rng.random_range((1.0 - cfg.contrast).max(0.0)..=1.0 + cfg.contrast);
                let mean = luminance(img.view()).mean().unwrap_or(0.0);
                let flat = Array3::from_elem(img.dim(), mean);
                blend(img, &flat, f);
            }
            2 if cfg.saturation > 0.0 && rgb => {
                let f = rng.random_range((1.0 - cfg.saturation).max(0.0)..=1.0 + cfg.saturation);
                let gray = grayscale(img.view());
                blend(img, &gray, f);
            }
            3 if cfg.hue > 0.0 && rgb => {
                let shift = rng.random_range(-cfg.hue..=cfg.hue);
                adjust_hue(img, shift);
            }
            _ => {}
        }
    }
}
