//! Minimal static line plots for voltage trajectories.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

pub struct Series {
    pub label: String,
    pub values: Vec<f64>,
}

const W: u32 = 960;
const H: u32 = 420;
const MARGIN: u32 = 30;
const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb<u8>) {
    let n = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for k in 0..=n {
        let t = k as f64 / n as f64;
        let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        if x >= 0.0 && y >= 0.0 && (x as u32) < W && (y as u32) < H {
            img.put_pixel(x as u32, y as u32, c);
        }
    }
}

/// Draws each series against its index. Light grid lines every 0.01 on the
/// y axis and every 12 points on the x axis; `hlines` are drawn dashed.
/// Without `y_range` the range covers the data.
pub fn render_lines(series: &[Series], y_range: Option<(f64, f64)>, hlines: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let n = series.iter().map(|s| s.values.len()).max().unwrap_or(0);
    let (lo, hi) = y_range.unwrap_or_else(|| {
        let all = series.iter().flat_map(|s| s.values.iter().copied());
        let (a, b) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if a.is_finite() && b > a { (a, b) } else { (a - 0.5, a + 0.5) }
    });
    if !(hi > lo) {
        return Err(Error::Precondition("plot range is empty".into()));
    }
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let (x0, x1) = (MARGIN as f64, (W - MARGIN) as f64);
    let (y0, y1) = (MARGIN as f64, (H - MARGIN) as f64);
    let px = |k: f64| x0 + (x1 - x0) * k / (n.max(2) - 1) as f64;
    let py = |v: f64| y1 - (y1 - y0) * (v.clamp(lo, hi) - lo) / (hi - lo);

    let grid = Rgb([225, 225, 225]);
    let mut g = (lo / 0.01).ceil() * 0.01;
    while g <= hi {
        line(&mut img, (x0, py(g)), (x1, py(g)), grid);
        g += 0.01;
    }
    for k in (0..n).step_by(12) {
        line(&mut img, (px(k as f64), y0), (px(k as f64), y1), grid);
    }
    for &h in hlines {
        let mut x = x0;
        while x < x1 {
            line(&mut img, (x, py(h)), ((x + 6.0).min(x1), py(h)), Rgb([0, 0, 0]));
            x += 12.0;
        }
    }
    let frame = Rgb([60, 60, 60]);
    line(&mut img, (x0, y0), (x1, y0), frame);
    line(&mut img, (x0, y1), (x1, y1), frame);
    line(&mut img, (x0, y0), (x0, y1), frame);
    line(&mut img, (x1, y0), (x1, y1), frame);

    for (i, s) in series.iter().enumerate() {
        let c = Rgb(PALETTE[i % PALETTE.len()]);
        for (k, w) in s.values.windows(2).enumerate() {
            line(&mut img, (px(k as f64), py(w[0])), (px(k as f64 + 1.0), py(w[1])), c);
        }
        // legend swatch along the top margin
        let lx = x0 + 40.0 * i as f64;
        for dy in 0..6 {
            line(&mut img, (lx, 8.0 + dy as f64), (lx + 24.0, 8.0 + dy as f64), c);
        }
    }
    img.save(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(())
}
