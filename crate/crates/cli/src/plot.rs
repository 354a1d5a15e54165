//! Minimal raster charts. Labels live in the accompanying summary, so the
//! images carry no text.

use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_circle_mut, draw_filled_rect_mut, draw_hollow_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const PALETTE: [Rgb<u8>; 4] = [Rgb([52, 101, 164]), Rgb([204, 0, 0]), Rgb([78, 154, 6]), Rgb([196, 160, 0])];

/// Grouped bars on a `[0, max]` axis with grid lines at tenths.
pub fn bar_chart(groups: &[(String, Vec<(String, f64)>)]) -> RgbImage {
    let (w, h, margin) = (720u32, 400u32, 40i32);
    let mut img = RgbImage::from_pixel(w, h, WHITE);
    let top = groups.iter().flat_map(|(_, bars)| bars.iter().map(|b| b.1)).fold(0.0f64, f64::max);
    let scale_max = if top > 0.0 { top * 1.1 } else { 1.0 };
    let plot_h = h as i32 - 2 * margin;
    let baseline = h as i32 - margin;
    for t in 0..=10 {
        let y = baseline - plot_h * t / 10;
        draw_line_segment_mut(&mut img, (margin as f32, y as f32), ((w as i32 - margin) as f32, y as f32), GRID);
    }
    let slot = (w as i32 - 2 * margin) / groups.len().max(1) as i32;
    for (g, (_, bars)) in groups.iter().enumerate() {
        let bar_w = (slot * 2 / 3 / bars.len().max(1) as i32).max(2);
        let x0 = margin + g as i32 * slot + slot / 6;
        for (b, (_, v)) in bars.iter().enumerate() {
            let bh = ((v.max(0.0) / scale_max) * plot_h as f64).round() as i32;
            if bh > 0 {
                let rect = Rect::at(x0 + b as i32 * bar_w, baseline - bh).of_size(bar_w as u32, bh as u32);
                draw_filled_rect_mut(&mut img, rect, PALETTE[b % PALETTE.len()]);
            }
        }
    }
    draw_axes(&mut img, margin);
    img
}

/// Points scaled into the frame, coloured by label.
pub fn scatter(points: &[[f64; 2]], labels: &[usize]) -> RgbImage {
    let (side, margin) = (600u32, 30i32);
    let mut img = RgbImage::from_pixel(side, side, WHITE);
    let bounds = |k: usize| {
        points.iter().map(|p| p[k]).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let ((x_lo, x_hi), (y_lo, y_hi)) = (bounds(0), bounds(1));
    let span = (x_hi - x_lo).max(y_hi - y_lo).max(1e-12);
    let inner = (side as i32 - 2 * margin) as f64;
    for (p, &l) in points.iter().zip(labels) {
        let x = margin + ((p[0] - x_lo) / span * inner).round() as i32;
        let y = side as i32 - margin - ((p[1] - y_lo) / span * inner).round() as i32;
        draw_filled_circle_mut(&mut img, (x, y), 4, PALETTE[l % PALETTE.len()]);
    }
    draw_axes(&mut img, margin);
    img
}

fn draw_axes(img: &mut RgbImage, margin: i32) {
    let (w, h) = img.dimensions();
    let rect = Rect::at(margin, margin).of_size(w - 2 * margin as u32, h - 2 * margin as u32);
    draw_hollow_rect_mut(img, rect, AXIS);
}
