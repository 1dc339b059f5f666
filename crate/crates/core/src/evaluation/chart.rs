use std::path::Path;

use image::{Rgb, RgbImage};

use super::ReportRow;
use crate::error::{Error, Result};

// 3x5 glyphs, one byte per row, three low bits used (MSB on the left).
fn glyph(c: char) -> [u8; 5] {
    match c {
        'A' => [0b010, 0b101, 0b111, 0b101, 0b101],
        'B' => [0b110, 0b101, 0b110, 0b101, 0b110],
        'C' => [0b011, 0b100, 0b100, 0b100, 0b011],
        'D' => [0b110, 0b101, 0b101, 0b101, 0b110],
        'E' => [0b111, 0b100, 0b110, 0b100, 0b111],
        'F' => [0b111, 0b100, 0b110, 0b100, 0b100],
        'G' => [0b011, 0b100, 0b101, 0b101, 0b011],
        'H' => [0b101, 0b101, 0b111, 0b101, 0b101],
        'I' => [0b111, 0b010, 0b010, 0b010, 0b111],
        'J' => [0b001, 0b001, 0b001, 0b101, 0b010],
        'K' => [0b101, 0b101, 0b110, 0b101, 0b101],
        'L' => [0b100, 0b100, 0b100, 0b100, 0b111],
        'M' => [0b101, 0b111, 0b111, 0b101, 0b101],
        'N' => [0b110, 0b101, 0b101, 0b101, 0b101],
        'O' => [0b010, 0b101, 0b101, 0b101, 0b010],
        'P' => [0b110, 0b101, 0b110, 0b100, 0b100],
        'Q' => [0b010, 0b101, 0b101, 0b110, 0b011],
        'R' => [0b110, 0b101, 0b110, 0b101, 0b101],
        'S' => [0b011, 0b100, 0b010, 0b001, 0b110],
        'T' => [0b111, 0b010, 0b010, 0b010, 0b010],
        'U' => [0b101, 0b101, 0b101, 0b101, 0b111],
        'V' => [0b101, 0b101, 0b101, 0b101, 0b010],
        'W' => [0b101, 0b101, 0b111, 0b111, 0b101],
        'X' => [0b101, 0b101, 0b010, 0b101, 0b101],
        'Y' => [0b101, 0b101, 0b010, 0b010, 0b010],
        'Z' => [0b111, 0b001, 0b010, 0b100, 0b111],
        'p' => [0b000, 0b110, 0b101, 0b110, 0b100],
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b110, 0b001, 0b010, 0b100, 0b111],
        '3' => [0b110, 0b001, 0b010, 0b001, 0b110],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b110, 0b001, 0b110],
        '6' => [0b011, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b110],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        _ => [0; 5],
    }
}

const SCALE: u32 = 2;
const INK: Rgb<u8> = Rgb([20, 20, 20]);

fn text_width(s: &str) -> u32 {
    s.chars().count() as u32 * 4 * SCALE
}

fn draw_text(img: &mut RgbImage, x: u32, y: u32, s: &str) {
    for (i, c) in s.chars().enumerate() {
        let rows = glyph(c);
        for (dy, bits) in rows.iter().enumerate() {
            for dx in 0..3u32 {
                if bits >> (2 - dx) & 1 == 1 {
                    for sy in 0..SCALE {
                        for sx in 0..SCALE {
                            let px = x + (i as u32 * 4 + dx) * SCALE + sx;
                            let py = y + dy as u32 * SCALE + sy;
                            if px < img.width() && py < img.height() {
                                img.put_pixel(px, py, INK);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn fill(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, c: Rgb<u8>) {
    for y in y0..y1.min(img.height()) {
        for x in x0..x1.min(img.width()) {
            img.put_pixel(x, y, c);
        }
    }
}

/// Bar chart with one bar per variation row, labelled with its acronym and
/// mean error. Rows without samples get a label and no bar.
pub fn draw_bar_chart(rows: &[ReportRow]) -> RgbImage {
    let bars: Vec<&ReportRow> = rows.iter().filter(|r| r.scope == "variation").collect();
    let (bar_w, gap, margin) = (28u32, 10u32, 20u32);
    let (plot_h, top, bottom) = (200u32, 30u32, 40u32);
    let width = (2 * margin + bars.len() as u32 * (bar_w + gap)).max(120);
    let height = top + plot_h + bottom;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let peak = bars
        .iter()
        .filter_map(|r| r.nme)
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let base_y = top + plot_h;
    fill(&mut img, margin / 2, base_y, width - margin / 2, base_y + 1, INK);
    draw_text(&mut img, margin / 2, 8, "NME");
    for (i, r) in bars.iter().enumerate() {
        let x = margin + i as u32 * (bar_w + gap);
        if let Some(v) = r.nme {
            let h = ((v / peak) * plot_h as f64).round() as u32;
            fill(&mut img, x, base_y - h, x + bar_w, base_y, Rgb([70, 110, 180]));
            let label = format!("{v:.3}").trim_start_matches('0').to_string();
            let lx = x + bar_w.saturating_sub(text_width(&label)) / 2;
            draw_text(&mut img, lx, (base_y - h).saturating_sub(14), &label);
        }
        let lx = x + bar_w.saturating_sub(text_width(&r.variation)) / 2;
        draw_text(&mut img, lx, base_y + 8, &r.variation);
    }
    img
}

pub fn save_bar_chart(path: &Path, rows: &[ReportRow]) -> Result<()> {
    draw_bar_chart(rows)
        .save(path)
        .map_err(|e| Error::InvalidImage(format!("{}: {e}", path.display())))
}
