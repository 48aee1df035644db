//! Static line charts rendered straight into RGB PNGs.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::glyphs;

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

pub fn color(i: usize) -> Rgb<u8> {
    Rgb(PALETTE[i % PALETTE.len()])
}

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn new(w: u32, h: u32) -> Self {
        Self {
            img: RgbImage::from_pixel(w, h, Rgb([255, 255, 255])),
        }
    }

    fn put(&mut self, x: i64, y: i64, c: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, c);
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>, thick: bool) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.put(x, y, c);
            if thick {
                self.put(x + 1, y, c);
                self.put(x, y + 1, c);
            }
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

    fn fill(&mut self, x: i64, y: i64, w: i64, h: i64, c: Rgb<u8>) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.put(xx, yy, c);
            }
        }
    }

    fn text(&mut self, x: i64, y: i64, s: &str, c: Rgb<u8>) {
        for (k, ch) in s.chars().enumerate() {
            let g = glyphs::glyph(ch);
            let ox = x + (k * glyphs::WIDTH) as i64;
            for (row, bits) in g.iter().enumerate() {
                for col in 0..glyphs::WIDTH {
                    if bits >> (glyphs::WIDTH - 1 - col) & 1 == 1 {
                        self.put(ox + col as i64, y + row as i64, c);
                    }
                }
            }
        }
    }

    fn text_width(s: &str) -> i64 {
        (s.chars().count() * glyphs::WIDTH) as i64
    }
}

#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Fixed y range; derived from the data when `None`.
    pub y_range: Option<(f64, f64)>,
    pub x_range: Option<(f64, f64)>,
}

fn finite_range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo > hi {
        None
    } else if lo == hi {
        Some((lo - 0.5, hi + 0.5))
    } else {
        Some((lo, hi))
    }
}

fn tick_label(v: f64, span: f64) -> String {
    let decimals = if span >= 10.0 {
        0
    } else if span >= 1.0 {
        1
    } else if span >= 0.1 {
        2
    } else {
        3
    };
    format!("{v:.decimals$}")
}

impl LineChart {
    pub const WIDTH: u32 = 720;
    pub const HEIGHT: u32 = 440;

    pub fn render(&self) -> RgbImage {
        let mut cv = Canvas::new(Self::WIDTH, Self::HEIGHT);
        let (left, right, top, bottom) = (70i64, Self::WIDTH as i64 - 20, 36i64, Self::HEIGHT as i64 - 50);
        let black = Rgb([0, 0, 0]);
        let grey = Rgb([225, 225, 225]);

        let xr = self
            .x_range
            .or_else(|| finite_range(self.series.iter().flat_map(|s| s.points.iter().map(|p| p.0))))
            .unwrap_or((0.0, 1.0));
        let yr = self
            .y_range
            .or_else(|| finite_range(self.series.iter().flat_map(|s| s.points.iter().map(|p| p.1))))
            .unwrap_or((0.0, 1.0));
        let px = |x: f64| left + ((x - xr.0) / (xr.1 - xr.0) * (right - left) as f64).round() as i64;
        let py = |y: f64| bottom - ((y - yr.0) / (yr.1 - yr.0) * (bottom - top) as f64).round() as i64;

        for k in 0..=5 {
            let fx = xr.0 + (xr.1 - xr.0) * k as f64 / 5.0;
            let fy = yr.0 + (yr.1 - yr.0) * k as f64 / 5.0;
            let (gx, gy) = (px(fx), py(fy));
            cv.line((gx, top), (gx, bottom), grey, false);
            cv.line((left, gy), (right, gy), grey, false);
            let xl = tick_label(fx, xr.1 - xr.0);
            cv.text(gx - Canvas::text_width(&xl) / 2, bottom + 6, &xl, black);
            let yl = tick_label(fy, yr.1 - yr.0);
            cv.text(left - 6 - Canvas::text_width(&yl), gy - 5, &yl, black);
        }
        cv.line((left, top), (left, bottom), black, false);
        cv.line((left, bottom), (right, bottom), black, false);
        cv.line((right, top), (right, bottom), black, false);
        cv.line((left, top), (right, top), black, false);

        cv.text((left + right) / 2 - Canvas::text_width(&self.title) / 2, 12, &self.title, black);
        cv.text((left + right) / 2 - Canvas::text_width(&self.x_label) / 2, bottom + 24, &self.x_label, black);
        cv.text(6, top - 18, &self.y_label, black);

        for (i, s) in self.series.iter().enumerate() {
            let c = color(i);
            let mut prev: Option<(i64, i64)> = None;
            for &(x, y) in &s.points {
                if !(x.is_finite() && y.is_finite()) {
                    prev = None;
                    continue;
                }
                let p = (px(x), py(y));
                match prev {
                    Some(q) => cv.line(q, p, c, true),
                    None => cv.fill(p.0 - 1, p.1 - 1, 3, 3, c),
                }
                prev = Some(p);
            }
        }

        let legend_w = self.series.iter().map(|s| Canvas::text_width(&s.name)).max().unwrap_or(0) + 30;
        let lx = right - legend_w - 8;
        for (i, s) in self.series.iter().enumerate() {
            let ly = top + 8 + 16 * i as i64;
            cv.fill(lx - 4, ly - 3, legend_w + 8, 16, Rgb([255, 255, 255]));
            cv.fill(lx, ly + 4, 18, 3, color(i));
            cv.text(lx + 24, ly, &s.name, black);
        }
        cv.img
    }

    pub fn save(&self, path: &Path) -> image::ImageResult<()> {
        self.render().save(path)
    }
}
