//! Printed-ECG style rendering of a 12-lead record into a grayscale raster.

mod pgm;

pub use pgm::{decode_pgm, encode_pgm, read_pgm, write_pgm};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{EcgRecord, N_LEADS};

/// Gray level of the optional background grid.
pub const GRID_LEVEL: f64 = 0.85;
/// Smallest allowed cell extent in pixels.
pub const MIN_CELL_PX: usize = 16;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("invalid layout: {0}")]
    Layout(String),
    #[error("image {height}x{width} too small: need at least {min_height}x{min_width}")]
    TooSmall {
        height: usize,
        width: usize,
        min_height: usize,
        min_width: usize,
    },
    #[error("lead {lead} sample {index} is not finite")]
    NonFinite { lead: usize, index: usize },
    #[error("pgm format error: {0}")]
    Format(String),
    #[error("pgm truncated: expected {expected} payload bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RasterError>;

/// Row-major grayscale raster, 0 = ink, 1 = paper.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl EcgImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(RasterError::Format(format!(
                "{height}x{width} image cannot hold {} pixels",
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(RasterError::Format(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn blank(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![1.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    fn set(&mut self, y: usize, x: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    /// 8-bit quantization `round(p * 255)`, as stored in PGM files.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|p| (p * 255.0).round() as u8).collect()
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != height * width {
            return Err(RasterError::Truncated {
                expected: height * width,
                found: bytes.len(),
            });
        }
        Self::new(height, width, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    /// Pixels darker than paper.
    pub fn ink_count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p < 1.0).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutSpec {
    pub rows: usize,
    pub cols: usize,
    /// Blank border inside every cell, pixels.
    pub margin: usize,
    pub draw_grid: bool,
    pub grid_spacing: usize,
    pub thickness: usize,
    /// Millivolts spanned by the usable cell height.
    pub mv_per_cell_height: f64,
    /// Polyline vertices per horizontal pixel; keeps narrow QRS peaks from
    /// falling between sample columns.
    pub oversample: usize,
}

impl Default for LayoutSpec {
    fn default() -> Self {
        Self {
            rows: 6,
            cols: 2,
            margin: 2,
            draw_grid: false,
            grid_spacing: 16,
            thickness: 1,
            mv_per_cell_height: 3.0,
            oversample: 4,
        }
    }
}

impl LayoutSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rows * self.cols != N_LEADS {
            return Err(RasterError::Layout(format!(
                "{}x{} grid does not hold {N_LEADS} leads",
                self.rows, self.cols
            )));
        }
        if self.grid_spacing == 0 || self.thickness == 0 || self.oversample == 0 {
            return Err(RasterError::Layout("grid spacing, thickness and oversample must be positive".into()));
        }
        if !(self.mv_per_cell_height > 0.0 && self.mv_per_cell_height.is_finite()) {
            return Err(RasterError::Layout(format!(
                "mv_per_cell_height must be positive, got {}",
                self.mv_per_cell_height
            )));
        }
        if 2 * self.margin + 2 > MIN_CELL_PX {
            return Err(RasterError::Layout(format!("margin {} leaves no drawable area", self.margin)));
        }
        Ok(())
    }

    /// Bounds `[y0, y1) x [x0, x1)` of the cell holding lead `lead`.
    pub fn cell_bounds(&self, lead: usize, height: usize, width: usize) -> (usize, usize, usize, usize) {
        let (r, c) = (lead / self.cols, lead % self.cols);
        (
            r * height / self.rows,
            (r + 1) * height / self.rows,
            c * width / self.cols,
            (c + 1) * width / self.cols,
        )
    }

    pub fn min_size(&self) -> (usize, usize) {
        (self.rows * MIN_CELL_PX, self.cols * MIN_CELL_PX)
    }
}

/// Plots `(x0, y0) -> (x1, y1)` with integer Bresenham stepping.
fn draw_line(img: &mut EcgImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), mut plot: impl FnMut(&mut EcgImage, i64, i64)) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        plot(img, x, y);
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

/// Renders the record; every lead is drawn as a black polyline inside its own grid cell.
pub fn render_record(record: &EcgRecord, layout: &LayoutSpec, height: usize, width: usize) -> Result<EcgImage> {
    layout.validate()?;
    let (min_h, min_w) = layout.min_size();
    if height < min_h || width < min_w {
        return Err(RasterError::TooSmall {
            height,
            width,
            min_height: min_h,
            min_width: min_w,
        });
    }
    for lead in 0..N_LEADS {
        if let Some(index) = record.lead(lead).iter().position(|v| !v.is_finite()) {
            return Err(RasterError::NonFinite { lead, index });
        }
    }
    let mut img = EcgImage::blank(height, width);
    if layout.draw_grid {
        for y in 0..height {
            for x in 0..width {
                if y % layout.grid_spacing == 0 || x % layout.grid_spacing == 0 {
                    img.set(y, x, GRID_LEVEL);
                }
            }
        }
    }
    let t = record.len();
    for lead in 0..N_LEADS {
        let (y0, y1, x0, x1) = layout.cell_bounds(lead, height, width);
        let m = layout.margin;
        let (top, bottom) = ((y0 + m) as i64, (y1 - m - 1) as i64);
        let (left, cell_w) = ((x0 + m) as i64, x1 - x0 - 2 * m);
        let cell_h = (y1 - y0 - 2 * m) as f64;
        let mid = top + (bottom - top) / 2;
        let samples = record.lead(lead);
        let n_points = (cell_w - 1) * layout.oversample + 1;
        let point = |j: usize| -> (i64, i64) {
            let xf = j as f64 / layout.oversample as f64;
            let pos = if cell_w > 1 && t > 1 {
                xf * (t - 1) as f64 / (cell_w - 1) as f64
            } else {
                0.0
            };
            let i = (pos.floor() as usize).min(t - 1);
            let frac = pos - i as f64;
            let v = if i + 1 < t {
                samples[i] * (1.0 - frac) + samples[i + 1] * frac
            } else {
                samples[i]
            };
            let dy = (v / layout.mv_per_cell_height * cell_h).round();
            let y = (mid as f64 - dy).clamp(top as f64, bottom as f64) as i64;
            (left + xf.round() as i64, y)
        };
        let thickness = layout.thickness as i64;
        let plot = |img: &mut EcgImage, x: i64, y: i64| {
            for k in 0..thickness {
                let yy = (y + k).min(bottom);
                img.set(yy as usize, x as usize, 0.0);
            }
        };
        let mut prev = point(0);
        plot(&mut img, prev.0, prev.1);
        for j in 1..n_points {
            let next = point(j);
            if next != prev {
                draw_line(&mut img, prev, next, plot);
            }
            prev = next;
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Labels;

    fn flat(len: usize) -> EcgRecord {
        EcgRecord::new(vec![0.0; N_LEADS * len], len, Labels::none(), 400.0).unwrap()
    }

    #[test]
    fn flat_record_draws_one_midline_per_cell() {
        let layout = LayoutSpec::default();
        let img = render_record(&flat(500), &layout, 192, 128).unwrap();
        for lead in 0..N_LEADS {
            let (y0, y1, x0, x1) = layout.cell_bounds(lead, 192, 128);
            let m = layout.margin;
            let mid = (y0 + m) + ((y1 - m - 1) - (y0 + m)) / 2;
            for y in y0..y1 {
                for x in x0..x1 {
                    let on_line = y == mid && x >= x0 + m && x < x1 - m;
                    assert_eq!(img.get(y, x), if on_line { 0.0 } else { 1.0 }, "lead {lead} ({y},{x})");
                }
            }
        }
    }

    #[test]
    fn rejects_small_images_and_bad_layouts() {
        let layout = LayoutSpec::default();
        assert!(matches!(
            render_record(&flat(10), &layout, 95, 64),
            Err(RasterError::TooSmall { .. })
        ));
        let bad = LayoutSpec {
            rows: 4,
            cols: 4,
            ..LayoutSpec::default()
        };
        assert!(matches!(render_record(&flat(10), &bad, 200, 200), Err(RasterError::Layout(_))));
    }

    #[test]
    fn non_finite_sample_is_an_error() {
        let mut r = flat(20);
        r.lead_mut(4)[7] = f64::NAN;
        match render_record(&r, &LayoutSpec::default(), 96, 64) {
            Err(RasterError::NonFinite { lead, index }) => assert_eq!((lead, index), (4, 7)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn large_amplitudes_are_clamped_to_the_cell() {
        let mut r = flat(50);
        r.lead_mut(0).iter_mut().for_each(|v| *v = 1e6);
        let layout = LayoutSpec::default();
        let img = render_record(&r, &layout, 96, 64).unwrap();
        let (y0, _, x0, x1) = layout.cell_bounds(0, 96, 64);
        let top = y0 + layout.margin;
        assert!((x0 + layout.margin..x1 - layout.margin).all(|x| img.get(top, x) == 0.0));
    }

    #[test]
    fn grid_is_light_gray_under_the_trace() {
        let layout = LayoutSpec {
            draw_grid: true,
            ..LayoutSpec::default()
        };
        let img = render_record(&flat(50), &layout, 96, 64).unwrap();
        assert_eq!(img.get(0, 5), GRID_LEVEL);
        assert!(img.pixels().iter().all(|&p| p == 0.0 || p == GRID_LEVEL || p == 1.0));
    }
}
