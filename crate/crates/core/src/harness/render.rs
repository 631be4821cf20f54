//! PNG output: segmentation overlays and branch-weight trajectories.

use std::path::{Path, PathBuf};

use super::train::{TrajectoryLog, TrajectoryRow};
use crate::blocks::BranchWeights;
use crate::data::{voxel_index, Case};
use crate::error::{Error, Result};

pub type Rgb = [u8; 3];

pub const NECROTIC: Rgb = [255, 0, 0];
pub const EDEMA: Rgb = [0, 255, 0];
pub const ENHANCING: Rgb = [255, 255, 0];
pub const OVERLAY_ALPHA: f64 = 0.5;

pub const W1_COLOUR: Rgb = [31, 119, 180];
pub const W2_COLOUR: Rgb = [255, 127, 14];
pub const W3_COLOUR: Rgb = [44, 160, 44];
pub const SUM_COLOUR: Rgb = [214, 39, 40];

pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Rgb>,
}

impl Image {
    pub fn new(width: usize, height: usize, fill: Rgb) -> Self {
        Self {
            width,
            height,
            pixels: vec![fill; width * height],
        }
    }

    /// Nearest-neighbour enlargement by an integer factor.
    pub fn upscale(&self, k: usize) -> Image {
        let mut out = Image::new(self.width * k, self.height * k, [0; 3]);
        for y in 0..out.height {
            for x in 0..out.width {
                out.pixels[y * out.width + x] = self.get(x / k, y / k);
            }
        }
        out
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.pixels[y * self.width + x]
    }

    pub fn put(&mut self, x: i64, y: i64, c: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = c;
        }
    }

    fn rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb) {
        for y in y0..=y1 {
            for x in x0..=x1 {
                self.put(x, y, c);
            }
        }
    }

    fn frame(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb) {
        for x in x0..=x1 {
            self.put(x, y0, c);
            self.put(x, y1, c);
        }
        for y in y0..=y1 {
            self.put(x0, y, c);
            self.put(x1, y, c);
        }
    }

    /// Two-pixel-wide line.
    fn line(&mut self, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb) {
        let steps = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let x = (x0 + (x1 - x0) * t).round() as i64;
            let y = (y0 + (y1 - y0) * t).round() as i64;
            self.rect(x, y, x + 1, y + 1, c);
        }
    }

    fn text(&mut self, x: i64, y: i64, s: &str, scale: i64, c: Rgb) {
        for (k, ch) in s.chars().enumerate() {
            let rows = glyph(ch);
            for (r, bits) in rows.iter().enumerate() {
                for col in 0..3 {
                    if bits >> (2 - col) & 1 == 1 {
                        let px = x + (k as i64 * 4 + col) * scale;
                        let py = y + r as i64 * scale;
                        self.rect(px, py, px + scale - 1, py + scale - 1, c);
                    }
                }
            }
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(std::io::BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
        let mut w = enc.write_header().map_err(to_io)?;
        let data: Vec<u8> = self.pixels.iter().flatten().copied().collect();
        w.write_image_data(&data).map_err(to_io)?;
        w.finish().map_err(to_io)
    }
}

/// 3×5 glyphs, one row per entry, high bit on the left.
fn glyph(c: char) -> [u8; 5] {
    match c.to_ascii_uppercase() {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 3, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 2, 2],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        '-' => [0, 0, 7, 0, 0],
        'B' => [6, 5, 6, 5, 6],
        'C' => [7, 4, 4, 4, 7],
        'E' => [7, 4, 6, 4, 7],
        'K' => [5, 5, 6, 5, 5],
        'L' => [4, 4, 4, 4, 7],
        'M' => [5, 7, 7, 5, 5],
        'O' => [7, 5, 5, 5, 7],
        'P' => [7, 5, 7, 4, 4],
        'S' => [7, 4, 7, 1, 7],
        'U' => [5, 5, 5, 5, 7],
        'W' => [5, 5, 7, 7, 5],
        _ => [0; 5],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Plane {
    Axial,
    Coronal,
    Sagittal,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Axial, Plane::Coronal, Plane::Sagittal];

    pub fn name(self) -> &'static str {
        match self {
            Plane::Axial => "axial",
            Plane::Coronal => "coronal",
            Plane::Sagittal => "sagittal",
        }
    }

    /// `(fixed axis, row axis, column axis, flip rows)` over `[x, y, z]`.
    fn axes(self) -> (usize, usize, usize, bool) {
        match self {
            Plane::Axial => (2, 1, 0, false),
            Plane::Coronal => (1, 2, 0, true),
            Plane::Sagittal => (0, 2, 1, true),
        }
    }
}

pub fn label_colour(label: u8) -> Option<Rgb> {
    match label {
        1 => Some(NECROTIC),
        2 => Some(EDEMA),
        4 => Some(ENHANCING),
        _ => None,
    }
}

/// Centroid of the labelled voxels, or the volume centre when there are none.
fn label_centroid(shape: [usize; 3], labels: &[u8]) -> [usize; 3] {
    let mut sum = [0.0f64; 3];
    let mut n = 0usize;
    for (i, _) in labels.iter().enumerate().filter(|(_, &l)| l != 0) {
        let p = [i / (shape[1] * shape[2]), (i / shape[2]) % shape[1], i % shape[2]];
        for a in 0..3 {
            sum[a] += p[a] as f64;
        }
        n += 1;
    }
    if n == 0 {
        return shape.map(|e| e / 2);
    }
    std::array::from_fn(|a| (sum[a] / n as f64).round() as usize)
}

/// FLAIR in grey with `labels` blended on top, on the slice through the
/// labels' centroid. Small volumes are upscaled to at least 256 pixels.
pub fn overlay_slice(case: &Case, labels: &[u8], plane: Plane) -> Result<Image> {
    if labels.len() != case.voxels() {
        return Err(Error::input(format!(
            "{} labels for {} voxels",
            labels.len(),
            case.voxels()
        )));
    }
    let flair = &case.modalities[0];
    let (lo, hi) = flair
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { (hi - lo) as f64 } else { 1.0 };
    let s = case.shape;
    let (fixed, row_axis, col_axis, flip) = plane.axes();
    let (rows, cols) = (s[row_axis], s[col_axis]);
    let at = label_centroid(s, labels)[fixed];
    let mut img = Image::new(cols, rows, [0; 3]);
    for r in 0..rows {
        for c in 0..cols {
            let mut p = [0; 3];
            p[fixed] = at;
            p[row_axis] = if flip { rows - 1 - r } else { r };
            p[col_axis] = c;
            let i = voxel_index(s, p);
            let g = (((flair[i] - lo) as f64 / span) * 255.0).round().clamp(0.0, 255.0) as u8;
            let grey = [g; 3];
            img.pixels[r * cols + c] = match label_colour(labels[i]) {
                Some(col) => std::array::from_fn(|k| {
                    ((1.0 - OVERLAY_ALPHA) * grey[k] as f64 + OVERLAY_ALPHA * col[k] as f64).round() as u8
                }),
                None => grey,
            };
        }
    }
    let k = 256usize.div_ceil(rows.max(cols)).max(1);
    Ok(img.upscale(k))
}

/// Writes `<prefix>_{axial,coronal,sagittal}.png`.
pub fn overlay(case: &Case, labels: &[u8], out_prefix: &Path) -> Result<Vec<PathBuf>> {
    Plane::ALL
        .iter()
        .map(|&plane| {
            let img = overlay_slice(case, labels, plane)?;
            let name = format!(
                "{}_{}.png",
                out_prefix.file_name().and_then(|s| s.to_str()).unwrap_or("overlay"),
                plane.name()
            );
            let path = out_prefix.with_file_name(name);
            img.save_png(&path)?;
            Ok(path)
        })
        .collect()
}

const PANEL_W: usize = 320;
const PANEL_H: usize = 220;
const MARGIN: i64 = 24;

/// One panel per block in a 3-column grid, w1/w2/w3 and their sum against epoch.
/// A plotted quantity and its colour.
type Series = (Rgb, fn(&TrajectoryRow) -> f64);

/// One framed plot area: a dotted reference line, the series and the range
/// printed at the left edge.
fn strip(
    img: &mut Image,
    rows: &[&TrajectoryRow],
    (x0, y0, x1, y1): (i64, i64, i64, i64),
    (lo, hi): (f64, f64),
    reference: f64,
    series: &[Series],
) {
    img.frame(x0, y0, x1, y1, [0; 3]);
    img.text(x0 - 22, y0, &format!("{hi:.2}"), 1, [90; 3]);
    img.text(x0 - 22, y1 - 5, &format!("{lo:.2}"), 1, [90; 3]);
    let to_y = |v: f64| y1 as f64 - (v - lo) / (hi - lo) * (y1 - y0) as f64;
    for x in (x0..x1).step_by(4) {
        img.put(x, to_y(reference).round() as i64, [170; 3]);
    }
    let n = rows.len();
    let to_x = |i: usize| {
        if n <= 1 {
            (x0 + x1) as f64 / 2.0
        } else {
            x0 as f64 + 2.0 + i as f64 / (n - 1) as f64 * (x1 - x0 - 4) as f64
        }
    };
    for &(colour, get) in series {
        if n == 1 {
            let (x, y) = (to_x(0), to_y(get(rows[0])));
            img.rect(x as i64 - 1, y as i64 - 1, x as i64 + 1, y as i64 + 1, colour);
        }
        for i in 1..n {
            img.line(
                (to_x(i - 1), to_y(get(rows[i - 1]))),
                (to_x(i), to_y(get(rows[i]))),
                colour,
            );
        }
    }
}

pub fn render_trajectories(log: &TrajectoryLog) -> Result<Image> {
    let blocks = log.blocks();
    if blocks.is_empty() {
        return Err(Error::input("trajectory log is empty"));
    }
    let cols = 3.min(blocks.len());
    let grid_rows = blocks.len().div_ceil(cols);
    let legend_h = 30;
    let mut img = Image::new(cols * PANEL_W, grid_rows * PANEL_H + legend_h, [255; 3]);

    // Weights and their sum live on different scales, so each panel has a
    // weight strip and a sum strip, each ranged over every block.
    let range = |get: fn(&TrajectoryRow) -> f64, reference: f64, min_pad: f64| {
        let (lo, hi) = log
            .rows
            .iter()
            .map(get)
            .fold((reference, reference), |(lo, hi), v| (lo.min(v), hi.max(v)));
        let pad = ((hi - lo) * 0.1).max(min_pad);
        (lo - pad, hi + pad)
    };
    let weight_range = range(|r| r.w1.min(r.w2).min(r.w3), BranchWeights::INIT, 0.02);
    let weight_range = (
        weight_range.0,
        range(|r| r.w1.max(r.w2).max(r.w3), BranchWeights::INIT, 0.02).1,
    );
    let sum_range = range(|r| r.sum, 3.0 * BranchWeights::INIT, 0.02);
    let weights: [Series; 3] = [(W1_COLOUR, |r| r.w1), (W2_COLOUR, |r| r.w2), (W3_COLOUR, |r| r.w3)];
    let sum: [Series; 1] = [(SUM_COLOUR, |r| r.sum)];

    for (k, &block) in blocks.iter().enumerate() {
        let ox = ((k % cols) * PANEL_W) as i64;
        let oy = ((k / cols) * PANEL_H) as i64;
        let (x0, x1) = (ox + MARGIN + 24, ox + PANEL_W as i64 - 10);
        let (top, bottom) = (oy + MARGIN, oy + PANEL_H as i64 - 12);
        let split = top + (bottom - top) * 2 / 3;
        img.text(ox + MARGIN, oy + 6, &format!("BLOCK {block}"), 2, [0; 3]);
        let rows: Vec<_> = log.block(block).collect();
        strip(
            &mut img,
            &rows,
            (x0, top, x1, split - 4),
            weight_range,
            BranchWeights::INIT,
            &weights,
        );
        strip(
            &mut img,
            &rows,
            (x0, split + 4, x1, bottom),
            sum_range,
            3.0 * BranchWeights::INIT,
            &sum,
        );
    }
    let ly = (grid_rows * PANEL_H) as i64 + 8;
    for (k, (colour, label)) in [
        (W1_COLOUR, "W1"),
        (W2_COLOUR, "W2"),
        (W3_COLOUR, "W3"),
        (SUM_COLOUR, "SUM"),
    ]
    .into_iter()
    .enumerate()
    {
        let x = MARGIN + k as i64 * 90;
        img.rect(x, ly + 2, x + 20, ly + 8, colour);
        img.text(x + 26, ly, label, 2, [0; 3]);
    }
    Ok(img)
}

pub fn plot_trajectories(log: &TrajectoryLog, path: &Path) -> Result<()> {
    render_trajectories(log)?.save_png(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom, TumorParams};

    #[test]
    fn background_prediction_is_grey() {
        let c = generate_phantom(2, [32, 32, 32], &TumorParams::default()).unwrap();
        let zeros = vec![0u8; c.voxels()];
        for plane in Plane::ALL {
            let img = overlay_slice(&c, &zeros, plane).unwrap();
            assert!(img.pixels.iter().all(|p| p[0] == p[1] && p[1] == p[2]));
        }
    }

    #[test]
    fn single_voxel_colours_one_block() {
        let c = generate_phantom(2, [32, 32, 32], &TumorParams::default()).unwrap();
        let mut labels = vec![0u8; c.voxels()];
        labels[voxel_index(c.shape, [10, 20, 16])] = 2;
        let img = overlay_slice(&c, &labels, Plane::Axial).unwrap();
        let coloured: Vec<_> = (0..img.height)
            .flat_map(|y| (0..img.width).map(move |x| (x, y)))
            .filter(|&(x, y)| {
                let p = img.get(x, y);
                !(p[0] == p[1] && p[1] == p[2])
            })
            .collect();
        // 32 voxels upscale by 8; the slice passes through the labelled voxel
        assert_eq!(img.width, 256);
        let expected: Vec<_> = (160..168).flat_map(|y| (80..88).map(move |x| (x, y))).collect();
        assert_eq!(coloured, expected);
        let p = img.get(80, 160);
        assert!(p[1] > p[0] && p[1] > p[2]);
    }
}
