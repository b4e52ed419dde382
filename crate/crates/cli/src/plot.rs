//! Raster figure emission: three-column panels (truth | estimate | error)
//! for the image magnitude and the off-resonance map, plus an optional
//! region-of-interest zoom.

use image::{Rgb, RgbImage};
use ndarray::{s, Array2};
use pinr_core::{Error, Result};

const MARGIN: u32 = 10;
const STRIP_H: u32 = 14;
const BG: Rgb<u8> = Rgb([255, 255, 255]);
const INK: Rgb<u8> = Rgb([0, 0, 0]);
const BOX: Rgb<u8> = Rgb([220, 30, 30]);

/// Pixel-index rectangle `x0,y0,x1,y1` with exclusive upper corners;
/// x runs along columns, y along rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Roi {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Roi {
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split(',').collect();
        if parts.len() != 4 {
            return Err(Error::Config(format!(
                "roi must be x0,y0,x1,y1 (got {text:?})"
            )));
        }
        let mut v = [0usize; 4];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("roi component {p:?} is not an index")))?;
        }
        let roi = Roi {
            x0: v[0],
            y0: v[1],
            x1: v[2],
            y1: v[3],
        };
        if roi.x1 <= roi.x0 || roi.y1 <= roi.y0 {
            return Err(Error::Config(format!(
                "roi corners must satisfy x0 < x1 and y0 < y1 (got {text:?})"
            )));
        }
        Ok(roi)
    }

    fn check_bounds(&self, h: usize, w: usize) -> Result<()> {
        if self.x1 > w || self.y1 > h {
            return Err(Error::Config(format!(
                "roi {},{},{},{} exceeds the {w}x{h} grid",
                self.x0, self.y0, self.x1, self.y1
            )));
        }
        Ok(())
    }
}

/// How raw values map onto colors; bounds are shared across a panel row.
#[derive(Clone, Copy)]
enum Palette {
    /// Monotone black-to-white over [lo, hi].
    Gray,
    /// Blue-white-red, white at zero, saturating at +-hi.
    Diverging,
    /// Black-red-yellow-white over [0, hi].
    Heat,
}

fn color(p: Palette, lo: f64, hi: f64, v: f64) -> Rgb<u8> {
    let byte = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    match p {
        Palette::Gray => {
            let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
            Rgb([byte(t), byte(t), byte(t)])
        }
        Palette::Diverging => {
            let t = if hi > 0.0 { (v / hi).clamp(-1.0, 1.0) } else { 0.0 };
            Rgb([
                byte(1.0 + t.min(0.0)),
                byte(1.0 - t.abs()),
                byte(1.0 - t.max(0.0)),
            ])
        }
        Palette::Heat => {
            let t = if hi > 0.0 { (v / hi).clamp(0.0, 1.0) } else { 0.0 };
            Rgb([byte(3.0 * t), byte(3.0 * t - 1.0), byte(3.0 * t - 2.0)])
        }
    }
}

/// 5x7 uppercase bitmap font; each byte is one row, low five bits used.
fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
        'A' => [0x0e, 0x11, 0x11, 0x1f, 0x11, 0x11, 0x11],
        'B' => [0x1e, 0x11, 0x11, 0x1e, 0x11, 0x11, 0x1e],
        'C' => [0x0e, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0e],
        'D' => [0x1e, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1e],
        'E' => [0x1f, 0x10, 0x10, 0x1e, 0x10, 0x10, 0x1f],
        'F' => [0x1f, 0x10, 0x10, 0x1e, 0x10, 0x10, 0x10],
        'G' => [0x0e, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0f],
        'H' => [0x11, 0x11, 0x11, 0x1f, 0x11, 0x11, 0x11],
        'I' => [0x0e, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0e],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0c],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1f],
        'M' => [0x11, 0x1b, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11],
        'O' => [0x0e, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0e],
        'P' => [0x1e, 0x11, 0x11, 0x1e, 0x10, 0x10, 0x10],
        'Q' => [0x0e, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0d],
        'R' => [0x1e, 0x11, 0x11, 0x1e, 0x14, 0x12, 0x11],
        'S' => [0x0f, 0x10, 0x10, 0x0e, 0x01, 0x01, 0x1e],
        'T' => [0x1f, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0e],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0a, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x1b, 0x11],
        'X' => [0x11, 0x0a, 0x04, 0x04, 0x04, 0x0a, 0x11],
        'Y' => [0x11, 0x11, 0x0a, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1f, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1f],
        '0' => [0x0e, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0e],
        '1' => [0x04, 0x0c, 0x04, 0x04, 0x04, 0x04, 0x0e],
        '2' => [0x0e, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1f],
        '3' => [0x1e, 0x01, 0x01, 0x0e, 0x01, 0x01, 0x1e],
        '4' => [0x02, 0x06, 0x0a, 0x12, 0x1f, 0x02, 0x02],
        '5' => [0x1f, 0x10, 0x1e, 0x01, 0x01, 0x11, 0x0e],
        '6' => [0x06, 0x08, 0x10, 0x1e, 0x11, 0x11, 0x0e],
        '7' => [0x1f, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0e, 0x11, 0x11, 0x0e, 0x11, 0x11, 0x0e],
        '9' => [0x0e, 0x11, 0x11, 0x0f, 0x01, 0x02, 0x0c],
        '-' => [0x00, 0x00, 0x00, 0x1f, 0x00, 0x00, 0x00],
        '+' => [0x00, 0x04, 0x04, 0x1f, 0x04, 0x04, 0x00],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0c, 0x0c],
        ',' => [0x00, 0x00, 0x00, 0x00, 0x0c, 0x04, 0x08],
        ':' => [0x00, 0x0c, 0x0c, 0x00, 0x0c, 0x0c, 0x00],
        '[' => [0x0e, 0x08, 0x08, 0x08, 0x08, 0x08, 0x0e],
        ']' => [0x0e, 0x02, 0x02, 0x02, 0x02, 0x02, 0x0e],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '/' => [0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10],
        '%' => [0x19, 0x1a, 0x02, 0x04, 0x08, 0x0b, 0x13],
        _ => [0x00; 7],
    }
}

fn draw_text(img: &mut RgbImage, x: u32, y: u32, text: &str, ink: Rgb<u8>) {
    let mut cx = x;
    for c in text.chars() {
        let rows = glyph(c);
        for (dy, row) in rows.iter().enumerate() {
            for dx in 0..5u32 {
                if row & (0x10 >> dx) != 0 {
                    let (px, py) = (cx + dx, y + dy as u32);
                    if px < img.width() && py < img.height() {
                        img.put_pixel(px, py, ink);
                    }
                }
            }
        }
        cx += 6;
    }
}

fn text_width(text: &str) -> u32 {
    6 * text.chars().count() as u32
}

/// One map with everything needed to render it.
struct Tile<'a> {
    label: &'a str,
    data: &'a Array2<f64>,
    palette: Palette,
    lo: f64,
    hi: f64,
    annotation: String,
}

fn blit_tile(img: &mut RgbImage, x: u32, y: u32, tile: &Tile, scale: u32, roi: Option<Roi>) {
    let (h, w) = tile.data.dim();
    for i in 0..h {
        for j in 0..w {
            let c = color(tile.palette, tile.lo, tile.hi, tile.data[[i, j]]);
            for dy in 0..scale {
                for dx in 0..scale {
                    img.put_pixel(x + j as u32 * scale + dx, y + i as u32 * scale + dy, c);
                }
            }
        }
    }
    if let Some(r) = roi {
        let (bx0, by0) = (x + r.x0 as u32 * scale, y + r.y0 as u32 * scale);
        let (bx1, by1) = (x + r.x1 as u32 * scale - 1, y + r.y1 as u32 * scale - 1);
        for px in bx0..=bx1 {
            for t in 0..2 {
                img.put_pixel(px, by0 + t, BOX);
                img.put_pixel(px, by1 - t, BOX);
            }
        }
        for py in by0..=by1 {
            for t in 0..2 {
                img.put_pixel(bx0 + t, py, BOX);
                img.put_pixel(bx1 - t, py, BOX);
            }
        }
    }
}

/// Lays out a single row of tiles with labels above and annotations below.
fn render_row(tiles: &[Tile], scale: u32, roi: Option<Roi>) -> RgbImage {
    let (h, w) = tiles[0].data.dim();
    let (tile_h, tile_w) = (h as u32 * scale, w as u32 * scale);
    let width = MARGIN + tiles.len() as u32 * (tile_w + MARGIN);
    let height = STRIP_H + tile_h + STRIP_H + MARGIN;
    let mut img = RgbImage::from_pixel(width, height, BG);
    for (k, tile) in tiles.iter().enumerate() {
        let x = MARGIN + k as u32 * (tile_w + MARGIN);
        let centered = |s: &str| x + (tile_w.saturating_sub(text_width(s))) / 2;
        draw_text(&mut img, centered(tile.label), 3, tile.label, INK);
        blit_tile(&mut img, x, STRIP_H, tile, scale, roi);
        let ann = tile.annotation.as_str();
        draw_text(&mut img, centered(ann), STRIP_H + tile_h + 4, ann, INK);
    }
    img
}

fn stack(rows: Vec<RgbImage>) -> RgbImage {
    let width = rows.iter().map(|r| r.width()).max().unwrap();
    let height: u32 = rows.iter().map(|r| r.height()).sum();
    let mut img = RgbImage::from_pixel(width, height, BG);
    let mut y = 0;
    for row in rows {
        for (px, py, &c) in row.enumerate_pixels() {
            img.put_pixel(px, py + y, c);
        }
        y += row.height();
    }
    img
}

fn max_abs(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
}

fn fmt_val(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.3}")
    }
}

/// All source maps for one figure set, already reduced to real values.
pub struct PanelData {
    pub truth_mag: Array2<f64>,
    pub recon_mag: Array2<f64>,
    pub truth_b0: Array2<f64>,
    pub est_b0: Option<Array2<f64>>,
    /// Error-map color scale as a fraction of the truth maximum.
    pub error_scale: f64,
}

impl PanelData {
    fn image_tiles<'a>(&'a self, err: &'a Array2<f64>) -> [Tile<'a>; 3] {
        let hi = max_abs(&self.truth_mag).max(max_abs(&self.recon_mag));
        let err_hi = self.error_scale * max_abs(&self.truth_mag);
        [
            Tile {
                label: "TRUTH",
                data: &self.truth_mag,
                palette: Palette::Gray,
                lo: 0.0,
                hi,
                annotation: format!("[0, {}]", fmt_val(hi)),
            },
            Tile {
                label: "RECON",
                data: &self.recon_mag,
                palette: Palette::Gray,
                lo: 0.0,
                hi,
                annotation: format!("[0, {}]", fmt_val(hi)),
            },
            Tile {
                label: "ERROR",
                data: err,
                palette: Palette::Heat,
                lo: 0.0,
                hi: err_hi,
                annotation: format!("[0, {}]", fmt_val(err_hi)),
            },
        ]
    }

    fn b0_tiles<'a>(&'a self, est: &'a Array2<f64>, err: &'a Array2<f64>) -> [Tile<'a>; 3] {
        let hi = max_abs(&self.truth_b0).max(max_abs(est));
        let err_hi = self.error_scale * max_abs(&self.truth_b0);
        let span = format!("[{}, {}] HZ", fmt_val(-hi), fmt_val(hi));
        [
            Tile {
                label: "TRUTH",
                data: &self.truth_b0,
                palette: Palette::Diverging,
                lo: -hi,
                hi,
                annotation: span.clone(),
            },
            Tile {
                label: "ESTIMATE",
                data: est,
                palette: Palette::Diverging,
                lo: -hi,
                hi,
                annotation: span,
            },
            Tile {
                label: "ERROR",
                data: err,
                palette: Palette::Heat,
                lo: 0.0,
                hi: err_hi,
                annotation: format!("[0, {}] HZ", fmt_val(err_hi)),
            },
        ]
    }
}

fn crop(a: &Array2<f64>, r: Roi) -> Array2<f64> {
    a.slice(s![r.y0..r.y1, r.x0..r.x1]).to_owned()
}

/// Scale factor that renders a map of the given width near 256 px wide.
fn auto_scale(w: usize) -> u32 {
    ((256 + w - 1) / w).max(1) as u32
}

/// Files written by [`render_figures`], in emission order.
#[derive(Debug)]
pub struct FigureSet {
    pub image_panel: RgbImage,
    pub b0_panel: Option<RgbImage>,
    pub roi_panel: Option<RgbImage>,
}

/// Renders the figure set; the ROI, when given, is outlined on the main
/// panels and expanded into its own zoom panel with the same color scales.
pub fn render_figures(data: &PanelData, roi: Option<Roi>) -> Result<FigureSet> {
    let (h, w) = data.truth_mag.dim();
    if let Some(r) = roi {
        r.check_bounds(h, w)?;
    }
    let scale = auto_scale(w);
    let img_err = (&data.recon_mag - &data.truth_mag).mapv(f64::abs);
    let image_panel = render_row(&data.image_tiles(&img_err), scale, roi);
    let mut b0_err = None;
    let b0_panel = data.est_b0.as_ref().map(|est| {
        let err = (est - &data.truth_b0).mapv(f64::abs);
        let row = render_row(&data.b0_tiles(est, &err), scale, roi);
        b0_err = Some(err);
        row
    });
    let roi_panel = roi.map(|r| {
        let zoom = auto_scale(r.x1 - r.x0);
        let ci = [
            crop(&data.truth_mag, r),
            crop(&data.recon_mag, r),
            crop(&img_err, r),
        ];
        // color bounds come from the full maps so the zoom shares scales
        let mut tiles = data.image_tiles(&img_err);
        let mut rows = Vec::new();
        for (t, c) in tiles.iter_mut().zip(&ci) {
            t.data = c;
        }
        rows.push(render_row(&tiles, zoom, None));
        if let (Some(est), Some(err)) = (data.est_b0.as_ref(), b0_err.as_ref()) {
            let cb = [crop(&data.truth_b0, r), crop(est, r), crop(err, r)];
            let mut tiles = data.b0_tiles(est, err);
            for (t, c) in tiles.iter_mut().zip(&cb) {
                t.data = c;
            }
            rows.push(render_row(&tiles, zoom, None));
        }
        stack(rows)
    });
    Ok(FigureSet {
        image_panel,
        b0_panel,
        roi_panel,
    })
}
