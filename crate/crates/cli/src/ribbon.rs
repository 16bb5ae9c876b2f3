//! Colour-coded ribbon plots: one horizontal band per label row, split into
//! spans proportional to segment extents.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use sftmn_core::metrics::{labels_to_segments, SegmentList};
use sftmn_core::{Error, LabelSequence, Result};

pub type Rgb = [u8; 3];

const BASE_PALETTE: [Rgb; 7] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
];

const GOLDEN_ANGLE: f64 = 137.507_764_050_037_85;

fn hsv(h: f64, s: f64, v: f64) -> Rgb {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|u| ((u + m) * 255.0).round() as u8)
}

/// Colours for `classes` classes: a fixed seven-colour table, then hues spaced
/// by the golden angle.
pub fn default_palette(classes: usize) -> Vec<Rgb> {
    (0..classes)
        .map(|c| match BASE_PALETTE.get(c) {
            Some(&rgb) => rgb,
            None => hsv((c - BASE_PALETTE.len()) as f64 * GOLDEN_ANGLE + 15.0, 0.6, 0.85),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RibbonFormat {
    Svg,
    Ppm,
    Csv,
}

impl RibbonFormat {
    pub fn extension(self) -> &'static str {
        match self {
            RibbonFormat::Svg => "svg",
            RibbonFormat::Ppm => "ppm",
            RibbonFormat::Csv => "csv",
        }
    }
}

impl fmt::Display for RibbonFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.extension())
    }
}

impl FromStr for RibbonFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "svg" => Ok(RibbonFormat::Svg),
            "ppm" => Ok(RibbonFormat::Ppm),
            "csv" => Ok(RibbonFormat::Csv),
            _ => Err(Error::Config(format!("unknown ribbon format `{s}` (svg, ppm or csv)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RibbonSpec {
    pub rows: Vec<(String, LabelSequence)>,
    pub palette: Vec<Rgb>,
    pub format: RibbonFormat,
    /// Band width in pixels (SVG user units).
    pub width: usize,
    pub band_height: usize,
}

impl RibbonSpec {
    pub fn new(rows: Vec<(String, LabelSequence)>, format: RibbonFormat) -> Self {
        let classes = rows.first().map_or(0, |(_, l)| l.mapping().len());
        RibbonSpec {
            rows,
            palette: default_palette(classes),
            format,
            width: 800,
            band_height: 24,
        }
    }

    fn validate(&self) -> Result<usize> {
        let Some((_, first)) = self.rows.first() else {
            return Err(Error::Validation("ribbon has no rows".into()));
        };
        let frames = first.len();
        if frames == 0 {
            return Err(Error::Validation("ribbon rows are empty".into()));
        }
        for (name, row) in &self.rows {
            if row.len() != frames {
                return Err(Error::Shape(format!(
                    "ribbon row `{name}` has {} frames, expected {frames}",
                    row.len()
                )));
            }
            if let Some(&c) = row.labels().iter().find(|&&c| c >= self.palette.len()) {
                return Err(Error::Validation(format!("palette has no colour for class {c}")));
            }
        }
        if self.width == 0 || self.band_height == 0 {
            return Err(Error::Validation("ribbon width and band height must be positive".into()));
        }
        Ok(frames)
    }

    fn segments(&self) -> Result<Vec<SegmentList>> {
        self.rows.iter().map(|(_, l)| labels_to_segments(l.labels())).collect()
    }
}

const LABEL_GUTTER: usize = 120;
const GAP: usize = 8;

fn hex(c: Rgb) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn svg(spec: &RibbonSpec, frames: usize) -> Result<String> {
    let scale = spec.width as f64 / frames as f64;
    let height = spec.rows.len() * (spec.band_height + GAP) + GAP;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{height}" viewBox="0 0 {w} {height}">"#,
        w = LABEL_GUTTER + spec.width + GAP
    );
    for (r, ((name, labels), segs)) in spec.rows.iter().zip(spec.segments()?).enumerate() {
        let y = GAP + r * (spec.band_height + GAP);
        let _ = writeln!(
            out,
            r#"  <text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="end" dominant-baseline="middle">{}</text>"#,
            LABEL_GUTTER - GAP,
            y + spec.band_height / 2,
            escape(name)
        );
        for s in segs.segments() {
            let class = labels.mapping().name(s.class).unwrap_or("?");
            let _ = writeln!(
                out,
                r#"  <rect x="{:.3}" y="{y}" width="{:.3}" height="{}" fill="{}"><title>{} [{}, {})</title></rect>"#,
                LABEL_GUTTER as f64 + s.start as f64 * scale,
                s.len() as f64 * scale,
                spec.band_height,
                hex(spec.palette[s.class]),
                escape(class),
                s.start,
                s.end
            );
        }
    }
    out.push_str("</svg>\n");
    Ok(out)
}

fn ppm(spec: &RibbonSpec, frames: usize) -> Vec<u8> {
    let (w, bh) = (spec.width, spec.band_height);
    let h = spec.rows.len() * (bh + GAP) + GAP;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let white = [255u8; 3];
    for y in 0..h {
        let band = (y >= GAP && (y - GAP) % (bh + GAP) < bh).then(|| (y - GAP) / (bh + GAP));
        for x in 0..w {
            let px = match band {
                // pixel column x shows the frame under its left edge
                Some(b) if b < spec.rows.len() => spec.palette[spec.rows[b].1.labels()[x * frames / w]],
                _ => white,
            };
            out.extend_from_slice(&px);
        }
    }
    out
}

fn csv(spec: &RibbonSpec) -> Result<String> {
    let mut out = String::from("row,class,name,start,end\n");
    for ((name, labels), segs) in spec.rows.iter().zip(spec.segments()?) {
        for s in segs.segments() {
            let _ = writeln!(
                out,
                "{name},{},{},{},{}",
                s.class,
                labels.mapping().name(s.class).unwrap_or(""),
                s.start,
                s.end
            );
        }
    }
    Ok(out)
}

/// Renders to bytes. Output depends only on the `RibbonSpec`.
pub fn render_bytes(spec: &RibbonSpec) -> Result<Vec<u8>> {
    let frames = spec.validate()?;
    Ok(match spec.format {
        RibbonFormat::Svg => svg(spec, frames)?.into_bytes(),
        RibbonFormat::Ppm => ppm(spec, frames),
        RibbonFormat::Csv => csv(spec)?.into_bytes(),
    })
}

pub fn render_ribbon(spec: &RibbonSpec, path: &Path) -> Result<()> {
    fs::write(path, render_bytes(spec)?)?;
    Ok(())
}
