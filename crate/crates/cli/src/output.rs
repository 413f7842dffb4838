//! CSV and PPM writers.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Comma-separated table with a header row and LF line endings.
#[derive(Debug, Clone, Default)]
pub struct Csv {
    text: String,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        let mut c = Self::default();
        c.text.push_str(&header.join(","));
        c.text.push('\n');
        c
    }

    pub fn row(&mut self, cells: &[String]) {
        self.text.push_str(&cells.join(","));
        self.text.push('\n');
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, &self.text)
    }
}

/// Renders laid out left to right as one binary P6 image. Each render is a
/// `side x side` grey tile min-max normalized on its own.
pub fn ppm_grid(tiles: &[Vec<f64>], side: usize) -> Vec<u8> {
    let width = side * tiles.len();
    let mut header = String::new();
    let _ = write!(header, "P6\n{width} {side}\n255\n");
    let mut bytes = header.into_bytes();
    let scaled: Vec<Vec<u8>> = tiles
        .iter()
        .map(|tile| {
            let lo = tile.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = tile.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            tile.iter()
                .map(|v| {
                    if hi > lo {
                        (255.0 * (v - lo) / (hi - lo)).round() as u8
                    } else {
                        0
                    }
                })
                .collect()
        })
        .collect();
    for row in 0..side {
        for tile in &scaled {
            for col in 0..side {
                let g = tile[row * side + col];
                bytes.extend_from_slice(&[g, g, g]);
            }
        }
    }
    bytes
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)
}
