//! File formats: PGM label maps, PPM heat maps, the binary score-grid file,
//! and CSV matrices and traces.
//!
//! Score-grid layout (little-endian throughout):
//!
//! ```text
//! "ARSG" | version u8 = 1 | channels u32 | height u32 | width u32 | f64 × (C·H·W)
//! ```
//!
//! The float payload is channel-major, then row-major.

use crate::affinity::AffinityMatrix;
use crate::error::{Error, Result};
use crate::grid::{LabelMap, ScoreMap};
use crate::scalar::Scalar;
use crate::toy::{Phase, TrainRecord};
use std::fs;
use std::io::Write;
use std::path::Path;

/// Gray value reserved for ignored pixels in label images.
pub const PGM_IGNORE_ID: u32 = 255;

pub const SCORE_GRID_MAGIC: &[u8; 4] = b"ARSG";
pub const SCORE_GRID_VERSION: u8 = 1;
const SCORE_GRID_HEADER: usize = 4 + 1 + 3 * 4;

/// Fill colour of masked heat-map cells.
pub const MASKED_RGB: [u8; 3] = [128, 128, 128];

fn format_err(kind: &'static str, msg: impl Into<String>) -> Error {
    Error::Format { kind, msg: msg.into() }
}

// --- PGM ---------------------------------------------------------------------

struct HeaderReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn skip_space(&mut self) {
        while self.pos < self.buf.len() {
            match self.buf[self.pos] {
                b'#' => {
                    while self.pos < self.buf.len() && self.buf[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn token(&mut self) -> Option<&'a [u8]> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.buf.len() && !self.buf[self.pos].is_ascii_whitespace() && self.buf[self.pos] != b'#' {
            self.pos += 1;
        }
        (self.pos > start).then(|| &self.buf[start..self.pos])
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let tok = self.token().ok_or_else(|| format_err("PGM", format!("missing {what}")))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err("PGM", format!("bad {what}: {:?}", String::from_utf8_lossy(tok))))
    }
}

/// Parses a plain (P2) or binary (P5) graymap with maxval ≤ 255. Gray values
/// become class ids; no ignore id is attached.
pub fn parse_pgm(bytes: &[u8]) -> Result<LabelMap> {
    let mut r = HeaderReader { buf: bytes, pos: 0 };
    let magic = r.token().ok_or_else(|| format_err("PGM", "empty file"))?;
    let binary = match magic {
        b"P2" => false,
        b"P5" => true,
        other => return Err(format_err("PGM", format!("unsupported magic {:?}", String::from_utf8_lossy(other)))),
    };
    let width = r.number("width")?;
    let height = r.number("height")?;
    let maxval = r.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(format_err("PGM", "zero-sized image"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(format_err("PGM", format!("maxval {maxval} not in 1..=255")));
    }
    let n = width * height;
    let data: Vec<u32> = if binary {
        // Exactly one whitespace byte separates the header from the raster.
        let start = r.pos + 1;
        let raster = bytes.get(start..start + n).ok_or_else(|| format_err("PGM", "truncated raster"))?;
        raster.iter().map(|&b| u32::from(b)).collect()
    } else {
        (0..n).map(|_| r.number("pixel").map(|v| v as u32)).collect::<Result<_>>()?
    };
    if let Some(v) = data.iter().find(|&&v| v as usize > maxval) {
        return Err(format_err("PGM", format!("pixel value {v} exceeds maxval {maxval}")));
    }
    LabelMap::new(height, width, data)
}

pub fn read_pgm(path: &Path) -> Result<LabelMap> {
    parse_pgm(&fs::read(path)?)
}

/// Binary (P5) encoding of a label map; ids above 255 are rejected.
pub fn encode_pgm(l: &LabelMap) -> Result<Vec<u8>> {
    let mut out = format!("P5\n{} {}\n255\n", l.width(), l.height()).into_bytes();
    for &id in l.data() {
        out.push(u8::try_from(id).map_err(|_| format_err("PGM", format!("class id {id} exceeds 255")))?);
    }
    Ok(out)
}

pub fn write_pgm(path: &Path, l: &LabelMap) -> Result<()> {
    fs::write(path, encode_pgm(l)?)?;
    Ok(())
}

// --- Heat maps ---------------------------------------------------------------

/// Two-point blue→red colour map: `v` is clamped to `[0, 1]`, red is
/// `round_half_up(255·v)` and blue takes the remainder of 255.
pub fn colormap(v: f64) -> [u8; 3] {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    let red = (255.0 * v + 0.5).floor() as u8;
    [red, 0, 255 - red]
}

/// RGB raster of an affinity matrix, one pixel per entry.
pub fn heatmap_pixels<T: Scalar>(a: &AffinityMatrix<T>) -> Vec<u8> {
    a.data()
        .iter()
        .zip(a.valid_mask())
        .flat_map(|(&v, &ok)| if ok { colormap(v.as_f64()) } else { MASKED_RGB })
        .collect()
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    debug_assert_eq!(rgb.len(), width * height * 3);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Binary PPM heat map of `a`, L×L pixels.
pub fn encode_heatmap<T: Scalar>(a: &AffinityMatrix<T>) -> Vec<u8> {
    encode_ppm(a.len(), a.len(), &heatmap_pixels(a))
}

pub fn render_heatmap<T: Scalar>(a: &AffinityMatrix<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_heatmap(a))?;
    Ok(())
}

/// Decodes a binary PPM into `(width, height, rgb)`.
pub fn parse_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut r = HeaderReader { buf: bytes, pos: 0 };
    if r.token() != Some(b"P6".as_slice()) {
        return Err(format_err("PPM", "expected P6 magic"));
    }
    let width = r.number("width")?;
    let height = r.number("height")?;
    let maxval = r.number("maxval")?;
    if maxval != 255 {
        return Err(format_err("PPM", format!("maxval {maxval} unsupported")));
    }
    let start = r.pos + 1;
    let rgb = bytes
        .get(start..start + width * height * 3)
        .ok_or_else(|| format_err("PPM", "truncated raster"))?;
    Ok((width, height, rgb.to_vec()))
}

// --- Score grid --------------------------------------------------------------

pub fn encode_score_grid(s: &ScoreMap<f64>) -> Result<Vec<u8>> {
    let (c, h, w) = s.shape();
    let dim = |v: usize| u32::try_from(v).map_err(|_| format_err("score grid", format!("dimension {v} exceeds u32")));
    let mut out = Vec::with_capacity(SCORE_GRID_HEADER + 8 * s.data().len());
    out.extend_from_slice(SCORE_GRID_MAGIC);
    out.push(SCORE_GRID_VERSION);
    for v in [c, h, w] {
        out.extend_from_slice(&dim(v)?.to_le_bytes());
    }
    for v in s.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_score_grid(bytes: &[u8]) -> Result<ScoreMap<f64>> {
    if bytes.len() < SCORE_GRID_HEADER {
        return Err(format_err("score grid", format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != SCORE_GRID_MAGIC {
        return Err(format_err("score grid", "bad magic"));
    }
    if bytes[4] != SCORE_GRID_VERSION {
        return Err(format_err("score grid", format!("unsupported version {}", bytes[4])));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let count = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| format_err("score grid", "dimensions overflow"))?;
    let payload = &bytes[SCORE_GRID_HEADER..];
    if count.checked_mul(8) != Some(payload.len()) {
        return Err(format_err(
            "score grid",
            format!("{c}x{h}x{w} needs {} payload bytes, found {}", count.saturating_mul(8), payload.len()),
        ));
    }
    let data = payload.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
    ScoreMap::new(c, h, w, data)
}

pub fn read_score_grid(path: &Path) -> Result<ScoreMap<f64>> {
    decode_score_grid(&fs::read(path)?)
}

pub fn write_score_grid(path: &Path, s: &ScoreMap<f64>) -> Result<()> {
    fs::write(path, encode_score_grid(s)?)?;
    Ok(())
}

// --- CSV ---------------------------------------------------------------------

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// `key=value` lines for a loss evaluation, as printed by the `loss` command.
pub fn format_loss_report(ce: f64, ar: f64, total: f64, valid_pixels: usize, valid_pairs: usize) -> String {
    format!(
        "ce={}\nar={}\ntotal={}\nvalid_pixels={valid_pixels}\nvalid_pairs={valid_pairs}\n",
        fmt_f64(ce),
        fmt_f64(ar),
        fmt_f64(total)
    )
}

/// Writes an L×L matrix: a header `c0,…,c{L-1}` then one row per line.
/// Masked entries are written as `nan`.
pub fn write_matrix_csv<T: Scalar, W: Write>(a: &AffinityMatrix<T>, mut out: W) -> Result<()> {
    let n = a.len();
    let header: Vec<String> = (0..n).map(|j| format!("c{j}")).collect();
    writeln!(out, "{}", header.join(","))?;
    for i in 0..n {
        let row: Vec<String> = (0..n)
            .map(|j| if a.is_valid(i, j) { fmt_f64(a.get(i, j).as_f64()) } else { "nan".to_string() })
            .collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn matrix_csv_string<T: Scalar>(a: &AffinityMatrix<T>) -> String {
    let mut buf = Vec::new();
    write_matrix_csv(a, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("ascii")
}

/// Inverse of [`write_matrix_csv`]; `nan` cells come back masked.
pub fn parse_matrix_csv(text: &str) -> Result<AffinityMatrix<f64>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| format_err("CSV", "empty file"))?;
    let n = header.split(',').count();
    let mut data = Vec::with_capacity(n * n);
    let mut valid = Vec::with_capacity(n * n);
    let mut rows = 0;
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != n {
            return Err(format_err("CSV", format!("row {} has {} cells, expected {n}", lineno + 1, cells.len())));
        }
        for cell in cells {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| format_err("CSV", format!("bad number {cell:?} on row {}", lineno + 1)))?;
            valid.push(!v.is_nan());
            data.push(if v.is_nan() { 0.0 } else { v });
        }
        rows += 1;
    }
    if rows != n {
        return Err(format_err("CSV", format!("{rows} rows for {n} columns; matrix must be square")));
    }
    AffinityMatrix::new(n, data, valid)
}

pub const TRACE_HEADER: &str = "step,phase,ce_loss,ar_loss,total_loss,pixel_accuracy,miou";

pub fn write_trace_csv<W: Write>(records: &[TrainRecord], mut out: W) -> Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for r in records {
        let phase = match r.phase {
            Phase::Warmup => "warmup",
            Phase::Main => "main",
        };
        writeln!(
            out,
            "{},{phase},{},{},{},{},{}",
            r.step,
            fmt_f64(r.ce_loss),
            fmt_f64(r.ar_loss),
            fmt_f64(r.total_loss),
            fmt_f64(r.pixel_accuracy),
            fmt_f64(r.miou)
        )?;
    }
    Ok(())
}

/// Extracts one numeric column from a CSV with a header row. A file with a
/// single unnamed column of numbers is also accepted.
pub fn parse_csv_column(text: &str, column: &str) -> Result<Vec<f64>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let first = lines.next().ok_or_else(|| format_err("CSV", "empty file"))?;
    if first.trim().parse::<f64>().is_ok() {
        return std::iter::once(first)
            .chain(lines)
            .map(|l| l.trim().parse().map_err(|_| format_err("CSV", format!("bad number {l:?}"))))
            .collect();
    }
    let idx = first
        .split(',')
        .position(|h| h.trim() == column)
        .ok_or_else(|| format_err("CSV", format!("no column named {column:?}")))?;
    lines
        .map(|l| {
            let cell = l.split(',').nth(idx).ok_or_else(|| format_err("CSV", format!("short row {l:?}")))?;
            cell.trim().parse().map_err(|_| format_err("CSV", format!("bad number {cell:?}")))
        })
        .collect()
}
