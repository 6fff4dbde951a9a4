//! Images, CSV tables and the output-directory lock.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::latent_to_pixel;
use crate::eval::MetricReport;
use crate::numerics::Tensor;
use crate::{Error, Result};

/// Binary greyscale PGM (`P5`, max value 255).
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::Mismatch {
            what: "pgm pixels",
            expected: format!("{}", width * height),
            got: format!("{}", pixels.len()),
        });
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Parse a binary PGM written by [`encode_pgm`]: `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = || Error::Metric("malformed pgm".into());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_owned());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let data = bytes.get(pos + 1..).ok_or_else(bad)?;
    if data.len() != w * h {
        return Err(bad());
    }
    Ok((w, h, data.to_vec()))
}

fn to_byte(z: f32) -> u8 {
    (latent_to_pixel(f64::from(z)) * 255.0).round() as u8
}

/// Tile latents `[N, H, W, C]` (channel 0) into a grid with one-pixel
/// separators: `(width, height, pixels)`.
pub fn latent_grid(latents: &Tensor<f32>, columns: usize) -> Result<(usize, usize, Vec<u8>)> {
    let s = latents.shape();
    if s.len() != 4 || s[0] == 0 || columns == 0 {
        return Err(Error::Mismatch {
            what: "image grid",
            expected: "[N > 0, H, W, C] and columns > 0".into(),
            got: format!("{s:?}"),
        });
    }
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let cols = columns.min(n);
    let rows = n.div_ceil(cols);
    let (gw, gh) = (cols * (w + 1) + 1, rows * (h + 1) + 1);
    let mut px = vec![0u8; gw * gh];
    for i in 0..n {
        let (r0, c0) = (1 + (i / cols) * (h + 1), 1 + (i % cols) * (w + 1));
        for y in 0..h {
            for x in 0..w {
                px[(r0 + y) * gw + c0 + x] = to_byte(latents.data()[((i * h + y) * w + x) * c]);
            }
        }
    }
    Ok((gw, gh, px))
}

pub fn write_grid(path: &Path, latents: &Tensor<f32>, columns: usize) -> Result<()> {
    let (w, h, px) = latent_grid(latents, columns)?;
    std::fs::write(path, encode_pgm(w, h, &px)?).map_err(|e| Error::io(path, e))
}

/// Raw latents as little-endian `f32` after a `[rank, dims...]` `u32` prefix.
pub fn write_raw_latents(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let mut out = Vec::with_capacity(4 * (1 + t.rank() + t.numel()));
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Header row from the first record's field names, one row per record.
pub fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct ReportRow<'a> {
    report: &'a str,
    group: &'a str,
    metric: &'a str,
    value: f64,
    samples: usize,
    seed: u64,
    checkpoint: &'a str,
    config: &'a str,
}

pub fn write_report(path: &Path, report: &MetricReport) -> Result<()> {
    let rows: Vec<ReportRow> = report
        .rows
        .iter()
        .map(|r| ReportRow {
            report: &report.name,
            group: &r.group,
            metric: &r.metric,
            value: r.value,
            samples: r.samples,
            seed: report.seed,
            checkpoint: &report.checkpoint,
            config: &report.config,
        })
        .collect();
    write_csv(path, &rows)
}

/// Appends rows to a CSV, writing the header only when the file is new.
pub struct CsvLog {
    path: PathBuf,
    writer: csv::Writer<std::fs::File>,
}

impl CsvLog {
    pub fn open(path: &Path) -> Result<Self> {
        let exists = path.metadata().map(|m| m.len() > 0).unwrap_or(false);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let writer = csv::WriterBuilder::new().has_headers(!exists).from_writer(file);
        Ok(Self {
            path: path.to_owned(),
            writer,
        })
    }

    pub fn append<S: Serialize>(&mut self, row: &S) -> Result<()> {
        self.writer.serialize(row).map_err(|e| csv_err(&self.path, e))?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Exclusive ownership of an output directory for the life of the value.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

pub const LOCK_FILE: &str = "dod.lock";

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::Config(format!(
                    "{} is locked by another run (remove {} if that run is gone)",
                    dir.display(),
                    path.display()
                ))
            } else {
                Error::io(&path, e)
            }
        })?;
        writeln!(f, "{}", std::process::id()).map_err(|e| Error::io(&path, e))?;
        Ok(Self { path })
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
