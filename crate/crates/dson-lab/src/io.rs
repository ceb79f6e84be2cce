//! File formats: the binary dataset container, train-report CSV, metric
//! key=value blocks, feature dumps, and JSON checkpoints.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use dson_core::model::DomainBranchNet;
use dson_core::optim::TrainReport;
use dson_core::synth::{DomainDataset, Split};
use dson_core::Tensor4;

pub const DATASET_MAGIC: &[u8; 4] = b"DSND";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IoError {
    /// The file does not start with the `DSND` magic bytes.
    BadMagic { found: [u8; 4] },
    /// The file uses an unsupported container version.
    VersionMismatch { found: u32 },
    /// The file ends before the declared payload does.
    Truncated { context: &'static str },
    /// Anything the operating system or serde reports.
    Other(String),
}

impl fmt::Display for IoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IoError::BadMagic { found } => write!(
                f,
                "not a dataset file: expected magic {:?}, found {:?}",
                DATASET_MAGIC, found
            ),
            IoError::VersionMismatch { found } => write!(
                f,
                "unsupported dataset version {} (expected {})",
                found, DATASET_VERSION
            ),
            IoError::Truncated { context } => {
                write!(f, "dataset file is truncated while reading {}", context)
            }
            IoError::Other(m) => write!(f, "{}", m),
        }
    }
}

impl std::error::Error for IoError {}

impl From<std::io::Error> for IoError {
    fn from(e: std::io::Error) -> Self {
        IoError::Other(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, IoError>;

// ---------------------------------------------------------------------------
// Binary dataset container
// ---------------------------------------------------------------------------

/// Little-endian layout: magic `DSND`, u32 version, then u32 N, C, H, W, K,
/// domain id, split flag (0 train / 1 test), then N*C*H*W f32 pixels, then
/// N u16 labels.
pub fn save_dataset(ds: &DomainDataset, path: &Path) -> Result<()> {
    let (n, c, h, w) = ds.images.dims();
    let k = ds.labels.iter().map(|&y| y + 1).max().unwrap_or(0);
    let mut buf: Vec<u8> = Vec::with_capacity(32 + n * c * h * w * 4 + n * 2);
    buf.extend_from_slice(DATASET_MAGIC);
    for v in [
        DATASET_VERSION,
        n as u32,
        c as u32,
        h as u32,
        w as u32,
        k as u32,
        ds.domain_id as u32,
        match ds.split {
            Split::Train => 0,
            Split::Test => 1,
        },
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &px in &ds.images.data {
        buf.extend_from_slice(&(px as f32).to_le_bytes());
    }
    for &y in &ds.labels {
        buf.extend_from_slice(&(y as u16).to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &'static str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(IoError::Truncated { context });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, context: &'static str) -> Result<u32> {
        let b = self.take(4, context)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load_dataset(path: &Path) -> Result<DomainDataset> {
    let mut raw = Vec::new();
    fs::File::open(path)?.read_to_end(&mut raw)?;
    let mut r = Reader { buf: &raw, pos: 0 };

    let magic = r.take(4, "magic")?;
    if magic != DATASET_MAGIC {
        return Err(IoError::BadMagic {
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(IoError::VersionMismatch { found: version });
    }
    let n = r.u32("instance count")? as usize;
    let c = r.u32("channel count")? as usize;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let _k = r.u32("class count")? as usize;
    let domain_id = r.u32("domain id")? as usize;
    let split = match r.u32("split flag")? {
        0 => Split::Train,
        1 => Split::Test,
        other => {
            return Err(IoError::Other(format!("unknown split flag {}", other)));
        }
    };

    let mut images = Tensor4::zeros(n, c, h, w);
    let pixels = r.take(n * c * h * w * 4, "pixel data")?;
    for (dst, chunk) in images.data.iter_mut().zip(pixels.chunks_exact(4)) {
        *dst = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
    }
    let labels_raw = r.take(n * 2, "labels")?;
    let labels = labels_raw
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]) as usize)
        .collect();

    Ok(DomainDataset {
        images,
        labels,
        domain_id,
        split,
    })
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// The iteration log as comma-separated text with a
/// `iter,eta,loss_total,loss_d0..,w_d0..` header.
pub fn report_csv(report: &TrainReport, domains: usize) -> String {
    let mut out = String::from("iter,eta,loss_total");
    for d in 0..domains {
        out.push_str(&format!(",loss_d{}", d));
    }
    for d in 0..domains {
        out.push_str(&format!(",w_d{}", d));
    }
    out.push('\n');
    for rec in &report.iter_log {
        out.push_str(&format!("{},{},{}", rec.iter, rec.eta, rec.loss_total));
        for l in &rec.loss_per_domain {
            out.push_str(&format!(",{}", l));
        }
        for w in &rec.w_per_domain {
            out.push_str(&format!(",{}", w));
        }
        out.push('\n');
    }
    out
}

/// Final metrics as a flat key=value block.
pub fn metrics_block(report: &TrainReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("best_val_iter={}\n", report.best_val_iter));
    out.push_str(&format!("best_val_accuracy={}\n", report.best_val_accuracy));
    for (d, w) in report.final_w_per_domain.iter().enumerate() {
        out.push_str(&format!("final_w_d{}={}\n", d, w));
    }
    if let Some(acc) = report.target_ensemble_accuracy {
        out.push_str(&format!("target_ensemble_accuracy={}\n", acc));
    }
    for (d, acc) in report.target_branch_accuracy.iter().enumerate() {
        out.push_str(&format!("target_branch_accuracy_d{}={}\n", d, acc));
    }
    for rec in &report.val_log {
        out.push_str(&format!("val_accuracy_iter{}={}\n", rec.iter, rec.accuracy));
    }
    out
}

/// Feature dump rows as `ch1,ch2,label` comma-separated text.
pub fn features_csv(rows: &[(f64, f64, usize)]) -> String {
    let mut out = String::from("ch1,ch2,label\n");
    for (a, b, y) in rows {
        out.push_str(&format!("{},{},{}\n", a, b, y));
    }
    out
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub fn save_checkpoint(net: &DomainBranchNet, path: &Path) -> Result<()> {
    let json = serde_json::to_string(net).map_err(|e| IoError::Other(e.to_string()))?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<DomainBranchNet> {
    if !path.exists() {
        return Err(IoError::Other(format!(
            "checkpoint not found: {}",
            path.display()
        )));
    }
    let json = fs::read_to_string(path)?;
    serde_json::from_str(&json).map_err(|e| IoError::Other(e.to_string()))
}

// ---------------------------------------------------------------------------
// Tables
// ---------------------------------------------------------------------------

/// A cell grid rendered both as aligned text and as comma-separated text.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: Vec<S>) -> Self {
        Table {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push_row(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_aligned(&self) -> String {
        let cols = self.header.len();
        let mut widths: Vec<usize> = self.header.iter().map(|h| h.len()).collect();
        for row in &self.rows {
            for (wd, cell) in widths.iter_mut().zip(row.iter()).take(cols) {
                *wd = (*wd).max(cell.len());
            }
        }
        let fmt_row = |cells: &[String]| -> String {
            let mut line = String::new();
            for (i, (cell, wd)) in cells.iter().zip(widths.iter()).enumerate() {
                if i > 0 {
                    line.push_str("  ");
                }
                line.push_str(&format!("{:<width$}", cell, width = wd));
            }
            line.trim_end().to_string()
        };
        let mut out = fmt_row(&self.header);
        out.push('\n');
        out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (cols - 1)));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&fmt_row(row));
            out.push('\n');
        }
        out
    }
}
