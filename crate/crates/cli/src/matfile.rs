//! Matrix files: a small binary format and a CSV form, plus model and
//! class-statistics containers built from concatenated matrix blocks.
//!
//! Binary block layout, little-endian throughout:
//!
//! ```text
//! magic  "OSSD"   4 bytes
//! version 0x01    1 byte
//! rows    u32     4 bytes
//! cols    u32     4 bytes
//! values  f32     rows * cols * 4 bytes, row-major
//! ```
//!
//! An embeddings file holds exactly one block; a model file holds four
//! (W1, b1, W2, b2); a statistics file holds three (class means, pooled
//! covariance, a 1x1 shrinkage value).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ossd_core::linalg::Matrix;
use ossd_core::{ClassStats, ClassifierParams};

use crate::error::{CliError, Result};

pub const MAGIC: [u8; 4] = *b"OSSD";
pub const VERSION: u8 = 0x01;

/// A parsed embedding matrix with an optional integer label column.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Row-major values.
    pub values: Vec<f64>,
    pub labels: Option<Vec<i64>>,
}

impl EmbeddingMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn rows_vec(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.rows * self.cols {
            return Err(CliError::DataFormat(format!(
                "matrix payload has {} values, expected {}",
                self.values.len(),
                self.rows * self.cols
            )));
        }
        if let Some(bad) = self.values.iter().find(|v| !v.is_finite()) {
            return Err(CliError::DataFormat(format!(
                "matrix contains a non-finite value: {bad}"
            )));
        }
        Ok(())
    }
}

fn write_block<W: Write>(w: &mut W, rows: usize, cols: usize, values: &[f64]) -> std::io::Result<()> {
    assert_eq!(values.len(), rows * cols, "block payload shape");
    w.write_all(&MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&(rows as u32).to_le_bytes())?;
    w.write_all(&(cols as u32).to_le_bytes())?;
    for v in values {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Reads one block. `None` on clean end-of-stream before the magic.
fn read_block<R: Read>(r: &mut R, what: &str) -> Result<Option<(usize, usize, Vec<f64>)>> {
    let mut magic = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        let n = r
            .read(&mut magic[filled..])
            .map_err(|e| CliError::DataFormat(format!("{what}: {e}")))?;
        if n == 0 {
            if filled == 0 {
                return Ok(None);
            }
            return Err(CliError::DataFormat(format!(
                "{what}: truncated magic bytes"
            )));
        }
        filled += n;
    }
    if magic != MAGIC {
        return Err(CliError::DataFormat(format!(
            "{what}: bad magic {magic:02X?}, expected {MAGIC:02X?} (\"OSSD\")"
        )));
    }
    let mut header = [0u8; 9];
    r.read_exact(&mut header)
        .map_err(|_| CliError::DataFormat(format!("{what}: truncated block header")))?;
    if header[0] != VERSION {
        return Err(CliError::DataFormat(format!(
            "{what}: unsupported version 0x{:02X}",
            header[0]
        )));
    }
    let rows = u32::from_le_bytes(header[1..5].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[5..9].try_into().unwrap()) as usize;
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| CliError::DataFormat(format!("{what}: matrix size overflows")))?;
    let mut payload = vec![0u8; count * 4];
    r.read_exact(&mut payload)
        .map_err(|_| CliError::DataFormat(format!("{what}: truncated payload")))?;
    let values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Ok(Some((rows, cols, values)))
}

fn expect_eof<R: Read>(r: &mut R, what: &str) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => Ok(()),
        Ok(_) => Err(CliError::DataFormat(format!(
            "{what}: trailing bytes after the last block"
        ))),
        Err(e) => Err(CliError::DataFormat(format!("{what}: {e}"))),
    }
}

fn looks_binary(path: &Path) -> Result<bool> {
    let mut f = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut head = [0u8; 4];
    let n = f.read(&mut head).map_err(|e| CliError::io(path, e))?;
    Ok(n == 4 && head == MAGIC)
}

/// Reads an embeddings file in either format: one binary block, or CSV with
/// header `f0,...,f{d-1}` and an optional trailing `label` column.
pub fn read_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    if looks_binary(path)? {
        read_embeddings_binary(path)
    } else {
        read_embeddings_csv(path)
    }
}

pub fn read_embeddings_binary(path: &Path) -> Result<EmbeddingMatrix> {
    let what = path.display().to_string();
    let mut r = BufReader::new(File::open(path).map_err(|e| CliError::io(path, e))?);
    let (rows, cols, values) = read_block(&mut r, &what)?
        .ok_or_else(|| CliError::DataFormat(format!("{what}: empty file")))?;
    expect_eof(&mut r, &what)?;
    let m = EmbeddingMatrix {
        rows,
        cols,
        values,
        labels: None,
    };
    m.validate()?;
    Ok(m)
}

pub fn read_embeddings_csv(path: &Path) -> Result<EmbeddingMatrix> {
    let what = path.display().to_string();
    let content = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = content.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| CliError::DataFormat(format!("{what}: empty file")))?;
    let fields: Vec<&str> = header.split(',').collect();
    let has_label = fields.last() == Some(&"label");
    let d = if has_label {
        fields.len() - 1
    } else {
        fields.len()
    };
    if d == 0 {
        return Err(CliError::DataFormat(format!("{what}: header has no columns")));
    }
    for (j, name) in fields[..d].iter().enumerate() {
        let expect = format!("f{j}");
        if *name != expect {
            return Err(CliError::DataFormat(format!(
                "{what}: line 1: expected header column '{expect}', found '{name}'"
            )));
        }
    }
    let mut values = Vec::new();
    let mut labels = if has_label { Some(Vec::new()) } else { None };
    let mut rows = 0;
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != fields.len() {
            return Err(CliError::DataFormat(format!(
                "{what}: line {lineno}: expected {} columns, found {}",
                fields.len(),
                cells.len()
            )));
        }
        for cell in &cells[..d] {
            let v: f64 = cell.trim().parse().map_err(|_| {
                CliError::DataFormat(format!(
                    "{what}: line {lineno}: non-numeric cell '{cell}'"
                ))
            })?;
            values.push(v);
        }
        if let Some(ls) = labels.as_mut() {
            let cell = cells[d].trim();
            let v: i64 = cell.parse().map_err(|_| {
                CliError::DataFormat(format!(
                    "{what}: line {lineno}: non-integer label '{cell}'"
                ))
            })?;
            ls.push(v);
        }
        rows += 1;
    }
    let m = EmbeddingMatrix {
        rows,
        cols: d,
        values,
        labels,
    };
    m.validate()?;
    Ok(m)
}

pub fn write_embeddings_binary(path: &Path, m: &EmbeddingMatrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?);
    write_block(&mut w, m.rows, m.cols, &m.values).map_err(|e| CliError::io(path, e))?;
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_embeddings_csv(path: &Path, m: &EmbeddingMatrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?);
    let mut header: Vec<String> = (0..m.cols).map(|j| format!("f{j}")).collect();
    if m.labels.is_some() {
        header.push("label".into());
    }
    let mut out = header.join(",");
    out.push('\n');
    for i in 0..m.rows {
        let mut cells: Vec<String> = m.row(i).iter().map(|v| format!("{v:?}")).collect();
        if let Some(ls) = &m.labels {
            cells.push(format!("{}", ls[i]));
        }
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    w.write_all(out.as_bytes()).map_err(|e| CliError::io(path, e))?;
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Classifier parameters as four consecutive blocks: W1 (HxD), b1 (1xH),
/// W2 (CxH), b2 (1xC).
pub fn write_model(path: &Path, params: &ClassifierParams) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?);
    let io = |e| CliError::io(path, e);
    write_block(&mut w, params.hidden_dim(), params.input_dim(), params.w1.data()).map_err(io)?;
    write_block(&mut w, 1, params.b1.len(), &params.b1).map_err(io)?;
    write_block(&mut w, params.num_outputs(), params.hidden_dim(), params.w2.data()).map_err(io)?;
    write_block(&mut w, 1, params.b2.len(), &params.b2).map_err(io)?;
    w.flush().map_err(io)
}

pub fn read_model(path: &Path) -> Result<ClassifierParams> {
    let what = path.display().to_string();
    let mut r = BufReader::new(File::open(path).map_err(|e| CliError::io(path, e))?);
    let mut blocks = Vec::with_capacity(4);
    for name in ["W1", "b1", "W2", "b2"] {
        let block = read_block(&mut r, &what)?.ok_or_else(|| {
            CliError::DataFormat(format!("{what}: missing {name} block"))
        })?;
        blocks.push(block);
    }
    expect_eof(&mut r, &what)?;
    let (h, d, w1) = blocks.remove(0);
    let (b1r, b1c, b1) = blocks.remove(0);
    let (c, h2, w2) = blocks.remove(0);
    let (b2r, b2c, b2) = blocks.remove(0);
    if b1r != 1 || b1c != h || h2 != h || b2r != 1 || b2c != c {
        return Err(CliError::DataFormat(format!(
            "{what}: inconsistent model shapes (W1 {h}x{d}, b1 {b1r}x{b1c}, \
             W2 {c}x{h2}, b2 {b2r}x{b2c})"
        )));
    }
    let mut w1m = Matrix::zeros(h, d);
    w1m.data_mut().copy_from_slice(&w1);
    let mut w2m = Matrix::zeros(c, h);
    w2m.data_mut().copy_from_slice(&w2);
    Ok(ClassifierParams {
        w1: w1m,
        b1,
        w2: w2m,
        b2,
    })
}

/// Class statistics as three blocks: means (KxP), pooled covariance (PxP),
/// shrinkage (1x1).
pub fn write_stats(path: &Path, stats: &ClassStats) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?);
    let io = |e| CliError::io(path, e);
    let p = stats.dim();
    let means_flat: Vec<f64> = stats.means().iter().flatten().copied().collect();
    write_block(&mut w, stats.means().len(), p, &means_flat).map_err(io)?;
    write_block(&mut w, p, p, stats.pooled_cov().data()).map_err(io)?;
    write_block(&mut w, 1, 1, &[stats.shrinkage()]).map_err(io)?;
    w.flush().map_err(io)
}

pub fn read_stats(path: &Path) -> Result<ClassStats> {
    let what = path.display().to_string();
    let mut r = BufReader::new(File::open(path).map_err(|e| CliError::io(path, e))?);
    let (k, p, means_flat) = read_block(&mut r, &what)?
        .ok_or_else(|| CliError::DataFormat(format!("{what}: missing means block")))?;
    let (cr, cc, cov_flat) = read_block(&mut r, &what)?
        .ok_or_else(|| CliError::DataFormat(format!("{what}: missing covariance block")))?;
    let (sr, sc, shrink) = read_block(&mut r, &what)?
        .ok_or_else(|| CliError::DataFormat(format!("{what}: missing shrinkage block")))?;
    expect_eof(&mut r, &what)?;
    if cr != p || cc != p || sr != 1 || sc != 1 {
        return Err(CliError::DataFormat(format!(
            "{what}: inconsistent statistics shapes (means {k}x{p}, \
             covariance {cr}x{cc}, shrinkage {sr}x{sc})"
        )));
    }
    let means: Vec<Vec<f64>> = means_flat.chunks(p).map(|c| c.to_vec()).collect();
    let mut cov = Matrix::zeros(p, p);
    cov.data_mut().copy_from_slice(&cov_flat);
    // The stored covariance went through f32, which can break exact symmetry;
    // symmetrize before inverting.
    for i in 0..p {
        for j in (i + 1)..p {
            let avg = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = avg;
            cov[(j, i)] = avg;
        }
    }
    Ok(ClassStats::new(means, cov, shrink[0])?)
}
