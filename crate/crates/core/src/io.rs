//! Text and binary serialization of fields, particle snapshots and
//! estimator outputs.
//!
//! The binary dump is `MAGIC`, a little-endian u64 header length, a JSON
//! header, then the payload as little-endian f64 in row-major order.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, GridField};
use crate::ibm::Snapshot;

pub const MAGIC: &[u8; 8] = b"XDIFFv1\n";

/// Write via a temporary sibling and rename, so readers never observe a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Cell centres followed by one column per species.
pub fn field_csv(u: &GridField) -> String {
    let d = u.grid.dim;
    let mut out = String::new();
    let axes = ["x", "y"];
    let mut head: Vec<String> = axes[..d].iter().map(|s| s.to_string()).collect();
    head.extend((0..u.species()).map(|i| format!("u{i}")));
    out.push_str(&head.join(","));
    out.push('\n');
    for idx in 0..u.grid.len() {
        let c = u.grid.center(idx);
        let mut row: Vec<String> = c[..d].iter().map(|v| v.to_string()).collect();
        row.extend(u.values.iter().map(|s| s[idx].to_string()));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpHeader {
    pub kind: String,
    /// Row-major payload shape.
    pub shape: Vec<usize>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn encode_dump(header: &DumpHeader, data: &[f64]) -> Result<Vec<u8>> {
    let n: usize = header.shape.iter().product();
    if n != data.len() {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: data.len(),
        });
    }
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_dump(bytes: &[u8]) -> Result<(DumpHeader, Vec<f64>)> {
    let bad = |m: &str| Error::Parse(format!("binary dump: {m}"));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("bad magic"));
    }
    let hl = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + hl).ok_or_else(|| bad("truncated header"))?;
    let header: DumpHeader = serde_json::from_slice(body)?;
    let n: usize = header.shape.iter().product();
    let payload = &bytes[16 + hl..];
    if payload.len() != 8 * n {
        return Err(bad("payload length does not match shape"));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, data))
}

#[derive(Serialize, Deserialize)]
struct FieldMeta {
    grid: Grid,
    time: f64,
}

/// Shape `[species, cells...]`.
pub fn encode_field(u: &GridField) -> Result<Vec<u8>> {
    let mut shape = vec![u.species()];
    shape.extend_from_slice(&u.grid.cells);
    let header = DumpHeader {
        kind: "grid-field".into(),
        shape,
        meta: serde_json::to_value(FieldMeta {
            grid: u.grid.clone(),
            time: u.time,
        })?,
    };
    let data: Vec<f64> = u.values.iter().flatten().copied().collect();
    encode_dump(&header, &data)
}

pub fn decode_field(bytes: &[u8]) -> Result<GridField> {
    let (h, data) = decode_dump(bytes)?;
    if h.kind != "grid-field" {
        return Err(Error::Parse(format!("expected grid-field dump, found {}", h.kind)));
    }
    let meta: FieldMeta = serde_json::from_value(h.meta)?;
    let grid = Grid::new(meta.grid.lower, meta.grid.upper, meta.grid.cells)?;
    let n = grid.len();
    let values = data.chunks(n.max(1)).map(|c| c.to_vec()).collect::<Vec<_>>();
    let values = if h.shape[0] == 0 { Vec::new() } else { values };
    let mut field = GridField::from_values(grid, values)?;
    field.time = meta.time;
    Ok(field)
}

/// One row per particle: time, species, id, coordinates.
pub fn snapshot_csv(snaps: &[Snapshot]) -> String {
    let d = snaps
        .iter()
        .flat_map(|s| s.measures.iter())
        .map(|m| m.dim)
        .next()
        .unwrap_or(1);
    let mut out = String::from("time,species,id");
    for k in 0..d {
        let _ = write!(out, ",x{k}");
    }
    out.push('\n');
    for s in snaps {
        for (i, m) in s.measures.iter().enumerate() {
            for (n, id) in s.ids[i].iter().enumerate() {
                let _ = write!(out, "{},{},{}", s.time, i, id);
                for v in m.point(n) {
                    let _ = write!(out, ",{v}");
                }
                out.push('\n');
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DensityRow {
    pub y: Vec<f64>,
    pub estimate: f64,
    pub stderr: f64,
    pub n_paths: usize,
}

pub fn density_csv(rows: &[DensityRow]) -> String {
    let d = rows.first().map(|r| r.y.len()).unwrap_or(1);
    let mut out = String::new();
    for k in 0..d {
        let _ = write!(out, "y{k},");
    }
    out.push_str("estimate,stderr,n_paths\n");
    for r in rows {
        for v in &r.y {
            let _ = write!(out, "{v},");
        }
        let _ = writeln!(out, "{},{},{}", r.estimate, r.stderr, r.n_paths);
    }
    out
}

/// Support point and test-function value per row.
pub fn certificate_csv(dim: usize, points: &[f64], phi: &[f64]) -> String {
    let mut out = String::new();
    for k in 0..dim {
        let _ = write!(out, "x{k},");
    }
    out.push_str("phi\n");
    for (n, v) in phi.iter().enumerate() {
        for c in &points[n * dim..(n + 1) * dim] {
            let _ = write!(out, "{c},");
        }
        let _ = writeln!(out, "{v}");
    }
    out
}
