//! Text voxel files: `voxl 1\nD D D\n` followed by `D³` values, `k` fastest.
//!
//! Boolean grids store `0`/`1`; probability grids store shortest
//! round-trip decimals, so both read back bit-exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::objective::VoxelGrid;

pub fn encode_voxl(grid: &VoxelGrid) -> String {
    let d = grid.extent();
    let mut out = format!("voxl 1\n{d} {d} {d}\n");
    for row in grid.values().chunks(d) {
        for (n, v) in row.iter().enumerate() {
            if n > 0 {
                out.push(' ');
            }
            write!(out, "{v}").expect("writing to a string");
        }
        out.push('\n');
    }
    out
}

pub fn decode_voxl(text: &str) -> std::result::Result<VoxelGrid, String> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("voxl 1") {
        return Err("missing `voxl 1` header".into());
    }
    let dims: Vec<usize> = lines
        .next()
        .ok_or("missing extent line")?
        .split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|_| format!("bad extent `{t}`")))
        .collect::<std::result::Result<_, _>>()?;
    let d = match dims[..] {
        [a, b, c] if a == b && b == c && a > 0 => a,
        _ => return Err(format!("expected three equal positive extents, got {dims:?}")),
    };
    let values: Vec<f64> = lines
        .flat_map(str::split_whitespace)
        .map(|t| match t.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(format!("bad voxel value `{t}`")),
        })
        .collect::<std::result::Result<_, _>>()?;
    if values.len() != d * d * d {
        return Err(format!("expected {} values, found {}", d * d * d, values.len()));
    }
    VoxelGrid::new(d, values).map_err(|e| e.to_string())
}

pub fn write_voxl(path: &Path, grid: &VoxelGrid) -> Result<()> {
    fs::write(path, encode_voxl(grid)).map_err(|e| Error::io(path, e))
}

pub fn read_voxl(path: &Path) -> Result<VoxelGrid> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_voxl(&text).map_err(|m| Error::format(path, m))
}
