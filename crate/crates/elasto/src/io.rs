//! Field file format: raw little-endian 32-bit reals plus a text sidecar.
//!
//! The data file holds `channels * height * width` values in (channel, a, l)
//! C order. The sidecar, at `<path>.meta`, is a `key = value` text header
//! recording `height`, `width`, `dz_mm`, `dx_mm`, `channels` and `label`,
//! plus any extra keys a caller attaches (e.g. a mean-EPR scalar). Values
//! written from disk round-trip bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{ElastoError, Result};
use crate::grid::{DispField, Field2D, GridSpec, UsFrame};
use crate::strain::StrainField;

fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta");
    path.with_file_name(name)
}

pub struct FieldHeader {
    pub grid: GridSpec,
    pub channels: usize,
    pub label: String,
    pub extras: BTreeMap<String, String>,
}

pub fn write_field(path: &Path, field: &Field2D, label: &str) -> Result<()> {
    write_field_with_extras(path, field, label, &[])
}

pub fn write_field_with_extras(
    path: &Path,
    field: &Field2D,
    label: &str,
    extras: &[(String, String)],
) -> Result<()> {
    let grid = field.grid();
    let mut bytes = Vec::with_capacity(field.data().len() * 4);
    for &v in field.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;

    let mut header = String::new();
    header.push_str(&format!("height = {}\n", grid.height));
    header.push_str(&format!("width = {}\n", grid.width));
    header.push_str(&format!("dz_mm = {}\n", grid.dz_mm));
    header.push_str(&format!("dx_mm = {}\n", grid.dx_mm));
    header.push_str(&format!("channels = {}\n", field.channels()));
    header.push_str(&format!("label = {label}\n"));
    for (k, v) in extras {
        header.push_str(&format!("{k} = {v}\n"));
    }
    fs::write(sidecar_path(path), header)?;
    Ok(())
}

pub fn read_header(path: &Path) -> Result<FieldHeader> {
    let text = fs::read_to_string(sidecar_path(path))?;
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ElastoError::HeaderParse(format!("line {}: `{line}`", lineno + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| -> Result<String> {
        map.get(k)
            .cloned()
            .ok_or_else(|| ElastoError::HeaderParse(format!("missing key `{k}`")))
    };
    let parse_usize = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|e| ElastoError::HeaderParse(format!("key `{k}`: {e}")))
    };
    let parse_f64 = |k: &str| -> Result<f64> {
        get(k)?
            .parse()
            .map_err(|e| ElastoError::HeaderParse(format!("key `{k}`: {e}")))
    };
    let grid = GridSpec::new(
        parse_usize("height")?,
        parse_usize("width")?,
        parse_f64("dz_mm")?,
        parse_f64("dx_mm")?,
    )?;
    let channels = parse_usize("channels")?;
    let label = get("label")?;
    let known = ["height", "width", "dz_mm", "dx_mm", "channels", "label"];
    let extras = map
        .into_iter()
        .filter(|(k, _)| !known.contains(&k.as_str()))
        .collect();
    Ok(FieldHeader { grid, channels, label, extras })
}

pub fn read_field(path: &Path) -> Result<(Field2D, FieldHeader)> {
    let header = read_header(path)?;
    let bytes = fs::read(path)?;
    let expect = header.channels * header.grid.len() * 4;
    if bytes.len() != expect {
        return Err(ElastoError::HeaderParse(format!(
            "data file holds {} bytes, header implies {expect}",
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let field = Field2D::from_vec(header.grid, header.channels, data)?;
    Ok((field, header))
}

pub const LABEL_FRAME: &str = "us_frame";
pub const LABEL_DISP: &str = "displacement";
pub const LABEL_STRAIN: &str = "strain";
pub const LABEL_EPR: &str = "epr";
pub const LABEL_SCALAR_MAP: &str = "scalar_map";

pub fn write_frame(path: &Path, frame: &UsFrame) -> Result<()> {
    write_field(path, frame.as_field(), LABEL_FRAME)
}

pub fn read_frame(path: &Path) -> Result<UsFrame> {
    let (field, header) = read_field(path)?;
    if header.channels != 3 {
        return Err(ElastoError::HeaderParse(format!(
            "frame file must have 3 channels, found {}",
            header.channels
        )));
    }
    UsFrame::from_channels(
        *field.grid(),
        field.channel(0).to_vec(),
        field.channel(1).to_vec(),
        field.channel(2).to_vec(),
    )
}

pub fn write_disp(path: &Path, disp: &DispField) -> Result<()> {
    write_field(path, &disp.to_field(), LABEL_DISP)
}

pub fn read_disp(path: &Path) -> Result<DispField> {
    let (field, _) = read_field(path)?;
    DispField::from_field(&field)
}

pub fn write_strain(path: &Path, strain: &StrainField) -> Result<()> {
    write_field(path, &strain.to_field(), LABEL_STRAIN)
}

pub fn read_strain(path: &Path) -> Result<StrainField> {
    let (field, _) = read_field(path)?;
    StrainField::from_field(&field)
}

/// Writes a single-channel map (Poisson ratio, EPR, mask...).
pub fn write_map(path: &Path, grid: GridSpec, values: &[f64], label: &str) -> Result<()> {
    let field = Field2D::from_vec(grid, 1, values.to_vec())?;
    write_field(path, &field, label)
}
