//! Weights container (DLW1) and the plain-text configuration document stored
//! alongside it.
//!
//! DLW1 layout: magic `DLW1`, u32 version, u32 tensor count, then per tensor a
//! u16 name length, the UTF-8 name, and the tensor body (u32 rank, u32
//! extents, little-endian f32 data).

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;

use super::{ArchConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{read_tensor_body, write_tensor_body, Cursor, Scalar, Tensor};

pub const DLW1_MAGIC: &[u8; 4] = b"DLW1";
pub const DLW1_VERSION: u32 = 1;

/// Save parameters (always stored as f32).
pub fn save_params<T: Scalar>(params: &ModelParams<T>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let res: std::io::Result<()> = (|| {
        out.write_all(DLW1_MAGIC)?;
        out.write_all(&DLW1_VERSION.to_le_bytes())?;
        out.write_all(&(params.len() as u32).to_le_bytes())?;
        for (name, tensor) in params.iter() {
            out.write_all(&(name.len() as u16).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            write_tensor_body(tensor, &mut out)?;
        }
        out.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

/// Load a DLW1 file. The result carries no init seed; validate it against a
/// configuration with [`ModelParams::validate_for`].
pub fn load_params(path: &Path) -> Result<ModelParams<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor::new(BufReader::new(file));
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic, path, "DLW1")?;
    if &magic != DLW1_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            format: "DLW1",
            offset: 0,
            what: format!("bad magic {magic:?}"),
        });
    }
    let ver_at = cur.offset;
    let version = cur.read_u32(path, "DLW1")?;
    if version != DLW1_VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            format: "DLW1",
            offset: ver_at,
            what: format!("unsupported version {version}"),
        });
    }
    let count = cur.read_u32(path, "DLW1")?;
    let mut entries = IndexMap::with_capacity(count as usize);
    for _ in 0..count {
        let name_at = cur.offset;
        let name_len = cur.read_u16(path, "DLW1")? as usize;
        let mut name_bytes = vec![0u8; name_len];
        cur.read_exact(&mut name_bytes, path, "DLW1")?;
        let name = String::from_utf8(name_bytes).map_err(|_| Error::Format {
            path: path.to_path_buf(),
            format: "DLW1",
            offset: name_at,
            what: "tensor name is not UTF-8".into(),
        })?;
        let tensor: Tensor<f32> = read_tensor_body(&mut cur, path, "DLW1")?;
        if entries.insert(name.clone(), tensor).is_some() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                format: "DLW1",
                offset: name_at,
                what: format!("duplicate tensor name {name:?}"),
            });
        }
    }
    Ok(ModelParams::from_entries(entries, None))
}

// ---------------------------------------------------------------------------
// Plain-text key-value configuration document.
// ---------------------------------------------------------------------------

fn ints_csv(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Render a configuration as the key-value document format.
pub fn config_to_string(config: &ArchConfig) -> String {
    format!(
        "variant = {}\nstem_width = {}\neam_count = {}\neam_dilations = {}\nunet_levels = {}\nunet_widths = {}\nsca_per_level = {}\n",
        config.variant,
        config.stem_width,
        config.eam_count,
        ints_csv(&config.eam_dilations),
        config.unet_levels,
        ints_csv(&config.unet_widths),
        config.sca_per_level,
    )
}

pub fn save_config(config: &ArchConfig, path: &Path) -> Result<()> {
    std::fs::write(path, config_to_string(config)).map_err(|e| Error::io(path, e))
}

/// Parse the key-value document; unknown keys are rejected.
pub fn parse_config(text: &str) -> Result<ArchConfig> {
    let mut config = ArchConfig::default();
    for (lineno, raw_line) in text.lines().enumerate() {
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {line:?}", lineno + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        let parse_usize = |v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("line {}: {key} must be an integer, got {v:?}", lineno + 1)))
        };
        let parse_list = |v: &str| -> Result<Vec<usize>> {
            v.split(',').map(|p| parse_usize(p.trim())).collect()
        };
        match key {
            "variant" => config.variant = value.parse()?,
            "stem_width" => config.stem_width = parse_usize(value)?,
            "eam_count" => config.eam_count = parse_usize(value)?,
            "eam_dilations" => config.eam_dilations = parse_list(value)?,
            "unet_levels" => config.unet_levels = parse_usize(value)?,
            "unet_widths" => config.unet_widths = parse_list(value)?,
            "sca_per_level" => config.sca_per_level = parse_usize(value)?,
            other => return Err(Error::Config(format!("line {}: unknown key {other:?}", lineno + 1))),
        }
    }
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<ArchConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

/// Path of the configuration document stored alongside a weights file.
pub fn sibling_config_path(weights: &Path) -> std::path::PathBuf {
    weights.with_extension("cfg")
}
