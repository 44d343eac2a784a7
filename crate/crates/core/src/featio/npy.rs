//! NPY v1.0 subset: `<f4`/`<f8`, C order, rank 2 or 3.

use std::fs;
use std::path::Path;

use super::{write_new_file, Dtype, FeatureSet, Role};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const NPY_MAGIC: &[u8; 6] = b"\x93NUMPY";
const PREAMBLE: usize = 10;
const ALIGN: usize = 64;

fn format_err(field: &str, message: impl Into<String>) -> Error {
    Error::Format {
        field: field.to_string(),
        message: message.into(),
    }
}

pub fn encode_npy(data: &Tensor, dtype: Dtype) -> Vec<u8> {
    let dims: Vec<String> = data.shape().iter().map(|d| d.to_string()).collect();
    let shape = if dims.len() == 1 {
        format!("({},)", dims[0])
    } else {
        format!("({})", dims.join(", "))
    };
    let mut header = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        dtype.descr(),
        shape
    );
    // Pad with spaces so the data section starts on a 64-byte boundary; the
    // header always ends in a newline.
    let unpadded = PREAMBLE + header.len() + 1;
    let pad = (ALIGN - unpadded % ALIGN) % ALIGN;
    header.push_str(&" ".repeat(pad));
    header.push('\n');

    let mut out = Vec::with_capacity(PREAMBLE + header.len() + data.len() * dtype.width());
    out.extend_from_slice(NPY_MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    match dtype {
        Dtype::F64 => data.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Dtype::F32 => data
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
    }
    out
}

struct Header {
    dtype: Dtype,
    shape: Vec<usize>,
}

/// Pulls the value text for `key` out of the header dict literal.
fn dict_value<'a>(dict: &'a str, key: &str) -> Result<&'a str> {
    let pat_single = format!("'{key}'");
    let pat_double = format!("\"{key}\"");
    let start = dict
        .find(&pat_single)
        .map(|i| i + pat_single.len())
        .or_else(|| dict.find(&pat_double).map(|i| i + pat_double.len()))
        .ok_or_else(|| format_err(key, "missing from header"))?;
    let rest = dict[start..].trim_start();
    let rest = rest
        .strip_prefix(':')
        .ok_or_else(|| format_err(key, "expected ':' after key"))?
        .trim_start();
    // Values end at the next top-level comma or closing brace.
    let mut depth = 0i32;
    for (i, c) in rest.char_indices() {
        match c {
            '(' | '[' => depth += 1,
            ')' | ']' => depth -= 1,
            ',' | '}' if depth == 0 => return Ok(rest[..i].trim()),
            _ => {}
        }
    }
    Err(format_err(key, "unterminated value"))
}

fn parse_header(text: &str) -> Result<Header> {
    let dict = text.trim();
    if !dict.starts_with('{') || !dict.ends_with('}') {
        return Err(format_err("header", "header is not a dict literal"));
    }
    let descr = dict_value(dict, "descr")?.trim_matches(|c| c == '\'' || c == '"');
    let dtype = match descr {
        "<f8" => Dtype::F64,
        "<f4" => Dtype::F32,
        other => return Err(format_err("descr", format!("unsupported descr '{other}'"))),
    };
    match dict_value(dict, "fortran_order")? {
        "False" => {}
        "True" => return Err(format_err("fortran_order", "Fortran-ordered arrays are not supported")),
        other => return Err(format_err("fortran_order", format!("invalid value '{other}'"))),
    }
    let shape_text = dict_value(dict, "shape")?;
    let inner = shape_text
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| format_err("shape", format!("not a tuple: {shape_text}")))?;
    let shape = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| format_err("shape", format!("bad dimension '{s}'"))))
        .collect::<Result<Vec<_>>>()?;
    if shape.len() != 2 && shape.len() != 3 {
        return Err(format_err(
            "shape",
            format!("expected (N, D) or (N, T, D), got {shape:?}"),
        ));
    }
    Ok(Header { dtype, shape })
}

/// Parses NPY bytes into a tensor (converted to `f64`) and its stored dtype.
pub fn decode_npy(bytes: &[u8]) -> Result<(Tensor, Dtype)> {
    if bytes.len() < PREAMBLE || &bytes[..6] != NPY_MAGIC {
        return Err(format_err("magic", "missing \\x93NUMPY magic"));
    }
    if bytes[6] != 1 || bytes[7] != 0 {
        return Err(format_err(
            "version",
            format!("unsupported version {}.{}", bytes[6], bytes[7]),
        ));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header_bytes = bytes
        .get(PREAMBLE..PREAMBLE + hlen)
        .ok_or_else(|| format_err("header", "truncated header"))?;
    let text = std::str::from_utf8(header_bytes)
        .map_err(|_| format_err("header", "header is not ASCII"))?;
    let header = parse_header(text)?;

    let count: usize = header.shape.iter().product();
    let body = &bytes[PREAMBLE + hlen..];
    let width = header.dtype.width();
    if body.len() != count * width {
        return Err(format_err(
            "shape",
            format!(
                "shape {:?} needs {} data bytes, file has {}",
                header.shape,
                count * width,
                body.len()
            ),
        ));
    }
    let data: Vec<f64> = match header.dtype {
        Dtype::F64 => body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F32 => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    Ok((Tensor::new(header.shape, data)?, header.dtype))
}

pub fn load_feature_file(path: &Path) -> Result<FeatureSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (data, dtype) = decode_npy(&bytes)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let role = Role::from_label(&name);
    FeatureSet::new(data, dtype, role, name, path.display().to_string())
}

/// Writes `fs` in its own dtype. Existing files are refused unless `overwrite`.
pub fn save_feature_file(fs: &FeatureSet, path: &Path, overwrite: bool) -> Result<()> {
    if let Some(index) = fs.data().first_non_finite() {
        return Err(Error::NonFinite { index });
    }
    write_new_file(path, &encode_npy(fs.data(), fs.dtype), overwrite)
}
