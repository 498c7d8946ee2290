//! Tensor and label-map files.
//!
//! Tensors are stored as `MTEN`: the magic bytes, a `u8` rank, `rank`
//! little-endian `u32` dims, then the `f32` values in little-endian order.
//! Label maps with at most 256 classes are binary PGM files whose header
//! carries a `# num_classes N` comment; larger vocabularies use an `H x W`
//! MTEN file of class ids plus a JSON sidecar `{"num_classes": N}`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use maskedit_core::layout::LabelMap;
use maskedit_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, io_err, Error, Result};

const MAGIC: &[u8; 4] = b"MTEN";

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(t.rank() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    if bytes.len() < 5 || &bytes[..4] != MAGIC {
        return Err(format_err(path, "missing MTEN magic"));
    }
    let rank = bytes[4] as usize;
    if rank == 0 {
        return Err(format_err(path, "rank must be at least 1"));
    }
    let header = 5 + 4 * rank;
    if bytes.len() < header {
        return Err(format_err(path, "truncated dims"));
    }
    let dims: Vec<usize> = bytes[5..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| format_err(path, "dims overflow"))?;
    let body = &bytes[header..];
    if body.len() != count * 4 {
        return Err(format_err(
            path,
            format!("expected {} data bytes for dims {:?}, found {}", count * 4, dims, body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(dims, data).map_err(|e| format_err(path, e.to_string()))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_bytes(path, &encode_tensor(t))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_tensor(&bytes, path)
}

/// Rows of numbers from an MTEN file (rank 1 is one column, rank 2 is
/// `rows x cols`) or from a header-less CSV file.
pub fn read_numeric_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.starts_with(MAGIC) {
        let t = decode_tensor(&bytes, path)?;
        let v = t.to_f64();
        return match *t.dims() {
            [_] => Ok(v.into_iter().map(|x| vec![x]).collect()),
            [_, cols] if cols > 0 => Ok(v.chunks(cols).map(<[f64]>::to_vec).collect()),
            _ => Err(format_err(path, format!("expected a rank 1 or 2 tensor, got dims {:?}", t.dims()))),
        };
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(bytes.as_slice());
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        let row = rec
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| format_err(path, format!("row {i}: {f:?} is not a number")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))
}

pub fn encode_pgm(label: &LabelMap) -> Result<Vec<u8>> {
    if label.num_classes() > 256 {
        return Err(maskedit_core::Error::Domain(format!(
            "PGM holds at most 256 classes, map has {}",
            label.num_classes()
        ))
        .into());
    }
    let mut out = format!(
        "P5\n# num_classes {}\n{} {}\n255\n",
        label.num_classes(),
        label.width(),
        label.height()
    )
    .into_bytes();
    out.extend(label.classes().iter().map(|&c| c as u8));
    Ok(out)
}

/// Parses a binary PGM. The class count comes from the header comment, or
/// from `default_classes` when the comment is absent.
pub fn decode_pgm(bytes: &[u8], default_classes: Option<u32>, path: &Path) -> Result<LabelMap> {
    let mut pos = 0;
    let mut fields = Vec::new();
    let mut num_classes = default_classes;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos >= bytes.len() {
            return Err(format_err(path, "truncated PGM header"));
        }
        if bytes[pos] == b'#' {
            let end = bytes[pos..].iter().position(|&b| b == b'\n').map_or(bytes.len(), |e| pos + e);
            let comment = String::from_utf8_lossy(&bytes[pos + 1..end]);
            if let Some(n) = comment.trim().strip_prefix("num_classes ") {
                num_classes = Some(n.trim().parse().map_err(|_| format_err(path, "bad num_classes comment"))?);
            }
            pos = end;
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(format_err(path, format!("expected P5 magic, found {:?}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format_err(path, format!("bad header field {s:?}")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(format_err(path, format!("maxval must be 255, found {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let body = bytes.get(pos + 1..).unwrap_or(&[]);
    if body.len() != w * h {
        return Err(format_err(path, format!("expected {} pixels, found {}", w * h, body.len())));
    }
    let classes: Vec<u16> = body.iter().map(|&b| b as u16).collect();
    let k = num_classes.unwrap_or_else(|| classes.iter().max().map_or(1, |&m| m as u32 + 1));
    Ok(LabelMap::new(h, w, k, classes)?)
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    num_classes: u32,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes a label map, as PGM when it fits and as MTEN plus sidecar otherwise.
/// Returns the path actually written.
pub fn write_label_map(path: &Path, label: &LabelMap) -> Result<PathBuf> {
    if label.num_classes() <= 256 {
        let p = path.with_extension("pgm");
        write_bytes(&p, &encode_pgm(label)?)?;
        Ok(p)
    } else {
        let p = path.with_extension("mten");
        let data = label.classes().iter().map(|&c| c as f32).collect();
        let t = Tensor::new(vec![label.height(), label.width()], data)?;
        write_tensor(&p, &t)?;
        let side = serde_json::to_string(&Sidecar {
            num_classes: label.num_classes(),
        })
        .expect("sidecar serialises");
        write_bytes(&sidecar_path(&p), format!("{side}\n").as_bytes())?;
        Ok(p)
    }
}

pub fn read_label_map(path: &Path) -> Result<LabelMap> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.starts_with(MAGIC) {
        let t = decode_tensor(&bytes, path)?;
        let [h, w] = match t.dims() {
            [h, w] => [*h, *w],
            d => return Err(format_err(path, format!("label tensor must be 2-D, found {d:?}"))),
        };
        let side_path = sidecar_path(path);
        let text = fs::read_to_string(&side_path).map_err(io_err(&side_path))?;
        let side: Sidecar = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: side_path.clone(),
            source,
        })?;
        let mut classes = Vec::with_capacity(h * w);
        for &v in t.data() {
            if v < 0.0 || v.fract() != 0.0 || v > u16::MAX as f32 {
                return Err(format_err(path, format!("{v} is not a class id")));
            }
            classes.push(v as u16);
        }
        Ok(LabelMap::new(h, w, side.num_classes, classes)?)
    } else {
        decode_pgm(&bytes, None, path)
    }
}
