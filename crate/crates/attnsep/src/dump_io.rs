//! On-disk activation dumps: a `manifest.json` plus one NPY file per tensor.
//!
//! Layout of a dump directory:
//!
//! ```text
//! manifest.json
//! values_L000_H000.npy      (L+1) x d  f32
//! attn_L000_H000.npy        L+1        f32
//! attn_full_L000_H000.npy   (L+1) x (L+1), only when has_full_attention
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the attention-row sum.
pub const ATTN_SUM_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpManifest {
    pub model_name: String,
    pub num_layers: usize,
    pub num_heads: usize,
    /// L; positions are indexed 0..=L.
    pub seq_len: usize,
    pub head_dim: usize,
    pub dtype: Dtype,
    pub has_full_attention: bool,
}

impl DumpManifest {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 {
            return Err(Error::Validation(format!(
                "manifest declares {} layers and {} heads; both must be positive",
                self.num_layers, self.num_heads
            )));
        }
        if self.seq_len < 1 {
            return Err(Error::Validation("seq_len must be at least 1".into()));
        }
        if self.head_dim < 2 {
            return Err(Error::Validation("head_dim must be at least 2".into()));
        }
        Ok(())
    }

    pub fn positions(&self) -> usize {
        self.seq_len + 1
    }
}

/// One (layer, head) record: value states for positions 0..=L and the
/// decode-step attention row.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSlice {
    pub layer: usize,
    pub head: usize,
    pub dim: usize,
    /// Row-major (L+1) x dim.
    pub values: Vec<f32>,
    pub attn_row: Vec<f32>,
    /// Optional row-major (L+1) x (L+1) attention matrix.
    pub attn_full: Option<Vec<f32>>,
}

impl HeadSlice {
    /// Builds a slice and checks every invariant.
    pub fn new(
        layer: usize,
        head: usize,
        dim: usize,
        values: Vec<f32>,
        attn_row: Vec<f32>,
    ) -> Result<Self> {
        let s = HeadSlice {
            layer,
            head,
            dim,
            values,
            attn_row,
            attn_full: None,
        };
        s.validate()?;
        Ok(s)
    }

    /// Number of positions, L+1.
    pub fn positions(&self) -> usize {
        self.attn_row.len()
    }

    /// L, the index of the last position.
    pub fn seq_len(&self) -> usize {
        self.attn_row.len() - 1
    }

    pub fn value(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn value_f64(&self, i: usize) -> Vec<f64> {
        self.value(i).iter().map(|&x| x as f64).collect()
    }

    pub fn alpha(&self) -> Vec<f64> {
        self.attn_row.iter().map(|&x| x as f64).collect()
    }

    pub fn value_norms(&self) -> Vec<f64> {
        (0..self.positions())
            .map(|i| crate::stats::norm_f32(self.value(i)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.attn_row.len();
        if n < 2 {
            return Err(Error::Validation(format!(
                "layer {} head {}: need at least 2 positions, got {n}",
                self.layer, self.head
            )));
        }
        if self.dim == 0 || self.values.len() != n * self.dim {
            return Err(Error::Validation(format!(
                "layer {} head {}: values hold {} entries, expected {}x{}",
                self.layer,
                self.head,
                self.values.len(),
                n,
                self.dim
            )));
        }
        if self.values.iter().any(|x| !x.is_finite()) {
            return Err(Error::Validation(format!(
                "layer {} head {}: non-finite value state",
                self.layer, self.head
            )));
        }
        if self.attn_row.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Validation(format!(
                "layer {} head {}: attention weights must be finite and non-negative",
                self.layer, self.head
            )));
        }
        let sum: f64 = self.attn_row.iter().map(|&x| x as f64).sum();
        if (sum - 1.0).abs() > ATTN_SUM_TOL {
            return Err(Error::AttnNotNormalized {
                layer: self.layer,
                head: self.head,
                sum,
            });
        }
        if let Some(full) = &self.attn_full {
            if full.len() != n * n || full.iter().any(|x| !x.is_finite()) {
                return Err(Error::Validation(format!(
                    "layer {} head {}: full attention matrix malformed",
                    self.layer, self.head
                )));
            }
        }
        Ok(())
    }
}

pub fn values_file(layer: usize, head: usize) -> String {
    format!("values_L{layer:03}_H{head:03}.npy")
}

pub fn attn_file(layer: usize, head: usize) -> String {
    format!("attn_L{layer:03}_H{head:03}.npy")
}

pub fn attn_full_file(layer: usize, head: usize) -> String {
    format!("attn_full_L{layer:03}_H{head:03}.npy")
}

/// An opened dump. Slices are loaded and validated on request.
#[derive(Debug, Clone)]
pub struct Dump {
    pub root: PathBuf,
    pub manifest: DumpManifest,
}

pub fn read_dump(path: impl AsRef<Path>) -> Result<Dump> {
    let root = path.as_ref().to_path_buf();
    let mpath = root.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::Format {
        path: mpath.clone(),
        reason: e.to_string(),
    })?;
    let manifest: DumpManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: mpath.clone(),
        reason: e.to_string(),
    })?;
    manifest.validate()?;
    for l in 0..manifest.num_layers {
        for h in 0..manifest.num_heads {
            let mut names = vec![values_file(l, h), attn_file(l, h)];
            if manifest.has_full_attention {
                names.push(attn_full_file(l, h));
            }
            for name in names {
                let p = root.join(name);
                if !p.is_file() {
                    return Err(Error::Format {
                        path: p,
                        reason: "missing tensor file".into(),
                    });
                }
            }
        }
    }
    Ok(Dump { root, manifest })
}

impl Dump {
    pub fn slice(&self, layer: usize, head: usize) -> Result<HeadSlice> {
        let m = &self.manifest;
        if layer >= m.num_layers || head >= m.num_heads {
            return Err(Error::Range(format!(
                "head ({layer}, {head}) outside {}x{}",
                m.num_layers, m.num_heads
            )));
        }
        let n = m.positions();
        let values = read_expect(&self.root.join(values_file(layer, head)), &[n, m.head_dim])?;
        let attn_row = read_expect(&self.root.join(attn_file(layer, head)), &[n])?;
        let attn_full = if m.has_full_attention {
            Some(read_expect(
                &self.root.join(attn_full_file(layer, head)),
                &[n, n],
            )?)
        } else {
            None
        };
        let s = HeadSlice {
            layer,
            head,
            dim: m.head_dim,
            values,
            attn_row,
            attn_full,
        };
        s.validate()?;
        Ok(s)
    }

    /// All slices in (layer, head) order, loaded in parallel.
    pub fn slices(&self) -> Result<Vec<HeadSlice>> {
        self.head_ids()
            .into_par_iter()
            .map(|(l, h)| self.slice(l, h))
            .collect()
    }

    pub fn head_ids(&self) -> Vec<(usize, usize)> {
        let m = &self.manifest;
        (0..m.num_layers)
            .flat_map(|l| (0..m.num_heads).map(move |h| (l, h)))
            .collect()
    }
}

fn read_expect(path: &Path, shape: &[usize]) -> Result<Vec<f32>> {
    let (got, data) = read_npy(path)?;
    if got != shape {
        return Err(Error::Shape {
            path: path.to_path_buf(),
            expected: shape.to_vec(),
            got,
        });
    }
    Ok(data)
}

pub fn write_dump(manifest: &DumpManifest, slices: &[HeadSlice], path: impl AsRef<Path>) -> Result<()> {
    manifest.validate()?;
    let root = path.as_ref();
    let n = manifest.positions();
    let expected = manifest.num_layers * manifest.num_heads;
    if slices.len() != expected {
        return Err(Error::Validation(format!(
            "manifest declares {expected} heads, got {} slices",
            slices.len()
        )));
    }
    let mut seen = vec![false; expected];
    for s in slices {
        if s.layer >= manifest.num_layers || s.head >= manifest.num_heads {
            return Err(Error::Validation(format!(
                "slice ({}, {}) outside manifest",
                s.layer, s.head
            )));
        }
        let k = s.layer * manifest.num_heads + s.head;
        if std::mem::replace(&mut seen[k], true) {
            return Err(Error::Validation(format!(
                "duplicate slice ({}, {})",
                s.layer, s.head
            )));
        }
        if s.positions() != n || s.dim != manifest.head_dim {
            return Err(Error::Shape {
                path: root.join(values_file(s.layer, s.head)),
                expected: vec![n, manifest.head_dim],
                got: vec![s.positions(), s.dim],
            });
        }
        if s.attn_full.is_some() != manifest.has_full_attention {
            return Err(Error::Validation(format!(
                "slice ({}, {}) full-attention presence disagrees with manifest",
                s.layer, s.head
            )));
        }
        s.validate()?;
    }
    fs::create_dir_all(root)?;
    let json = serde_json::to_string_pretty(manifest).map_err(std::io::Error::other)?;
    fs::write(root.join("manifest.json"), json)?;
    for s in slices {
        write_npy(
            &root.join(values_file(s.layer, s.head)),
            &[n, s.dim],
            &s.values,
        )?;
        write_npy(&root.join(attn_file(s.layer, s.head)), &[n], &s.attn_row)?;
        if let Some(full) = &s.attn_full {
            write_npy(&root.join(attn_full_file(s.layer, s.head)), &[n, n], full)?;
        }
    }
    Ok(())
}

const NPY_MAGIC: &[u8] = b"\x93NUMPY";

/// Writes a little-endian f32, C-order NPY v1.0 file.
pub fn write_npy(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    let count: usize = shape.iter().product();
    if count != data.len() {
        return Err(Error::Shape {
            path: path.to_path_buf(),
            expected: shape.to_vec(),
            got: vec![data.len()],
        });
    }
    let dims = match shape {
        [n] => format!("({n},)"),
        _ => format!(
            "({})",
            shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut header = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {dims}, }}");
    let unpadded = NPY_MAGIC.len() + 2 + 2 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');
    let mut buf = Vec::with_capacity(10 + header.len() + 4 * data.len());
    buf.extend_from_slice(NPY_MAGIC);
    buf.extend_from_slice(&[1, 0]);
    buf.extend_from_slice(&(header.len() as u16).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    for x in data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Reads an f32 NPY file (versions 1.0 to 3.0, little-endian, C-order).
pub fn read_npy(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 10 || &bytes[..6] != NPY_MAGIC {
        return Err(bad("not an NPY file"));
    }
    let (hlen, start) = match bytes[6] {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 if bytes.len() >= 12 => (
            u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize,
            12,
        ),
        _ => return Err(bad("unsupported NPY version")),
    };
    let header = bytes
        .get(start..start + hlen)
        .and_then(|h| std::str::from_utf8(h).ok())
        .ok_or_else(|| bad("truncated header"))?;
    let descr = dict_value(header, "descr").ok_or_else(|| bad("missing descr"))?;
    if !matches!(descr.trim_matches(|c| c == '\'' || c == '"'), "<f4") {
        return Err(bad(&format!("unsupported dtype {descr}")));
    }
    let fortran = dict_value(header, "fortran_order").ok_or_else(|| bad("missing fortran_order"))?;
    if fortran != "False" {
        return Err(bad("fortran-order arrays are not supported"));
    }
    let shape = parse_shape(header).ok_or_else(|| bad("malformed shape"))?;
    let count: usize = shape.iter().product();
    let payload = &bytes[start + hlen..];
    if payload.len() != 4 * count {
        return Err(bad(&format!(
            "payload holds {} bytes, shape needs {}",
            payload.len(),
            4 * count
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((shape, data))
}

fn dict_value<'a>(header: &'a str, key: &str) -> Option<&'a str> {
    let pat_sq = format!("'{key}':");
    let pat_dq = format!("\"{key}\":");
    let at = header
        .find(&pat_sq)
        .map(|i| i + pat_sq.len())
        .or_else(|| header.find(&pat_dq).map(|i| i + pat_dq.len()))?;
    let rest = header[at..].trim_start();
    let end = rest.find([',', '}']).unwrap_or(rest.len());
    Some(rest[..end].trim())
}

fn parse_shape(header: &str) -> Option<Vec<usize>> {
    let at = header.find("'shape':").or_else(|| header.find("\"shape\":"))?;
    let rest = &header[at..];
    let open = rest.find('(')?;
    let close = rest.find(')')?;
    rest[open + 1..close]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().ok())
        .collect()
}
