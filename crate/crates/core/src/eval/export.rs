//! Embedding files: canonical CSV and a compact little-endian binary.

use std::fmt::Write as _;

use super::{Branch, EmbeddingSet};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"CLAWSEMB";
const BIN_VERSION: u32 = 1;

fn csv_err(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "embeddings csv",
        detail: detail.into(),
    }
}

fn bin_err(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "embeddings binary",
        detail: detail.into(),
    }
}

/// First line is `# checkpoint_id=<id> branch=<branch>[ <extra>]`, then the
/// header `sample_id,label,f0,…`. Floats use the shortest round-trip form.
pub fn write_embeddings_csv(set: &EmbeddingSet, extra_provenance: &str) -> String {
    let mut out = String::new();
    write!(out, "# checkpoint_id={} branch={}", set.checkpoint_id, set.branch.name()).unwrap();
    if !extra_provenance.is_empty() {
        write!(out, " {extra_provenance}").unwrap();
    }
    out.push('\n');
    out.push_str("sample_id,label");
    for j in 0..set.dim() {
        write!(out, ",f{j}").unwrap();
    }
    out.push('\n');
    for (i, id) in set.ids.iter().enumerate() {
        out.push_str(id);
        out.push(',');
        if let Some(l) = set.labels[i] {
            write!(out, "{l}").unwrap();
        }
        for v in set.matrix.row(i) {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn read_embeddings_csv(text: &str) -> Result<EmbeddingSet> {
    let mut lines = text.lines();
    let prov = lines
        .next()
        .and_then(|l| l.strip_prefix("# "))
        .ok_or_else(|| csv_err("missing provenance line"))?;
    let mut checkpoint_id = None;
    let mut branch = None;
    for field in prov.split(' ') {
        match field.split_once('=') {
            Some(("checkpoint_id", v)) => checkpoint_id = Some(v.to_string()),
            Some(("branch", v)) => branch = Some(Branch::parse(v).map_err(|e| csv_err(e.to_string()))?),
            _ => {}
        }
    }
    let header = lines.next().ok_or_else(|| csv_err("missing header"))?;
    let cols: Vec<&str> = header.split(',').collect();
    let d = cols.len().saturating_sub(2);
    let expected: Vec<String> = ["sample_id".to_string(), "label".to_string()]
        .into_iter()
        .chain((0..d).map(|j| format!("f{j}")))
        .collect();
    if d == 0 || cols != expected {
        return Err(csv_err(format!("bad header {header:?}")));
    }
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != d + 2 {
            return Err(csv_err(format!("row for {:?} has {} fields", f[0], f.len())));
        }
        ids.push(f[0].to_string());
        labels.push(if f[1].is_empty() {
            None
        } else {
            Some(f[1].parse().map_err(|_| csv_err(format!("bad label {:?}", f[1])))?)
        });
        for v in &f[2..] {
            data.push(v.parse::<f64>().map_err(|_| csv_err(format!("bad value {v:?}")))?);
        }
    }
    if ids.is_empty() {
        return Err(csv_err("no rows"));
    }
    Ok(EmbeddingSet {
        matrix: Tensor::new(vec![ids.len(), d], data)?,
        ids,
        labels,
        branch: branch.ok_or_else(|| csv_err("provenance lacks branch"))?,
        checkpoint_id: checkpoint_id.ok_or_else(|| csv_err("provenance lacks checkpoint_id"))?,
    })
}

/// Layout: magic, u32 version, u64 rows, u64 dim, u8 branch, length-prefixed
/// checkpoint id, then per row a length-prefixed id, an i64 label (−1 when
/// absent) and `dim` f64 values. All integers little-endian.
pub fn write_embeddings_bin(set: &EmbeddingSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&BIN_VERSION.to_le_bytes());
    out.extend_from_slice(&(set.len() as u64).to_le_bytes());
    out.extend_from_slice(&(set.dim() as u64).to_le_bytes());
    out.push(match set.branch {
        Branch::Full => 0,
        Branch::Crop => 1,
    });
    let put_str = |out: &mut Vec<u8>, s: &str| {
        out.extend_from_slice(&(s.len() as u32).to_le_bytes());
        out.extend_from_slice(s.as_bytes());
    };
    put_str(&mut out, &set.checkpoint_id);
    for (i, id) in set.ids.iter().enumerate() {
        put_str(&mut out, id);
        let label = set.labels[i].map_or(-1, |l| l as i64);
        out.extend_from_slice(&label.to_le_bytes());
        for v in set.matrix.row(i) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(bin_err("truncated"));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn string(&mut self) -> Result<String> {
        let len = u32::from_le_bytes(self.array()?) as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| bin_err("non-utf8 string"))
    }
}

pub fn read_embeddings_bin(bytes: &[u8]) -> Result<EmbeddingSet> {
    let mut r = Reader { bytes };
    if r.take(8)? != MAGIC {
        return Err(bin_err("bad magic"));
    }
    let version = u32::from_le_bytes(r.array()?);
    if version != BIN_VERSION {
        return Err(bin_err(format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(r.array()?) as usize;
    let d = u64::from_le_bytes(r.array()?) as usize;
    let branch = match r.array::<1>()?[0] {
        0 => Branch::Full,
        1 => Branch::Crop,
        b => return Err(bin_err(format!("bad branch byte {b}"))),
    };
    let checkpoint_id = r.string()?;
    let mut ids = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n.saturating_mul(d).min(1 << 24));
    for _ in 0..n {
        ids.push(r.string()?);
        let label = i64::from_le_bytes(r.array()?);
        labels.push(usize::try_from(label).ok());
        for _ in 0..d {
            data.push(f64::from_le_bytes(r.array()?));
        }
    }
    if !r.bytes.is_empty() {
        return Err(bin_err("trailing bytes"));
    }
    Ok(EmbeddingSet {
        matrix: Tensor::new(vec![n, d], data)?,
        ids,
        labels,
        branch,
        checkpoint_id,
    })
}
