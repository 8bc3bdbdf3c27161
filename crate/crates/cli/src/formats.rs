//! Binary tensor and checkpoint files, JSON-lines manifests and reports.
//!
//! Everything is little-endian. A tensor file is
//! `"DTNS" | version u8 | dtype u8 | ndim u8 | reserved u8 | ndim × u64 | payload`;
//! a checkpoint is `"DCKP" | version u8 | count u32 | entries | crc32`, each
//! entry being `name_len u16 | name | tensor file`.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use vpr_core::retrieval::PlaceRecord;
use vpr_core::{Error, ParamStore, Result};
use vpr_tensor::{numel, DType, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"DTNS";
pub const TENSOR_VERSION: u8 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DCKP";
pub const CHECKPOINT_VERSION: u8 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Write through a sibling temporary file so readers never see a partial file.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn encode_tensor(t: &Tensor, out: &mut Vec<u8>) -> Result<()> {
    if t.ndim() > u8::MAX as usize {
        return Err(Error::Data(format!("{} dimensions do not fit a tensor file", t.ndim())));
    }
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(TENSOR_VERSION);
    out.push(match t.dtype() {
        DType::F32 => DTYPE_F32,
        DType::F64 => DTYPE_F64,
    });
    out.push(t.ndim() as u8);
    out.push(0);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    match t.dtype() {
        DType::F32 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => t.data().iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(())
}

/// Bounds-checked reader that names the file and field on failure.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::format(
                    self.path,
                    field,
                    format!(
                        "truncated: need {n} bytes at offset {}, file has {}",
                        self.pos,
                        self.bytes.len()
                    ),
                )
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self, what: &str) -> Result<Tensor> {
        let f = |name: &str| format!("{what}{name}");
        let magic = self.take(4, &f("magic"))?;
        if magic != TENSOR_MAGIC {
            return Err(Error::format(
                self.path,
                f("magic"),
                format!("expected DTNS, found {magic:?}"),
            ));
        }
        let version = self.u8(&f("version"))?;
        if version != TENSOR_VERSION {
            return Err(Error::format(
                self.path,
                f("version"),
                format!("unsupported version {version}"),
            ));
        }
        let dtype = match self.u8(&f("dtype"))? {
            DTYPE_F32 => DType::F32,
            DTYPE_F64 => DType::F64,
            other => {
                return Err(Error::format(
                    self.path,
                    f("dtype"),
                    format!("unknown dtype code {other}"),
                ))
            }
        };
        let ndim = self.u8(&f("ndim"))? as usize;
        self.u8(&f("reserved"))?;
        let mut shape = Vec::with_capacity(ndim);
        for i in 0..ndim {
            let e = self.u64(&f(&format!("extents[{i}]")))?;
            shape.push(
                usize::try_from(e).map_err(|_| Error::format(self.path, f("extents"), "extent overflows usize"))?,
            );
        }
        let bytes = shape
            .iter()
            .try_fold(dtype.size_in_bytes(), |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::format(self.path, f("extents"), "payload size overflows"))?;
        let payload = self.take(bytes, &f("payload"))?;
        let data: Vec<f64> = match dtype {
            DType::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            DType::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        debug_assert_eq!(data.len(), numel(&shape));
        Ok(Tensor::new(&shape, data, dtype)?)
    }

    fn finish(&self, field: &str) -> Result<()> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(Error::format(
                self.path,
                field,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ))
        }
    }
}

/// Parse a complete tensor file image; `path` is only used in error messages.
pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut c = Cursor { bytes, pos: 0, path };
    let t = c.tensor("")?;
    c.finish("payload")?;
    Ok(t)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 8 * t.ndim() + t.len() * t.dtype().size_in_bytes());
    encode_tensor(t, &mut buf)?;
    write_bytes(path, &buf)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&read_bytes(path)?, path)
}

pub fn encode_checkpoint(entries: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    let count = u32::try_from(entries.len()).map_err(|_| Error::Data("too many checkpoint entries".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in entries {
        if !seen.insert(name.as_str()) {
            return Err(Error::Data(format!("duplicate checkpoint entry `{name}`")));
        }
        let len = u16::try_from(name.len()).map_err(|_| Error::Data(format!("entry name `{name}` too long")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        encode_tensor(t, &mut out)?;
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < 4 {
        return Err(Error::format(path, "crc32", "file too short for a checksum"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let mut c = Cursor {
        bytes: body,
        pos: 0,
        path,
    };
    let magic = c.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "magic", format!("expected DCKP, found {magic:?}")));
    }
    let computed = crc32fast::hash(body);
    if computed != stored {
        return Err(Error::format(
            path,
            "crc32",
            format!("checksum mismatch: stored {stored:08x}, computed {computed:08x}"),
        ));
    }
    let version = c.u8("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, "version", format!("unsupported version {version}")));
    }
    let count = c.u32("count")?;
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for i in 0..count {
        let len = c.u16(&format!("entries[{i}].name_len"))? as usize;
        let raw = c.take(len, &format!("entries[{i}].name"))?;
        let name = std::str::from_utf8(raw)
            .map_err(|_| Error::format(path, format!("entries[{i}].name"), "not valid UTF-8"))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::format(
                path,
                format!("entries[{i}].name"),
                format!("duplicate entry `{name}`"),
            ));
        }
        let t = c.tensor(&format!("entries[{i}]({name})."))?;
        entries.push((name, t));
    }
    c.finish("entries")?;
    Ok(entries)
}

pub fn write_checkpoint(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    write_bytes(path, &encode_checkpoint(entries)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode_checkpoint(&read_bytes(path)?, path)
}

/// Every parameter in store order.
pub fn store_entries(store: &ParamStore) -> Vec<(String, Tensor)> {
    store.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
}

/// Overwrite the parameters of `store` from checkpoint entries. Every
/// parameter must be present with a matching shape; extra entries are an
/// error too so a checkpoint from another configuration is caught.
pub fn load_into(store: &mut ParamStore, entries: Vec<(String, Tensor)>, path: &Path) -> Result<()> {
    let names: HashSet<&str> = entries.iter().map(|(n, _)| n.as_str()).collect();
    if let Some(missing) = store.iter().find(|p| !names.contains(p.name.as_str())) {
        return Err(Error::format(path, &missing.name, "parameter missing from checkpoint"));
    }
    for (name, t) in entries {
        let expected = store
            .get(&name)
            .ok_or_else(|| Error::format(path, &name, "checkpoint entry is not a model parameter"))?;
        if expected.value.shape() != t.shape() {
            return Err(Error::format(
                path,
                &name,
                format!("shape {:?}, model expects {:?}", t.shape(), expected.value.shape()),
            ));
        }
        store.assign(&name, t)?;
    }
    Ok(())
}

pub fn write_manifest(path: &Path, records: &[PlaceRecord]) -> Result<()> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?);
        s.push('\n');
    }
    write_bytes(path, s.as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<Vec<PlaceRecord>> {
    let text = String::from_utf8(read_bytes(path)?).map_err(|_| Error::format(path, "manifest", "not valid UTF-8"))?;
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let field = format!("line {}", i + 1);
        let r: PlaceRecord = serde_json::from_str(line).map_err(|e| Error::format(path, &field, e.to_string()))?;
        r.validate().map_err(|e| Error::format(path, &field, e.to_string()))?;
        if !ids.insert(r.id) {
            return Err(Error::format(path, &field, format!("duplicate id {}", r.id)));
        }
        records.push(r);
    }
    Ok(records)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, "json", e.to_string()))
}
