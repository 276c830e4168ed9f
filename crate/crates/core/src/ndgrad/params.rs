//! Flattened parameter vectors and their on-disk format.
//!
//! All model parameters live in one contiguous `Vec<f64>`; a [`ParamLayout`]
//! records how named tensors map into it. Snapshots share the layout via
//! `Arc`, so capturing a posterior sample costs one vector clone.
//!
//! # GSMP binary format
//!
//! Little-endian throughout:
//!
//! ```text
//! magic            4 bytes  "GSMP"
//! format version   u32      currently 1
//! P                u64      parameter count
//! values           P x f64
//! entry count      u64
//! per entry:
//!   name length    u16, then that many bytes of UTF-8
//!   rank           u8
//!   dims           rank x u64
//!   offset         u64
//! ```

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ndgrad::tensor::Tensor;

const MAGIC: &[u8; 4] = b"GSMP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    entries: Vec<LayoutEntry>,
    total: usize,
}

impl ParamLayout {
    /// Builds a layout from (name, shape) pairs, assigning contiguous
    /// offsets in order.
    pub fn new(tensors: Vec<(String, Vec<usize>)>) -> Self {
        let mut entries = Vec::with_capacity(tensors.len());
        let mut offset = 0;
        for (name, shape) in tensors {
            let len: usize = shape.iter().product();
            entries.push(LayoutEntry {
                name,
                shape,
                offset,
            });
            offset += len;
        }
        ParamLayout {
            entries,
            total: offset,
        }
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> &LayoutEntry {
        &self.entries[index]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<ParamLayout>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        ParamVector {
            values: vec![0.0; layout.total_len()],
            layout,
        }
    }

    pub fn from_values(layout: Arc<ParamLayout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(Error::Length {
                what: "parameter vector",
                expected: layout.total_len(),
                got: values.len(),
            });
        }
        Ok(ParamVector { values, layout })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    /// Borrow the slice backing one named tensor.
    pub fn slice(&self, entry_index: usize) -> &[f64] {
        let e = self.layout.entry(entry_index);
        &self.values[e.offset..e.offset + e.len()]
    }

    pub fn slice_mut(&mut self, entry_index: usize) -> &mut [f64] {
        let e = self.layout.entry(entry_index).clone();
        &mut self.values[e.offset..e.offset + e.len()]
    }

    /// Copy one named tensor out of the flat vector.
    pub fn unflatten(&self, entry_index: usize) -> Tensor {
        let e = self.layout.entry(entry_index);
        Tensor::new(e.shape.clone(), self.slice(entry_index).to_vec())
            .expect("layout entry is internally consistent")
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn write_gsmp(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + self.values.len() * 8);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&(self.layout.entries.len() as u64).to_le_bytes());
        for e in &self.layout.entries {
            buf.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            buf.extend_from_slice(e.name.as_bytes());
            buf.push(e.shape.len() as u8);
            for &d in &e.shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            buf.extend_from_slice(&(e.offset as u64).to_le_bytes());
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_gsmp(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut r = Cursor {
            bytes: &bytes,
            pos: 0,
            path,
        };

        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(r.format_err(format!("bad magic {magic:02x?}, expected \"GSMP\"")));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(r.format_err(format!("unsupported version {version}")));
        }
        let p = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
        let mut values = Vec::with_capacity(p);
        for _ in 0..p {
            values.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
        let count = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
        let mut tensors = Vec::with_capacity(count);
        let mut expected_offset = 0usize;
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| r.format_err("layout name is not UTF-8".into()))?;
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize);
            }
            let offset = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
            if offset != expected_offset {
                return Err(r.format_err(format!(
                    "non-contiguous layout: entry `{name}` at offset {offset}, expected {expected_offset}"
                )));
            }
            expected_offset += shape.iter().product::<usize>();
            tensors.push((name, shape));
        }
        if expected_offset != p {
            return Err(r.format_err(format!(
                "layout covers {expected_offset} values but header declares {p}"
            )));
        }
        if r.pos != bytes.len() {
            return Err(r.format_err("trailing bytes after layout table".into()));
        }
        ParamVector::from_values(Arc::new(ParamLayout::new(tensors)), values)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                offset: self.pos as u64,
                what: format!(
                    "truncated: needed {n} more bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn format_err(&self, what: String) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            what,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_layout() -> Arc<ParamLayout> {
        Arc::new(ParamLayout::new(vec![
            ("fc1.w".into(), vec![3, 2]),
            ("fc1.b".into(), vec![3]),
            ("fc2.w".into(), vec![1, 3]),
        ]))
    }

    #[test]
    fn layout_offsets_are_contiguous() {
        let l = demo_layout();
        assert_eq!(l.total_len(), 6 + 3 + 3);
        assert_eq!(l.entry(0).offset, 0);
        assert_eq!(l.entry(1).offset, 6);
        assert_eq!(l.entry(2).offset, 9);
    }

    #[test]
    fn flatten_unflatten_roundtrip() {
        let l = demo_layout();
        let values: Vec<f64> = (0..12).map(|i| i as f64 * 0.5).collect();
        let p = ParamVector::from_values(l, values.clone()).unwrap();
        let t = p.unflatten(1);
        assert_eq!(t.shape(), &[3]);
        assert_eq!(t.data(), &values[6..9]);
        // reassemble
        let mut rebuilt = vec![0.0; 12];
        for i in 0..3 {
            let e = p.layout().entry(i).clone();
            rebuilt[e.offset..e.offset + e.len()].copy_from_slice(p.slice(i));
        }
        assert_eq!(rebuilt, values);
    }

    #[test]
    fn gsmp_roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("theta.bin");
        let l = demo_layout();
        let values: Vec<f64> = (0..12).map(|i| (i as f64).exp() * 1e-3).collect();
        let p = ParamVector::from_values(l, values).unwrap();
        p.write_gsmp(&path).unwrap();
        let q = ParamVector::read_gsmp(&path).unwrap();
        assert_eq!(p.values(), q.values());
        assert_eq!(p.layout().entries(), q.layout().entries());
        let path2 = dir.path().join("theta2.bin");
        q.write_gsmp(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn gsmp_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOPE").unwrap();
        match ParamVector::read_gsmp(&path) {
            Err(Error::Format { what, .. }) => assert!(what.contains("magic"), "{what}"),
            other => panic!("expected format error, got {other:?}"),
        }

        let l = demo_layout();
        let p = ParamVector::zeros(l);
        let good = dir.path().join("good.bin");
        p.write_gsmp(&good).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        let cut = dir.path().join("cut.bin");
        std::fs::write(&cut, &bytes[..bytes.len() - 5]).unwrap();
        match ParamVector::read_gsmp(&cut) {
            Err(Error::Format { offset, what, .. }) => {
                assert!(what.contains("truncated") || what.contains("trailing"), "{what} at {offset}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
