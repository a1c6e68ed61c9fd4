//! Portable storage of matrices, dataset manifests, and ROI atlases.
//!
//! The on-disk matrix format is fixed and bit-exact:
//!
//! ```text
//! bytes 0..8    magic "ENCX0001" ("ENCX" + 4-byte format tag; "0001" = float32)
//! bytes 8..12   rows, u32 little-endian
//! bytes 12..16  cols, u32 little-endian
//! bytes 16..20  meta length M, u32 little-endian
//! bytes 20..20+M  UTF-8 JSON object, string -> string
//! then          rows*cols float32 little-endian, row-major
//! ```
//!
//! Containers are immutable after construction and safe to share across
//! threads; reads and writes on distinct paths may run concurrently.

mod manifest;

pub use manifest::{DatasetManifest, FeatureRef, RoiAtlas, StoryEntry, TestStoryEntry};

use crate::error::{EncxError, Result};
use ndarray::Array2;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC_PREFIX: &[u8; 4] = b"ENCX";
pub const FORMAT_TAG: &[u8; 4] = b"0001";

/// Guard against corrupt headers: refuse matrices above this element count.
pub const DEFAULT_SIZE_CAP: u64 = 1 << 31;

/// A dense row-major float32 matrix with a string-to-string meta map.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixContainer {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
    meta: BTreeMap<String, String>,
}

impl MatrixContainer {
    pub fn new(
        rows: usize,
        cols: usize,
        data: Vec<f32>,
        meta: BTreeMap<String, String>,
    ) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(EncxError::ShapeMismatch(format!(
                "container data length {} does not equal rows*cols = {}",
                data.len(),
                rows * cols
            )));
        }
        Ok(MatrixContainer {
            rows,
            cols,
            data,
            meta,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        MatrixContainer {
            rows,
            cols,
            data: vec![0.0; rows * cols],
            meta: BTreeMap::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.meta
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    /// Convert to a float64 ndarray for numeric work.
    pub fn to_f64(&self) -> Array2<f64> {
        Array2::from_shape_vec(
            (self.rows, self.cols),
            self.data.iter().map(|&x| x as f64).collect(),
        )
        .expect("shape invariant holds")
    }

    /// Build from a float64 ndarray, narrowing to float32.
    pub fn from_f64(a: &Array2<f64>) -> Self {
        MatrixContainer {
            rows: a.nrows(),
            cols: a.ncols(),
            data: a.iter().map(|&x| x as f32).collect(),
            meta: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: &str) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }
}

/// Write a container to `path`. Output bytes are a deterministic function of
/// the container contents.
pub fn write_matrix(m: &MatrixContainer, path: impl AsRef<Path>) -> Result<()> {
    write_matrix_with_cap(m, path, DEFAULT_SIZE_CAP)
}

pub fn write_matrix_with_cap(
    m: &MatrixContainer,
    path: impl AsRef<Path>,
    cap: u64,
) -> Result<()> {
    let path = path.as_ref();
    let elements = m.rows as u64 * m.cols as u64;
    if elements > cap {
        return Err(EncxError::SizeCapExceeded {
            rows: m.rows as u64,
            cols: m.cols as u64,
            cap,
        });
    }
    if m.rows > u32::MAX as usize || m.cols > u32::MAX as usize {
        return Err(EncxError::SizeCapExceeded {
            rows: m.rows as u64,
            cols: m.cols as u64,
            cap: u32::MAX as u64,
        });
    }
    // BTreeMap keys serialize in sorted order, so the meta bytes are stable.
    let meta_json = serde_json::to_string(&m.meta)?;
    let meta_bytes = meta_json.as_bytes();
    if meta_bytes.len() > u32::MAX as usize {
        return Err(EncxError::InvalidArgument("meta map too large".into()));
    }

    let mut buf =
        Vec::with_capacity(20 + meta_bytes.len() + m.data.len() * 4);
    buf.extend_from_slice(MAGIC_PREFIX);
    buf.extend_from_slice(FORMAT_TAG);
    buf.extend_from_slice(&(m.rows as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols as u32).to_le_bytes());
    buf.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta_bytes);
    for x in &m.data {
        buf.extend_from_slice(&x.to_le_bytes());
    }

    let mut f = std::fs::File::create(path).map_err(|e| EncxError::io(path, e))?;
    f.write_all(&buf).map_err(|e| EncxError::io(path, e))?;
    Ok(())
}

/// Read a container written by [`write_matrix`].
pub fn read_matrix(path: impl AsRef<Path>) -> Result<MatrixContainer> {
    read_matrix_with_cap(path, DEFAULT_SIZE_CAP)
}

pub fn read_matrix_with_cap(path: impl AsRef<Path>, cap: u64) -> Result<MatrixContainer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| EncxError::io(path, e))?;
    if bytes.len() < 20 {
        return Err(EncxError::MalformedHeader {
            path: path.into(),
            detail: format!("file is {} bytes, header needs 20", bytes.len()),
        });
    }
    if &bytes[0..4] != MAGIC_PREFIX {
        return Err(EncxError::MalformedHeader {
            path: path.into(),
            detail: "magic prefix is not ENCX".into(),
        });
    }
    if &bytes[4..8] != FORMAT_TAG {
        return Err(EncxError::DtypeMismatch {
            path: path.into(),
            found: String::from_utf8_lossy(&bytes[4..8]).into_owned(),
        });
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as u64;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as u64;
    let meta_len = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as u64;
    if rows * cols > cap {
        return Err(EncxError::SizeCapExceeded { rows, cols, cap });
    }
    let payload_offset = 20 + meta_len;
    let expected = payload_offset + rows * cols * 4;
    if (bytes.len() as u64) < expected {
        return Err(EncxError::TruncatedPayload {
            path: path.into(),
            expected,
            found: bytes.len() as u64,
        });
    }
    let meta_bytes = &bytes[20..payload_offset as usize];
    let meta_str = std::str::from_utf8(meta_bytes).map_err(|_| EncxError::MalformedHeader {
        path: path.into(),
        detail: "meta block is not valid UTF-8".into(),
    })?;
    let meta: BTreeMap<String, String> =
        serde_json::from_str(meta_str).map_err(|e| EncxError::MalformedHeader {
            path: path.into(),
            detail: format!("meta block is not a string map: {e}"),
        })?;

    let n = (rows * cols) as usize;
    let mut data = Vec::with_capacity(n);
    let mut cursor = &bytes[payload_offset as usize..];
    let mut quad = [0u8; 4];
    for _ in 0..n {
        cursor
            .read_exact(&mut quad)
            .map_err(|e| EncxError::io(path, e))?;
        data.push(f32::from_le_bytes(quad));
    }

    Ok(MatrixContainer {
        rows: rows as usize,
        cols: cols as usize,
        data,
        meta,
    })
}

/// Meta key listing the constant columns zeroed by [`zscore_responses`].
pub const META_CONSTANT_COLS: &str = "zscore_constant_cols";

/// Normalize every column to zero mean and unit variance across rows.
///
/// Variance uses the unbiased (n-1) estimator. Columns with zero variance are
/// mapped to all-zeros and listed in the output meta under
/// [`META_CONSTANT_COLS`], so downstream correlation code never sees NaN.
pub fn zscore_responses(m: &MatrixContainer) -> Result<MatrixContainer> {
    if m.rows < 2 {
        return Err(EncxError::InvalidArgument(format!(
            "zscore needs at least 2 rows, got {}",
            m.rows
        )));
    }
    let t = m.rows;
    let v = m.cols;
    let mut out = vec![0.0f32; t * v];
    let mut constant_cols = Vec::new();
    for c in 0..v {
        let mut mean = 0.0f64;
        for r in 0..t {
            mean += m.get(r, c) as f64;
        }
        mean /= t as f64;
        let mut ss = 0.0f64;
        for r in 0..t {
            let d = m.get(r, c) as f64 - mean;
            ss += d * d;
        }
        let var = ss / (t - 1) as f64;
        if var <= 0.0 {
            constant_cols.push(c.to_string());
            continue; // column stays all-zero
        }
        let sd = var.sqrt();
        for r in 0..t {
            out[r * v + c] = ((m.get(r, c) as f64 - mean) / sd) as f32;
        }
    }
    let mut meta = m.meta.clone();
    if !constant_cols.is_empty() {
        meta.insert(META_CONSTANT_COLS.into(), constant_cols.join(","));
    }
    MatrixContainer::new(t, v, out, meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn sample_container() -> MatrixContainer {
        let mut meta = BTreeMap::new();
        meta.insert("story".to_string(), "alpha".to_string());
        meta.insert("tr".to_string(), "2.0".to_string());
        MatrixContainer::new(2, 3, vec![1.0, -2.5, 3.25, 0.0, -0.0, 7.5], meta).unwrap()
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.encx");
        let m = sample_container();
        write_matrix(&m, &path).unwrap();
        let r = read_matrix(&path).unwrap();
        assert_eq!(r.rows(), m.rows());
        assert_eq!(r.cols(), m.cols());
        assert_eq!(r.meta(), m.meta());
        for (a, b) in m.data().iter().zip(r.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn zero_row_container_roundtrips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.encx");
        let m = MatrixContainer::new(0, 5, vec![], BTreeMap::new()).unwrap();
        write_matrix(&m, &path).unwrap();
        let r = read_matrix(&path).unwrap();
        assert_eq!(r.rows(), 0);
        assert_eq!(r.cols(), 5);
        assert!(r.data().is_empty());
    }

    #[test]
    fn truncated_payload_is_reported() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("trunc.encx");
        let m = sample_container();
        write_matrix(&m, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let half = bytes.len() - m.data().len() * 2; // drop half the payload
        std::fs::write(&path, &bytes[..half]).unwrap();
        match read_matrix(&path) {
            Err(EncxError::TruncatedPayload { .. }) => {}
            other => panic!("expected TruncatedPayload, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_malformed_header() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.encx");
        std::fs::write(&path, b"NOPE0001....................").unwrap();
        match read_matrix(&path) {
            Err(EncxError::MalformedHeader { .. }) => {}
            other => panic!("expected MalformedHeader, got {other:?}"),
        }
    }

    #[test]
    fn wrong_format_tag_is_dtype_mismatch() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("v2.encx");
        let m = sample_container();
        write_matrix(&m, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(b"0002");
        std::fs::write(&path, &bytes).unwrap();
        match read_matrix(&path) {
            Err(EncxError::DtypeMismatch { found, .. }) => assert_eq!(found, "0002"),
            other => panic!("expected DtypeMismatch, got {other:?}"),
        }
    }

    #[test]
    fn identical_containers_write_identical_bytes() {
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("a.encx");
        let p2 = dir.path().join("b.encx");
        write_matrix(&sample_container(), &p1).unwrap();
        write_matrix(&sample_container(), &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn unicode_meta_keys_are_preserved() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("uni.encx");
        let mut meta = BTreeMap::new();
        meta.insert("história_ßẞ".to_string(), "värde-値".to_string());
        let m = MatrixContainer::new(1, 1, vec![1.0], meta.clone()).unwrap();
        write_matrix(&m, &path).unwrap();
        let r = read_matrix(&path).unwrap();
        assert_eq!(r.meta(), &meta);
    }

    #[test]
    fn size_cap_rejected_on_write() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cap.encx");
        let m = MatrixContainer::new(4, 4, vec![0.0; 16], BTreeMap::new()).unwrap();
        match write_matrix_with_cap(&m, &path, 15) {
            Err(EncxError::SizeCapExceeded { .. }) => {}
            other => panic!("expected SizeCapExceeded, got {other:?}"),
        }
    }

    #[test]
    fn size_cap_guards_corrupt_header_on_read() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("corrupt.encx");
        let m = sample_container();
        write_matrix(&m, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&u32::MAX.to_le_bytes()); // absurd row count
        std::fs::write(&path, &bytes).unwrap();
        match read_matrix(&path) {
            Err(EncxError::SizeCapExceeded { .. }) => {}
            other => panic!("expected SizeCapExceeded, got {other:?}"),
        }
    }

    #[test]
    fn zscore_simple_column() {
        let m = MatrixContainer::new(3, 1, vec![1.0, 2.0, 3.0], BTreeMap::new()).unwrap();
        let z = zscore_responses(&m).unwrap();
        // Unbiased sd of [1,2,3] is 1, so the column becomes [-1, 0, 1].
        assert_eq!(z.data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn zscore_constant_column_becomes_zeros_with_flag() {
        let m = MatrixContainer::new(3, 2, vec![5.0, 1.0, 5.0, 2.0, 5.0, 3.0], BTreeMap::new())
            .unwrap();
        let z = zscore_responses(&m).unwrap();
        assert_eq!(z.get(0, 0), 0.0);
        assert_eq!(z.get(1, 0), 0.0);
        assert_eq!(z.get(2, 0), 0.0);
        assert_eq!(z.meta().get(META_CONSTANT_COLS).unwrap(), "0");
    }

    #[test]
    fn zscore_rejects_single_row() {
        let m = MatrixContainer::new(1, 2, vec![1.0, 2.0], BTreeMap::new()).unwrap();
        assert!(zscore_responses(&m).is_err());
    }

    #[test]
    fn zscore_random_matrix_has_unit_moments() {
        let mut rng = crate::rng::SplitMix64::new(9);
        let (t, v) = (100, 10);
        let data: Vec<f32> = (0..t * v)
            .map(|_| rng.uniform(-4.0, 9.0) as f32)
            .collect();
        let m = MatrixContainer::new(t, v, data, BTreeMap::new()).unwrap();
        let z = zscore_responses(&m).unwrap();
        // Independent recomputation of the moments, scalar loop.
        for c in 0..v {
            let mut mean = 0.0f64;
            for r in 0..t {
                mean += z.get(r, c) as f64;
            }
            mean /= t as f64;
            let mut var = 0.0f64;
            for r in 0..t {
                let d = z.get(r, c) as f64 - mean;
                var += d * d;
            }
            var /= (t - 1) as f64;
            assert!(mean.abs() < 1e-6, "col {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-5, "col {c} var {var}");
        }
    }

    #[test]
    fn zscore_is_idempotent() {
        let mut rng = crate::rng::SplitMix64::new(10);
        let (t, v) = (50, 4);
        let data: Vec<f32> = (0..t * v).map(|_| rng.uniform(0.0, 3.0) as f32).collect();
        let m = MatrixContainer::new(t, v, data, BTreeMap::new()).unwrap();
        let z1 = zscore_responses(&m).unwrap();
        let z2 = zscore_responses(&z1).unwrap();
        for (a, b) in z1.data().iter().zip(z2.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn roundtrip_property(
            rows in 0usize..6,
            cols in 0usize..6,
            seed in 0u64..1000,
            key in "[a-z]{1,8}",
            val in "[ -~]{0,12}",
        ) {
            let dir = tempdir().unwrap();
            let path = dir.path().join("p.encx");
            let mut rng = crate::rng::SplitMix64::new(seed);
            let data: Vec<f32> = (0..rows * cols)
                .map(|_| rng.uniform(-1e6, 1e6) as f32)
                .collect();
            let mut meta = BTreeMap::new();
            meta.insert(key, val);
            let m = MatrixContainer::new(rows, cols, data, meta).unwrap();
            write_matrix(&m, &path).unwrap();
            let r = read_matrix(&path).unwrap();
            prop_assert_eq!(&m, &r);
        }
    }
}
