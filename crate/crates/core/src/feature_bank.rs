//! Feature banks and the `FBNK1` container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FBNK1"                     5 bytes magic
//! u32                         manifest length in bytes
//! manifest                    UTF-8 JSON (BankManifest)
//! f32 x N*dim                 one row-major matrix per tap point, manifest order
//! u16 x N                     labels, if has_labels
//! f32 x N*C                   original predictions, if has_original_preds
//! u16 x N                     domain ids, if domain_ids_present
//! ```

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, SeplError};

pub const BANK_MAGIC: &[u8; 5] = b"FBNK1";
const ROW_SUM_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapPoint {
    pub name: String,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankManifest {
    pub n_samples: usize,
    pub n_classes: usize,
    pub tap_points: Vec<TapPoint>,
    pub has_labels: bool,
    pub has_original_preds: bool,
    pub domain_ids_present: bool,
    pub dtype: String,
}

impl BankManifest {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 1 {
            return Err(invalid!("manifest: n_samples must be >= 1"));
        }
        if self.n_classes < 2 {
            return Err(invalid!("manifest: n_classes must be >= 2, got {}", self.n_classes));
        }
        if self.n_classes > u16::MAX as usize {
            return Err(invalid!("manifest: n_classes {} does not fit u16 labels", self.n_classes));
        }
        if self.dtype != "f32le" {
            return Err(invalid!("manifest: unsupported dtype {:?}", self.dtype));
        }
        let mut seen = HashSet::new();
        for tap in &self.tap_points {
            if tap.dim < 1 {
                return Err(invalid!("manifest: tap point '{}' has dim 0", tap.name));
            }
            if !seen.insert(tap.name.as_str()) {
                return Err(invalid!("manifest: duplicate tap point name '{}'", tap.name));
            }
        }
        Ok(())
    }
}

/// Per-sample features from several tap points of a frozen backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    pub manifest: BankManifest,
    /// One `N x dim` matrix per tap point, in manifest order.
    pub features: Vec<Array2<f32>>,
    /// Possibly noisy class labels.
    pub labels: Option<Vec<u16>>,
    /// `N x C` softmax output of the backbone's own head.
    pub original_preds: Option<Array2<f32>>,
    pub domain_ids: Option<Vec<u16>>,
}

impl FeatureBank {
    /// Builds a bank from its parts, deriving the manifest, and validates it.
    pub fn new(
        tap_names: Vec<String>,
        features: Vec<Array2<f32>>,
        n_classes: usize,
        labels: Option<Vec<u16>>,
        original_preds: Option<Array2<f32>>,
        domain_ids: Option<Vec<u16>>,
    ) -> Result<Self> {
        if tap_names.len() != features.len() {
            return Err(invalid!(
                "{} tap names for {} feature matrices",
                tap_names.len(),
                features.len()
            ));
        }
        let n_samples = features
            .first()
            .map(|f| f.nrows())
            .or_else(|| labels.as_ref().map(Vec::len))
            .unwrap_or(0);
        let tap_points = tap_names
            .into_iter()
            .zip(&features)
            .map(|(name, f)| TapPoint { name, dim: f.ncols() })
            .collect();
        let manifest = BankManifest {
            n_samples,
            n_classes,
            tap_points,
            has_labels: labels.is_some(),
            has_original_preds: original_preds.is_some(),
            domain_ids_present: domain_ids.is_some(),
            dtype: "f32le".to_string(),
        };
        let bank = FeatureBank { manifest, features, labels, original_preds, domain_ids };
        bank.validate()?;
        Ok(bank)
    }

    pub fn n_samples(&self) -> usize {
        self.manifest.n_samples
    }

    pub fn n_classes(&self) -> usize {
        self.manifest.n_classes
    }

    pub fn n_taps(&self) -> usize {
        self.manifest.tap_points.len()
    }

    pub fn tap_index(&self, name: &str) -> Option<usize> {
        self.manifest.tap_points.iter().position(|t| t.name == name)
    }

    /// Features of one tap point widened to `f64`.
    pub fn tap_features(&self, tap: usize) -> Result<Array2<f64>> {
        let f = self
            .features
            .get(tap)
            .ok_or_else(|| invalid!("tap index {tap} out of range ({} taps)", self.n_taps()))?;
        Ok(f.mapv(f64::from))
    }

    pub fn original_preds_f64(&self) -> Option<Array2<f64>> {
        self.original_preds.as_ref().map(|p| p.mapv(f64::from))
    }

    /// Checks every bank invariant.
    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        m.validate()?;
        let n = m.n_samples;
        if self.features.len() != m.tap_points.len() {
            return Err(invalid!(
                "manifest lists {} tap points but bank holds {} matrices",
                m.tap_points.len(),
                self.features.len()
            ));
        }
        for (tap, f) in m.tap_points.iter().zip(&self.features) {
            if f.nrows() != n || f.ncols() != tap.dim {
                return Err(invalid!(
                    "tap point '{}' is {}x{}, expected {}x{}",
                    tap.name,
                    f.nrows(),
                    f.ncols(),
                    n,
                    tap.dim
                ));
            }
            if let Some(pos) = f.iter().position(|v| !v.is_finite()) {
                return Err(invalid!(
                    "tap point '{}' has non-finite value at row {}",
                    tap.name,
                    pos / tap.dim
                ));
            }
        }
        if m.has_labels != self.labels.is_some() {
            return Err(invalid!("manifest has_labels disagrees with payload"));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(invalid!("labels have {} rows, expected {n}", labels.len()));
            }
            if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= m.n_classes) {
                return Err(invalid!("label {l} at row {i} outside [0, {})", m.n_classes));
            }
        }
        if m.has_original_preds != self.original_preds.is_some() {
            return Err(invalid!("manifest has_original_preds disagrees with payload"));
        }
        if let Some(p) = &self.original_preds {
            if p.nrows() != n || p.ncols() != m.n_classes {
                return Err(invalid!(
                    "original_preds is {}x{}, expected {}x{}",
                    p.nrows(),
                    p.ncols(),
                    n,
                    m.n_classes
                ));
            }
            for (i, row) in p.axis_iter(Axis(0)).enumerate() {
                if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(invalid!("original_preds row {i} has a negative or non-finite entry"));
                }
                let s: f64 = row.iter().map(|&v| f64::from(v)).sum();
                if (s - 1.0).abs() > ROW_SUM_TOL {
                    return Err(invalid!("original_preds row {i} sums to {s}"));
                }
            }
        }
        if m.domain_ids_present != self.domain_ids.is_some() {
            return Err(invalid!("manifest domain_ids_present disagrees with payload"));
        }
        if let Some(d) = &self.domain_ids {
            if d.len() != n {
                return Err(invalid!("domain_ids have {} rows, expected {n}", d.len()));
            }
        }
        Ok(())
    }

    /// Encodes the bank as an `FBNK1` byte stream.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let manifest = serde_json::to_vec(&self.manifest)?;
        let mut out = Vec::with_capacity(9 + manifest.len() + self.payload_len());
        out.extend_from_slice(BANK_MAGIC);
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        for f in &self.features {
            f.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        if let Some(labels) = &self.labels {
            labels.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        if let Some(p) = &self.original_preds {
            p.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        if let Some(d) = &self.domain_ids {
            d.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        Ok(out)
    }

    fn payload_len(&self) -> usize {
        let m = &self.manifest;
        let n = m.n_samples;
        let mut len: usize = m.tap_points.iter().map(|t| n * t.dim * 4).sum();
        if m.has_labels {
            len += n * 2;
        }
        if m.has_original_preds {
            len += n * m.n_classes * 4;
        }
        if m.domain_ids_present {
            len += n * 2;
        }
        len
    }

    /// Decodes and validates an `FBNK1` byte stream.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < BANK_MAGIC.len() || &bytes[..BANK_MAGIC.len()] != BANK_MAGIC {
            return Err(SeplError::Format("bad magic: not an FBNK1 feature bank".into()));
        }
        let (manifest, mut cursor) = read_json_header::<BankManifest>(bytes, BANK_MAGIC.len())?;
        manifest.validate()?;
        let n = manifest.n_samples;

        let mut features = Vec::with_capacity(manifest.tap_points.len());
        for tap in &manifest.tap_points {
            let what = format!("tap point '{}'", tap.name);
            let data = take_f32(bytes, &mut cursor, n * tap.dim, &what)?;
            features.push(Array2::from_shape_vec((n, tap.dim), data).expect("shape checked"));
        }
        let labels = if manifest.has_labels {
            Some(take_u16(bytes, &mut cursor, n, "labels")?)
        } else {
            None
        };
        let original_preds = if manifest.has_original_preds {
            let data = take_f32(bytes, &mut cursor, n * manifest.n_classes, "original_preds")?;
            Some(Array2::from_shape_vec((n, manifest.n_classes), data).expect("shape checked"))
        } else {
            None
        };
        let domain_ids = if manifest.domain_ids_present {
            Some(take_u16(bytes, &mut cursor, n, "domain_ids")?)
        } else {
            None
        };
        if cursor != bytes.len() {
            return Err(SeplError::Format(format!(
                "size mismatch: {} trailing bytes after payload",
                bytes.len() - cursor
            )));
        }
        let bank = FeatureBank { manifest, features, labels, original_preds, domain_ids };
        bank.validate()?;
        Ok(bank)
    }
}

/// Reads a `u32` length-prefixed JSON header starting at `offset`.
pub(crate) fn read_json_header<T: serde::de::DeserializeOwned>(
    bytes: &[u8],
    offset: usize,
) -> Result<(T, usize)> {
    let len_end = offset + 4;
    if bytes.len() < len_end {
        return Err(SeplError::Format("size mismatch: truncated header length".into()));
    }
    let len = u32::from_le_bytes(bytes[offset..len_end].try_into().unwrap()) as usize;
    let end = len_end + len;
    if bytes.len() < end {
        return Err(SeplError::Format("size mismatch: truncated JSON header".into()));
    }
    let header = serde_json::from_slice(&bytes[len_end..end])
        .map_err(|e| SeplError::Format(format!("malformed JSON header: {e}")))?;
    Ok((header, end))
}

pub(crate) fn take_f32(bytes: &[u8], cursor: &mut usize, count: usize, what: &str) -> Result<Vec<f32>> {
    let raw = take(bytes, cursor, count * 4, what)?;
    Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}

fn take_u16(bytes: &[u8], cursor: &mut usize, count: usize, what: &str) -> Result<Vec<u16>> {
    let raw = take(bytes, cursor, count * 2, what)?;
    Ok(raw.chunks_exact(2).map(|c| u16::from_le_bytes(c.try_into().unwrap())).collect())
}

fn take<'a>(bytes: &'a [u8], cursor: &mut usize, len: usize, what: &str) -> Result<&'a [u8]> {
    let end = *cursor + len;
    if end > bytes.len() {
        return Err(SeplError::Format(format!(
            "size mismatch in {what}: need {len} bytes, {} available",
            bytes.len() - *cursor
        )));
    }
    let out = &bytes[*cursor..end];
    *cursor = end;
    Ok(out)
}

/// Writes `bank` to `path`. Invariants are checked before the file is created.
pub fn write_bank(bank: &FeatureBank, path: impl AsRef<Path>) -> Result<()> {
    let bytes = bank.to_bytes()?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn read_bank(path: impl AsRef<Path>) -> Result<FeatureBank> {
    FeatureBank::from_bytes(&fs::read(path)?)
}

/// Selects rows, in the given order, across every per-sample field.
pub fn slice_rows(bank: &FeatureBank, indices: &[usize]) -> Result<FeatureBank> {
    if indices.is_empty() {
        return Err(invalid!("empty selection"));
    }
    let n = bank.n_samples();
    if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
        return Err(invalid!("row index {bad} out of range for {n} samples"));
    }
    let mut manifest = bank.manifest.clone();
    manifest.n_samples = indices.len();
    Ok(FeatureBank {
        manifest,
        features: bank.features.iter().map(|f| f.select(Axis(0), indices)).collect(),
        labels: bank.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
        original_preds: bank.original_preds.as_ref().map(|p| p.select(Axis(0), indices)),
        domain_ids: bank.domain_ids.as_ref().map(|d| indices.iter().map(|&i| d[i]).collect()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small_bank() -> FeatureBank {
        FeatureBank::new(
            vec!["a".into(), "b".into()],
            vec![
                array![[1.0f32, 2.0], [3.0, 4.0], [5.0, 6.0]],
                array![[0.5f32], [-0.5], [1.5]],
            ],
            3,
            Some(vec![0, 1, 2]),
            Some(array![[1.0f32, 0.0, 0.0], [0.25, 0.25, 0.5], [0.0, 0.0, 1.0]]),
            Some(vec![0, 0, 1]),
        )
        .unwrap()
    }

    #[test]
    fn float_encoding_is_ieee_le() {
        let bank = FeatureBank::new(
            vec!["x".into()],
            vec![array![[1.0f32, -2.0]]],
            2,
            None,
            None,
            None,
        )
        .unwrap();
        let bytes = bank.to_bytes().unwrap();
        let payload = &bytes[bytes.len() - 8..];
        assert_eq!(payload, &[0x00, 0x00, 0x80, 0x3F, 0x00, 0x00, 0x00, 0xC0]);
        assert_eq!(&bytes[..5], b"FBNK1");
    }

    #[test]
    fn bytes_round_trip() {
        let bank = small_bank();
        let back = FeatureBank::from_bytes(&bank.to_bytes().unwrap()).unwrap();
        assert_eq!(back, bank);
        assert_eq!(back.manifest.n_samples, 3);
    }

    #[test]
    fn label_row_mismatch_rejected_before_write() {
        let mut bank = small_bank();
        bank.labels = Some(vec![0, 1]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.fbnk");
        assert!(matches!(write_bank(&bank, &path), Err(SeplError::Validation(_))));
        assert!(!path.exists());
    }

    #[test]
    fn bad_magic() {
        let mut bytes = small_bank().to_bytes().unwrap();
        bytes[4] = b'0';
        let err = FeatureBank::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn truncated_payload_names_tap() {
        let bytes = small_bank().to_bytes().unwrap();
        let header_len = 9 + u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        // cut inside the first tap matrix
        let err = FeatureBank::from_bytes(&bytes[..header_len + 10]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("size mismatch") && msg.contains("'a'"), "{msg}");
    }

    #[test]
    fn nan_feature_rejected_on_load() {
        let bank = small_bank();
        let mut bytes = bank.to_bytes().unwrap();
        let header_len = 9 + u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        bytes[header_len..header_len + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(FeatureBank::from_bytes(&bytes), Err(SeplError::Validation(_))));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = small_bank().to_bytes().unwrap();
        bytes.push(0);
        assert!(FeatureBank::from_bytes(&bytes).unwrap_err().to_string().contains("size mismatch"));
    }

    #[test]
    fn manifest_invariants() {
        let dup = FeatureBank::new(
            vec!["a".into(), "a".into()],
            vec![array![[1.0f32]], array![[2.0f32]]],
            2,
            None,
            None,
            None,
        );
        assert!(dup.is_err());
        let one_class =
            FeatureBank::new(vec!["a".into()], vec![array![[1.0f32]]], 1, None, None, None);
        assert!(one_class.is_err());
        let bad_label =
            FeatureBank::new(vec!["a".into()], vec![array![[1.0f32]]], 2, Some(vec![2]), None, None);
        assert!(bad_label.is_err());
        let bad_preds = FeatureBank::new(
            vec!["a".into()],
            vec![array![[1.0f32]]],
            2,
            None,
            Some(array![[0.5f32, 0.4]]),
            None,
        );
        assert!(bad_preds.is_err());
    }

    #[test]
    fn slice_identity_and_reorder() {
        let bank = small_bank();
        assert_eq!(slice_rows(&bank, &[0, 1, 2]).unwrap(), bank);
        assert!(slice_rows(&bank, &[]).unwrap_err().to_string().contains("empty selection"));
        assert!(slice_rows(&bank, &[3]).is_err());

        let s = slice_rows(&bank, &[2, 0]).unwrap();
        assert_eq!(s.n_samples(), 2);
        for (new, old) in [(0usize, 2usize), (1, 0)] {
            for t in 0..bank.n_taps() {
                assert_eq!(s.features[t].row(new), bank.features[t].row(old));
            }
            assert_eq!(s.labels.as_ref().unwrap()[new], bank.labels.as_ref().unwrap()[old]);
            assert_eq!(
                s.original_preds.as_ref().unwrap().row(new),
                bank.original_preds.as_ref().unwrap().row(old)
            );
            assert_eq!(s.domain_ids.as_ref().unwrap()[new], bank.domain_ids.as_ref().unwrap()[old]);
        }
    }
}
