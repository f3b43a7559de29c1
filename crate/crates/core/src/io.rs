//! Binary and CSV feature files, plus atomic file writes.
//!
//! Binary feature layout: `b"P2LRFS1\0"`, `u32` N, `u32` d, then `N·d`
//! `f64` values row-major, all little-endian. Label files use the magic
//! `b"P2LRLB1\0"`, `u32` N, then N `u32` labels.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const FEATURE_MAGIC: &[u8; 8] = b"P2LRFS1\0";
pub const LABEL_MAGIC: &[u8; 8] = b"P2LRLB1\0";

/// Sample vectors with optional ground-truth identities.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub features: Matrix,
    pub labels: Option<Vec<usize>>,
}

/// Writes via a sibling temp file and a rename so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn to_u32(value: usize, what: &str) -> Result<u32> {
    u32::try_from(value).map_err(|_| Error::Input(format!("{what} {value} does not fit in u32")))
}

pub fn encode_features(m: &Matrix) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 8 * m.as_slice().len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&to_u32(m.rows(), "N")?.to_le_bytes());
    out.extend_from_slice(&to_u32(m.cols(), "d")?.to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn encode_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + 4 * labels.len());
    out.extend_from_slice(LABEL_MAGIC);
    out.extend_from_slice(&to_u32(labels.len(), "N")?.to_le_bytes());
    for &l in labels {
        out.extend_from_slice(&to_u32(l, "label")?.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.error("unexpected end of file")),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        if self.take(8)? != expected {
            return Err(self.error("bad magic"));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.error("trailing bytes"));
        }
        Ok(())
    }

    fn error(&self, message: &str) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            message: message.to_string(),
        }
    }
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Matrix> {
    let mut r = Reader { bytes, pos: 0, path };
    r.magic(FEATURE_MAGIC)?;
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    let total = n
        .checked_mul(d)
        .filter(|t| t.checked_mul(8).is_some_and(|b| b <= bytes.len()))
        .ok_or_else(|| r.error("header size exceeds file"))?;
    let data = (0..total).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Matrix::from_vec(n, d, data)
}

pub fn decode_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let mut r = Reader { bytes, pos: 0, path };
    r.magic(LABEL_MAGIC)?;
    let n = r.u32()? as usize;
    if n.saturating_mul(4) > bytes.len() {
        return Err(r.error("header size exceeds file"));
    }
    let labels = (0..n).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(labels)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_features(path: &Path, m: &Matrix) -> Result<()> {
    write_atomic(path, &encode_features(m)?)
}

pub fn read_features(path: &Path) -> Result<Matrix> {
    decode_features(&read(path)?, path)
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    write_atomic(path, &encode_labels(labels)?)
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    decode_labels(&read(path)?, path)
}

/// CSV with header `f0,...,f{d-1}[,label]`.
pub fn write_features_csv(path: &Path, set: &FeatureSet) -> Result<()> {
    let m = &set.features;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = (0..m.cols()).map(|j| format!("f{j}")).collect();
    if set.labels.is_some() {
        header.push("label".into());
    }
    let csv_err = |e: csv::Error| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..m.rows() {
        let mut rec: Vec<String> = m.row(i).iter().map(|v| format_f64(*v)).collect();
        if let Some(labels) = &set.labels {
            rec.push(labels[i].to_string());
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Input(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn read_features_csv(path: &Path) -> Result<FeatureSet> {
    let bytes = read(path)?;
    let parse_err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        message,
    };
    let mut rdr = csv::Reader::from_reader(bytes.as_slice());
    let header = rdr.headers().map_err(|e| parse_err(e.to_string()))?.clone();
    let has_label = header.iter().next_back() == Some("label");
    let d = header.len() - usize::from(has_label);
    for (j, name) in header.iter().take(d).enumerate() {
        if name != format!("f{j}") {
            return Err(parse_err(format!("column {j} is `{name}`, expected `f{j}`")));
        }
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0;
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(e.to_string()))?;
        for j in 0..d {
            let v: f64 = rec[j]
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("row {line}, column {j}: `{}`", &rec[j])))?;
            data.push(v);
        }
        if has_label {
            labels.push(
                rec[d]
                    .trim()
                    .parse()
                    .map_err(|_| parse_err(format!("row {line}: bad label `{}`", &rec[d])))?,
            );
        }
        rows += 1;
    }
    Ok(FeatureSet {
        features: Matrix::from_vec(rows, d, data)?,
        labels: has_label.then_some(labels),
    })
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let bytes = encode_features(&m).unwrap();
        assert_eq!(&bytes[..8], b"P2LRFS1\0");
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &3u32.to_le_bytes());
        assert_eq!(&bytes[16..24], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 6 * 8);
    }

    #[test]
    fn truncated_and_bad_magic_rejected() {
        let m = Matrix::zeros(2, 2);
        let bytes = encode_features(&m).unwrap();
        let p = Path::new("mem");
        assert!(matches!(decode_features(&bytes[..bytes.len() - 1], p), Err(Error::Parse { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_features(&bad, p).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode_features(&long, p).is_err());
        assert!(decode_labels(b"P2LRLB1\0\xff\xff\xff\xff", p).is_err());
    }

    #[test]
    fn csv_roundtrip_with_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        let set = FeatureSet {
            features: Matrix::from_rows(&[vec![0.1, -2.5e-300], vec![1.0 / 3.0, 7.0]]).unwrap(),
            labels: Some(vec![3, 0]),
        };
        write_features_csv(&path, &set).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("f0,f1,label\n"));
        assert_eq!(read_features_csv(&path).unwrap(), set);
    }

    proptest! {
        #[test]
        fn binary_roundtrip(n in 0usize..6, d in 1usize..5, seed in any::<u64>()) {
            let data: Vec<f64> = (0..n * d).map(|k| f64::from_bits(seed.rotate_left(k as u32) >> 2)).collect();
            let m = Matrix::from_vec(n, d, data).unwrap();
            let back = decode_features(&encode_features(&m).unwrap(), Path::new("mem")).unwrap();
            prop_assert_eq!(back.rows(), n);
            prop_assert!(back.as_slice().iter().zip(m.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));
            let labels: Vec<usize> = (0..n).map(|k| k * 7).collect();
            prop_assert_eq!(decode_labels(&encode_labels(&labels).unwrap(), Path::new("mem")).unwrap(), labels);
        }
    }
}
