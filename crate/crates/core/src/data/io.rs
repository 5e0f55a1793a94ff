use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::FeatureMatrix;
use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const CGF_MAGIC: &[u8; 4] = b"CGF1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureFormat {
    Cgf,
    Csv,
}

impl FeatureFormat {
    /// `.csv` files are CSV; everything else is treated as cgf.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => FeatureFormat::Csv,
            _ => FeatureFormat::Cgf,
        }
    }
}

fn format_err(path: &Path, location: String, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        location,
        message: message.into(),
    }
}

pub fn load_features(path: &Path, format: FeatureFormat) -> Result<FeatureMatrix> {
    let file = File::open(path)?;
    match format {
        FeatureFormat::Cgf => read_cgf(BufReader::new(file), path),
        FeatureFormat::Csv => read_csv(BufReader::new(file), path),
    }
}

pub fn save_features(fm: &FeatureMatrix, path: &Path, format: FeatureFormat) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    match format {
        FeatureFormat::Cgf => write_cgf(fm, &mut w)?,
        FeatureFormat::Csv => write_csv(fm, &mut w)?,
    }
    w.flush()?;
    Ok(())
}

/// Features are narrowed to f32 on disk.
pub fn write_cgf(fm: &FeatureMatrix, mut w: impl Write) -> Result<()> {
    let to_u32 = |v: usize| u32::try_from(v).map_err(|_| Error::param(format!("{v} does not fit in u32")));
    w.write_all(CGF_MAGIC)?;
    w.write_all(&to_u32(fm.n_points())?.to_le_bytes())?;
    w.write_all(&to_u32(fm.dim())?.to_le_bytes())?;
    w.write_all(&[u8::from(fm.labels().is_some())])?;
    for v in fm.features().data() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    if let Some(labels) = fm.labels() {
        for &l in labels {
            let l = i32::try_from(l).map_err(|_| Error::param(format!("label {l} does not fit in i32")))?;
            w.write_all(&l.to_le_bytes())?;
        }
    }
    Ok(())
}

struct ByteReader<'a, R> {
    inner: R,
    offset: u64,
    path: &'a Path,
}

impl<R: Read> ByteReader<'_, R> {
    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|_| {
            format_err(self.path, format!("byte {}", self.offset), format!("truncated while reading {what}"))
        })?;
        self.offset += N as u64;
        Ok(buf)
    }

    fn fail(&self, at: u64, message: impl Into<String>) -> Error {
        format_err(self.path, format!("byte {at}"), message)
    }
}

/// Parses cgf bytes; `path` only labels errors.
pub fn read_cgf(r: impl Read, path: &Path) -> Result<FeatureMatrix> {
    let mut br = ByteReader { inner: r, offset: 0, path };
    let magic: [u8; 4] = br.take("magic")?;
    if &magic != CGF_MAGIC {
        return Err(br.fail(0, "bad magic, expected \"CGF1\""));
    }
    let n = u32::from_le_bytes(br.take("point count")?) as usize;
    let d = u32::from_le_bytes(br.take("dimension")?) as usize;
    let flag_at = br.offset;
    let has_labels = match br.take::<1>("label flag")?[0] {
        0 => false,
        1 => true,
        other => return Err(br.fail(flag_at, format!("label flag must be 0 or 1, got {other}"))),
    };
    if n == 0 {
        return Err(Error::EmptyDataset { path: path.to_path_buf() });
    }
    if d == 0 {
        return Err(br.fail(8, "dimension is zero"));
    }
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        let at = br.offset;
        let v = f32::from_le_bytes(br.take("features")?);
        if !v.is_finite() {
            return Err(br.fail(at, format!("non-finite feature value {v}")));
        }
        data.push(f64::from(v));
    }
    let labels = if has_labels {
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let at = br.offset;
            let l = i32::from_le_bytes(br.take("labels")?);
            let l = usize::try_from(l).map_err(|_| br.fail(at, format!("negative label {l}")))?;
            labels.push(l);
        }
        Some(labels)
    } else {
        None
    };
    let mut extra = [0u8; 1];
    if br.inner.read(&mut extra)? != 0 {
        return Err(br.fail(br.offset, "trailing bytes after payload"));
    }
    FeatureMatrix::new(Mat::new(n, d, data)?, labels)
}

/// Header `f0,...,f{D-1}[,label]`, values in shortest round-trip form.
pub fn write_csv(fm: &FeatureMatrix, w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = (0..fm.dim()).map(|j| format!("f{j}")).collect();
    if fm.labels().is_some() {
        header.push("label".into());
    }
    out.write_record(&header).map_err(csv_io)?;
    for i in 0..fm.n_points() {
        let mut rec: Vec<String> = fm.features().row(i).iter().map(|v| format!("{v:e}")).collect();
        if let Some(l) = fm.labels() {
            rec.push(l[i].to_string());
        }
        out.write_record(&rec).map_err(csv_io)?;
    }
    out.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

pub fn read_csv(r: impl Read, path: &Path) -> Result<FeatureMatrix> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let header = rdr
        .headers()
        .map_err(|e| format_err(path, "line 1".into(), e.to_string()))?
        .clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(format_err(path, "line 1".into(), "missing header row"));
    }
    let has_labels = header.iter().next_back().is_some_and(|h| h.trim() == "label");
    let d = header.len() - usize::from(has_labels);
    if d == 0 {
        return Err(format_err(path, "line 1".into(), "no feature columns"));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut n = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            format_err(path, format!("line {line}"), e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        for (j, field) in rec.iter().enumerate() {
            let field = field.trim();
            if has_labels && j == d {
                let l: usize = field.parse().map_err(|_| {
                    format_err(path, format!("line {line}"), format!("bad label `{field}`"))
                })?;
                labels.push(l);
            } else {
                let v: f64 = field.parse().map_err(|_| {
                    format_err(path, format!("line {line}, column {}", j + 1), format!("bad number `{field}`"))
                })?;
                if !v.is_finite() {
                    return Err(format_err(
                        path,
                        format!("line {line}, column {}", j + 1),
                        format!("non-finite value `{field}`"),
                    ));
                }
                data.push(v);
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyDataset { path: path.to_path_buf() });
    }
    FeatureMatrix::new(Mat::new(n, d, data)?, has_labels.then_some(labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(labels: bool) -> FeatureMatrix {
        let m = Mat::from_fn(3, 2, |i, j| i as f64 * 0.5 - j as f64);
        FeatureMatrix::new(m, labels.then(|| vec![0, 2, 1])).unwrap()
    }

    #[test]
    fn cgf_round_trip() {
        for labels in [true, false] {
            let fm = sample(labels);
            let mut bytes = Vec::new();
            write_cgf(&fm, &mut bytes).unwrap();
            assert_eq!(bytes.len(), 13 + 24 + if labels { 12 } else { 0 });
            let back = read_cgf(bytes.as_slice(), Path::new("m")).unwrap();
            assert_eq!(back, fm);
        }
    }

    #[test]
    fn cgf_errors() {
        let p = Path::new("f.cgf");
        assert!(matches!(read_cgf(&b""[..], p), Err(Error::Format { .. })));
        assert!(matches!(read_cgf(&b"CGF2\0\0\0\0"[..], p), Err(Error::Format { .. })));
        let mut empty = b"CGF1".to_vec();
        empty.extend(0u32.to_le_bytes());
        empty.extend(3u32.to_le_bytes());
        empty.push(0);
        assert!(matches!(read_cgf(empty.as_slice(), p), Err(Error::EmptyDataset { .. })));

        let mut nan = b"CGF1".to_vec();
        nan.extend(1u32.to_le_bytes());
        nan.extend(2u32.to_le_bytes());
        nan.push(0);
        nan.extend(1.0f32.to_le_bytes());
        nan.extend(f32::NAN.to_le_bytes());
        let err = read_cgf(nan.as_slice(), p).unwrap_err();
        assert!(err.to_string().contains("byte 17"), "{err}");
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let fm = sample(true);
        let mut bytes = Vec::new();
        write_csv(&fm, &mut bytes).unwrap();
        let back = read_csv(bytes.as_slice(), Path::new("m.csv")).unwrap();
        assert_eq!(back, fm);

        let err = read_csv(&b"a,b\n1,2\n3,x\n"[..], Path::new("bad.csv")).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let err = read_csv(&b"a,b\n1,2\n3\n"[..], Path::new("bad.csv")).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        assert!(matches!(
            read_csv(&b"a,b,label\n"[..], Path::new("e.csv")),
            Err(Error::EmptyDataset { .. })
        ));
    }
}
