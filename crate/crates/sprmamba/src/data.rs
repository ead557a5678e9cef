//! Feature/label file formats and prediction output.
//!
//! Features travel in the SPRF binary container:
//!
//! ```text
//! magic  "SPRF"            4 bytes
//! version u32 = 1          little-endian
//! L       u64              frames
//! D       u64              feature dimension
//! fps     u32              frames per second
//! data    L*D f32          row-major, little-endian
//! ```
//!
//! Labels live in a sibling CSV (`<stem>.labels.csv`) with header
//! `frame,phase`. Predictions are written as CSV with header
//! `frame,true,pred,p0..p{C-1}` and probabilities at 6 decimals.

use crate::error::{Error, Result};
use crate::tensor::NdArray;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

pub const SPRF_MAGIC: &[u8; 4] = b"SPRF";
pub const SPRF_VERSION: u32 = 1;

/// One video's frame features and per-frame phase labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    pub features: NdArray,
    pub labels: Vec<usize>,
    pub fps: u32,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let (l, _) = self.features.dims2()?;
        if self.labels.len() != l {
            return Err(Error::Data(format!(
                "sequence {}: {} labels for {l} frames",
                self.video_id,
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&p| p >= num_classes) {
            return Err(Error::Data(format!(
                "sequence {}: label {bad} out of range [0, {num_classes})",
                self.video_id
            )));
        }
        Ok(())
    }
}

/// Path of the labels CSV sitting next to a feature file.
pub fn labels_path(feature_path: &Path) -> PathBuf {
    feature_path.with_extension("labels.csv")
}

/// Writes features (SPRF) and the sibling labels CSV.
pub fn write_features(path: &Path, seq: &FeatureSequence) -> Result<()> {
    let (l, d) = seq.features.dims2()?;
    if l == 0 {
        return Err(Error::Data("refusing to write an empty sequence".into()));
    }
    if seq.labels.len() != l {
        return Err(Error::Data(format!(
            "{} labels for {l} frames",
            seq.labels.len()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(SPRF_MAGIC)?;
    w.write_all(&SPRF_VERSION.to_le_bytes())?;
    w.write_all(&(l as u64).to_le_bytes())?;
    w.write_all(&(d as u64).to_le_bytes())?;
    w.write_all(&seq.fps.to_le_bytes())?;
    for &v in seq.features.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;

    let mut lw = BufWriter::new(File::create(labels_path(path))?);
    writeln!(lw, "frame,phase")?;
    for (t, &p) in seq.labels.iter().enumerate() {
        writeln!(lw, "{t},{p}")?;
    }
    lw.flush()?;
    Ok(())
}

/// Reads an SPRF file and its sibling labels CSV.
pub fn read_features(path: &Path) -> Result<FeatureSequence> {
    let mut r = BufReader::new(File::open(path)?);
    let mut offset = 0usize;
    let mut take = |buf: &mut [u8], what: &str| -> Result<()> {
        r.read_exact(buf).map_err(|_| {
            Error::Format(format!(
                "{}: truncated {what} at offset {offset}",
                path.display()
            ))
        })?;
        offset += buf.len();
        Ok(())
    };

    let mut magic = [0u8; 4];
    take(&mut magic, "magic")?;
    if &magic != SPRF_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {magic:?} at offset 0",
            path.display()
        )));
    }
    let mut u32buf = [0u8; 4];
    take(&mut u32buf, "version")?;
    let version = u32::from_le_bytes(u32buf);
    if version != SPRF_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported version {version} at offset 4",
            path.display()
        )));
    }
    let mut u64buf = [0u8; 8];
    take(&mut u64buf, "frame count")?;
    let l = u64::from_le_bytes(u64buf) as usize;
    take(&mut u64buf, "feature dim")?;
    let d = u64::from_le_bytes(u64buf) as usize;
    take(&mut u32buf, "fps")?;
    let fps = u32::from_le_bytes(u32buf);
    if l == 0 {
        return Err(Error::Format(format!("{}: empty sequence", path.display())));
    }

    let mut data = Vec::with_capacity(l * d);
    let mut f32buf = [0u8; 4];
    for _ in 0..l * d {
        take(&mut f32buf, "payload")?;
        data.push(f32::from_le_bytes(f32buf) as f64);
    }
    let features = NdArray::new(vec![l, d], data)?;

    let labels = read_labels(&labels_path(path))?;
    if labels.len() != l {
        return Err(Error::Data(format!(
            "{}: {} labels for {l} frames",
            path.display(),
            labels.len()
        )));
    }
    let video_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "unknown".into());
    Ok(FeatureSequence {
        video_id,
        features,
        labels,
        fps,
    })
}

/// Reads a `frame,phase` CSV.
pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let r = BufReader::new(File::open(path)?);
    let mut labels = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if lineno == 0 {
            if line != "frame,phase" {
                return Err(Error::Format(format!(
                    "{}: expected header 'frame,phase', got '{line}'",
                    path.display()
                )));
            }
            continue;
        }
        let (frame, phase) = line.split_once(',').ok_or_else(|| {
            Error::Format(format!("{}: line {}: expected frame,phase", path.display(), lineno + 1))
        })?;
        let frame: usize = frame.trim().parse().map_err(|_| {
            Error::Format(format!("{}: line {}: bad frame index", path.display(), lineno + 1))
        })?;
        if frame != labels.len() {
            return Err(Error::Format(format!(
                "{}: line {}: frames out of order ({} after {})",
                path.display(),
                lineno + 1,
                frame,
                labels.len()
            )));
        }
        let phase: usize = phase.trim().parse().map_err(|_| {
            Error::Format(format!("{}: line {}: bad phase id", path.display(), lineno + 1))
        })?;
        labels.push(phase);
    }
    Ok(labels)
}

/// Writes per-frame predictions: `frame,true,pred,p0..p{C-1}`.
pub fn write_predictions(
    path: &Path,
    truth: &[usize],
    pred: &[usize],
    probs: &NdArray,
) -> Result<()> {
    let (l, c) = probs.dims2()?;
    if truth.len() != l || pred.len() != l {
        return Err(Error::Data(format!(
            "prediction lengths disagree: {} true, {} pred, {l} prob rows",
            truth.len(),
            pred.len()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "frame,true,pred")?;
    for j in 0..c {
        write!(w, ",p{j}")?;
    }
    writeln!(w)?;
    for t in 0..l {
        write!(w, "{t},{},{}", truth[t], pred[t])?;
        for j in 0..c {
            write!(w, ",{:.6}", probs.at(t, j))?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Parsed predictions CSV.
#[derive(Clone, Debug)]
pub struct Predictions {
    pub truth: Vec<usize>,
    pub pred: Vec<usize>,
    pub probs: Vec<Vec<f64>>,
}

pub fn read_predictions(path: &Path) -> Result<Predictions> {
    let r = BufReader::new(File::open(path)?);
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    let mut probs = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if lineno == 0 {
            if !line.starts_with("frame,true,pred") {
                return Err(Error::Format(format!(
                    "{}: unexpected header '{line}'",
                    path.display()
                )));
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            return Err(Error::Format(format!(
                "{}: line {}: too few fields",
                path.display(),
                lineno + 1
            )));
        }
        let parse = |s: &str, what: &str| -> Result<usize> {
            s.trim().parse().map_err(|_| {
                Error::Format(format!("{}: line {}: bad {what}", path.display(), lineno + 1))
            })
        };
        truth.push(parse(fields[1], "true label")?);
        pred.push(parse(fields[2], "predicted label")?);
        let row: Result<Vec<f64>> = fields[3..]
            .iter()
            .map(|s| {
                s.trim().parse().map_err(|_| {
                    Error::Format(format!(
                        "{}: line {}: bad probability",
                        path.display(),
                        lineno + 1
                    ))
                })
            })
            .collect();
        probs.push(row?);
    }
    Ok(Predictions { truth, pred, probs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::argmax_rows;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn sample_sequence(l: usize, d: usize, seed: u64) -> FeatureSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Values representable in f32 so the roundtrip is bit-exact.
        let data: Vec<f64> = (0..l * d)
            .map(|_| rng.gen_range(-4.0f32..4.0) as f64)
            .collect();
        FeatureSequence {
            video_id: "sample".into(),
            features: NdArray::new(vec![l, d], data).unwrap(),
            labels: (0..l).map(|t| t % 3).collect(),
            fps: 1,
        }
    }

    #[test]
    fn feature_roundtrip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("v.sprf");
        let seq = sample_sequence(17, 5, 0);
        write_features(&path, &seq).unwrap();
        let back = read_features(&path).unwrap();
        assert_eq!(back.features.data(), seq.features.data());
        assert_eq!(back.labels, seq.labels);
        assert_eq!(back.fps, 1);
        assert_eq!(back.video_id, "v");
    }

    #[test]
    fn truncated_payload_names_offset() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("v.sprf");
        let seq = sample_sequence(8, 4, 1);
        write_features(&path, &seq).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        let err = read_features(&path).unwrap_err();
        match err {
            Error::Format(m) => assert!(m.contains("offset"), "{m}"),
            other => panic!("expected format error, got {other}"),
        }
    }

    #[test]
    fn bad_magic_and_version_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("v.sprf");
        let seq = sample_sequence(4, 2, 2);
        write_features(&path, &seq).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_features(&path), Err(Error::Format(_))));

        write_features(&path, &seq).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        std::fs::write(&path, &bytes).unwrap();
        let err = read_features(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn empty_sequence_rejected_on_write() {
        let dir = tempdir().unwrap();
        let seq = FeatureSequence {
            video_id: "e".into(),
            features: NdArray::zeros(&[0, 4]),
            labels: vec![],
            fps: 1,
        };
        assert!(matches!(
            write_features(&dir.path().join("e.sprf"), &seq),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn predictions_roundtrip_and_probability_rounding() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (l, c) = (40, 6);
        let mut probs = Vec::with_capacity(l * c);
        for _ in 0..l {
            let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.0..1.0)).collect();
            let s: f64 = raw.iter().sum();
            probs.extend(raw.iter().map(|v| v / s));
        }
        let probs = NdArray::new(vec![l, c], probs).unwrap();
        let truth: Vec<usize> = (0..l).map(|t| t % c).collect();
        let pred = argmax_rows(&probs);
        write_predictions(&path, &truth, &pred, &probs).unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), l + 1);

        let back = read_predictions(&path).unwrap();
        assert_eq!(back.truth, truth);
        assert_eq!(back.pred, pred);
        // 6-decimal rounding keeps each row summing to 1 within 1e-5.
        for row in &back.probs {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-5, "row sums to {s}");
        }
        // Recomputing accuracy from the file matches the in-memory value.
        let acc_mem = truth.iter().zip(&pred).filter(|(a, b)| a == b).count();
        let acc_file = back.truth.iter().zip(&back.pred).filter(|(a, b)| a == b).count();
        assert_eq!(acc_mem, acc_file);
    }

    #[test]
    fn prediction_length_mismatch_is_data_error() {
        let dir = tempdir().unwrap();
        let probs = NdArray::filled(&[3, 2], 0.5);
        assert!(matches!(
            write_predictions(&dir.path().join("p.csv"), &[0, 1], &[0, 1, 0], &probs),
            Err(Error::Data(_))
        ));
    }
}
