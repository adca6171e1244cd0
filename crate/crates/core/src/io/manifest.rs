//! Dataset manifests.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quality::{RdCurve, RdPoint, TripletRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifestKind {
    /// `reference,p0,p1,h` rows; paths relative to the manifest.
    TwoafcCsv,
    /// Directory with `ref/`, `p0/`, `p1/` images and `judge/` scores sharing file stems.
    TwoafcNative,
    /// `label,bpp,psnr` rows.
    RdCsv,
    /// Directory of PNG files.
    ImageDir,
}

impl FromStr for ManifestKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "twoafc_csv" => Ok(Self::TwoafcCsv),
            "twoafc_native" => Ok(Self::TwoafcNative),
            "rd_csv" => Ok(Self::RdCsv),
            "image_dir" => Ok(Self::ImageDir),
            other => Err(Error::Config(format!(
                "unknown manifest kind `{other}` (expected twoafc_csv, twoafc_native, rd_csv or image_dir)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdRecord {
    pub label: String,
    pub bpp: f64,
    pub psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "records", rename_all = "snake_case")]
pub enum Manifest {
    TwoAfc(Vec<TripletRecord>),
    Rd(Vec<RdRecord>),
    Images(Vec<ImageRecord>),
}

impl Manifest {
    pub fn len(&self) -> usize {
        match self {
            Manifest::TwoAfc(v) => v.len(),
            Manifest::Rd(v) => v.len(),
            Manifest::Images(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn into_triplets(self) -> Result<Vec<TripletRecord>> {
        match self {
            Manifest::TwoAfc(v) => Ok(v),
            _ => Err(Error::Config("manifest does not hold 2AFC triplets".into())),
        }
    }

    pub fn into_rd(self) -> Result<Vec<RdRecord>> {
        match self {
            Manifest::Rd(v) => Ok(v),
            _ => Err(Error::Config("manifest does not hold RD points".into())),
        }
    }

    pub fn into_images(self) -> Result<Vec<ImageRecord>> {
        match self {
            Manifest::Images(v) => Ok(v),
            _ => Err(Error::Config("manifest does not list images".into())),
        }
    }
}

pub fn load_manifest(path: impl AsRef<Path>, kind: ManifestKind) -> Result<Manifest> {
    let path = path.as_ref();
    let manifest = match kind {
        ManifestKind::TwoafcCsv => Manifest::TwoAfc(twoafc_csv(path)?),
        ManifestKind::TwoafcNative => Manifest::TwoAfc(twoafc_native(path)?),
        ManifestKind::RdCsv => Manifest::Rd(rd_csv(path)?),
        ManifestKind::ImageDir => Manifest::Images(image_dir(path)?),
    };
    if manifest.is_empty() {
        log::warn!("manifest {} has no records", path.display());
    }
    Ok(manifest)
}

fn bad(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Manifest { path: path.to_path_buf(), line, message: message.into() }
}

fn parse_unit(path: &Path, line: usize, raw: &str) -> Result<f64> {
    let h: f64 = raw.trim().parse().map_err(|_| bad(path, line, format!("`{raw}` is not a number")))?;
    if !(0.0..=1.0).contains(&h) {
        return Err(bad(path, line, format!("judgment {h} is outside [0, 1]")));
    }
    Ok(h)
}

/// Non-empty, non-comment CSV rows with their 1-based line numbers. A first
/// row whose last field is not numeric is treated as a header.
fn csv_rows(path: &Path, width: usize) -> Result<Vec<(usize, Vec<String>)>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() || raw.trim_start().starts_with('#') {
            continue;
        }
        let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(raw.as_bytes());
        let rec = match reader.records().next() {
            Some(r) => r.map_err(|e| bad(path, line, e.to_string()))?,
            None => continue,
        };
        if rec.len() != width {
            return Err(bad(path, line, format!("expected {width} fields, found {}", rec.len())));
        }
        rows.push((line, rec.iter().map(str::to_string).collect::<Vec<_>>()));
    }
    if let Some((_, first)) = rows.first() {
        if first[width - 1].parse::<f64>().is_err() {
            rows.remove(0);
        }
    }
    Ok(rows)
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn twoafc_csv(path: &Path) -> Result<Vec<TripletRecord>> {
    let base = base_dir(path);
    csv_rows(path, 4)?
        .into_iter()
        .map(|(line, f)| {
            Ok(TripletRecord {
                reference: base.join(&f[0]),
                p0: base.join(&f[1]),
                p1: base.join(&f[2]),
                h: parse_unit(path, line, &f[3])?,
            })
        })
        .collect()
}

fn rd_csv(path: &Path) -> Result<Vec<RdRecord>> {
    csv_rows(path, 3)?
        .into_iter()
        .map(|(line, f)| {
            let num = |s: &str| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| bad(path, line, format!("`{s}` is not a finite number")))
            };
            let (bpp, psnr) = (num(&f[1])?, num(&f[2])?);
            if !(bpp > 0.0) {
                return Err(bad(path, line, format!("rate {bpp} must be positive")));
            }
            Ok(RdRecord { label: f[0].clone(), bpp, psnr })
        })
        .collect()
}

/// Group RD rows into one curve per label, in order of first appearance.
pub fn rd_curves(records: &[RdRecord]) -> Result<Vec<RdCurve>> {
    let mut labels: Vec<&str> = Vec::new();
    for r in records {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    labels
        .into_iter()
        .map(|l| {
            let pts = records.iter().filter(|r| r.label == l).map(|r| RdPoint { bpp: r.bpp, psnr: r.psnr }).collect();
            RdCurve::new(l, pts)
        })
        .collect()
}

fn sorted_files(dir: &Path, keep: impl Fn(&Path) -> bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_file() && keep(&p) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn has_ext(p: &Path, ext: &str) -> bool {
    p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn image_dir(path: &Path) -> Result<Vec<ImageRecord>> {
    Ok(sorted_files(path, |p| has_ext(p, "png"))?
        .into_iter()
        .map(|p| ImageRecord { name: stem(&p), path: p })
        .collect())
}

/// A judgment file: `.npy` with a single float, or text holding one number.
fn read_judgment(path: &Path) -> Result<f64> {
    let bytes = fs::read(path)?;
    let value = if has_ext(path, "npy") {
        let npy = npyz::NpyFile::new(&bytes[..]).map_err(|e| bad(path, 0, e.to_string()))?;
        let values: Vec<f64> = match npy.try_data::<f64>() {
            Ok(r) => r.collect::<std::io::Result<_>>()?,
            Err(npy) => npy
                .into_vec::<f32>()
                .map_err(|e| bad(path, 0, e.to_string()))?
                .into_iter()
                .map(f64::from)
                .collect(),
        };
        match values.as_slice() {
            [v] => *v,
            _ => return Err(bad(path, 0, format!("expected one value, found {}", values.len()))),
        }
    } else {
        let text = String::from_utf8_lossy(&bytes);
        return parse_unit(path, 1, text.trim());
    };
    if !(0.0..=1.0).contains(&value) {
        return Err(bad(path, 0, format!("judgment {value} is outside [0, 1]")));
    }
    Ok(value)
}

fn twoafc_native(root: &Path) -> Result<Vec<TripletRecord>> {
    for sub in ["ref", "p0", "p1", "judge"] {
        if !root.join(sub).is_dir() {
            return Err(bad(root, 0, format!("missing `{sub}/` directory")));
        }
    }
    let judges = sorted_files(&root.join("judge"), |p| has_ext(p, "npy") || has_ext(p, "txt"))?;
    let mut out = Vec::with_capacity(judges.len());
    for j in judges {
        let name = format!("{}.png", stem(&j));
        let rec = TripletRecord {
            reference: root.join("ref").join(&name),
            p0: root.join("p0").join(&name),
            p1: root.join("p1").join(&name),
            h: read_judgment(&j)?,
        };
        for p in [&rec.reference, &rec.p0, &rec.p1] {
            if !p.is_file() {
                return Err(bad(root, 0, format!("{} has no matching image {}", j.display(), p.display())));
            }
        }
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_row_parses() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        fs::write(&p, "reference,p0,p1,h\nr.png,a.png,b.png,0.8\n\n").unwrap();
        let recs = load_manifest(&p, ManifestKind::TwoafcCsv).unwrap().into_triplets().unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].h, 0.8);
        assert_eq!(recs[0].p1, dir.path().join("b.png"));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        fs::write(&p, "r.png,a.png,b.png,0.5\nr.png,a.png,b.png,1.5\n").unwrap();
        let e = load_manifest(&p, ManifestKind::TwoafcCsv).unwrap_err();
        assert!(matches!(e, Error::Manifest { line: 2, .. }), "{e:?}");
        fs::write(&p, "r.png,a.png,b.png,0.5\n# note\nr.png,a.png,0.5\n").unwrap();
        assert!(matches!(load_manifest(&p, ManifestKind::TwoafcCsv), Err(Error::Manifest { line: 3, .. })));
        fs::write(&p, "jpeg,0.5,30\njpeg,x,31\n").unwrap();
        assert!(matches!(load_manifest(&p, ManifestKind::RdCsv), Err(Error::Manifest { line: 2, .. })));
    }

    #[test]
    fn empty_file_is_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        fs::write(&p, "").unwrap();
        assert!(load_manifest(&p, ManifestKind::TwoafcCsv).unwrap().is_empty());
        assert!(matches!("bogus".parse::<ManifestKind>(), Err(Error::Config(_))));
        assert!(matches!(load_manifest(dir.path().join("none.csv"), ManifestKind::RdCsv), Err(Error::Io(_))));
    }

    #[test]
    fn rd_rows_group_into_curves() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rd.csv");
        fs::write(&p, "label,bpp,psnr\njpeg,0.5,30\nours,0.4,31\njpeg,1.0,33\nours,0.9,34\n").unwrap();
        let recs = load_manifest(&p, ManifestKind::RdCsv).unwrap().into_rd().unwrap();
        let curves = rd_curves(&recs).unwrap();
        assert_eq!(curves.len(), 2);
        assert_eq!((curves[0].label.as_str(), curves[0].rates()), ("jpeg", vec![0.5, 1.0]));
    }
}
