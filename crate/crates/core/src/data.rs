//! Synthetic datasets, splits and file ingestion.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitRng;
use crate::tensor::Tensor;

pub const GRID: usize = 8;
pub const PARITY_LEN: usize = 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    Blobs,
    /// Blobs with centres rotated between the in-distribution ones.
    BlobsShifted,
    Moons,
    Spiral,
    TokenParity,
}

impl DataKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "blobs" => DataKind::Blobs,
            "blobs-shifted" | "shifted-blobs" => DataKind::BlobsShifted,
            "moons" => DataKind::Moons,
            "spiral" => DataKind::Spiral,
            "token-parity" => DataKind::TokenParity,
            other => {
                return Err(Error::Usage(format!(
                    "unknown data kind `{other}` (expected blobs, blobs-shifted, moons, spiral, token-parity)"
                )))
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            DataKind::Blobs => "blobs",
            DataKind::BlobsShifted => "blobs-shifted",
            DataKind::Moons => "moons",
            DataKind::Spiral => "spiral",
            DataKind::TokenParity => "token-parity",
        }
    }

    pub fn n_classes(self) -> usize {
        match self {
            DataKind::Blobs | DataKind::BlobsShifted | DataKind::Spiral => 3,
            DataKind::Moons | DataKind::TokenParity => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// 8x8 rasterised point.
    Raster,
    /// The raw two coordinates.
    Tabular,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub n_features: usize,
    pub n_classes: usize,
    /// Row-major `[n, n_features]`; token ids for token data.
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(n_features: usize, n_classes: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if features.len() != n_features * labels.len() {
            return Err(Error::shape("dataset", &[features.len()], &[labels.len(), n_features]));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Range {
                what: "label",
                value: l as i64,
                lo: 0,
                hi: n_classes as i64 - 1,
            });
        }
        Ok(Dataset {
            n_features,
            n_classes,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::new(&[self.len(), self.n_features], self.features.clone()).expect("consistent dataset")
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            n_features: self.n_features,
            n_classes: self.n_classes,
            features: idx.iter().flat_map(|&i| self.row(i).iter().cloned()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..self.n_features).map(|j| format!("f_{j}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.row(i).iter().map(|v| format!("{v:?}")).collect();
            rec.push(self.labels[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(File::create(path)?);
        for i in 0..self.len() {
            let rec = JsonRecord {
                features: self.row(i).to_vec(),
                label: self.labels[i],
            };
            writeln!(f, "{}", serde_json::to_string(&rec)?)?;
        }
        f.flush()?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    features: Vec<f64>,
    label: usize,
}

fn from_records(rows: Vec<Vec<f64>>, labels: Vec<usize>, source: &str) -> Result<Dataset> {
    let k = rows.first().map(|r| r.len()).ok_or_else(|| Error::Parse(format!("{source}: no records")))?;
    if let Some(i) = rows.iter().position(|r| r.len() != k) {
        return Err(Error::Parse(format!("{source}: record {i} has {} features, expected {k}", rows[i].len())));
    }
    let c = labels.iter().max().map_or(1, |m| m + 1).max(2);
    Dataset::new(k, c, rows.concat(), labels)
}

/// CSV with header `f_0..f_{k-1},label`.
pub fn read_csv(path: &Path) -> Result<Dataset> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let k = header.len().saturating_sub(1);
    let ok = k >= 1 && (0..k).all(|j| header[j] == format!("f_{j}")) && &header[k] == "label";
    if !ok {
        return Err(Error::Parse(format!("{}: expected header f_0..f_{{k-1}},label", path.display())));
    }
    let (mut rows, mut labels) = (Vec::new(), Vec::new());
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |e: String| Error::Parse(format!("{}: row {}: {e}", path.display(), i + 1));
        rows.push(rec.iter().take(k).map(|f| f.trim().parse::<f64>().map_err(|e| bad(e.to_string()))).collect::<Result<Vec<_>>>()?);
        labels.push(rec[k].trim().parse::<usize>().map_err(|e| bad(e.to_string()))?);
    }
    from_records(rows, labels, &path.display().to_string())
}

/// One `{"features": [...], "label": int}` object per line.
pub fn read_jsonl(path: &Path) -> Result<Dataset> {
    let (mut rows, mut labels) = (Vec::new(), Vec::new());
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(&line).map_err(|e| Error::Parse(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        rows.push(rec.features);
        labels.push(rec.label);
    }
    from_records(rows, labels, &path.display().to_string())
}

pub fn read_any(path: &Path) -> Result<Dataset> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => read_csv(path),
        Some("jsonl") | Some("json") => read_jsonl(path),
        _ => Err(Error::Usage(format!("{}: expected a .csv or .jsonl file", path.display()))),
    }
}

/// Gaussian bump at `p` (in `[-3, 3]²`) on an 8x8 grid plus pixel noise.
fn rasterise(p: (f64, f64), rng: &mut SplitRng) -> Vec<f64> {
    let to_grid = |v: f64| (v + 3.0) / 6.0 * (GRID - 1) as f64;
    let (gx, gy) = (to_grid(p.0), to_grid(p.1));
    let mut img = Vec::with_capacity(GRID * GRID);
    for r in 0..GRID {
        for c in 0..GRID {
            let d2 = (c as f64 - gx).powi(2) + (r as f64 - gy).powi(2);
            img.push((-d2 / 2.0).exp() + 0.05 * rng.normal());
        }
    }
    img
}

fn point(kind: DataKind, label: usize, rng: &mut SplitRng) -> (f64, f64) {
    use std::f64::consts::PI;
    match kind {
        DataKind::Blobs | DataKind::BlobsShifted => {
            let offset = if kind == DataKind::BlobsShifted { PI / 3.0 } else { 0.0 };
            let a = offset + 2.0 * PI * label as f64 / 3.0;
            (2.0 * a.cos() + 0.45 * rng.normal(), 2.0 * a.sin() + 0.45 * rng.normal())
        }
        DataKind::Moons => {
            let a = PI * rng.uniform();
            let (x, y) = if label == 0 { (a.cos(), a.sin()) } else { (1.0 - a.cos(), 0.5 - a.sin()) };
            (1.6 * (x - 0.5) + 0.15 * rng.normal(), 1.6 * (y - 0.25) + 0.15 * rng.normal())
        }
        DataKind::Spiral => {
            let r = rng.uniform();
            let a = 2.0 * PI * label as f64 / 3.0 + 3.5 * r;
            (2.6 * r * a.cos() + 0.1 * rng.normal(), 2.6 * r * a.sin() + 0.1 * rng.normal())
        }
        DataKind::TokenParity => unreachable!(),
    }
}

/// Deterministic per `(kind, n, seed, layout)`; labels are balanced and shuffled.
pub fn gen_data(kind: DataKind, n: usize, seed: u64, layout: Layout) -> Result<Dataset> {
    if n < 10 {
        return Err(Error::Range {
            what: "n",
            value: n as i64,
            lo: 10,
            hi: i64::MAX,
        });
    }
    let mut rng = SplitRng::with_stream(seed, 0xDA7A);
    let c = kind.n_classes();
    let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    rng.shuffle(&mut labels);
    let mut features = Vec::new();
    let n_features = if kind == DataKind::TokenParity {
        for &l in &labels {
            let mut toks: Vec<usize> = (0..PARITY_LEN).map(|_| rng.below(2)).collect();
            if toks.iter().sum::<usize>() % 2 != l {
                let j = rng.below(PARITY_LEN);
                toks[j] ^= 1;
            }
            features.extend(toks.iter().map(|&t| t as f64));
        }
        PARITY_LEN
    } else {
        for &l in &labels {
            let p = point(kind, l, &mut rng);
            match layout {
                Layout::Raster => features.extend(rasterise(p, &mut rng)),
                Layout::Tabular => features.extend([p.0, p.1]),
            }
        }
        match layout {
            Layout::Raster => GRID * GRID,
            Layout::Tabular => 2,
        }
    };
    Dataset::new(n_features, c, features, labels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Disjoint shuffled train/val/test split.
pub fn split(ds: &Dataset, n_train: usize, n_val: usize, seed: u64) -> Result<Splits> {
    if n_train + n_val >= ds.len() || n_train == 0 {
        return Err(Error::contract(format!(
            "cannot split {} records into {n_train} train, {n_val} val and a non-empty test set",
            ds.len()
        )));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    SplitRng::with_stream(seed, 0x5917).shuffle(&mut idx);
    Ok(Splits {
        train: ds.subset(&idx[..n_train]),
        val: ds.subset(&idx[n_train..n_train + n_val]),
        test: ds.subset(&idx[n_train + n_val..]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Nearest class mean: a linear classifier.
    fn centroid_probe(train: &Dataset, test: &Dataset) -> f64 {
        let k = train.n_features;
        let mut means = vec![vec![0.0; k]; train.n_classes];
        let mut counts = vec![0.0; train.n_classes];
        for i in 0..train.len() {
            let l = train.labels[i];
            counts[l] += 1.0;
            means[l].iter_mut().zip(train.row(i)).for_each(|(m, v)| *m += v);
        }
        for (m, c) in means.iter_mut().zip(&counts) {
            m.iter_mut().for_each(|v| *v /= c);
        }
        let hits = (0..test.len())
            .filter(|&i| {
                let d: Vec<f64> = means.iter().map(|m| m.iter().zip(test.row(i)).map(|(a, b)| (a - b).powi(2)).sum()).collect();
                let best = (0..d.len()).min_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap();
                best == test.labels[i]
            })
            .count();
        hits as f64 / test.len() as f64
    }

    #[test]
    fn blobs_are_linearly_separable() {
        for layout in [Layout::Tabular, Layout::Raster] {
            let ds = gen_data(DataKind::Blobs, 600, 1, layout).unwrap();
            let s = split(&ds, 400, 0, 2).unwrap();
            assert!(centroid_probe(&s.train, &s.test) >= 0.95, "{layout:?}");
        }
    }

    #[test]
    fn generation_is_deterministic_and_sized() {
        for kind in [DataKind::Blobs, DataKind::Moons, DataKind::Spiral, DataKind::TokenParity] {
            let a = gen_data(kind, 10, 5, Layout::Raster).unwrap();
            assert_eq!(a, gen_data(kind, 10, 5, Layout::Raster).unwrap());
            assert_eq!(a.len(), 10);
            assert!(a.labels.iter().all(|&l| l < kind.n_classes()));
        }
        assert!(gen_data(DataKind::Blobs, 9, 0, Layout::Raster).is_err());
        assert!(matches!(DataKind::parse("circles"), Err(Error::Usage(_))));
    }

    #[test]
    fn parity_labels_match_tokens() {
        let ds = gen_data(DataKind::TokenParity, 50, 3, Layout::Raster).unwrap();
        for i in 0..ds.len() {
            assert_eq!(ds.row(i).iter().sum::<f64>() as usize % 2, ds.labels[i]);
        }
    }

    #[test]
    fn splits_are_disjoint() {
        let ds = gen_data(DataKind::Moons, 40, 3, Layout::Tabular).unwrap();
        let s = split(&ds, 20, 10, 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (20, 10, 10));
        let mut rows: Vec<Vec<u64>> = [&s.train, &s.val, &s.test]
            .iter()
            .flat_map(|d| (0..d.len()).map(|i| d.row(i).iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>())
            .collect();
        rows.sort();
        rows.dedup();
        assert_eq!(rows.len(), 40);
    }

    #[test]
    fn csv_and_jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_data(DataKind::Spiral, 12, 0, Layout::Tabular).unwrap();
        let (c, j) = (dir.path().join("d.csv"), dir.path().join("d.jsonl"));
        ds.write_csv(&c).unwrap();
        ds.write_jsonl(&j).unwrap();
        assert_eq!(read_any(&c).unwrap(), ds);
        assert_eq!(read_any(&j).unwrap(), ds);
        std::fs::write(&c, "x,y\n1,2\n").unwrap();
        assert!(matches!(read_csv(&c), Err(Error::Parse(_))));
    }
}
