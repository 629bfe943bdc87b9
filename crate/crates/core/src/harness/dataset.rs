//! Labeled datasets for the lab: synthetic blobs and spirals generated
//! inside the unit box, plus CSV ingestion with affine rescaling.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::rng::{gauss, substream};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Blobs,
    Spirals,
    Csv,
}

impl DataSource {
    pub fn name(self) -> &'static str {
        match self {
            DataSource::Blobs => "blobs",
            DataSource::Spirals => "spirals",
            DataSource::Csv => "csv",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "blobs" => Some(DataSource::Blobs),
            "spirals" => Some(DataSource::Spirals),
            "csv" => Some(DataSource::Csv),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub classes: usize,
    pub dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub noise: f64,
    pub csv_path: Option<PathBuf>,
}

impl DatasetSpec {
    pub fn new(source: DataSource) -> Self {
        DatasetSpec {
            source,
            classes: 4,
            dim: 8,
            n_train: 4000,
            n_test: 2000,
            noise: 0.025,
            csv_path: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.dim < 2 {
            return Err(Error::Config(format!(
                "need input dimension >= 2, got {}",
                self.dim
            )));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("train and test splits must be non-empty".into()));
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return Err(Error::Config(format!("noise must be >= 0, got {}", self.noise)));
        }
        if self.source == DataSource::Csv && self.csv_path.is_none() {
            return Err(Error::Config("csv source needs csv_path".into()));
        }
        Ok(())
    }
}

/// Feature rows in [0,1] with integer labels in [0, C).
#[derive(Clone, Debug)]
pub struct Dataset {
    pub xs: Tensor,
    pub ys: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }
}

/// Per-column affine map used to bring CSV features into the unit box:
/// x ↦ (x − lo) / (hi − lo), constant columns land on 0.5.
#[derive(Clone, Debug, PartialEq)]
pub struct Rescale {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Rescale {
    fn fit(rows: &[&[f64]], dim: usize) -> Rescale {
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for row in rows {
            for j in 0..dim {
                lo[j] = lo[j].min(row[j]);
                hi[j] = hi[j].max(row[j]);
            }
        }
        Rescale { lo, hi }
    }

    pub fn apply(&self, j: usize, v: f64) -> f64 {
        let span = self.hi[j] - self.lo[j];
        if span > 0.0 {
            (v - self.lo[j]) / span
        } else {
            0.5
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::from("column,lo,hi\n");
        for j in 0..self.lo.len() {
            s.push_str(&format!("{j},{},{}\n", self.lo[j], self.hi[j]));
        }
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Rescale> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "column,lo,hi")) => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    message: "expected header column,lo,hi".into(),
                })
            }
        }
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        for (idx, line) in lines {
            let line_no = idx + 1;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected 3 fields, found {}", fields.len()),
                });
            }
            let bad = |e: std::num::ParseFloatError| Error::Parse {
                line: line_no,
                message: format!("bad number: {e}"),
            };
            lo.push(fields[1].parse().map_err(bad)?);
            hi.push(fields[2].parse().map_err(bad)?);
        }
        Ok(Rescale { lo, hi })
    }
}

/// Build the train and test splits for a spec. The rescale transform is
/// present only for CSV data; synthetic sources are generated in the unit
/// box directly.
pub fn make_dataset(spec: &DatasetSpec, seed: u64) -> Result<(Dataset, Dataset, Option<Rescale>)> {
    spec.validate()?;
    let mut rng = substream(seed, "dataset");
    match spec.source {
        DataSource::Blobs => {
            let (train, test) = blobs(spec, &mut rng);
            Ok((train, test, None))
        }
        DataSource::Spirals => {
            let (train, test) = spirals(spec, &mut rng);
            Ok((train, test, None))
        }
        DataSource::Csv => {
            let (train, test, rescale) = csv(spec, &mut rng)?;
            Ok((train, test, Some(rescale)))
        }
    }
}

// Centers step along the diagonal of the first two feature dimensions,
// evenly spaced over the middle band; any remaining dimensions sit at 0.5
// and carry noise only. A small per-class jitter varies the layout across
// seeds while the clusters stay linearly separable.
fn blob_centers(classes: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let informative = dim.min(2);
    (0..classes)
        .map(|k| {
            let base = if classes == 1 {
                0.5
            } else {
                0.35 + 0.3 * k as f64 / (classes - 1) as f64
            };
            (0..dim)
                .map(|j| {
                    let c = if j < informative { base } else { 0.5 };
                    c + rng.gen_range(-0.015..0.015)
                })
                .collect()
        })
        .collect()
}

fn split(spec: &DatasetSpec, xs: Vec<f64>, ys: Vec<usize>) -> (Dataset, Dataset) {
    let cut = spec.n_train * spec.dim;
    let train = Dataset {
        xs: Tensor::from_raw(vec![spec.n_train, spec.dim], xs[..cut].to_vec()),
        ys: ys[..spec.n_train].to_vec(),
    };
    let test = Dataset {
        xs: Tensor::from_raw(vec![spec.n_test, spec.dim], xs[cut..].to_vec()),
        ys: ys[spec.n_train..].to_vec(),
    };
    (train, test)
}

fn blobs(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> (Dataset, Dataset) {
    let centers = blob_centers(spec.classes, spec.dim, rng);
    let total = spec.n_train + spec.n_test;
    let mut xs = Vec::with_capacity(total * spec.dim);
    let mut ys = Vec::with_capacity(total);
    for i in 0..total {
        let c = i % spec.classes;
        for j in 0..spec.dim {
            let v = centers[c][j] + spec.noise * gauss(rng);
            xs.push(v.clamp(0.0, 1.0));
        }
        ys.push(c);
    }
    split(spec, xs, ys)
}

fn spirals(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> (Dataset, Dataset) {
    let turns = 1.5;
    let total = spec.n_train + spec.n_test;
    let mut xs = Vec::with_capacity(total * spec.dim);
    let mut ys = Vec::with_capacity(total);
    for i in 0..total {
        let c = i % spec.classes;
        let t: f64 = rng.gen_range(0.0..1.0);
        let theta = TAU * (turns * t + c as f64 / spec.classes as f64);
        let r = 0.05 + 0.4 * t;
        let mut row = vec![
            0.5 + r * theta.cos() + spec.noise * gauss(rng),
            0.5 + r * theta.sin() + spec.noise * gauss(rng),
        ];
        for _ in 2..spec.dim {
            row.push(0.5 + spec.noise * gauss(rng));
        }
        for v in row {
            xs.push(v.clamp(0.0, 1.0));
        }
        ys.push(c);
    }
    split(spec, xs, ys)
}

fn csv(
    spec: &DatasetSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(Dataset, Dataset, Rescale)> {
    let path = spec.csv_path.as_ref().unwrap();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut rows: Vec<(Vec<f64>, usize)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != spec.dim + 1 {
            return Err(Error::Parse {
                line: line_no,
                message: format!(
                    "expected {} fields ({} features + label), found {}",
                    spec.dim + 1,
                    spec.dim,
                    fields.len()
                ),
            });
        }
        let mut feats = Vec::with_capacity(spec.dim);
        for f in &fields[..spec.dim] {
            feats.push(f.parse::<f64>().map_err(|e| Error::Parse {
                line: line_no,
                message: format!("bad feature {f:?}: {e}"),
            })?);
        }
        let label: i64 = fields[spec.dim].parse().map_err(|e| Error::Parse {
            line: line_no,
            message: format!("bad label {:?}: {e}", fields[spec.dim]),
        })?;
        if label < 0 || label as usize >= spec.classes {
            return Err(Error::Parse {
                line: line_no,
                message: format!("label {label} outside 0..{}", spec.classes),
            });
        }
        rows.push((feats, label as usize));
    }
    let need = spec.n_train + spec.n_test;
    if rows.len() < need {
        return Err(Error::Contract(format!(
            "csv has {} usable rows, splits need {need}",
            rows.len()
        )));
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.shuffle(rng);
    let picked: Vec<usize> = order[..need].to_vec();
    let feat_rows: Vec<&[f64]> = picked.iter().map(|&i| rows[i].0.as_slice()).collect();
    let rescale = Rescale::fit(&feat_rows, spec.dim);
    let mut xs = Vec::with_capacity(need * spec.dim);
    let mut ys = Vec::with_capacity(need);
    for &i in &picked {
        for j in 0..spec.dim {
            xs.push(rescale.apply(j, rows[i].0[j]));
        }
        ys.push(rows[i].1);
    }
    let (train, test) = split(spec, xs, ys);
    Ok((train, test, rescale))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_blobs_sit_on_their_centers() {
        let mut spec = DatasetSpec::new(DataSource::Blobs);
        spec.noise = 0.0;
        spec.n_train = 40;
        spec.n_test = 20;
        let (train, test, rescale) = make_dataset(&spec, 3).unwrap();
        assert!(rescale.is_none());

        let d = spec.dim;
        let centers: Vec<&[f64]> = (0..spec.classes)
            .map(|c| &train.xs.data()[c * d..(c + 1) * d])
            .collect();
        for ds in [&train, &test] {
            for (i, &y) in ds.ys.iter().enumerate() {
                assert_eq!(&ds.xs.data()[i * d..(i + 1) * d], centers[y]);
            }
        }

        // With every point on its center, nearest-center classification is
        // perfect.
        for (i, &y) in train.ys.iter().enumerate() {
            let row = &train.xs.data()[i * d..(i + 1) * d];
            let nearest = (0..spec.classes)
                .min_by(|&a, &b| {
                    let da: f64 = centers[a].iter().zip(row).map(|(u, v)| (u - v).powi(2)).sum();
                    let db: f64 = centers[b].iter().zip(row).map(|(u, v)| (u - v).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            assert_eq!(nearest, y);
        }
    }

    #[test]
    fn same_seed_reproduces_the_dataset() {
        for source in [DataSource::Blobs, DataSource::Spirals] {
            let mut spec = DatasetSpec::new(source);
            spec.n_train = 100;
            spec.n_test = 50;
            let (tr1, te1, _) = make_dataset(&spec, 11).unwrap();
            let (tr2, te2, _) = make_dataset(&spec, 11).unwrap();
            assert_eq!(tr1.xs.data(), tr2.xs.data());
            assert_eq!(tr1.ys, tr2.ys);
            assert_eq!(te1.xs.data(), te2.xs.data());
            assert_eq!(te1.ys, te2.ys);
        }
    }

    #[test]
    fn train_split_class_counts_balance_within_one() {
        for source in [DataSource::Blobs, DataSource::Spirals] {
            let mut spec = DatasetSpec::new(source);
            spec.classes = 3;
            spec.n_train = 1001;
            spec.n_test = 10;
            let (train, _, _) = make_dataset(&spec, 5).unwrap();
            let mut counts = vec![0usize; spec.classes];
            for &y in &train.ys {
                counts[y] += 1;
            }
            let lo = *counts.iter().min().unwrap();
            let hi = *counts.iter().max().unwrap();
            assert!(hi - lo <= 1, "counts {counts:?}");
        }
    }

    #[test]
    fn csv_ingestion_rescales_and_persists_the_transform() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let mut text = String::from("# toy data\n");
        for i in 0..30 {
            let a = -5.0 + i as f64;
            let b = 100.0 + 2.0 * i as f64;
            text.push_str(&format!("{a},{b},{}\n", i % 2));
        }
        fs::write(&path, text).unwrap();

        let mut spec = DatasetSpec::new(DataSource::Csv);
        spec.classes = 2;
        spec.dim = 2;
        spec.n_train = 20;
        spec.n_test = 10;
        spec.csv_path = Some(path);
        let (train, test, rescale) = make_dataset(&spec, 9).unwrap();
        let rescale = rescale.unwrap();

        for ds in [&train, &test] {
            assert!(ds.xs.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        // Columns span [-5, 24] and [100, 158]; all 30 rows are used, so
        // the fitted bounds are the raw extremes.
        assert_eq!(rescale.lo, vec![-5.0, 100.0]);
        assert_eq!(rescale.hi, vec![24.0, 158.0]);
        assert_eq!((rescale.apply(0, -5.0), rescale.apply(0, 24.0)), (0.0, 1.0));

        let saved = dir.path().join("rescale.txt");
        rescale.save(&saved).unwrap();
        assert_eq!(Rescale::load(&saved).unwrap(), rescale);

        let (tr2, te2, _) = make_dataset(&spec, 9).unwrap();
        assert_eq!(tr2.xs.data(), train.xs.data());
        assert_eq!(te2.ys, test.ys);
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        let mut spec = DatasetSpec::new(DataSource::Csv);
        spec.classes = 2;
        spec.dim = 2;
        spec.n_train = 1;
        spec.n_test = 1;
        spec.csv_path = Some(path.clone());

        fs::write(&path, "0.1,0.2,0\n0.3,0.4,1\nx,0.5,0\n").unwrap();
        match make_dataset(&spec, 1) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }

        fs::write(&path, "0.1,0.2,9\n").unwrap();
        match make_dataset(&spec, 1) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 1);
                assert!(message.contains("label 9"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }

        fs::write(&path, "0.1,0.2\n").unwrap();
        assert!(matches!(make_dataset(&spec, 1), Err(Error::Parse { line: 1, .. })));

        fs::write(&path, "0.1,0.2,0\n").unwrap();
        assert!(matches!(make_dataset(&spec, 1), Err(Error::Contract(_))));
    }

    #[test]
    fn spec_validation_rejects_bad_fields() {
        let mut spec = DatasetSpec::new(DataSource::Blobs);
        spec.classes = 1;
        assert!(spec.validate().is_err());

        let mut spec = DatasetSpec::new(DataSource::Blobs);
        spec.dim = 1;
        assert!(spec.validate().is_err());

        let spec = DatasetSpec::new(DataSource::Csv);
        assert!(spec.validate().is_err());

        let mut spec = DatasetSpec::new(DataSource::Spirals);
        spec.noise = -0.1;
        assert!(spec.validate().is_err());
    }
}
