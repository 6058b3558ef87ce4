use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::augment::{augment_train, transform_eval, AugmentConfig};
use super::image::normalize_channels;
use super::ppm::read_ppm;
use crate::{Error, Result, Rng, Scalar, Tensor};

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

pub const SCORE_MIN: f64 = 1.0;
pub const SCORE_MAX: f64 = 5.0;

/// One image with its label. `score_norm` is filled in by [`Dataset::new`].
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<S> {
    pub id: String,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor<S>,
    pub score_raw: f64,
    pub score_norm: f64,
}

impl<S: Scalar> Sample<S> {
    pub fn new(id: impl Into<String>, image: Tensor<S>, score_raw: f64) -> Self {
        Sample { id: id.into(), image, score_raw, score_norm: f64::NAN }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub train_min: f64,
    pub train_max: f64,
    pub image_mean: [f64; 3],
    pub image_std: [f64; 3],
}

impl NormStats {
    pub fn new(train_min: f64, train_max: f64) -> Result<Self> {
        let stats = NormStats { train_min, train_max, image_mean: IMAGENET_MEAN, image_std: IMAGENET_STD };
        stats.validate()?;
        Ok(stats)
    }

    pub fn from_scores(scores: &[f64]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::EmptyInput("score statistics"));
        }
        let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self::new(min, max)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_max > self.train_min) || !self.train_min.is_finite() || !self.train_max.is_finite() {
            return Err(Error::Data(format!(
                "degenerate score range: train_min {} must be below train_max {}",
                self.train_min, self.train_max
            )));
        }
        if self.image_std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Data(format!("image_std {:?} must be positive", self.image_std)));
        }
        Ok(())
    }

    pub fn normalize_score(&self, s: f64) -> Result<f64> {
        self.validate()?;
        Ok((s - self.train_min) / (self.train_max - self.train_min))
    }

    pub fn denormalize_score(&self, u: f64) -> Result<f64> {
        self.validate()?;
        Ok(u * (self.train_max - self.train_min) + self.train_min)
    }

    pub fn normalize_image<S: Scalar>(&self, img: &Tensor<S>) -> Result<Tensor<S>> {
        normalize_channels(img, &self.image_mean, &self.image_std)
    }
}

/// Samples plus their eval-transformed model inputs, cached at construction.
#[derive(Debug, Clone)]
pub struct Dataset<S> {
    pub samples: Vec<Sample<S>>,
    pub input_size: usize,
    prepared: Vec<Tensor<S>>,
}

impl<S: Scalar> Dataset<S> {
    /// Sets every `score_norm` from `stats` and caches the eval transform.
    pub fn new(mut samples: Vec<Sample<S>>, stats: &NormStats, input_size: usize) -> Result<Self> {
        if input_size == 0 {
            return Err(Error::InvalidConfig("input_size must be positive".into()));
        }
        let mut prepared = Vec::with_capacity(samples.len());
        for s in &mut samples {
            s.score_norm = stats.normalize_score(s.score_raw)?;
            prepared.push(transform_eval(&s.image, input_size, stats)?);
        }
        Ok(Dataset { samples, input_size, prepared })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn prepared(&self, index: usize) -> &Tensor<S> {
        &self.prepared[index]
    }

    /// Eval-transformed images stacked to `[B, 3, size, size]`.
    pub fn batch_images(&self, indices: &[usize]) -> Result<Tensor<S>> {
        let items = indices
            .iter()
            .map(|&i| {
                self.prepared
                    .get(i)
                    .ok_or_else(|| Error::InvalidShape(format!("sample index {i} out of range {}", self.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&items)
    }

    /// Normalized targets as a `[B]` tensor.
    pub fn batch_targets(&self, indices: &[usize]) -> Result<Tensor<S>> {
        let vals = indices
            .iter()
            .map(|&i| {
                self.samples
                    .get(i)
                    .map(|s| s.score_norm)
                    .ok_or_else(|| Error::InvalidShape(format!("sample index {i} out of range {}", self.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::from_f64(&[indices.len()], &vals)
    }

    /// Augmented images for a training batch. Sample `i` in epoch `e` draws from
    /// `Rng::derive(seed, [e, i])`, so the result is independent of batch order.
    pub fn augmented_batch(
        &self,
        indices: &[usize],
        cfg: &AugmentConfig,
        stats: &NormStats,
        seed: u64,
        epoch: usize,
    ) -> Result<Tensor<S>> {
        let items = indices
            .iter()
            .map(|&i| {
                let mut rng = Rng::derive(seed, &[epoch as u64, i as u64]);
                augment_train(&self.samples[i].image, cfg, stats, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&items.iter().collect::<Vec<_>>())
    }

    pub fn scores(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.score_raw).collect()
    }
}

/// Reads a `filename,score` CSV. Row numbers in errors are file line numbers.
pub fn read_labels(path: &Path) -> Result<Vec<(String, f64)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let row_err = |row: u64, msg: String| Error::DataRow { path: path.to_path_buf(), row: row as usize, msg };
    let headers = reader.headers().map_err(|e| row_err(1, e.to_string()))?.clone();
    if headers.len() != 2 || &headers[0] != "filename" || &headers[1] != "score" {
        return Err(row_err(1, format!("expected header `filename,score`, got `{}`", headers.iter().collect::<Vec<_>>().join(","))));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            row_err(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 2 {
            return Err(row_err(line, format!("expected 2 fields, got {}", record.len())));
        }
        let name = record[0].to_string();
        if name.is_empty() {
            return Err(row_err(line, "empty filename".into()));
        }
        let score: f64 = record[1]
            .parse()
            .map_err(|_| row_err(line, format!("score `{}` is not a number", &record[1])))?;
        if !(SCORE_MIN..=SCORE_MAX).contains(&score) {
            return Err(row_err(line, format!("score {score} outside [{SCORE_MIN}, {SCORE_MAX}]")));
        }
        if !seen.insert(name.clone()) {
            return Err(row_err(line, format!("duplicate filename `{name}`")));
        }
        out.push((name, score));
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{}: no label rows", path.display())));
    }
    Ok(out)
}

/// One filename per line; blank lines and `#` comments are skipped.
pub fn read_split_manifest(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

/// Loads every labeled image under `image_dir`, in CSV order.
pub fn load_samples<S: Scalar>(image_dir: &Path, labels_csv: &Path) -> Result<Vec<Sample<S>>> {
    read_labels(labels_csv)?
        .into_iter()
        .map(|(name, score)| Ok(Sample::new(name.clone(), read_ppm(&image_dir.join(&name))?, score)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Split {
    /// Seeded random hold-out of `round(n * val_fraction)` samples.
    Random { val_fraction: f64, seed: u64 },
    /// Filenames listed in the manifest form the validation fold.
    Manifest { val: PathBuf },
}

#[derive(Debug, Clone)]
pub struct SplitData<S> {
    pub train: Dataset<S>,
    pub val: Dataset<S>,
    pub stats: NormStats,
}

/// Partitions samples into train and validation folds. Score statistics come
/// from the training fold only.
pub fn split_samples<S: Scalar>(samples: Vec<Sample<S>>, split: &Split, input_size: usize) -> Result<SplitData<S>> {
    let n = samples.len();
    let val_mask: Vec<bool> = match split {
        Split::Random { val_fraction, seed } => {
            if !(0.0..1.0).contains(val_fraction) {
                return Err(Error::InvalidConfig(format!("val_fraction {val_fraction} outside [0, 1)")));
            }
            let mut order: Vec<usize> = (0..n).collect();
            Rng::derive(*seed, &[0x5EED]).shuffle(&mut order);
            let n_val = (n as f64 * val_fraction).round() as usize;
            let mut mask = vec![false; n];
            for &i in &order[..n_val.min(n)] {
                mask[i] = true;
            }
            mask
        }
        Split::Manifest { val } => {
            let names = read_split_manifest(val)?;
            let known: HashSet<&str> = samples.iter().map(|s| s.id.as_str()).collect();
            if let Some(missing) = names.iter().find(|n| !known.contains(n.as_str())) {
                return Err(Error::Data(format!("{}: `{missing}` is not in the label file", val.display())));
            }
            let listed: HashSet<&str> = names.iter().map(String::as_str).collect();
            samples.iter().map(|s| listed.contains(s.id.as_str())).collect()
        }
    };
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (s, is_val) in samples.into_iter().zip(val_mask) {
        if is_val { val.push(s) } else { train.push(s) }
    }
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let stats = NormStats::from_scores(&train.iter().map(|s| s.score_raw).collect::<Vec<_>>())?;
    Ok(SplitData {
        train: Dataset::new(train, &stats, input_size)?,
        val: Dataset::new(val, &stats, input_size)?,
        stats,
    })
}

pub fn load_dataset<S: Scalar>(
    image_dir: &Path,
    labels_csv: &Path,
    split: &Split,
    input_size: usize,
) -> Result<SplitData<S>> {
    split_samples(load_samples(image_dir, labels_csv)?, split, input_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ppm::encode_ppm;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    fn fixture(scores: &[f64]) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let mut csv = String::from("filename,score\n");
        for (i, s) in scores.iter().enumerate() {
            let img = Tensor::<f64>::full(&[3, 4, 4], i as f64 / 10.0);
            std::fs::write(dir.path().join(format!("{i}.ppm")), encode_ppm(&img).unwrap()).unwrap();
            csv.push_str(&format!("{i}.ppm,{s}\n"));
        }
        let labels = write(dir.path(), "labels.csv", &csv);
        (dir, labels)
    }

    #[test]
    fn min_max_endpoints() {
        let (dir, labels) = fixture(&[1.0, 3.0, 5.0]);
        let samples = load_samples::<f64>(dir.path(), &labels).unwrap();
        let stats = NormStats::from_scores(&samples.iter().map(|s| s.score_raw).collect::<Vec<_>>()).unwrap();
        assert_eq!((stats.train_min, stats.train_max), (1.0, 5.0));
        let ds = Dataset::new(samples, &stats, 4).unwrap();
        let norms: Vec<f64> = ds.samples.iter().map(|s| s.score_norm).collect();
        assert_eq!(norms, vec![0.0, 0.5, 1.0]);
        assert_eq!(ds.batch_images(&[2, 0]).unwrap().shape(), &[2, 3, 4, 4]);
        assert_eq!(ds.batch_targets(&[1]).unwrap().data(), &[0.5]);
    }

    #[test]
    fn label_errors() {
        let dir = tempfile::tempdir().unwrap();
        let empty = write(dir.path(), "empty.csv", "filename,score\n");
        assert!(matches!(read_labels(&empty), Err(Error::Data(_))));
        let dup = write(dir.path(), "dup.csv", "filename,score\na.ppm,2\nb.ppm,3\na.ppm,4\n");
        match read_labels(&dup) {
            Err(Error::DataRow { row, msg, .. }) => {
                assert_eq!(row, 4);
                assert!(msg.contains("a.ppm"));
            }
            other => panic!("{other:?}"),
        }
        let range = write(dir.path(), "range.csv", "filename,score\na.ppm,5.5\n");
        assert!(matches!(read_labels(&range), Err(Error::DataRow { row: 2, .. })));
        let junk = write(dir.path(), "junk.csv", "filename,score\na.ppm,abc\n");
        assert!(matches!(read_labels(&junk), Err(Error::DataRow { row: 2, .. })));
        let header = write(dir.path(), "hdr.csv", "name,value\na.ppm,3\n");
        assert!(read_labels(&header).is_err());
    }

    #[test]
    fn missing_image_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let labels = write(dir.path(), "labels.csv", "filename,score\nnope.ppm,3\n");
        let err = load_samples::<f32>(dir.path(), &labels).unwrap_err();
        assert!(err.to_string().contains("nope.ppm"));
    }

    #[test]
    fn score_roundtrip_and_degenerate() {
        let stats = NormStats::new(1.0, 5.0).unwrap();
        assert_eq!(stats.normalize_score(3.0).unwrap(), 0.5);
        let mut rng = Rng::new(3);
        for _ in 0..1000 {
            let s = rng.uniform(1.0, 5.0);
            let back = stats.denormalize_score(stats.normalize_score(s).unwrap()).unwrap();
            assert!((back - s).abs() < 1e-12);
        }
        assert!(NormStats::new(2.0, 2.0).is_err());
        let bad = NormStats { train_max: 1.0, ..stats };
        assert!(bad.denormalize_score(0.5).is_err());
    }

    #[test]
    fn splits_use_train_stats_only() {
        let (dir, labels) = fixture(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let manifest = write(dir.path(), "val.txt", "4.ppm\n\n0.ppm\n");
        let split = load_dataset::<f64>(dir.path(), &labels, &Split::Manifest { val: manifest }, 4).unwrap();
        assert_eq!(split.train.len(), 3);
        assert_eq!((split.stats.train_min, split.stats.train_max), (2.0, 4.0));
        let val_norms: Vec<f64> = split.val.samples.iter().map(|s| s.score_norm).collect();
        assert_eq!(val_norms, vec![-0.5, 1.5]);

        let a = load_dataset::<f64>(dir.path(), &labels, &Split::Random { val_fraction: 0.4, seed: 7 }, 4).unwrap();
        let b = load_dataset::<f64>(dir.path(), &labels, &Split::Random { val_fraction: 0.4, seed: 7 }, 4).unwrap();
        assert_eq!(a.val.len(), 2);
        let ids = |d: &Dataset<f64>| d.samples.iter().map(|s| s.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&a.val), ids(&b.val));

        let stray = write(dir.path(), "stray.txt", "zzz.ppm\n");
        assert!(load_dataset::<f64>(dir.path(), &labels, &Split::Manifest { val: stray }, 4).is_err());
    }
}
