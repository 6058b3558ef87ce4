//! Procedural stand-in dataset of cartoon faces.
//!
//! Each sample draws a latent quality `q ~ U[0, 1]` and four attributes
//! `a_k = clamp(q + N(0, 0.1), 0, 1)`: face size, symmetry, skin smoothness and
//! eye spacing. The label is
//!
//! ```text
//! score = 1 + 4 * (0.30 size + 0.25 symmetry + 0.25 smoothness + 0.20 spacing)
//! ```
//!
//! Every attribute is drawn into the pixels: the face ellipse grows with size,
//! asymmetry displaces the right eye and the mouth, roughness adds per-pixel
//! noise on the skin, and spacing moves the eyes apart. Skin tone, background
//! level and a small centre offset vary independently of the label.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{NormStats, Sample};
use super::ppm::encode_ppm;
use crate::{Error, Result, Rng, Scalar, Tensor};

pub const WEIGHTS: [f64; 4] = [0.30, 0.25, 0.25, 0.20];
const ATTRIBUTE_NOISE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceParams {
    pub id: String,
    pub score: f64,
    pub quality: f64,
    pub size: f64,
    pub symmetry: f64,
    pub smoothness: f64,
    pub spacing: f64,
    pub skin_r: f64,
    pub skin_g: f64,
    pub skin_b: f64,
    pub background: f64,
    pub offset_x: f64,
    pub offset_y: f64,
    pub noise_seed: u64,
}

pub fn oracle_score(p: &FaceParams) -> f64 {
    1.0 + 4.0 * (WEIGHTS[0] * p.size + WEIGHTS[1] * p.symmetry + WEIGHTS[2] * p.smoothness + WEIGHTS[3] * p.spacing)
}

/// Parameters of sample `index`; independent of how many samples are drawn.
pub fn draw_params(seed: u64, index: usize) -> FaceParams {
    let mut rng = Rng::derive(seed, &[index as u64]);
    let quality = rng.next_f64();
    let mut attr = || (quality + rng.normal(0.0, ATTRIBUTE_NOISE)).clamp(0.0, 1.0);
    let (size, symmetry, smoothness, spacing) = (attr(), attr(), attr(), attr());
    let mut p = FaceParams {
        id: format!("synth_{index:05}"),
        score: 0.0,
        quality,
        size,
        symmetry,
        smoothness,
        spacing,
        skin_r: rng.uniform(0.75, 0.95),
        skin_g: rng.uniform(0.55, 0.75),
        skin_b: rng.uniform(0.45, 0.65),
        background: rng.uniform(0.1, 0.35),
        offset_x: rng.uniform(-0.04, 0.04),
        offset_y: rng.uniform(-0.04, 0.04),
        noise_seed: rng.next_u64(),
    };
    p.score = oracle_score(&p);
    p
}

fn in_ellipse(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> bool {
    let dx = (x - cx) / rx;
    let dy = (y - cy) / ry;
    dx * dx + dy * dy <= 1.0
}

/// Renders a `[3, size, size]` image. Pixels are stored at single precision
/// so the in-memory and on-disk copies agree exactly.
pub fn render_face(p: &FaceParams, size: usize) -> Result<Tensor<f32>> {
    if size == 0 {
        return Err(Error::InvalidConfig("synthetic image size must be positive".into()));
    }
    let plane = size * size;
    let mut img = vec![0f32; 3 * plane];
    let mut noise = Rng::new(p.noise_seed);
    let (cx, cy) = (0.5 + p.offset_x, 0.5 + p.offset_y);
    let r = 0.22 + 0.18 * p.size;
    let (rx, ry) = (0.8 * r, r);
    let asym = 1.0 - p.symmetry;
    let roughness = 0.3 * (1.0 - p.smoothness);
    let eye_dx = (0.2 + 0.25 * p.spacing) * r;
    let eye_y = cy - 0.25 * r;
    let eye_r = 0.12 * r;
    let right_eye_y = eye_y + 0.3 * asym * r;
    let mouth_cx = cx + 0.2 * asym * r;
    let mouth_cy = cy + 0.45 * r;
    let skin = [p.skin_r, p.skin_g, p.skin_b];
    let bg = [p.background, p.background * 0.95, p.background * 1.05];
    for i in 0..size {
        let y = (i as f64 + 0.5) / size as f64;
        for j in 0..size {
            let x = (j as f64 + 0.5) / size as f64;
            let rgb = if !in_ellipse(x, y, cx, cy, rx, ry) {
                bg
            } else if in_ellipse(x, y, cx - eye_dx, eye_y, eye_r, eye_r)
                || in_ellipse(x, y, cx + eye_dx, right_eye_y, eye_r, eye_r)
            {
                [0.1, 0.08, 0.08]
            } else if in_ellipse(x, y, mouth_cx, mouth_cy, 0.35 * r, 0.07 * r) {
                [0.6, 0.2, 0.25]
            } else {
                let n = roughness * noise.normal(0.0, 1.0);
                [skin[0] + n, skin[1] + n, skin[2] + n]
            };
            for c in 0..3 {
                img[c * plane + i * size + j] = rgb[c].clamp(0.0, 1.0) as f32;
            }
        }
    }
    Tensor::from_vec(&[3, size, size], img)
}

#[derive(Debug, Clone)]
pub struct SynthSet<S> {
    pub samples: Vec<Sample<S>>,
    pub params: Vec<FaceParams>,
    /// Score range over the whole set.
    pub stats: NormStats,
}

/// Samples `offset .. offset + n` of the stream keyed by `seed`.
pub fn synth_range<S: Scalar>(n: usize, image_size: usize, seed: u64, offset: usize) -> Result<SynthSet<S>> {
    if n == 0 {
        return Err(Error::InvalidConfig("synthetic dataset needs at least one sample".into()));
    }
    let params: Vec<FaceParams> = (offset..offset + n).map(|i| draw_params(seed, i)).collect();
    let samples = params
        .iter()
        .map(|p| Ok(Sample::new(p.id.clone(), render_face(p, image_size)?.cast::<S>(), p.score)))
        .collect::<Result<Vec<_>>>()?;
    finish(samples, params)
}

pub fn synth_dataset<S: Scalar>(n: usize, image_size: usize, seed: u64) -> Result<SynthSet<S>> {
    synth_range(n, image_size, seed, 0)
}

fn finish<S: Scalar>(mut samples: Vec<Sample<S>>, params: Vec<FaceParams>) -> Result<SynthSet<S>> {
    let scores: Vec<f64> = params.iter().map(|p| p.score).collect();
    let stats = NormStats::from_scores(&scores)
        .map_err(|_| Error::Data("synthetic scores are all identical, draw more samples".into()))?;
    for s in &mut samples {
        s.score_norm = stats.normalize_score(s.score_raw)?;
    }
    Ok(SynthSet { samples, params, stats })
}

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const LABELS_FILE: &str = "labels.csv";
pub const IMAGES_FILE: &str = "images.mtns";
pub const IMAGE_DIR: &str = "images";

/// Writes `manifest.csv` (generator parameters), `images.mtns` (exact pixels,
/// `[n, 3, H, W]`), and a loader-compatible `labels.csv` plus `images/*.ppm`.
pub fn write_synth<S: Scalar>(dir: &Path, set: &SynthSet<S>) -> Result<()> {
    let image_dir = dir.join(IMAGE_DIR);
    std::fs::create_dir_all(&image_dir).map_err(|e| Error::file(&image_dir, e))?;
    let manifest = dir.join(MANIFEST_FILE);
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| Error::Data(format!("{}: {e}", manifest.display())))?;
    for p in &set.params {
        w.serialize(p).map_err(|e| Error::Data(format!("{}: {e}", manifest.display())))?;
    }
    w.flush().map_err(|e| Error::file(&manifest, e))?;
    let mut labels = String::from("filename,score\n");
    for (s, p) in set.samples.iter().zip(&set.params) {
        let name = format!("{}.ppm", p.id);
        let path = image_dir.join(&name);
        std::fs::write(&path, encode_ppm(&s.image)?).map_err(|e| Error::file(&path, e))?;
        labels.push_str(&format!("{name},{}\n", p.score));
    }
    let labels_path = dir.join(LABELS_FILE);
    std::fs::write(&labels_path, labels).map_err(|e| Error::file(&labels_path, e))?;
    let images: Vec<Tensor<f32>> = set.samples.iter().map(|s| s.image.cast::<f32>()).collect();
    Tensor::stack(&images.iter().collect::<Vec<_>>())?.save_mtns(&dir.join(IMAGES_FILE))
}

/// Reads back a directory written by [`write_synth`], re-checking every stored
/// score against the oracle.
pub fn read_synth<S: Scalar>(dir: &Path) -> Result<SynthSet<S>> {
    let manifest = dir.join(MANIFEST_FILE);
    let mut reader = csv::Reader::from_path(&manifest).map_err(|e| Error::Data(format!("{}: {e}", manifest.display())))?;
    let mut params = Vec::new();
    for (k, row) in reader.deserialize::<FaceParams>().enumerate() {
        let p = row.map_err(|e| Error::DataRow { path: manifest.clone(), row: k + 2, msg: e.to_string() })?;
        if oracle_score(&p) != p.score {
            return Err(Error::DataRow {
                path: manifest.clone(),
                row: k + 2,
                msg: format!("stored score {} disagrees with oracle {}", p.score, oracle_score(&p)),
            });
        }
        params.push(p);
    }
    let images = Tensor::<f32>::load_mtns(&dir.join(IMAGES_FILE))?;
    if images.rank() != 4 || images.shape()[0] != params.len() || images.shape()[1] != 3 {
        return Err(Error::Data(format!(
            "{}: image stack {:?} does not match {} manifest rows",
            dir.join(IMAGES_FILE).display(),
            images.shape(),
            params.len()
        )));
    }
    let samples = params
        .iter()
        .enumerate()
        .map(|(i, p)| Ok(Sample::new(p.id.clone(), images.slice_outer(i)?.cast::<S>(), p.score)))
        .collect::<Result<Vec<_>>>()?;
    finish(samples, params)
}
