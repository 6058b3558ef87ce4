//! Evaluation metrics on the original score scale: MAE, RMSE and Pearson
//! correlation. Everything here works in `f64`.

use std::fmt::Write as _;

use crate::data::{Dataset, NormStats};
use crate::{Error, Result, Scalar};

fn check_pair(y: &[f64], yhat: &[f64], op: &'static str) -> Result<()> {
    if y.is_empty() {
        return Err(Error::EmptyInput(op));
    }
    if y.len() != yhat.len() {
        return Err(Error::ShapeMismatch {
            op,
            expected: vec![y.len()],
            got: vec![yhat.len()],
        });
    }
    Ok(())
}

pub fn mae(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat, "mae")?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

pub fn rmse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat, "rmse")?;
    let mse = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64;
    Ok(mse.sqrt())
}

/// Pearson correlation; zero variance in either series is an error, not NaN.
pub fn pearson(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat, "pearson")?;
    if y.len() < 2 {
        return Err(Error::UndefinedCorrelation("a series of length 1"));
    }
    let n = y.len() as f64;
    let my = y.iter().sum::<f64>() / n;
    let mp = yhat.iter().sum::<f64>() / n;
    let (mut cov, mut vy, mut vp) = (0.0, 0.0, 0.0);
    for (a, b) in y.iter().zip(yhat) {
        let (da, db) = (a - my, b - mp);
        cov += da * db;
        vy += da * da;
        vp += db * db;
    }
    if vy == 0.0 {
        return Err(Error::UndefinedCorrelation("targets"));
    }
    if vp == 0.0 {
        return Err(Error::UndefinedCorrelation("predictions"));
    }
    Ok((cov / (vy * vp).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mae: f64,
    pub rmse: f64,
    /// `None` when either series has zero variance.
    pub pc: Option<f64>,
    pub n: usize,
    pub scale: (f64, f64),
}

impl EvalReport {
    pub fn from_scores(y: &[f64], yhat: &[f64], scale: (f64, f64)) -> Result<Self> {
        let pc = match pearson(y, yhat) {
            Ok(v) => Some(v),
            Err(Error::UndefinedCorrelation(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            mae: mae(y, yhat)?,
            rmse: rmse(y, yhat)?,
            pc,
            n: y.len(),
            scale,
        })
    }

    /// PC, or the undefined-correlation error when it does not exist.
    pub fn pc_strict(&self) -> Result<f64> {
        self.pc.ok_or(Error::UndefinedCorrelation("predictions or targets"))
    }

    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let pc = self.pc.map_or("undefined".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(s, "{:<8} {:>10}", "metric", "value");
        let _ = writeln!(s, "{:<8} {:>10}", "PC", pc);
        let _ = writeln!(s, "{:<8} {:>10.4}", "MAE", self.mae);
        let _ = writeln!(s, "{:<8} {:>10.4}", "RMSE", self.rmse);
        let _ = writeln!(s, "{:<8} {:>10}", "n", self.n);
        let _ = writeln!(s, "(scores on the {}-{} scale)", self.scale.0, self.scale.1);
        s
    }

    /// Stable `key=value` lines: `n`, `mae`, `rmse`, `pc` (`undefined` allowed).
    pub fn render_kv(&self) -> String {
        let pc = self.pc.map_or("undefined".to_string(), |v| format!("{v:.12}"));
        format!(
            "n={}\nmae={:.12}\nrmse={:.12}\npc={}\n",
            self.n, self.mae, self.rmse, pc
        )
    }
}

/// Anything that maps a batch of prepared images to normalized scores.
pub trait ScorePredictor<S: Scalar> {
    fn predict(&mut self, images: &crate::Tensor<S>) -> Result<Vec<f64>>;
}

impl<S: Scalar> ScorePredictor<S> for crate::Model<S> {
    fn predict(&mut self, images: &crate::Tensor<S>) -> Result<Vec<f64>> {
        let mut rng = crate::Rng::new(0);
        Ok(self.forward(images, &mut rng)?.to_f64_vec())
    }
}

/// Normalized predictions for every sample, in dataset order.
pub fn predict_dataset<S: Scalar, P: ScorePredictor<S>>(
    predictor: &mut P,
    dataset: &Dataset<S>,
    batch_size: usize,
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("dataset"));
    }
    let mut out = Vec::with_capacity(dataset.len());
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let images = dataset.batch_images(chunk)?;
        let preds = predictor.predict(&images)?;
        if preds.len() != chunk.len() {
            return Err(Error::InvalidShape("predictor returned wrong batch length".into()));
        }
        out.extend(preds);
    }
    Ok(out)
}

/// Denormalizes predictions with the training statistics and compares them
/// with the raw scores. Callers set evaluation mode on models beforehand.
pub fn evaluate<S: Scalar, P: ScorePredictor<S>>(
    predictor: &mut P,
    dataset: &Dataset<S>,
    stats: &NormStats,
    batch_size: usize,
) -> Result<EvalReport> {
    let preds = predict_dataset(predictor, dataset, batch_size)?;
    let yhat: Vec<f64> = preds.iter().map(|&u| stats.denormalize_score(u)).collect::<Result<_>>()?;
    let y: Vec<f64> = dataset.samples.iter().map(|s| s.score_raw).collect();
    EvalReport::from_scores(&y, &yhat, (1.0, 5.0))
}
