//! Evaluation metrics: MAE, RMSE, SI-RMSE and MSGE, computed per image and
//! averaged over a split.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses;
use crate::par;
use crate::real::Real;
use crate::synthdata::{DatasetManifest, Split};
use crate::tensor::Tensor;

/// Pyramid used by the MSGE metric.
pub const MSGE_SCALES: [u32; 4] = [1, 2, 4, 8];

fn check<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape(format!(
            "prediction {:?} and ground truth {:?} differ",
            pred.dims(),
            gt.dims()
        )));
    }
    Ok(())
}

/// `(1/n) sum |y - y_hat|`
pub fn metric_mae<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<T> {
    check(pred, gt)?;
    let s = pred
        .data()
        .iter()
        .zip(gt.data())
        .fold(T::zero(), |s, (&p, &y)| s + (y - p).abs());
    Ok(s / T::of(pred.len() as f64))
}

/// `sqrt((1/n) sum (y - y_hat)^2)`
pub fn metric_rmse<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<T> {
    check(pred, gt)?;
    Ok(losses::mse_kernel(pred.data(), gt.data()).sqrt())
}

/// Residual variance; the same kernel as the scale-invariant loss.
pub fn metric_si_rmse<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<T> {
    losses::loss_si(pred, gt)
}

/// Multi-scale gradient error; the same kernel as the gradient-matching loss
/// over scales 1, 1/2, 1/4, 1/8.
pub fn metric_msge<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<T> {
    losses::loss_msg(pred, gt, &MSGE_SCALES)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    pub si_rmse: f64,
    pub msge: f64,
    pub n_images: usize,
}

impl MetricsReport {
    /// Metrics of a single height raster.
    pub fn of_image(pred: &Tensor<f64>, gt: &Tensor<f64>) -> Result<Self> {
        Ok(MetricsReport {
            mae: metric_mae(pred, gt)?,
            rmse: metric_rmse(pred, gt)?,
            si_rmse: metric_si_rmse(pred, gt)?,
            msge: metric_msge(pred, gt)?,
            n_images: 1,
        })
    }

    /// Unweighted mean over images.
    pub fn mean(per_image: &[MetricsReport]) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::invalid("no images to aggregate"));
        }
        let n = per_image.len() as f64;
        let avg = |f: fn(&MetricsReport) -> f64| per_image.iter().map(f).sum::<f64>() / n;
        Ok(MetricsReport {
            mae: avg(|r| r.mae),
            rmse: avg(|r| r.rmse),
            si_rmse: avg(|r| r.si_rmse),
            msge: avg(|r| r.msge),
            n_images: per_image.iter().map(|r| r.n_images).sum(),
        })
    }

    pub fn values(&self) -> [f64; 4] {
        [self.mae, self.rmse, self.si_rmse, self.msge]
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10}{:>12}", "metric", "value")?;
        writeln!(f, "{:<10}{:>12.4}", "MAE", self.mae)?;
        writeln!(f, "{:<10}{:>12.4}", "RMSE", self.rmse)?;
        writeln!(f, "{:<10}{:>12.4}", "SI-RMSE", self.si_rmse)?;
        writeln!(f, "{:<10}{:>12.4}", "MSGE", self.msge)?;
        write!(f, "{:<10}{:>12}", "images", self.n_images)
    }
}

/// Anything that maps a `[3, H, W]` image to a `[1, H, W]` height raster.
pub trait Predictor: Sync {
    fn predict(&self, rgb: &Tensor<f32>) -> Result<Tensor<f32>>;
}

/// Predicts a constant height everywhere.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPredictor(pub f32);

impl Predictor for ConstantPredictor {
    fn predict(&self, rgb: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (h, w) = rgb.hw()?;
        Ok(Tensor::full(&[1, h, w], self.0))
    }
}

/// Debug predictor that returns the stored ground truth of a known image.
pub struct GroundTruthStub {
    table: Vec<(Vec<u32>, Tensor<f32>)>,
}

impl GroundTruthStub {
    pub fn from_manifest(manifest: &DatasetManifest) -> Result<Self> {
        let mut table = Vec::new();
        for split in Split::ALL {
            for s in manifest.load_split(split)? {
                table.push((s.rgb.data().iter().map(|v| v.to_bits()).collect(), s.height));
            }
        }
        Ok(GroundTruthStub { table })
    }
}

impl Predictor for GroundTruthStub {
    fn predict(&self, rgb: &Tensor<f32>) -> Result<Tensor<f32>> {
        let key: Vec<u32> = rgb.data().iter().map(|v| v.to_bits()).collect();
        self.table
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, h)| h.clone())
            .ok_or_else(|| Error::invalid("ground-truth stub has no entry for this image"))
    }
}

/// Runs `model` over a split and averages the per-image metrics in manifest
/// order.
pub fn evaluate_split(
    model: &dyn Predictor,
    manifest: &DatasetManifest,
    split: Split,
) -> Result<MetricsReport> {
    let pairs = manifest.split(split);
    if pairs.is_empty() {
        return Err(Error::invalid(format!(
            "split `{}` of `{}` is empty",
            split.name(),
            manifest.name
        )));
    }
    let per_image: Vec<Result<MetricsReport>> = par::map_range(pairs.len(), |i| {
        let sample = manifest.load_sample(&pairs[i])?;
        let pred = model.predict(&sample.rgb)?;
        if pred.dims() != sample.height.dims() {
            return Err(Error::shape(format!(
                "prediction {:?} does not match height raster {:?}",
                pred.dims(),
                sample.height.dims()
            )));
        }
        MetricsReport::of_image(&pred.cast(), &sample.height.cast())
    });
    let per_image = per_image.into_iter().collect::<Result<Vec<_>>>()?;
    MetricsReport::mean(&per_image)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::new(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn mae_rmse_examples() {
        let pred = t(&[1.0, 2.0, 3.0]);
        let gt = t(&[1.0, 1.0, 1.0]);
        assert_eq!(metric_mae(&pred, &pred).unwrap(), 0.0);
        assert_eq!(metric_mae(&pred, &gt).unwrap(), 1.0);
        assert_eq!(metric_rmse(&pred, &pred).unwrap(), 0.0);
        assert!((metric_rmse(&pred, &gt).unwrap() - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!(metric_mae(&pred, &t(&[1.0])).is_err());
    }

    #[test]
    fn si_rmse_example() {
        assert!((metric_si_rmse(&t(&[0.0, 0.0]), &t(&[1.0, 2.0])).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn shared_kernels_agree_bitwise() {
        let pred = Tensor::<f64>::from_fn(&[1, 1, 8, 8], |i| (i as f64).sin() * 3.0);
        let gt = Tensor::<f64>::from_fn(&[1, 1, 8, 8], |i| (i as f64 * 0.2).cos().abs());
        assert_eq!(
            metric_si_rmse(&pred, &gt).unwrap().to_bits(),
            losses::loss_si(&pred, &gt).unwrap().to_bits()
        );
        assert_eq!(
            metric_msge(&pred, &gt).unwrap().to_bits(),
            losses::loss_msg(&pred, &gt, &[1, 2, 4, 8]).unwrap().to_bits()
        );
        let shifted = pred.map(|v| v + 2.0);
        assert!(metric_msge(&shifted, &pred).unwrap().abs() < 1e-12);
    }
}
