use std::fmt::Write as _;

use super::{Result, TrainError};

/// Sweep settings for [`lr_find`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrFindConfig {
    pub start: f64,
    pub end: f64,
    pub iterations: usize,
    pub beta: f64,
    pub divergence_factor: f64,
}

impl Default for LrFindConfig {
    fn default() -> Self {
        LrFindConfig {
            start: 1e-7,
            end: 10.0,
            iterations: 100,
            beta: 0.98,
            divergence_factor: 4.0,
        }
    }
}

impl LrFindConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.start > 0.0 && self.end > self.start && self.end.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "learning-rate sweep needs 0 < start < end, got [{}, {}]",
                self.start, self.end
            )));
        }
        if self.iterations < 2 {
            return Err(TrainError::InvalidConfig(
                "learning-rate sweep needs at least 2 iterations".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta) || self.divergence_factor.is_nan() || self.divergence_factor <= 1.0 {
            return Err(TrainError::InvalidConfig(
                "smoothing beta must lie in [0, 1) and the divergence factor must exceed 1".into(),
            ));
        }
        Ok(())
    }

    /// The geometric rate schedule from `start` to `end`.
    pub fn rates(&self) -> Vec<f64> {
        let ratio = self.end / self.start;
        let last = (self.iterations - 1) as f64;
        (0..self.iterations)
            .map(|i| match i {
                0 => self.start,
                i if i + 1 == self.iterations => self.end,
                i => self.start * ratio.powf(i as f64 / last),
            })
            .collect()
    }
}

/// Something an LR sweep can train one step at a time and roll back.
pub trait SweepModel {
    type Snapshot;

    fn snapshot(&self) -> Self::Snapshot;

    fn restore(&mut self, snapshot: Self::Snapshot);

    /// Computes the loss on the `iteration`-th batch, then takes one
    /// optimizer step at `lr`. Returns the loss.
    fn step(&mut self, iteration: usize, lr: f64) -> Result<f64>;
}

/// Smoothed loss against learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct LrCurve {
    /// `(rate, smoothed loss)` for every completed step.
    pub points: Vec<(f64, f64)>,
    pub raw_losses: Vec<f64>,
    /// Index of the minimum smoothed loss.
    pub best: usize,
    /// First index whose smoothed loss exceeded the divergence bound.
    pub divergence: Option<usize>,
    pub suggested: f64,
}

impl LrCurve {
    pub fn divergence_rate(&self) -> Option<f64> {
        self.divergence.map(|i| self.points[i].0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("lr,loss_smoothed\n");
        for (lr, loss) in &self.points {
            let _ = writeln!(out, "{lr:e},{loss:e}");
        }
        out
    }
}

/// Runs a geometric learning-rate sweep and restores the model afterwards.
///
/// Losses are smoothed with an exponential moving average (bias corrected).
/// The sweep stops at the first step whose smoothed loss exceeds
/// `divergence_factor` times the best so far, or at the first non-finite
/// loss. The suggestion is the rate at the lowest smoothed loss divided by 10.
pub fn lr_find<M: SweepModel>(model: &mut M, config: &LrFindConfig) -> Result<LrCurve> {
    config.validate()?;
    let snapshot = model.snapshot();
    let outcome = sweep(model, config);
    model.restore(snapshot);
    outcome
}

fn sweep<M: SweepModel>(model: &mut M, config: &LrFindConfig) -> Result<LrCurve> {
    let mut points = Vec::new();
    let mut raw_losses = Vec::new();
    let mut average = 0.0;
    let mut best = 0;
    let mut best_loss = f64::INFINITY;
    let mut divergence = None;
    for (i, lr) in config.rates().into_iter().enumerate() {
        let loss = model.step(i, lr)?;
        if !loss.is_finite() {
            if i == 0 {
                return Err(TrainError::NonFiniteLoss {
                    phase: "lr-find".into(),
                    epoch: 0,
                    batch: 0,
                    loss,
                });
            }
            divergence = Some(i);
            points.push((lr, f64::INFINITY));
            raw_losses.push(loss);
            break;
        }
        average = config.beta * average + (1.0 - config.beta) * loss;
        let smoothed = average / (1.0 - config.beta.powi(i as i32 + 1));
        points.push((lr, smoothed));
        raw_losses.push(loss);
        if i > 0 && smoothed > config.divergence_factor * best_loss {
            divergence = Some(i);
            break;
        }
        if smoothed <= best_loss {
            best_loss = smoothed;
            best = i;
        }
    }
    Ok(LrCurve {
        suggested: points[best].0 / 10.0,
        points,
        raw_losses,
        best,
        divergence,
    })
}

/// `½·L·w²` minimized by plain gradient descent; diverges once `lr > 2/L`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadraticSurrogate {
    pub curvature: f64,
    pub w: f64,
}

impl QuadraticSurrogate {
    pub fn new(curvature: f64, w: f64) -> Self {
        QuadraticSurrogate { curvature, w }
    }

    pub fn loss(&self) -> f64 {
        0.5 * self.curvature * self.w * self.w
    }

    pub fn stability_bound(&self) -> f64 {
        2.0 / self.curvature
    }
}

impl SweepModel for QuadraticSurrogate {
    type Snapshot = f64;

    fn snapshot(&self) -> f64 {
        self.w
    }

    fn restore(&mut self, w: f64) {
        self.w = w;
    }

    fn step(&mut self, _iteration: usize, lr: f64) -> Result<f64> {
        let loss = self.loss();
        self.w -= lr * self.curvature * self.w;
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Flat;

    impl SweepModel for Flat {
        type Snapshot = ();
        fn snapshot(&self) {}
        fn restore(&mut self, _: ()) {}
        fn step(&mut self, _: usize, _: f64) -> Result<f64> {
            Ok(0.0)
        }
    }

    struct NanFirst;

    impl SweepModel for NanFirst {
        type Snapshot = ();
        fn snapshot(&self) {}
        fn restore(&mut self, _: ()) {}
        fn step(&mut self, _: usize, _: f64) -> Result<f64> {
            Ok(f64::NAN)
        }
    }

    #[test]
    fn schedule_is_geometric_and_increasing() {
        let rates = LrFindConfig::default().rates();
        assert_eq!(rates.len(), 100);
        assert_eq!((rates[0], rates[99]), (1e-7, 10.0));
        assert!(rates.windows(2).all(|w| w[1] > w[0]));
        let r = rates[1] / rates[0];
        assert!(rates.windows(2).all(|w| (w[1] / w[0] / r - 1.0).abs() < 1e-9));
    }

    #[test]
    fn flat_loss_never_diverges() {
        let curve = lr_find(&mut Flat, &LrFindConfig::default()).unwrap();
        assert_eq!(curve.divergence, None);
        assert_eq!(curve.points.len(), 100);
        assert!((curve.suggested - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quadratic_diverges_near_the_stability_bound() {
        let mut q = QuadraticSurrogate::new(100.0, 1.0);
        let curve = lr_find(&mut q, &LrFindConfig::default()).unwrap();
        let rate = curve.divergence_rate().unwrap();
        assert!(rate > 0.002 && rate < 0.2, "divergence at {rate}");
        assert!(curve.best < curve.divergence.unwrap());
        assert_eq!(q.w, 1.0);
        assert!(curve.to_csv().starts_with("lr,loss_smoothed\n"));
    }

    #[test]
    fn non_finite_first_loss_is_an_error() {
        assert!(matches!(
            lr_find(&mut NanFirst, &LrFindConfig::default()),
            Err(TrainError::NonFiniteLoss { batch: 0, .. })
        ));
    }

    #[test]
    fn invalid_sweeps_rejected() {
        let bad = LrFindConfig {
            start: 1.0,
            end: 0.1,
            ..LrFindConfig::default()
        };
        assert!(lr_find(&mut Flat, &bad).is_err());
    }
}
