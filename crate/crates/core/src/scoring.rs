//! Inference: distances, normalized outlier probabilities, the trained
//! threshold, flags, and the accuracy / F1 / AUC metrics.
//!
//! Label and flag coding: `1` is the anomalous (counterfeit) class and the
//! positive class for F1 and AUC.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::distance_scores;
use crate::model::TrainedModel;
use crate::network::forward;
use crate::stats;
use crate::tensor::{Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub train_max_distance: f64,
    pub threshold: f64,
    pub nu: f64,
}

impl Calibration {
    pub fn probabilities(&self, distances: &Vector) -> Vector {
        Vector::new(distances.iter().map(|d| d / self.train_max_distance).collect())
    }

    pub fn flags(&self, probabilities: &Vector) -> Vec<u8> {
        probabilities.iter().map(|&p| u8::from(p > self.threshold)).collect()
    }
}

/// Fits the normalizer (largest training distance) and the threshold, the
/// `(1 − ν)` quantile of the normalized training scores.
pub fn calibrate(train_scores: &Vector, nu: f64) -> Result<Calibration> {
    if train_scores.is_empty() {
        return Err(Error::EmptyBatch("calibrate"));
    }
    if !(nu > 0.0 && nu < 1.0) {
        return Err(Error::config(format!("nu must lie in (0, 1), got {nu}")));
    }
    let max = train_scores.max().unwrap_or(0.0);
    if !(max > 0.0 && max.is_finite()) {
        return Err(Error::DegenerateCalibration);
    }
    let probs: Vec<f64> = train_scores.iter().map(|d| d / max).collect();
    let threshold = stats::quantile(&probs, 1.0 - nu).expect("non-empty");
    Ok(Calibration {
        train_max_distance: max,
        threshold,
        nu,
    })
}

/// Which maximum divides the distances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// The training maximum stored in the calibration.
    #[default]
    TrainMax,
    /// The maximum of the batch being scored (ablation only).
    BatchMax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub distances: Vector,
    pub probabilities: Vector,
    pub flags: Vec<u8>,
}

pub fn score_and_flag(model: &TrainedModel, x: &Matrix) -> Result<Scored> {
    score_and_flag_with(model, x, Normalization::TrainMax)
}

pub fn score_and_flag_with(model: &TrainedModel, x: &Matrix, norm: Normalization) -> Result<Scored> {
    let cal = model.calibration.as_ref().ok_or(Error::Uncalibrated)?;
    let state = model.final_state().ok_or(Error::Uncalibrated)?;
    let h = forward(&model.network, x)?;
    let distances = distance_scores(&h, &model.spec, state)?;
    let probabilities = match norm {
        Normalization::TrainMax => cal.probabilities(&distances),
        Normalization::BatchMax => {
            let m = distances.max().unwrap_or(0.0);
            let m = if m > 0.0 { m } else { 1.0 };
            Vector::new(distances.iter().map(|d| d / m).collect())
        }
    };
    let flags = cal.flags(&probabilities);
    Ok(Scored {
        distances,
        probabilities,
        flags,
    })
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        Err(Error::Length(a, b))
    } else {
        Ok(())
    }
}

pub fn accuracy(flags: &[u8], labels: &[u8]) -> Result<f64> {
    check_lengths(flags.len(), labels.len())?;
    if flags.is_empty() {
        return Err(Error::EmptyBatch("accuracy"));
    }
    let hits = flags.iter().zip(labels).filter(|(f, l)| f == l).count();
    Ok(hits as f64 / flags.len() as f64)
}

/// F1 of the anomalous class; zero when nothing is both predicted and true.
pub fn f1(flags: &[u8], labels: &[u8]) -> Result<f64> {
    check_lengths(flags.len(), labels.len())?;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&f, &l) in flags.iter().zip(labels) {
        match (f == 1, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    Ok((2 * tp) as f64 / (2 * tp + fp + fneg) as f64)
}

/// Mann-Whitney AUC: the chance that a random positive outscores a random
/// negative, counting ties as one half. Computed from mid-ranks.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut pos_rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && scores[order[end + 1]] == scores[order[start]] {
            end += 1;
        }
        // ranks are 1-based: the tied block spans start+1 ..= end+1
        let mid_rank = (start + end + 2) as f64 / 2.0;
        let pos_in_block = order[start..=end].iter().filter(|&&i| labels[i] == 1).count();
        pos_rank_sum += mid_rank * pos_in_block as f64;
        start = end + 1;
    }
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub accuracy: f64,
    pub f1: f64,
    pub auc: f64,
}

/// AUC is taken over the probabilities; it is unchanged by any strictly
/// increasing rescaling, so it equals the AUC over raw distances.
pub fn metrics(scored: &Scored, labels: &[u8]) -> Result<MetricTriple> {
    Ok(MetricTriple {
        accuracy: accuracy(&scored.flags, labels)?,
        f1: f1(&scored.flags, labels)?,
        auc: auc(scored.probabilities.as_slice(), labels)?,
    })
}

pub fn evaluate_model(model: &TrainedModel, x: &Matrix, labels: &[u8]) -> Result<(MetricTriple, Scored)> {
    let scored = score_and_flag(model, x)?;
    let m = metrics(&scored, labels)?;
    Ok((m, scored))
}

/// Fraction of samples flagged.
pub fn flagged_fraction(flags: &[u8]) -> f64 {
    if flags.is_empty() {
        return 0.0;
    }
    flags.iter().filter(|&&f| f == 1).count() as f64 / flags.len() as f64
}

/// `sample_id,distance,probability,flag,label`; `ids` are the dataset row
/// indices of the scored samples.
pub fn write_score_dump(path: &Path, ids: &[usize], scored: &Scored, labels: &[u8]) -> Result<()> {
    check_lengths(ids.len(), scored.flags.len())?;
    check_lengths(labels.len(), scored.flags.len())?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "sample_id,distance,probability,flag,label")?;
    for i in 0..ids.len() {
        writeln!(
            out,
            "{},{:?},{:?},{},{}",
            ids[i], scored.distances[i], scored.probabilities[i], scored.flags[i], labels[i]
        )?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{LossKind, LossSpec, LossState};
    use crate::network::{DenseLayer, Network};
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            if labels[i] != 1 {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] != 0 {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn calibrate_constant_scores() {
        let c = calibrate(&Vector::new(vec![5.0; 10]), 0.05).unwrap();
        assert_eq!(c.train_max_distance, 5.0);
        assert_eq!(c.threshold, 1.0);
    }

    #[test]
    fn calibrate_uniform_scores() {
        let scores = Vector::new((1..=100).map(f64::from).collect());
        let c = calibrate(&scores, 0.05).unwrap();
        // Sort-based oracle: P = k/100, position 0.95 * 99 = 94.05.
        let p: Vec<f64> = (1..=100).map(|k| k as f64 / 100.0).collect();
        let expected = p[94] + 0.05 * (p[95] - p[94]);
        assert!((c.threshold - expected).abs() < 1e-12);
        assert!((c.threshold - 0.9505).abs() < 1e-12);
    }

    #[test]
    fn calibrate_degenerate() {
        assert!(matches!(
            calibrate(&Vector::zeros(4), 0.05),
            Err(Error::DegenerateCalibration)
        ));
        assert!(calibrate(&Vector::zeros(0), 0.05).is_err());
    }

    #[test]
    fn metric_examples() {
        let labels = [1, 0, 1, 0];
        assert_eq!(accuracy(&labels, &labels).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1, 0, 1], &labels).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 0, 1, 1], &labels).unwrap(), 0.75);
        assert!(accuracy(&[1], &labels).is_err());

        assert_eq!(f1(&labels, &labels).unwrap(), 1.0);
        assert_eq!(f1(&[0, 0, 0, 0], &labels).unwrap(), 0.0);
        // TP=2, FP=1, FN=1
        let f = f1(&[1, 1, 1, 0, 0], &[1, 1, 0, 1, 0]).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedAuc)));
    }

    fn toy_model(calibrated: bool) -> TrainedModel {
        // identity layer, HB-SVDD centered at the origin
        let layer = DenseLayer::new(Matrix::identity(1), Vector::zeros(1)).unwrap();
        let network = Network::from_layers(vec![layer]).unwrap();
        let mut m = TrainedModel::new(network, LossSpec::new(LossKind::HbSvdd), 0);
        m.layer_states = vec![LossState {
            center: Vector::zeros(1),
            radius_sq: 0.0,
        }];
        if calibrated {
            m.calibration = Some(Calibration {
                train_max_distance: 4.0,
                threshold: 0.5,
                nu: 0.05,
            });
        }
        m
    }

    #[test]
    fn score_and_flag_examples() {
        let m = toy_model(true);
        // distances 0, 4, 8 (= twice the training max)
        let x = Matrix::from_rows(&[[0.0], [2.0], [8f64.sqrt()]]);
        let s = score_and_flag(&m, &x).unwrap();
        assert_eq!(s.probabilities[0], 0.0);
        assert_eq!(s.flags[0], 0);
        assert_eq!(s.probabilities[1], 1.0);
        assert!((s.probabilities[2] - 2.0).abs() < 1e-15);
        assert_eq!(s.flags[2], 1);

        let b = score_and_flag_with(&m, &x, Normalization::BatchMax).unwrap();
        assert!((b.probabilities[2] - 1.0).abs() < 1e-15);

        assert!(matches!(score_and_flag(&toy_model(false), &x), Err(Error::Uncalibrated)));
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_oracle(seed in any::<u64>(), n in 2usize..100) {
            let mut rng = SplitMix64::new(seed);
            // coarse grid so ties are common
            let scores: Vec<f64> = (0..n).map(|_| (rng.below(12) as f64) / 4.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.below(2) as u8).collect();
            labels[0] = 0;
            labels[1] = 1;
            prop_assert_eq!(auc(&scores, &labels).unwrap(), brute_auc(&scores, &labels));
        }

        #[test]
        fn auc_monotone_invariant(seed in any::<u64>(), n in 2usize..60) {
            let mut rng = SplitMix64::new(seed);
            let scores: Vec<f64> = (0..n).map(|_| rng.uniform(0.0, 2.0)).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.below(2) as u8).collect();
            labels[0] = 1;
            labels[1] = 0;
            let base = auc(&scores, &labels).unwrap();
            let affine: Vec<f64> = scores.iter().map(|s| 2.0 * s + 3.0).collect();
            let expd: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
            prop_assert_eq!(auc(&affine, &labels).unwrap(), base);
            prop_assert_eq!(auc(&expd, &labels).unwrap(), base);
        }

        #[test]
        fn calibration_budget(seed in any::<u64>(), n in 1usize..400, nu in 0.01f64..0.5) {
            let mut rng = SplitMix64::new(seed);
            let scores = Vector::new((0..n).map(|_| rng.uniform(0.0, 5.0) + 1e-3).collect());
            let cal = calibrate(&scores, nu).unwrap();
            prop_assert!((0.0..=1.0).contains(&cal.threshold));
            let flags = cal.flags(&cal.probabilities(&scores));
            prop_assert!(flagged_fraction(&flags) <= nu + 1.0 / n as f64);
        }

        #[test]
        fn metrics_in_unit_interval(seed in any::<u64>(), n in 2usize..50) {
            let mut rng = SplitMix64::new(seed);
            let flags: Vec<u8> = (0..n).map(|_| rng.below(2) as u8).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.below(2) as u8).collect();
            labels[0] = 0;
            labels[1] = 1;
            let scores: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
            for v in [accuracy(&flags, &labels).unwrap(), f1(&flags, &labels).unwrap(), auc(&scores, &labels).unwrap()] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
