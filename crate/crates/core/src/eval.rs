//! Test-time evaluation over repeated batches of episodes.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::config::{EvalConfig, HeadConfig};
use crate::data::DatasetSplit;
use crate::episode::{episode_rng, sample_episode};
use crate::error::Result;
use crate::fusion::classify;
use crate::model::ModelState;
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub repeat_accuracies: Vec<f64>,
    /// 95% half-width of each repeat.
    pub repeat_half_widths: Vec<f64>,
    pub mean_accuracy: f64,
    /// Average of the per-repeat half-widths.
    pub ci95: f64,
    pub episodes: usize,
    pub repeats: usize,
    pub config_echo: String,
}

/// `1.96 · s / √n` with `s` the sample standard deviation.
pub fn ci_half_width(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    1.96 * var.sqrt() / (n as f64).sqrt()
}

impl EvalReport {
    pub fn from_episode_accuracies(per_repeat: &[Vec<f64>], config_echo: String) -> Self {
        let repeat_accuracies: Vec<f64> = per_repeat
            .iter()
            .map(|r| r.iter().sum::<f64>() / r.len().max(1) as f64)
            .collect();
        let repeat_half_widths: Vec<f64> = per_repeat.iter().map(|r| ci_half_width(r)).collect();
        let k = per_repeat.len().max(1) as f64;
        EvalReport {
            mean_accuracy: repeat_accuracies.iter().sum::<f64>() / k,
            ci95: repeat_half_widths.iter().sum::<f64>() / k,
            episodes: per_repeat.first().map_or(0, Vec::len),
            repeats: per_repeat.len(),
            repeat_accuracies,
            repeat_half_widths,
            config_echo,
        }
    }

    /// `key = value` block; accuracies are fractions in `[0, 1]`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "mean_accuracy = {:.6}", self.mean_accuracy);
        let _ = writeln!(out, "ci95 = {:.6}", self.ci95);
        let _ = writeln!(out, "summary = {:.2} +- {:.2} %", 100.0 * self.mean_accuracy, 100.0 * self.ci95);
        let _ = writeln!(out, "episodes = {}", self.episodes);
        let _ = writeln!(out, "repeats = {}", self.repeats);
        for (i, (a, h)) in self.repeat_accuracies.iter().zip(&self.repeat_half_widths).enumerate() {
            let _ = writeln!(out, "repeat{} = {a:.6} {h:.6}", i + 1);
        }
        for line in self.config_echo.lines() {
            let _ = writeln!(out, "config.{line}");
        }
        out
    }

    /// `repeat,accuracy,ci95` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("repeat,accuracy,ci95\n");
        for (i, (a, h)) in self.repeat_accuracies.iter().zip(&self.repeat_half_widths).enumerate() {
            let _ = writeln!(out, "{},{a:.6},{h:.6}", i + 1);
        }
        out
    }
}

/// Query accuracy of every episode of every repeat. Episodes run in parallel;
/// each uses its own generator so results do not depend on scheduling.
pub fn episode_accuracies<T: Real>(
    model: &ModelState<T>,
    head: &HeadConfig,
    eval: &EvalConfig,
    data: &DatasetSplit,
) -> Result<Vec<Vec<f64>>> {
    (0..eval.repeats)
        .map(|r| {
            (0..eval.episodes)
                .into_par_iter()
                .map(|e| {
                    let mut rng = episode_rng(eval.seed, (r as u64) << 32 | e as u64);
                    let task = sample_episode::<T, _>(data, eval.episode, &mut rng)?;
                    let logits = model.predict(head, task.way(), task.shot(), &task.support, &task.query)?;
                    let correct = classify(&logits)
                        .iter()
                        .zip(&task.query_labels)
                        .filter(|(p, l)| p == l)
                        .count();
                    Ok(correct as f64 / task.query_labels.len() as f64)
                })
                .collect()
        })
        .collect()
}

pub fn evaluate<T: Real>(
    model: &ModelState<T>,
    head: &HeadConfig,
    eval: &EvalConfig,
    data: &DatasetSplit,
    config_echo: String,
) -> Result<EvalReport> {
    let acc = episode_accuracies(model, head, eval, data)?;
    Ok(EvalReport::from_episode_accuracies(&acc, config_echo))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ci_of_constant_is_zero() {
        assert_eq!(ci_half_width(&[1.0; 10]), 0.0);
        assert_eq!(ci_half_width(&[0.3]), 0.0);
    }

    #[test]
    fn ci_matches_hand_value() {
        // sample sd of [0, 1] is 1/√2
        let h = ci_half_width(&[0.0, 1.0]);
        assert!((h - 1.96 * (0.5f64).sqrt() / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn report_averages_repeats() {
        let r = EvalReport::from_episode_accuracies(&[vec![1.0, 1.0], vec![0.0, 1.0]], "k = 1".into());
        assert_eq!(r.mean_accuracy, 0.75);
        assert_eq!(r.repeats, 2);
        assert_eq!(r.episodes, 2);
        assert!(r.to_text().contains("config.k = 1"));
        assert_eq!(r.to_csv().lines().count(), 3);
    }
}
