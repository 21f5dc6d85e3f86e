//! Episodic training: one Adam step per sampled episode.

use std::fmt;

use crate::config::{Config, HeadConfig, TrainConfig};
use crate::data::DatasetSplit;
use crate::episode::{episode_rng, sample_episode, EpisodeTask};
use crate::error::{Error, Result};
use crate::fusion::{classify, episode_loss};
use crate::layers::Mode;
use crate::model::ModelState;
use crate::real::Real;

/// Loss and query accuracy of one training episode, before the update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub accuracy: f64,
}

/// `episode loss running_acc lr`, where `running_acc` averages the query
/// accuracy over the episodes since the previous line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogLine {
    pub episode: usize,
    pub loss: f64,
    pub running_acc: f64,
    pub lr: f64,
}

impl fmt::Display for LogLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {:.6} {:.4} {:e}", self.episode, self.loss, self.running_acc, self.lr)
    }
}

pub enum TrainEvent<'a, T> {
    Log(&'a LogLine),
    /// Emitted every `checkpoint_every` episodes.
    Checkpoint { episode: usize, model: &'a ModelState<T> },
}

/// Learning rate in effect for 0-based `episode`: halved every `lr_halving`
/// episodes.
pub fn learning_rate(cfg: &TrainConfig, episode: usize) -> f64 {
    cfg.lr * 0.5f64.powi((episode / cfg.lr_halving) as i32)
}

/// Forward, backward and one Adam update on `task`. Batch-norm running
/// statistics are updated with the statistics of this episode.
pub fn train_step<T: Real>(model: &mut ModelState<T>, head: &HeadConfig, task: &EpisodeTask<T>, lr: f64) -> Result<StepStats> {
    let (grads, observed, stats) = {
        let mut s = model.session(Mode::Train);
        let logits = model.forward(&mut s, head, task.way(), task.shot(), &task.support, &task.query)?;
        let predicted = classify(s.graph.value(logits));
        let loss = episode_loss(&mut s.graph, logits, &task.query_labels)?;
        let loss_value = s.graph.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
        if !loss_value.is_finite() {
            return Err(Error::Diverged {
                episode: 0,
                seed: 0,
                detail: format!("loss is {loss_value}"),
            });
        }
        let correct = predicted.iter().zip(&task.query_labels).filter(|(p, l)| p == l).count();
        let mut g = s.graph.backward(loss)?;
        let grads = s.param_grads(&mut g);
        let observed = s.take_observed();
        let stats = StepStats {
            loss: loss_value,
            accuracy: correct as f64 / task.query_labels.len() as f64,
        };
        (grads, observed, stats)
    };
    if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Diverged {
            episode: 0,
            seed: 0,
            detail: format!("non-finite gradient for `{}`", model.store.names()[bad]),
        });
    }
    model.optimizer.step(model.store.values_mut(), &grads, T::lit(lr))?;
    let momentum = T::lit(model.arch.norm.momentum);
    for (id, o) in observed {
        model.store.stats_mut(id).update(&o, momentum);
    }
    Ok(stats)
}

/// Runs `config.train.episodes` episodes sampled from `data` with per-episode
/// generators derived from the run seed, so episode `e` is reproducible on its
/// own.
pub fn train<T: Real>(
    model: &mut ModelState<T>,
    config: &Config,
    data: &DatasetSplit,
    mut on_event: impl FnMut(TrainEvent<'_, T>) -> Result<()>,
) -> Result<Vec<LogLine>> {
    let t = &config.train;
    let mut log = Vec::new();
    let (mut loss_sum, mut acc_sum, mut since) = (0.0, 0.0, 0usize);
    for e in 0..t.episodes {
        let lr = learning_rate(t, e);
        let mut rng = episode_rng(t.seed, e as u64);
        let task = sample_episode::<T, _>(data, t.episode, &mut rng)?;
        let stats = train_step(model, &config.head, &task, lr).map_err(|err| match err {
            Error::Diverged { detail, .. } => Error::Diverged {
                episode: e,
                seed: t.seed,
                detail,
            },
            other => other,
        })?;
        loss_sum += stats.loss;
        acc_sum += stats.accuracy;
        since += 1;
        let done = e + 1;
        if (t.log_every > 0 && done % t.log_every == 0) || done == t.episodes {
            let line = LogLine {
                episode: done,
                loss: loss_sum / since as f64,
                running_acc: acc_sum / since as f64,
                lr,
            };
            on_event(TrainEvent::Log(&line))?;
            log.push(line);
            (loss_sum, acc_sum, since) = (0.0, 0.0, 0);
        }
        if t.checkpoint_every > 0 && done % t.checkpoint_every == 0 {
            on_event(TrainEvent::Checkpoint { episode: done, model })?;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ArchConfig;
    use crate::data::synthetic::{generate_synthetic, SyntheticSpec};

    fn small_config() -> Config {
        let mut c = Config::default();
        c.arch = ArchConfig {
            image_size: 16,
            width: 4,
            ..ArchConfig::default()
        };
        c.head.k = 1;
        c.train.episode.way = 3;
        c.train.episode.queries = 2;
        c.train.episodes = 3;
        c.train.log_every = 2;
        c
    }

    fn split() -> DatasetSplit {
        generate_synthetic(&SyntheticSpec {
            classes: 4,
            images_per_class: 4,
            image_size: 16,
            noise: 0.1,
            distractors: 0,
            seed: 0,
            first_class: 0,
            split_name: "train".into(),
        })
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut c = small_config();
        c.train.lr = 0.0;
        let mut model = ModelState::<f32>::init(&c.arch, 1).unwrap();
        let before = model.store.values().to_vec();
        train(&mut model, &c, &split(), |_| Ok(())).unwrap();
        assert_eq!(model.store.values(), &before[..]);
    }

    #[test]
    fn logs_and_checkpoints_on_schedule() {
        let mut c = small_config();
        c.train.checkpoint_every = 2;
        let mut model = ModelState::<f32>::init(&c.arch, 1).unwrap();
        let mut checkpoints = Vec::new();
        let log = train(&mut model, &c, &split(), |e| {
            if let TrainEvent::Checkpoint { episode, .. } = e {
                checkpoints.push(episode);
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(log.iter().map(|l| l.episode).collect::<Vec<_>>(), [2, 3]);
        assert_eq!(log[1].lr, c.train.lr);
        assert_eq!(checkpoints, [2]);
    }

    #[test]
    fn non_finite_inputs_abort_with_episode() {
        let c = small_config();
        let mut data = split();
        for class in &mut data.classes {
            for s in &mut class.samples {
                s.data[0] = f32::NAN;
            }
        }
        let mut model = ModelState::<f32>::init(&c.arch, 1).unwrap();
        let err = train(&mut model, &c, &data, |_| Ok(())).unwrap_err();
        assert!(matches!(err, Error::Diverged { episode: 0, .. }), "{err}");
    }

    #[test]
    fn halving_schedule() {
        let mut c = Config::default().train;
        c.lr = 0.001;
        c.lr_halving = 50_000;
        assert_eq!(learning_rate(&c, 0), 0.001);
        assert_eq!(learning_rate(&c, 49_999), 0.001);
        assert_eq!(learning_rate(&c, 50_000), 0.0005);
        assert_eq!(learning_rate(&c, 100_000), 0.00025);
    }

    #[test]
    fn log_line_format() {
        let l = LogLine {
            episode: 50,
            loss: 1.25,
            running_acc: 0.5,
            lr: 0.001,
        };
        assert_eq!(l.to_string(), "50 1.250000 0.5000 1e-3");
    }
}
