//! The client side of a round: local SGD from the received master parameters,
//! and evaluation.

use serde::{Deserialize, Serialize};

use crate::aggregation::CollaboratorUpdate;
use crate::error::{Error, Result};
use crate::model::TaskSpec;
use crate::params::ParameterSet;
use crate::partition::Dataset;
use crate::rng::chacha;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalTrainConfig {
    pub learning_rate: f64,
    /// Fractional epochs are allowed; the step count is
    /// `floor(epochs_per_round × batches_per_epoch)`.
    pub epochs_per_round: f64,
    pub batch_size: usize,
    /// Heavy-ball momentum; 0 is plain SGD.
    pub momentum: f64,
    pub seed: u64,
}

impl Default for LocalTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            epochs_per_round: 1.0,
            batch_size: 16,
            momentum: 0.0,
            seed: 0,
        }
    }
}

impl LocalTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::BadConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.epochs_per_round > 0.0 && self.epochs_per_round.is_finite()) {
            return Err(Error::BadConfig(format!(
                "epochs_per_round must be positive, got {}",
                self.epochs_per_round
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::BadConfig("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::BadConfig(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }

    /// Number of SGD steps for a shard of `n` rows.
    pub fn steps_for(&self, n: usize) -> usize {
        let batches = n.div_ceil(self.batch_size);
        let raw = self.epochs_per_round * batches as f64;
        let snapped = if (raw - raw.round()).abs() < 1e-9 {
            raw.round()
        } else {
            raw
        };
        snapped.floor() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
}

/// Mean cross-entropy and top-1 accuracy (ties go to the lowest class index).
pub fn evaluate(params: &ParameterSet, data: &Dataset, task: &TaskSpec) -> Result<EvalMetrics> {
    task.ensure_schema(params)?;
    task.ensure_dataset(data)?;
    if data.is_empty() {
        return Err(Error::EmptyShard);
    }
    let flat = params.flatten();
    let mut logits = vec![0.0; task.num_classes];
    let mut loss = 0.0;
    let mut correct = 0usize;
    for i in 0..data.len() {
        task.logits(&flat, data.row(i), &mut logits);
        let y = data.label(i) as usize;
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        loss += lse - logits[y];
        let pred = logits
            .iter()
            .enumerate()
            .fold(0, |best, (k, z)| if *z > logits[best] { k } else { best });
        if pred == y {
            correct += 1;
        }
    }
    let n = data.len() as f64;
    Ok(EvalMetrics {
        loss: loss / n,
        accuracy: correct as f64 / n,
    })
}

/// Trains from `master` on `shard` and packages the result as an update whose
/// `prev_params` is `master`.
pub fn local_train(
    collab_id: &str,
    master: &ParameterSet,
    shard: &Dataset,
    task: &TaskSpec,
    cfg: &LocalTrainConfig,
) -> Result<CollaboratorUpdate> {
    cfg.validate()?;
    task.ensure_schema(master)?;
    task.ensure_dataset(shard)?;
    if shard.is_empty() {
        return Err(Error::EmptyShard);
    }
    let n = shard.len();
    let steps = cfg.steps_for(n);
    let mut rng = chacha(cfg.seed);
    let mut flat = master.flatten();
    let mut grad = vec![0.0; flat.len()];
    let mut velocity = vec![0.0; flat.len()];
    let mut order = shard.shuffled_indices(&mut rng);
    let mut pos = 0;
    for _ in 0..steps {
        if pos >= n {
            order = shard.shuffled_indices(&mut rng);
            pos = 0;
        }
        let end = (pos + cfg.batch_size).min(n);
        task.loss_and_grad(&flat, shard, &order[pos..end], &mut grad);
        pos = end;
        if cfg.momentum > 0.0 {
            for ((p, v), g) in flat.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = cfg.momentum * *v + g;
                *p -= cfg.learning_rate * *v;
            }
        } else {
            for (p, g) in flat.iter_mut().zip(&grad) {
                *p -= cfg.learning_rate * g;
            }
        }
    }
    let params = task.params_from_flat(&flat)?;
    CollaboratorUpdate::new(collab_id, params, n as u64, Some(master.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelFamily;
    use crate::partition::TaskGenerator;

    fn shard(task: &TaskSpec, n: usize, seed: u64) -> Dataset {
        TaskGenerator::new(task, 1)
            .unwrap()
            .iid_dataset(n, 1.0, seed)
            .unwrap()
    }

    #[test]
    fn config_validation_and_steps() {
        let cfg = LocalTrainConfig::default();
        assert_eq!(cfg.learning_rate, 5e-5);
        assert_eq!(cfg.epochs_per_round, 1.0);
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.steps_for(33), 3);
        assert_eq!(cfg.steps_for(1), 1);
        let half = LocalTrainConfig {
            epochs_per_round: 0.5,
            ..cfg
        };
        assert_eq!(half.steps_for(33), 1);
        assert!(LocalTrainConfig {
            learning_rate: 0.0,
            ..cfg
        }
        .validate()
        .is_err());
        assert!(LocalTrainConfig {
            epochs_per_round: -1.0,
            ..cfg
        }
        .validate()
        .is_err());
        assert!(LocalTrainConfig {
            batch_size: 0,
            ..cfg
        }
        .validate()
        .is_err());
        assert!(LocalTrainConfig {
            momentum: 1.0,
            ..cfg
        }
        .validate()
        .is_err());
    }

    #[test]
    fn vanishing_learning_rate_is_a_no_op() {
        let task = TaskSpec::default();
        let data = shard(&task, 40, 2);
        let master = task
            .params_from_flat(&vec![0.3; task.num_params()])
            .unwrap();
        let cfg = LocalTrainConfig {
            learning_rate: 1e-30,
            ..Default::default()
        };
        let up = local_train("a", &master, &data, &task, &cfg).unwrap();
        for (a, b) in up.params.flatten().iter().zip(master.flatten()) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert_eq!(up.sample_count, 40);
        assert_eq!(up.prev_params.as_ref(), Some(&master));
    }

    #[test]
    fn training_is_deterministic_and_seed_sensitive() {
        let task = TaskSpec::default();
        let data = shard(&task, 100, 3);
        let master = task.init_params(0).unwrap();
        let cfg = LocalTrainConfig {
            learning_rate: 0.05,
            epochs_per_round: 2.5,
            ..Default::default()
        };
        let a = local_train("a", &master, &data, &task, &cfg).unwrap();
        let b = local_train("a", &master, &data, &task, &cfg).unwrap();
        let bits = |u: &CollaboratorUpdate| {
            u.params
                .flatten()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));
        let c = local_train(
            "a",
            &master,
            &data,
            &task,
            &LocalTrainConfig { seed: 1, ..cfg },
        )
        .unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn one_epoch_descends_at_default_lr() {
        let task = TaskSpec::default();
        let data = shard(&task, 200, 4);
        let master = task.init_params(0).unwrap();
        let cfg = LocalTrainConfig::default();
        let before = evaluate(&master, &data, &task).unwrap().loss;
        let up = local_train("a", &master, &data, &task, &cfg).unwrap();
        let after = evaluate(&up.params, &data, &task).unwrap().loss;
        assert!(after <= before, "{after} > {before}");
    }

    #[test]
    fn momentum_changes_the_path() {
        let task = TaskSpec::default();
        let data = shard(&task, 64, 4);
        let master = task.init_params(0).unwrap();
        let plain = LocalTrainConfig {
            learning_rate: 0.01,
            ..Default::default()
        };
        let heavy = LocalTrainConfig {
            momentum: 0.9,
            ..plain
        };
        let a = local_train("a", &master, &data, &task, &plain).unwrap();
        let b = local_train("a", &master, &data, &task, &heavy).unwrap();
        assert_ne!(a.params, b.params);
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let task = TaskSpec::default();
        let data = shard(&task, 400, 5);
        let m = evaluate(&task.init_params(0).unwrap(), &data, &task).unwrap();
        assert!((m.loss - (4.0f64).ln()).abs() < 1e-12);
        // ties resolve to class 0
        let zeros = data.labels().iter().filter(|&&y| y == 0).count() as f64 / 400.0;
        assert_eq!(m.accuracy, zeros);
        assert!((m.accuracy - 0.25).abs() < 0.1);
    }

    #[test]
    fn separable_set_with_oracle_params() {
        let task = TaskSpec {
            num_features: 2,
            num_classes: 2,
            ..Default::default()
        };
        let data = Dataset::new(
            2,
            vec![1.0, 0.0, 2.0, 0.5, -1.0, 0.0, -3.0, 1.0],
            vec![0, 0, 1, 1],
        )
        .unwrap();
        // class 0 scores x0, class 1 scores -x0
        let params = task
            .params_from_flat(&[1.0, 0.0, -1.0, 0.0, 0.0, 0.0])
            .unwrap();
        assert_eq!(evaluate(&params, &data, &task).unwrap().accuracy, 1.0);
    }

    #[test]
    fn loss_matches_scalar_oracle() {
        for family in [ModelFamily::LinearSoftmax, ModelFamily::Mlp1Hidden] {
            let task = TaskSpec {
                model_family: family,
                num_features: 3,
                num_classes: 3,
                hidden_width: 4,
                ..Default::default()
            };
            let data = shard(&task, 30, 6);
            let params = task.init_params(9).unwrap();
            let got = evaluate(&params, &data, &task).unwrap().loss;

            let p = |name: &str| params.get(name).unwrap().values().to_vec();
            let mut total = 0.0;
            for i in 0..data.len() {
                let x = data.row(i);
                let z: Vec<f64> = match family {
                    ModelFamily::LinearSoftmax => {
                        let (w, b) = (p("linear.weight"), p("linear.bias"));
                        (0..3)
                            .map(|k| b[k] + (0..3).map(|j| w[k * 3 + j] * x[j]).sum::<f64>())
                            .collect()
                    }
                    ModelFamily::Mlp1Hidden => {
                        let (w1, b1, w2, b2) = (
                            p("hidden.weight"),
                            p("hidden.bias"),
                            p("output.weight"),
                            p("output.bias"),
                        );
                        let h: Vec<f64> = (0..4)
                            .map(|j| {
                                (b1[j] + (0..3).map(|m| w1[j * 3 + m] * x[m]).sum::<f64>()).tanh()
                            })
                            .collect();
                        (0..3)
                            .map(|k| b2[k] + (0..4).map(|j| w2[k * 4 + j] * h[j]).sum::<f64>())
                            .collect()
                    }
                };
                let denom: f64 = z.iter().map(|v| v.exp()).sum();
                total += -(z[data.label(i) as usize].exp() / denom).ln();
            }
            assert!((got - total / 30.0).abs() < 1e-10, "{family:?}");
        }
    }

    #[test]
    fn schema_and_shard_errors() {
        let task = TaskSpec::default();
        let other = TaskSpec {
            num_features: 3,
            ..task
        };
        let data = shard(&task, 10, 1);
        let cfg = LocalTrainConfig::default();
        assert!(matches!(
            local_train("a", &other.init_params(0).unwrap(), &data, &task, &cfg),
            Err(Error::SchemaMismatch(_))
        ));
        let empty = Dataset::new(8, vec![], vec![]).unwrap();
        assert!(matches!(
            local_train("a", &task.init_params(0).unwrap(), &empty, &task, &cfg),
            Err(Error::EmptyShard)
        ));
        assert!(evaluate(&task.init_params(0).unwrap(), &shard(&other, 5, 1), &task).is_err());
    }
}
