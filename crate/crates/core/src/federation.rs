//! Federated averaging over dense heads.
//!
//! Each round every device starts from the current global model, trains on
//! its next `B` unseen samples for `L` local episodes, and the server replaces
//! the global model with the uniform mean of the device models. Devices train
//! in parallel; the mean is always summed in ascending device order so serial
//! and parallel execution agree bit for bit.

use rayon::prelude::*;

use crate::data::DeviceStream;
use crate::error::{Error, Result};
use crate::nn::{argmax, DenseHead, EmbeddingSample, HeadShape, InitMode, DEFAULT_LEARNING_RATE};

/// Flat parameter vector of a head: weight rows by class, then bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBlob {
    shape: HeadShape,
    values: Vec<f64>,
}

impl ModelBlob {
    pub fn new(shape: HeadShape, values: Vec<f64>) -> Result<Self> {
        if shape.embedding_dim == 0 || shape.num_classes == 0 {
            return Err(Error::usage("blob dimensions must be positive"));
        }
        if values.len() != shape.param_count() {
            return Err(Error::Shape {
                what: "model blob",
                expected: shape.param_count(),
                got: values.len(),
            });
        }
        Ok(Self { shape, values })
    }

    pub fn from_head(head: &DenseHead) -> Self {
        Self {
            shape: head.shape(),
            values: head.flat_params().collect(),
        }
    }

    pub fn to_head(&self) -> Result<DenseHead> {
        DenseHead::from_flat(self.shape, &self.values)
    }

    pub fn shape(&self) -> HeadShape {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

impl From<&DenseHead> for ModelBlob {
    fn from(head: &DenseHead) -> Self {
        ModelBlob::from_head(head)
    }
}

/// Element-wise mean, summed left to right in slice order.
pub fn average_blobs(blobs: &[ModelBlob]) -> Result<ModelBlob> {
    let (first, rest) = blobs
        .split_first()
        .ok_or_else(|| Error::usage("cannot average zero models"))?;
    let mut acc = first.values.clone();
    for blob in rest {
        if blob.shape != first.shape {
            return Err(Error::Shape {
                what: "averaged blob",
                expected: first.values.len(),
                got: blob.values.len(),
            });
        }
        for (a, v) in acc.iter_mut().zip(&blob.values) {
            *a += v;
        }
    }
    let n = blobs.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(ModelBlob {
        shape: first.shape,
        values: acc,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundConfig {
    pub num_devices: usize,
    pub batch_size: usize,
    pub local_episodes: usize,
    pub learning_rate: f64,
    pub epochs: usize,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            num_devices: 2,
            batch_size: 20,
            local_episodes: 5,
            learning_rate: DEFAULT_LEARNING_RATE,
            epochs: 100,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_devices", self.num_devices),
            ("batch_size", self.batch_size),
            ("local_episodes", self.local_episodes),
            ("epochs", self.epochs),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::usage(format!("{name} must be at least 1")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::usage(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }

    /// Training samples consumed by all devices together in one round.
    pub fn samples_per_round(&self) -> usize {
        self.num_devices * self.batch_size
    }
}

#[derive(Debug, Clone)]
pub struct DeviceState {
    pub device_id: usize,
    pub head: DenseHead,
    pub stream: DeviceStream,
    samples_seen: usize,
}

impl DeviceState {
    pub fn new(stream: DeviceStream, shape: HeadShape) -> Result<Self> {
        Ok(Self {
            device_id: stream.device_id,
            head: DenseHead::zeros(shape.embedding_dim, shape.num_classes)?,
            stream,
            samples_seen: 0,
        })
    }

    pub fn samples_seen(&self) -> usize {
        self.samples_seen
    }

    /// Loads `global`, trains on the next batch, and returns accuracy on that batch.
    fn local_round(&mut self, pool: &[EmbeddingSample], global: &ModelBlob, cfg: &RoundConfig) -> Result<f64> {
        self.head = global.to_head()?;
        let batch: Vec<EmbeddingSample> = self
            .stream
            .next_batch(cfg.batch_size)?
            .iter()
            .map(|&i| {
                pool.get(i).cloned().ok_or_else(|| {
                    Error::usage(format!(
                        "device {} index {i} outside pool of {}",
                        self.device_id,
                        pool.len()
                    ))
                })
            })
            .collect::<Result<_>>()?;
        self.samples_seen += batch.len();
        self.head.train_batch(&batch, cfg.learning_rate, cfg.local_episodes)?;
        accuracy(&self.head, &batch)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub global: ModelBlob,
    pub val_accuracy: f64,
    /// Accuracy of each device's trained head on the batch it just trained on.
    pub train_accuracies: Vec<f64>,
}

pub fn federated_round(
    devices: &mut [DeviceState],
    pool: &[EmbeddingSample],
    global: &ModelBlob,
    cfg: &RoundConfig,
    val: &[EmbeddingSample],
) -> Result<RoundOutcome> {
    if devices.is_empty() {
        return Err(Error::usage("no devices"));
    }
    if val.is_empty() {
        return Err(Error::usage("empty validation set"));
    }
    // Check every device up front so a failing round leaves no cursor moved.
    for d in devices.iter() {
        if d.stream.remaining() < cfg.batch_size {
            return Err(Error::DataExhausted {
                device: d.device_id,
                needed: cfg.batch_size,
                remaining: d.stream.remaining(),
            });
        }
    }
    devices.sort_by_key(|d| d.device_id);

    let train_accuracies = devices
        .par_iter_mut()
        .map(|d| d.local_round(pool, global, cfg))
        .collect::<Result<Vec<f64>>>()?;

    let local: Vec<ModelBlob> = devices.iter().map(|d| ModelBlob::from_head(&d.head)).collect();
    let new_global = average_blobs(&local)?;
    let val_accuracy = evaluate(&new_global, val)?;
    Ok(RoundOutcome {
        global: new_global,
        val_accuracy,
        train_accuracies,
    })
}

fn accuracy(head: &DenseHead, samples: &[EmbeddingSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::usage("cannot evaluate on an empty set"));
    }
    let mut correct = 0usize;
    for s in samples {
        if argmax(&head.forward(&s.features)?) == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Fraction of `samples` whose argmax prediction matches the label.
pub fn evaluate(blob: &ModelBlob, samples: &[EmbeddingSample]) -> Result<f64> {
    accuracy(&blob.to_head()?, samples)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based round number.
    pub epoch: usize,
    pub val_accuracy: f64,
    pub mean_train_accuracy: f64,
    /// Training samples consumed across all devices so far.
    pub examples_seen: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRun {
    pub history: Vec<EpochRecord>,
    pub global: ModelBlob,
}

/// Runs `cfg.epochs` federated rounds from a freshly initialised global head.
pub fn run_training(
    cfg: &RoundConfig,
    shape: HeadShape,
    init: &InitMode,
    streams: Vec<DeviceStream>,
    pool: &[EmbeddingSample],
    val: &[EmbeddingSample],
) -> Result<TrainingRun> {
    cfg.validate()?;
    if streams.len() != cfg.num_devices {
        return Err(Error::usage(format!(
            "config has {} devices but {} streams were given",
            cfg.num_devices,
            streams.len()
        )));
    }
    let needed = cfg.epochs * cfg.batch_size;
    if let Some(short) = streams.iter().find(|s| s.remaining() < needed) {
        return Err(Error::DataExhausted {
            device: short.device_id,
            needed,
            remaining: short.remaining(),
        });
    }

    let mut global = ModelBlob::from_head(&DenseHead::init(shape.embedding_dim, shape.num_classes, init)?);
    let mut devices = streams
        .into_iter()
        .map(|s| DeviceState::new(s, shape))
        .collect::<Result<Vec<_>>>()?;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let out = federated_round(&mut devices, pool, &global, cfg, val)?;
        let mean_train = out.train_accuracies.iter().sum::<f64>() / out.train_accuracies.len() as f64;
        history.push(EpochRecord {
            epoch,
            val_accuracy: out.val_accuracy,
            mean_train_accuracy: mean_train,
            examples_seen: epoch * cfg.samples_per_round(),
        });
        global = out.global;
    }
    Ok(TrainingRun { history, global })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{partition_indices, synth_separable};

    fn blob(values: Vec<f64>) -> ModelBlob {
        ModelBlob::new(HeadShape::new(4, 2), values).unwrap()
    }

    #[test]
    fn average_basic_cases() {
        let w = blob((0..10).map(|i| i as f64 * 0.3 - 1.0).collect());
        assert_eq!(average_blobs(&[w.clone(), w.clone()]).unwrap(), w);
        assert_eq!(average_blobs(&vec![w.clone(); 4]).unwrap(), w);
        // sum-then-divide is only exact for power-of-two counts
        let three = average_blobs(&vec![w.clone(); 3]).unwrap();
        for (a, b) in three.values().iter().zip(w.values()) {
            assert!((a - b).abs() <= f64::EPSILON * b.abs());
        }
        let neg = blob(w.values().iter().map(|v| -v).collect());
        let zero = average_blobs(&[w.clone(), neg]).unwrap();
        assert!(zero.values().iter().all(|&v| v == 0.0));
        assert_eq!(average_blobs(std::slice::from_ref(&w)).unwrap(), w);
    }

    #[test]
    fn average_matches_naive_mean() {
        let blobs: Vec<ModelBlob> = (0..3)
            .map(|k| blob((0..10).map(|i| ((i * 7 + k * 13) % 11) as f64 / 3.0 - 1.7).collect()))
            .collect();
        let got = average_blobs(&blobs).unwrap();
        for i in 0..10 {
            let naive = (blobs[0].values()[i] + blobs[1].values()[i] + blobs[2].values()[i]) / 3.0;
            assert_eq!(got.values()[i], naive);
        }
    }

    #[test]
    fn average_errors() {
        assert!(matches!(average_blobs(&[]), Err(Error::Usage(_))));
        let other = ModelBlob::new(HeadShape::new(3, 2), vec![0.0; 8]).unwrap();
        assert!(matches!(
            average_blobs(&[blob(vec![0.0; 10]), other]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn zero_head_on_balanced_set_is_half() {
        let ds = synth_separable(4, 2, 10, 1.0, 0).unwrap();
        let zero = ModelBlob::from_head(&DenseHead::zeros(4, 2).unwrap());
        assert_eq!(evaluate(&zero, &ds.train()).unwrap(), 0.5);
        assert!(matches!(evaluate(&zero, &[]), Err(Error::Usage(_))));
    }

    #[test]
    fn evaluate_perfect_separator() {
        let head = DenseHead::from_parts(2, 2, vec![1.0, 0.0, -1.0, 0.0], vec![0.0, 0.0]).unwrap();
        let samples = vec![
            EmbeddingSample::new(vec![2.0, 5.0], 0),
            EmbeddingSample::new(vec![0.5, -3.0], 0),
            EmbeddingSample::new(vec![-1.0, 1.0], 1),
        ];
        assert_eq!(evaluate(&ModelBlob::from_head(&head), &samples).unwrap(), 1.0);
    }

    #[test]
    fn two_devices_with_identical_batches_agree() {
        let ds = synth_separable(5, 2, 8, 2.0, 1).unwrap();
        let pool = ds.train();
        let global = ModelBlob::from_head(&DenseHead::init(5, 2, &InitMode::Random { seed: 2 }).unwrap());
        let cfg = RoundConfig {
            num_devices: 2,
            batch_size: 4,
            local_episodes: 3,
            ..Default::default()
        };
        let shape = HeadShape::new(5, 2);
        let mut devices = vec![
            DeviceState::new(DeviceStream::new(0, vec![0, 1, 2, 3]), shape).unwrap(),
            DeviceState::new(DeviceStream::new(1, vec![0, 1, 2, 3]), shape).unwrap(),
        ];
        let out = federated_round(&mut devices, &pool, &global, &cfg, &pool).unwrap();
        assert_eq!(out.global, ModelBlob::from_head(&devices[0].head));
        assert_eq!(devices[0].samples_seen(), 4);
        assert_eq!(devices[1].stream.cursor(), 4);
    }

    #[test]
    fn exhausted_device_is_named_and_nothing_moves() {
        let ds = synth_separable(3, 2, 6, 2.0, 1).unwrap();
        let pool = ds.train();
        let shape = HeadShape::new(3, 2);
        let mut devices = vec![
            DeviceState::new(DeviceStream::new(0, vec![0, 1, 2]), shape).unwrap(),
            DeviceState::new(DeviceStream::new(1, vec![3]), shape).unwrap(),
        ];
        let cfg = RoundConfig {
            num_devices: 2,
            batch_size: 2,
            ..Default::default()
        };
        let global = ModelBlob::from_head(&DenseHead::zeros(3, 2).unwrap());
        let err = federated_round(&mut devices, &pool, &global, &cfg, &pool).unwrap_err();
        assert!(matches!(err, Error::DataExhausted { device: 1, .. }));
        assert_eq!(devices[0].stream.cursor(), 0);
    }

    #[test]
    fn minimal_run_is_one_step_and_eval() {
        let ds = synth_separable(3, 2, 4, 2.0, 9).unwrap();
        let pool = ds.train();
        let cfg = RoundConfig {
            num_devices: 1,
            batch_size: 1,
            local_episodes: 1,
            learning_rate: 0.1,
            epochs: 1,
        };
        let streams = partition_indices(pool.len(), 1, 5).unwrap();
        let first = streams[0].indices()[0];
        let run = run_training(&cfg, HeadShape::new(3, 2), &InitMode::Zeros, streams, &pool, &pool).unwrap();
        assert_eq!(run.history.len(), 1);

        let mut head = DenseHead::zeros(3, 2).unwrap();
        head.train_batch(&pool[first..=first], 0.1, 1).unwrap();
        assert_eq!(run.global, ModelBlob::from_head(&head));
        assert_eq!(run.history[0].val_accuracy, evaluate(&run.global, &pool).unwrap());
        assert_eq!(run.history[0].examples_seen, 1);
    }

    #[test]
    fn run_training_checks_data_budget() {
        let ds = synth_separable(3, 2, 10, 2.0, 9).unwrap();
        let pool = ds.train();
        let cfg = RoundConfig {
            num_devices: 2,
            batch_size: 3,
            epochs: 2,
            ..Default::default()
        };
        let streams = partition_indices(pool.len(), 2, 0).unwrap();
        let err = run_training(&cfg, HeadShape::new(3, 2), &InitMode::Zeros, streams, &pool, &pool).unwrap_err();
        assert!(matches!(
            err,
            Error::DataExhausted {
                needed: 6,
                remaining: 5,
                ..
            }
        ));
    }
}
