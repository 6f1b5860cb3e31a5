//! The binary contrast classifier: a small convnet with a single logit
//! output, trained with binary cross-entropy and SGD with momentum.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader};
use crate::data::{Dataset, LabeledSample, Split};
use crate::error::{DecodeError, Error, Result};
use crate::grid::Image;
use crate::nn::{self, BackwardMode, LayerSpec, Network, Tape, Tensor};
use crate::rng::{labeled_seed, rng_for};

pub const MODEL_MAGIC: &str = "ATTRIBMDL";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_side: usize,
    /// Full layer stack; must end with `dense 1 -> sigmoid`.
    pub layers: Vec<LayerSpec>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        use LayerSpec::*;
        Self {
            input_side: 64,
            layers: vec![
                Conv2d { out_channels: 8, kernel: 3 },
                Relu,
                MaxPool2d,
                Conv2d { out_channels: 16, kernel: 3 },
                Relu,
                MaxPool2d,
                Dense { outputs: 32 },
                Relu,
                Dense { outputs: 1 },
                Sigmoid,
            ],
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 6,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.layers.len();
        if n < 2 || self.layers[n - 1] != LayerSpec::Sigmoid || self.layers[n - 2] != (LayerSpec::Dense { outputs: 1 }) {
            return Err(Error::Validation("model must end with a width-1 dense layer followed by sigmoid".into()));
        }
        if self.layers[..n - 1].contains(&LayerSpec::Sigmoid) {
            return Err(Error::Validation("sigmoid is only allowed as the output layer".into()));
        }
        if self.input_side == 0 || self.batch_size == 0 {
            return Err(Error::Validation("input side and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Validation("learning rate must be > 0 and momentum in [0, 1)".into()));
        }
        // Shape chaining is checked by building the network.
        Network::zeroed(self.input_shape(), &self.layers)?;
        Ok(())
    }

    pub fn input_shape(&self) -> Vec<usize> {
        vec![1, self.input_side, self.input_side]
    }

    /// Layers up to and including the logit.
    fn logit_layers(&self) -> &[LayerSpec] {
        &self.layers[..self.layers.len() - 1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs_run: usize,
    pub final_loss: f64,
    pub train_balanced_accuracy: f64,
    /// On the held-out (test + eval) samples.
    pub test_balanced_accuracy: f64,
}

/// A trained classifier. The network stored here stops at the logit; the
/// sigmoid head is applied by [`TrainedModel::predict_prob`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub config: ModelConfig,
    network: Network,
    pub meta: TrainingMeta,
}

/// Class evidence: the logit for class 1 and the negated logit for class 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScore {
    pub class: u8,
    pub value: f64,
}

impl ClassScore {
    /// Backward seed turning the logit tape into a gradient of this score.
    pub fn seed(&self) -> Tensor {
        Tensor::scalar(class_sign(self.class))
    }
}

fn class_sign(class: u8) -> f64 {
    if class == 1 {
        1.0
    } else {
        -1.0
    }
}

fn check_class(class: u8) -> Result<()> {
    if class > 1 {
        return Err(Error::Param(format!("class must be 0 or 1, got {class}")));
    }
    Ok(())
}

impl TrainedModel {
    /// Wraps an existing logit network (layers up to the width-1 dense).
    pub fn from_network(config: ModelConfig, network: Network, meta: TrainingMeta) -> Result<Self> {
        config.validate()?;
        if network.specs() != config.logit_layers() || network.input_shape() != config.input_shape().as_slice() {
            return Err(Error::Contract("network does not match the model config".into()));
        }
        Ok(Self { config, network, meta })
    }

    /// The network up to the pre-sigmoid logit.
    pub fn logit_network(&self) -> &Network {
        &self.network
    }

    pub fn logit(&self, image: &Image) -> Result<f64> {
        Ok(self.network.infer(&image.to_tensor())?.data()[0])
    }

    pub fn predict_prob(&self, image: &Image) -> Result<f64> {
        Ok(nn::sigmoid(self.logit(image)?))
    }

    /// Predicted class at the 0.5 threshold.
    pub fn predict_class(&self, image: &Image) -> Result<u8> {
        Ok((self.logit(image)? >= 0.0) as u8)
    }

    /// Signed class score plus the logit tape it was read from.
    pub fn class_score(&self, image: &Image, class: u8) -> Result<(ClassScore, Tape<'_>)> {
        check_class(class)?;
        let (out, tape) = self.network.forward(&image.to_tensor())?;
        let value = class_sign(class) * out.data()[0];
        Ok((ClassScore { class, value }, tape))
    }

    /// Input gradient of the class score.
    pub fn score_gradient(&self, image: &Image, class: u8, mode: BackwardMode) -> Result<Tensor> {
        let (score, tape) = self.class_score(image, class)?;
        tape.backward(&score.seed(), mode)
    }

    pub fn balanced_accuracy<'a>(&self, samples: impl IntoIterator<Item = &'a LabeledSample>) -> Result<f64> {
        let samples: Vec<&LabeledSample> = samples.into_iter().collect();
        let preds = samples
            .par_iter()
            .map(|s| self.predict_class(&s.image))
            .collect::<Result<Vec<_>>>()?;
        Ok(balanced_accuracy(
            samples.iter().zip(preds).map(|(s, p)| (s.label, p)),
        ))
    }
}

/// Mean of per-class accuracies over `(label, prediction)` pairs. Classes
/// absent from the input are skipped; an empty input scores 0.
pub fn balanced_accuracy(pairs: impl IntoIterator<Item = (u8, u8)>) -> f64 {
    let mut total = [0usize; 2];
    let mut correct = [0usize; 2];
    for (label, pred) in pairs {
        let l = label.min(1) as usize;
        total[l] += 1;
        correct[l] += (label == pred) as usize;
    }
    let accs: Vec<f64> = (0..2)
        .filter(|&c| total[c] > 0)
        .map(|c| correct[c] as f64 / total[c] as f64)
        .collect();
    if accs.is_empty() {
        0.0
    } else {
        accs.iter().sum::<f64>() / accs.len() as f64
    }
}

/// Numerically stable binary cross-entropy on a logit.
fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

pub fn train(dataset: &Dataset, config: &ModelConfig) -> Result<TrainedModel> {
    config.validate()?;
    let train: Vec<&LabeledSample> = dataset.split(Split::Train).collect();
    let (neg, pos) = dataset.class_counts(Split::Train);
    if neg == 0 || pos == 0 {
        return Err(Error::Validation(format!(
            "training split needs both classes (got {neg} negatives, {pos} positives)"
        )));
    }
    for s in dataset.samples.iter() {
        if s.image.dims() != (config.input_side, config.input_side) {
            return Err(Error::Validation(format!(
                "sample {} is {:?}, model expects {}x{}",
                s.id,
                s.image.dims(),
                config.input_side,
                config.input_side
            )));
        }
    }

    let mut init_rng = rng_for(labeled_seed(config.seed, "init"), 0);
    let mut network = Network::new(config.input_shape(), config.logit_layers(), &mut init_rng)?;
    let mut velocity: Vec<Vec<f64>> = network.parameters().iter().map(|p| vec![0.0; p.len()]).collect();
    let shuffle_root = labeled_seed(config.seed, "shuffle");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut final_loss = f64::NAN;

    for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng_for(shuffle_root, epoch as u64));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let net = &network;
            // Per-sample gradients in parallel, reduced in batch order.
            let per_sample = batch
                .par_iter()
                .map(|&i| {
                    let s = train[i];
                    let (out, tape) = net.forward(&s.image.to_tensor())?;
                    let z = out.data()[0];
                    let y = s.label as f64;
                    let loss = bce_with_logit(z, y);
                    let grads = tape.backward_params(&Tensor::scalar((nn::sigmoid(z) - y) * scale))?;
                    Ok((loss, grads))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut sum = per_sample[0].1.clone();
            for (_, g) in &per_sample[1..] {
                for (acc, gi) in sum.iter_mut().zip(g) {
                    for (a, b) in acc.iter_mut().zip(gi) {
                        *a += b;
                    }
                }
            }
            epoch_loss += per_sample.iter().map(|(l, _)| l).sum::<f64>();
            for ((param, vel), grad) in network.parameters_mut().into_iter().zip(&mut velocity).zip(&sum) {
                for ((p, v), g) in param.iter_mut().zip(vel.iter_mut()).zip(grad) {
                    *v = config.momentum * *v + g;
                    *p -= config.learning_rate * *v;
                }
            }
        }
        final_loss = epoch_loss / train.len() as f64;
        if !final_loss.is_finite() || network.parameters().iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Training {
                epoch,
                message: format!("loss became {final_loss}"),
            });
        }
        log::info!("epoch {epoch}: mean loss {final_loss:.5}");
    }

    let mut model = TrainedModel {
        config: config.clone(),
        network,
        meta: TrainingMeta {
            seed: config.seed,
            epochs_run: config.epochs,
            final_loss,
            train_balanced_accuracy: 0.0,
            test_balanced_accuracy: 0.0,
        },
    };
    model.meta.train_balanced_accuracy = model.balanced_accuracy(dataset.split(Split::Train))?;
    model.meta.test_balanced_accuracy = model.balanced_accuracy(dataset.held_out())?;
    Ok(model)
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    config: ModelConfig,
    meta: TrainingMeta,
}

pub fn encode_model(model: &TrainedModel) -> Vec<u8> {
    let header = serde_json::to_string(&ModelHeader {
        config: model.config.clone(),
        meta: model.meta.clone(),
    })
    .expect("model header serializes");
    let mut out = MODEL_MAGIC.as_bytes().to_vec();
    binio::put_u32(&mut out, MODEL_VERSION);
    binio::put_string(&mut out, &header);
    let params = model.network.parameters();
    binio::put_u32(&mut out, params.len() as u32);
    for p in params {
        binio::put_u64(&mut out, p.len() as u64);
        binio::put_f64s(&mut out, p);
    }
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<TrainedModel> {
    let mut r = Reader::new(bytes);
    r.magic(MODEL_MAGIC).map_err(Error::decode)?;
    let version = r.u32().map_err(Error::decode)?;
    if version != MODEL_VERSION {
        return Err(Error::decode(DecodeError::UnsupportedVersion {
            found: version,
            expected: MODEL_VERSION,
        }));
    }
    let header: ModelHeader = serde_json::from_str(&r.string().map_err(Error::decode)?)
        .map_err(|e| Error::decode(DecodeError::Malformed(e.to_string())))?;
    let count = r.u32().map_err(Error::decode)? as usize;
    let mut params = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let n = r.u64().map_err(Error::decode)? as usize;
        params.push(r.f64s(n).map_err(Error::decode)?);
    }
    r.finish().map_err(Error::decode)?;
    let config = header.config;
    config.validate()?;
    let network = Network::with_parameters(config.input_shape(), config.logit_layers(), params)?;
    TrainedModel::from_network(config, network, header.meta)
}

pub fn save_model(model: &TrainedModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_model(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<TrainedModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes).map_err(|e| e.with_path(path))
}
