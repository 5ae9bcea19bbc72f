use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::autodiff::Tape;
use crate::encoder::{GreatModel, InteractionKind, ModelConfig};
use crate::error::{Error, Result};
use crate::harness::container::{load_container, save_container};
use crate::harness::data::SyntheticDataset;
use crate::harness::metrics::{evaluate, MetricsRecord};
use crate::tensor::Tensor;

/// Contents of a training config file: the model fields plus optimiser
/// settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub patch: usize,
    pub channels: usize,
    pub nodes: usize,
    pub graph_depth: usize,
    pub heads: usize,
    pub layers: usize,
    pub interaction: InteractionKind,
    pub mlp_ratio: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub seed: u64,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::new(ModelConfig::default(), 1e-2, 2000, 1)
    }
}

impl TrainConfig {
    pub fn new(model: ModelConfig, lr: f64, steps: usize, batch_size: usize) -> Self {
        let ModelConfig {
            patch,
            channels,
            nodes,
            graph_depth,
            heads,
            layers,
            interaction,
            mlp_ratio,
            classes,
            height,
            width,
            in_channels,
            seed,
        } = model;
        Self {
            patch,
            channels,
            nodes,
            graph_depth,
            heads,
            layers,
            interaction,
            mlp_ratio,
            classes,
            height,
            width,
            in_channels,
            seed,
            lr,
            steps,
            batch_size,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            patch: self.patch,
            channels: self.channels,
            nodes: self.nodes,
            graph_depth: self.graph_depth,
            heads: self.heads,
            layers: self.layers,
            interaction: self.interaction,
            mlp_ratio: self.mlp_ratio,
            classes: self.classes,
            height: self.height,
            width: self.width,
            in_channels: self.in_channels,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!(
                "lr must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: TrainConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Result of a finished run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: GreatModel,
    pub records: Vec<MetricsRecord>,
    /// Training-set metrics of the final weights, absent for zero steps.
    pub miou: Option<f64>,
    pub pixacc: Option<f64>,
}

fn check_compatible(config: &TrainConfig, data: &SyntheticDataset) -> Result<()> {
    data.validate()?;
    let expect = [config.height, config.width, config.in_channels];
    if data.images[0].shape() != expect {
        return Err(Error::Config(format!(
            "dataset images are {:?} but the config expects {expect:?}",
            data.images[0].shape()
        )));
    }
    if data.classes > config.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model predicts {}",
            data.classes, config.classes
        )));
    }
    Ok(())
}

/// Flattens the model's leaves in traversal order.
fn leaves(model: &GreatModel) -> Vec<Tensor> {
    let mut out = Vec::new();
    model.map(&mut |_, t| out.push(t.clone()));
    out
}

/// Rebuilds a model of the same structure from leaves in traversal order.
fn rebuild(model: &GreatModel, leaves: Vec<Tensor>) -> GreatModel {
    let mut it = leaves.into_iter();
    model.map(&mut |_, _| it.next().expect("one leaf per weight"))
}

/// Predicted masks with frozen weights, one tape per image.
pub fn predict(model: &GreatModel, config: &ModelConfig, images: &[Tensor]) -> Result<Vec<Tensor>> {
    images
        .iter()
        .map(|img| {
            let mut tape = Tape::new();
            let w = model.bind_frozen(&mut tape);
            Ok(w.forward(&mut tape, config, img)?.mask)
        })
        .collect()
}

/// Momentum-free SGD on mean per-pixel cross-entropy. Items are visited in
/// a seeded shuffled order, reshuffled every epoch. Every record is passed
/// to `sink` as soon as its step finishes; the last one also carries the
/// training-set mIoU and pixel accuracy.
pub fn train(
    config: &TrainConfig,
    data: &SyntheticDataset,
    sink: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_compatible(config, data)?;
    let mc = config.model();
    let mut model = GreatModel::init(&mc)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    order_rng.set_stream(1);
    let mut order: Vec<usize> = Vec::new();
    let mut records = Vec::with_capacity(config.steps);
    let inv_batch = 1.0 / config.batch_size as f64;

    for step in 0..config.steps {
        let start = Instant::now();
        let mut grads: Vec<Tensor> = leaves(&model).iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut loss_sum = 0.0;
        for _ in 0..config.batch_size {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut order_rng);
                order.reverse();
            }
            let item = order.pop().expect("refilled above");
            let mut tape = Tape::new();
            let w = model.bind(&mut tape);
            let (loss, _) = w.loss(&mut tape, &mc, &data.images[item], &data.masks[item])?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Divergence { step, loss: value });
            }
            loss_sum += value;
            tape.backward(loss)?;
            let mut i = 0;
            w.map(&mut |_, v| {
                if let Some(g) = tape.grad(*v) {
                    for (acc, x) in grads[i].data_mut().iter_mut().zip(g.data()) {
                        *acc += x * inv_batch;
                    }
                }
                i += 1;
            });
        }
        let updated = leaves(&model)
            .into_iter()
            .zip(&grads)
            .map(|(w, g)| w.zip_map(g, |w, g| w - config.lr * g))
            .collect::<Result<Vec<_>>>()?;
        model = rebuild(&model, updated);
        let record = MetricsRecord {
            step,
            loss: loss_sum * inv_batch,
            miou: None,
            pixacc: None,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        if step + 1 < config.steps {
            sink(&record)?;
        }
        records.push(record);
    }

    let (mut miou, mut pixacc) = (None, None);
    if let Some(last) = records.last_mut() {
        let pred = predict(&model, &mc, &data.images)?;
        let (m, p) = evaluate(&pred, &data.masks, config.classes)?;
        last.miou = Some(m);
        last.pixacc = Some(p);
        (miou, pixacc) = (Some(m), Some(p));
        sink(last)?;
    }
    Ok(TrainOutcome {
        model,
        records,
        miou,
        pixacc,
    })
}

/// Mean loss over `window` records starting at `start`.
pub fn window_mean(records: &[MetricsRecord], start: usize, window: usize) -> f64 {
    let slice = &records[start..(start + window).min(records.len())];
    slice.iter().map(|r| r.loss).sum::<f64>() / slice.len() as f64
}

pub fn save_checkpoint(path: &Path, config: &TrainConfig, model: &GreatModel) -> Result<()> {
    let mut meta = Map::new();
    meta.insert("kind".into(), Value::from("checkpoint"));
    meta.insert("config".into(), serde_json::to_value(config)?);
    let names = model.names();
    let values = leaves(model);
    let tensors: Vec<(String, &Tensor)> = names.into_iter().zip(&values).collect();
    save_container(path, meta, &tensors)
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainConfig, GreatModel)> {
    let (mut meta, tensors) = load_container(path)?;
    if meta.get("kind") != Some(&Value::from("checkpoint")) {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let config: TrainConfig = serde_json::from_value(
        meta.remove("config")
            .ok_or_else(|| Error::Format("checkpoint has no config".into()))?,
    )?;
    config.validate()?;
    let template = GreatModel::init(&config.model())?;
    let names = template.names();
    if names.len() != tensors.len() || names.iter().zip(&tensors).any(|(a, (b, _))| a != b) {
        return Err(Error::Format(
            "checkpoint tensors do not match the configured model".into(),
        ));
    }
    let mut bad = None;
    let mut it = tensors.into_iter();
    let model = template.map(&mut |name, t| {
        let (_, loaded) = it.next().expect("lengths checked");
        if loaded.shape() != t.shape() && bad.is_none() {
            bad = Some(Error::Format(format!(
                "tensor {name}: shape {:?}, model expects {:?}",
                loaded.shape(),
                t.shape()
            )));
        }
        loaded
    });
    match bad {
        Some(e) => Err(e),
        None => Ok((config, model)),
    }
}

pub fn save_dataset(path: &Path, data: &SyntheticDataset) -> Result<()> {
    data.validate()?;
    let s = data.images[0].shape().to_vec();
    let n = data.len();
    let images = Tensor::new(
        &[n, s[0], s[1], s[2]],
        data.images.iter().flat_map(|t| t.data().iter().copied()).collect(),
    )?;
    let masks = Tensor::new(
        &[n, s[0], s[1]],
        data.masks.iter().flat_map(|t| t.data().iter().copied()).collect(),
    )?;
    let mut meta = Map::new();
    meta.insert("kind".into(), Value::from("dataset"));
    meta.insert("classes".into(), Value::from(data.classes));
    meta.insert("seed".into(), serde_json::to_value(data.seed)?);
    save_container(path, meta, &[("images".into(), &images), ("masks".into(), &masks)])
}

pub fn load_dataset(path: &Path) -> Result<SyntheticDataset> {
    let (meta, tensors) = load_container(path)?;
    if meta.get("kind") != Some(&Value::from("dataset")) {
        return Err(Error::Format("not a dataset file".into()));
    }
    let classes = meta
        .get("classes")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Format("dataset has no class count".into()))? as usize;
    let seed = meta.get("seed").and_then(Value::as_u64);
    let find = |name: &str| {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("dataset has no {name} tensor")))
    };
    let (images, masks) = (find("images")?, find("masks")?);
    let (is, ms) = (images.shape(), masks.shape());
    if is.len() != 4 || ms.len() != 3 || is[..3] != ms[..] {
        return Err(Error::Format(format!("images {is:?} and masks {ms:?} are not aligned")));
    }
    let split = |t: &Tensor, shape: &[usize]| -> Result<Vec<Tensor>> {
        let per: usize = shape.iter().product();
        t.data()
            .chunks_exact(per)
            .map(|c| Tensor::new(shape, c.to_vec()))
            .collect()
    };
    let data = SyntheticDataset {
        images: split(images, &is[1..])?,
        masks: split(masks, &ms[1..])?,
        classes,
        seed,
    };
    data.validate()?;
    Ok(data)
}
