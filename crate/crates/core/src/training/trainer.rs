//! The optimization loop and checkpoint capture/restore.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use super::augment::{augment, AugmentConfig};
use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::loss::total_loss;
use super::optim::{cosine_lr, sgd_step, SgdConfig, SgdState};
use super::sampler::{pk_sample, IdentityIndex};
use crate::attention::Probe;
use crate::data::{stack, ImageSet};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::{ParamKind, ParamStore, Session};
use crate::tensor::{BnMode, Graph, Tensor};

pub type TrainRng = Xoshiro256PlusPlus;

pub fn rng_state(rng: &TrainRng) -> [u64; 4] {
    let v = serde_json::to_value(rng).expect("RNG state serializes");
    let words: Vec<u64> = v["s"]
        .as_array()
        .expect("state array")
        .iter()
        .map(|w| w.as_u64().expect("u64 word"))
        .collect();
    words.try_into().expect("four state words")
}

pub fn rng_from_state(state: [u64; 4]) -> TrainRng {
    let mut seed = [0u8; 32];
    for (chunk, w) in seed.chunks_exact_mut(8).zip(state) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    TrainRng::from_seed(seed)
}

/// Training images with dense labels `0..identities` in ascending pid order.
pub struct TrainData {
    pub set: ImageSet,
    pub labels: Vec<usize>,
    pub index: IdentityIndex,
    pub fill: [f32; 3],
}

impl TrainData {
    pub fn new(set: ImageSet) -> Result<Self> {
        if set.is_empty() {
            return Err(Error::data("training set is empty"));
        }
        let ids = set.identities();
        let labels: Vec<usize> = set
            .pids
            .iter()
            .map(|p| ids.binary_search(p).expect("pid listed"))
            .collect();
        let index = IdentityIndex::new(&labels)?;
        let fill = set.channel_mean();
        Ok(TrainData {
            set,
            labels,
            index,
            fill,
        })
    }

    pub fn classes(&self) -> usize {
        self.index.identities()
    }
}

/// Per-step values written to the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    /// Index of the step just taken, from 0.
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub ce_cls: f64,
    pub tri_cls: f64,
    pub parts: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub store: ParamStore<f32>,
    pub state: SgdState<f32>,
    /// Completed steps.
    pub step: u64,
    pub rng: TrainRng,
}

/// Rebuild a model from a checkpoint's spec and load its tensors. Missing,
/// extra or reshaped tensors are configuration errors.
pub fn restore_model(ckpt: &Checkpoint) -> Result<(Model, ParamStore<f32>)> {
    let cfg = ModelConfig::parse_spec(&ckpt.spec)?;
    let (model, mut store) = Model::build::<f32, _>(&cfg, &mut TrainRng::seed_from_u64(0))?;
    if ckpt.params.len() != store.len() {
        return Err(Error::config(format!(
            "checkpoint has {} tensors, its spec needs {}",
            ckpt.params.len(),
            store.len()
        )));
    }
    for (name, t) in &ckpt.params {
        store
            .set(name, t.clone())
            .map_err(|e| Error::config(format!("checkpoint does not match its spec: {e}")))?;
    }
    Ok((model, store))
}

impl Trainer {
    pub fn new(config: TrainConfig, classes: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = TrainRng::seed_from_u64(config.seed);
        let (model, store) = Model::build::<f32, _>(&config.model_config(classes)?, &mut rng)?;
        let state = SgdState::new(&store);
        Ok(Trainer {
            config,
            model,
            store,
            state,
            step: 0,
            rng,
        })
    }

    /// Continue from `ckpt`; its model must be the one `config` describes.
    pub fn from_checkpoint(config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        config.validate()?;
        let (model, store) = restore_model(ckpt)?;
        let expected = config.model_config(model.config.classes)?;
        if expected != model.config {
            return Err(Error::config(format!(
                "checkpoint model `{}` differs from the configured `{expected}`",
                model.config
            )));
        }
        let mut state = SgdState::new(&store);
        if ckpt.momentum.len() != state.velocity.len() {
            return Err(Error::config(
                "checkpoint momentum buffers do not match the parameters",
            ));
        }
        for ((id, v), (name, t)) in state.velocity.iter_mut().zip(&ckpt.momentum) {
            if store.name(*id) != name || v.shape() != t.shape() {
                return Err(Error::config(format!(
                    "momentum buffer {name:?} does not match parameter {:?}",
                    store.name(*id)
                )));
            }
            *v = t.clone();
        }
        if ckpt.step > config.steps {
            return Err(Error::config(format!(
                "checkpoint step {} is past steps = {}",
                ckpt.step, config.steps
            )));
        }
        Ok(Trainer {
            config,
            model,
            store,
            state,
            step: ckpt.step,
            rng: rng_from_state(ckpt.rng),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let params = self
            .store
            .iter()
            .map(|(_, n, e)| (n.to_string(), e.tensor.clone()))
            .collect();
        let momentum = self
            .state
            .velocity
            .iter()
            .map(|(id, v)| (self.store.name(*id).to_string(), v.clone()))
            .collect();
        Checkpoint {
            spec: self.model.config.to_string(),
            params,
            momentum,
            step: self.step,
            rng: rng_state(&self.rng),
        }
    }

    pub fn finished(&self) -> bool {
        self.step >= self.config.steps
    }

    fn check_data(&self, data: &TrainData) -> Result<()> {
        if data.set.size() != self.model.config.input {
            return Err(Error::data(format!(
                "images are {:?}, the model expects {:?}",
                data.set.size(),
                self.model.config.input
            )));
        }
        if data.classes() != self.model.config.classes {
            return Err(Error::data(format!(
                "dataset has {} identities, the classifier has {}",
                data.classes(),
                self.model.config.classes
            )));
        }
        Ok(())
    }

    /// Sample, augment, forward, backward and update once.
    pub fn train_step(&mut self, data: &TrainData) -> Result<StepLog> {
        self.check_data(data)?;
        let cfg = &self.config;
        let t = self.step;
        let lr = cosine_lr(t, cfg.steps, cfg.lr)?;
        let batch = pk_sample(
            &data.index,
            cfg.ids_per_batch,
            cfg.images_per_id,
            &mut self.rng,
        )?;
        let aug = AugmentConfig {
            flip: cfg.flip,
            erase: cfg.erase,
            fill: data.fill,
        };
        let mut images: Vec<Tensor<f32>> = batch
            .iter()
            .map(|b| data.set.images[b.image].clone())
            .collect();
        for img in &mut images {
            augment(img, &mut self.rng, &aug);
        }
        let labels: Vec<usize> = batch.iter().map(|b| b.label).collect();

        let g = Graph::new();
        let sess = Session::new(&g, &self.store, BnMode::Train, true);
        let feats = self
            .model
            .forward(&sess, g.constant(stack(&images)), Probe::default())?;
        let heads = self.model.heads(&sess, &feats)?;
        let terms = total_loss(&heads, &labels, cfg.margin)?;
        let scalar = |v: crate::tensor::Var<'_, f32>| f64::from(v.value().item());
        let log = StepLog {
            step: t,
            lr,
            total: scalar(terms.total),
            ce_cls: scalar(terms.ce_cls),
            tri_cls: scalar(terms.tri_cls),
            parts: scalar(terms.parts),
        };
        if !log.total.is_finite() {
            return Err(Error::Numeric {
                step: t,
                msg: format!("loss is {}", log.total),
            });
        }
        g.backward(terms.total)?;
        let grads = sess.grads();
        if let Some((id, _)) = grads.iter().find(|(_, gr)| !gr.all_finite()) {
            return Err(Error::Numeric {
                step: t,
                msg: format!("gradient of {:?} is not finite", self.store.name(*id)),
            });
        }
        let updates = sess.take_updates();
        drop(sess);
        self.store.apply_updates(updates);
        let sgd = SgdConfig {
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        };
        sgd_step(&mut self.store, &grads, &mut self.state, lr, sgd)?;
        self.step += 1;
        Ok(log)
    }

    /// Step until the configured total; `on_step` sees the trainer after
    /// each update and may stop the run by returning an error.
    pub fn run(
        &mut self,
        data: &TrainData,
        mut on_step: impl FnMut(&Trainer, &StepLog) -> Result<()>,
    ) -> Result<()> {
        while !self.finished() {
            let log = self.train_step(data)?;
            on_step(self, &log)?;
        }
        Ok(())
    }

    /// Trainable parameter count.
    pub fn parameter_count(&self) -> usize {
        self.store
            .iter()
            .filter(|(_, _, e)| e.kind != ParamKind::Buffer)
            .map(|(_, _, e)| e.tensor.numel())
            .sum()
    }
}
