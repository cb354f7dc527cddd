//! Deterministic training loop over randomly sampled patches, with exact
//! resume from checkpoints.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_patch, Dataset, Patch, PatchProtocol, StationObservation};
use crate::error::{Error, FormatError, Result};
use crate::fsutil::{append_line, write_atomic};
use crate::model::checkpoint::{
    checkpoint_tensors, encode_tensors, pack_u64s, params_from_tensors, read_tensors, unpack_u64s, NamedTensor,
};
use crate::model::{forward, ModelInputs, ParamVars, SpliifConfig, SpliifParams};
use crate::numerics::{AdamConfig, AdamState, Graph, Tensor, Var};

pub const CHECKPOINT_FILE: &str = "checkpoint.splf";
pub const LOSS_FILE: &str = "loss.csv";

const RNG_TENSOR: &str = "rng.sampler";
const STEP_TENSOR: &str = "adam.step";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: u64,
    pub batch_patches: usize,
    pub adam: AdamConfig,
    pub checkpoint_every: u64,
    pub log_every: u64,
    /// Reuse the first sampled batch for every step (overfitting checks).
    pub fixed_batch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 7,
            steps: 3000,
            batch_patches: 10,
            adam: AdamConfig::default(),
            checkpoint_every: 500,
            log_every: 10,
            fixed_batch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("train.steps must be at least 1".into()));
        }
        if self.batch_patches == 0 {
            return Err(Error::Config("train.batch_patches must be at least 1".into()));
        }
        if self.checkpoint_every == 0 || self.log_every == 0 {
            return Err(Error::Config("train.checkpoint_every and train.log_every must be at least 1".into()));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.lr.is_finite()) {
            return Err(Error::Config("train.adam.lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::Config("train.adam betas must lie in [0, 1) and eps be positive".into()));
        }
        Ok(())
    }
}

/// Masked L1 of one patch: the model reads the patch's input stations and is
/// scored at its target stations. Targets enter the graph as constants.
pub struct PatchLoss {
    pub loss: Var,
    pub prediction: Var,
    pub target: Var,
}

pub fn patch_loss(g: &mut Graph, params: &ParamVars, config: &SpliifConfig, patch: &Patch) -> Result<PatchLoss> {
    let stations = patch.inputs()?;
    let inputs = ModelInputs {
        stations: &stations,
        dense: None,
        topo: &patch.topo,
        grid_coarse: &patch.grid_coarse,
        grid_fine: &patch.grid_fine,
    };
    let prediction = forward(g, params, config, &inputs, &patch.target_queries())?;
    let (values, mask) = patch.targets();
    let target = g.constant(values);
    let mask = g.constant(mask);
    let loss = g.l1_loss(prediction, target, mask)?;
    Ok(PatchLoss {
        loss,
        prediction,
        target,
    })
}

/// Optimiser, parameters and sampler state of one training run.
pub struct Trainer {
    pub model: SpliifConfig,
    pub config: TrainConfig,
    pub protocol: PatchProtocol,
    pub params: SpliifParams,
    pub adam: AdamState,
    rng: ChaCha8Rng,
    fixed: Option<Vec<Patch>>,
}

fn rng_words(rng: &ChaCha8Rng) -> Vec<u64> {
    let seed = rng.get_seed();
    let mut words: Vec<u64> = seed
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let pos = rng.get_word_pos();
    words.extend([rng.get_stream(), pos as u64, (pos >> 64) as u64]);
    words
}

fn rng_from_words(words: &[u64]) -> Option<ChaCha8Rng> {
    if words.len() != 7 {
        return None;
    }
    let mut seed = [0u8; 32];
    for (chunk, w) in seed.chunks_exact_mut(8).zip(&words[..4]) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(words[4]);
    rng.set_word_pos(words[5] as u128 | (words[6] as u128) << 64);
    Some(rng)
}

impl Trainer {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(model: &SpliifConfig, config: &TrainConfig, protocol: &PatchProtocol) -> Result<Self> {
        model.validate()?;
        config.validate()?;
        protocol.validate()?;
        if protocol.patch_size != model.fine_h
            || protocol.patch_size != model.fine_w
            || protocol.coarse_size != model.coarse_h
            || protocol.coarse_size != model.coarse_w
        {
            return Err(Error::Config(format!(
                "patch protocol ({}→{}) does not match the model grids ({}x{}→{}x{})",
                protocol.patch_size, protocol.coarse_size, model.fine_h, model.fine_w, model.coarse_h, model.coarse_w
            )));
        }
        let mut init = ChaCha8Rng::seed_from_u64(config.seed);
        let params = SpliifParams::init(model, &mut init)?;
        let adam = AdamState::new(config.adam, params.leaves().iter().map(|(_, t)| t.shape()));
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Trainer {
            model: model.clone(),
            config: config.clone(),
            protocol: protocol.clone(),
            params,
            adam,
            rng,
            fixed: None,
        })
    }

    /// Restores parameters, optimiser moments and sampler position.
    pub fn resume(path: &Path, model: &SpliifConfig, config: &TrainConfig, protocol: &PatchProtocol) -> Result<Self> {
        let mut trainer = Trainer::new(model, config, protocol)?;
        let tensors = read_tensors(path)?;
        trainer.params = params_from_tensors(&tensors, model)?;
        let find = |name: &str| -> Result<&Tensor<f32>> {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| {
                    FormatError::Tensor {
                        name: name.into(),
                        reason: "is missing; not a training checkpoint".into(),
                    }
                    .into()
                })
        };
        let bad = |name: &str| -> Error {
            FormatError::Tensor {
                name: name.into(),
                reason: "holds an invalid value".into(),
            }
            .into()
        };
        let names: Vec<String> = trainer.params.leaves().into_iter().map(|(n, _)| n).collect();
        for (i, name) in names.iter().enumerate() {
            for (prefix, slot) in [("adam.m.", &mut trainer.adam.m[i]), ("adam.v.", &mut trainer.adam.v[i])] {
                let key = format!("{prefix}{name}");
                let t = find(&key)?;
                if t.shape() != slot.shape() {
                    return Err(FormatError::Tensor {
                        name: key,
                        reason: format!("has shape {:?}, expected {:?}", t.shape(), slot.shape()),
                    }
                    .into());
                }
                *slot = t.clone();
            }
        }
        trainer.adam.step = unpack_u64s(find(STEP_TENSOR)?)
            .and_then(|w| w.first().copied())
            .ok_or_else(|| bad(STEP_TENSOR))?;
        trainer.rng = unpack_u64s(find(RNG_TENSOR)?)
            .and_then(|w| rng_from_words(&w))
            .ok_or_else(|| bad(RNG_TENSOR))?;
        Ok(trainer)
    }

    /// Completed optimisation steps.
    pub fn step_count(&self) -> u64 {
        self.adam.step
    }

    pub fn checkpoint_tensors(&self) -> Vec<NamedTensor> {
        let mut out = checkpoint_tensors(&self.params, &self.model);
        let names: Vec<String> = self.params.leaves().into_iter().map(|(n, _)| n).collect();
        for (i, name) in names.iter().enumerate() {
            out.push((format!("adam.m.{name}"), self.adam.m[i].clone()));
            out.push((format!("adam.v.{name}"), self.adam.v[i].clone()));
        }
        out.push((STEP_TENSOR.into(), pack_u64s(&[self.adam.step])));
        out.push((RNG_TENSOR.into(), pack_u64s(&rng_words(&self.rng))));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors = self.checkpoint_tensors();
        let refs: Vec<(&str, &Tensor<f32>)> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        write_atomic(path, &encode_tensors(&refs)?)
    }

    /// Next batch of training patches. With `fixed_batch` the first batch,
    /// drawn from its own stream, is returned every time.
    pub fn next_batch(
        &mut self,
        dataset: &Dataset,
        eligible: &dyn Fn(&StationObservation) -> bool,
    ) -> Result<Vec<Patch>> {
        if self.config.fixed_batch {
            if self.fixed.is_none() {
                let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
                rng.set_stream(2);
                let batch = (0..self.config.batch_patches)
                    .map(|_| sample_patch(dataset, eligible, &mut rng, &self.protocol))
                    .collect::<Result<Vec<_>>>()?;
                self.fixed = Some(batch);
            }
            return Ok(self.fixed.clone().expect("fixed batch set above"));
        }
        (0..self.config.batch_patches)
            .map(|_| sample_patch(dataset, eligible, &mut self.rng, &self.protocol))
            .collect()
    }

    /// One Adam step on the mean masked L1 over `batch`. Returns the loss.
    pub fn step(&mut self, batch: &[Patch]) -> Result<f32> {
        if batch.is_empty() {
            return Err(Error::Contract("empty training batch".into()));
        }
        let step = self.adam.step + 1;
        let mut total: Vec<Tensor> = self.params.leaves().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let mut loss_sum = 0.0f32;
        for patch in batch {
            let mut g = Graph::new();
            let vars = self.params.register(&mut g);
            let pl = patch_loss(&mut g, &vars, &self.model, patch)?;
            let loss = g.value(pl.loss).item()?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    time_id: patch.time_id.clone(),
                });
            }
            loss_sum += loss;
            let grads = g.backward(pl.loss)?;
            for (acc, (_, var)) in total.iter_mut().zip(vars.leaves()) {
                let grad = grads.get(*var).ok_or_else(|| Error::Contract("parameter without gradient".into()))?;
                for (a, &d) in acc.data_mut().iter_mut().zip(grad.data()) {
                    *a += d;
                }
            }
        }
        let inv = 1.0 / batch.len() as f32;
        for t in &mut total {
            for v in t.data_mut() {
                *v *= inv;
            }
        }
        if total.iter().any(|t| !t.is_finite()) {
            return Err(Error::Diverged {
                step,
                time_id: batch[0].time_id.clone(),
            });
        }
        let grads: Vec<&Tensor> = total.iter().collect();
        let mut leaves = self.params.leaves_mut();
        self.adam.update(&mut leaves, &grads)?;
        Ok(loss_sum * inv)
    }

    /// Trains until `config.steps` steps are complete, logging to
    /// `out_dir/loss.csv` and checkpointing to `out_dir/checkpoint.splf`.
    pub fn run(
        &mut self,
        dataset: &Dataset,
        eligible: &dyn Fn(&StationObservation) -> bool,
        out_dir: &Path,
    ) -> Result<TrainOutcome> {
        let checkpoint = out_dir.join(CHECKPOINT_FILE);
        let trace = out_dir.join(LOSS_FILE);
        if self.adam.step == 0 {
            write_atomic(&trace, b"step,loss\n")?;
        }
        let mut losses = Vec::new();
        while self.adam.step < self.config.steps {
            let batch = self.next_batch(dataset, eligible)?;
            let loss = self.step(&batch)?;
            let s = self.adam.step;
            if s.is_multiple_of(self.config.log_every) || s == self.config.steps {
                append_line(&trace, &format!("{s},{loss}"))?;
                log::info!("step {s} loss {loss}");
            }
            losses.push((s, loss));
            if s.is_multiple_of(self.config.checkpoint_every) && s != self.config.steps {
                self.save(&checkpoint)?;
            }
        }
        self.save(&checkpoint)?;
        Ok(TrainOutcome { checkpoint, losses })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    /// Loss of every step run in this call.
    pub losses: Vec<(u64, f32)>,
}

/// Fresh training run; see [`Trainer::run`].
pub fn train(
    dataset: &Dataset,
    eligible: &dyn Fn(&StationObservation) -> bool,
    model: &SpliifConfig,
    config: &TrainConfig,
    protocol: &PatchProtocol,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    Trainer::new(model, config, protocol)?.run(dataset, eligible, out_dir)
}

/// Moving average over `window` consecutive values.
pub fn smoothed(values: &[f32], window: usize) -> Vec<f64> {
    values
        .windows(window.max(1))
        .map(|w| w.iter().map(|&v| v as f64).sum::<f64>() / w.len() as f64)
        .collect()
}
