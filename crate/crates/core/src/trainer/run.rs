use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::Descriptor;
use crate::data::{self, mask_for_batch, transform_aerial, transform_ground, ScenePair, Tile, ViewTransform};
use crate::error::{Error, Result};
use crate::evaluator::{matched_labels, rank_all, recall_at_k, DescriptorIndex};
use crate::losses::{retrieval_loss, LossConfig};
use crate::model::{checkpoint, SiamesePair};
use crate::numerics::{BatchMoments, Graph, Tensor, Var};
use crate::trainer::optim::{adamw_step, clip_global_norm, lr_schedule, sam_step, AdamHyper, AdamState};
use crate::trainer::TrainConfig;

/// One held-out pair in this many.
pub const VALIDATION_SHARE: usize = 8;
const DESCRIBE_CHUNK: usize = 64;

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const ABORT_CHECKPOINT: &str = "nan_abort.ckpt";
pub const METRICS_LOG: &str = "metrics.jsonl";

/// Indices of the training and validation pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Holds out `max(1, n / 8)` pairs, chosen by `seed`.
pub fn split_indices(n: usize, seed: u64) -> Result<Split> {
    let n_val = (n / VALIDATION_SHARE).max(1);
    if n < n_val + 2 {
        return Err(Error::contract(format!("{n} pairs leave fewer than 2 for training")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5b11_7000));
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok(Split { train, val })
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (epoch as u64).wrapping_add(1).wrapping_mul(0xd1b5_4a32_d192_ed03)
}

/// Shuffled batches of distinct pairs for one epoch. A trailing batch with
/// fewer than two pairs is dropped, since the losses need a negative.
pub fn epoch_batches(train: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order = train.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch)));
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    #[serde(rename = "r@1")]
    pub r_at_1: f64,
}

/// Checkpoint header: the run's configuration and progress.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub train: TrainConfig,
    pub step: u64,
    pub epochs_done: usize,
    pub best_r_at_1: Option<f64>,
    pub log: Vec<EpochRecord>,
}

/// Model, optimizer state and progress; everything needed to resume.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: SiamesePair<f32>,
    pub adam: AdamState<f32>,
    pub meta: CheckpointMeta,
}

impl TrainState {
    pub fn fresh(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = SiamesePair::init(&config.siamese(), config.seed)?;
        let adam = AdamState::zeros_like(&combined_params(&model));
        Ok(Self {
            model,
            adam,
            meta: CheckpointMeta {
                train: config.clone(),
                step: 0,
                epochs_done: 0,
                best_r_at_1: None,
                log: Vec::new(),
            },
        })
    }

    fn param_names(&self) -> Vec<String> {
        let names = |prefix: &str, b: &crate::model::Branch<f32>| {
            b.layout()
                .specs
                .iter()
                .map(|s| format!("{prefix}.{}", s.name))
                .collect::<Vec<_>>()
        };
        let mut out = names("ground", &self.model.ground);
        out.extend(names("aerial", &self.model.aerial));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = self.model.named_tensors();
        for (name, (m, v)) in self.param_names().iter().zip(self.adam.m.iter().zip(&self.adam.v)) {
            tensors.push((format!("adam.m.{name}"), m.clone()));
            tensors.push((format!("adam.v.{name}"), v.clone()));
        }
        checkpoint::save(path, &self.meta, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = checkpoint::load::<CheckpointMeta>(path)?;
        file.config.train.validate()?;
        let model = SiamesePair::from_named(&file.config.train.siamese(), &file.tensors)?;
        let mut state = Self {
            adam: AdamState::zeros_like(&combined_params(&model)),
            model,
            meta: file.config.clone(),
        };
        state.adam.t = state.meta.step;
        let names = state.param_names();
        for (i, name) in names.iter().enumerate() {
            for (kind, slot) in [("m", &mut state.adam.m[i]), ("v", &mut state.adam.v[i])] {
                let key = format!("adam.{kind}.{name}");
                let t = file.get(&key).ok_or_else(|| Error::Parse {
                    field: key.clone(),
                    detail: "optimizer state missing".into(),
                })?;
                if t.shape() != slot.shape() {
                    return Err(Error::Parse {
                        field: key,
                        detail: format!("shape {:?}, expected {:?}", t.shape(), slot.shape()),
                    });
                }
                *slot = t.clone();
            }
        }
        Ok(state)
    }

    fn set_params(&mut self, params: Vec<Tensor<f32>>) {
        let n = self.model.ground.params().len();
        let (g, a) = params.split_at(n);
        self.model.ground.params_mut().clone_from_slice(g);
        self.model.aerial.params_mut().clone_from_slice(a);
    }
}

fn combined_params(model: &SiamesePair<f32>) -> Vec<Tensor<f32>> {
    let mut p = model.ground.params().to_vec();
    p.extend_from_slice(model.aerial.params());
    p
}

struct Batch {
    ground: Tensor<f32>,
    aerial: Tensor<f32>,
    mask: Vec<bool>,
}

fn assemble(pairs: &[ScenePair], ids: &[usize], transforms: Option<&[ViewTransform]>) -> Result<Batch> {
    let mut ground = Vec::with_capacity(ids.len());
    let mut aerial = Vec::with_capacity(ids.len());
    for (k, &i) in ids.iter().enumerate() {
        match transforms {
            Some(t) => {
                ground.push(transform_ground(&pairs[i].ground, t[k])?.to_tensor());
                aerial.push(transform_aerial(&pairs[i].aerial, t[k])?.to_tensor());
            }
            None => {
                ground.push(pairs[i].ground.to_tensor());
                aerial.push(pairs[i].aerial.to_tensor());
            }
        }
    }
    let tiles: Vec<Tile> = ids
        .iter()
        .map(|&i| Tile::new(pairs[i].tile_origin, pairs[i].tile_size))
        .collect();
    Ok(Batch {
        ground: Tensor::stack(&ground.iter().collect::<Vec<_>>())?,
        aerial: Tensor::stack(&aerial.iter().collect::<Vec<_>>())?,
        mask: mask_for_batch(&tiles)?,
    })
}

struct StepGrads {
    loss: f64,
    grads: Vec<Vec<f32>>,
    ground_moments: Vec<BatchMoments<f32>>,
    aerial_moments: Vec<BatchMoments<f32>>,
}

fn loss_and_grads(model: &SiamesePair<f32>, params: &[Tensor<f32>], batch: &Batch, loss: &LossConfig) -> Result<StepGrads> {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let n = model.ground.params().len();
    let gi = g.constant(batch.ground.clone());
    let ai = g.constant(batch.aerial.clone());
    let go = model.ground.forward(&mut g, &vars[..n], gi, true)?;
    let ao = model.aerial.forward(&mut g, &vars[n..], ai, true)?;
    let l = retrieval_loss(&mut g, go.descriptor, ao.descriptor, loss, Some(&batch.mask))?;
    let value = g.value(l).item() as f64;
    if !value.is_finite() {
        return Err(Error::Numeric {
            location: "loss".into(),
            detail: format!("value {value}"),
        });
    }
    g.backward(l)?;
    let grads: Vec<Vec<f32>> = vars
        .iter()
        .map(|&v| g.grad(v).expect("trainable leaf").to_vec())
        .collect();
    if grads.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            location: "gradients".into(),
            detail: "non-finite entries".into(),
        });
    }
    Ok(StepGrads {
        loss: value,
        grads,
        ground_moments: go.moments,
        aerial_moments: ao.moments,
    })
}

/// Forward, backward, optional SAM, clipping and AdamW. The state changes
/// only once every fallible piece has succeeded.
fn train_step(state: &mut TrainState, batch: &Batch, total_steps: u64) -> Result<f64> {
    let cfg = state.meta.train.clone();
    let params = combined_params(&state.model);
    let first = loss_and_grads(&state.model, &params, batch, &cfg.loss)?;
    let mut grads = if cfg.sam_enabled {
        sam_step(&params, &first.grads, cfg.sam_rho, |p| {
            Ok(loss_and_grads(&state.model, p, batch, &cfg.loss)?.grads)
        })?
    } else {
        first.grads
    };
    clip_global_norm(&mut grads, cfg.clip_norm)?;
    let lr = lr_schedule(state.meta.step + 1, total_steps, cfg.lr, cfg.warmup_fraction);
    let hyper = AdamHyper {
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: cfg.adam_eps,
    };
    let mut params = params;
    let mut adam = state.adam.clone();
    adamw_step(&mut params, &grads, &mut adam, lr, cfg.weight_decay, hyper)?;
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Numeric {
            location: "parameters".into(),
            detail: "non-finite after update".into(),
        });
    }
    state.set_params(params);
    state.adam = adam;
    state.model.ground.apply_moments(&first.ground_moments);
    state.model.aerial.apply_moments(&first.aerial_moments);
    state.meta.step += 1;
    Ok(first.loss)
}

fn describe_views(
    model: &SiamesePair<f32>,
    pairs: &[ScenePair],
    indices: &[usize],
    view: impl Fn(&ScenePair) -> &data::Raster,
    ground: bool,
) -> Result<Vec<Descriptor>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(DESCRIBE_CHUNK) {
        let imgs: Vec<Tensor<f32>> = chunk.iter().map(|&i| view(&pairs[i]).to_tensor()).collect();
        let batch = Tensor::stack(&imgs.iter().collect::<Vec<_>>())?;
        let branch = if ground { &model.ground } else { &model.aerial };
        out.extend(branch.describe(&batch)?);
    }
    Ok(out)
}

/// Inference-mode descriptors of the ground (query) and aerial (reference)
/// views of the selected pairs.
pub fn describe_pairs(
    model: &SiamesePair<f32>,
    pairs: &[ScenePair],
    indices: &[usize],
) -> Result<(Vec<Descriptor>, Vec<Descriptor>)> {
    Ok((
        describe_views(model, pairs, indices, |p| &p.ground, true)?,
        describe_views(model, pairs, indices, |p| &p.aerial, false)?,
    ))
}

/// Ground-to-aerial recall@1 over the selected pairs.
pub fn validation_recall(model: &SiamesePair<f32>, pairs: &[ScenePair], indices: &[usize]) -> Result<f64> {
    let (queries, refs) = describe_pairs(model, pairs, indices)?;
    let ids: Vec<u64> = indices.iter().map(|&i| pairs[i].pair_id).collect();
    let index = DescriptorIndex::new(ids.clone(), &refs)?;
    let rankings = rank_all(&queries, &index)?;
    recall_at_k(&rankings, &matched_labels(&ids), 1)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
}

impl TrainOutcome {
    pub fn log(&self) -> &[EpochRecord] {
        &self.state.meta.log
    }
}

/// Trains on the manifest named in `config.data`.
pub fn train(config: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    let manifest = config
        .data
        .as_deref()
        .ok_or_else(|| Error::contract("config.data must name a dataset manifest"))?;
    let (_, pairs) = data::load_dataset(manifest)?;
    train_on(config, &pairs, out_dir)
}

/// Trains from scratch on in-memory pairs.
pub fn train_on(config: &TrainConfig, pairs: &[ScenePair], out_dir: &Path) -> Result<TrainOutcome> {
    continue_run(TrainState::fresh(config)?, pairs, out_dir, None)
}

/// Continues a run from a checkpoint written by [`train_on`].
pub fn resume(checkpoint_path: &Path, pairs: &[ScenePair], out_dir: &Path) -> Result<TrainOutcome> {
    continue_run(TrainState::load(checkpoint_path)?, pairs, out_dir, None)
}

fn check_sizes(cfg: &TrainConfig, pairs: &[ScenePair]) -> Result<()> {
    for p in pairs {
        let g = (p.ground.height(), p.ground.width());
        let a = (p.aerial.height(), p.aerial.width());
        if g != cfg.ground_hw || a != cfg.aerial_hw {
            return Err(Error::contract(format!(
                "pair {} has views {g:?}/{a:?}, config expects {:?}/{:?}",
                p.pair_id, cfg.ground_hw, cfg.aerial_hw
            )));
        }
    }
    Ok(())
}

fn write_log_line(path: &Path, record: &EpochRecord, truncate: bool) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!truncate)
        .truncate(truncate)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(record)?).map_err(|e| Error::io(path, e))
}

/// Trains from `state` until the configured epoch count, or until
/// `stop_after` epochs are done if that comes first.
pub fn continue_run(
    mut state: TrainState,
    pairs: &[ScenePair],
    out_dir: &Path,
    stop_after: Option<usize>,
) -> Result<TrainOutcome> {
    let cfg = state.meta.train.clone();
    check_sizes(&cfg, pairs)?;
    let split = split_indices(pairs.len(), cfg.seed)?;
    let steps_per_epoch = epoch_batches(&split.train, cfg.batch_size, cfg.seed, 0).len() as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(METRICS_LOG);
    fs::write(&log_path, "").map_err(|e| Error::io(&log_path, e))?;
    for r in &state.meta.log {
        write_log_line(&log_path, r, false)?;
    }
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let last_path = out_dir.join(LAST_CHECKPOINT);

    let end = stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    for epoch in state.meta.epochs_done..end {
        let batches = epoch_batches(&split.train, cfg.batch_size, cfg.seed, epoch);
        let mut loss_sum = 0.0;
        let mut aug_rng = ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed ^ 0xa5a5_0000, epoch));
        for ids in &batches {
            let transforms: Option<Vec<ViewTransform>> = cfg.augment.then(|| {
                ids.iter()
                    .map(|_| ViewTransform::ALL[aug_rng.random_range(0..ViewTransform::ALL.len())])
                    .collect()
            });
            let batch = assemble(pairs, ids, transforms.as_deref())?;
            match train_step(&mut state, &batch, total_steps) {
                Ok(l) => loss_sum += l,
                Err(Error::Numeric { location, detail }) => {
                    state.save(&out_dir.join(ABORT_CHECKPOINT))?;
                    return Err(Error::Numeric {
                        location: format!("training step {} ({location})", state.meta.step),
                        detail,
                    });
                }
                Err(e) => return Err(e),
            }
        }
        let record = EpochRecord {
            epoch,
            loss: loss_sum / batches.len() as f64,
            r_at_1: validation_recall(&state.model, pairs, &split.val)?,
        };
        write_log_line(&log_path, &record, false)?;
        state.meta.log.push(record.clone());
        state.meta.epochs_done = epoch + 1;
        if state.meta.best_r_at_1.is_none_or(|b| record.r_at_1 > b) {
            state.meta.best_r_at_1 = Some(record.r_at_1);
            state.save(&best_path)?;
        }
        state.save(&last_path)?;
    }
    Ok(TrainOutcome {
        state,
        best_checkpoint: best_path,
        last_checkpoint: last_path,
    })
}
