use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::aggregation::{self, Descriptor};
use crate::error::{Error, Result};
use crate::model::layout::{HeadParams, Init, Layout, MsaParams};
use crate::model::ModelConfig;
use crate::numerics::{
    BatchMoments, BnMode, Graph, RunningStats, Scalar, Tensor, Var, BATCH_NORM_EPS,
    BATCH_NORM_MOMENTUM, LAYER_NORM_EPS,
};

/// Stem output: position-embedded tokens `[n, p, dim]` on an `h x w` grid.
#[derive(Clone, Copy, Debug)]
pub struct PatchGrid {
    pub tokens: Var,
    pub grid_hw: (usize, usize),
}

/// Graph handles produced by one branch forward pass.
#[derive(Debug)]
pub struct BranchOutput<T> {
    /// L2-normalized descriptors `[n, descriptor_dim]`.
    pub descriptor: Var,
    /// Final-norm tokens `[n, p, dim]`.
    pub tokens: Var,
    /// Class scores from the pooled tokens, when a classifier is configured.
    pub logits: Option<Var>,
    /// Batch moments of every stem batch norm (training mode only).
    pub moments: Vec<BatchMoments<T>>,
}

/// One view-specific network: conv stem, attention stack, descriptor head.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch<T: Scalar = f32> {
    config: ModelConfig,
    layout: Layout,
    params: Vec<Tensor<T>>,
    running: Vec<RunningStats<T>>,
}

/// Initial tensor values for `layout`, deterministic in `seed`.
pub fn init_params<T: Scalar>(layout: &Layout, seed: u64) -> Vec<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    layout
        .specs
        .iter()
        .map(|spec| match spec.init {
            Init::Zeros => Tensor::zeros(&spec.shape),
            Init::Ones => Tensor::ones(&spec.shape),
            Init::TruncNormal(std) => sample_normal(&mut rng, &spec.shape, std, true),
            Init::KaimingConv => {
                let fan_in: usize = spec.shape[1..].iter().product();
                sample_normal(&mut rng, &spec.shape, (2.0 / fan_in as f64).sqrt(), false)
            }
        })
        .collect()
}

fn sample_normal<T: Scalar>(rng: &mut impl Rng, shape: &[usize], std: f64, truncate: bool) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| loop {
            let v: f64 = dist.sample(rng);
            if !truncate || v.abs() <= 2.0 * std {
                break T::lit(v);
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("finite samples")
}

impl<T: Scalar> Branch<T> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::build(config);
        let params = init_params(&layout, seed);
        let running = config.stem_channels.iter().map(|&c| RunningStats::new(c)).collect();
        Ok(Self {
            config: config.clone(),
            layout,
            params,
            running,
        })
    }

    /// Reassembles a branch from stored tensors, checking names and shapes.
    pub fn from_named(
        config: &ModelConfig,
        mut lookup: impl FnMut(&str) -> Option<Tensor<T>>,
    ) -> Result<Self> {
        config.validate()?;
        let layout = Layout::build(config);
        let mut params = Vec::with_capacity(layout.specs.len());
        for spec in &layout.specs {
            let t = lookup(&spec.name)
                .ok_or_else(|| Error::Parse {
                    field: spec.name.clone(),
                    detail: "tensor missing".into(),
                })?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Parse {
                    field: spec.name.clone(),
                    detail: format!("shape {:?}, expected {:?}", t.shape(), spec.shape),
                });
            }
            params.push(t);
        }
        let mut running = Vec::with_capacity(config.stem_channels.len());
        for (i, &c) in config.stem_channels.iter().enumerate() {
            let mut fetch = |suffix: &str| -> Result<Vec<T>> {
                let name = format!("stem.conv{i}.bn.{suffix}");
                let t = lookup(&name).ok_or_else(|| Error::Parse {
                    field: name.clone(),
                    detail: "tensor missing".into(),
                })?;
                if t.shape() != [c] {
                    return Err(Error::Parse {
                        field: name,
                        detail: format!("shape {:?}, expected [{c}]", t.shape()),
                    });
                }
                Ok(t.into_data())
            };
            running.push(RunningStats {
                mean: fetch("running_mean")?,
                var: fetch("running_var")?,
            });
        }
        Ok(Self {
            config: config.clone(),
            layout,
            params,
            running,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.running
    }

    /// Number of learnable scalars actually registered.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Learnable tensors followed by batch-norm buffers, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self
            .layout
            .specs
            .iter()
            .zip(&self.params)
            .map(|(s, t)| (s.name.clone(), t.clone()))
            .collect();
        for (i, rs) in self.running.iter().enumerate() {
            let c = rs.mean.len();
            out.push((
                format!("stem.conv{i}.bn.running_mean"),
                Tensor::from_vec(&[c], rs.mean.clone()).expect("finite stats"),
            ));
            out.push((
                format!("stem.conv{i}.bn.running_var"),
                Tensor::from_vec(&[c], rs.var.clone()).expect("finite stats"),
            ));
        }
        out
    }

    /// Registers every learnable tensor as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|t| g.param(t.clone())).collect()
    }

    /// Registers every learnable tensor as a constant.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|t| g.constant(t.clone())).collect()
    }

    /// Six conv-BN-ReLU stages, per-position projection, and the learnable
    /// position embedding: `[n, 3, h, w] -> [n, p, dim]`.
    pub fn stem_forward(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        images: Var,
        train: bool,
        moments: &mut Vec<BatchMoments<T>>,
    ) -> Result<PatchGrid> {
        let (h, w) = self.config.input_hw;
        let shape = g.shape(images).to_vec();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != h || shape[3] != w {
            return Err(Error::dim(format!(
                "branch expects [n, 3, {h}, {w}] images, got {shape:?}"
            )));
        }
        let n = shape[0];
        let eps = T::lit(BATCH_NORM_EPS);
        let mut x = images;
        for (stage, (p, &stride)) in self.layout.stem.iter().zip(&self.config.stem_strides).enumerate() {
            x = g.conv2d(x, vars[p.weight], stride, 1)?;
            let mode = if train {
                BnMode::Train { eps }
            } else {
                BnMode::Infer {
                    mean: &self.running[stage].mean,
                    var: &self.running[stage].var,
                    eps,
                }
            };
            let (y, m) = g.batch_norm(x, vars[p.bn_gamma], vars[p.bn_beta], mode)?;
            moments.extend(m);
            x = g.relu(y);
        }
        let s = g.shape(x).to_vec();
        let (c, gh, gw) = (s[1], s[2], s[3]);
        let x = g.permute(x, &[0, 2, 3, 1])?;
        let x = g.reshape(x, &[n, gh * gw, c])?;
        let proj = self.layout.proj.map(|i| vars[i]);
        let x = aggregation::linear(g, x, &proj)?;
        let tokens = g.add_broadcast(x, vars[self.layout.pos_embed])?;
        Ok(PatchGrid {
            tokens,
            grid_hw: (gh, gw),
        })
    }

    /// `x + W_o(MSA(LayerNorm(x)))` on `[n, p, dim]` tokens.
    pub fn msa_layer_forward(&self, g: &mut Graph<T>, vars: &[Var], layer: usize, x: Var) -> Result<Var> {
        let p: MsaParams<Var> = {
            let l = &self.layout.layers[layer];
            MsaParams {
                norm_gamma: vars[l.norm_gamma],
                norm_beta: vars[l.norm_beta],
                qkv: l.qkv.map(|i| vars[i]),
                out: l.out.map(|i| vars[i]),
            }
        };
        msa_block(g, x, &p, self.config.heads)
    }

    /// Full branch: stem, attention stack, final norm, descriptor head.
    pub fn forward(&self, g: &mut Graph<T>, vars: &[Var], images: Var, train: bool) -> Result<BranchOutput<T>> {
        let mut moments = Vec::new();
        let grid = self.stem_forward(g, vars, images, train, &mut moments)?;
        g.value(grid.tokens).ensure_finite("stem output")?;
        let mut x = grid.tokens;
        for layer in 0..self.config.depth {
            x = self.msa_layer_forward(g, vars, layer, x)?;
            if !g.value(x).is_finite() {
                return Err(Error::Numeric {
                    location: format!("attention layer {layer}"),
                    detail: "non-finite activations".into(),
                });
            }
        }
        let tokens = g.layer_norm(
            x,
            vars[self.layout.norm_gamma],
            vars[self.layout.norm_beta],
            T::lit(LAYER_NORM_EPS),
        )?;
        let descriptor = match &self.layout.head {
            HeadParams::Gap => aggregation::gap_head(g, tokens)?,
            HeadParams::Smd(p) => aggregation::smd_head(g, tokens, &p.map(|i| vars[i]))?,
            HeadParams::Local(p) => aggregation::local_head(
                g,
                tokens,
                grid.grid_hw,
                self.config.local_pool_hw,
                &p.map(|i| vars[i]),
            )?,
        };
        let logits = match &self.layout.classifier {
            Some(c) => {
                let pooled = g.mean_axis(tokens, 1)?;
                Some(aggregation::linear(g, pooled, &c.map(|i| vars[i]))?)
            }
            None => None,
        };
        Ok(BranchOutput {
            descriptor,
            tokens,
            logits,
            moments,
        })
    }

    /// Folds training-mode batch moments into the running statistics.
    pub fn apply_moments(&mut self, moments: &[BatchMoments<T>]) {
        let momentum = T::lit(BATCH_NORM_MOMENTUM);
        for (rs, m) in self.running.iter_mut().zip(moments) {
            rs.update(m, momentum);
        }
    }

    /// Inference-mode descriptors for a batch `[n, 3, h, w]`.
    pub fn describe(&self, images: &Tensor<T>) -> Result<Vec<Descriptor>> {
        let mut g = Graph::new();
        let vars = self.bind_frozen(&mut g);
        let x = g.constant(images.clone());
        let out = self.forward(&mut g, &vars, x, false)?;
        aggregation::descriptors_from_rows(g.value(out.descriptor))
    }
}

/// Pre-norm attention sublayer with a residual connection.
pub fn msa_block<T: Scalar>(g: &mut Graph<T>, x: Var, p: &MsaParams<Var>, heads: usize) -> Result<Var> {
    let z = g.layer_norm(x, p.norm_gamma, p.norm_beta, T::lit(LAYER_NORM_EPS))?;
    let qkv = aggregation::linear(g, z, &p.qkv)?;
    let attended = g.attention(qkv, heads)?;
    let projected = aggregation::linear(g, attended, &p.out)?;
    g.add(x, projected)
}
