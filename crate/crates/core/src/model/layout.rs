use crate::aggregation::{Linear, SmdParams, SMD_EXPANSION};
use crate::model::{HeadKind, ModelConfig};

/// How a parameter tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with the given std, resampled outside two standard deviations.
    TruncNormal(f64),
    /// He-normal over the fan-in, for the ReLU conv stem.
    KaimingConv,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvBn<V> {
    pub weight: V,
    pub bn_gamma: V,
    pub bn_beta: V,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MsaParams<V> {
    pub norm_gamma: V,
    pub norm_beta: V,
    pub qkv: Linear<V>,
    pub out: Linear<V>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadParams<V> {
    Gap,
    Smd(SmdParams<V>),
    Local(Linear<V>),
}

const WEIGHT_STD: f64 = 0.02;

/// Ordered parameter registry for one branch; indices point into `specs`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub specs: Vec<ParamSpec>,
    pub stem: Vec<ConvBn<usize>>,
    pub proj: Linear<usize>,
    pub pos_embed: usize,
    pub layers: Vec<MsaParams<usize>>,
    pub norm_gamma: usize,
    pub norm_beta: usize,
    pub head: HeadParams<usize>,
    pub classifier: Option<Linear<usize>>,
}

struct Registry {
    specs: Vec<ParamSpec>,
}

impl Registry {
    fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> usize {
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        });
        self.specs.len() - 1
    }

    fn linear(&mut self, prefix: &str, inp: usize, out: usize) -> Linear<usize> {
        Linear {
            weight: self.add(format!("{prefix}.weight"), &[inp, out], Init::TruncNormal(WEIGHT_STD)),
            bias: self.add(format!("{prefix}.bias"), &[out], Init::Zeros),
        }
    }
}

impl Layout {
    /// Registers every learnable tensor of `config` in a fixed order.
    pub fn build(config: &ModelConfig) -> Self {
        let mut r = Registry { specs: Vec::new() };
        let mut c_in = 3;
        let mut stem = Vec::with_capacity(config.stem_channels.len());
        for (i, &c_out) in config.stem_channels.iter().enumerate() {
            stem.push(ConvBn {
                weight: r.add(format!("stem.conv{i}.weight"), &[c_out, c_in, 3, 3], Init::KaimingConv),
                bn_gamma: r.add(format!("stem.conv{i}.bn.weight"), &[c_out], Init::Ones),
                bn_beta: r.add(format!("stem.conv{i}.bn.bias"), &[c_out], Init::Zeros),
            });
            c_in = c_out;
        }
        let proj = r.linear("stem.proj", c_in, config.projection_dim);
        let tokens = config.tokens();
        let pos_embed = r.add("pos_embed", &[tokens, config.dim], Init::Zeros);
        let d = config.dim;
        let layers = (0..config.depth)
            .map(|l| MsaParams {
                norm_gamma: r.add(format!("layers.{l}.norm.weight"), &[d], Init::Ones),
                norm_beta: r.add(format!("layers.{l}.norm.bias"), &[d], Init::Zeros),
                qkv: r.linear(&format!("layers.{l}.attn.qkv"), d, 3 * d),
                out: r.linear(&format!("layers.{l}.attn.proj"), d, d),
            })
            .collect();
        let norm_gamma = r.add("norm.weight", &[d], Init::Ones);
        let norm_beta = r.add("norm.bias", &[d], Init::Zeros);
        let head = match config.head {
            HeadKind::Gap => HeadParams::Gap,
            HeadKind::Smd => {
                let wide = SMD_EXPANSION * tokens;
                let mut smd = |tag: usize, inp: usize, out: usize| Linear {
                    weight: r.add(format!("smd.w{tag}"), &[inp, out], Init::TruncNormal(WEIGHT_STD)),
                    bias: r.add(format!("smd.b{tag}"), &[out], Init::Zeros),
                };
                HeadParams::Smd(SmdParams {
                    expand: smd(1, tokens, wide),
                    reduce: smd(2, wide, tokens),
                    project: smd(3, tokens, config.smd_k),
                })
            }
            HeadKind::Local => HeadParams::Local(r.linear("local.proj", d, config.local_proj_dim)),
        };
        let classifier =
            (config.classifier_classes > 0).then(|| r.linear("classifier", d, config.classifier_classes));
        Layout {
            specs: r.specs,
            stem,
            proj,
            pos_embed,
            layers,
            norm_gamma,
            norm_beta,
            head,
            classifier,
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }
}
