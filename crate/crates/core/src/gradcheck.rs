//! Central finite-difference checks of every differentiable op, run in f64.
//!
//! Each check reduces an op's output to a scalar with fixed random weights,
//! `L = sum(w * f(x))`, and compares backprop against
//! `(L(x + h e_i) - L(x - h e_i)) / 2h` entry by entry.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{self, Linear, SmdParams, SMD_EXPANSION};
use crate::error::Result;
use crate::losses::{self, LossConfig, Strategy};
use crate::model::layout::MsaParams;
use crate::model::{msa_block, Branch, HeadKind, ModelConfig};
use crate::numerics::{BnMode, Graph, Tensor, Var};

pub const STEP: f64 = 1e-5;
const MIN_STEP: f64 = 1e-7;
const KINK_RATIO: f64 = 1e-3;
/// Denominator floor of the relative error, so near-zero gradients are
/// compared absolutely.
pub const DENOM_FLOOR: f64 = 1e-3;
pub const KERNEL_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
pub const DEFAULT_SEEDS: usize = 20;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

fn weighted_sum(g: &mut Graph<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let wv = g.constant(w.clone());
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

fn objective(inputs: &[Tensor<f64>], build: &Build, w: &Tensor<f64>) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let y = build(&mut g, &vars)?;
    let l = weighted_sum(&mut g, y, w)?;
    Ok(g.value(l).item())
}

/// Largest relative error over the checked entries. With `max_entries`, a
/// seeded random subset of all input entries is checked.
pub fn check_gradients(
    inputs: &[Tensor<f64>],
    build: &Build,
    seed: u64,
    max_entries: Option<usize>,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = build(&mut g, &vars)?;
    let w = uniform(&mut rng, g.shape(y), 1.0);
    let l = weighted_sum(&mut g, y, &w)?;
    g.backward(l)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).expect("param gradient").to_vec())
        .collect();

    let entries: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |k| (i, k)))
        .collect();
    let picked: Vec<(usize, usize)> = match max_entries {
        Some(m) if m < entries.len() => sample(&mut rng, entries.len(), m).into_iter().map(|j| entries[j]).collect(),
        _ => entries,
    };

    let mut probe = inputs.to_vec();
    let center = objective(&probe, build, &w)?;
    let mut worst = 0.0f64;
    for (i, k) in picked {
        let numeric = central_difference(&mut probe, i, k, center, build, &w)?;
        worst = worst.max(relative_error(analytic[i][k], numeric));
    }
    Ok(worst)
}

/// Central difference at entry `k` of input `i`. When the two one-sided
/// differences disagree, a ReLU kink sits inside the stencil, so the step
/// shrinks until it no longer straddles one.
fn central_difference(
    probe: &mut [Tensor<f64>],
    i: usize,
    k: usize,
    center: f64,
    build: &Build,
    w: &Tensor<f64>,
) -> Result<f64> {
    let x0 = probe[i].data()[k];
    let mut h = STEP;
    let estimate = loop {
        probe[i].data_mut()[k] = x0 + h;
        let up = objective(probe, build, w)?;
        probe[i].data_mut()[k] = x0 - h;
        let down = objective(probe, build, w)?;
        let estimate = (up - down) / (2.0 * h);
        let (fwd, bwd) = ((up - center) / h, (center - down) / h);
        if h <= MIN_STEP || (fwd - bwd).abs() <= KINK_RATIO * estimate.abs().max(DENOM_FLOOR) {
            break estimate;
        }
        h /= 10.0;
    };
    probe[i].data_mut()[k] = x0;
    Ok(estimate)
}

fn uniform(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::from_vec(shape, data).expect("finite")
}

fn positive(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).expect("finite")
}

/// Values bounded away from zero, so ReLU kinks stay outside the stencil.
fn off_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("finite")
}

/// A named check; `run` returns the worst relative error for one seed.
#[derive(Clone, Copy)]
pub struct Case {
    pub name: &'static str,
    pub tolerance: f64,
    pub run: fn(u64) -> Result<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub name: &'static str,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

macro_rules! kernel {
    ($name:expr, $run:expr) => {
        Case {
            name: $name,
            tolerance: KERNEL_TOLERANCE,
            run: $run,
        }
    };
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn linear_params(rng: &mut impl Rng, d_in: usize, d_out: usize) -> [Tensor<f64>; 2] {
    [uniform(rng, &[d_in, d_out], 0.5), uniform(rng, &[d_out], 0.5)]
}

/// Every kernel and loss in isolation.
pub fn kernel_cases() -> Vec<Case> {
    vec![
        kernel!("matmul", |s| {
            let mut r = rng_for(s);
            let x = [uniform(&mut r, &[3, 4], 1.0), uniform(&mut r, &[4, 5], 1.0)];
            check_gradients(&x, &|g, v| g.matmul(v[0], v[1]), s, None)
        }),
        kernel!("transpose", |s| {
            let mut r = rng_for(s);
            check_gradients(&[uniform(&mut r, &[3, 5], 1.0)], &|g, v| g.transpose(v[0]), s, None)
        }),
        kernel!("add", |s| {
            let mut r = rng_for(s);
            let x = [uniform(&mut r, &[2, 3], 1.0), uniform(&mut r, &[2, 3], 1.0)];
            check_gradients(&x, &|g, v| g.add(v[0], v[1]), s, None)
        }),
        kernel!("add_broadcast", |s| {
            let mut r = rng_for(s);
            let x = [uniform(&mut r, &[2, 3, 4], 1.0), uniform(&mut r, &[3, 4], 1.0)];
            check_gradients(&x, &|g, v| g.add_broadcast(v[0], v[1]), s, None)
        }),
        kernel!("mul", |s| {
            let mut r = rng_for(s);
            let x = [uniform(&mut r, &[2, 3], 1.0), uniform(&mut r, &[2, 3], 1.0)];
            check_gradients(&x, &|g, v| g.mul(v[0], v[1]), s, None)
        }),
        kernel!("scale_sum_mean", |s| {
            let mut r = rng_for(s);
            let c = r.random_range(-2.0..2.0);
            check_gradients(
                &[uniform(&mut r, &[3, 4], 1.0)],
                &move |g, v| {
                    let a = g.scale(v[0], c);
                    let m = g.mean(a);
                    let t = g.sum(v[0]);
                    g.mul(m, t)
                },
                s,
                None,
            )
        }),
        kernel!("mean_axis", |s| {
            let mut r = rng_for(s);
            let axis = r.random_range(0..3);
            check_gradients(&[uniform(&mut r, &[2, 3, 4], 1.0)], &move |g, v| g.mean_axis(v[0], axis), s, None)
        }),
        kernel!("relu", |s| {
            let mut r = rng_for(s);
            check_gradients(&[off_zero(&mut r, &[4, 5])], &|g, v| Ok(g.relu(v[0])), s, None)
        }),
        kernel!("gelu", |s| {
            let mut r = rng_for(s);
            check_gradients(&[uniform(&mut r, &[4, 5], 3.0)], &|g, v| Ok(g.gelu(v[0])), s, None)
        }),
        kernel!("softmax", |s| {
            let mut r = rng_for(s);
            check_gradients(&[uniform(&mut r, &[3, 6], 2.0)], &|g, v| g.softmax(v[0]), s, None)
        }),
        kernel!("layer_norm", |s| {
            let mut r = rng_for(s);
            let x = [
                uniform(&mut r, &[2, 3, 6], 2.0),
                positive(&mut r, &[6], 0.5, 1.5),
                uniform(&mut r, &[6], 0.5),
            ];
            check_gradients(&x, &|g, v| g.layer_norm(v[0], v[1], v[2], 1e-6), s, None)
        }),
        kernel!("conv2d", |s| {
            let mut r = rng_for(s);
            let stride = r.random_range(1..=2);
            let x = [uniform(&mut r, &[2, 2, 5, 6], 1.0), uniform(&mut r, &[3, 2, 3, 3], 0.5)];
            check_gradients(&x, &move |g, v| g.conv2d(v[0], v[1], stride, 1), s, None)
        }),
        kernel!("conv2d_unbatched", |s| {
            let mut r = rng_for(s);
            let x = [uniform(&mut r, &[2, 4, 4], 1.0), uniform(&mut r, &[2, 2, 3, 3], 0.5)];
            check_gradients(&x, &|g, v| g.conv2d(v[0], v[1], 1, 0), s, None)
        }),
        kernel!("batch_norm_train", |s| {
            let mut r = rng_for(s);
            let x = [
                uniform(&mut r, &[4, 3, 2, 2], 2.0),
                positive(&mut r, &[3], 0.5, 1.5),
                uniform(&mut r, &[3], 0.5),
            ];
            check_gradients(
                &x,
                &|g, v| Ok(g.batch_norm(v[0], v[1], v[2], BnMode::Train { eps: 1e-5 })?.0),
                s,
                None,
            )
        }),
        kernel!("batch_norm_infer", |s| {
            let mut r = rng_for(s);
            let x = [
                uniform(&mut r, &[3, 3, 2, 2], 2.0),
                positive(&mut r, &[3], 0.5, 1.5),
                uniform(&mut r, &[3], 0.5),
            ];
            let mean = uniform(&mut r, &[3], 0.5).into_data();
            let var = positive(&mut r, &[3], 0.5, 2.0).into_data();
            check_gradients(
                &x,
                &|g, v| {
                    let mode = BnMode::Infer {
                        mean: &mean,
                        var: &var,
                        eps: 1e-5,
                    };
                    Ok(g.batch_norm(v[0], v[1], v[2], mode)?.0)
                },
                s,
                None,
            )
        }),
        kernel!("reshape_permute", |s| {
            let mut r = rng_for(s);
            check_gradients(
                &[uniform(&mut r, &[2, 3, 4], 1.0)],
                &|g, v| {
                    let p = g.permute(v[0], &[2, 0, 1])?;
                    g.reshape(p, &[4, 6])
                },
                s,
                None,
            )
        }),
        kernel!("attention", |s| {
            let mut r = rng_for(s);
            check_gradients(&[uniform(&mut r, &[2, 4, 12], 1.0)], &|g, v| g.attention(v[0], 2), s, None)
        }),
        kernel!("l2_normalize", |s| {
            let mut r = rng_for(s);
            check_gradients(&[uniform(&mut r, &[3, 5], 1.0)], &|g, v| g.l2_normalize(v[0]), s, None)
        }),
        kernel!("msa_block", |s| {
            let mut r = rng_for(s);
            let d = 8;
            let [qw, qb] = linear_params(&mut r, d, 3 * d);
            let [ow, ob] = linear_params(&mut r, d, d);
            let x = [
                uniform(&mut r, &[2, 3, d], 1.0),
                positive(&mut r, &[d], 0.5, 1.5),
                uniform(&mut r, &[d], 0.5),
                qw,
                qb,
                ow,
                ob,
            ];
            check_gradients(
                &x,
                &|g, v| {
                    let p = MsaParams {
                        norm_gamma: v[1],
                        norm_beta: v[2],
                        qkv: Linear { weight: v[3], bias: v[4] },
                        out: Linear { weight: v[5], bias: v[6] },
                    };
                    msa_block(g, v[0], &p, 2)
                },
                s,
                None,
            )
        }),
        kernel!("gap_head", |s| {
            let mut r = rng_for(s);
            check_gradients(&[uniform(&mut r, &[2, 4, 5], 1.0)], &|g, v| aggregation::gap_head(g, v[0]), s, None)
        }),
        kernel!("smd_head", |s| {
            let mut r = rng_for(s);
            let (p, k) = (4, 2);
            let [w1, b1] = linear_params(&mut r, p, SMD_EXPANSION * p);
            let [w2, b2] = linear_params(&mut r, SMD_EXPANSION * p, p);
            let [w3, b3] = linear_params(&mut r, p, k);
            let x = [uniform(&mut r, &[2, p, 3], 1.0), w1, b1, w2, b2, w3, b3];
            check_gradients(
                &x,
                &|g, v| {
                    let params = SmdParams {
                        expand: Linear { weight: v[1], bias: v[2] },
                        reduce: Linear { weight: v[3], bias: v[4] },
                        project: Linear { weight: v[5], bias: v[6] },
                    };
                    aggregation::smd_head(g, v[0], &params)
                },
                s,
                None,
            )
        }),
        kernel!("local_head", |s| {
            let mut r = rng_for(s);
            let [w, b] = linear_params(&mut r, 3, 5);
            let x = [uniform(&mut r, &[2, 8, 3], 1.0), w, b];
            check_gradients(
                &x,
                &|g, v| aggregation::local_head(g, v[0], (2, 4), (1, 2), &Linear { weight: v[1], bias: v[2] }),
                s,
                None,
            )
        }),
        kernel!("pairwise_distance", |s| {
            let mut r = rng_for(s);
            let x = [uniform(&mut r, &[3, 4], 1.0), uniform(&mut r, &[4, 4], 1.0)];
            check_gradients(&x, &|g, v| losses::pairwise_distance(g, v[0], v[1]), s, None)
        }),
        kernel!("triplet_exhaustive", |s| {
            let mut r = rng_for(s);
            let d = positive(&mut r, &[5, 5], 0.1, 1.5);
            check_gradients(
                &[d],
                &|g, v| losses::triplet_loss(g, v[0], 10.0, Strategy::Exhaustive, None),
                s,
                None,
            )
        }),
        kernel!("triplet_exhaustive_masked", |s| {
            let mut r = rng_for(s);
            let d = positive(&mut r, &[4, 4], 0.1, 1.5);
            let mask: Vec<bool> = (0..16).map(|i| i % 5 != 0 && r.random_bool(0.3)).collect();
            check_gradients(
                &[d],
                &move |g, v| losses::triplet_loss(g, v[0], 10.0, Strategy::Exhaustive, Some(&mask)),
                s,
                None,
            )
        }),
        kernel!("triplet_semi_hard", |s| {
            let mut r = rng_for(s);
            let d = positive(&mut r, &[6, 6], 0.1, 1.5);
            check_gradients(
                &[d],
                &|g, v| losses::triplet_loss(g, v[0], 10.0, Strategy::SemiHard, None),
                s,
                None,
            )
        }),
        kernel!("info_nce", |s| {
            let mut r = rng_for(s);
            let sim = uniform(&mut r, &[5, 5], 1.0);
            check_gradients(&[sim], &|g, v| losses::info_nce_loss(g, v[0], 0.1), s, None)
        }),
    ]
}

fn tiny_config(head: HeadKind) -> ModelConfig {
    ModelConfig::desk(2, 8, 2, &[4, 4, 4, 4, 4, 6], (32, 32))
        .with_head(head)
        .with_smd_k(2)
}

const E2E_BATCH: usize = 4;
const E2E_ENTRIES: usize = 48;

/// Siamese forward plus loss for a 2-layer model; the check perturbs a random
/// subset of both branches' parameters.
fn end_to_end(seed: u64, head: HeadKind, loss: LossConfig) -> Result<f64> {
    let mut r = rng_for(seed);
    let base = tiny_config(head);
    let ground = Branch::<f64>::init(&base.clone().with_input_hw((32, 32)), seed)?;
    let aerial = Branch::<f64>::init(&base.with_input_hw((16, 32)), seed.wrapping_add(1))?;
    // push parameters away from their init so no gradient is trivially tiny
    let jitter = |b: &Branch<f64>, r: &mut ChaCha8Rng| -> Vec<Tensor<f64>> {
        b.params()
            .iter()
            .map(|t| {
                let noise = uniform(r, t.shape(), 0.2);
                let data = t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
                Tensor::from_vec(t.shape(), data).expect("finite")
            })
            .collect()
    };
    let mut inputs = jitter(&ground, &mut r);
    let n_ground = inputs.len();
    inputs.extend(jitter(&aerial, &mut r));
    let g_img = uniform(&mut r, &[E2E_BATCH, 3, 32, 32], 1.0);
    let a_img = uniform(&mut r, &[E2E_BATCH, 3, 16, 32], 1.0);
    check_gradients(
        &inputs,
        &|g, v| {
            let gi = g.constant(g_img.clone());
            let ai = g.constant(a_img.clone());
            let go = ground.forward(g, &v[..n_ground], gi, true)?;
            let ao = aerial.forward(g, &v[n_ground..], ai, true)?;
            losses::retrieval_loss(g, go.descriptor, ao.descriptor, &loss, None)
        },
        seed,
        Some(E2E_ENTRIES),
    )
}

macro_rules! e2e {
    ($name:expr, $head:expr, $strategy:expr, $tau:expr) => {
        Case {
            name: $name,
            tolerance: END_TO_END_TOLERANCE,
            run: |s| {
                end_to_end(
                    s,
                    $head,
                    LossConfig {
                        alpha: 10.0,
                        tau: $tau,
                        strategy: $strategy,
                    },
                )
            },
        }
    };
}

/// Full Siamese loss passes through a 2-layer model.
pub fn end_to_end_cases() -> Vec<Case> {
    vec![
        e2e!("e2e_gap_exhaustive", HeadKind::Gap, Strategy::Exhaustive, 0.02),
        e2e!("e2e_gap_semi_hard", HeadKind::Gap, Strategy::SemiHard, 0.02),
        e2e!("e2e_gap_info_nce", HeadKind::Gap, Strategy::InfoNce, 0.1),
        e2e!("e2e_smd_exhaustive", HeadKind::Smd, Strategy::Exhaustive, 0.02),
    ]
}

pub fn all_cases() -> Vec<Case> {
    let mut v = kernel_cases();
    v.extend(end_to_end_cases());
    v
}

/// Runs each case for seeds `0..seeds`.
pub fn run_cases(cases: &[Case], seeds: usize) -> Result<Vec<CaseReport>> {
    cases
        .iter()
        .map(|c| {
            let mut worst = 0.0f64;
            for s in 0..seeds as u64 {
                worst = worst.max((c.run)(s)?);
            }
            Ok(CaseReport {
                name: c.name,
                seeds,
                max_rel_error: worst,
                tolerance: c.tolerance,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        struct Wrong;
        impl crate::numerics::CustomOp<f64> for Wrong {
            fn name(&self) -> &str {
                "wrong"
            }
            fn backward(&self, _: &[&Tensor<f64>], _: &Tensor<f64>, g: &[f64]) -> Vec<Vec<f64>> {
                vec![g.iter().map(|v| 3.0 * v).collect()]
            }
        }
        let x = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let err = check_gradients(
            &[x],
            &|g, v| {
                let out = Tensor::from_vec(&[3], g.value(v[0]).data().iter().map(|a| 2.0 * a).collect())?;
                Ok(g.custom(&[v[0]], out, Box::new(Wrong)))
            },
            0,
            None,
        )
        .unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn kernels_pass_one_seed() {
        for r in run_cases(&kernel_cases(), 1).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }
}
