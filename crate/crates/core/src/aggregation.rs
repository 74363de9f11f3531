//! Descriptor heads: global average pooling, pooled local features, and the
//! spatial-mixed aggregation module (SMD).
//!
//! Every head consumes tokens `[n, p, c]` and emits L2-normalized rows.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

/// Affine layer `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear<V> {
    pub weight: V,
    pub bias: V,
}

impl<V: Copy> Linear<V> {
    pub fn map<U>(&self, mut f: impl FnMut(V) -> U) -> Linear<U> {
        Linear {
            weight: f(self.weight),
            bias: f(self.bias),
        }
    }
}

/// Applies a linear layer to the last axis of any-rank input.
pub fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, p: &Linear<Var>) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let width = *shape.last().expect("rank >= 1");
    let rows = g.value(x).numel() / width;
    let out_dim = g.shape(p.weight)[1];
    let flat = g.reshape(x, &[rows, width])?;
    let y = g.matmul(flat, p.weight)?;
    let y = g.add_broadcast(y, p.bias)?;
    let mut out_shape = shape;
    *out_shape.last_mut().expect("rank >= 1") = out_dim;
    g.reshape(y, &out_shape)
}

/// Spatial-mixing weights: `w1: [P, 4P]`, `w2: [4P, P]`, `w3: [P, K]`, each
/// with a bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SmdParams<V> {
    pub expand: Linear<V>,
    pub reduce: Linear<V>,
    pub project: Linear<V>,
}

impl<V: Copy> SmdParams<V> {
    pub fn map<U>(&self, mut f: impl FnMut(V) -> U) -> SmdParams<U> {
        SmdParams {
            expand: self.expand.map(&mut f),
            reduce: self.reduce.map(&mut f),
            project: self.project.map(&mut f),
        }
    }
}

/// SMD expansion ratio on the spatial axis.
pub const SMD_EXPANSION: usize = 4;

fn tokens_shape<T: Scalar>(g: &Graph<T>, tokens: Var) -> Result<(usize, usize, usize)> {
    match *g.shape(tokens) {
        [n, p, c] => Ok((n, p, c)),
        ref s => Err(Error::dim(format!("expected tokens [n, p, c], got {s:?}"))),
    }
}

/// Mean over tokens, then L2-normalize: `[n, p, c] -> [n, c]`.
pub fn gap_head<T: Scalar>(g: &mut Graph<T>, tokens: Var) -> Result<Var> {
    tokens_shape(g, tokens)?;
    let pooled = g.mean_axis(tokens, 1)?;
    g.l2_normalize(pooled)
}

/// SMD output before normalization, `[n, K * c]` in K-major blocks of `c`.
pub fn smd_features<T: Scalar>(g: &mut Graph<T>, tokens: Var, p: &SmdParams<Var>) -> Result<Var> {
    let (n, tok, c) = tokens_shape(g, tokens)?;
    let expected = g.shape(p.expand.weight)[0];
    if expected != tok {
        return Err(Error::dim(format!(
            "SMD built for {expected} tokens, got {tok}"
        )));
    }
    let k = g.shape(p.project.weight)[1];
    // mixing runs along the spatial axis: rows are (sample, channel)
    let xt = g.permute(tokens, &[0, 2, 1])?;
    let h = linear(g, xt, &p.expand)?;
    let h = g.gelu(h);
    let f = linear(g, h, &p.reduce)?;
    let fk = linear(g, f, &p.project)?; // [n, c, k]
    let unfolded = g.permute(fk, &[0, 2, 1])?; // [n, k, c]
    g.reshape(unfolded, &[n, k * c])
}

/// Spatial-mixed aggregation: `[n, p, c] -> [n, K * c]`, L2-normalized.
pub fn smd_head<T: Scalar>(g: &mut Graph<T>, tokens: Var, p: &SmdParams<Var>) -> Result<Var> {
    let f = smd_features(g, tokens, p)?;
    g.l2_normalize(f)
}

/// Average-pools the token grid down to `pool_hw`, projects each cell, and
/// unfolds cells in row-major grid order: `[n, p, c] -> [n, ph * pw * proj]`.
pub fn local_head<T: Scalar>(
    g: &mut Graph<T>,
    tokens: Var,
    grid_hw: (usize, usize),
    pool_hw: (usize, usize),
    proj: &Linear<Var>,
) -> Result<Var> {
    let (n, tok, c) = tokens_shape(g, tokens)?;
    let (gh, gw) = grid_hw;
    let (ph, pw) = pool_hw;
    if gh * gw != tok {
        return Err(Error::dim(format!("grid {gh}x{gw} does not hold {tok} tokens")));
    }
    if ph == 0 || pw == 0 || gh % ph != 0 || gw % pw != 0 {
        return Err(Error::dim(format!(
            "grid {gh}x{gw} not divisible into {ph}x{pw} cells"
        )));
    }
    let (wh, ww) = (gh / ph, gw / pw);
    let x = g.reshape(tokens, &[n, ph, wh, pw, ww, c])?;
    let x = g.permute(x, &[0, 1, 3, 2, 4, 5])?;
    let x = g.reshape(x, &[n, ph, pw, wh * ww, c])?;
    let pooled = g.mean_axis(x, 3)?;
    let projected = linear(g, pooled, proj)?;
    let proj_dim = g.shape(proj.weight)[1];
    let flat = g.reshape(projected, &[n, ph * pw * proj_dim])?;
    g.l2_normalize(flat)
}

/// L2-normalized global descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor {
    values: Vec<f32>,
}

impl Descriptor {
    /// Normalizes `values`; an all-zero vector is a degenerate input.
    pub fn new(values: Vec<f32>) -> Result<Self> {
        let norm = values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Numeric {
                location: "descriptor".into(),
                detail: format!("cannot normalize vector with norm {norm}"),
            });
        }
        Ok(Self {
            values: values.iter().map(|&v| (v as f64 / norm) as f32).collect(),
        })
    }

    /// Wraps values that are already unit length.
    pub fn from_unit(values: Vec<f32>) -> Result<Self> {
        let norm = values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-5 {
            return Err(Error::contract(format!("descriptor norm {norm} is not 1")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }
}

/// Splits an `[n, d]` descriptor tensor into rows.
pub fn descriptors_from_rows<T: Scalar>(t: &Tensor<T>) -> Result<Vec<Descriptor>> {
    let d = t.last_dim();
    t.data()
        .chunks(d)
        .map(|row| Descriptor::new(row.iter().map(|v| v.as_f64() as f32).collect()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tokens(g: &mut Graph<f64>, shape: &[usize], data: &[f64]) -> Var {
        g.constant(Tensor::from_f64(shape, data).unwrap())
    }

    #[test]
    fn gap_of_equal_tokens_is_normalized_token() {
        let mut g = Graph::<f64>::new();
        let t = tokens(&mut g, &[1, 3, 2], &[3.0, 4.0, 3.0, 4.0, 3.0, 4.0]);
        let d = gap_head(&mut g, t).unwrap();
        let v = g.value(d).data();
        assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn gap_of_orthogonal_pair() {
        let mut g = Graph::<f64>::new();
        let t = tokens(&mut g, &[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let d = gap_head(&mut g, t).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!(g.value(d).data().iter().all(|v| (v - h).abs() < 1e-12));
    }

    #[test]
    fn zero_descriptor_is_degenerate() {
        assert!(Descriptor::new(vec![0.0; 4]).is_err());
        let d = Descriptor::new(vec![2.0, 0.0]).unwrap();
        assert_eq!(d.values(), &[1.0, 0.0]);
    }

    #[test]
    fn local_head_pools_equal_grid_to_common_token() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..4 * 8).map(|i| [1.0, 2.0][i % 2]).collect();
        let t = tokens(&mut g, &[1, 16, 2], &data);
        let w = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.constant(Tensor::zeros(&[2]));
        let d = local_head(&mut g, t, (4, 4), (2, 2), &Linear { weight: w, bias: b }).unwrap();
        let v = g.value(d).data();
        assert_eq!(v.len(), 8);
        let s = 5f64.sqrt() * 2.0;
        for cell in v.chunks(2) {
            assert!((cell[0] - 1.0 / s).abs() < 1e-12);
            assert!((cell[1] - 2.0 / s).abs() < 1e-12);
        }
    }

    #[test]
    fn local_head_rejects_indivisible_grid() {
        let mut g = Graph::<f64>::new();
        let t = tokens(&mut g, &[1, 6, 1], &[1.0; 6]);
        let w = g.constant(Tensor::ones(&[1, 1]));
        let b = g.constant(Tensor::zeros(&[1]));
        let err = local_head(&mut g, t, (2, 3), (2, 2), &Linear { weight: w, bias: b }).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }
}
