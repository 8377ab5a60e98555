//! Dense layers shared by the corrective MLPs and the pose VAE.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::optim::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `out x in`
    pub w: Tensor,
    pub b: Vec<f64>,
}

impl Dense {
    /// Glorot-uniform weights, zero bias.
    pub fn init<R: Rng>(rng: &mut R, input: usize, output: usize) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        Dense {
            w: Tensor::new(
                output,
                input,
                (0..input * output).map(|_| rng.random_range(-bound..bound)).collect(),
            ),
            b: vec![0.0; output],
        }
    }
}

/// Layers for the widths `dims[0] -> dims[1] -> ...`.
pub fn init_layers<R: Rng>(rng: &mut R, dims: &[usize]) -> Vec<Dense> {
    dims.windows(2).map(|w| Dense::init(rng, w[0], w[1])).collect()
}

pub fn bind_layers(g: &mut Graph, layers: &[Dense], trainable: bool) -> Vec<(Var, Var)> {
    layers
        .iter()
        .map(|l| {
            if trainable {
                (g.param(l.w.rows, l.w.cols, l.w.data.clone()), g.param(1, l.b.len(), l.b.clone()))
            } else {
                (
                    g.constant(l.w.rows, l.w.cols, l.w.data.clone()),
                    g.constant(1, l.b.len(), l.b.clone()),
                )
            }
        })
        .collect()
}

/// Weight and bias blocks in binding order.
pub fn layer_tensors_mut(layers: &mut [Dense]) -> Vec<&mut [f64]> {
    let mut out: Vec<&mut [f64]> = Vec::new();
    for l in layers {
        out.push(&mut l.w.data);
        out.push(&mut l.b);
    }
    out
}

/// Softplus hidden layers and a linear output layer.
pub fn mlp(g: &mut Graph, layers: &[(Var, Var)], x: Var) -> Var {
    let mut h = x;
    for (k, (w, b)) in layers.iter().enumerate() {
        h = g.matmul_nt(h, *w);
        h = g.add_row(h, *b);
        if k + 1 < layers.len() {
            h = g.softplus(h);
        }
    }
    h
}
