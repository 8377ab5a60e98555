//! Tape-based reverse-mode differentiation over dense row-major matrices.
//!
//! A [`Graph`] records every operation as a node holding its value, its
//! parents and a vector-Jacobian product. [`Graph::backward`] walks the tape
//! in reverse. Nodes that do not depend on any parameter store no backward
//! closure.

mod geometry;
mod ops;

pub use geometry::{Camera, FkLayout, LandmarkSpec, PROJECT_EPS};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// `backward(parent_values, output_value, output_grad, parent_grads)`.
/// Parent gradient buffers are zeroed and have the parent's length, or are
/// empty when that parent needs no gradient.
type Backward = Box<dyn Fn(&[&[f64]], &[f64], &[f64], &mut [Vec<f64>])>;

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    parents: Vec<usize>,
    backward: Option<Backward>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<usize>,
}

impl Gradients {
    /// Gradient of `v`; zeros when the output does not depend on it.
    pub fn get(&self, v: Var) -> Vec<f64> {
        self.grads[v.0].clone().unwrap_or_else(|| vec![0.0; self.shapes[v.0]])
    }

    pub fn take(&mut self, v: Var) -> Vec<f64> {
        self.grads[v.0].take().unwrap_or_else(|| vec![0.0; self.shapes[v.0]])
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, rows: usize, cols: usize, value: Vec<f64>, needs_grad: bool) -> Var {
        assert_eq!(rows * cols, value.len(), "leaf shape {rows}x{cols} vs {} values", value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            parents: Vec::new(),
            backward: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn param(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        self.push_leaf(rows, cols, value, true)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        self.push_leaf(rows, cols, value, false)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(1, 1, vec![x])
    }

    pub(crate) fn push_op(&mut self, rows: usize, cols: usize, value: Vec<f64>, parents: &[Var], backward: Backward) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: needs_grad.then_some(backward),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        assert_eq!(self.nodes[v.0].value.len(), 1, "not a scalar");
        self.nodes[v.0].value[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        (self.nodes[v.0].rows, self.nodes[v.0].cols)
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.nodes[output.0].value.len(), 1, "backward needs a scalar output");
        let n = output.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(back) = &node.backward {
                let pvals: Vec<&[f64]> = node.parents.iter().map(|&p| &self.nodes[p].value[..]).collect();
                let mut pgrads: Vec<Vec<f64>> = node
                    .parents
                    .iter()
                    .map(|&p| {
                        if self.nodes[p].needs_grad {
                            vec![0.0; self.nodes[p].value.len()]
                        } else {
                            Vec::new()
                        }
                    })
                    .collect();
                back(&pvals, &node.value, &g, &mut pgrads);
                for (&p, pg) in node.parents.iter().zip(pgrads) {
                    if pg.is_empty() {
                        continue;
                    }
                    match &mut grads[p] {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(&pg) {
                                *a += b;
                            }
                        }
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.len()).collect(),
        }
    }
}

/// Largest absolute difference between analytic and central-difference
/// gradients, relative to the largest finite-difference entry.
pub fn gradient_check(f: &dyn Fn(&[f64]) -> (f64, Vec<f64>), x: &[f64], h: f64) -> f64 {
    let (_, analytic) = f(x);
    let mut fd = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = f(&xp).0;
        xp[i] = x[i] - h;
        let fm = f(&xp).0;
        xp[i] = x[i];
        fd[i] = (fp - fm) / (2.0 * h);
    }
    relative_error(&analytic, &fd)
}

/// `max |a - b| / max(|b|_inf, 1e-12)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-12);
    diff / scale
}
