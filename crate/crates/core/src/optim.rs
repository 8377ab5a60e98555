//! First-order optimizers over flat parameter blocks and an L-BFGS
//! minimizer with Armijo backtracking.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major parameter matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor shape");
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Adam with one learning rate per parameter block.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(sizes: &[usize]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// One update. Blocks with `lr == 0` are left untouched (their moments
    /// do not advance either).
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>], lrs: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (b, p) in params.iter_mut().enumerate() {
            if lrs[b] == 0.0 {
                continue;
            }
            let (m, v, g) = (&mut self.m[b], &mut self.v[b], &grads[b]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= lrs[b] * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Heavy-ball gradient descent.
#[derive(Debug, Clone)]
pub struct Momentum {
    pub momentum: f64,
    vel: Vec<Vec<f64>>,
}

impl Momentum {
    pub fn new(sizes: &[usize], momentum: f64) -> Self {
        Momentum {
            momentum,
            vel: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>], lrs: &[f64]) {
        for (b, p) in params.iter_mut().enumerate() {
            let vel = &mut self.vel[b];
            for i in 0..p.len() {
                vel[i] = self.momentum * vel[i] - lrs[b] * grads[b][i];
                p[i] += vel[i];
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbfgsOptions {
    pub max_iters: usize,
    pub memory: usize,
    /// Stop when the objective decrease over one step falls below
    /// `tol * max(1, |f|)`.
    pub tol: f64,
    pub grad_tol: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            max_iters: 200,
            memory: 10,
            tol: 1e-12,
            grad_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    /// Objective after every accepted step, starting with the initial value.
    pub trace: Vec<f64>,
    pub converged: bool,
}

/// Minimizes `f` with L-BFGS directions and Armijo backtracking; only
/// decreasing steps are accepted, so the trace is non-increasing.
pub fn lbfgs(f: &mut dyn FnMut(&[f64]) -> Result<(f64, Vec<f64>)>, x0: &[f64], opts: &LbfgsOptions) -> Result<LbfgsResult> {
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f(&x)?;
    if !fx.is_finite() {
        return Err(Error::NonFinite("initial objective".into()));
    }
    let mut trace = vec![fx];
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..opts.max_iters {
        if inf_norm(&g) <= opts.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let mut d = two_loop(&g, &s_hist, &y_hist);
        if dot(&d, &g) >= 0.0 {
            s_hist.clear();
            y_hist.clear();
            d = g.iter().map(|v| -v).collect();
        }
        if s_hist.is_empty() {
            // without curvature information take a unit-length first step
            let n = dot(&d, &d).sqrt();
            if n > 1.0 {
                d.iter_mut().for_each(|v| *v /= n);
            }
        }
        let Some((xn, fxn, gn)) = backtrack(f, &x, fx, &g, &d)? else {
            if s_hist.is_empty() {
                converged = true;
                break;
            }
            // stale curvature pairs; retry from steepest descent
            s_hist.clear();
            y_hist.clear();
            continue;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        if dot(&s, &y) > 1e-16 * dot(&y, &y).max(1e-300) {
            s_hist.push(s);
            y_hist.push(y);
            if s_hist.len() > opts.memory {
                s_hist.remove(0);
                y_hist.remove(0);
            }
        }
        // otherwise skip the pair: non-positive curvature under Armijo-only
        // steps would break the inverse-Hessian model
        let decrease = fx - fxn;
        x = xn;
        fx = fxn;
        g = gn;
        trace.push(fx);
        if decrease <= opts.tol * fx.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    Ok(LbfgsResult {
        x,
        f: fx,
        iterations,
        trace,
        converged,
    })
}

type Step = Option<(Vec<f64>, f64, Vec<f64>)>;

fn backtrack(f: &mut dyn FnMut(&[f64]) -> Result<(f64, Vec<f64>)>, x: &[f64], fx: f64, g: &[f64], d: &[f64]) -> Result<Step> {
    let slope = dot(g, d);
    let mut t = 1.0;
    for _ in 0..40 {
        let xn: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + t * b).collect();
        let (fxn, gn) = f(&xn)?;
        if fxn.is_finite() && fxn <= fx + 1e-4 * t * slope && fxn < fx {
            return Ok(Some((xn, fxn, gn)));
        }
        t *= 0.5;
    }
    Ok(None)
}

fn two_loop(g: &[f64], s: &[Vec<f64>], y: &[Vec<f64>]) -> Vec<f64> {
    let mut q = g.to_vec();
    let k = s.len();
    let mut alpha = vec![0.0; k];
    for i in (0..k).rev() {
        let rho = 1.0 / dot(&y[i], &s[i]);
        alpha[i] = rho * dot(&s[i], &q);
        for (qj, yj) in q.iter_mut().zip(&y[i]) {
            *qj -= alpha[i] * yj;
        }
    }
    if k > 0 {
        let gamma = dot(&s[k - 1], &y[k - 1]) / dot(&y[k - 1], &y[k - 1]);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for i in 0..k {
        let rho = 1.0 / dot(&y[i], &s[i]);
        let beta = rho * dot(&y[i], &q);
        for (qj, sj) in q.iter_mut().zip(&s[i]) {
            *qj += (alpha[i] - beta) * sj;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        Ok((f, g))
    }

    #[test]
    fn lbfgs_solves_rosenbrock_monotonically() {
        let r = lbfgs(
            &mut rosenbrock,
            &[-1.2, 1.0],
            &LbfgsOptions {
                max_iters: 500,
                ..Default::default()
            },
        )
        .unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 1.0).abs() < 1e-5, "{:?}", r.x);
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn adam_and_momentum_descend_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut adam = Adam::new(&[2]);
        let mut y = x.clone();
        let mut mom = Momentum::new(&[2], 0.9);
        for _ in 0..2000 {
            let g = vec![x.iter().map(|v| 2.0 * v).collect::<Vec<_>>()];
            adam.step(&mut [&mut x], &g, &[0.01]);
            let g = vec![y.iter().map(|v| 2.0 * v).collect::<Vec<_>>()];
            mom.step(&mut [&mut y], &g, &[0.01]);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2));
        assert!(y.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn adam_zero_lr_freezes_block() {
        let mut a = vec![1.0];
        let mut b = vec![1.0];
        let mut adam = Adam::new(&[1, 1]);
        adam.step(&mut [&mut a, &mut b], &[vec![1.0], vec![1.0]], &[0.1, 0.0]);
        assert!(a[0] < 1.0);
        assert_eq!(b[0], 1.0);
    }
}
