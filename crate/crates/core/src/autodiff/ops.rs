//! Elementwise, reduction and matrix primitives.

use super::{Graph, Var};

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    fn same_shape(&self, a: Var, b: Var) -> (usize, usize) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "shape mismatch");
        sa
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.same_shape(a, b);
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push_op(
            r,
            c,
            v,
            &[a, b],
            Box::new(|_, _, g, pg| {
                for buf in pg.iter_mut() {
                    if !buf.is_empty() {
                        buf.copy_from_slice(g);
                    }
                }
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.same_shape(a, b);
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        self.push_op(
            r,
            c,
            v,
            &[a, b],
            Box::new(|_, _, g, pg| {
                if !pg[0].is_empty() {
                    pg[0].copy_from_slice(g);
                }
                if !pg[1].is_empty() {
                    for (o, x) in pg[1].iter_mut().zip(g) {
                        *o = -x;
                    }
                }
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.same_shape(a, b);
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        self.push_op(
            r,
            c,
            v,
            &[a, b],
            Box::new(|pv, _, g, pg| {
                for (k, other) in [(0, 1), (1, 0)] {
                    if !pg[k].is_empty() {
                        for ((o, x), gi) in pg[k].iter_mut().zip(pv[other]).zip(g) {
                            *o = x * gi;
                        }
                    }
                }
            }),
        )
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().map(|x| x * k).collect();
        self.push_op(
            r,
            c,
            v,
            &[a],
            Box::new(move |_, _, g, pg| {
                for (o, x) in pg[0].iter_mut().zip(g) {
                    *o = x * k;
                }
            }),
        )
    }

    /// Adds a constant array of the same length.
    pub fn add_const(&mut self, a: Var, k: &[f64]) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(k.len(), r * c);
        let v = self.value(a).iter().zip(k).map(|(x, y)| x + y).collect();
        self.push_op(r, c, v, &[a], Box::new(|_, _, g, pg| pg[0].copy_from_slice(g)))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        self.row_op(a, row, 1.0)
    }

    /// Subtracts a `1 x c` row from every row of `a`.
    pub fn sub_row(&mut self, a: Var, row: Var) -> Var {
        self.row_op(a, row, -1.0)
    }

    fn row_op(&mut self, a: Var, row: Var, sign: f64) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "row shape");
        let rv = self.value(row).to_vec();
        let mut v = self.value(a).to_vec();
        for chunk in v.chunks_exact_mut(c) {
            for (x, y) in chunk.iter_mut().zip(&rv) {
                *x += sign * y;
            }
        }
        self.push_op(
            r,
            c,
            v,
            &[a, row],
            Box::new(move |_, _, g, pg| {
                if !pg[0].is_empty() {
                    pg[0].copy_from_slice(g);
                }
                if !pg[1].is_empty() {
                    for chunk in g.chunks_exact(c) {
                        for (o, x) in pg[1].iter_mut().zip(chunk) {
                            *o += sign * x;
                        }
                    }
                }
            }),
        )
    }

    /// `a (r x k) * b (k x c)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (r, k) = self.shape(a);
        let (k2, c) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimension");
        let mut v = vec![0.0; r * c];
        matmul_into(self.value(a), self.value(b), r, k, c, &mut v);
        self.push_op(
            r,
            c,
            v,
            &[a, b],
            Box::new(move |pv, _, g, pg| {
                let (av, bv) = (pv[0], pv[1]);
                if !pg[0].is_empty() {
                    // dA = G B^T
                    for i in 0..r {
                        let gi = &g[i * c..(i + 1) * c];
                        for p in 0..k {
                            let bp = &bv[p * c..(p + 1) * c];
                            pg[0][i * k + p] = dot(gi, bp);
                        }
                    }
                }
                if !pg[1].is_empty() {
                    // dB = A^T G
                    let db = &mut pg[1];
                    for i in 0..r {
                        let gi = &g[i * c..(i + 1) * c];
                        for p in 0..k {
                            let a_ip = av[i * k + p];
                            if a_ip != 0.0 {
                                axpy(a_ip, gi, &mut db[p * c..(p + 1) * c]);
                            }
                        }
                    }
                }
            }),
        )
    }

    /// `a (r x k) * b^T` with `b` stored as `c x k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (r, k) = self.shape(a);
        let (c, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_nt inner dimension");
        let (av, bv) = (self.value(a), self.value(b));
        let mut v = vec![0.0; r * c];
        for i in 0..r {
            let ai = &av[i * k..(i + 1) * k];
            for j in 0..c {
                v[i * c + j] = dot(ai, &bv[j * k..(j + 1) * k]);
            }
        }
        self.push_op(
            r,
            c,
            v,
            &[a, b],
            Box::new(move |pv, _, g, pg| {
                let (av, bv) = (pv[0], pv[1]);
                if !pg[0].is_empty() {
                    // dA = G B
                    for i in 0..r {
                        let out = &mut pg[0][i * k..(i + 1) * k];
                        for j in 0..c {
                            let gij = g[i * c + j];
                            if gij != 0.0 {
                                axpy(gij, &bv[j * k..(j + 1) * k], out);
                            }
                        }
                    }
                }
                if !pg[1].is_empty() {
                    // dB = G^T A
                    for i in 0..r {
                        let ai = &av[i * k..(i + 1) * k];
                        for j in 0..c {
                            let gij = g[i * c + j];
                            if gij != 0.0 {
                                axpy(gij, ai, &mut pg[1][j * k..(j + 1) * k]);
                            }
                        }
                    }
                }
            }),
        )
    }

    fn unary(&mut self, a: Var, f: fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Var {
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().map(|&x| f(x)).collect();
        self.push_op(
            r,
            c,
            v,
            &[a],
            Box::new(move |pv, out, g, pg| {
                for i in 0..g.len() {
                    pg[0][i] = g[i] * df(pv[0][i], out[i]);
                }
            }),
        )
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, |x, _| sigmoid(x))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, |_, y| y)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push_op(
            1,
            1,
            vec![s],
            &[a],
            Box::new(|_, _, g, pg| pg[0].iter_mut().for_each(|x| *x = g[0])),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_sq(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|x| x * x).sum();
        self.push_op(
            1,
            1,
            vec![s],
            &[a],
            Box::new(|pv, _, g, pg| {
                for (o, x) in pg[0].iter_mut().zip(pv[0]) {
                    *o = 2.0 * x * g[0];
                }
            }),
        )
    }

    /// `sum_i k_i v_i` over nodes of equal shape.
    pub fn linear_combination(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty());
        let (r, c) = self.shape(terms[0].0);
        let mut v = vec![0.0; r * c];
        for &(t, k) in terms {
            assert_eq!(self.shape(t), (r, c));
            axpy(k, self.value(t), &mut v);
        }
        let ks: Vec<f64> = terms.iter().map(|t| t.1).collect();
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push_op(
            r,
            c,
            v,
            &parents,
            Box::new(move |_, _, g, pg| {
                for (buf, &k) in pg.iter_mut().zip(&ks) {
                    if !buf.is_empty() {
                        axpy(k, g, buf);
                    }
                }
            }),
        )
    }

    /// Builds an `r x map.len()` matrix whose column `i` is column
    /// `map[i].1` of input `map[i].0`, or the constant `fill[i]` for `None`.
    pub fn gather_cols(&mut self, inputs: &[Var], map: &[Option<(usize, usize)>], fill: &[f64]) -> Var {
        assert_eq!(map.len(), fill.len());
        let rows = self.shape(inputs[0]).0;
        let widths: Vec<usize> = inputs
            .iter()
            .map(|&x| {
                let (r, c) = self.shape(x);
                assert_eq!(r, rows, "gather_cols row count");
                c
            })
            .collect();
        let n = map.len();
        let mut v = vec![0.0; rows * n];
        for (i, m) in map.iter().enumerate() {
            for r in 0..rows {
                v[r * n + i] = match m {
                    Some((inp, col)) => self.value(inputs[*inp])[r * widths[*inp] + col],
                    None => fill[i],
                };
            }
        }
        let map = map.to_vec();
        self.push_op(
            rows,
            n,
            v,
            inputs,
            Box::new(move |_, _, g, pg| {
                for (i, m) in map.iter().enumerate() {
                    if let Some((inp, col)) = *m {
                        if pg[inp].is_empty() {
                            continue;
                        }
                        for r in 0..rows {
                            pg[inp][r * widths[inp] + col] += g[r * n + i];
                        }
                    }
                }
            }),
        )
    }

    pub fn concat_cols(&mut self, inputs: &[Var]) -> Var {
        let mut map = Vec::new();
        for (k, &x) in inputs.iter().enumerate() {
            map.extend((0..self.shape(x).1).map(|c| Some((k, c))));
        }
        let fill = vec![0.0; map.len()];
        self.gather_cols(inputs, &map, &fill)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let map: Vec<_> = (start..start + len).map(|c| Some((0, c))).collect();
        self.gather_cols(&[a], &map, &vec![0.0; len])
    }

    /// Same data with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(self.value(a).len(), rows * cols);
        let v = self.value(a).to_vec();
        self.push_op(rows, cols, v, &[a], Box::new(|_, _, g, pg| pg[0].copy_from_slice(g)))
    }

    /// Stacks rows of equal-width inputs.
    pub fn concat_rows(&mut self, inputs: &[Var]) -> Var {
        let cols = self.shape(inputs[0]).1;
        let mut v = Vec::new();
        let mut lens = Vec::new();
        for &x in inputs {
            assert_eq!(self.shape(x).1, cols, "concat_rows width");
            v.extend_from_slice(self.value(x));
            lens.push(self.value(x).len());
        }
        let rows = v.len() / cols;
        self.push_op(
            rows,
            cols,
            v,
            inputs,
            Box::new(move |_, _, g, pg| {
                let mut off = 0;
                for (buf, &l) in pg.iter_mut().zip(&lens) {
                    if !buf.is_empty() {
                        buf.copy_from_slice(&g[off..off + l]);
                    }
                    off += l;
                }
            }),
        )
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(k: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += k * xi;
    }
}

/// `out = a (r x k) * b (k x c)`, overwriting `out`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], r: usize, k: usize, c: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|x| *x = 0.0);
    for i in 0..r {
        let oi = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != 0.0 {
                axpy(aip, &b[p * c..(p + 1) * c], oi);
            }
        }
    }
}
