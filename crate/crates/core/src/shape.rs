//! Linear latent spaces: blendshape bases for surface, expression and
//! skeletal attributes, PCA, and linear autoencoders trained with ordered
//! dropout.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::optim::{Momentum, Tensor};
use crate::rig::Rig;

/// Production component counts for the surface and skeletal spaces.
pub const DEFAULT_SURFACE_COMPONENTS: usize = 128;
pub const DEFAULT_SKELETAL_COMPONENTS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisDomain {
    Surface,
    Expression,
    Skeletal,
    /// Hand-pose 6D residual space.
    Hand,
}

/// `mean + sum_k c_k components_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearBasis {
    pub domain: BasisDomain,
    pub mean: Vec<f64>,
    /// `n_comp x M`, row-major.
    pub components: Tensor,
}

impl LinearBasis {
    pub fn new(domain: BasisDomain, mean: Vec<f64>, components: Tensor) -> Result<Self> {
        if components.cols != mean.len() && components.rows > 0 {
            return Err(Error::dim("basis components width", mean.len(), components.cols));
        }
        if components.rows > mean.len() {
            return Err(Error::Input(format!(
                "{} components exceed dimension {}",
                components.rows,
                mean.len()
            )));
        }
        if components.data.iter().chain(&mean).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("basis".into()));
        }
        Ok(LinearBasis { domain, mean, components })
    }

    /// Basis with no components and a zero mean.
    pub fn empty(domain: BasisDomain, dim: usize) -> Self {
        LinearBasis {
            domain,
            mean: vec![0.0; dim],
            components: Tensor::new(0, dim, Vec::new()),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn n_comp(&self) -> usize {
        self.components.rows
    }

    pub fn component(&self, k: usize) -> &[f64] {
        self.components.row(k)
    }

    /// Keeps the first `n` components.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.n_comp());
        LinearBasis {
            domain: self.domain,
            mean: self.mean.clone(),
            components: Tensor::new(n, self.dim(), self.components.data[..n * self.dim()].to_vec()),
        }
    }

    pub fn check_coeffs(&self, coeffs: &[f64]) -> Result<()> {
        if coeffs.len() > self.n_comp() {
            return Err(Error::dim(
                format!("{:?} coefficients (maximum)", self.domain),
                self.n_comp(),
                coeffs.len(),
            ));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite(format!("{:?} coefficients", self.domain)));
        }
        Ok(())
    }

    /// Least-squares coefficients of `x - mean` (rows need not be
    /// orthonormal).
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n_comp();
        if n == 0 {
            return Vec::new();
        }
        let c = DMatrix::from_row_slice(n, self.dim(), &self.components.data);
        let d = nalgebra::DVector::from_iterator(self.dim(), x.iter().zip(&self.mean).map(|(a, b)| a - b));
        let gram = &c * c.transpose();
        let rhs = &c * d;
        match gram.clone().cholesky() {
            Some(ch) => ch.solve(&rhs).iter().copied().collect(),
            None => gram
                .svd(true, true)
                .solve(&rhs, 1e-12)
                .map(|s| s.iter().copied().collect())
                .unwrap_or_else(|_| vec![0.0; n]),
        }
    }
}

/// Evaluates the basis; fewer coefficients than components leaves the rest
/// at zero.
pub fn eval_basis(basis: &LinearBasis, coeffs: &[f64]) -> Result<Vec<f64>> {
    basis.check_coeffs(coeffs)?;
    let mut out = basis.mean.clone();
    for (k, &c) in coeffs.iter().enumerate() {
        if c != 0.0 {
            for (o, s) in out.iter_mut().zip(basis.component(k)) {
                *o += c * s;
            }
        }
    }
    Ok(out)
}

/// Rest-pose vertices after surface and expression blendshapes, before pose
/// correctives.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapedTemplate {
    pub vertices: Vec<[f64; 3]>,
    pub beta_s: Vec<f64>,
    pub beta_f: Vec<f64>,
    pub correctives_applied: bool,
}

pub fn shape_surface(rig: &Rig, surface: &LinearBasis, expression: &LinearBasis, beta_s: &[f64], beta_f: &[f64]) -> Result<ShapedTemplate> {
    let m = 3 * rig.vertex_count();
    for b in [surface, expression] {
        if b.dim() != m {
            return Err(Error::dim(format!("{:?} basis dimension", b.domain), m, b.dim()));
        }
    }
    let s = eval_basis(surface, beta_s)?;
    let f = eval_basis(expression, beta_f)?;
    let vertices = rig
        .template
        .vertices
        .iter()
        .enumerate()
        .map(|(i, v)| std::array::from_fn(|c| v[c] + s[3 * i + c] + f[3 * i + c]))
        .collect();
    Ok(ShapedTemplate {
        vertices,
        beta_s: beta_s.to_vec(),
        beta_f: beta_f.to_vec(),
        correctives_applied: false,
    })
}

/// Attribute vector fed to FK from skeletal latents.
pub fn skeletal_coeffs_to_attributes(basis: &LinearBasis, beta_k: &[f64]) -> Result<Vec<f64>> {
    eval_basis(basis, beta_k)
}

/// Principal components with their variances (descending).
#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: Vec<f64>,
    pub components: Tensor,
    pub variances: Vec<f64>,
}

/// PCA of the rows of `data`. Without centering the mean is pinned to zero
/// and components span the raw second-moment matrix. Components beyond the
/// data rank are zero rows. Each component's largest-magnitude entry is
/// positive.
pub fn pca(data: &[Vec<f64>], n_comp: usize, center: bool) -> Result<Pca> {
    let n = data.len();
    if n == 0 {
        return Err(Error::Input("PCA needs at least one sample".into()));
    }
    let m = data[0].len();
    if let Some(bad) = data.iter().position(|r| r.len() != m) {
        return Err(Error::dim(format!("sample {bad}"), m, data[bad].len()));
    }
    if n_comp > m {
        return Err(Error::Input(format!("{n_comp} components exceed dimension {m}")));
    }
    let mut mean = vec![0.0; m];
    if center {
        for r in data {
            for (a, b) in mean.iter_mut().zip(r) {
                *a += b / n as f64;
            }
        }
    }
    let x = DMatrix::from_fn(n, m, |i, j| data[i][j] - mean[j]);
    let denom = if center { (n.max(2) - 1) as f64 } else { n as f64 };
    // eigenvectors of the smaller Gram matrix
    let (vals, dirs): (Vec<f64>, DMatrix<f64>) = if m <= n {
        let cov = x.transpose() * &x;
        let e = cov.symmetric_eigen();
        (e.eigenvalues.iter().copied().collect(), e.eigenvectors)
    } else {
        let gram = &x * x.transpose();
        let e = gram.symmetric_eigen();
        let lifted = x.transpose() * &e.eigenvectors;
        (e.eigenvalues.iter().copied().collect(), lifted)
    };
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    let top = vals.iter().copied().fold(0.0, f64::max);
    let mut comps = Vec::with_capacity(n_comp * m);
    let mut variances = Vec::with_capacity(n_comp);
    for k in 0..n_comp {
        let idx = order.get(k).copied();
        let lam = idx.map_or(0.0, |i| vals[i].max(0.0));
        if idx.is_none() || lam <= 1e-13 * top.max(1e-300) {
            comps.extend(std::iter::repeat_n(0.0, m));
            variances.push(0.0);
            continue;
        }
        let col = dirs.column(idx.unwrap());
        let norm = col.norm();
        let mut row: Vec<f64> = col.iter().map(|v| v / norm).collect();
        let big = row.iter().copied().fold(0.0, |a: f64, v| if v.abs() > a.abs() { v } else { a });
        if big < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
        }
        comps.extend(row);
        variances.push(lam / denom);
    }
    Ok(Pca {
        mean,
        components: Tensor::new(n_comp, m, comps),
        variances,
    })
}

/// Affine encoder/decoder pair: `z = W_e x + b_e`, `x' = W_d z + b_d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearAutoencoder {
    pub domain: BasisDomain,
    /// `n x M`
    pub encoder_w: Tensor,
    pub encoder_b: Vec<f64>,
    /// `M x n`
    pub decoder_w: Tensor,
    pub decoder_b: Vec<f64>,
    pub ordered: bool,
}

impl LinearAutoencoder {
    pub fn from_pca(domain: BasisDomain, p: &Pca, ordered: bool) -> Self {
        let (n, m) = (p.components.rows, p.components.cols);
        let mut dec = vec![0.0; m * n];
        for k in 0..n {
            for i in 0..m {
                dec[i * n + k] = p.components.data[k * m + i];
            }
        }
        let encoder_b = (0..n)
            .map(|k| -p.components.row(k).iter().zip(&p.mean).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        LinearAutoencoder {
            domain,
            encoder_w: p.components.clone(),
            encoder_b,
            decoder_w: Tensor::new(m, n, dec),
            decoder_b: p.mean.clone(),
            ordered,
        }
    }

    pub fn n_comp(&self) -> usize {
        self.encoder_w.rows
    }

    pub fn dim(&self) -> usize {
        self.decoder_b.len()
    }

    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_comp())
            .map(|k| self.encoder_b[k] + self.encoder_w.row(k).iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }

    /// Decodes the first `z.len()` latents; the rest are treated as zero.
    pub fn decode(&self, z: &[f64]) -> Vec<f64> {
        let n = self.n_comp();
        (0..self.dim())
            .map(|i| self.decoder_b[i] + z.iter().enumerate().map(|(k, v)| self.decoder_w.data[i * n + k] * v).sum::<f64>())
            .collect()
    }

    /// Decoder columns as a basis.
    pub fn basis(&self) -> LinearBasis {
        let (m, n) = (self.dim(), self.n_comp());
        let mut comps = vec![0.0; n * m];
        for k in 0..n {
            for i in 0..m {
                comps[k * m + i] = self.decoder_w.data[i * n + k];
            }
        }
        LinearBasis {
            domain: self.domain,
            mean: self.decoder_b.clone(),
            components: Tensor::new(n, m, comps),
        }
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            &mut self.encoder_w.data,
            &mut self.encoder_b,
            &mut self.decoder_w.data,
            &mut self.decoder_b,
        ]
    }

    /// Mean squared reconstruction error using the first `n` latents.
    pub fn reconstruction_mse(&self, data: &[Vec<f64>], n: usize) -> f64 {
        let mut total = 0.0;
        for x in data {
            let z = self.encode(x);
            let r = self.decode(&z[..n.min(z.len())]);
            total += r.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        total / (data.len() * self.dim()).max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderOptions {
    pub ordered_dropout: bool,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Center the data; when off the mean is pinned to zero.
    pub center: bool,
}

impl Default for AutoencoderOptions {
    fn default() -> Self {
        AutoencoderOptions {
            ordered_dropout: true,
            epochs: 50,
            lr: 1e-2,
            batch: 64,
            seed: 0,
            center: true,
        }
    }
}

/// PCA initialization followed by minibatch momentum descent on
/// reconstruction MSE.
/// With ordered dropout each step samples `n` in `[1, n_comp]` and zeroes
/// latents past `n`.
pub fn fit_autoencoder(data: &[Vec<f64>], n_comp: usize, domain: BasisDomain, opts: &AutoencoderOptions) -> Result<LinearAutoencoder> {
    if data.len() < n_comp || data.is_empty() {
        return Err(Error::Input(format!(
            "autoencoder needs at least {} samples, got {}",
            n_comp.max(1),
            data.len()
        )));
    }
    let p = pca(data, n_comp, opts.center)?;
    let mut ae = LinearAutoencoder::from_pca(domain, &p, opts.ordered_dropout);
    if opts.epochs == 0 || n_comp == 0 {
        return Ok(ae);
    }
    let m = ae.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut opt = Momentum::new(&[n_comp * m, n_comp, m * n_comp, m], 0.9);
    let lrs = [opts.lr, opts.lr, opts.lr, if opts.center { opts.lr } else { 0.0 }];
    let batch = opts.batch.clamp(1, data.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..opts.epochs {
        shuffle(&mut order, &mut rng);
        for chunk in order.chunks(batch) {
            let keep = if opts.ordered_dropout {
                rng.random_range(1..=n_comp)
            } else {
                n_comp
            };
            let grads = ae_step_grads(&ae, data, chunk, keep);
            opt.step(&mut ae.tensors_mut(), &grads, &lrs);
            if !opts.center {
                ae.encoder_b.iter_mut().for_each(|b| *b = 0.0);
            }
        }
    }
    Ok(ae)
}

fn ae_step_grads(ae: &LinearAutoencoder, data: &[Vec<f64>], rows: &[usize], keep: usize) -> Vec<Vec<f64>> {
    let (m, n) = (ae.dim(), ae.n_comp());
    let mut g = Graph::new();
    let x: Vec<f64> = rows.iter().flat_map(|&r| data[r].iter().copied()).collect();
    let xv = g.constant(rows.len(), m, x);
    let we = g.param(n, m, ae.encoder_w.data.clone());
    let be = g.param(1, n, ae.encoder_b.clone());
    let wd = g.param(m, n, ae.decoder_w.data.clone());
    let bd = g.param(1, m, ae.decoder_b.clone());
    let z = g.matmul_nt(xv, we);
    let z = g.add_row(z, be);
    let mask: Vec<f64> = (0..rows.len() * n).map(|i| if i % n < keep { 1.0 } else { 0.0 }).collect();
    let mask = g.constant(rows.len(), n, mask);
    let z = g.mul(z, mask);
    let r = g.matmul_nt(z, wd);
    let r = g.add_row(r, bd);
    let d = g.sub(r, xv);
    let l = g.sum_sq(d);
    let l = g.scale(l, 1.0 / (rows.len() * m) as f64);
    let mut grads = g.backward(l);
    vec![grads.take(we), grads.take(be), grads.take(wd), grads.take(bd)]
}

pub(crate) fn shuffle<R: Rng>(v: &mut [usize], rng: &mut R) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}
