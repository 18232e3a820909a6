//! Two-branch fusion networks.
//!
//! Each modality has a stack of `L_f` pre-fusion layers; their outputs are
//! summed and passed through `L − L_f` shared post-fusion layers. Weights are
//! stored as `out × in` matrices, first layer first.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Modality, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitMode {
    /// I.i.d. `N(0, std²)` entries; post-fusion layers use `post_std`.
    Gaussian { std: f64, post_std: f64 },
    /// Gaussian directions rescaled to Frobenius norm `u0` (pre-fusion) and `√2·u0` (post-fusion).
    NormExact { u0: f64 },
}

impl InitMode {
    pub fn gaussian(std: f64) -> InitMode {
        InitMode::Gaussian { std, post_std: std }
    }

    /// Gaussian init whose per-layer gain is `u0`: pre-fusion std `u0/√width`,
    /// post-fusion std `√2·u0/√width`.
    pub fn gaussian_gain(u0: f64, width: usize) -> InitMode {
        let std = u0 / (width as f64).sqrt();
        InitMode::Gaussian {
            std,
            post_std: std * 2f64.sqrt(),
        }
    }

    /// The initial scale `u0` this mode realises (`std·√width` for Gaussian draws).
    pub fn u0(&self, width: usize) -> f64 {
        match *self {
            InitMode::Gaussian { std, .. } => std * (width as f64).sqrt(),
            InitMode::NormExact { u0 } => u0,
        }
    }

    /// The same mode with its scale replaced by `u0`.
    pub fn with_u0(&self, u0: f64, width: usize) -> InitMode {
        match *self {
            InitMode::Gaussian { std, post_std } => {
                let std_new = u0 / (width as f64).sqrt();
                let ratio = if std > 0.0 { post_std / std } else { 1.0 };
                InitMode::Gaussian {
                    std: std_new,
                    post_std: std_new * ratio,
                }
            }
            InitMode::NormExact { .. } => InitMode::NormExact { u0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub l: usize,
    pub l_f: usize,
    pub width: usize,
    pub dims_a: usize,
    pub dims_b: usize,
    pub activation: Activation,
    pub init: InitMode,
    pub seed: u64,
}

impl FusionConfig {
    /// Linear network of width 100 with `norm_exact(1e-3)` init and seed 0.
    pub fn new(l: usize, l_f: usize, dims_a: usize, dims_b: usize) -> FusionConfig {
        FusionConfig {
            l,
            l_f,
            width: 100,
            dims_a,
            dims_b,
            activation: Activation::Linear,
            init: InitMode::NormExact { u0: 1e-3 },
            seed: 0,
        }
    }

    pub fn width(mut self, width: usize) -> FusionConfig {
        self.width = width;
        self
    }

    pub fn activation(mut self, activation: Activation) -> FusionConfig {
        self.activation = activation;
        self
    }

    pub fn init(mut self, init: InitMode) -> FusionConfig {
        self.init = init;
        self
    }

    pub fn seed(mut self, seed: u64) -> FusionConfig {
        self.seed = seed;
        self
    }

    pub fn n_post(&self) -> usize {
        self.l - self.l_f
    }

    pub fn validate(&self) -> Result<()> {
        if self.l == 0 {
            return Err(Error::invalid("L", "depth must be at least 1"));
        }
        if self.l_f == 0 || self.l_f > self.l {
            return Err(Error::invalid(
                "L_f",
                format!("fusion layer must lie in [1, L = {}], got {}", self.l, self.l_f),
            ));
        }
        if self.width == 0 {
            return Err(Error::invalid("width", "must be positive"));
        }
        if self.dims_a == 0 {
            return Err(Error::invalid("dims_A", "must be positive"));
        }
        if self.dims_b == 0 {
            return Err(Error::invalid("dims_B", "must be positive"));
        }
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        match self.init {
            InitMode::Gaussian { std, post_std } => {
                if !ok(std) || !ok(post_std) {
                    return Err(Error::invalid("std", "must be a non-negative real"));
                }
            }
            InitMode::NormExact { u0 } => {
                if !ok(u0) {
                    return Err(Error::invalid("u0", "must be a non-negative real"));
                }
            }
        }
        Ok(())
    }

    /// `(out, in)` of pre-fusion layer `l` (0-based) of a branch with input size `dims`.
    fn pre_shape(&self, l: usize, dims: usize) -> (usize, usize) {
        let input = if l == 0 { dims } else { self.width };
        let output = if l + 1 == self.l_f && self.n_post() == 0 {
            1
        } else {
            self.width
        };
        (output, input)
    }

    fn post_shape(&self, j: usize) -> (usize, usize) {
        let output = if j + 1 == self.n_post() { 1 } else { self.width };
        (output, self.width)
    }
}

#[derive(Debug, Clone)]
pub struct FusionNetwork {
    pub pre_a: Vec<DMatrix<f64>>,
    pub pre_b: Vec<DMatrix<f64>>,
    pub post: Vec<DMatrix<f64>>,
    pub config: FusionConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalMaps {
    pub w_tot_a: DVector<f64>,
    pub w_tot_b: DVector<f64>,
}

impl TotalMaps {
    pub fn zeros(dims_a: usize, dims_b: usize) -> TotalMaps {
        TotalMaps {
            w_tot_a: DVector::zeros(dims_a),
            w_tot_b: DVector::zeros(dims_b),
        }
    }

    pub fn of(&self, m: Modality) -> &DVector<f64> {
        match m {
            Modality::A => &self.w_tot_a,
            Modality::B => &self.w_tot_b,
        }
    }

    pub fn concat(&self) -> DVector<f64> {
        crate::stats::concat(&self.w_tot_a, &self.w_tot_b)
    }
}

/// Mean Frobenius norms of the pre-fusion layers of each branch and of the
/// post-fusion layers (`None` for late fusion).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorms {
    pub u_a: f64,
    pub u_b: f64,
    pub u: Option<f64>,
    /// Largest relative deviation of a single layer's norm from its group mean.
    pub spread: f64,
}

pub fn init_network(config: &FusionConfig) -> Result<FusionNetwork> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut draw = |(rows, cols): (usize, usize), post: bool| -> DMatrix<f64> {
        let g = DMatrix::from_fn(rows, cols, |_, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v
        });
        match config.init {
            InitMode::Gaussian { std, post_std } => g * if post { post_std } else { std },
            InitMode::NormExact { u0 } => {
                let target = if post { 2f64.sqrt() * u0 } else { u0 };
                let n = g.norm();
                if n > 0.0 {
                    g * (target / n)
                } else {
                    g
                }
            }
        }
    };
    let pre_a = (0..config.l_f)
        .map(|l| draw(config.pre_shape(l, config.dims_a), false))
        .collect();
    let pre_b = (0..config.l_f)
        .map(|l| draw(config.pre_shape(l, config.dims_b), false))
        .collect();
    let post = (0..config.n_post())
        .map(|j| draw(config.post_shape(j), true))
        .collect();
    Ok(FusionNetwork {
        pre_a,
        pre_b,
        post,
        config: config.clone(),
    })
}

impl FusionNetwork {
    /// Assembles a network from explicit weights, checking every shape against `config`.
    pub fn from_weights(
        config: FusionConfig,
        pre_a: Vec<DMatrix<f64>>,
        pre_b: Vec<DMatrix<f64>>,
        post: Vec<DMatrix<f64>>,
    ) -> Result<FusionNetwork> {
        config.validate()?;
        if pre_a.len() != config.l_f || pre_b.len() != config.l_f {
            return Err(Error::DimensionMismatch {
                expected: config.l_f,
                got: pre_a.len().min(pre_b.len()),
            });
        }
        if post.len() != config.n_post() {
            return Err(Error::DimensionMismatch {
                expected: config.n_post(),
                got: post.len(),
            });
        }
        let check = |m: &DMatrix<f64>, (r, c): (usize, usize)| {
            if m.shape() == (r, c) {
                Ok(())
            } else {
                Err(Error::DimensionMismatch {
                    expected: r * c,
                    got: m.len(),
                })
            }
        };
        for (l, w) in pre_a.iter().enumerate() {
            check(w, config.pre_shape(l, config.dims_a))?;
        }
        for (l, w) in pre_b.iter().enumerate() {
            check(w, config.pre_shape(l, config.dims_b))?;
        }
        for (j, w) in post.iter().enumerate() {
            check(w, config.post_shape(j))?;
        }
        Ok(FusionNetwork {
            pre_a,
            pre_b,
            post,
            config,
        })
    }

    pub fn branch(&self, m: Modality) -> &[DMatrix<f64>] {
        match m {
            Modality::A => &self.pre_a,
            Modality::B => &self.pre_b,
        }
    }

    /// Zeroes every pre-fusion layer of one branch. A zeroed branch receives
    /// zero gradient, so the network stays unimodal under training.
    pub fn zero_branch(&mut self, m: Modality) {
        let stack = match m {
            Modality::A => &mut self.pre_a,
            Modality::B => &mut self.pre_b,
        };
        for w in stack.iter_mut() {
            w.fill(0.0);
        }
    }

    pub fn layers(&self) -> impl Iterator<Item = &DMatrix<f64>> {
        self.pre_a.iter().chain(&self.pre_b).chain(&self.post)
    }

    pub fn is_linear(&self) -> bool {
        self.config.activation == Activation::Linear
    }

    /// Outputs for a batch of inputs given one sample per row.
    pub fn forward_batch(&self, inputs: &DMatrix<f64>) -> Result<DVector<f64>> {
        let (da, db) = (self.config.dims_a, self.config.dims_b);
        if inputs.ncols() != da + db {
            return Err(Error::DimensionMismatch {
                expected: da + db,
                got: inputs.ncols(),
            });
        }
        let relu = self.config.activation == Activation::Relu;
        let n = inputs.nrows();
        let mut out = DVector::zeros(n);
        for start in (0..n).step_by(BATCH_CHUNK) {
            let len = BATCH_CHUNK.min(n - start);
            let mut ha = stack_forward(&self.pre_a, gather_rows(inputs, start, len, 0, da), relu);
            let hb = stack_forward(&self.pre_b, gather_rows(inputs, start, len, da, db), relu);
            let mut h = ha.pop().unwrap();
            add_assign(&mut h, hb.last().unwrap());
            if !self.post.is_empty() {
                if relu {
                    relu_slice(&mut h);
                }
                h = stack_forward(&self.post, h, relu).pop().unwrap();
            }
            out.rows_mut(start, len).copy_from_slice(&h);
        }
        Ok(out)
    }
}

// Batched passes store activations one sample after another (`n × width`,
// row-major) and loop directly over the column-major weights; at these shapes
// this is several times faster than going through general matrix products.

/// Samples per block in batched passes; keeps activations cache-resident.
pub(crate) const BATCH_CHUNK: usize = 64;

/// Rows `start..start+len`, columns `col..col+k` of `m`, one sample after another.
pub(crate) fn gather_rows(m: &DMatrix<f64>, start: usize, len: usize, col: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * k];
    for j in 0..k {
        let src = &m.column(col + j);
        for s in 0..len {
            out[s * k + j] = src[start + s];
        }
    }
    out
}

/// `out[s] = W h[s]` for every sample `s`.
pub(crate) fn layer_forward(w: &DMatrix<f64>, h: &[f64]) -> Vec<f64> {
    let (rows, cols) = w.shape();
    let ws = w.as_slice();
    let n = h.len() / cols;
    let mut out = vec![0.0; n * rows];
    if rows == 1 {
        for (o, hs) in out.iter_mut().zip(h.chunks_exact(cols)) {
            *o = dot(ws, hs);
        }
        return out;
    }
    for (hs, os) in h.chunks_exact(cols).zip(out.chunks_exact_mut(rows)) {
        for (j, &a) in hs.iter().enumerate() {
            if a != 0.0 {
                axpy(a, &ws[j * rows..(j + 1) * rows], os);
            }
        }
    }
    out
}

/// Inputs to every layer of `stack` followed by its raw output; `relu` acts
/// between layers only.
pub(crate) fn stack_forward(stack: &[DMatrix<f64>], x: Vec<f64>, relu: bool) -> Vec<Vec<f64>> {
    let mut acts = Vec::with_capacity(stack.len() + 1);
    acts.push(x);
    for (l, w) in stack.iter().enumerate() {
        let mut z = layer_forward(w, acts.last().unwrap());
        if relu && l + 1 < stack.len() {
            relu_slice(&mut z);
        }
        acts.push(z);
    }
    acts
}

/// Dot product with four independent accumulators so the loop vectorizes.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += a·x`.
pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub(crate) fn add_assign(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

pub(crate) fn relu_slice(h: &mut [f64]) {
    for v in h {
        *v = v.max(0.0);
    }
}

pub fn forward(net: &FusionNetwork, x: &DVector<f64>) -> Result<f64> {
    let d = net.config.dims_a + net.config.dims_b;
    if x.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: x.len(),
        });
    }
    Ok(net.forward_batch(&DMatrix::from_row_slice(1, d, x.as_slice()))?[0])
}

/// Row vector `w·M_k ⋯ M_1` for a stack listed first layer first, computed
/// right-to-left so every product is a vector-matrix product.
pub(crate) fn left_product(w: &DMatrix<f64>, stack: &[DMatrix<f64>]) -> DMatrix<f64> {
    stack.iter().rev().fold(w.clone(), |r, m| r * m)
}

pub fn total_maps(net: &FusionNetwork) -> Result<TotalMaps> {
    if !net.is_linear() {
        return Err(Error::NotLinear);
    }
    let r = left_product(&DMatrix::from_element(1, 1, 1.0), &net.post);
    Ok(TotalMaps {
        w_tot_a: left_product(&r, &net.pre_a).row(0).transpose(),
        w_tot_b: left_product(&r, &net.pre_b).row(0).transpose(),
    })
}

pub fn layer_norms(net: &FusionNetwork) -> LayerNorms {
    let group = |ws: &[DMatrix<f64>]| -> (f64, f64) {
        if ws.is_empty() {
            return (0.0, 0.0);
        }
        let norms: Vec<f64> = ws.iter().map(|w| w.norm()).collect();
        let mean = norms.iter().sum::<f64>() / norms.len() as f64;
        let spread = if mean > 0.0 {
            norms.iter().map(|n| (n - mean).abs() / mean).fold(0.0, f64::max)
        } else {
            0.0
        };
        (mean, spread)
    };
    let (u_a, sa) = group(&net.pre_a);
    let (u_b, sb) = group(&net.pre_b);
    let (u, sp) = group(&net.post);
    LayerNorms {
        u_a,
        u_b,
        u: (!net.post.is_empty()).then_some(u),
        spread: sa.max(sb).max(sp),
    }
}
