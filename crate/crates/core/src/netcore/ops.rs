//! Layer primitives over `[T × C]` row-major activations, each with an
//! explicit backward pass. Parameters live in a [`ModelParams`] and layers
//! only hold their names.

use super::{ModelError, ModelParams, ParamSpec};
use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Ix1, Ix2, Ix3, Zip};

/// How a parameter is initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with variance `1 / fan_in`.
    FanIn(usize),
    Const(f64),
}

pub(crate) fn weight2<'a>(p: &'a ModelParams, name: &str) -> ArrayView2<'a, f64> {
    p.get(name)
        .view()
        .into_dimensionality::<Ix2>()
        .expect("rank-2 weight")
}

pub(crate) fn vector<'a>(p: &'a ModelParams, name: &str) -> ndarray::ArrayView1<'a, f64> {
    p.get(name)
        .view()
        .into_dimensionality::<Ix1>()
        .expect("rank-1 parameter")
}

fn add_bias(y: &mut Array2<f64>, b: ndarray::ArrayView1<'_, f64>) {
    for mut row in y.rows_mut() {
        row += &b;
    }
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// `dy ⊙ 1[x > 0]`.
pub fn relu_backward(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(x).for_each(|d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

/// Per-row affine map `y = x W + b`, `W: [in × out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, input: usize, output: usize) -> Self {
        Self {
            name: name.into(),
            input,
            output,
        }
    }

    fn w(&self) -> String {
        format!("{}.w", self.name)
    }

    fn b(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        out.push(ParamSpec::new(
            self.w(),
            vec![self.input, self.output],
            Init::FanIn(self.input),
        ));
        out.push(ParamSpec::new(
            self.b(),
            vec![self.output],
            Init::Const(0.0),
        ));
    }

    pub fn forward(&self, p: &ModelParams, x: &Array2<f64>) -> Result<Array2<f64>, ModelError> {
        if x.ncols() != self.input {
            return Err(ModelError::Shape(format!(
                "{}: expected {} input channels, got {}",
                self.name,
                self.input,
                x.ncols()
            )));
        }
        let mut y = x.dot(&weight2(p, &self.w()));
        add_bias(&mut y, vector(p, &self.b()));
        Ok(y)
    }

    /// Accumulates parameter gradients into `g` and returns `dL/dx`.
    pub fn backward(
        &self,
        p: &ModelParams,
        x: &Array2<f64>,
        dy: &Array2<f64>,
        g: &mut ModelParams,
    ) -> Array2<f64> {
        let w = weight2(p, &self.w());
        {
            let mut gw = g
                .get_mut(&self.w())
                .view_mut()
                .into_dimensionality::<Ix2>()
                .unwrap();
            general_mat_mul(1.0, &x.t(), dy, 1.0, &mut gw);
        }
        {
            let mut gb = g
                .get_mut(&self.b())
                .view_mut()
                .into_dimensionality::<Ix1>()
                .unwrap();
            gb += &dy.sum_axis(Axis(0));
        }
        dy.dot(&w.t())
    }
}

/// 1-D convolution with zero padding. Weight layout `[kernel × in × out]`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub name: String,
    pub input: usize,
    pub output: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    /// Stride-1 convolution with "same" padding for odd kernels.
    pub fn same(name: impl Into<String>, input: usize, output: usize, kernel: usize) -> Self {
        Self {
            name: name.into(),
            input,
            output,
            kernel,
            stride: 1,
            pad: kernel / 2,
        }
    }

    /// Kernel-3, stride-2 convolution halving an even length.
    pub fn down(name: impl Into<String>, input: usize, output: usize) -> Self {
        Self {
            name: name.into(),
            input,
            output,
            kernel: 3,
            stride: 2,
            pad: 1,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.specs_with_bias(out, 0.0);
    }

    pub fn specs_with_bias(&self, out: &mut Vec<ParamSpec>, bias: f64) {
        out.push(ParamSpec::new(
            self.weight_name(),
            vec![self.kernel, self.input, self.output],
            Init::FanIn(self.kernel * self.input),
        ));
        out.push(ParamSpec::new(
            self.bias_name(),
            vec![self.output],
            Init::Const(bias),
        ));
    }

    pub fn out_len(&self, len: usize) -> usize {
        (len + 2 * self.pad).saturating_sub(self.kernel) / self.stride + 1
    }

    /// Output rows `[lo, hi)` that read a valid input row through tap `j`,
    /// and the first such input row.
    fn tap_range(&self, j: usize, len: usize, out_len: usize) -> Option<(usize, usize, usize)> {
        let s = self.stride;
        let lo = if j >= self.pad {
            0
        } else {
            (self.pad - j).div_ceil(s)
        };
        if len + self.pad <= j {
            return None;
        }
        let hi = ((len - 1 + self.pad - j) / s + 1).min(out_len);
        if lo >= hi {
            return None;
        }
        Some((lo, hi, lo * s + j - self.pad))
    }

    pub fn forward(&self, p: &ModelParams, x: &Array2<f64>) -> Result<Array2<f64>, ModelError> {
        if x.ncols() != self.input {
            return Err(ModelError::Shape(format!(
                "{}: expected {} input channels, got {}",
                self.name,
                self.input,
                x.ncols()
            )));
        }
        let len = x.nrows();
        let out_len = self.out_len(len);
        let w = p
            .get(&self.weight_name())
            .view()
            .into_dimensionality::<Ix3>()
            .unwrap();
        let mut y = Array2::zeros((out_len, self.output));
        add_bias(&mut y, vector(p, &self.bias_name()));
        for j in 0..self.kernel {
            if let Some((lo, hi, r0)) = self.tap_range(j, len, out_len) {
                let n = hi - lo;
                let xs = x.slice(s![r0..r0 + (n - 1) * self.stride + 1; self.stride, ..]);
                let mut ys = y.slice_mut(s![lo..hi, ..]);
                general_mat_mul(1.0, &xs, &w.index_axis(Axis(0), j), 1.0, &mut ys);
            }
        }
        Ok(y)
    }

    pub fn backward(
        &self,
        p: &ModelParams,
        x: &Array2<f64>,
        dy: &Array2<f64>,
        g: &mut ModelParams,
    ) -> Array2<f64> {
        let len = x.nrows();
        let out_len = dy.nrows();
        let w = p
            .get(&self.weight_name())
            .view()
            .into_dimensionality::<Ix3>()
            .unwrap();
        let mut dx = Array2::zeros(x.dim());
        {
            let mut gw = g
                .get_mut(&self.weight_name())
                .view_mut()
                .into_dimensionality::<Ix3>()
                .unwrap();
            for j in 0..self.kernel {
                if let Some((lo, hi, r0)) = self.tap_range(j, len, out_len) {
                    let n = hi - lo;
                    let rows = s![r0..r0 + (n - 1) * self.stride + 1; self.stride, ..];
                    let dys = dy.slice(s![lo..hi, ..]);
                    let xs = x.slice(rows);
                    general_mat_mul(1.0, &xs.t(), &dys, 1.0, &mut gw.index_axis_mut(Axis(0), j));
                    let mut dxs = dx.slice_mut(rows);
                    general_mat_mul(1.0, &dys, &w.index_axis(Axis(0), j).t(), 1.0, &mut dxs);
                }
            }
        }
        let mut gb = g
            .get_mut(&self.bias_name())
            .view_mut()
            .into_dimensionality::<Ix1>()
            .unwrap();
        gb += &dy.sum_axis(Axis(0));
        dx
    }
}

/// Nearest-neighbour ×2 upsampling along time.
pub fn upsample2(x: &Array2<f64>) -> Array2<f64> {
    let (len, c) = x.dim();
    Array2::from_shape_fn((2 * len, c), |(t, j)| x[[t / 2, j]])
}

pub fn upsample2_backward(dy: &Array2<f64>) -> Array2<f64> {
    let (len, c) = dy.dim();
    let mut dx = Array2::zeros((len / 2, c));
    for t in 0..len {
        let mut row = dx.row_mut(t / 2);
        row += &dy.row(t);
    }
    dx
}

pub fn concat_channels(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("same length")
}

pub fn split_channels(d: &Array2<f64>, left: usize) -> (Array2<f64>, Array2<f64>) {
    (
        d.slice(s![.., ..left]).to_owned(),
        d.slice(s![.., left..]).to_owned(),
    )
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, width: usize) -> Self {
        Self {
            name: name.into(),
            width,
        }
    }

    fn gamma(&self) -> String {
        format!("{}.gamma", self.name)
    }

    fn beta(&self) -> String {
        format!("{}.beta", self.name)
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        out.push(ParamSpec::new(
            self.gamma(),
            vec![self.width],
            Init::Const(1.0),
        ));
        out.push(ParamSpec::new(
            self.beta(),
            vec![self.width],
            Init::Const(0.0),
        ));
    }

    pub fn forward(&self, p: &ModelParams, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let gamma = vector(p, &self.gamma());
        let beta = vector(p, &self.beta());
        let n = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / n;
            *is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row *= *is;
        }
        let mut y = &xhat * &gamma;
        y += &beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        p: &ModelParams,
        cache: &LayerNormCache,
        dy: &Array2<f64>,
        g: &mut ModelParams,
    ) -> Array2<f64> {
        let gamma = vector(p, &self.gamma());
        {
            let mut gg = g
                .get_mut(&self.gamma())
                .view_mut()
                .into_dimensionality::<Ix1>()
                .unwrap();
            gg += &(dy * &cache.xhat).sum_axis(Axis(0));
        }
        {
            let mut gb = g
                .get_mut(&self.beta())
                .view_mut()
                .into_dimensionality::<Ix1>()
                .unwrap();
            gb += &dy.sum_axis(Axis(0));
        }
        let n = dy.ncols() as f64;
        let mut dx = dy * &gamma;
        for ((mut row, xh), &is) in dx
            .rows_mut()
            .into_iter()
            .zip(cache.xhat.rows())
            .zip(&cache.inv_std)
        {
            let mean_d = row.sum() / n;
            let mean_dx = row.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
            Zip::from(&mut row).and(&xh).for_each(|d, &h| {
                *d = is * (*d - mean_d - h * mean_dx);
            });
        }
        dx
    }
}

/// Row-wise softmax, numerically stabilised.
pub fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
}

/// Multi-head self-attention without masking.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub name: String,
    pub width: usize,
    pub heads: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    concat: Array2<f64>,
    /// One `[T × T]` row-stochastic matrix per head.
    pub weights: Vec<Array2<f64>>,
}

impl SelfAttention {
    pub fn new(name: impl Into<String>, width: usize, heads: usize) -> Result<Self, ModelError> {
        let name = name.into();
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(ModelError::Config(format!(
                "embedding width {width} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(format!("{name}.q"), width, width),
            k: Linear::new(format!("{name}.k"), width, width),
            v: Linear::new(format!("{name}.v"), width, width),
            o: Linear::new(format!("{name}.o"), width, width),
            name,
            width,
            heads,
        })
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        for l in [&self.q, &self.k, &self.v, &self.o] {
            l.specs(out);
        }
    }

    pub fn forward(
        &self,
        p: &ModelParams,
        x: &Array2<f64>,
    ) -> Result<(Array2<f64>, AttentionCache), ModelError> {
        let q = self.q.forward(p, x)?;
        let k = self.k.forward(p, x)?;
        let v = self.v.forward(p, x)?;
        let d = self.width / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut concat = Array2::zeros(x.dim());
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * d..(h + 1) * d];
            let mut a = q.slice(cols).dot(&k.slice(cols).t());
            a *= scale;
            softmax_rows(&mut a);
            concat.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
            weights.push(a);
        }
        let y = self.o.forward(p, &concat)?;
        Ok((
            y,
            AttentionCache {
                x: x.clone(),
                q,
                k,
                v,
                concat,
                weights,
            },
        ))
    }

    pub fn backward(
        &self,
        p: &ModelParams,
        c: &AttentionCache,
        dy: &Array2<f64>,
        g: &mut ModelParams,
    ) -> Array2<f64> {
        let dconcat = self.o.backward(p, &c.concat, dy, g);
        let d = self.width / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut dq = Array2::zeros(c.q.dim());
        let mut dk = Array2::zeros(c.k.dim());
        let mut dv = Array2::zeros(c.v.dim());
        for (h, a) in c.weights.iter().enumerate() {
            let cols = s![.., h * d..(h + 1) * d];
            let doh = dconcat.slice(cols);
            let da = doh.dot(&c.v.slice(cols).t());
            dv.slice_mut(cols).assign(&a.t().dot(&doh));
            // Softmax backward: dS = A ⊙ (dA - rowsum(dA ⊙ A)).
            let mut ds = &da * a;
            for (mut row, arow) in ds.rows_mut().into_iter().zip(a.rows()) {
                let dot = row.sum();
                Zip::from(&mut row)
                    .and(&arow)
                    .for_each(|v, &w| *v -= w * dot);
            }
            ds *= scale;
            dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        }
        let mut dx = self.q.backward(p, &c.x, &dq, g);
        dx += &self.k.backward(p, &c.x, &dk, g);
        dx += &self.v.backward(p, &c.x, &dv, g);
        dx
    }
}
