//! 1-D u-net built from pre-activation bottleneck blocks, without any
//! normalization layers.
//!
//! With base width `W` and `L` levels the channel plan is `W·2^l` at level
//! `l`. Each contracting step runs a block and then a kernel-3 stride-2
//! convolution that halves time and doubles channels. The expanding path
//! mirrors it: nearest ×2 upsample, kernel-3 convolution halving channels,
//! concatenation with the same-level contracting features, then a block
//! mapping `2c → c`.

use super::ops::{
    concat_channels, relu, relu_backward, split_channels, upsample2, upsample2_backward, Conv1d,
};
use super::{ModelError, ModelParams, ParamSpec};
use ndarray::Array2;

/// Pre-activation bottleneck: `ReLU → 1×1 (c/4) → ReLU → k3 → ReLU → 1×1 (c)`
/// plus a shortcut that is the identity, or a 1×1 projection of the
/// activated input when the channel count changes.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub name: String,
    conv1: Conv1d,
    conv2: Conv1d,
    conv3: Conv1d,
    proj: Option<Conv1d>,
}

#[derive(Clone, Debug)]
pub struct BottleneckCache {
    x: Array2<f64>,
    a: Array2<f64>,
    h1: Array2<f64>,
    r1: Array2<f64>,
    h2: Array2<f64>,
    r2: Array2<f64>,
}

impl Bottleneck {
    pub fn new(name: impl Into<String>, input: usize, output: usize) -> Self {
        let name = name.into();
        let mid = (output / 4).max(1);
        Self {
            conv1: Conv1d::same(format!("{name}.conv1"), input, mid, 1),
            conv2: Conv1d::same(format!("{name}.conv2"), mid, mid, 3),
            conv3: Conv1d::same(format!("{name}.conv3"), mid, output, 1),
            proj: (input != output).then(|| Conv1d::same(format!("{name}.proj"), input, output, 1)),
            name,
        }
    }

    pub fn residual_output(&self) -> &Conv1d {
        &self.conv3
    }

    pub fn projection(&self) -> Option<&Conv1d> {
        self.proj.as_ref()
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.conv1.specs(out);
        self.conv2.specs(out);
        self.conv3.specs(out);
        if let Some(p) = &self.proj {
            p.specs(out);
        }
    }

    pub fn forward(
        &self,
        p: &ModelParams,
        x: &Array2<f64>,
    ) -> Result<(Array2<f64>, BottleneckCache), ModelError> {
        let a = relu(x);
        let h1 = self.conv1.forward(p, &a)?;
        let r1 = relu(&h1);
        let h2 = self.conv2.forward(p, &r1)?;
        let r2 = relu(&h2);
        let mut y = self.conv3.forward(p, &r2)?;
        match &self.proj {
            Some(proj) => y += &proj.forward(p, &a)?,
            None => y += x,
        }
        Ok((
            y,
            BottleneckCache {
                x: x.clone(),
                a,
                h1,
                r1,
                h2,
                r2,
            },
        ))
    }

    pub fn backward(
        &self,
        p: &ModelParams,
        c: &BottleneckCache,
        dy: &Array2<f64>,
        g: &mut ModelParams,
    ) -> Array2<f64> {
        let dr2 = self.conv3.backward(p, &c.r2, dy, g);
        let dh2 = relu_backward(&c.h2, &dr2);
        let dr1 = self.conv2.backward(p, &c.r1, &dh2, g);
        let dh1 = relu_backward(&c.h1, &dr1);
        let mut da = self.conv1.backward(p, &c.a, &dh1, g);
        match &self.proj {
            Some(proj) => {
                da += &proj.backward(p, &c.a, dy, g);
                relu_backward(&c.x, &da)
            }
            None => {
                let mut dx = relu_backward(&c.x, &da);
                dx += dy;
                dx
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct UNet {
    widths: Vec<usize>,
    enc: Vec<Bottleneck>,
    down: Vec<Conv1d>,
    mid: Bottleneck,
    up: Vec<Conv1d>,
    dec: Vec<Bottleneck>,
}

#[derive(Clone, Debug)]
pub struct UNetCache {
    enc: Vec<BottleneckCache>,
    skips: Vec<Array2<f64>>,
    mid: BottleneckCache,
    up_in: Vec<Array2<f64>>,
    dec: Vec<BottleneckCache>,
    /// Sequence length at every resolution, finest first.
    pub lengths: Vec<usize>,
}

impl UNet {
    pub fn new(name: &str, input: usize, base_width: usize, levels: usize) -> Self {
        let widths: Vec<usize> = (0..=levels).map(|l| base_width << l).collect();
        let enc = (0..levels)
            .map(|l| {
                Bottleneck::new(
                    format!("{name}.enc{l}"),
                    if l == 0 { input } else { widths[l] },
                    widths[l],
                )
            })
            .collect();
        let down = (0..levels)
            .map(|l| Conv1d::down(format!("{name}.down{l}"), widths[l], widths[l + 1]))
            .collect();
        let mid_in = if levels == 0 { input } else { widths[levels] };
        let mid = Bottleneck::new(format!("{name}.mid"), mid_in, widths[levels]);
        let up = (0..levels)
            .map(|l| Conv1d::same(format!("{name}.up{l}"), widths[l + 1], widths[l], 3))
            .collect();
        let dec = (0..levels)
            .map(|l| Bottleneck::new(format!("{name}.dec{l}"), 2 * widths[l], widths[l]))
            .collect();
        Self {
            widths,
            enc,
            down,
            mid,
            up,
            dec,
        }
    }

    pub fn levels(&self) -> usize {
        self.enc.len()
    }

    pub fn output_width(&self) -> usize {
        self.widths[0]
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Bottleneck> {
        self.enc
            .iter()
            .chain(std::iter::once(&self.mid))
            .chain(&self.dec)
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        for l in 0..self.levels() {
            self.enc[l].specs(out);
            self.down[l].specs(out);
        }
        self.mid.specs(out);
        for l in (0..self.levels()).rev() {
            self.up[l].specs(out);
            self.dec[l].specs(out);
        }
    }

    pub fn forward(
        &self,
        p: &ModelParams,
        h: &Array2<f64>,
    ) -> Result<(Array2<f64>, UNetCache), ModelError> {
        let levels = self.levels();
        if !h.nrows().is_multiple_of(1 << levels) {
            return Err(ModelError::Shape(format!(
                "length {} not divisible by 2^{levels}",
                h.nrows()
            )));
        }
        let mut enc = Vec::with_capacity(levels);
        let mut skips = Vec::with_capacity(levels);
        let mut lengths = vec![h.nrows()];
        let mut cur = h.clone();
        for l in 0..levels {
            let (s, c) = self.enc[l].forward(p, &cur)?;
            enc.push(c);
            cur = self.down[l].forward(p, &s)?;
            lengths.push(cur.nrows());
            skips.push(s);
        }
        let (mut cur, mid) = self.mid.forward(p, &cur)?;
        let mut up_in = vec![Array2::zeros((0, 0)); levels];
        let mut dec: Vec<Option<BottleneckCache>> = vec![None; levels];
        for l in (0..levels).rev() {
            let u = upsample2(&cur);
            let upo = self.up[l].forward(p, &u)?;
            let cat = concat_channels(&upo, &skips[l]);
            let (y, c) = self.dec[l].forward(p, &cat)?;
            cur = y;
            up_in[l] = u;
            dec[l] = Some(c);
        }
        Ok((
            cur,
            UNetCache {
                enc,
                skips,
                mid,
                up_in,
                dec: dec.into_iter().map(Option::unwrap).collect(),
                lengths,
            },
        ))
    }

    pub fn backward(
        &self,
        p: &ModelParams,
        c: &UNetCache,
        dy: &Array2<f64>,
        g: &mut ModelParams,
    ) -> Array2<f64> {
        let levels = self.levels();
        let mut dskips = Vec::with_capacity(levels);
        let mut d = dy.clone();
        for l in 0..levels {
            let dcat = self.dec[l].backward(p, &c.dec[l], &d, g);
            let (dupo, dskip) = split_channels(&dcat, self.widths[l]);
            dskips.push(dskip);
            let du = self.up[l].backward(p, &c.up_in[l], &dupo, g);
            d = upsample2_backward(&du);
        }
        let mut d = self.mid.backward(p, &c.mid, &d, g);
        for l in (0..levels).rev() {
            let mut ds = self.down[l].backward(p, &c.skips[l], &d, g);
            ds += &dskips[l];
            d = self.enc[l].backward(p, &c.enc[l], &ds, g);
        }
        d
    }
}
