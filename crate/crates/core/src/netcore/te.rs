//! Pre-norm Transformer encoder over the full chunk, one output per token.

use super::ops::{
    relu, relu_backward, AttentionCache, LayerNorm, LayerNormCache, Linear, SelfAttention,
};
use super::{ModelError, ModelParams, ParamSpec};
use ndarray::Array2;

/// Fixed sinusoidal table: `sin(t / 10000^(2i/E))` on even channels,
/// `cos` of the same angle on odd ones.
pub fn sinusoidal_encoding(len: usize, width: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, width), |(t, c)| {
        let i = (c / 2) as f64;
        let angle = t as f64 / 10000f64.powf(2.0 * i / width as f64);
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln1: LayerNorm,
    attn: SelfAttention,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
struct LayerCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    n2: Array2<f64>,
    f1: Array2<f64>,
    r: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    input_proj: Linear,
    layers: Vec<EncoderLayer>,
    final_ln: LayerNorm,
    positional: bool,
    embed: usize,
}

#[derive(Clone, Debug)]
pub struct TeCache {
    h: Array2<f64>,
    layers: Vec<LayerCache>,
    final_ln: LayerNormCache,
}

impl TeCache {
    pub fn attention_weights(&self) -> Vec<&Array2<f64>> {
        self.layers
            .iter()
            .flat_map(|l| l.attn.weights.iter())
            .collect()
    }
}

impl TransformerEncoder {
    pub fn new(
        name: &str,
        input: usize,
        embed: usize,
        heads: usize,
        layers: usize,
        positional: bool,
    ) -> Result<Self, ModelError> {
        let layers = (0..layers)
            .map(|i| {
                let p = format!("{name}.l{i}");
                Ok(EncoderLayer {
                    ln1: LayerNorm::new(format!("{p}.ln1"), embed),
                    attn: SelfAttention::new(format!("{p}.attn"), embed, heads)?,
                    ln2: LayerNorm::new(format!("{p}.ln2"), embed),
                    ff1: Linear::new(format!("{p}.ff1"), embed, 4 * embed),
                    ff2: Linear::new(format!("{p}.ff2"), 4 * embed, embed),
                })
            })
            .collect::<Result<_, ModelError>>()?;
        Ok(Self {
            input_proj: Linear::new(format!("{name}.in"), input, embed),
            layers,
            final_ln: LayerNorm::new(format!("{name}.ln_f"), embed),
            positional,
            embed,
        })
    }

    pub fn output_width(&self) -> usize {
        self.embed
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.input_proj.specs(out);
        for l in &self.layers {
            l.ln1.specs(out);
            l.attn.specs(out);
            l.ln2.specs(out);
            l.ff1.specs(out);
            l.ff2.specs(out);
        }
        self.final_ln.specs(out);
    }

    pub fn forward(
        &self,
        p: &ModelParams,
        h: &Array2<f64>,
    ) -> Result<(Array2<f64>, TeCache), ModelError> {
        let mut z = self.input_proj.forward(p, h)?;
        if self.positional {
            z += &sinusoidal_encoding(z.nrows(), self.embed);
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (n1, ln1) = l.ln1.forward(p, &z);
            let (a, attn) = l.attn.forward(p, &n1)?;
            z += &a;
            let (n2, ln2) = l.ln2.forward(p, &z);
            let f1 = l.ff1.forward(p, &n2)?;
            let r = relu(&f1);
            z += &l.ff2.forward(p, &r)?;
            caches.push(LayerCache {
                ln1,
                attn,
                ln2,
                n2,
                f1,
                r,
            });
        }
        let (y, final_ln) = self.final_ln.forward(p, &z);
        Ok((
            y,
            TeCache {
                h: h.clone(),
                layers: caches,
                final_ln,
            },
        ))
    }

    pub fn backward(
        &self,
        p: &ModelParams,
        c: &TeCache,
        dy: &Array2<f64>,
        g: &mut ModelParams,
    ) -> Array2<f64> {
        let mut dz = self.final_ln.backward(p, &c.final_ln, dy, g);
        for (l, lc) in self.layers.iter().zip(&c.layers).rev() {
            let dr = l.ff2.backward(p, &lc.r, &dz, g);
            let df1 = relu_backward(&lc.f1, &dr);
            let dn2 = l.ff1.backward(p, &lc.n2, &df1, g);
            dz += &l.ln2.backward(p, &lc.ln2, &dn2, g);
            let dn1 = l.attn.backward(p, &lc.attn, &dz, g);
            dz += &l.ln1.backward(p, &lc.ln1, &dn1, g);
        }
        self.input_proj.backward(p, &c.h, &dz, g)
    }
}
