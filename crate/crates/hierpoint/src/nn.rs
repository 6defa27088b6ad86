//! Parameterized layers built on the autodiff graph.
//!
//! Layers own [`ParamId`]s into a shared [`ParamStore`]; forward passes
//! borrow the store read-only so several tapes can run concurrently.

use rand::Rng;

use crate::autograd::{normal_init, uniform_init, Arr, Graph, ParamId, ParamStore, Var};

/// Fully connected layer `x·w + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let limit = (6.0 / (din + dout) as f64).sqrt();
        let w = store.add(format!("{name}.w"), uniform_init(rng, &[din, dout], limit));
        let b = store.add(format!("{name}.b"), Arr::zeros(ndarray::IxDyn(&[dout])));
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, b)
    }
}

/// 2-d convolution layer.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (cin * k * k) as f64;
        let fan_out = (cout * k * k) as f64;
        let limit = (6.0 / (fan_in + fan_out)).sqrt();
        let w = store.add(
            format!("{name}.w"),
            uniform_init(rng, &[cout, cin, k, k], limit),
        );
        let b = store.add(format!("{name}.b"), Arr::zeros(ndarray::IxDyn(&[cout])));
        Conv2d { w, b, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Transposed 2-d convolution layer (stride-2 upscaling stages).
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (cin * k * k) as f64;
        let fan_out = (cout * k * k) as f64;
        let limit = (6.0 / (fan_in + fan_out)).sqrt();
        let w = store.add(
            format!("{name}.w"),
            uniform_init(rng, &[cin, cout, k, k], limit),
        );
        let b = store.add(format!("{name}.b"), Arr::zeros(ndarray::IxDyn(&[cout])));
        ConvTranspose2d { w, b, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv_transpose2d(x, w, b, self.stride, self.pad)
    }
}

/// Layer normalization over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(
            format!("{name}.gamma"),
            Arr::from_elem(ndarray::IxDyn(&[dim]), 1.0),
        );
        let beta = store.add(format!("{name}.beta"), Arr::zeros(ndarray::IxDyn(&[dim])));
        LayerNorm {
            gamma,
            beta,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Embedding table with row lookup.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub dim: usize,
}

impl Embedding {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        rows: usize,
        dim: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let table = store.add(format!("{name}.table"), normal_init(rng, &[rows, dim], std));
        Embedding { table, dim }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Var {
        let table = g.param(store, self.table);
        g.gather_rows(table, ids)
    }
}

/// One pre-norm transformer encoder layer: self-attention then MLP, each
/// behind a residual connection.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub heads: usize,
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        mlp: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert_eq!(dim % heads, 0, "head count must divide hidden size");
        EncoderLayer {
            heads,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            qkv: Linear::new(store, &format!("{name}.attn.qkv"), dim, 3 * dim, rng),
            proj: Linear::new(store, &format!("{name}.attn.proj"), dim, dim, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), dim, mlp, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), mlp, dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let dim = g.value(x).shape()[1];
        let dh = dim / self.heads;
        let normed = self.ln1.forward(g, store, x);
        let qkv = self.qkv.forward(g, store, normed);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = g.slice_cols(qkv, h * dh, dh);
            let k = g.slice_cols(qkv, dim + h * dh, dh);
            let v = g.slice_cols(qkv, 2 * dim + h * dh, dh);
            let kt = g.transpose2(k);
            let scores = g.matmul(q, kt);
            let scaled = g.affine(scores, scale, 0.0);
            let attn = g.softmax_rows(scaled);
            head_outs.push(g.matmul(attn, v));
        }
        let merged = g.concat_cols(&head_outs);
        let projected = self.proj.forward(g, store, merged);
        let x = g.add(x, projected);
        let normed = self.ln2.forward(g, store, x);
        let hidden = self.fc1.forward(g, store, normed);
        let act = g.gelu(hidden);
        let out = self.fc2.forward(g, store, act);
        g.add(x, out)
    }
}

/// Stack of encoder layers with a final layer norm.
#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    pub layers: Vec<EncoderLayer>,
    pub final_ln: LayerNorm,
}

impl TransformerEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        layers: usize,
        dim: usize,
        heads: usize,
        mlp: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let layers = (0..layers)
            .map(|i| EncoderLayer::new(store, &format!("{name}.layers.{i}"), dim, heads, mlp, rng))
            .collect();
        TransformerEncoder {
            layers,
            final_ln: LayerNorm::new(store, &format!("{name}.final_ln"), dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: Var) -> Var {
        for layer in &self.layers {
            x = layer.forward(g, store, x);
        }
        self.final_ln.forward(g, store, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Mode;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn transformer_output_shape_and_determinism() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = TransformerEncoder::new(&mut store, "enc", 2, 32, 4, 64, &mut rng);
        let x = Arr::from_shape_fn(IxDyn(&[5, 32]), |_| 0.1);
        let run = |store: &ParamStore| {
            let mut g = Graph::new(Mode::Inference);
            let xv = g.constant(x.clone());
            let y = enc.forward(&mut g, store, xv);
            g.value(y).clone()
        };
        let y1 = run(&store);
        let y2 = run(&store);
        assert_eq!(y1.shape(), &[5, 32]);
        assert_eq!(
            y1.as_slice().unwrap(),
            y2.as_slice().unwrap(),
            "forward must be deterministic"
        );
    }

    #[test]
    fn fd_transformer_layer_params() {
        // Exercise attention + mlp + layernorm gradients through one layer.
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let enc = TransformerEncoder::new(&mut store, "enc", 1, 8, 2, 16, &mut rng);
        let x = Arr::from_shape_fn(IxDyn(&[4, 8]), |_| rng.gen_range(-1.0..1.0));
        let loss = |g: &mut Graph, store: &ParamStore| {
            let xv = g.constant(x.clone());
            let y = enc.forward(g, store, xv);
            let sq = g.powi(y, 2);
            g.sum_all(sq)
        };
        let mut g = Graph::new(Mode::Train);
        let l = loss(&mut g, &store);
        let grads = g.backward(l);
        let eps = 1e-5;
        for id in store.ids().collect::<Vec<_>>() {
            let n = store.get(id).len();
            for idx in [0, n / 2, n - 1] {
                let orig = store.get(id).as_slice().unwrap()[idx];
                store.get_mut(id).as_slice_mut().unwrap()[idx] = orig + eps;
                let fp = {
                    let mut gp = Graph::new(Mode::Inference);
                    let l = loss(&mut gp, &store);
                    gp.scalar_value(l)
                };
                store.get_mut(id).as_slice_mut().unwrap()[idx] = orig - eps;
                let fm = {
                    let mut gm = Graph::new(Mode::Inference);
                    let l = loss(&mut gm, &store);
                    gm.scalar_value(l)
                };
                store.get_mut(id).as_slice_mut().unwrap()[idx] = orig;
                let fd = (fp - fm) / (2.0 * eps);
                let an = grads
                    .get(id)
                    .map(|a| a.as_slice().unwrap()[idx])
                    .unwrap_or(0.0);
                if an.abs().max(fd.abs()) < 1e-5 {
                    // below the resolution of central differences at f64
                    continue;
                }
                let rel = (an - fd).abs() / an.abs().max(fd.abs());
                assert!(
                    rel < 1e-4,
                    "param {} idx {idx}: analytic={an} fd={fd} rel={rel}",
                    store.name(id)
                );
            }
        }
    }
}
