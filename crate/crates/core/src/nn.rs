//! Layer building blocks. Each layer is a thin descriptor (parameter name
//! prefix plus dimensions); weights live in a [`ParamStore`] and are bound
//! per forward pass through a [`Binder`].

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::params::{xavier_uniform, Binder, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Linear {
            name: name.into(),
            din,
            dout,
            bias: true,
        }
    }

    pub fn without_bias(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Linear {
            name: name.into(),
            din,
            dout,
            bias: false,
        }
    }

    pub fn weight_name(&self) -> String {
        join(&self.name, "w")
    }

    pub fn bias_name(&self) -> String {
        join(&self.name, "b")
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        store.insert(self.weight_name(), xavier_uniform(self.din, self.dout, rng));
        if self.bias {
            store.insert(self.bias_name(), Tensor::zeros(1, self.dout));
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Binder<T>, x: Var) -> Var {
        let w = p.get(g, &self.weight_name());
        let y = g.matmul(x, w);
        if self.bias {
            let b = p.get(g, &self.bias_name());
            g.add_row(y, b)
        } else {
            y
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        LayerNorm {
            name: name.into(),
            dim,
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.insert(join(&self.name, "g"), Tensor::full(1, self.dim, T::one()));
        store.insert(join(&self.name, "b"), Tensor::zeros(1, self.dim));
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Binder<T>, x: Var) -> Var {
        let gamma = p.get(g, &join(&self.name, "g"));
        let beta = p.get(g, &join(&self.name, "b"));
        g.layer_norm(x, gamma, beta)
    }
}

/// Two-layer feed-forward with GELU.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(prefix: &str, dim: usize, hidden: usize) -> Self {
        Mlp {
            fc1: Linear::new(join(prefix, "fc1"), dim, hidden),
            fc2: Linear::new(join(prefix, "fc2"), hidden, dim),
        }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.fc1.init(store, rng);
        self.fc2.init(store, rng);
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Binder<T>, x: Var) -> Var {
        let h = self.fc1.forward(g, p, x);
        let h = g.gelu(h);
        self.fc2.forward(g, p, h)
    }
}

/// Multi-head scaled dot-product attention. Queries come from one sequence,
/// keys and values from another (the same one for self-attention).
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new(prefix: &str, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "width {dim} not divisible by {heads} heads");
        Attention {
            q: Linear::new(join(prefix, "q"), dim, dim),
            k: Linear::new(join(prefix, "k"), dim, dim),
            v: Linear::new(join(prefix, "v"), dim, dim),
            out: Linear::new(join(prefix, "out"), dim, dim),
            heads,
            dim,
        }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.q.init(store, rng);
        self.k.init(store, rng);
        self.v.init(store, rng);
        self.out.init(store, rng);
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &mut Binder<T>,
        queries: Var,
        memory: Var,
    ) -> Var {
        self.forward_with_probs(g, p, queries, memory, None)
    }

    /// Like [`Attention::forward`]; when `probs` is given, the per-head
    /// attention matrices (`queries × keys`, rows summing to one) are pushed
    /// onto it.
    pub fn forward_with_probs<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &mut Binder<T>,
        queries: Var,
        memory: Var,
        mut probs: Option<&mut Vec<Var>>,
    ) -> Var {
        let q = self.q.forward(g, p, queries);
        let k = self.k.forward(g, p, memory);
        let v = self.v.forward(g, p, memory);
        let head_dim = self.dim / self.heads;
        let scale = T::one() / T::from_usize_lossy(head_dim).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * head_dim, head_dim),
                    g.slice_cols(k, h * head_dim, head_dim),
                    g.slice_cols(v, h * head_dim, head_dim),
                )
            };
            let scores = g.matmul_nt(qh, kh);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            if let Some(list) = probs.as_deref_mut() {
                list.push(attn);
            }
            outs.push(g.matmul(attn, vh));
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)
        };
        self.out.forward(g, p, merged)
    }
}

/// Pre-norm transformer block: self-attention then MLP, both residual.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderBlock {
    pub fn new(prefix: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Self {
        EncoderBlock {
            norm1: LayerNorm::new(join(prefix, "norm1"), dim),
            attn: Attention::new(&join(prefix, "attn"), dim, heads),
            norm2: LayerNorm::new(join(prefix, "norm2"), dim),
            mlp: Mlp::new(&join(prefix, "mlp"), dim, dim * mlp_ratio),
        }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.norm1.init(store);
        self.attn.init(store, rng);
        self.norm2.init(store);
        self.mlp.init(store, rng);
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &mut Binder<T>,
        x: Var,
        probs: Option<&mut Vec<Var>>,
    ) -> Var {
        let h = self.norm1.forward(g, p, x);
        let a = self.attn.forward_with_probs(g, p, h, h, probs);
        let x = g.add(x, a);
        let h = self.norm2.forward(g, p, x);
        let m = self.mlp.forward(g, p, h);
        g.add(x, m)
    }
}

/// Pre-norm interactive block: self-attention over the queries, then
/// cross-attention from queries into a memory sequence, then MLP.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub norm_self: LayerNorm,
    pub self_attn: Attention,
    pub norm_cross: LayerNorm,
    pub norm_memory: LayerNorm,
    pub cross_attn: Attention,
    pub norm_mlp: LayerNorm,
    pub mlp: Mlp,
}

impl DecoderBlock {
    pub fn new(prefix: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Self {
        DecoderBlock {
            norm_self: LayerNorm::new(join(prefix, "norm_self"), dim),
            self_attn: Attention::new(&join(prefix, "self_attn"), dim, heads),
            norm_cross: LayerNorm::new(join(prefix, "norm_cross"), dim),
            norm_memory: LayerNorm::new(join(prefix, "norm_memory"), dim),
            cross_attn: Attention::new(&join(prefix, "cross_attn"), dim, heads),
            norm_mlp: LayerNorm::new(join(prefix, "norm_mlp"), dim),
            mlp: Mlp::new(&join(prefix, "mlp"), dim, dim * mlp_ratio),
        }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.norm_self.init(store);
        self.self_attn.init(store, rng);
        self.norm_cross.init(store);
        self.norm_memory.init(store);
        self.cross_attn.init(store, rng);
        self.norm_mlp.init(store);
        self.mlp.init(store, rng);
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &mut Binder<T>,
        x: Var,
        memory: Var,
    ) -> Var {
        let h = self.norm_self.forward(g, p, x);
        let a = self.self_attn.forward(g, p, h, h);
        let x = g.add(x, a);
        let h = self.norm_cross.forward(g, p, x);
        let m = self.norm_memory.forward(g, p, memory);
        let c = self.cross_attn.forward(g, p, h, m);
        let x = g.add(x, c);
        let h = self.norm_mlp.forward(g, p, x);
        let f = self.mlp.forward(g, p, h);
        g.add(x, f)
    }
}
