//! Task heads: the image-level matching projection and the two pixel-level
//! cross-attention decoders.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::config::ExperimentConfig;
use crate::error::{Result, SaipError};
use crate::nn::{DecoderBlock, LayerNorm, Linear};
use crate::params::{trunc_normal, Binder, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// MLP block, unit normalization and prototype projection.
#[derive(Clone, Debug)]
pub struct CsmHead {
    pub layers: Vec<Linear>,
    pub prototypes: Linear,
}

/// Output of [`CsmHead`] on a single summary token.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedRepresentation<T> {
    /// Unit-norm latent, `1 × latent_dim`.
    pub latent: Tensor<T>,
    /// Prototype scores, `1 × K`.
    pub logits: Tensor<T>,
}

impl CsmHead {
    pub fn new(prefix: &str, dim: usize, hidden: usize, latent: usize, prototypes: usize) -> Self {
        CsmHead {
            layers: vec![
                Linear::new(format!("{prefix}.mlp.0"), dim, hidden),
                Linear::new(format!("{prefix}.mlp.1"), hidden, hidden),
                Linear::new(format!("{prefix}.mlp.2"), hidden, latent),
            ],
            prototypes: Linear::without_bias(format!("{prefix}.prototypes"), latent, prototypes),
        }
    }

    pub fn from_config(config: &ExperimentConfig) -> Self {
        let c = &config.csm;
        CsmHead::new("csm", config.encoder.embed_dim, c.hidden_dim, c.latent_dim, c.prototypes)
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        for l in &self.layers {
            l.init(store, rng);
        }
        self.prototypes.init(store, rng);
    }

    /// Maps summary tokens (`rows × D`) to `(latent, logits)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Binder<T>, tokens: Var) -> (Var, Var) {
        let mut h = tokens;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, p, h);
            if i + 1 < self.layers.len() {
                h = g.gelu(h);
            }
        }
        let latent = g.l2_normalize_rows(h);
        let logits = self.prototypes.forward(g, p, latent);
        (latent, logits)
    }

    pub fn project<T: Scalar>(&self, params: &ParamStore<T>, image_token: &Tensor<T>) -> ProjectedRepresentation<T> {
        let mut g = Graph::new();
        let mut p = Binder::frozen(params);
        let x = g.constant(image_token.clone());
        let (latent, logits) = self.forward(&mut g, &mut p, x);
        ProjectedRepresentation {
            latent: g.value(latent).clone(),
            logits: g.value(logits).clone(),
        }
    }
}

/// The decoder φ: a stack of interactive blocks. Queries and keys must
/// already have the decoder width.
#[derive(Clone, Debug)]
pub struct PixelDecoder {
    pub blocks: Vec<DecoderBlock>,
    pub width: usize,
}

impl PixelDecoder {
    pub fn new(prefix: &str, blocks: usize, width: usize, heads: usize, mlp_ratio: usize) -> Self {
        PixelDecoder {
            blocks: (0..blocks)
                .map(|i| DecoderBlock::new(&format!("{prefix}.{i}"), width, heads, mlp_ratio))
                .collect(),
            width,
        }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        for b in &self.blocks {
            b.init(store, rng);
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &mut Binder<T>,
        queries: Var,
        keys: Var,
    ) -> Result<Var> {
        let (lq, wq) = g.shape(queries);
        let (lk, wk) = g.shape(keys);
        if lq == 0 || lk == 0 {
            return Err(SaipError::Shape(format!("decoder needs queries and keys, got {lq} and {lk}")));
        }
        if wq != self.width || wk != self.width {
            return Err(SaipError::Shape(format!(
                "decoder width {} but queries have {wq} and keys {wk}",
                self.width
            )));
        }
        let mut x = queries;
        for b in &self.blocks {
            x = b.forward(g, p, x, keys);
        }
        Ok(x)
    }
}

/// Reconstructs every patch of a masked view from its visible tokens and a
/// memory sequence.
#[derive(Clone, Debug)]
pub struct CsrDecoder {
    pub query_in: Linear,
    pub memory_in: Linear,
    pub phi: PixelDecoder,
    pub norm: LayerNorm,
    pub head: Linear,
    pub grid: (usize, usize),
    mask_token: String,
    pos: String,
}

impl CsrDecoder {
    pub fn new(
        query_dim: usize,
        memory_dim: usize,
        config: &ExperimentConfig,
    ) -> Self {
        let w = config.decoder_width();
        let d = &config.decoder;
        let p = config.patch_size;
        CsrDecoder {
            query_in: Linear::new("csr.query_in", query_dim, w),
            memory_in: Linear::new("csr.memory_in", memory_dim, w),
            phi: PixelDecoder::new("csr.blocks", d.csr_blocks, w, config.decoder_heads(), d.mlp_ratio),
            norm: LayerNorm::new("csr.norm", w),
            head: Linear::new("csr.head", w, p * p * 3),
            grid: config.anchor_grid(),
            mask_token: "csr.mask_token".into(),
            pos: "csr.pos".into(),
        }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let w = self.phi.width;
        self.query_in.init(store, rng);
        self.memory_in.init(store, rng);
        store.insert(self.mask_token.clone(), trunc_normal(1, w, 0.02, rng));
        store.insert(self.pos.clone(), trunc_normal(self.grid.0 * self.grid.1, w, 0.02, rng));
        self.phi.init(store, rng);
        self.norm.init(store);
        self.head.init(store, rng);
    }

    /// `visible` holds one token per entry of `visible_indices`; the result
    /// has one row of `patch²·3` values per grid position.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &mut Binder<T>,
        visible: Var,
        visible_indices: &[usize],
        mask_map: &[bool],
        memory: Var,
    ) -> Result<Var> {
        let total = self.grid.0 * self.grid.1;
        if mask_map.len() != total {
            return Err(SaipError::Shape(format!(
                "mask covers {} patches but the decoder grid has {total}",
                mask_map.len()
            )));
        }
        if g.shape(visible).0 != visible_indices.len() {
            return Err(SaipError::Shape("visible tokens and indices differ in count".into()));
        }
        let q = self.query_in.forward(g, p, visible);
        let v = visible_indices.len();
        let mut slot = vec![v; total];
        for (rank, &i) in visible_indices.iter().enumerate() {
            if i >= total || !mask_map.get(i).is_some_and(|&m| !m) {
                return Err(SaipError::Shape(format!("visible index {i} is masked or out of range")));
            }
            slot[i] = rank;
        }
        let masked = mask_map.iter().filter(|&&m| m).count();
        if masked + v != total {
            return Err(SaipError::Shape("visible and masked positions do not partition the grid".into()));
        }
        let seq = if masked == 0 {
            g.gather_rows(q, &slot)
        } else {
            let token = p.get(g, &self.mask_token);
            let pool = g.concat_rows(&[q, token]);
            g.gather_rows(pool, &slot)
        };
        let pos = p.get(g, &self.pos);
        let seq = g.add(seq, pos);
        let mem = self.memory_in.forward(g, p, memory);
        let out = self.phi.forward(g, p, seq, mem)?;
        let out = self.norm.forward(g, p, out);
        Ok(self.head.forward(g, p, out))
    }
}

/// Predicts, on the composite grid, where a given instance lies.
#[derive(Clone, Debug)]
pub struct CssDecoder {
    pub query_in: Linear,
    pub memory_in: Linear,
    pub phi: PixelDecoder,
    pub readout: DecoderBlock,
    pub readout_norm: LayerNorm,
    pub convs: Vec<Linear>,
    pub predict: Linear,
    pub grid: (usize, usize),
    readout_queries: String,
}

pub const CSS_KERNEL: usize = 3;

impl CssDecoder {
    pub fn new(query_dim: usize, memory_dim: usize, config: &ExperimentConfig) -> Self {
        let w = config.decoder_width();
        let d = &config.decoder;
        let heads = config.decoder_heads();
        let k2 = CSS_KERNEL * CSS_KERNEL;
        let convs = (0..d.conv_layers)
            .map(|i| {
                let cin = if i == 0 { w } else { d.conv_channels };
                Linear::new(format!("css.conv.{i}"), k2 * cin, d.conv_channels)
            })
            .collect::<Vec<_>>();
        let last = if d.conv_layers == 0 { w } else { d.conv_channels };
        CssDecoder {
            query_in: Linear::new("css.query_in", query_dim, w),
            memory_in: Linear::new("css.memory_in", memory_dim, w),
            phi: PixelDecoder::new("css.blocks", d.css_blocks, w, heads, d.mlp_ratio),
            readout: DecoderBlock::new("css.readout", w, heads, d.mlp_ratio),
            readout_norm: LayerNorm::new("css.readout_norm", w),
            convs,
            predict: Linear::new("css.predict", last, 1),
            grid: config.composite_grid(),
            readout_queries: "css.readout_queries".into(),
        }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let w = self.phi.width;
        self.query_in.init(store, rng);
        self.memory_in.init(store, rng);
        self.phi.init(store, rng);
        store.insert(
            self.readout_queries.clone(),
            trunc_normal(self.grid.0 * self.grid.1, w, 0.02, rng),
        );
        self.readout.init(store, rng);
        self.readout_norm.init(store);
        for c in &self.convs {
            c.init(store, rng);
        }
        self.predict.init(store, rng);
    }

    /// Decodes instance tokens against composite tokens; returns a
    /// `gh·gw × 1` column of values in `(0, 1)` on the composite grid.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &mut Binder<T>,
        instance: Var,
        composite: Var,
    ) -> Result<Var> {
        let q = self.query_in.forward(g, p, instance);
        let mem = self.memory_in.forward(g, p, composite);
        let decoded = self.phi.forward(g, p, q, mem)?;
        let rq = p.get(g, &self.readout_queries);
        let mut x = self.readout.forward(g, p, rq, decoded);
        x = self.readout_norm.forward(g, p, x);
        let (gh, gw) = self.grid;
        for c in &self.convs {
            let cols = g.im2col(x, gh, gw, CSS_KERNEL);
            x = c.forward(g, p, cols);
            x = g.gelu(x);
        }
        let logit = self.predict.forward(g, p, x);
        Ok(g.sigmoid(logit))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn micro_config() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.anchor_hw = [32, 32];
        c.composite_hw = [48, 48];
        c.patch_size = 8;
        c.encoder.embed_dim = 16;
        c.encoder.heads = 2;
        c.decoder.csr_blocks = 2;
        c.decoder.conv_channels = 8;
        c.csm.hidden_dim = 24;
        c.csm.latent_dim = 8;
        c.csm.prototypes = 16;
        c
    }

    fn rand_tensor(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn csm_latent_is_unit_and_logits_have_k_entries() {
        let head = CsmHead::new("csm", 192, 64, 256, 65536);
        let mut store = ParamStore::<f32>::new();
        head.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let x = rand_tensor(1, 192, 1).cast::<f32>();
        let r = head.project(&store, &x);
        assert_eq!(r.logits.shape(), (1, 65536));
        let norm: f64 = r.latent.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert!(r.logits.is_finite());
        assert_eq!(head.project(&store, &x), r);
    }

    fn phi_store(phi: &PixelDecoder, seed: u64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        phi.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        store
    }

    fn run_phi(phi: &PixelDecoder, store: &ParamStore<f64>, q: &Tensor<f64>, k: &Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::new();
        let mut p = Binder::frozen(store);
        let qv = g.constant(q.clone());
        let kv = g.constant(k.clone());
        let out = phi.forward(&mut g, &mut p, qv, kv).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn phi_preserves_query_length() {
        let phi = PixelDecoder::new("phi", 2, 16, 2, 2);
        let store = phi_store(&phi, 0);
        let out = run_phi(&phi, &store, &rand_tensor(32, 16, 1), &rand_tensor(128, 16, 2));
        assert_eq!(out.shape(), (32, 16));
        let out = run_phi(&phi, &store, &rand_tensor(1, 16, 1), &rand_tensor(1, 16, 2));
        assert_eq!(out.shape(), (1, 16));
    }

    #[test]
    fn phi_with_zeroed_output_projections_is_residual() {
        let phi = PixelDecoder::new("phi", 2, 16, 2, 2);
        let mut store = phi_store(&phi, 0);
        for (name, t) in store.iter_mut() {
            if name.contains(".out.") || name.contains(".fc2.") {
                *t = Tensor::zeros(t.rows(), t.cols());
            }
        }
        let q = rand_tensor(1, 16, 3);
        let out = run_phi(&phi, &store, &q, &q);
        assert_eq!(out, q);
    }

    #[test]
    fn phi_is_invariant_to_key_order() {
        let phi = PixelDecoder::new("phi", 2, 16, 2, 2);
        let store = phi_store(&phi, 4);
        let q = rand_tensor(5, 16, 5);
        let k = rand_tensor(9, 16, 6);
        let perm: Vec<usize> = vec![3, 8, 0, 5, 1, 7, 2, 6, 4];
        let a = run_phi(&phi, &store, &q, &k);
        let b = run_phi(&phi, &store, &q, &k.gather_rows(&perm));
        assert!(a.max_abs_diff(&b) < 1e-6);
    }

    #[test]
    fn phi_rejects_empty_sets() {
        let phi = PixelDecoder::new("phi", 1, 16, 2, 2);
        let store = phi_store(&phi, 0);
        let mut g = Graph::new();
        let mut p = Binder::frozen(&store);
        let q = g.constant(Tensor::zeros(0, 16));
        let k = g.constant(rand_tensor(2, 16, 0));
        assert!(phi.forward(&mut g, &mut p, q, k).is_err());
    }

    fn csr_setup() -> (ExperimentConfig, CsrDecoder, ParamStore<f64>) {
        let cfg = micro_config();
        let dec = CsrDecoder::new(16, 16, &cfg);
        let mut store = ParamStore::new();
        dec.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        (cfg, dec, store)
    }

    fn run_csr(dec: &CsrDecoder, store: &ParamStore<f64>, visible: &[usize], mask: &[bool]) -> Tensor<f64> {
        let mut g = Graph::new();
        let mut p = Binder::frozen(store);
        let v = g.constant(rand_tensor(visible.len(), 16, 1));
        let m = g.constant(rand_tensor(16, 16, 2));
        let out = dec.forward(&mut g, &mut p, v, visible, mask, m).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn csr_output_covers_full_grid() {
        let (_, dec, store) = csr_setup();
        let visible = [1, 4, 9, 14];
        let mut mask = vec![true; 16];
        for &i in &visible {
            mask[i] = false;
        }
        let out = run_csr(&dec, &store, &visible, &mask);
        assert_eq!(out.shape(), (16, 192));
        assert_eq!(run_csr(&dec, &store, &visible, &mask), out);

        let all: Vec<usize> = (0..16).collect();
        let out = run_csr(&dec, &store, &all, &[false; 16]);
        assert_eq!(out.shape(), (16, 192));
    }

    #[test]
    fn csr_default_geometry() {
        let cfg = ExperimentConfig::default();
        let dec = CsrDecoder::new(192, 192, &cfg);
        assert_eq!(dec.grid, (16, 8));
        assert_eq!(dec.head.dout, 768);
    }

    #[test]
    fn csr_rejects_grid_mismatch() {
        let (_, dec, store) = csr_setup();
        let mut g = Graph::new();
        let mut p = Binder::frozen(&store);
        let v = g.constant(rand_tensor(2, 16, 1));
        let m = g.constant(rand_tensor(16, 16, 2));
        let mut mask = vec![true; 8];
        mask[0] = false;
        mask[1] = false;
        assert!(dec.forward(&mut g, &mut p, v, &[0, 1], &mask, m).is_err());
    }

    #[test]
    fn css_output_is_a_probability_grid() {
        let cfg = micro_config();
        let dec = CssDecoder::new(16, 16, &cfg);
        let mut store = ParamStore::<f64>::new();
        dec.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let run = |store: &ParamStore<f64>, seed: u64| {
            let mut g = Graph::new();
            let mut p = Binder::frozen(store);
            let q = g.constant(rand_tensor(16, 16, seed));
            let k = g.constant(rand_tensor(36, 16, 9));
            let out = dec.forward(&mut g, &mut p, q, k).unwrap();
            g.value(out).clone()
        };
        let out = run(&store, 1);
        assert_eq!(out.shape(), (36, 1));
        assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));

        store.insert("css.predict.w", Tensor::zeros(8, 1));
        store.insert("css.predict.b", Tensor::zeros(1, 1));
        assert!(run(&store, 2).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn css_default_grid_is_14_by_14() {
        let dec = CssDecoder::new(192, 192, &ExperimentConfig::default());
        assert_eq!(dec.grid, (14, 14));
        assert_eq!(dec.convs.len(), 4);
    }
}
