//! Patch-token vision transformer with a learnable summary token.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Archive;
use crate::config::ExperimentConfig;
use crate::data::image::{bilinear_matrix, ImageView};
use crate::data::views::MaskedView;
use crate::error::{Result, SaipError};
use crate::nn::{EncoderBlock, LayerNorm, Linear};
use crate::params::{trunc_normal, Binder, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const ENCODER_PREFIX: &str = "encoder";

/// Architecture of an encoder, stored alongside exported weights.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Grid on which the positional table is defined.
    pub pos_grid: (usize, usize),
    /// Whether other grids may be served by resampling the table.
    pub interpolate_pos: bool,
}

impl EncoderSpec {
    pub fn from_config(config: &ExperimentConfig) -> Self {
        EncoderSpec {
            patch_size: config.patch_size,
            embed_dim: config.encoder.embed_dim,
            depth: config.encoder.depth,
            heads: config.encoder.heads,
            mlp_ratio: config.encoder.mlp_ratio,
            pos_grid: config.anchor_grid(),
            interpolate_pos: config.encoder.interpolate_pos,
        }
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

/// Encoder output: summary token `F` and patch tokens `F′`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenField<T> {
    /// `1 × D`.
    pub image_token: Tensor<T>,
    /// `L × D`, one row per encoded patch.
    pub patch_tokens: Tensor<T>,
    pub grid: (usize, usize),
}

impl<T: Scalar> TokenField<T> {
    pub fn num_tokens(&self) -> usize {
        self.patch_tokens.rows()
    }

    pub fn is_finite(&self) -> bool {
        self.image_token.is_finite() && self.patch_tokens.is_finite()
    }
}

/// Graph handles of an encoder pass.
#[derive(Clone, Debug)]
pub struct TokenVars {
    pub image_token: Var,
    pub patch_tokens: Var,
    pub grid: (usize, usize),
    /// Last-block self-attention per head, `(1 + L) × (1 + L)`, when requested.
    pub last_attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct VisionEncoder {
    pub spec: EncoderSpec,
    pub patch_embed: Linear,
    pub blocks: Vec<EncoderBlock>,
    pub norm: LayerNorm,
    cls_name: String,
    pos_name: String,
}

impl VisionEncoder {
    pub fn new(spec: EncoderSpec) -> Result<Self> {
        Self::with_prefix(spec, ENCODER_PREFIX)
    }

    /// Same architecture with parameter names rooted at `prefix`.
    pub fn with_prefix(spec: EncoderSpec, prefix: &str) -> Result<Self> {
        if spec.embed_dim == 0 || spec.heads == 0 || !spec.embed_dim.is_multiple_of(spec.heads) {
            return Err(SaipError::config(
                "encoder.heads",
                format!("embed_dim {} not divisible by {} heads", spec.embed_dim, spec.heads),
            ));
        }
        let p = prefix;
        let d = spec.embed_dim;
        Ok(VisionEncoder {
            patch_embed: Linear::new(format!("{p}.patch_embed"), spec.patch_dim(), d),
            blocks: (0..spec.depth)
                .map(|i| EncoderBlock::new(&format!("{p}.blocks.{i}"), d, spec.heads, spec.mlp_ratio))
                .collect(),
            norm: LayerNorm::new(format!("{p}.norm"), d),
            cls_name: format!("{p}.cls_token"),
            pos_name: format!("{p}.pos_embed"),
            spec,
        })
    }

    pub fn dim(&self) -> usize {
        self.spec.embed_dim
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let d = self.spec.embed_dim;
        let (gh, gw) = self.spec.pos_grid;
        self.patch_embed.init(store, rng);
        store.insert(self.cls_name.clone(), trunc_normal(1, d, 0.02, rng));
        store.insert(self.pos_name.clone(), trunc_normal(gh * gw, d, 0.02, rng));
        for b in &self.blocks {
            b.init(store, rng);
        }
        self.norm.init(store);
    }

    pub fn init_params<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore<T> {
        let mut store = ParamStore::new();
        self.init(&mut store, rng);
        store
    }

    /// Positional table for `grid`, resampled from the native grid if needed.
    fn positions<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Binder<T>, grid: (usize, usize)) -> Result<Var> {
        let table = p.get(g, &self.pos_name);
        if grid == self.spec.pos_grid {
            return Ok(table);
        }
        if !self.spec.interpolate_pos {
            return Err(SaipError::Shape(format!(
                "grid {}x{} differs from positional grid {}x{} and interpolation is off",
                grid.0, grid.1, self.spec.pos_grid.0, self.spec.pos_grid.1
            )));
        }
        let resample = g.constant(bilinear_matrix(self.spec.pos_grid, grid));
        Ok(g.matmul(resample, table))
    }

    /// Encodes patch rows taken from a `grid`. `rows` selects which grid
    /// positions the rows of `patches` correspond to; `None` means all, in
    /// order.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &mut Binder<T>,
        patches: Tensor<T>,
        grid: (usize, usize),
        rows: Option<&[usize]>,
        capture_attention: bool,
    ) -> Result<TokenVars> {
        let n = rows.map_or(grid.0 * grid.1, <[usize]>::len);
        if patches.rows() != n || patches.cols() != self.spec.patch_dim() {
            return Err(SaipError::Shape(format!(
                "expected {n} patches of {} values, got {}x{}",
                self.spec.patch_dim(),
                patches.rows(),
                patches.cols()
            )));
        }
        if n == 0 {
            return Err(SaipError::NoVisiblePatches);
        }
        let x = g.constant(patches);
        let x = self.patch_embed.forward(g, p, x);
        let pos = self.positions(g, p, grid)?;
        let pos = match rows {
            Some(idx) => g.gather_rows(pos, idx),
            None => pos,
        };
        let x = g.add(x, pos);
        let cls = p.get(g, &self.cls_name);
        let mut h = g.concat_rows(&[cls, x]);
        let mut attn = Vec::new();
        let last = self.blocks.len().saturating_sub(1);
        for (i, b) in self.blocks.iter().enumerate() {
            let capture = capture_attention && i == last;
            h = b.forward(g, p, h, if capture { Some(&mut attn) } else { None });
        }
        let h = self.norm.forward(g, p, h);
        Ok(TokenVars {
            image_token: g.slice_rows(h, 0, 1),
            patch_tokens: g.slice_rows(h, 1, n),
            grid,
            last_attention: attn,
        })
    }

    /// Full-grid encoding of an image.
    pub fn forward_image<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &mut Binder<T>,
        image: &ImageView<T>,
        capture_attention: bool,
    ) -> Result<TokenVars> {
        let grid = image.check_patch_aligned(self.spec.patch_size)?;
        let patches = image.patchify(self.spec.patch_size)?;
        self.forward(g, p, patches, grid, None, capture_attention)
    }

    /// Encodes only the visible patches of a masked view, in
    /// `visible_indices` order.
    pub fn forward_visible<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &mut Binder<T>,
        masked: &MaskedView<T>,
    ) -> Result<TokenVars> {
        if masked.visible_indices.is_empty() {
            return Err(SaipError::NoVisiblePatches);
        }
        let grid = masked.base.check_patch_aligned(self.spec.patch_size)?;
        if grid != masked.grid {
            return Err(SaipError::Shape(format!(
                "mask grid {:?} does not match image grid {grid:?}",
                masked.grid
            )));
        }
        let all = masked.base.patchify(self.spec.patch_size)?;
        let patches = all.gather_rows(&masked.visible_indices);
        self.forward(g, p, patches, grid, Some(&masked.visible_indices), false)
    }

    pub fn encode<T: Scalar>(&self, params: &ParamStore<T>, image: &ImageView<T>) -> Result<TokenField<T>> {
        let mut g = Graph::new();
        let mut p = Binder::frozen(params);
        let vars = self.forward_image(&mut g, &mut p, image, false)?;
        Ok(field(&g, &vars))
    }

    pub fn encode_visible<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        masked: &MaskedView<T>,
    ) -> Result<TokenField<T>> {
        let mut g = Graph::new();
        let mut p = Binder::frozen(params);
        let vars = self.forward_visible(&mut g, &mut p, masked)?;
        Ok(field(&g, &vars))
    }

    /// Summary-token attention over patches in the last block, averaged
    /// over heads: a `gh × gw` grid whose entries sum to at most one.
    pub fn summary_attention<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        image: &ImageView<T>,
    ) -> Result<(Tensor<T>, (usize, usize))> {
        let mut g = Graph::new();
        let mut p = Binder::frozen(params);
        let vars = self.forward_image(&mut g, &mut p, image, true)?;
        let (gh, gw) = vars.grid;
        let mut out = Tensor::zeros(gh, gw);
        let heads = T::from_usize_lossy(vars.last_attention.len().max(1));
        for &a in &vars.last_attention {
            let row = g.value(a).row(0);
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v += row[i + 1] / heads;
            }
        }
        Ok((out, vars.grid))
    }
}

pub const ENCODER_KIND: &str = "encoder";

/// Archive holding only encoder weights and their architecture.
pub fn encoder_archive<T: Scalar>(spec: &EncoderSpec, params: &ParamStore<T>) -> Archive<T> {
    let mut a = Archive::default();
    a.set_meta("kind", &ENCODER_KIND);
    a.set_meta("encoder_spec", spec);
    for (n, t) in params.subset(&format!("{ENCODER_PREFIX}.")).iter() {
        a.tensors.insert(n.clone(), t.clone());
    }
    a
}

/// Reads the encoder weights of an archive, checking that every parameter
/// the declared architecture needs is present with the right shape. Tensors
/// outside the encoder namespace are ignored.
pub fn load_encoder<T: Scalar>(path: &Path) -> Result<(EncoderSpec, ParamStore<T>)> {
    let archive = Archive::<T>::load(path)?;
    let kind: String = archive.meta("kind", path)?;
    if kind != ENCODER_KIND {
        return Err(SaipError::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("expected an encoder export, found kind `{kind}`"),
        });
    }
    let spec: EncoderSpec = archive.meta("encoder_spec", path)?;
    let enc = VisionEncoder::new(spec.clone())?;
    let expected: ParamStore<T> = enc.init_params(&mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0));
    let prefix = format!("{ENCODER_PREFIX}.");
    let params: ParamStore<T> = archive
        .tensors
        .into_iter()
        .filter(|(n, _)| n.starts_with(&prefix))
        .collect();
    check_layout(&expected, &params).map_err(|reason| SaipError::Checkpoint {
        path: path.to_path_buf(),
        reason,
    })?;
    Ok((spec, params))
}

/// Verifies that `found` has exactly the names and shapes of `expected`.
pub fn check_layout<T: Scalar>(expected: &ParamStore<T>, found: &ParamStore<T>) -> std::result::Result<(), String> {
    for (n, t) in expected.iter() {
        match found.get(n) {
            None => return Err(format!("missing parameter `{n}`")),
            Some(f) if f.shape() != t.shape() => {
                return Err(format!("parameter `{n}` has shape {:?}, expected {:?}", f.shape(), t.shape()))
            }
            _ => {}
        }
    }
    if let Some(extra) = found.names().find(|n| !expected.contains(n)) {
        return Err(format!("unexpected parameter `{extra}`"));
    }
    Ok(())
}

pub fn field<T: Scalar>(g: &Graph<T>, vars: &TokenVars) -> TokenField<T> {
    TokenField {
        image_token: g.value(vars.image_token).clone(),
        patch_tokens: g.value(vars.patch_tokens).clone(),
        grid: vars.grid,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::views::apply_patch_mask;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn micro_spec() -> EncoderSpec {
        EncoderSpec {
            patch_size: 8,
            embed_dim: 16,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            pos_grid: (4, 2),
            interpolate_pos: true,
        }
    }

    fn noise_image(h: usize, w: usize, seed: u64) -> ImageView<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels = (0..h * w * 3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        ImageView::new(pixels, h, w, "n", 1.0).unwrap()
    }

    #[test]
    fn default_parameter_count_is_vit_tiny() {
        let enc = VisionEncoder::new(EncoderSpec::from_config(&ExperimentConfig::default())).unwrap();
        let store: ParamStore<f32> = enc.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        let n = store.numel() as f64;
        assert!((n - 5.5e6).abs() <= 0.55e6, "{n}");
    }

    #[test]
    fn default_geometry_shapes() {
        let cfg = ExperimentConfig::default();
        let enc = VisionEncoder::new(EncoderSpec::from_config(&cfg)).unwrap();
        let store: ParamStore<f32> = enc.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        let anchor = ImageView::<f32>::filled(256, 128, [0.1, 0.2, 0.3], "a");
        let f = enc.encode(&store, &anchor).unwrap();
        assert_eq!(f.patch_tokens.shape(), (128, 192));
        assert_eq!(f.image_token.shape(), (1, 192));
        let comp = ImageView::<f32>::filled(224, 224, [0.0; 3], "c");
        let f = enc.encode(&store, &comp).unwrap();
        assert_eq!(f.num_tokens(), 196);
        assert_eq!(f.grid, (14, 14));
    }

    #[test]
    fn outputs_are_finite_for_extreme_inputs() {
        let enc = VisionEncoder::new(micro_spec()).unwrap();
        let store: ParamStore<f64> = enc.init_params(&mut ChaCha8Rng::seed_from_u64(1));
        for img in [
            ImageView::filled(32, 16, [0.0; 3], "z"),
            ImageView::filled(32, 16, [1.0; 3], "o"),
            noise_image(32, 16, 3),
        ] {
            assert!(enc.encode(&store, &img).unwrap().is_finite());
        }
    }

    #[test]
    fn misaligned_input_names_dims() {
        let enc = VisionEncoder::new(micro_spec()).unwrap();
        let store: ParamStore<f64> = enc.init_params(&mut ChaCha8Rng::seed_from_u64(1));
        let e = enc.encode(&store, &ImageView::filled(30, 16, [0.0; 3], "z")).unwrap_err();
        assert!(e.to_string().contains("30x16"), "{e}");
    }

    #[test]
    fn one_parameter_set_serves_two_grids() {
        let enc = VisionEncoder::new(micro_spec()).unwrap();
        let store: ParamStore<f64> = enc.init_params(&mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(enc.encode(&store, &noise_image(32, 16, 1)).unwrap().grid, (4, 2));
        assert_eq!(enc.encode(&store, &noise_image(24, 24, 2)).unwrap().grid, (3, 3));
    }

    #[test]
    fn visible_encoding_row_counts_and_zero_ratio() {
        let enc = VisionEncoder::new(micro_spec()).unwrap();
        let store: ParamStore<f64> = enc.init_params(&mut ChaCha8Rng::seed_from_u64(1));
        let img = noise_image(32, 16, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = apply_patch_mask(&img, 0.75, 8, &mut rng).unwrap();
        assert_eq!(enc.encode_visible(&store, &m).unwrap().num_tokens(), 2);

        let full = apply_patch_mask(&img, 0.0, 8, &mut rng).unwrap();
        let a = enc.encode_visible(&store, &full).unwrap();
        let b = enc.encode(&store, &img).unwrap();
        assert!(a.patch_tokens.max_abs_diff(&b.patch_tokens) < 1e-12);
    }

    #[test]
    fn permuting_visible_order_permutes_rows() {
        let enc = VisionEncoder::new(micro_spec()).unwrap();
        let store: ParamStore<f64> = enc.init_params(&mut ChaCha8Rng::seed_from_u64(1));
        let img = noise_image(32, 16, 6);
        let mut m = apply_patch_mask(&img, 0.5, 8, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let a = enc.encode_visible(&store, &m).unwrap();
        m.visible_indices.reverse();
        let b = enc.encode_visible(&store, &m).unwrap();
        let n = a.num_tokens();
        let reversed: Vec<usize> = (0..n).rev().collect();
        assert!(a.patch_tokens.gather_rows(&reversed).max_abs_diff(&b.patch_tokens) < 1e-12);
        assert!(a.image_token.max_abs_diff(&b.image_token) < 1e-12);
    }

    #[test]
    fn empty_visible_set_is_an_error() {
        let enc = VisionEncoder::new(micro_spec()).unwrap();
        let store: ParamStore<f64> = enc.init_params(&mut ChaCha8Rng::seed_from_u64(1));
        let img = noise_image(32, 16, 6);
        let mut m = apply_patch_mask(&img, 0.5, 8, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        m.visible_indices.clear();
        assert!(matches!(enc.encode_visible(&store, &m), Err(SaipError::NoVisiblePatches)));
    }

    #[test]
    fn summary_attention_is_a_partial_distribution() {
        let enc = VisionEncoder::new(micro_spec()).unwrap();
        let store: ParamStore<f64> = enc.init_params(&mut ChaCha8Rng::seed_from_u64(1));
        let (att, grid) = enc.summary_attention(&store, &noise_image(32, 16, 7)).unwrap();
        assert_eq!(grid, (4, 2));
        assert!(att.data().iter().all(|&v| v >= 0.0));
        assert!(att.sum() < 1.0);
    }
}
