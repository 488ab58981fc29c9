pub mod composite;
pub mod corpus;
pub mod image;
pub mod sample;
pub mod toy;
pub mod views;

pub use self::composite::{synthesize_composite, BBox, InstanceMask};
pub use self::corpus::{index_corpus, Corpus, CorpusIndex, SkipReport};
pub use self::image::{bilinear_matrix, ImageView};
pub use self::sample::{build_sample, build_sample_from_anchor, sample_rng, PretrainSample};
pub use self::views::{apply_patch_mask, make_anchor, make_scaled_views, MaskedView};
