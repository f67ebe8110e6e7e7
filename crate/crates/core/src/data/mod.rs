//! Symbol images: prototype rendering, perturbation, augmentation and the
//! paired dataset format.

mod augment;
mod benchmark;
mod dataset;
mod image;
mod perturb;
mod render;

pub use augment::{augment_pair, AugmentConfig, AugmentParams};
pub use benchmark::{generate_benchmark, BenchmarkConfig};
pub use dataset::{
    load_manifest, ClassEntry, Dataset, DatasetManifest, PairedSample, RealImage, SampleSource, Split,
    HELD_OUT_PREFIX, PROTOTYPE_FILE, SPLITS_FILE,
};
pub use image::{ImageTensor, Resample};
pub use perturb::{gaussian_blur, perturb, Background, PerturbationParams, PerturbationRanges};
pub use render::{render_prototypes, BorderShape, FillStyle, Glyph, SymbolSpec, MIN_PAIRWISE_DIFFERENCE, PIXEL_TOLERANCE};
