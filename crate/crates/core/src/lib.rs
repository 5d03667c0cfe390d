//! Cardiac MR segmentation with a residual UNet that embeds dual (channel +
//! spatial) attention, a transformer stack at the bottleneck and
//! edge-augmented skip connections.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`autodiff`]) carries the layers ([`nn`], [`attention`], [`vit`]), which
//! the [`network`] module assembles into [`network::Model`]. Training lives in
//! [`trainer`], evaluation in [`metrics`], and data handling (NIfTI-1 volumes,
//! synthetic phantoms, folds) in [`data`].
//!
//! ```
//! use urveda::network::{Model, NetworkConfig};
//! use urveda::data::phantom::{generate_phantom, PhantomParams};
//!
//! let cfg = NetworkConfig::miniature();
//! let model = Model::new(cfg.clone(), 7).unwrap();
//! let sample = generate_phantom(1, cfg.height, cfg.width, &PhantomParams::default()).unwrap();
//! let logits = model.infer(&sample.image).unwrap();
//! assert_eq!(logits.shape(), &[cfg.classes, cfg.height, cfg.width]);
//! ```

pub mod attention;
pub mod autodiff;
pub mod data;
pub mod edge;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod trainer;
pub mod vit;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;

/// The guide under `book/` is compiled here so its code listings run as
/// doctests.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../README.md")]
    pub mod readme {}

    #[doc = include_str!("../../../book/src/intro.md")]
    pub mod intro {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    pub mod autodiff {}
    #[doc = include_str!("../../../book/src/attention.md")]
    pub mod attention {}
    #[doc = include_str!("../../../book/src/transformer.md")]
    pub mod transformer {}
    #[doc = include_str!("../../../book/src/edges.md")]
    pub mod edges {}
    #[doc = include_str!("../../../book/src/network.md")]
    pub mod network {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    pub mod metrics {}
    #[doc = include_str!("../../../book/src/data.md")]
    pub mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
}
