//! Motion-driven deformable template mesh tightly coupled with a small learned
//! radiance field sampled in a thin shell around the mesh surface.
//!
//! The crate is organized around five subsystems:
//!
//! * [`charmodel`] — skeletal poses, embedded deformation, linear blend
//!   skinning, per-vertex displacements, and texture-space normal maps.
//! * [`meshops`] — ray-independent geometry services: exact closest-point
//!   queries (BVH), signed normalized distance via angle-weighted
//!   pseudonormals, depth rasterization, and depth-map erosion/dilation.
//! * [`field`] — positional encodings, the feature texture and its encoders,
//!   and the two-branch radiance MLP with exact analytic gradients.
//! * [`render`] — shell-restricted ray sampling, alpha compositing (forward
//!   and backward), density-weighted surface point extraction, image
//!   assembly, and image metrics.
//! * [`refine`] — robust bidirectional Chamfer, silhouette/Laplacian/edge
//!   regularizers, the combined mesh objective, the displacement-network
//!   refinement loop, and the alternating training schedule.
//!
//! Everything is `f64`, deterministic under a fixed seed, and free of IO; the
//! companion CLI crate carries file formats and orchestration. The crate
//! builds without `std` (with `alloc`); the default `std` feature switches
//! float intrinsics to the host libm and the optional `rayon` feature
//! parallelizes ray batches without changing results.

#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::too_many_arguments)]
#![allow(clippy::needless_range_loop)]

extern crate alloc;

pub mod charmodel;
pub mod field;
pub mod math;
pub mod meshops;
pub mod nn;
pub mod render;
pub mod refine;
pub mod training;

pub use math::{Mat3, Rigid, Vec3};
