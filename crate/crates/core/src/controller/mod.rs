//! Equilibrium functions assembled from per-subgraph ICNNs.
//!
//! For a partition `{M_ℓ}` of the controllable buses into cliques of the
//! communication graph, `φ(v) = Proj_𝒬(−Σ_ℓ ∇g_ℓ(v_{M_ℓ}))`. Each `g_ℓ` is
//! convex, so the sum of their gradients is monotone and `φ_raw` is monotone
//! decreasing whatever the communication graph looks like.

mod bundle;
mod graph;
mod presets;

pub use bundle::{
    max_stable_stepsize, BundleManifest, Certification, ControllerBundle, LipschitzEstimate, ReactiveBox,
    BUNDLE_FORMAT_VERSION,
};
pub use graph::{cover_cliques, CommGraph, Partition};
pub use presets::CommSetup;
