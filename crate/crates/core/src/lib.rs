//! Cross-site brain-network learning pipeline.
//!
//! The crate covers the full training and inference path for site-robust
//! classification of functional-connectivity graphs:
//!
//! 1. [`dataset`] — static FC vectors, covariate standardization, and the
//!    canonical edge indexing shared by every later stage.
//! 2. [`deconfound`] — per-site Huber/IRLS confounder regression, within-site
//!    residualization, and the frozen site-agnostic deconfounder used on
//!    unseen sites.
//! 3. [`scaffold`] — site-level diagnostic contrasts, consensus medians,
//!    sign-consistency and bootstrap-stability filtering, and the resulting
//!    population scaffold with its margin-stability report.
//! 4. [`transient`] — sliding-window FC trajectories over scaffold edges and
//!    fixed-dimensional temporal descriptors.
//! 5. [`linegraph`] — prior scores, the prior-weighted line-graph adjacency,
//!    and the symmetric-normalized propagation matrix.
//! 6. [`model`] / [`train`] — the prior-guided gated message-passing network
//!    with hand-derived reverse-mode gradients, Adam training, and a
//!    finite-difference gradient check.
//! 7. [`synth`], [`pipeline`], [`metrics`] — synthetic multi-site generators,
//!    leave-one-site-out orchestration, and rank-based evaluation.
//!
//! The crate is `no_std` (with `alloc`): it performs no IO and spawns no
//! threads. File formats, the CLI, and parallel execution live in the
//! companion `corenet-cli` crate, which drives everything here through
//! [`executor::Executor`].

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod dataset;
pub mod deconfound;
pub mod executor;
pub mod linegraph;
pub mod mat;
pub mod math;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod robust;
pub mod scaffold;
pub mod synth;
pub mod train;
pub mod transient;
