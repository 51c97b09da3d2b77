//! Green-function machinery for non-divergence parabolic equations
//! `∂_t u − a^{ij}(t) D_i D_j u = f` whose coefficients are merely measurable
//! in time (realized here as piecewise-constant paths).
//!
//! The crate provides
//!
//! - exact accumulation `B(s,t) = ∫_s^t A(τ) dτ` of coefficient paths and the
//!   explicit whole-space kernel `Γ = (4π)^{-n/2} det(B)^{-1/2} exp(−(B^{-1}z, z)/4)`
//!   together with analytic spatial derivatives of any order
//!   ([`path`], [`kernel`]),
//! - half-space kernels: the Dirichlet kernel `Γ^D` and the Neumann/oblique
//!   kernel `Γ^N`, via the method of images in the reflection-symmetric class
//!   and via the constructive integral `Γ^N = ∫_{x_n}^∞ D_{y_n} Γ^D dz_n`
//!   in general ([`halfspace`]),
//! - space-time convolution operators applying those kernels to a right-hand
//!   side by quadrature, including the singular-integral split used for second
//!   derivatives ([`convolve`]),
//! - weighted anisotropic norms `‖x_n^μ f‖_{p,q}` (time-outer) and
//!   `|||x_n^μ f|||_{p,q}` (space-outer) with two-level error estimates
//!   ([`norms`]),
//! - a certification lab that fits `(C, σ)` in pointwise Gaussian kernel
//!   bounds and runs coercive-ratio sweeps over the weight exponent μ
//!   ([`estimate`]),
//! - a finite-difference initial-boundary-value solver on bounded cylinders
//!   with oblique boundary conditions, used as a numeric oracle and for
//!   distance-weighted coercivity checks on curved domains ([`solver`]).

pub mod convolve;
pub mod estimate;
pub mod field;
pub mod halfspace;
pub mod kernel;
pub mod norms;
pub mod path;
pub mod quad;
pub mod report;
pub mod solver;
pub mod source;

pub use field::{Axis, Grid, SampledField};
pub use halfspace::{HalfspaceKernelHandle, HsMode};
pub use kernel::{KernelQuery, WholeSpaceKernel};
pub use norms::{Nesting, NormValue, WeightKind, WeightedNormSpec};
pub use path::{AccumulatedMatrix, CoefficientPath};
