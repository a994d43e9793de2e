//! Finite-element solver for unsteady, incompressible Bingham flow with
//! variable density on 2D triangulated rectangles.
//!
//! The discretization is divergence-conforming discontinuous Galerkin:
//!
//! - velocity in BDM1 (H(div)-conforming, 2 edge-moment dofs per facet),
//! - pressure, density, and the plastic-stress multiplier in cellwise
//!   constants (the multiplier is a 2x2 tensor per cell),
//! - viscous terms through a symmetric interior penalty form whose viscosity
//!   coefficient comes from a Huber (bi-viscosity) regularization of the
//!   Bingham stress,
//! - convective terms through upwind fluxes in skew-symmetry-preserving form,
//! - tangential Dirichlet data imposed weakly (Nitsche), normal data imposed
//!   strongly through the BDM facet dofs,
//! - BDF2 time stepping (backward Euler startup) on a sqrt(density)-weighted
//!   momentum form that preserves the discrete kinetic-energy identity,
//! - a semismooth Newton method for the coupled nonlinear system at each
//!   step, solved by a sparse direct LU with pivoting.
//!
//! Module map:
//!
//! - [`mesh`]: structured triangulations of rectangles, facet connectivity.
//! - [`quadrature`]: simplicial volume rules and facet Gauss rules.
//! - [`fespace`]: BDM1/P0 spaces, interpolation, basis caches.
//! - [`huber`]: the regularized stress, its effective viscosity, and the
//!   active-set classifier.
//! - [`forms`]: residual and Jacobian assembly of the coupled system plus
//!   standalone evaluations of the individual forms.
//! - [`ssn`]: the semismooth Newton driver and the verified linear solver.
//! - [`timeloop`]: BDF2/BE stepping, checkpoints, the simulation clock.
//! - [`cases`]: built-in benchmark definitions (channel, cavity,
//!   Rayleigh-Taylor, droplet).
//! - [`diagnostics`]: divergence / error norms, convergence rates, active
//!   fractions, energy monitors.
//! - [`io`]: config parsing, VTK/CSV writers, checkpoints, the convergence
//!   study driver.

pub mod cases;
pub mod diagnostics;
pub mod fespace;
pub mod forms;
pub mod huber;
pub mod io;
pub mod mesh;
pub mod quadrature;
pub mod ssn;
pub mod timeloop;
