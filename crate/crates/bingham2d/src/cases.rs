//! Built-in benchmark configurations: yield-stress channel flow with a
//! closed-form solution, the lid-driven cavity, a Rayleigh-Taylor
//! instability with unstable stratification, and a heavy droplet falling
//! through a light fluid.
//!
//! A case fixes geometry, boundary conditions, body force, and initial
//! data; time stepping and solver knobs stay with the caller. The channel
//! assumes unit plastic viscosity; its profile is exact for the ideal
//! (unregularized) yield-stress model, so discrete errors saturate at the
//! regularization scale once the mesh resolves them.

use crate::fespace::{interpolate_velocity, project_p0, FeSpace};
use crate::forms::{BoundaryConds, SideBc};
use crate::huber::Mat2;
use crate::mesh::{Mesh, Split};

/// One assembled benchmark: everything mesh- and physics-shaped a
/// [`crate::timeloop::Simulation`] needs besides solver parameters.
pub struct Case {
    pub mesh: Mesh,
    pub bcs: BoundaryConds,
    pub gravity: [f64; 2],
    /// Boundary density on inflow parts of Dirichlet facets.
    pub rho_inflow: Option<f64>,
    pub rho0: Box<dyn Fn([f64; 2]) -> f64>,
    pub u0: Box<dyn Fn([f64; 2]) -> [f64; 2]>,
    /// Human-readable caveat (for example: the yield stress immobilizes
    /// the channel completely).
    pub warning: Option<String>,
}

impl Case {
    /// Projects the initial data onto the discrete spaces: elementwise
    /// means for the density, facet normal moments for the velocity.
    pub fn initial_fields(&self, fe: &FeSpace) -> (Vec<f64>, Vec<f64>) {
        let rho0 = project_p0(&self.mesh, fe, &self.rho0);
        let u0 = interpolate_velocity(&self.mesh, fe, &self.u0);
        (rho0, u0)
    }
}

/// Closed-form channel solution driven by a unit pressure drop across the
/// unit square, with plastic viscosity 1 and yield stress `tau_s`: a
/// Poiseuille-type profile with a rigid plug of width `2 tau_s` around the
/// centerline. For `tau_s >= 1/2` the whole channel is rigid.
#[derive(Debug, Clone, Copy)]
pub struct ChannelExact {
    pub tau_s: f64,
}

impl ChannelExact {
    /// Streamwise velocity as a function of the cross-channel coordinate.
    pub fn profile(&self, y: f64) -> f64 {
        let ts = self.tau_s;
        if ts >= 0.5 {
            return 0.0;
        }
        let w = 1.0 - 2.0 * ts;
        let yy = if y <= 0.5 { y } else { 1.0 - y };
        if yy >= 0.5 - ts {
            w * w / 8.0
        } else {
            (w * w - (w - 2.0 * yy) * (w - 2.0 * yy)) / 8.0
        }
    }

    /// Derivative of the profile; continuous across the plug boundary.
    pub fn dprofile(&self, y: f64) -> f64 {
        let ts = self.tau_s;
        if ts >= 0.5 {
            return 0.0;
        }
        let w = 1.0 - 2.0 * ts;
        let (sign, yy) = if y <= 0.5 { (1.0, y) } else { (-1.0, 1.0 - y) };
        if yy >= 0.5 - ts {
            0.0
        } else {
            sign * (w - 2.0 * yy) / 2.0
        }
    }

    pub fn velocity(&self, x: [f64; 2]) -> [f64; 2] {
        [self.profile(x[1]), 0.0]
    }

    /// Symmetric gradient of the exact velocity.
    pub fn sym_grad(&self, x: [f64; 2]) -> Mat2 {
        let half = 0.5 * self.dprofile(x[1]);
        [[0.0, half], [half, 0.0]]
    }

    /// Zero-mean exact pressure for the unit pressure drop.
    pub fn pressure(&self, x: [f64; 2]) -> f64 {
        0.5 - x[0]
    }

    /// `true` when the yield stress holds the whole channel rigid.
    pub fn fully_rigid(&self) -> bool {
        self.tau_s >= 0.5
    }
}

/// Channel flow on the unit square with the exact profile imposed on all
/// four sides, uniform unit density, and no body force; the flow is driven
/// entirely by the boundary data.
pub fn channel(nx: usize, ny: usize, split: Split, tau_s: f64) -> Case {
    let exact = ChannelExact { tau_s };
    let mesh = Mesh::rectangle(0.0, 1.0, 0.0, 1.0, nx, ny, split);
    let side = move || -> SideBc { SideBc::Dirichlet(Box::new(move |x| exact.velocity(x))) };
    let bcs = BoundaryConds { bottom: side(), right: side(), top: side(), left: side() };
    let warning = exact.fully_rigid().then(|| {
        format!(
            "yield stress {tau_s} >= 0.5 holds the whole channel rigid; the exact solution \
             is zero flow"
        )
    });
    Case {
        mesh,
        bcs,
        gravity: [0.0, 0.0],
        rho_inflow: Some(1.0),
        rho0: Box::new(|_| 1.0),
        u0: Box::new(move |x| exact.velocity(x)),
        warning,
    }
}

/// Lid-driven cavity on the unit square: unit lid speed along the top,
/// rest everywhere else, uniform unit density.
pub fn cavity(nx: usize, ny: usize, split: Split) -> Case {
    let mesh = Mesh::rectangle(0.0, 1.0, 0.0, 1.0, nx, ny, split);
    let mut bcs = BoundaryConds::no_slip();
    bcs.top = SideBc::Dirichlet(Box::new(|_| [1.0, 0.0]));
    Case {
        mesh,
        bcs,
        gravity: [0.0, 0.0],
        rho_inflow: None,
        rho0: Box::new(|_| 1.0),
        u0: Box::new(|_| [0.0, 0.0]),
        warning: None,
    }
}

/// Smoothed two-layer density with a cosine-perturbed interface at
/// `y = 0.1 cos(2 pi x)`; `heavy_on_top` selects the unstable
/// stratification.
pub fn rt_density(rho_min: f64, rho_max: f64, heavy_on_top: bool, x: [f64; 2]) -> f64 {
    let mid = 0.5 * (rho_min + rho_max);
    let half = 0.5 * (rho_max - rho_min);
    let s = ((x[1] - 0.1 * (2.0 * std::f64::consts::PI * x[0]).cos()) / 0.01).tanh();
    if heavy_on_top {
        mid + half * s
    } else {
        mid - half * s
    }
}

/// Density ratio realizing a given Atwood number with the light fluid at
/// density 1.
pub fn atwood_densities(atwood: f64) -> (f64, f64) {
    assert!((0.0..1.0).contains(&atwood), "atwood number must be in [0, 1)");
    (1.0, (1.0 + atwood) / (1.0 - atwood))
}

/// Rayleigh-Taylor instability on `(-1/2, 1/2) x (-2, 2)`: heavy fluid on
/// top of light under downward gravity, rigid horizontal walls, free-slip
/// vertical sides, fluid initially at rest. The alternating split keeps
/// the mesh mirror-symmetric about `x = 0` for even `nx`.
pub fn rayleigh_taylor(nx: usize, ny: usize, split: Split, atwood: f64, heavy_on_top: bool) -> Case {
    let (rho_min, rho_max) = atwood_densities(atwood);
    let mesh = Mesh::rectangle(-0.5, 0.5, -2.0, 2.0, nx, ny, split);
    let zero = || -> SideBc { SideBc::Dirichlet(Box::new(|_| [0.0, 0.0])) };
    let bcs = BoundaryConds {
        bottom: zero(),
        top: zero(),
        left: SideBc::FreeSlip,
        right: SideBc::FreeSlip,
    };
    Case {
        mesh,
        bcs,
        gravity: [0.0, -1.0],
        rho_inflow: None,
        rho0: Box::new(move |x| rt_density(rho_min, rho_max, heavy_on_top, x)),
        u0: Box::new(|_| [0.0, 0.0]),
        warning: None,
    }
}

/// Heavy circular droplet (density 15, radius 0.1, centered at
/// `(1, 2.75)`) falling through a unit-density fluid in a closed box
/// `(0, 2) x (0, 3)` under downward gravity.
pub fn droplet(nx: usize, ny: usize, split: Split) -> Case {
    let mesh = Mesh::rectangle(0.0, 2.0, 0.0, 3.0, nx, ny, split);
    Case {
        mesh,
        bcs: BoundaryConds::no_slip(),
        gravity: [0.0, -1.0],
        rho_inflow: None,
        rho0: Box::new(|x| {
            let dx = x[0] - 1.0;
            let dy = x[1] - 2.75;
            if (dx * dx + dy * dy).sqrt() <= 0.1 {
                15.0
            } else {
                1.0
            }
        }),
        u0: Box::new(|_| [0.0, 0.0]),
        warning: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fespace::FeSpace;

    #[test]
    fn channel_profile_peaks_match_closed_forms() {
        // Newtonian limit: parabola with maximum 1/8 at the centerline.
        let newt = ChannelExact { tau_s: 0.0 };
        assert!((newt.profile(0.5) - 0.125).abs() < 1e-15);
        assert!(newt.profile(0.0).abs() < 1e-15 && newt.profile(1.0).abs() < 1e-15);
        // Plug value for tau_s = 1/4: (1 - 1/2)^2 / 8.
        let bing = ChannelExact { tau_s: 0.25 };
        assert!((bing.profile(0.5) - 0.03125).abs() < 1e-15);
        // The plug spans [1/2 - tau_s, 1/2 + tau_s].
        assert!((bing.profile(0.25) - 0.03125).abs() < 1e-15);
        assert!((bing.profile(0.75) - 0.03125).abs() < 1e-15);
        assert!(bing.profile(0.2) < 0.03125);
    }

    #[test]
    fn channel_profile_is_c1_and_mirror_symmetric() {
        let ex = ChannelExact { tau_s: 0.25 };
        for &y in &[0.05, 0.13, 0.24999, 0.3, 0.5, 0.77, 0.99] {
            assert!((ex.profile(y) - ex.profile(1.0 - y)).abs() < 1e-15);
            assert!((ex.dprofile(y) + ex.dprofile(1.0 - y)).abs() < 1e-15);
            // Central-difference check of the derivative away from the
            // plug boundary.
            let h = 1e-6;
            let fd = (ex.profile(y + h) - ex.profile(y - h)) / (2.0 * h);
            assert!((fd - ex.dprofile(y)).abs() < 1e-9, "y = {y}");
        }
        // Continuity of the derivative at the plug boundary.
        assert!(ex.dprofile(0.25 - 1e-12).abs() < 1e-11);
        assert!(ex.dprofile(0.25 + 1e-12).abs() < 1e-11);
    }

    #[test]
    fn rigid_channel_is_flagged_and_motionless() {
        let case = channel(2, 2, Split::Uniform, 0.6);
        assert!(case.warning.is_some());
        assert_eq!((case.u0)([0.3, 0.5]), [0.0, 0.0]);
        let free = channel(2, 2, Split::Uniform, 0.25);
        assert!(free.warning.is_none());
    }

    #[test]
    fn interpolated_channel_flow_is_elementwise_divergence_free() {
        // The exact velocity is divergence free, and BDM interpolation
        // commutes with the divergence, so the interpolant is elementwise
        // divergence free even though the profile is only piecewise smooth.
        let case = channel(4, 4, Split::Uniform, 0.25);
        let fe = FeSpace::new(&case.mesh);
        let (_, u0) = case.initial_fields(&fe);
        for c in 0..case.mesh.n_cells() {
            assert!(fe.velocity_div(&u0, c).abs() < 1e-13);
        }
    }

    #[test]
    fn rt_density_realizes_the_atwood_number() {
        let at = 0.5;
        let (rho_min, rho_max) = atwood_densities(at);
        assert!((rho_max - 3.0).abs() < 1e-15 && (rho_min - 1.0).abs() < 1e-15);
        assert!(((rho_max - rho_min) / (rho_max + rho_min) - at).abs() < 1e-15);
        // Far from the interface the layers are pure, and heavy_on_top
        // puts the heavy fluid above.
        assert!((rt_density(rho_min, rho_max, true, [0.2, 1.9]) - rho_max).abs() < 1e-12);
        assert!((rt_density(rho_min, rho_max, true, [0.2, -1.9]) - rho_min).abs() < 1e-12);
        assert!((rt_density(rho_min, rho_max, false, [0.2, 1.9]) - rho_min).abs() < 1e-12);
        // On the perturbed interface the density is the mean.
        let x = 0.3;
        let y = 0.1 * (2.0 * std::f64::consts::PI * x).cos();
        let mid = 0.5 * (rho_min + rho_max);
        assert!((rt_density(rho_min, rho_max, true, [x, y]) - mid).abs() < 1e-12);
    }

    #[test]
    fn rt_case_is_mirror_symmetric_in_its_initial_density() {
        let case = rayleigh_taylor(8, 16, Split::Alternating, 0.5, true);
        let fe = FeSpace::new(&case.mesh);
        let (rho0, u0) = case.initial_fields(&fe);
        assert!(u0.iter().all(|&v| v == 0.0));
        // Mirror x -> -x maps quad (i, j) to (nx - 1 - i, j); the split
        // parity flips with it, so the lower triangle maps to the lower
        // triangle and local indices are preserved.
        let (nx, ny) = (8, 16);
        for j in 0..ny {
            for i in 0..nx {
                for t in 0..2 {
                    let c = 2 * (j * nx + i) + t;
                    let cm = 2 * (j * nx + (nx - 1 - i)) + t;
                    let xc = case.mesh.centroid[c];
                    let xm = case.mesh.centroid[cm];
                    assert!((xc[0] + xm[0]).abs() < 1e-14 && (xc[1] - xm[1]).abs() < 1e-14);
                    assert!(
                        (rho0[c] - rho0[cm]).abs() < 1e-12,
                        "cells {c} and {cm}: {} vs {}",
                        rho0[c],
                        rho0[cm]
                    );
                }
            }
        }
    }

    #[test]
    fn droplet_density_is_heavy_inside_the_disc() {
        let case = droplet(4, 6, Split::Uniform);
        assert_eq!((case.rho0)([1.0, 2.75]), 15.0);
        assert_eq!((case.rho0)([1.0, 2.6]), 1.0);
        assert_eq!((case.rho0)([0.5, 0.5]), 1.0);
    }
}
