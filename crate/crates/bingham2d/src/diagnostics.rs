//! Solution-quality measurements: divergence norms, active-set
//! classification, errors against reference solutions, convergence rates,
//! and the discrete stability monitors tracked by the time loop.
//!
//! Two classifications of the rigid (unyielded) region are provided. The
//! shear-rate criterion marks a cell active when `gamma |D u| >= tau_s`,
//! matching the branch switch inside the regularized stress. The von Mises
//! criterion marks a cell active when the deviatoric part of the
//! regularized stress reaches the yield stress, `|dev tau| >= tau_s`. The
//! second set contains the first; they differ exactly on cells with
//! `tau_s / (2 eta + gamma) <= |D u| < tau_s / gamma`.

use crate::fespace::{FeSpace, NQ_EDGE, NQ_TRI};
use crate::huber::{tensor_mag, Huber, Mat2};
use crate::mesh::Mesh;

/// Largest elementwise |div u| over the mesh (the divergence of a BDM1
/// field is constant per cell).
pub fn div_inf_norm(fe: &FeSpace, u: &[f64]) -> f64 {
    (0..fe.dofs.n_cells)
        .map(|c| fe.velocity_div(u, c).abs())
        .fold(0.0, f64::max)
}

/// Per-cell shear-rate activity: `gamma |D u| >= tau_s` (ties active).
pub fn shear_active_flags(fe: &FeSpace, hub: &Huber, u: &[f64]) -> Vec<bool> {
    (0..fe.dofs.n_cells)
        .map(|c| hub.active(&fe.velocity_sym_grad(u, c)))
        .collect()
}

/// Per-cell von Mises activity: the deviatoric regularized stress reaches
/// the yield stress.
pub fn von_mises_active_flags(fe: &FeSpace, hub: &Huber, u: &[f64]) -> Vec<bool> {
    (0..fe.dofs.n_cells)
        .map(|c| {
            let tau = hub.stress(&fe.velocity_sym_grad(u, c));
            let tr = 0.5 * (tau[0][0] + tau[1][1]);
            let dev = [[tau[0][0] - tr, tau[0][1]], [tau[1][0], tau[1][1] - tr]];
            tensor_mag(&dev) >= hub.tau_s
        })
        .collect()
}

/// Area fraction of flagged cells.
pub fn area_fraction(mesh: &Mesh, flags: &[bool]) -> f64 {
    let marked: f64 = flags.iter().zip(&mesh.area).filter(|(f, _)| **f).map(|(_, a)| a).sum();
    marked / mesh.area.iter().sum::<f64>()
}

/// Area fraction of cells active by the shear-rate criterion.
pub fn active_fraction_shear(mesh: &Mesh, fe: &FeSpace, hub: &Huber, u: &[f64]) -> f64 {
    area_fraction(mesh, &shear_active_flags(fe, hub, u))
}

/// Area fraction of cells active by the von Mises criterion.
pub fn active_fraction_von_mises(mesh: &Mesh, fe: &FeSpace, hub: &Huber, u: &[f64]) -> f64 {
    area_fraction(mesh, &von_mises_active_flags(fe, hub, u))
}

/// Squared mesh-dependent H1 error of a velocity against a continuous
/// reference: elementwise L2 and symmetric-gradient terms plus facet jump
/// terms `(1/h_e) |[u]|^2` (the reference is continuous, so interior jumps
/// of the error are jumps of `u` alone; on Dirichlet facets the jump is
/// `u - uex`).
pub fn velocity_error_h1_sq(
    mesh: &Mesh,
    fe: &FeSpace,
    u: &[f64],
    uex: &dyn Fn([f64; 2]) -> [f64; 2],
    duex: &dyn Fn([f64; 2]) -> Mat2,
) -> f64 {
    let mut total = 0.0;
    for c in 0..mesh.n_cells() {
        let det = 2.0 * mesh.area[c];
        let du = fe.velocity_sym_grad(u, c);
        for q in 0..NQ_TRI {
            let x = fe.vol_pts[c][q];
            let uh = fe.eval_velocity(mesh, u, c, x);
            let ue = uex(x);
            let de = duex(x);
            let mut v = (uh[0] - ue[0]).powi(2) + (uh[1] - ue[1]).powi(2);
            for r in 0..2 {
                for s in 0..2 {
                    v += (du[r][s] - de[r][s]).powi(2);
                }
            }
            total += det * fe.tri.w[q] * v;
        }
    }
    for (e, f) in mesh.facets.iter().enumerate() {
        let cp = f.cell_plus;
        let mut jump_sq = 0.0;
        for q in 0..NQ_EDGE {
            let x = fe.facet_pts[e][q];
            let up = fe.eval_velocity(mesh, u, cp, x);
            let other = match f.cell_minus {
                Some(cm) => fe.eval_velocity(mesh, u, cm, x),
                None => uex(x),
            };
            let j = [up[0] - other[0], up[1] - other[1]];
            jump_sq += fe.edge.w[q] * f.length * (j[0] * j[0] + j[1] * j[1]);
        }
        total += jump_sq / f.length;
    }
    total
}

/// Squared L2 error of a piecewise-constant pressure against a reference.
pub fn pressure_error_l2_sq(
    mesh: &Mesh,
    fe: &FeSpace,
    p: &[f64],
    pex: &dyn Fn([f64; 2]) -> f64,
) -> f64 {
    let mut total = 0.0;
    for c in 0..mesh.n_cells() {
        let det = 2.0 * mesh.area[c];
        for q in 0..NQ_TRI {
            let x = fe.vol_pts[c][q];
            total += det * fe.tri.w[q] * (p[c] - pex(x)).powi(2);
        }
    }
    total
}

/// Observed convergence rate between two (error, mesh size) pairs.
pub fn rate(e_coarse: f64, e_fine: f64, h_coarse: f64, h_fine: f64) -> f64 {
    (e_coarse / e_fine).ln() / (h_coarse / h_fine).ln()
}

/// Squared L2 norm of a piecewise-constant field.
pub fn l2_norm_p0_sq(mesh: &Mesh, vals: &[f64]) -> f64 {
    vals.iter().zip(&mesh.area).map(|(v, a)| a * v * v).sum()
}

/// Density stability monitor `|rho_n|^2 + |2 rho_n - rho_nm1|^2`; the
/// two-level transport scheme makes this nonincreasing in time.
pub fn density_energy(mesh: &Mesh, rho: &[f64], rho_prev: &[f64]) -> f64 {
    let two_minus: Vec<f64> =
        rho.iter().zip(rho_prev).map(|(a, b)| 2.0 * a - b).collect();
    l2_norm_p0_sq(mesh, rho) + l2_norm_p0_sq(mesh, &two_minus)
}

/// Squared L2 norm of `sqrt(rho) u` (density constant per cell, velocity
/// linear, so the integrand is integrated exactly).
pub fn weighted_velocity_l2_sq(mesh: &Mesh, fe: &FeSpace, rho: &[f64], u: &[f64]) -> f64 {
    let mut total = 0.0;
    for c in 0..mesh.n_cells() {
        let det = 2.0 * mesh.area[c];
        let r = rho[c].max(0.0);
        for q in 0..NQ_TRI {
            let v = fe.eval_velocity(mesh, u, c, fe.vol_pts[c][q]);
            total += det * fe.tri.w[q] * r * (v[0] * v[0] + v[1] * v[1]);
        }
    }
    total
}

/// Momentum stability monitor
/// `|sigma u|^2 + |2 sigma u - sigma_prev u_prev|^2` with `sigma = sqrt(rho)`.
pub fn momentum_energy(
    mesh: &Mesh,
    fe: &FeSpace,
    rho: &[f64],
    u: &[f64],
    rho_prev: &[f64],
    u_prev: &[f64],
) -> f64 {
    let mut total = weighted_velocity_l2_sq(mesh, fe, rho, u);
    for c in 0..mesh.n_cells() {
        let det = 2.0 * mesh.area[c];
        let s = rho[c].max(0.0).sqrt();
        let sp = rho_prev[c].max(0.0).sqrt();
        for q in 0..NQ_TRI {
            let x = fe.vol_pts[c][q];
            let v = fe.eval_velocity(mesh, u, c, x);
            let vp = fe.eval_velocity(mesh, u_prev, c, x);
            let d = [2.0 * s * v[0] - sp * vp[0], 2.0 * s * v[1] - sp * vp[1]];
            total += det * fe.tri.w[q] * (d[0] * d[0] + d[1] * d[1]);
        }
    }
    total
}

/// L2 norm of a velocity.
pub fn velocity_l2(mesh: &Mesh, fe: &FeSpace, u: &[f64]) -> f64 {
    let ones = vec![1.0; mesh.n_cells()];
    weighted_velocity_l2_sq(mesh, fe, &ones, u).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fespace::interpolate_velocity;
    use crate::mesh::Split;

    #[test]
    fn interpolated_linear_field_has_zero_error() {
        let mesh = Mesh::rectangle(0.0, 1.0, 0.0, 1.0, 3, 3, Split::Uniform);
        let fe = FeSpace::new(&mesh);
        let g = |x: [f64; 2]| [0.2 * x[0] - 0.7 * x[1] + 0.1, 0.4 * x[0] + 0.3 * x[1]];
        let dg = |_x: [f64; 2]| [[0.2, -0.15], [-0.15, 0.3]];
        let u = interpolate_velocity(&mesh, &fe, &g);
        let err = velocity_error_h1_sq(&mesh, &fe, &u, &g, &dg);
        assert!(err < 1e-24, "err = {err:.3e}");
    }

    #[test]
    fn error_norm_detects_each_component() {
        // Against the zero reference the norm of a constant field u = (1, 0)
        // is known in closed form: L2 part 1, gradient part 0, and jump
        // parts only from the boundary, sum over boundary facets of
        // (1/h_e) * h_e * 1 = number of boundary facets.
        let mesh = Mesh::rectangle(0.0, 1.0, 0.0, 1.0, 2, 2, Split::Uniform);
        let fe = FeSpace::new(&mesh);
        let g = |x: [f64; 2]| {
            let _ = x;
            [1.0, 0.0]
        };
        let u = interpolate_velocity(&mesh, &fe, &g);
        let zero = |_x: [f64; 2]| [0.0, 0.0];
        let dzero = |_x: [f64; 2]| [[0.0, 0.0], [0.0, 0.0]];
        let err = velocity_error_h1_sq(&mesh, &fe, &u, &zero, &dzero);
        let n_bnd = mesh.facets.iter().filter(|f| f.is_boundary()).count() as f64;
        assert!((err - (1.0 + n_bnd)).abs() < 1e-12, "err = {err}");
    }

    #[test]
    fn rate_recovers_manufactured_order() {
        let e = |h: f64| 3.7 * h.powf(2.2929);
        let r = rate(e(0.25), e(0.125), 0.25, 0.125);
        assert!((r - 2.2929).abs() < 1e-12);
    }

    #[test]
    fn von_mises_set_contains_shear_set_and_differs_on_the_band() {
        let mesh = Mesh::rectangle(0.0, 1.0, 0.0, 1.0, 4, 4, Split::Uniform);
        let fe = FeSpace::new(&mesh);
        let hub = Huber { eta: 1.0, tau_s: 2.5, gamma: 10.0 };
        // Shear field u = (a y, 0): |D u| = a / 2. Pick a so that |D u|
        // sits inside [tau_s / (2 eta + gamma), tau_s / gamma): von Mises
        // active, shear-rate inactive.
        let band_mag = 0.5 * (hub.tau_s / (2.0 * hub.eta + hub.gamma) + hub.tau_s / hub.gamma);
        let a = 2.0 * band_mag;
        let u = interpolate_velocity(&mesh, &fe, &|x| [a * x[1], 0.0]);
        let shear = shear_active_flags(&fe, &hub, &u);
        let vm = von_mises_active_flags(&fe, &hub, &u);
        assert!(shear.iter().all(|f| !f));
        assert!(vm.iter().all(|f| *f));
        // Scaling the field up past the branch point makes both criteria
        // agree, and the von Mises set always contains the shear set.
        let u2 = interpolate_velocity(&mesh, &fe, &|x| [4.0 * hub.tau_s / hub.gamma * x[1], 0.0]);
        let shear2 = shear_active_flags(&fe, &hub, &u2);
        let vm2 = von_mises_active_flags(&fe, &hub, &u2);
        for c in 0..mesh.n_cells() {
            assert!(shear2[c] && vm2[c]);
            assert!(vm[c] || !shear[c]);
        }
        assert!((active_fraction_von_mises(&mesh, &fe, &hub, &u) - 1.0).abs() < 1e-15);
        assert!(active_fraction_shear(&mesh, &fe, &hub, &u).abs() < 1e-15);
    }

    #[test]
    fn energy_monitors_match_hand_integration() {
        let mesh = Mesh::rectangle(0.0, 1.0, 0.0, 1.0, 2, 2, Split::Uniform);
        let fe = FeSpace::new(&mesh);
        let n_c = mesh.n_cells();
        let rho = vec![4.0; n_c];
        let rho_prev = vec![1.0; n_c];
        // |rho|^2 = 16, |2 rho - rho_prev|^2 = 49 on the unit square.
        assert!((density_energy(&mesh, &rho, &rho_prev) - 65.0).abs() < 1e-12);
        let u = interpolate_velocity(&mesh, &fe, &|_| [1.0, 0.0]);
        let up = interpolate_velocity(&mesh, &fe, &|_| [0.0, 3.0]);
        // sigma = 2, sigma_prev = 1: |2u|^2 = 4 and |(4, -3)|^2 = 25.
        let m = momentum_energy(&mesh, &fe, &rho, &u, &rho_prev, &up);
        assert!((m - 29.0).abs() < 1e-12, "m = {m}");
        assert!((velocity_l2(&mesh, &fe, &u) - 1.0).abs() < 1e-14);
    }
}
