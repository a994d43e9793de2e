//! Residual and Jacobian assembly for the coupled system, plus standalone
//! evaluations of the individual forms used by the verification tests.
//!
//! Unknowns per time step: density `rho` (cellwise constant), velocity `u`
//! (BDM1 facet moments), pressure `p` (cellwise constant, zero mean),
//! stress multiplier `z` (cellwise constant 2x2 tensor), and the scalar
//! `lambda` enforcing the pressure mean. The residual rows are:
//!
//! - density: BDF2/backward-Euler time term plus the upwinded transport
//!   form `c1`;
//! - velocity: the sqrt(density)-weighted time term, the viscous form
//!   written through the multiplier (`nu Du + z` with `nu = 2 eta`,
//!   interior-penalty consistency and symmetrization with the effective
//!   viscosity of the strain jump, penalty `a0 / h`),
//!   skew-symmetrized upwinded convection `c2`, the pressure coupling
//!   `-(p, div v)`, and the body force `-(rho g, v)`;
//! - pressure: `-(q, div u) + lambda (q, 1)`;
//! - multiplier: `gamma tau_s (Du, w) - (|Du|_g z, w)`, so that at
//!   convergence `z = gamma tau_s Du / |Du|_g` and `nu Du + z` equals the
//!   Huber stress exactly;
//! - lambda: `(p, 1)`.
//!
//! Facet conventions follow [`crate::mesh`]: jumps are `K+` minus `K-`,
//! means are arithmetic, and the normal leaves `K+`. On Dirichlet boundary
//! facets the jump of `u` is `u - g` and means are one-sided; free-slip
//! facets carry no facet terms at all (their normal moments are constrained
//! to zero and the tangential traction is natural). Normal-component traces
//! of the velocity on a facet are read directly from that facet's two dofs,
//! which makes their single-valuedness explicit.
//!
//! The Jacobian is the exact derivative of the residual wherever the
//! residual is differentiable; at the kinks of `|.|`, `min(., 0)`, and the
//! active-set switch it uses the one-sided choice `sgn(0) = 0`,
//! `d min(s, 0) = [s < 0]`, and ties-active for the plateau. The
//! finite-difference tests probe directions away from every kink.

use crate::fespace::{normal_moments, FeSpace, NQ_EDGE, NQ_TRI};
use crate::huber::{frob_inner, tensor_mag, Huber, Mat2};
use crate::mesh::{Mesh, Side};
use faer::sparse::Triplet;

/// Strain magnitudes below this are treated as exactly zero when they
/// appear in denominators of Jacobian terms.
pub const DU_EPS: f64 = 1e-12;

pub type Trip = Triplet<usize, usize, f64>;

/// Boundary condition on one side of the rectangle.
pub enum SideBc {
    /// `u = g`: normal moments constrained strongly, tangential part
    /// imposed weakly through the interior-penalty boundary terms.
    Dirichlet(Box<dyn Fn([f64; 2]) -> [f64; 2]>),
    /// `u . n = 0` strongly, tangential traction free.
    FreeSlip,
}

pub struct BoundaryConds {
    pub bottom: SideBc,
    pub right: SideBc,
    pub top: SideBc,
    pub left: SideBc,
}

impl BoundaryConds {
    pub fn get(&self, s: Side) -> &SideBc {
        match s {
            Side::Bottom => &self.bottom,
            Side::Right => &self.right,
            Side::Top => &self.top,
            Side::Left => &self.left,
        }
    }

    /// Homogeneous Dirichlet data on all four sides.
    pub fn no_slip() -> Self {
        BoundaryConds {
            bottom: SideBc::Dirichlet(Box::new(|_| [0.0, 0.0])),
            right: SideBc::Dirichlet(Box::new(|_| [0.0, 0.0])),
            top: SideBc::Dirichlet(Box::new(|_| [0.0, 0.0])),
            left: SideBc::Dirichlet(Box::new(|_| [0.0, 0.0])),
        }
    }
}

/// Strongly constrained velocity dofs (boundary normal moments) with the
/// values they are pinned to.
pub struct Constraints {
    /// `mask[i]` marks global dof `i` as constrained.
    pub mask: Vec<bool>,
    /// Target value for constrained dofs, zero elsewhere.
    pub target: Vec<f64>,
}

/// Builds the strong velocity constraints for a boundary-condition set:
/// both normal moments of every boundary facet, set to the moments of `g`
/// (Dirichlet) or zero (free slip).
pub fn velocity_constraints(mesh: &Mesh, fe: &FeSpace, bcs: &BoundaryConds) -> Constraints {
    let d = fe.dofs;
    let mut mask = vec![false; d.n_dofs()];
    let mut target = vec![0.0; d.n_dofs()];
    for (e, f) in mesh.facets.iter().enumerate() {
        let Some(side) = f.boundary else { continue };
        let m = match bcs.get(side) {
            SideBc::Dirichlet(g) => normal_moments(mesh, fe, e, g),
            SideBc::FreeSlip => [0.0, 0.0],
        };
        for k in 0..2 {
            mask[d.u(e, k)] = true;
            target[d.u(e, k)] = m[k];
        }
    }
    Constraints { mask, target }
}

/// Viscosity weighting the facet symmetrization term of the split viscous
/// form. The consistency term always carries the true split stress
/// `(2 eta Du + z) n`; only the transposed term `{w D(v) n_e} . [u]` has a
/// selectable weight `w`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FacetWeight {
    /// Constant Newtonian viscosity `2 eta`. The weighted term is
    /// proportional to `[u]`, which vanishes with the approximation error,
    /// so the form stays consistent; the weight contributes nothing to the
    /// Jacobian, which keeps every facet row smooth across the Huber kink.
    #[default]
    Nu,
    /// `mu(|[D_h u]|_g)`, the Huber viscosity of the strain jump. Strain
    /// jumps are `O(h)`-small, so entire bands of facets sit at the kink of
    /// `mu`, where the derivative has a jump of slope `gamma`; measured on
    /// the channel benchmark this stalls the Newton iteration at yield
    /// stresses of practical size. Kept for experiments.
    JumpMu,
    /// `mu` of the mean of the one-sided regularized strain norms. Same
    /// kink pathology as [`FacetWeight::JumpMu`]; kept for experiments.
    MeanMu,
}

/// Data for one nonlinear solve (one time step).
pub struct Problem<'a> {
    pub mesh: &'a Mesh,
    pub fe: &'a FeSpace,
    pub hub: Huber,
    pub dt: f64,
    /// `false`: backward Euler from `(rho_n, u_n)`; `true`: BDF2, which
    /// also uses `(rho_nm1, u_nm1)`.
    pub bdf2: bool,
    pub rho_n: &'a [f64],
    pub u_n: &'a [f64],
    pub rho_nm1: &'a [f64],
    pub u_nm1: &'a [f64],
    /// Body force is `rho * gravity`.
    pub gravity: [f64; 2],
    pub bcs: &'a BoundaryConds,
    /// Boundary density seen by inflow (`g . n < 0`) parts of Dirichlet
    /// facets; `None` disables the boundary transport term.
    pub rho_inflow: Option<f64>,
    /// Interior-penalty scale; the penalty is `a0 / h_e`. In the
    /// multiplier-split viscous form the plastic stress entering the
    /// residual is bounded by `tau_s`, so the penalty only has to dominate
    /// the Newtonian viscosity `2 eta`, not the bi-viscosity slope
    /// `2 eta + gamma`; scaling it by the latter was measured to pollute
    /// the piecewise-constant pressure with `O(gamma h^2)` oscillations.
    pub penalty_a0: f64,
    /// Viscosity weighting the facet symmetrization term.
    pub facet_weight: FacetWeight,
    /// Densities are clamped from below by this value before taking square
    /// roots during iterations.
    pub rho_guard: f64,
}

impl<'a> Problem<'a> {
    /// Time-discretization coefficients `(c0, a, b, c)` in
    /// `(1 / (c0 dt)) (a y - b y_n + c y_nm1)`.
    pub fn coeffs(&self) -> (f64, f64, f64, f64) {
        if self.bdf2 {
            (2.0, 3.0, 4.0, 1.0)
        } else {
            (1.0, 1.0, 1.0, 0.0)
        }
    }

    /// Guarded square root of a density and its derivative.
    fn sigma(&self, rho: f64) -> (f64, f64) {
        let r = rho.max(self.rho_guard);
        let s = r.sqrt();
        let ds = if rho > self.rho_guard { 0.5 / s } else { 0.0 };
        (s, ds)
    }

    /// Penalty coefficient before division by `h_e`.
    fn penalty(&self) -> f64 {
        self.penalty_a0
    }
}

/// Reads the stress multiplier of cell `c` from the z block.
pub fn z_at(zs: &[f64], c: usize) -> Mat2 {
    [
        [zs[4 * c], zs[4 * c + 1]],
        [zs[4 * c + 2], zs[4 * c + 3]],
    ]
}

/// Stress multiplier consistent with a velocity,
/// `z = gamma tau_s D u / |D u|_gamma`, used to seed the first Newton
/// solve. The regularized norm is bounded below by `tau_s`, so the ratio
/// is well defined whenever `tau_s > 0`; for `tau_s = 0` the multiplier
/// vanishes identically.
pub fn consistent_multiplier(fe: &FeSpace, hub: &Huber, u: &[f64]) -> Vec<f64> {
    let n_c = fe.dofs.n_cells;
    let mut zs = vec![0.0; 4 * n_c];
    if hub.tau_s <= 0.0 {
        return zs;
    }
    for c in 0..n_c {
        let du = fe.velocity_sym_grad(u, c);
        let scale = hub.gamma * hub.tau_s / hub.norm(&du);
        for r in 0..2 {
            for s in 0..2 {
                zs[4 * c + 2 * r + s] = scale * du[r][s];
            }
        }
    }
    zs
}

fn dot2(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn matvec(m: &Mat2, v: [f64; 2]) -> [f64; 2] {
    [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
}

/// Derivative of `s -> mu(max(tau_s, gamma s))` at `s = |A|`, divided by
/// `s`, as the coefficient tensor of `A : dA`; zero on the plateau and for
/// `s < DU_EPS`.
fn dmu_coeff(hub: &Huber, a: &Mat2) -> Mat2 {
    let s = tensor_mag(a);
    if hub.tau_s <= 0.0 || s < DU_EPS || hub.gamma * s < hub.tau_s {
        return [[0.0; 2]; 2];
    }
    // Active branch: mu = 2 eta + tau_s / s, d mu / d s = -tau_s / s^2,
    // d s / d A = A / (2 s) for s^2 = A:A / 2.
    let c = -hub.tau_s / (2.0 * s * s * s);
    [
        [c * a[0][0], c * a[0][1]],
        [c * a[1][0], c * a[1][1]],
    ]
}

/// Effective viscosity used by the symmetrization term on a facet, and its
/// derivative coefficients with respect to the two one-sided strains.
/// `du_m` is `None` on boundary facets (one-sided evaluation).
fn facet_mu(hub: &Huber, weight: FacetWeight, du_p: &Mat2, du_m: Option<&Mat2>) -> (f64, Mat2, Mat2) {
    let zero = [[0.0; 2]; 2];
    match (weight, du_m) {
        (FacetWeight::Nu, _) => (2.0 * hub.eta, zero, zero),
        (_, None) => {
            let mu = hub.mu_at(du_p);
            let d = dmu_coeff(hub, du_p);
            (mu, d, zero)
        }
        (FacetWeight::JumpMu, Some(dm)) => {
            // Viscosity of the strain jump.
            let jump = [
                [du_p[0][0] - dm[0][0], du_p[0][1] - dm[0][1]],
                [du_p[1][0] - dm[1][0], du_p[1][1] - dm[1][1]],
            ];
            let mu = hub.mu_at(&jump);
            let d = dmu_coeff(hub, &jump);
            let dp = d;
            let dmn = [
                [-d[0][0], -d[0][1]],
                [-d[1][0], -d[1][1]],
            ];
            (mu, dp, dmn)
        }
        (FacetWeight::MeanMu, Some(dm)) => {
            // Viscosity of the mean of the one-sided regularized norms.
            let tp = hub.norm(du_p);
            let tm = hub.norm(dm);
            let te = 0.5 * (tp + tm);
            let mu = hub.mu(te);
            if hub.tau_s <= 0.0 {
                return (mu, zero, zero);
            }
            let dmu_dt = -hub.tau_s * hub.gamma / (te * te);
            let side = |du: &Mat2| -> Mat2 {
                let s = tensor_mag(du);
                if s < DU_EPS || hub.gamma * s < hub.tau_s {
                    return [[0.0; 2]; 2];
                }
                let c = dmu_dt * 0.5 * hub.gamma / (2.0 * s);
                [
                    [c * du[0][0], c * du[0][1]],
                    [c * du[1][0], c * du[1][1]],
                ]
            };
            (mu, side(du_p), side(dm))
        }
    }
}

/// Assembles the residual and, optionally, the exact Jacobian triplets of
/// the coupled system at state `x`. Rows of constrained dofs are replaced
/// by `x_i - target_i` (identity rows in the Jacobian).
pub fn assemble(
    p: &Problem,
    cons: &Constraints,
    x: &[f64],
    want_jacobian: bool,
) -> (Vec<f64>, Option<Vec<Trip>>) {
    let mesh = p.mesh;
    let fe = p.fe;
    let d = fe.dofs;
    let n = d.n_dofs();
    assert_eq!(x.len(), n, "state length mismatch");

    let (c0, ca, cb, cc) = p.coeffs();
    let idt = 1.0 / (c0 * p.dt);
    let nu = 2.0 * p.hub.eta;
    let pen = p.penalty();
    let gts = p.hub.gamma * p.hub.tau_s;

    let rho = &x[d.rho_range()];
    let u = &x[d.u_range()];
    let pr = &x[d.p_range()];
    let zs = &x[d.z_range()];
    let lam = x[d.lambda()];

    let mut r = vec![0.0; n];
    let mut trips: Option<Vec<Trip>> = if want_jacobian {
        Some(Vec::with_capacity(64 * mesh.n_cells() + 300 * mesh.n_facets()))
    } else {
        None
    };
    // Filters constrained rows; their identity entries are added at the end.
    let push = |trips: &mut Option<Vec<Trip>>, row: usize, col: usize, v: f64| {
        if let Some(t) = trips.as_mut() {
            if !cons.mask[row] && v != 0.0 {
                t.push(Triplet::new(row, col, v));
            }
        }
    };

    // Cellwise iterate quantities (all constant per cell).
    let n_c = mesh.n_cells();
    let mut du_cells: Vec<Mat2> = Vec::with_capacity(n_c);
    let mut gradu_cells: Vec<Mat2> = Vec::with_capacity(n_c);
    let mut divu_cells: Vec<f64> = Vec::with_capacity(n_c);
    for c in 0..n_c {
        du_cells.push(fe.velocity_sym_grad(u, c));
        gradu_cells.push(fe.velocity_grad(u, c));
        divu_cells.push(fe.velocity_div(u, c));
    }

    // Volume contributions.
    for c in 0..n_c {
        let cb_ = &fe.cells[c];
        let area = mesh.area[c];
        let rc = rho[c];
        let (sig, dsig) = p.sigma(rc);
        let sig_n = p.rho_n[c].max(p.rho_guard).sqrt();
        let sig_nm1 = if p.bdf2 { p.rho_nm1[c].max(p.rho_guard).sqrt() } else { 0.0 };
        let du = du_cells[c];
        let gu = gradu_cells[c];
        let divu = divu_cells[c];
        let zc = z_at(zs, c);
        let rowu = |k: usize| d.u_offset() + cb_.ublock[k];

        // Density time term.
        {
            let rr = d.rho(c);
            let hist = cb * p.rho_n[c] - if p.bdf2 { cc * p.rho_nm1[c] } else { 0.0 };
            r[rr] += idt * area * (ca * rc - hist);
            push(&mut trips, rr, rr, idt * area * ca);
        }

        // Momentum: time, convection volume part, body force (per
        // quadrature point), viscous volume part, pressure coupling
        // (constant integrands).
        for q in 0..NQ_TRI {
            let wq = fe.tri.w[q] * 2.0 * area;
            // Iterate and history velocities at the quadrature point.
            let mut uq = [0.0; 2];
            let mut unq = [0.0; 2];
            let mut unm1q = [0.0; 2];
            for k in 0..6 {
                let v = cb_.vol_val[q][k];
                let a = u[cb_.ublock[k]];
                uq[0] += a * v[0];
                uq[1] += a * v[1];
                let an = p.u_n[cb_.ublock[k]];
                unq[0] += an * v[0];
                unq[1] += an * v[1];
                if p.bdf2 {
                    let am = p.u_nm1[cb_.ublock[k]];
                    unm1q[0] += am * v[0];
                    unm1q[1] += am * v[1];
                }
            }
            // History part H = b sig_n u_n - c sig_nm1 u_nm1.
            let hq = [
                cb * sig_n * unq[0] - cc * sig_nm1 * unm1q[0],
                cb * sig_n * unq[1] - cc * sig_nm1 * unm1q[1],
            ];
            // Convective derivative (grad u) u + (div u / 2) u.
            let conv = [
                gu[0][0] * uq[0] + gu[0][1] * uq[1] + 0.5 * divu * uq[0],
                gu[1][0] * uq[0] + gu[1][1] * uq[1] + 0.5 * divu * uq[1],
            ];
            for k in 0..6 {
                let vk = cb_.vol_val[q][k];
                let rk = rowu(k);
                r[rk] += wq
                    * (idt * (ca * sig * sig * dot2(uq, vk) - sig * dot2(hq, vk))
                        + rc * dot2(conv, vk)
                        - rc * dot2(p.gravity, vk));
                if trips.is_some() {
                    // d / d rho_c.
                    let drho = idt * (ca * 2.0 * sig * dsig * dot2(uq, vk) - dsig * dot2(hq, vk))
                        + dot2(conv, vk)
                        - dot2(p.gravity, vk);
                    push(&mut trips, rk, d.rho(c), wq * drho);
                    // d / d u_j.
                    for j in 0..6 {
                        let vj = cb_.vol_val[q][j];
                        let gj = &cb_.grad[j];
                        let dconv = [
                            gj[0][0] * uq[0] + gj[0][1] * uq[1]
                                + gu[0][0] * vj[0] + gu[0][1] * vj[1]
                                + 0.5 * (cb_.div[j] * uq[0] + divu * vj[0]),
                            gj[1][0] * uq[0] + gj[1][1] * uq[1]
                                + gu[1][0] * vj[0] + gu[1][1] * vj[1]
                                + 0.5 * (cb_.div[j] * uq[1] + divu * vj[1]),
                        ];
                        let val = idt * ca * sig * sig * dot2(vj, vk) + rc * dot2(dconv, vk);
                        push(&mut trips, rk, d.u_offset() + cb_.ublock[j], wq * val);
                    }
                }
            }
        }

        // Viscous volume term (nu Du + z) : Dv and pressure coupling
        // -(p, div v); both integrands are constant.
        for k in 0..6 {
            let rk = rowu(k);
            let dv = &cb_.sym[k];
            let stress = [
                [nu * du[0][0] + zc[0][0], nu * du[0][1] + zc[0][1]],
                [nu * du[1][0] + zc[1][0], nu * du[1][1] + zc[1][1]],
            ];
            r[rk] += area * frob_inner(&stress, dv);
            r[rk] -= area * pr[c] * cb_.div[k];
            if trips.is_some() {
                for j in 0..6 {
                    push(
                        &mut trips,
                        rk,
                        d.u_offset() + cb_.ublock[j],
                        area * nu * frob_inner(&cb_.sym[j], dv),
                    );
                }
                for (comp, &(rr, ss)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                    push(&mut trips, rk, d.z(c, comp), area * dv[rr][ss]);
                }
                push(&mut trips, rk, d.p(c), -area * cb_.div[k]);
            }
        }

        // Continuity row: -(q, div u) + lambda (q, 1).
        {
            let rp = d.p(c);
            r[rp] += area * (lam - divu);
            if trips.is_some() {
                for j in 0..6 {
                    push(&mut trips, rp, d.u_offset() + cb_.ublock[j], -area * cb_.div[j]);
                }
                push(&mut trips, rp, d.lambda(), area);
            }
            // Pressure-mean row.
            r[d.lambda()] += area * pr[c];
            push(&mut trips, d.lambda(), rp, area);
        }

        // Multiplier rows: gamma tau_s (Du, w) - (|Du|_g z, w).
        {
            let t = p.hub.norm(&du);
            let s = tensor_mag(&du);
            let active = p.hub.gamma * s >= p.hub.tau_s;
            // d t / d Du, zero on the plateau and at vanishing strain.
            let dt_c = if active && s >= DU_EPS { p.hub.gamma / (2.0 * s) } else { 0.0 };
            for (comp, &(rr, ss)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                let rz = d.z(c, comp);
                r[rz] += area * (gts * du[rr][ss] - t * zs[4 * c + comp]);
                if trips.is_some() {
                    push(&mut trips, rz, d.z(c, comp), -area * t.max(DU_EPS));
                    for j in 0..6 {
                        let dsym = &cb_.sym[j];
                        let dt_du = dt_c * frob_inner(&du, dsym);
                        let val = gts * dsym[rr][ss] - dt_du * zs[4 * c + comp];
                        push(&mut trips, rz, d.u_offset() + cb_.ublock[j], area * val);
                    }
                }
            }
        }
    }

    // Facet contributions.
    for (e, f) in mesh.facets.iter().enumerate() {
        let cp = f.cell_plus;
        let nrm = f.normal;
        let h_e = f.length;
        let locp = fe.local_facet(mesh, cp, e);
        let cbp = &fe.cells[cp];

        // Dirichlet data on boundary facets; free-slip facets are skipped
        // entirely.
        let mut bdry_g: Option<&dyn Fn([f64; 2]) -> [f64; 2]> = None;
        if let Some(side) = f.boundary {
            match p.bcs.get(side) {
                SideBc::Dirichlet(g) => bdry_g = Some(g.as_ref()),
                SideBc::FreeSlip => continue,
            }
        }

        // Normal velocity from the facet's own dofs: u.n = U0 + U1 xi.
        let w0 = u[2 * e];
        let w1 = u[2 * e + 1];

        match f.cell_minus {
            Some(cm) => {
                let locm = fe.local_facet(mesh, cm, e);
                let cbm = &fe.cells[cm];
                let dup = du_cells[cp];
                let dum = du_cells[cm];
                let zp = z_at(zs, cp);
                let zm = z_at(zs, cm);
                let (mu_e, dmu_p, dmu_m) = facet_mu(&p.hub, p.facet_weight, &dup, Some(&dum));

                // Mean stress (nu Du + z) n, constant on the facet.
                let sn = [
                    0.5 * ((nu * dup[0][0] + zp[0][0] + nu * dum[0][0] + zm[0][0]) * nrm[0]
                        + (nu * dup[0][1] + zp[0][1] + nu * dum[0][1] + zm[0][1]) * nrm[1]),
                    0.5 * ((nu * dup[1][0] + zp[1][0] + nu * dum[1][0] + zm[1][0]) * nrm[0]
                        + (nu * dup[1][1] + zp[1][1] + nu * dum[1][1] + zm[1][1]) * nrm[1]),
                ];

                let rho_p = rho[cp];
                let rho_m = rho[cm];
                let rho_mean = 0.5 * (rho_p + rho_m);
                let rho_jump = rho_p - rho_m;

                // Row bookkeeping: 12 test functions, sides +/-.
                // side 0 = K+, side 1 = K-.
                let side_loc = [locp, locm];
                let side_sign = [1.0, -1.0];
                let side_cb = [cbp, cbm];

                for q in 0..NQ_EDGE {
                    let wq = fe.edge.w[q] * h_e;
                    let xi = 2.0 * fe.edge.t[q] - 1.0;
                    let wn = w0 + w1 * xi;

                    // Traces of the iterate from both sides.
                    let mut up = [0.0; 2];
                    let mut um = [0.0; 2];
                    for k in 0..6 {
                        let vp = cbp.facet_val[locp][q][k];
                        up[0] += u[cbp.ublock[k]] * vp[0];
                        up[1] += u[cbp.ublock[k]] * vp[1];
                        let vm = cbm.facet_val[locm][q][k];
                        um[0] += u[cbm.ublock[k]] * vm[0];
                        um[1] += u[cbm.ublock[k]] * vm[1];
                    }
                    let ju = [up[0] - um[0], up[1] - um[1]];
                    let a_q = rho_mean * wn;
                    let abs_a = a_q.abs();
                    let sgn_a = if a_q > 0.0 { 1.0 } else if a_q < 0.0 { -1.0 } else { 0.0 };
                    let sgn_wn = if wn > 0.0 { 1.0 } else if wn < 0.0 { -1.0 } else { 0.0 };

                    // Density rows: -(w.n) [rho] {zeta} + (1/2) |w.n| [rho] [zeta].
                    {
                        let rp_ = d.rho(cp);
                        let rm_ = d.rho(cm);
                        let coefp = 0.5 * (wn.abs() - wn); // {zeta}=1/2, [zeta]=+1
                        let coefm = -0.5 * (wn.abs() + wn); // {zeta}=1/2, [zeta]=-1
                        r[rp_] += wq * coefp * rho_jump;
                        r[rm_] += wq * coefm * rho_jump;
                        if trips.is_some() {
                            push(&mut trips, rp_, rp_, wq * coefp);
                            push(&mut trips, rp_, d.rho(cm), -wq * coefp);
                            push(&mut trips, rm_, d.rho(cp), wq * coefm);
                            push(&mut trips, rm_, rm_, -wq * coefm);
                            // d / d (w.n) through the facet dofs.
                            let dcoefp = 0.5 * (sgn_wn - 1.0);
                            let dcoefm = -0.5 * (sgn_wn + 1.0);
                            for (mj, dwn) in [(0, 1.0), (1, xi)] {
                                let cu = d.u(e, mj);
                                push(&mut trips, rp_, cu, wq * dcoefp * dwn * rho_jump);
                                push(&mut trips, rm_, cu, wq * dcoefm * dwn * rho_jump);
                            }
                        }
                    }

                    // Velocity rows.
                    for side in 0..2 {
                        let cbs = side_cb[side];
                        let locs = side_loc[side];
                        let sgn_v = side_sign[side];
                        let us = if side == 0 { up } else { um };
                        for k in 0..6 {
                            let phik = cbs.facet_val[locs][q][k];
                            let rk = d.u_offset() + cbs.ublock[k];
                            let dvk_n = matvec(&cbs.sym[k], nrm);

                            // Viscous: -{(nu Du + z) n}.[v] - mu_e {Dv n}.[u]
                            //          + (pen/h) [u].[v].
                            let visc = -sgn_v * dot2(sn, phik)
                                - mu_e * 0.5 * dot2(dvk_n, ju)
                                + pen / h_e * sgn_v * dot2(ju, phik);
                            // Convection: -{rho} (w.n) [u].{v}
                            //             - (1/2)(w.n) [rho] {u.v}
                            //             + (1/2)|{rho} w.n| [u].[v].
                            let conv = -a_q * 0.5 * dot2(ju, phik)
                                - 0.5 * wn * rho_jump * 0.5 * dot2(us, phik)
                                + 0.5 * abs_a * sgn_v * dot2(ju, phik);
                            r[rk] += wq * (visc + conv);

                            if trips.is_some() {
                                // d / d u columns (both sides).
                                for cside in 0..2 {
                                    let cbc = side_cb[cside];
                                    let locc = side_loc[cside];
                                    let sgn_c = side_sign[cside];
                                    for j in 0..6 {
                                        let phij = cbc.facet_val[locc][q][j];
                                        let dsymj_n = matvec(&cbc.sym[j], nrm);
                                        // d ju = sgn_c * phij; d Du_side = sym_j.
                                        let dmu = if cside == 0 {
                                            frob_inner(&dmu_p, &cbc.sym[j])
                                        } else {
                                            frob_inner(&dmu_m, &cbc.sym[j])
                                        };
                                        let mut val = -sgn_v * 0.5 * nu * dot2(dsymj_n, phik)
                                            - dmu * 0.5 * dot2(dvk_n, ju)
                                            - mu_e * 0.5 * dot2(dvk_n, phij) * sgn_c
                                            + pen / h_e * sgn_v * sgn_c * dot2(phij, phik);
                                        // Convection, advected-slot parts.
                                        val += -a_q * 0.5 * dot2(phij, phik) * sgn_c
                                            + 0.5 * abs_a * sgn_v * sgn_c * dot2(phij, phik);
                                        if cside == side {
                                            val += -0.5 * wn * rho_jump * 0.5 * dot2(phij, phik);
                                        }
                                        push(&mut trips, rk, d.u_offset() + cbc.ublock[j], wq * val);
                                    }
                                }
                                // d / d (w.n) through the facet dofs.
                                for (mj, dwn) in [(0, 1.0), (1, xi)] {
                                    let cu = d.u(e, mj);
                                    let val = -rho_mean * dwn * 0.5 * dot2(ju, phik)
                                        - 0.5 * dwn * rho_jump * 0.5 * dot2(us, phik)
                                        + 0.5 * sgn_a * rho_mean * dwn * sgn_v * dot2(ju, phik);
                                    push(&mut trips, rk, cu, wq * val);
                                }
                                // d / d rho columns.
                                for (cc_, drm, drj) in [(cp, 0.5, 1.0), (cm, 0.5, -1.0)] {
                                    let val = -drm * wn * 0.5 * dot2(ju, phik)
                                        - 0.5 * wn * drj * 0.5 * dot2(us, phik)
                                        + 0.5 * sgn_a * drm * wn * sgn_v * dot2(ju, phik);
                                    push(&mut trips, rk, d.rho(cc_), wq * val);
                                }
                                // d / d z columns: d sn = 0.5 e_rs n.
                                for zc_ in [cp, cm] {
                                    for (comp, &(rr, ss)) in
                                        [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate()
                                    {
                                        let val = -sgn_v * 0.5 * nrm[ss] * phik[rr];
                                        push(&mut trips, rk, d.z(zc_, comp), wq * val);
                                    }
                                }
                            }
                        }
                    }
                }
            }
            None => {
                // Dirichlet boundary facet (free slip already skipped).
                let g = bdry_g.expect("boundary facet with Dirichlet data");
                let dup = du_cells[cp];
                let zp = z_at(zs, cp);
                let (mu_e, dmu_p, _) = facet_mu(&p.hub, p.facet_weight, &dup, None);
                let sn = [
                    (nu * dup[0][0] + zp[0][0]) * nrm[0] + (nu * dup[0][1] + zp[0][1]) * nrm[1],
                    (nu * dup[1][0] + zp[1][0]) * nrm[0] + (nu * dup[1][1] + zp[1][1]) * nrm[1],
                ];
                let rho_p = rho[cp];

                for q in 0..NQ_EDGE {
                    let wq = fe.edge.w[q] * h_e;
                    let xi = 2.0 * fe.edge.t[q] - 1.0;
                    let wn = w0 + w1 * xi;
                    let gq = g(fe.facet_pts[e][q]);

                    let mut up = [0.0; 2];
                    for k in 0..6 {
                        let vp = cbp.facet_val[locp][q][k];
                        up[0] += u[cbp.ublock[k]] * vp[0];
                        up[1] += u[cbp.ublock[k]] * vp[1];
                    }
                    let ju = [up[0] - gq[0], up[1] - gq[1]];
                    let a_q = rho_p * wn;
                    let a_neg = a_q.min(0.0);
                    let chi_in = if a_q < 0.0 { 1.0 } else { 0.0 };

                    // Density row: inflow data term (u.n)^- (psi - rho) zeta.
                    if let Some(psi) = p.rho_inflow {
                        let r_rho = d.rho(cp);
                        let wn_neg = wn.min(0.0);
                        r[r_rho] += wq * wn_neg * (psi - rho_p);
                        if trips.is_some() {
                            push(&mut trips, r_rho, r_rho, -wq * wn_neg);
                            let chi = if wn < 0.0 { 1.0 } else { 0.0 };
                            for (mj, dwn) in [(0, 1.0), (1, xi)] {
                                push(
                                    &mut trips,
                                    r_rho,
                                    d.u(e, mj),
                                    wq * chi * dwn * (psi - rho_p),
                                );
                            }
                        }
                    }

                    // Velocity rows (one-sided, full weights).
                    for k in 0..6 {
                        let phik = cbp.facet_val[locp][q][k];
                        let rk = d.u_offset() + cbp.ublock[k];
                        let dvk_n = matvec(&cbp.sym[k], nrm);

                        let visc = -dot2(sn, phik) - mu_e * dot2(dvk_n, ju)
                            + pen / h_e * dot2(ju, phik);
                        // Convection inflow term: (rho w.n)^- (g - u).v.
                        let conv = a_neg * (-dot2(ju, phik));
                        r[rk] += wq * (visc + conv);

                        if trips.is_some() {
                            for j in 0..6 {
                                let phij = cbp.facet_val[locp][q][j];
                                let dsymj_n = matvec(&cbp.sym[j], nrm);
                                let dmu = frob_inner(&dmu_p, &cbp.sym[j]);
                                let mut val = -nu * dot2(dsymj_n, phik)
                                    - dmu * dot2(dvk_n, ju)
                                    - mu_e * dot2(dvk_n, phij)
                                    + pen / h_e * dot2(phij, phik);
                                val += a_neg * (-dot2(phij, phik));
                                push(&mut trips, rk, d.u_offset() + cbp.ublock[j], wq * val);
                            }
                            for (mj, dwn) in [(0, 1.0), (1, xi)] {
                                let val = chi_in * rho_p * dwn * (-dot2(ju, phik));
                                push(&mut trips, rk, d.u(e, mj), wq * val);
                            }
                            push(
                                &mut trips,
                                rk,
                                d.rho(cp),
                                wq * chi_in * wn * (-dot2(ju, phik)),
                            );
                            for (comp, &(rr, ss)) in
                                [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate()
                            {
                                let val = -nrm[ss] * phik[rr];
                                push(&mut trips, rk, d.z(cp, comp), wq * val);
                            }
                        }
                    }
                }
            }
        }
    }

    // Constrained rows: identity with the target value.
    for i in 0..n {
        if cons.mask[i] {
            r[i] = x[i] - cons.target[i];
            if let Some(t) = trips.as_mut() {
                t.push(Triplet::new(i, i, 1.0));
            }
        }
    }

    (r, trips)
}

// ---------------------------------------------------------------------------
// Standalone form evaluations. These recompute every term from field values
// (not from assembled residuals), so tests can cross-check the two routes.
// ---------------------------------------------------------------------------

/// Viscous interior-penalty form `a2(u, v)` with the Huber viscosity
/// `mu(|Du|_g)` in volume and consistency terms.
#[allow(clippy::too_many_arguments)]
pub fn a2_form(
    mesh: &Mesh,
    fe: &FeSpace,
    hub: &Huber,
    bcs: &BoundaryConds,
    a0: f64,
    weight: FacetWeight,
    u: &[f64],
    v: &[f64],
) -> f64 {
    let pen = a0;
    let mut total = 0.0;
    for c in 0..mesh.n_cells() {
        let du = fe.velocity_sym_grad(u, c);
        let dv = fe.velocity_sym_grad(v, c);
        total += mesh.area[c] * hub.mu_at(&du) * frob_inner(&du, &dv);
    }
    for (e, f) in mesh.facets.iter().enumerate() {
        let cp = f.cell_plus;
        let nrm = f.normal;
        let dup = fe.velocity_sym_grad(u, cp);
        match f.cell_minus {
            Some(cm) => {
                let dum = fe.velocity_sym_grad(u, cm);
                let (mu_e, _, _) = facet_mu(hub, weight, &dup, Some(&dum));
                let smean = {
                    let mp = hub.mu_at(&dup);
                    let mm = hub.mu_at(&dum);
                    [
                        0.5 * ((mp * dup[0][0] + mm * dum[0][0]) * nrm[0]
                            + (mp * dup[0][1] + mm * dum[0][1]) * nrm[1]),
                        0.5 * ((mp * dup[1][0] + mm * dum[1][0]) * nrm[0]
                            + (mp * dup[1][1] + mm * dum[1][1]) * nrm[1]),
                    ]
                };
                let dvp = fe.velocity_sym_grad(v, cp);
                let dvm = fe.velocity_sym_grad(v, cm);
                let dv_mean_n = [
                    0.5 * ((dvp[0][0] + dvm[0][0]) * nrm[0] + (dvp[0][1] + dvm[0][1]) * nrm[1]),
                    0.5 * ((dvp[1][0] + dvm[1][0]) * nrm[0] + (dvp[1][1] + dvm[1][1]) * nrm[1]),
                ];
                for q in 0..NQ_EDGE {
                    let wq = fe.edge.w[q] * f.length;
                    let x = fe.facet_pts[e][q];
                    let ju = jump_at(mesh, fe, u, cp, cm, x);
                    let jv = jump_at(mesh, fe, v, cp, cm, x);
                    total += wq
                        * (-dot2(smean, jv) - mu_e * dot2(dv_mean_n, ju)
                            + pen / f.length * dot2(ju, jv));
                }
            }
            None => {
                let side = f.boundary.unwrap();
                let SideBc::Dirichlet(g) = bcs.get(side) else { continue };
                let (mu_e, _, _) = facet_mu(hub, weight, &dup, None);
                let mp = hub.mu_at(&dup);
                let sn = [
                    mp * (dup[0][0] * nrm[0] + dup[0][1] * nrm[1]),
                    mp * (dup[1][0] * nrm[0] + dup[1][1] * nrm[1]),
                ];
                let dvp = fe.velocity_sym_grad(v, cp);
                let dv_n = [
                    dvp[0][0] * nrm[0] + dvp[0][1] * nrm[1],
                    dvp[1][0] * nrm[0] + dvp[1][1] * nrm[1],
                ];
                for q in 0..NQ_EDGE {
                    let wq = fe.edge.w[q] * f.length;
                    let x = fe.facet_pts[e][q];
                    let uv = fe.eval_velocity(mesh, u, cp, x);
                    let gv = g(x);
                    let ju = [uv[0] - gv[0], uv[1] - gv[1]];
                    let vv = fe.eval_velocity(mesh, v, cp, x);
                    total += wq
                        * (-dot2(sn, vv) - mu_e * dot2(dv_n, ju)
                            + pen / f.length * dot2(ju, vv));
                }
            }
        }
    }
    total
}

/// Linearized viscous form `a2~(z; u, v)` with frozen multiplier `z`
/// (length `4 n_cells`). Identical to [`a2_form`] whenever
/// `z = gamma tau_s Du / |Du|_g` cellwise.
#[allow(clippy::too_many_arguments)]
pub fn a2_tilde_form(
    mesh: &Mesh,
    fe: &FeSpace,
    hub: &Huber,
    bcs: &BoundaryConds,
    a0: f64,
    weight: FacetWeight,
    zs: &[f64],
    u: &[f64],
    v: &[f64],
) -> f64 {
    let nu = 2.0 * hub.eta;
    let pen = a0;
    let mut total = 0.0;
    for c in 0..mesh.n_cells() {
        let du = fe.velocity_sym_grad(u, c);
        let dv = fe.velocity_sym_grad(v, c);
        let zc = z_at(zs, c);
        let stress = [
            [nu * du[0][0] + zc[0][0], nu * du[0][1] + zc[0][1]],
            [nu * du[1][0] + zc[1][0], nu * du[1][1] + zc[1][1]],
        ];
        total += mesh.area[c] * frob_inner(&stress, &dv);
    }
    for (e, f) in mesh.facets.iter().enumerate() {
        let cp = f.cell_plus;
        let nrm = f.normal;
        let dup = fe.velocity_sym_grad(u, cp);
        let zp = z_at(zs, cp);
        match f.cell_minus {
            Some(cm) => {
                let dum = fe.velocity_sym_grad(u, cm);
                let zm = z_at(zs, cm);
                let (mu_e, _, _) = facet_mu(hub, weight, &dup, Some(&dum));
                let smean = [
                    0.5 * ((nu * dup[0][0] + zp[0][0] + nu * dum[0][0] + zm[0][0]) * nrm[0]
                        + (nu * dup[0][1] + zp[0][1] + nu * dum[0][1] + zm[0][1]) * nrm[1]),
                    0.5 * ((nu * dup[1][0] + zp[1][0] + nu * dum[1][0] + zm[1][0]) * nrm[0]
                        + (nu * dup[1][1] + zp[1][1] + nu * dum[1][1] + zm[1][1]) * nrm[1]),
                ];
                let dvp = fe.velocity_sym_grad(v, cp);
                let dvm = fe.velocity_sym_grad(v, cm);
                let dv_mean_n = [
                    0.5 * ((dvp[0][0] + dvm[0][0]) * nrm[0] + (dvp[0][1] + dvm[0][1]) * nrm[1]),
                    0.5 * ((dvp[1][0] + dvm[1][0]) * nrm[0] + (dvp[1][1] + dvm[1][1]) * nrm[1]),
                ];
                for q in 0..NQ_EDGE {
                    let wq = fe.edge.w[q] * f.length;
                    let x = fe.facet_pts[e][q];
                    let ju = jump_at(mesh, fe, u, cp, cm, x);
                    let jv = jump_at(mesh, fe, v, cp, cm, x);
                    total += wq
                        * (-dot2(smean, jv) - mu_e * dot2(dv_mean_n, ju)
                            + pen / f.length * dot2(ju, jv));
                }
            }
            None => {
                let side = f.boundary.unwrap();
                let SideBc::Dirichlet(g) = bcs.get(side) else { continue };
                let (mu_e, _, _) = facet_mu(hub, weight, &dup, None);
                let sn = [
                    (nu * dup[0][0] + zp[0][0]) * nrm[0] + (nu * dup[0][1] + zp[0][1]) * nrm[1],
                    (nu * dup[1][0] + zp[1][0]) * nrm[0] + (nu * dup[1][1] + zp[1][1]) * nrm[1],
                ];
                let dvp = fe.velocity_sym_grad(v, cp);
                let dv_n = [
                    dvp[0][0] * nrm[0] + dvp[0][1] * nrm[1],
                    dvp[1][0] * nrm[0] + dvp[1][1] * nrm[1],
                ];
                for q in 0..NQ_EDGE {
                    let wq = fe.edge.w[q] * f.length;
                    let x = fe.facet_pts[e][q];
                    let uv = fe.eval_velocity(mesh, u, cp, x);
                    let gv = g(x);
                    let ju = [uv[0] - gv[0], uv[1] - gv[1]];
                    let vv = fe.eval_velocity(mesh, v, cp, x);
                    total += wq
                        * (-dot2(sn, vv) - mu_e * dot2(dv_n, ju)
                            + pen / f.length * dot2(ju, vv));
                }
            }
        }
    }
    total
}

fn jump_at(mesh: &Mesh, fe: &FeSpace, u: &[f64], cp: usize, cm: usize, x: [f64; 2]) -> [f64; 2] {
    let a = fe.eval_velocity(mesh, u, cp, x);
    let b = fe.eval_velocity(mesh, u, cm, x);
    [a[0] - b[0], a[1] - b[1]]
}

/// Upwinded density transport form
/// `c1(u; rho, zeta) = -sum_e (u.n) [rho] {zeta} + (1/2) |u.n| [rho] [zeta]`
/// plus, when `psi` is given, the boundary inflow term
/// `(u.n)^- (psi - rho) zeta` on every boundary facet.
pub fn c1_form(
    mesh: &Mesh,
    fe: &FeSpace,
    u: &[f64],
    rho: &[f64],
    zeta: &[f64],
    psi: Option<f64>,
) -> f64 {
    let mut total = 0.0;
    for (e, f) in mesh.facets.iter().enumerate() {
        let w0 = u[2 * e];
        let w1 = u[2 * e + 1];
        match f.cell_minus {
            Some(cm) => {
                let cp = f.cell_plus;
                let jr = rho[cp] - rho[cm];
                let jz = zeta[cp] - zeta[cm];
                let mz = 0.5 * (zeta[cp] + zeta[cm]);
                for q in 0..NQ_EDGE {
                    let wq = fe.edge.w[q] * f.length;
                    let wn = w0 + w1 * (2.0 * fe.edge.t[q] - 1.0);
                    total += wq * (-wn * jr * mz + 0.5 * wn.abs() * jr * jz);
                }
            }
            None => {
                if let Some(psi) = psi {
                    let cp = f.cell_plus;
                    for q in 0..NQ_EDGE {
                        let wq = fe.edge.w[q] * f.length;
                        let wn = w0 + w1 * (2.0 * fe.edge.t[q] - 1.0);
                        total += wq * wn.min(0.0) * (psi - rho[cp]) * zeta[cp];
                    }
                }
            }
        }
    }
    total
}

/// Upwind seminorm of a cellwise-constant density against the transport
/// field `u`: `sum over interior facets of (1/2) int |u.n| [rho]^2`.
pub fn rho_upwind_seminorm_sq(mesh: &Mesh, fe: &FeSpace, u: &[f64], rho: &[f64]) -> f64 {
    let mut total = 0.0;
    for (e, f) in mesh.facets.iter().enumerate() {
        let Some(cm) = f.cell_minus else { continue };
        let jr = rho[f.cell_plus] - rho[cm];
        let w0 = u[2 * e];
        let w1 = u[2 * e + 1];
        for q in 0..NQ_EDGE {
            let wq = fe.edge.w[q] * f.length;
            let wn = w0 + w1 * (2.0 * fe.edge.t[q] - 1.0);
            total += 0.5 * wq * wn.abs() * jr * jr;
        }
    }
    total
}

/// Skew-symmetrized upwinded convection form `c2(rho, w; u, v)` with
/// advecting field `w`. When `g` is given, the boundary inflow term
/// `(rho w.n)^- (g - u).v` is added on every boundary facet.
#[allow(clippy::too_many_arguments)]
pub fn c2_form(
    mesh: &Mesh,
    fe: &FeSpace,
    rho: &[f64],
    w: &[f64],
    u: &[f64],
    v: &[f64],
    g: Option<&dyn Fn([f64; 2]) -> [f64; 2]>,
) -> f64 {
    let mut total = 0.0;
    for c in 0..mesh.n_cells() {
        let gu = fe.velocity_grad(u, c);
        let divw = fe.velocity_div(w, c);
        for q in 0..NQ_TRI {
            let wq = fe.tri.w[q] * 2.0 * mesh.area[c];
            let x = fe.vol_pts[c][q];
            let wv = fe.eval_velocity(mesh, w, c, x);
            let uv = fe.eval_velocity(mesh, u, c, x);
            let vv = fe.eval_velocity(mesh, v, c, x);
            let adv = [
                gu[0][0] * wv[0] + gu[0][1] * wv[1],
                gu[1][0] * wv[0] + gu[1][1] * wv[1],
            ];
            total += wq * rho[c] * (dot2(adv, vv) + 0.5 * divw * dot2(uv, vv));
        }
    }
    for (e, f) in mesh.facets.iter().enumerate() {
        let w0 = w[2 * e];
        let w1 = w[2 * e + 1];
        let cp = f.cell_plus;
        match f.cell_minus {
            Some(cm) => {
                let rm = 0.5 * (rho[cp] + rho[cm]);
                let rj = rho[cp] - rho[cm];
                for q in 0..NQ_EDGE {
                    let wq = fe.edge.w[q] * f.length;
                    let x = fe.facet_pts[e][q];
                    let wn = w0 + w1 * (2.0 * fe.edge.t[q] - 1.0);
                    let up = fe.eval_velocity(mesh, u, cp, x);
                    let um = fe.eval_velocity(mesh, u, cm, x);
                    let vp = fe.eval_velocity(mesh, v, cp, x);
                    let vm = fe.eval_velocity(mesh, v, cm, x);
                    let ju = [up[0] - um[0], up[1] - um[1]];
                    let jv = [vp[0] - vm[0], vp[1] - vm[1]];
                    let mv = [0.5 * (vp[0] + vm[0]), 0.5 * (vp[1] + vm[1])];
                    let m_uv = 0.5 * (dot2(up, vp) + dot2(um, vm));
                    total += wq
                        * (-rm * wn * dot2(ju, mv) - 0.5 * wn * rj * m_uv
                            + 0.5 * (rm * wn).abs() * dot2(ju, jv));
                }
            }
            None => {
                if let Some(g) = g {
                    for q in 0..NQ_EDGE {
                        let wq = fe.edge.w[q] * f.length;
                        let x = fe.facet_pts[e][q];
                        let wn = w0 + w1 * (2.0 * fe.edge.t[q] - 1.0);
                        let up = fe.eval_velocity(mesh, u, cp, x);
                        let vp = fe.eval_velocity(mesh, v, cp, x);
                        let gv = g(x);
                        let gmu = [gv[0] - up[0], gv[1] - up[1]];
                        total += wq * (rho[cp] * wn).min(0.0) * dot2(gmu, vp);
                    }
                }
            }
        }
    }
    total
}

/// Upwind seminorm of a velocity against density `rho` and advecting field
/// `w`: `sum over interior facets of (1/2) int |{rho} w.n| |[u]|^2`.
pub fn u_upwind_seminorm_sq(mesh: &Mesh, fe: &FeSpace, rho: &[f64], w: &[f64], u: &[f64]) -> f64 {
    let mut total = 0.0;
    for (e, f) in mesh.facets.iter().enumerate() {
        let Some(cm) = f.cell_minus else { continue };
        let cp = f.cell_plus;
        let rm = 0.5 * (rho[cp] + rho[cm]);
        let w0 = w[2 * e];
        let w1 = w[2 * e + 1];
        for q in 0..NQ_EDGE {
            let wq = fe.edge.w[q] * f.length;
            let x = fe.facet_pts[e][q];
            let wn = w0 + w1 * (2.0 * fe.edge.t[q] - 1.0);
            let up = fe.eval_velocity(mesh, u, cp, x);
            let um = fe.eval_velocity(mesh, u, cm, x);
            let ju = [up[0] - um[0], up[1] - um[1]];
            total += 0.5 * wq * (rm * wn).abs() * dot2(ju, ju);
        }
    }
    total
}

/// Smallest distance of the iterate from any kink of the residual:
/// active-set switches, vanishing strains, and sign changes of the upwind
/// fluxes. Finite-difference Jacobian checks sample iterates until this
/// margin is comfortably larger than the difference step.
pub fn kink_margin(p: &Problem, x: &[f64]) -> f64 {
    let d = p.fe.dofs;
    let u = &x[d.u_range()];
    let rho = &x[d.rho_range()];
    let mut margin = f64::INFINITY;
    for c in 0..p.mesh.n_cells() {
        let du = p.fe.velocity_sym_grad(u, c);
        let s = tensor_mag(&du);
        margin = margin.min((p.hub.gamma * s - p.hub.tau_s).abs());
        margin = margin.min(s);
    }
    for (e, f) in p.mesh.facets.iter().enumerate() {
        let w0 = u[2 * e];
        let w1 = u[2 * e + 1];
        match f.cell_minus {
            Some(cm) => {
                let cp = f.cell_plus;
                let dup = p.fe.velocity_sym_grad(u, cp);
                let dum = p.fe.velocity_sym_grad(u, cm);
                let jump = [
                    [dup[0][0] - dum[0][0], dup[0][1] - dum[0][1]],
                    [dup[1][0] - dum[1][0], dup[1][1] - dum[1][1]],
                ];
                let s = tensor_mag(&jump);
                margin = margin.min((p.hub.gamma * s - p.hub.tau_s).abs());
                margin = margin.min(s);
                let sp = tensor_mag(&dup);
                let sm = tensor_mag(&dum);
                margin = margin.min((p.hub.gamma * sp - p.hub.tau_s).abs());
                margin = margin.min((p.hub.gamma * sm - p.hub.tau_s).abs());
                let rmean = 0.5 * (rho[cp] + rho[cm]);
                for q in 0..NQ_EDGE {
                    let wn = w0 + w1 * (2.0 * p.fe.edge.t[q] - 1.0);
                    margin = margin.min(wn.abs());
                    margin = margin.min((rmean * wn).abs());
                }
            }
            None => {
                let cp = f.cell_plus;
                for q in 0..NQ_EDGE {
                    let wn = w0 + w1 * (2.0 * p.fe.edge.t[q] - 1.0);
                    margin = margin.min(wn.abs());
                    margin = margin.min((rho[cp] * wn).abs());
                }
            }
        }
    }
    margin
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fespace::project_div_free;
    use crate::mesh::Split;
    use faer::prelude::*;
    use faer::sparse::SparseColMat;
    use rand::{Rng, SeedableRng};

    fn linear_g() -> Box<dyn Fn([f64; 2]) -> [f64; 2]> {
        Box::new(|x| [0.3 - 0.1 * x[0] + 0.2 * x[1], 0.05 + 0.07 * x[0] - 0.2 * x[1]])
    }

    fn dirichlet_all() -> BoundaryConds {
        BoundaryConds {
            bottom: SideBc::Dirichlet(linear_g()),
            right: SideBc::Dirichlet(linear_g()),
            top: SideBc::Dirichlet(linear_g()),
            left: SideBc::Dirichlet(linear_g()),
        }
    }

    fn random_block(rng: &mut impl Rng, len: usize, scale: f64) -> Vec<f64> {
        (0..len).map(|_| rng.random_range(-scale..scale)).collect()
    }

    #[test]
    fn equilibrium_residual_vanishes() {
        let mesh = Mesh::rectangle(0.0, 1.0, 0.0, 1.0, 2, 2, Split::Uniform);
        let fe = FeSpace::new(&mesh);
        let d = fe.dofs;
        let bcs = BoundaryConds::no_slip();
        let rho_n = vec![1.0; mesh.n_cells()];
        let u_n = vec![0.0; 2 * mesh.n_facets()];
        let p = Problem {
            mesh: &mesh,
            fe: &fe,
            hub: Huber { eta: 1.0, tau_s: 2.5, gamma: 1e3 },
            dt: 0.1,
            bdf2: false,
            rho_n: &rho_n,
            u_n: &u_n,
            rho_nm1: &rho_n,
            u_nm1: &u_n,
            gravity: [0.0, 0.0],
            bcs: &bcs,
            rho_inflow: None,
            penalty_a0: 10.0,
            facet_weight: FacetWeight::Nu,
            rho_guard: 1e-8,
        };
        let cons = velocity_constraints(&mesh, &fe, &bcs);
        let mut x = vec![0.0; d.n_dofs()];
        for c in 0..mesh.n_cells() {
            x[d.rho(c)] = 1.0;
        }
        let (r, _) = assemble(&p, &cons, &x, false);
        let max = r.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        assert!(max < 1e-13, "equilibrium residual {max}");
    }

    #[test]
    fn uniform_density_rows_vanish_for_any_velocity() {
        let mesh = Mesh::rectangle(0.0, 1.0, 0.0, 1.0, 3, 2, Split::Alternating);
        let fe = FeSpace::new(&mesh);
        let d = fe.dofs;
        let bcs = dirichlet_all();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        let rho_n = vec![1.0; mesh.n_cells()];
        let u_n = random_block(&mut rng, 2 * mesh.n_facets(), 1.0);
        let p = Problem {
            mesh: &mesh,
            fe: &fe,
            hub: Huber { eta: 1.0, tau_s: 0.5, gamma: 10.0 },
            dt: 0.05,
            bdf2: false,
            rho_n: &rho_n,
            u_n: &u_n,
            rho_nm1: &rho_n,
            u_nm1: &u_n,
            gravity: [0.0, -1.0],
            bcs: &bcs,
            rho_inflow: Some(1.0),
            penalty_a0: 10.0,
            facet_weight: FacetWeight::Nu,
            rho_guard: 1e-8,
        };
        let cons = velocity_constraints(&mesh, &fe, &bcs);
        let mut x = random_block(&mut rng, d.n_dofs(), 1.0);
        for c in 0..mesh.n_cells() {
            x[d.rho(c)] = 1.0;
        }
        let (r, _) = assemble(&p, &cons, &x, false);
        for c in 0..mesh.n_cells() {
            assert!(
                r[d.rho(c)].abs() < 1e-13,
                "uniform density must be transport-invariant"
            );
        }
    }

    #[test]
    fn linearized_viscous_form_matches_at_consistent_multiplier() {
        let mesh = Mesh::rectangle(0.0, 1.5, -0.5, 0.5, 2, 3, Split::Alternating);
        let fe = FeSpace::new(&mesh);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let u = random_block(&mut rng, 2 * mesh.n_facets(), 1.0);
        let v = random_block(&mut rng, 2 * mesh.n_facets(), 1.0);
        let bcs = dirichlet_all();
        for &tau_s in &[0.0, 2.5] {
            for w in [FacetWeight::Nu, FacetWeight::JumpMu, FacetWeight::MeanMu] {
                let hub = Huber { eta: 1.0, tau_s, gamma: 1e3 };
                let mut zs = vec![0.0; 4 * mesh.n_cells()];
                for c in 0..mesh.n_cells() {
                    let du = fe.velocity_sym_grad(&u, c);
                    let t = hub.norm(&du);
                    let s = hub.gamma * hub.tau_s / t.max(DU_EPS);
                    zs[4 * c] = s * du[0][0];
                    zs[4 * c + 1] = s * du[0][1];
                    zs[4 * c + 2] = s * du[1][0];
                    zs[4 * c + 3] = s * du[1][1];
                }
                let a = a2_form(&mesh, &fe, &hub, &bcs, 10.0, w, &u, &v);
                let at = a2_tilde_form(&mesh, &fe, &hub, &bcs, 10.0, w, &zs, &u, &v);
                let scale = a.abs().max(1.0);
                assert!(
                    (a - at).abs() < 1e-11 * scale,
                    "forms disagree: {a} vs {at} (tau_s={tau_s}, weight={w:?})"
                );
            }
        }
    }

    #[test]
    fn transport_form_telescopes_to_upwind_seminorm() {
        let mesh = Mesh::rectangle(0.0, 1.0, 0.0, 1.0, 4, 4, Split::Uniform);
        let fe = FeSpace::new(&mesh);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(19);
        let u0 = random_block(&mut rng, 2 * mesh.n_facets(), 1.0);
        let u = project_div_free(&mesh, &fe, &u0);
        let rho = random_block(&mut rng, mesh.n_cells(), 1.0);
        let lhs = c1_form(&mesh, &fe, &u, &rho, &rho, None);
        let rhs = rho_upwind_seminorm_sq(&mesh, &fe, &u, &rho);
        assert!(
            (lhs - rhs).abs() < 1e-12 * rhs.max(1.0),
            "transport identity: {lhs} vs {rhs}"
        );
        assert!(rhs > 1e-3, "seminorm should be nontrivial for random data");
    }

    #[test]
    fn convection_form_energy_identity() {
        let mesh = Mesh::rectangle(0.0, 1.0, 0.0, 1.0, 4, 4, Split::Uniform);
        let fe = FeSpace::new(&mesh);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(29);
        let u0 = random_block(&mut rng, 2 * mesh.n_facets(), 1.0);
        let u = project_div_free(&mesh, &fe, &u0);
        // A genuinely jumping density: the corrective facet term matters.
        let rho: Vec<f64> = (0..mesh.n_cells()).map(|_| rng.random_range(0.5..3.0)).collect();
        let lhs = c2_form(&mesh, &fe, &rho, &u, &u, &u, None);
        let rhs = u_upwind_seminorm_sq(&mesh, &fe, &rho, &u, &u);
        assert!(
            (lhs - rhs).abs() < 1e-12 * rhs.max(1.0),
            "convection energy identity: {lhs} vs {rhs}"
        );
        assert!(rhs > 1e-3, "seminorm should be nontrivial for random data");
    }

    fn fd_check(bdf2: bool, weight: FacetWeight, seed_base: u64) {
        let mesh = Mesh::rectangle(0.0, 1.0, 0.0, 1.0, 2, 2, Split::Uniform);
        let fe = FeSpace::new(&mesh);
        let d = fe.dofs;
        let bcs = BoundaryConds {
            bottom: SideBc::Dirichlet(linear_g()),
            right: SideBc::FreeSlip,
            top: SideBc::Dirichlet(linear_g()),
            left: SideBc::Dirichlet(linear_g()),
        };
        let cons = velocity_constraints(&mesh, &fe, &bcs);

        let mut chosen = None;
        for attempt in 0..100u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed_base + attempt);
            let rho_n: Vec<f64> = (0..mesh.n_cells()).map(|_| rng.random_range(0.5..1.5)).collect();
            let rho_nm1: Vec<f64> =
                (0..mesh.n_cells()).map(|_| rng.random_range(0.5..1.5)).collect();
            let u_n = random_block(&mut rng, 2 * mesh.n_facets(), 1.0);
            let u_nm1 = random_block(&mut rng, 2 * mesh.n_facets(), 1.0);
            let mut x = random_block(&mut rng, d.n_dofs(), 1.0);
            for c in 0..mesh.n_cells() {
                x[d.rho(c)] = rng.random_range(0.5..1.5);
            }
            let mut dir = random_block(&mut rng, d.n_dofs(), 1.0);
            for i in 0..d.n_dofs() {
                if cons.mask[i] {
                    dir[i] = 0.0;
                }
            }
            let p = Problem {
                mesh: &mesh,
                fe: &fe,
                hub: Huber { eta: 1.0, tau_s: 0.5, gamma: 10.0 },
                dt: 0.05,
                bdf2,
                rho_n: &rho_n,
                u_n: &u_n,
                rho_nm1: &rho_nm1,
                u_nm1: &u_nm1,
                gravity: [0.3, -0.9],
                bcs: &bcs,
                rho_inflow: Some(0.8),
                penalty_a0: 10.0,
                facet_weight: weight,
                rho_guard: 1e-8,
            };
            if kink_margin(&p, &x) > 1e-3 {
                chosen = Some((rho_n, rho_nm1, u_n, u_nm1, x, dir));
                break;
            }
        }
        let (rho_n, rho_nm1, u_n, u_nm1, x, dir) =
            chosen.expect("no iterate with safe kink margins found");
        let p = Problem {
            mesh: &mesh,
            fe: &fe,
            hub: Huber { eta: 1.0, tau_s: 0.5, gamma: 10.0 },
            dt: 0.05,
            bdf2,
            rho_n: &rho_n,
            u_n: &u_n,
            rho_nm1: &rho_nm1,
            u_nm1: &u_nm1,
            gravity: [0.3, -0.9],
            bcs: &bcs,
            rho_inflow: Some(0.8),
            penalty_a0: 10.0,
            facet_weight: weight,
            rho_guard: 1e-8,
        };

        let n = d.n_dofs();
        let (_, trips) = assemble(&p, &cons, &x, true);
        let a =
            SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &trips.unwrap()).unwrap();
        let dv = Col::<f64>::from_fn(n, |i| dir[i]);
        let jd = &a * &dv;

        let eps = 1e-6;
        let xp: Vec<f64> = (0..n).map(|i| x[i] + eps * dir[i]).collect();
        let xm: Vec<f64> = (0..n).map(|i| x[i] - eps * dir[i]).collect();
        let (rp, _) = assemble(&p, &cons, &xp, false);
        let (rm, _) = assemble(&p, &cons, &xm, false);
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..n {
            let fd = (rp[i] - rm[i]) / (2.0 * eps);
            num += (jd[i] - fd) * (jd[i] - fd);
            den += jd[i] * jd[i];
        }
        let rel = num.sqrt() / den.sqrt().max(1e-12);
        assert!(
            rel < 1e-6,
            "directional derivative mismatch {rel} (bdf2={bdf2}, weight={weight:?})"
        );
    }

    #[test]
    fn jacobian_matches_finite_differences_euler() {
        fd_check(false, FacetWeight::Nu, 100);
    }

    #[test]
    fn jacobian_matches_finite_differences_bdf2() {
        fd_check(true, FacetWeight::Nu, 200);
    }

    #[test]
    fn jacobian_matches_finite_differences_jump_weight() {
        fd_check(true, FacetWeight::JumpMu, 300);
    }

    #[test]
    fn jacobian_matches_finite_differences_mean_weight() {
        fd_check(true, FacetWeight::MeanMu, 400);
    }
}
