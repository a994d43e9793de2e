//! Finite-element spaces and the global dof layout.
//!
//! Velocity lives in BDM1: on each triangle the full space of linear vector
//! fields, with two moments of the normal component per facet as degrees of
//! freedom. Sharing those facet moments between the two adjacent cells makes
//! the normal component continuous, so the space is H(div)-conforming while
//! the tangential component may jump. Pressure, density, and the plastic
//! stress multiplier (a 2x2 tensor) are cellwise constants, and a single
//! Lagrange multiplier pins the pressure mean.
//!
//! Facet dofs of a field `v` on the facet with endpoints `a < b`, unit
//! normal `n` (out of `K+`), and coordinate `t in [0, 1]` running from `a`
//! to `b`:
//!
//! - `dof 0 = mean over the facet of v.n`,
//! - `dof 1 = 3 * mean of (v.n) (2t - 1)`,
//!
//! which are the first two Legendre coefficients of `v.n` along the facet.
//! Both adjacent cells use the same global normal and the same direction of
//! `t`, so the functionals are single-valued.
//!
//! Global unknown ordering: `[rho (cells), u (2 per facet), p (cells),
//! z (4 per cell, row-major), lambda]`.

use faer::prelude::Solve;
use faer::sparse::{SparseColMat, Triplet};
use faer::Col;

use crate::mesh::Mesh;
use crate::quadrature::{EdgeRule, TriRule};

/// Number of volume quadrature points.
pub const NQ_TRI: usize = 6;
/// Number of facet quadrature points.
pub const NQ_EDGE: usize = 4;

/// Index map from field components to positions in the global unknown
/// vector.
#[derive(Debug, Clone, Copy)]
pub struct DofMap {
    pub n_cells: usize,
    pub n_facets: usize,
}

impl DofMap {
    pub fn new(mesh: &Mesh) -> Self {
        DofMap {
            n_cells: mesh.n_cells(),
            n_facets: mesh.n_facets(),
        }
    }

    pub fn n_dofs(&self) -> usize {
        6 * self.n_cells + 2 * self.n_facets + 1
    }

    pub fn rho(&self, c: usize) -> usize {
        c
    }

    /// Start of the velocity block.
    pub fn u_offset(&self) -> usize {
        self.n_cells
    }

    /// Velocity dof `m in {0, 1}` of facet `e`.
    pub fn u(&self, e: usize, m: usize) -> usize {
        self.n_cells + 2 * e + m
    }

    pub fn p(&self, c: usize) -> usize {
        self.n_cells + 2 * self.n_facets + c
    }

    /// Component `k in 0..4` (row-major `[z11, z12, z21, z22]`) of the
    /// stress multiplier on cell `c`.
    pub fn z(&self, c: usize, k: usize) -> usize {
        2 * self.n_cells + 2 * self.n_facets + 4 * c + k
    }

    /// The pressure-mean Lagrange multiplier.
    pub fn lambda(&self) -> usize {
        6 * self.n_cells + 2 * self.n_facets
    }

    pub fn rho_range(&self) -> std::ops::Range<usize> {
        0..self.n_cells
    }

    pub fn u_range(&self) -> std::ops::Range<usize> {
        self.n_cells..self.n_cells + 2 * self.n_facets
    }

    pub fn p_range(&self) -> std::ops::Range<usize> {
        let s = self.n_cells + 2 * self.n_facets;
        s..s + self.n_cells
    }

    pub fn z_range(&self) -> std::ops::Range<usize> {
        let s = 2 * self.n_cells + 2 * self.n_facets;
        s..s + 4 * self.n_cells
    }

    /// Name of the field block containing global dof `i`, for solver
    /// error reports.
    pub fn block_name(&self, i: usize) -> &'static str {
        if self.rho_range().contains(&i) {
            "density"
        } else if self.u_range().contains(&i) {
            "velocity"
        } else if self.p_range().contains(&i) {
            "pressure"
        } else if self.z_range().contains(&i) {
            "stress multiplier"
        } else {
            "pressure mean constraint"
        }
    }
}

/// Per-cell BDM1 basis data. All six basis fields are linear, so their
/// gradients, symmetric gradients, and divergences are constant on the cell.
#[derive(Debug, Clone)]
pub struct CellBasis {
    /// `coeff[j][k]`: coefficient of centered monomial `j` in basis `k`.
    /// Monomials: `(1,0), (X,0), (Y,0), (0,1), (0,X), (0,Y)` with
    /// `X = x - xc`, `Y = y - yc` about the cell centroid.
    pub coeff: [[f64; 6]; 6],
    /// Gradient of basis `k`: `grad[k][r][s] = d phi_k^r / d x_s`.
    pub grad: [[[f64; 2]; 2]; 6],
    /// Symmetric gradient `D phi_k`.
    pub sym: [[[f64; 2]; 2]; 6],
    /// Divergence of basis `k`.
    pub div: [f64; 6],
    /// Basis values at the volume quadrature points: `vol_val[q][k]`.
    pub vol_val: [[[f64; 2]; 6]; NQ_TRI],
    /// Basis values at the facet quadrature points of the cell's three
    /// facets (in `cell_facets` order): `facet_val[loc][q][k]`.
    pub facet_val: [[[[f64; 2]; 6]; NQ_EDGE]; 3],
    /// Velocity-block dof index (`2 facet + m`) of basis `k`.
    pub ublock: [usize; 6],
}

/// Assembled basis caches for a mesh.
#[derive(Debug, Clone)]
pub struct FeSpace {
    pub dofs: DofMap,
    pub tri: TriRule,
    pub edge: EdgeRule,
    pub cells: Vec<CellBasis>,
    /// Physical volume quadrature points per cell.
    pub vol_pts: Vec<[[f64; 2]; NQ_TRI]>,
    /// Physical facet quadrature points per facet.
    pub facet_pts: Vec<[[f64; 2]; NQ_EDGE]>,
}

impl FeSpace {
    pub fn new(mesh: &Mesh) -> Self {
        let dofs = DofMap::new(mesh);
        let tri = TriRule::new();
        let edge = EdgeRule::new();

        let mut facet_pts = Vec::with_capacity(mesh.n_facets());
        for f in &mesh.facets {
            let pa = mesh.vertices[f.verts[0]];
            let pb = mesh.vertices[f.verts[1]];
            let mut pts = [[0.0; 2]; NQ_EDGE];
            for (q, &t) in edge.t.iter().enumerate() {
                pts[q] = [pa[0] + t * (pb[0] - pa[0]), pa[1] + t * (pb[1] - pa[1])];
            }
            facet_pts.push(pts);
        }

        let mut cells = Vec::with_capacity(mesh.n_cells());
        let mut vol_pts = Vec::with_capacity(mesh.n_cells());
        for c in 0..mesh.n_cells() {
            let xc = mesh.centroid[c];
            let mono = |j: usize, x: [f64; 2]| -> [f64; 2] {
                let xx = x[0] - xc[0];
                let yy = x[1] - xc[1];
                match j {
                    0 => [1.0, 0.0],
                    1 => [xx, 0.0],
                    2 => [yy, 0.0],
                    3 => [0.0, 1.0],
                    4 => [0.0, xx],
                    _ => [0.0, yy],
                }
            };

            // Vandermonde: rows are the six facet-moment functionals applied
            // to the six monomials.
            let mut vand = [[0.0; 6]; 6];
            let mut ublock = [0usize; 6];
            for (loc, &e) in mesh.cell_facets[c].iter().enumerate() {
                let n = mesh.facets[e].normal;
                for j in 0..6 {
                    let mut d0 = 0.0;
                    let mut d1 = 0.0;
                    for q in 0..NQ_EDGE {
                        let v = mono(j, facet_pts[e][q]);
                        let vn = v[0] * n[0] + v[1] * n[1];
                        let xi = 2.0 * edge.t[q] - 1.0;
                        d0 += edge.w[q] * vn;
                        d1 += edge.w[q] * vn * xi * 3.0;
                    }
                    vand[2 * loc][j] = d0;
                    vand[2 * loc + 1][j] = d1;
                }
                ublock[2 * loc] = 2 * e;
                ublock[2 * loc + 1] = 2 * e + 1;
            }
            let coeff = invert6(vand);

            let mut grad = [[[0.0; 2]; 2]; 6];
            let mut sym = [[[0.0; 2]; 2]; 6];
            let mut div = [0.0; 6];
            for k in 0..6 {
                let g = [
                    [coeff[1][k], coeff[2][k]],
                    [coeff[4][k], coeff[5][k]],
                ];
                grad[k] = g;
                sym[k] = [
                    [g[0][0], 0.5 * (g[0][1] + g[1][0])],
                    [0.5 * (g[0][1] + g[1][0]), g[1][1]],
                ];
                div[k] = g[0][0] + g[1][1];
            }

            let (b, v0) = mesh.cell_map(c);
            let mut pts = [[0.0; 2]; NQ_TRI];
            for (q, xi) in tri.xi.iter().enumerate() {
                pts[q] = [
                    v0[0] + b[0][0] * xi[0] + b[0][1] * xi[1],
                    v0[1] + b[1][0] * xi[0] + b[1][1] * xi[1],
                ];
            }

            let eval_basis = |k: usize, x: [f64; 2]| -> [f64; 2] {
                let mut v = [0.0; 2];
                for j in 0..6 {
                    let m = mono(j, x);
                    v[0] += coeff[j][k] * m[0];
                    v[1] += coeff[j][k] * m[1];
                }
                v
            };

            let mut vol_val = [[[0.0; 2]; 6]; NQ_TRI];
            for q in 0..NQ_TRI {
                for k in 0..6 {
                    vol_val[q][k] = eval_basis(k, pts[q]);
                }
            }
            let mut facet_val = [[[[0.0; 2]; 6]; NQ_EDGE]; 3];
            for (loc, &e) in mesh.cell_facets[c].iter().enumerate() {
                for q in 0..NQ_EDGE {
                    for k in 0..6 {
                        facet_val[loc][q][k] = eval_basis(k, facet_pts[e][q]);
                    }
                }
            }

            cells.push(CellBasis {
                coeff,
                grad,
                sym,
                div,
                vol_val,
                facet_val,
                ublock,
            });
            vol_pts.push(pts);
        }

        FeSpace {
            dofs,
            tri,
            edge,
            cells,
            vol_pts,
            facet_pts,
        }
    }

    /// Local index (0..3) of global facet `e` within cell `c`.
    pub fn local_facet(&self, mesh: &Mesh, c: usize, e: usize) -> usize {
        mesh.cell_facets[c]
            .iter()
            .position(|&x| x == e)
            .expect("facet incident to cell")
    }

    /// Evaluates a velocity (given by its block of facet-moment
    /// coefficients) at an arbitrary point of cell `c`.
    pub fn eval_velocity(&self, mesh: &Mesh, u_block: &[f64], c: usize, x: [f64; 2]) -> [f64; 2] {
        let cb = &self.cells[c];
        let xc = mesh.centroid[c];
        let xx = x[0] - xc[0];
        let yy = x[1] - xc[1];
        let mut v = [0.0; 2];
        for k in 0..6 {
            let a = u_block[cb.ublock[k]];
            v[0] += a * (cb.coeff[0][k] + cb.coeff[1][k] * xx + cb.coeff[2][k] * yy);
            v[1] += a * (cb.coeff[3][k] + cb.coeff[4][k] * xx + cb.coeff[5][k] * yy);
        }
        v
    }

    /// Constant divergence of a velocity on cell `c`.
    pub fn velocity_div(&self, u_block: &[f64], c: usize) -> f64 {
        let cb = &self.cells[c];
        (0..6).map(|k| u_block[cb.ublock[k]] * cb.div[k]).sum()
    }

    /// Constant gradient of a velocity on cell `c`.
    pub fn velocity_grad(&self, u_block: &[f64], c: usize) -> [[f64; 2]; 2] {
        let cb = &self.cells[c];
        let mut g = [[0.0; 2]; 2];
        for k in 0..6 {
            let a = u_block[cb.ublock[k]];
            for r in 0..2 {
                for s in 0..2 {
                    g[r][s] += a * cb.grad[k][r][s];
                }
            }
        }
        g
    }

    /// Constant symmetric gradient `D u` of a velocity on cell `c`.
    pub fn velocity_sym_grad(&self, u_block: &[f64], c: usize) -> [[f64; 2]; 2] {
        let g = self.velocity_grad(u_block, c);
        let off = 0.5 * (g[0][1] + g[1][0]);
        [[g[0][0], off], [off, g[1][1]]]
    }
}

/// First two normal moments of a vector field on facet `e` (the BDM facet
/// dofs of its interpolant).
pub fn normal_moments(
    mesh: &Mesh,
    fe: &FeSpace,
    e: usize,
    g: &dyn Fn([f64; 2]) -> [f64; 2],
) -> [f64; 2] {
    let n = mesh.facets[e].normal;
    let mut d = [0.0; 2];
    for q in 0..NQ_EDGE {
        let v = g(fe.facet_pts[e][q]);
        let vn = v[0] * n[0] + v[1] * n[1];
        let xi = 2.0 * fe.edge.t[q] - 1.0;
        d[0] += fe.edge.w[q] * vn;
        d[1] += fe.edge.w[q] * vn * xi * 3.0;
    }
    d
}

/// Canonical BDM1 interpolant of a vector field; returns the velocity block
/// (length `2 n_facets`).
pub fn interpolate_velocity(mesh: &Mesh, fe: &FeSpace, g: &dyn Fn([f64; 2]) -> [f64; 2]) -> Vec<f64> {
    let mut u = vec![0.0; 2 * mesh.n_facets()];
    for e in 0..mesh.n_facets() {
        let d = normal_moments(mesh, fe, e, g);
        u[2 * e] = d[0];
        u[2 * e + 1] = d[1];
    }
    u
}

/// Cell averages of a scalar field (its L2 projection onto cellwise
/// constants, up to quadrature).
pub fn project_p0(mesh: &Mesh, fe: &FeSpace, f: &dyn Fn([f64; 2]) -> f64) -> Vec<f64> {
    let mut vals = Vec::with_capacity(mesh.n_cells());
    for c in 0..mesh.n_cells() {
        // Reference weights sum to 1/2 and |det B| = 2 |K|, so the physical
        // mean is 2 * sum(w_q f(x_q)).
        let mean: f64 = (0..NQ_TRI)
            .map(|q| 2.0 * fe.tri.w[q] * f(fe.vol_pts[c][q]))
            .sum();
        vals.push(mean);
    }
    vals
}

/// Projects a velocity block onto cellwise divergence-free fields with
/// zero boundary normal moments, by the l2-closest point (a KKT system
/// solved directly). Used by property checks that need exactly div-free
/// random fields.
pub fn project_div_free(mesh: &Mesh, fe: &FeSpace, u0: &[f64]) -> Vec<f64> {
    let nu = 2 * mesh.n_facets();
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    for (e, f) in mesh.facets.iter().enumerate() {
        if f.is_boundary() {
            rows.push(vec![(2 * e, 1.0)]);
            rows.push(vec![(2 * e + 1, 1.0)]);
        }
    }
    // One divergence row is redundant once the boundary flux vanishes.
    for c in 0..mesh.n_cells() - 1 {
        let cb = &fe.cells[c];
        rows.push((0..6).map(|k| (cb.ublock[k], mesh.area[c] * cb.div[k])).collect());
    }
    let m = rows.len();
    let n = nu + m;
    let mut trips = Vec::new();
    for i in 0..nu {
        trips.push(Triplet::new(i, i, 1.0));
    }
    for (r, row) in rows.iter().enumerate() {
        for &(c, v) in row {
            trips.push(Triplet::new(nu + r, c, v));
            trips.push(Triplet::new(c, nu + r, v));
        }
    }
    let a = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &trips)
        .expect("projection triplets are well-formed");
    let lu = a.sp_lu().expect("projection KKT system is invertible");
    let rhs = Col::<f64>::from_fn(n, |i| if i < nu { u0[i] } else { 0.0 });
    let sol = lu.solve(&rhs);
    let u: Vec<f64> = (0..nu).map(|i| sol[i]).collect();
    for c in 0..mesh.n_cells() {
        assert!(fe.velocity_div(&u, c).abs() < 1e-10, "projection left divergence");
    }
    for (e, f) in mesh.facets.iter().enumerate() {
        if f.is_boundary() {
            assert!(u[2 * e].abs() < 1e-10 && u[2 * e + 1].abs() < 1e-10);
        }
    }
    u
}

/// Inverts a 6x6 matrix by Gauss-Jordan elimination with partial pivoting.
fn invert6(a: [[f64; 6]; 6]) -> [[f64; 6]; 6] {
    let mut m = [[0.0; 12]; 6];
    for i in 0..6 {
        m[i][..6].copy_from_slice(&a[i]);
        m[i][6 + i] = 1.0;
    }
    for col in 0..6 {
        let piv = (col..6)
            .max_by(|&r, &s| m[r][col].abs().total_cmp(&m[s][col].abs()))
            .unwrap();
        assert!(m[piv][col].abs() > 1e-14, "singular basis Vandermonde");
        m.swap(col, piv);
        let d = m[col][col];
        for j in 0..12 {
            m[col][j] /= d;
        }
        for r in 0..6 {
            if r != col {
                let f = m[r][col];
                if f != 0.0 {
                    for j in 0..12 {
                        m[r][j] -= f * m[col][j];
                    }
                }
            }
        }
    }
    let mut inv = [[0.0; 6]; 6];
    for i in 0..6 {
        inv[i].copy_from_slice(&m[i][6..]);
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::Split;
    use rand::{Rng, SeedableRng};

    fn mesh() -> Mesh {
        Mesh::rectangle(0.0, 1.5, -0.5, 0.5, 2, 3, Split::Alternating)
    }

    #[test]
    fn dof_counts() {
        let m = Mesh::rectangle(0.0, 1.0, 0.0, 1.0, 1, 1, Split::Uniform);
        let d = DofMap::new(&m);
        assert_eq!(d.n_dofs(), 6 * 2 + 2 * 5 + 1);
        let m = Mesh::rectangle(-0.5, 0.5, -2.0, 2.0, 32, 128, Split::Alternating);
        let d = DofMap::new(&m);
        assert_eq!(d.n_dofs(), 74049);
    }

    #[test]
    fn dof_blocks_partition() {
        let m = mesh();
        let d = DofMap::new(&m);
        let mut seen = vec![false; d.n_dofs()];
        for c in 0..m.n_cells() {
            seen[d.rho(c)] = true;
            seen[d.p(c)] = true;
            for k in 0..4 {
                seen[d.z(c, k)] = true;
            }
        }
        for e in 0..m.n_facets() {
            seen[d.u(e, 0)] = true;
            seen[d.u(e, 1)] = true;
        }
        seen[d.lambda()] = true;
        assert!(seen.iter().all(|&s| s), "dof map covers every index once");
    }

    #[test]
    fn basis_is_dual_to_functionals() {
        let m = mesh();
        let fe = FeSpace::new(&m);
        for c in 0..m.n_cells() {
            let cb = &fe.cells[c];
            for (loc, &e) in m.cell_facets[c].iter().enumerate() {
                let n = m.facets[e].normal;
                for k in 0..6 {
                    let mut d0 = 0.0;
                    let mut d1 = 0.0;
                    for q in 0..NQ_EDGE {
                        let v = cb.facet_val[loc][q][k];
                        let vn = v[0] * n[0] + v[1] * n[1];
                        let xi = 2.0 * fe.edge.t[q] - 1.0;
                        d0 += fe.edge.w[q] * vn;
                        d1 += fe.edge.w[q] * vn * xi * 3.0;
                    }
                    let want0 = if k == 2 * loc { 1.0 } else { 0.0 };
                    let want1 = if k == 2 * loc + 1 { 1.0 } else { 0.0 };
                    assert!((d0 - want0).abs() < 1e-12, "dof0 of basis {k} on facet {loc}");
                    assert!((d1 - want1).abs() < 1e-12, "dof1 of basis {k} on facet {loc}");
                }
            }
        }
    }

    #[test]
    fn interpolation_reproduces_linear_fields() {
        let m = mesh();
        let fe = FeSpace::new(&m);
        let g = |x: [f64; 2]| {
            [
                1.2 + 0.3 * x[0] - 0.7 * x[1],
                -0.5 + 0.9 * x[0] + 0.4 * x[1],
            ]
        };
        let u = interpolate_velocity(&m, &fe, &g);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let x = [rng.random_range(0.0..1.5), rng.random_range(-0.5..0.5)];
            let c = m.locate(x);
            let v = fe.eval_velocity(&m, &u, c, x);
            let e = g(x);
            assert!((v[0] - e[0]).abs() < 1e-12 && (v[1] - e[1]).abs() < 1e-12);
        }
        // Gradient and divergence of the interpolant match the field.
        for c in 0..m.n_cells() {
            let gr = fe.velocity_grad(&u, c);
            assert!((gr[0][0] - 0.3).abs() < 1e-12);
            assert!((gr[0][1] + 0.7).abs() < 1e-12);
            assert!((gr[1][0] - 0.9).abs() < 1e-12);
            assert!((gr[1][1] - 0.4).abs() < 1e-12);
            assert!((fe.velocity_div(&u, c) - 0.7).abs() < 1e-12);
            let sg = fe.velocity_sym_grad(&u, c);
            assert!((sg[0][1] - 0.5 * (-0.7 + 0.9)).abs() < 1e-12);
            assert!((sg[0][1] - sg[1][0]).abs() == 0.0);
        }
    }

    #[test]
    fn normal_component_is_continuous() {
        let m = mesh();
        let fe = FeSpace::new(&m);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let u: Vec<f64> = (0..2 * m.n_facets()).map(|_| rng.random_range(-1.0..1.0)).collect();
        for (e, f) in m.facets.iter().enumerate() {
            let Some(km) = f.cell_minus else { continue };
            let kp = f.cell_plus;
            let lp = fe.local_facet(&m, kp, e);
            let lm = fe.local_facet(&m, km, e);
            for q in 0..NQ_EDGE {
                let tr = |c: usize, loc: usize| -> f64 {
                    let cb = &fe.cells[c];
                    let mut vn = 0.0;
                    for k in 0..6 {
                        let v = cb.facet_val[loc][q][k];
                        vn += u[cb.ublock[k]] * (v[0] * f.normal[0] + v[1] * f.normal[1]);
                    }
                    vn
                };
                assert!((tr(kp, lp) - tr(km, lm)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn p0_projection_of_linear_is_centroid_value() {
        let m = mesh();
        let fe = FeSpace::new(&m);
        let f = |x: [f64; 2]| 2.0 - 0.8 * x[0] + 1.7 * x[1];
        let p = project_p0(&m, &fe, &f);
        for c in 0..m.n_cells() {
            assert!((p[c] - f(m.centroid[c])).abs() < 1e-13);
        }
        let ones = project_p0(&m, &fe, &|_| 4.25);
        assert!(ones.iter().all(|&v| (v - 4.25).abs() < 1e-13));
    }

    #[test]
    fn invert6_roundtrip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut a = [[0.0; 6]; 6];
        for row in a.iter_mut() {
            for v in row.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        for i in 0..6 {
            a[i][i] += 3.0;
        }
        let inv = invert6(a);
        for i in 0..6 {
            for j in 0..6 {
                let s: f64 = (0..6).map(|k| a[i][k] * inv[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((s - want).abs() < 1e-12);
            }
        }
    }
}
