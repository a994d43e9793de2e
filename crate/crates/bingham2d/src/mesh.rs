//! Structured triangulations of axis-aligned rectangles.
//!
//! Conventions shared by every module that touches the mesh:
//!
//! - Cell vertex triples are counterclockwise, so signed cell areas are
//!   positive and `det B = 2 |K|` for the affine reference map.
//! - A facet is an undirected edge stored as the global vertex pair
//!   `(a, b)` with `a < b`. Facet ids are assigned in lexicographic order
//!   of those pairs, which makes ids reproducible across runs.
//! - An interior facet has two adjacent cells: `K+` is the one with the
//!   lower cell id, `K-` the other. The stored unit normal points out of
//!   `K+`, and jumps are `[v] = v|K+ - v|K-`. A boundary facet has only
//!   `K+`, its normal points out of the domain, and `[v] = v`.
//! - The facet tangent points from vertex `a` to vertex `b`; the linear
//!   facet coordinate used by the velocity dofs runs the same way.

/// Which side of the rectangle a boundary facet lies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Bottom,
    Right,
    Top,
    Left,
}

/// Diagonal pattern used to split the grid quads into triangles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    /// Every quad is split along its lower-left to upper-right diagonal.
    Uniform,
    /// Quads alternate diagonal direction in a checkerboard pattern. For an
    /// even number of columns the triangulation is mirror symmetric about
    /// the vertical midline of the rectangle.
    Alternating,
}

/// An undirected mesh edge with its adjacency and geometry.
#[derive(Debug, Clone)]
pub struct Facet {
    /// Global vertex ids, `verts[0] < verts[1]`.
    pub verts: [usize; 2],
    /// Adjacent cell with the lower id (`K+`).
    pub cell_plus: usize,
    /// Adjacent cell with the higher id (`K-`); `None` on the boundary.
    pub cell_minus: Option<usize>,
    /// Unit normal pointing out of `K+`.
    pub normal: [f64; 2],
    /// Unit tangent pointing from `verts[0]` to `verts[1]`.
    pub tangent: [f64; 2],
    /// Edge length.
    pub length: f64,
    /// Edge midpoint.
    pub midpoint: [f64; 2],
    /// Side tag for boundary facets, `None` for interior ones.
    pub boundary: Option<Side>,
}

impl Facet {
    pub fn is_boundary(&self) -> bool {
        self.cell_minus.is_none()
    }
}

/// Triangulation of `[x0, x1] x [y0, y1]` into `2 nx ny` triangles.
#[derive(Debug, Clone)]
pub struct Mesh {
    pub nx: usize,
    pub ny: usize,
    /// `[x0, x1, y0, y1]`.
    pub bounds: [f64; 4],
    pub split: Split,
    pub vertices: Vec<[f64; 2]>,
    /// Counterclockwise vertex triples.
    pub cells: Vec<[usize; 3]>,
    /// The three facet ids of each cell, ascending.
    pub cell_facets: Vec<[usize; 3]>,
    pub facets: Vec<Facet>,
    pub area: Vec<f64>,
    pub centroid: Vec<[f64; 2]>,
}

impl Mesh {
    /// Builds the structured triangulation. Vertex `(i, j)` has id
    /// `j (nx + 1) + i`; quad `(i, j)` contributes cells `2 (j nx + i)` and
    /// `2 (j nx + i) + 1`.
    pub fn rectangle(x0: f64, x1: f64, y0: f64, y1: f64, nx: usize, ny: usize, split: Split) -> Self {
        assert!(nx >= 1 && ny >= 1, "mesh needs at least one quad per direction");
        assert!(x1 > x0 && y1 > y0, "mesh bounds must be increasing");

        let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
        let mut vertex_ij = Vec::with_capacity((nx + 1) * (ny + 1));
        for j in 0..=ny {
            let t = j as f64 / ny as f64;
            let y = (1.0 - t) * y0 + t * y1;
            for i in 0..=nx {
                let s = i as f64 / nx as f64;
                let x = (1.0 - s) * x0 + s * x1;
                vertices.push([x, y]);
                vertex_ij.push((i, j));
            }
        }

        let vid = |i: usize, j: usize| j * (nx + 1) + i;
        let mut cells = Vec::with_capacity(2 * nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let v00 = vid(i, j);
                let v10 = vid(i + 1, j);
                let v01 = vid(i, j + 1);
                let v11 = vid(i + 1, j + 1);
                let lower_left_diag = match split {
                    Split::Uniform => true,
                    Split::Alternating => (i + j) % 2 == 0,
                };
                if lower_left_diag {
                    cells.push([v00, v10, v11]);
                    cells.push([v00, v11, v01]);
                } else {
                    cells.push([v00, v10, v01]);
                    cells.push([v10, v11, v01]);
                }
            }
        }

        // Collect undirected edges; BTreeMap iteration yields the
        // lexicographic facet ordering.
        let mut edge_cells: std::collections::BTreeMap<(usize, usize), Vec<usize>> =
            std::collections::BTreeMap::new();
        for (c, verts) in cells.iter().enumerate() {
            for k in 0..3 {
                let a = verts[k];
                let b = verts[(k + 1) % 3];
                let key = (a.min(b), a.max(b));
                edge_cells.entry(key).or_default().push(c);
            }
        }

        let mut area = Vec::with_capacity(cells.len());
        let mut centroid = Vec::with_capacity(cells.len());
        for verts in &cells {
            let p: Vec<[f64; 2]> = verts.iter().map(|&v| vertices[v]).collect();
            let signed = 0.5
                * ((p[1][0] - p[0][0]) * (p[2][1] - p[0][1])
                    - (p[1][1] - p[0][1]) * (p[2][0] - p[0][0]));
            assert!(signed > 0.0, "cell orientation must be counterclockwise");
            area.push(signed);
            centroid.push([
                (p[0][0] + p[1][0] + p[2][0]) / 3.0,
                (p[0][1] + p[1][1] + p[2][1]) / 3.0,
            ]);
        }

        let mut facets = Vec::with_capacity(edge_cells.len());
        let mut facet_id: std::collections::BTreeMap<(usize, usize), usize> =
            std::collections::BTreeMap::new();
        for (&(a, b), adj) in &edge_cells {
            assert!(adj.len() == 1 || adj.len() == 2, "edge adjacent to 1 or 2 cells");
            let cell_plus = *adj.iter().min().unwrap();
            let cell_minus = if adj.len() == 2 { Some(*adj.iter().max().unwrap()) } else { None };

            let pa = vertices[a];
            let pb = vertices[b];
            let dx = pb[0] - pa[0];
            let dy = pb[1] - pa[1];
            let length = dx.hypot(dy);
            let tangent = [dx / length, dy / length];
            let midpoint = [0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])];
            // Rotate the tangent and flip so the normal leaves K+.
            let mut normal = [tangent[1], -tangent[0]];
            let cp = centroid[cell_plus];
            if normal[0] * (midpoint[0] - cp[0]) + normal[1] * (midpoint[1] - cp[1]) < 0.0 {
                normal = [-normal[0], -normal[1]];
            }

            let boundary = if cell_minus.is_some() {
                None
            } else {
                let (ia, ja) = vertex_ij[a];
                let (ib, jb) = vertex_ij[b];
                let side = if ia == 0 && ib == 0 {
                    Side::Left
                } else if ia == nx && ib == nx {
                    Side::Right
                } else if ja == 0 && jb == 0 {
                    Side::Bottom
                } else if ja == ny && jb == ny {
                    Side::Top
                } else {
                    unreachable!("boundary facet not on any rectangle side")
                };
                Some(side)
            };

            facet_id.insert((a, b), facets.len());
            facets.push(Facet {
                verts: [a, b],
                cell_plus,
                cell_minus,
                normal,
                tangent,
                length,
                midpoint,
                boundary,
            });
        }

        let mut cell_facets = Vec::with_capacity(cells.len());
        for verts in &cells {
            let mut ids = [0usize; 3];
            for k in 0..3 {
                let a = verts[k];
                let b = verts[(k + 1) % 3];
                ids[k] = facet_id[&(a.min(b), a.max(b))];
            }
            ids.sort_unstable();
            cell_facets.push(ids);
        }

        Mesh {
            nx,
            ny,
            bounds: [x0, x1, y0, y1],
            split,
            vertices,
            cells,
            cell_facets,
            facets,
            area,
            centroid,
        }
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn n_facets(&self) -> usize {
        self.facets.len()
    }

    /// Grid spacing in x.
    pub fn hx(&self) -> f64 {
        (self.bounds[1] - self.bounds[0]) / self.nx as f64
    }

    /// Grid spacing in y.
    pub fn hy(&self) -> f64 {
        (self.bounds[3] - self.bounds[2]) / self.ny as f64
    }

    /// Largest cell diameter.
    pub fn mesh_size(&self) -> f64 {
        self.hx().hypot(self.hy())
    }

    /// Vertex coordinates of cell `c`, counterclockwise.
    pub fn cell_coords(&self, c: usize) -> [[f64; 2]; 3] {
        let v = self.cells[c];
        [self.vertices[v[0]], self.vertices[v[1]], self.vertices[v[2]]]
    }

    /// Affine map `x = v0 + B xi` from the reference triangle
    /// `{xi1, xi2 >= 0, xi1 + xi2 <= 1}` onto cell `c`; `B` is row-major
    /// with columns `v1 - v0` and `v2 - v0`, `det B = 2 |K| > 0`.
    pub fn cell_map(&self, c: usize) -> ([[f64; 2]; 2], [f64; 2]) {
        let p = self.cell_coords(c);
        let b = [
            [p[1][0] - p[0][0], p[2][0] - p[0][0]],
            [p[1][1] - p[0][1], p[2][1] - p[0][1]],
        ];
        (b, p[0])
    }

    /// Cell containing the point `p`; points on cell interfaces resolve to
    /// one of the touching cells, points outside the rectangle clamp to the
    /// nearest boundary quad.
    pub fn locate(&self, p: [f64; 2]) -> usize {
        let [x0, x1, y0, y1] = self.bounds;
        let fx = ((p[0] - x0) / (x1 - x0) * self.nx as f64).floor();
        let fy = ((p[1] - y0) / (y1 - y0) * self.ny as f64).floor();
        let i = (fx.max(0.0) as usize).min(self.nx - 1);
        let j = (fy.max(0.0) as usize).min(self.ny - 1);
        let q = j * self.nx + i;
        let lower_left_diag = match self.split {
            Split::Uniform => true,
            Split::Alternating => (i + j) % 2 == 0,
        };
        // Pick the triangle by the side of the quad diagonal.
        let vid = |i: usize, j: usize| j * (self.nx + 1) + i;
        if lower_left_diag {
            let a = self.vertices[vid(i, j)];
            let b = self.vertices[vid(i + 1, j + 1)];
            let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
            if cross <= 0.0 {
                2 * q
            } else {
                2 * q + 1
            }
        } else {
            let a = self.vertices[vid(i + 1, j)];
            let b = self.vertices[vid(i, j + 1)];
            let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
            if cross >= 0.0 {
                2 * q
            } else {
                2 * q + 1
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn unit_quad_counts() {
        let m = Mesh::rectangle(0.0, 1.0, 0.0, 1.0, 1, 1, Split::Uniform);
        assert_eq!(m.n_vertices(), 4);
        assert_eq!(m.n_cells(), 2);
        assert_eq!(m.n_facets(), 5);
    }

    #[test]
    fn two_by_two_counts() {
        let m = Mesh::rectangle(0.0, 1.0, 0.0, 1.0, 2, 2, Split::Uniform);
        assert_eq!(m.n_vertices(), 9);
        assert_eq!(m.n_cells(), 8);
        assert_eq!(m.n_facets(), 16);
    }

    #[test]
    fn euler_and_boundary_counts() {
        for &(nx, ny) in &[(1, 1), (3, 2), (4, 4), (5, 3)] {
            for &split in &[Split::Uniform, Split::Alternating] {
                let m = Mesh::rectangle(-0.5, 0.5, 0.0, 2.0, nx, ny, split);
                // Planar Euler formula without the outer face.
                assert_eq!(
                    m.n_vertices() as i64 - m.n_facets() as i64 + m.n_cells() as i64,
                    1
                );
                let nb = m.facets.iter().filter(|f| f.is_boundary()).count();
                assert_eq!(nb, 2 * (nx + ny));
            }
        }
    }

    #[test]
    fn areas_and_centroids() {
        let m = Mesh::rectangle(0.0, 2.0, 0.0, 3.0, 4, 5, Split::Alternating);
        let expect = m.hx() * m.hy() / 2.0;
        let mut total = 0.0;
        for c in 0..m.n_cells() {
            assert!((m.area[c] - expect).abs() < 1e-14 * expect);
            total += m.area[c];
        }
        assert!((total - 6.0).abs() < 1e-12);
        // Centroid of each cell lies inside its bounding quad.
        for c in 0..m.n_cells() {
            let p = m.centroid[c];
            assert!(p[0] > 0.0 && p[0] < 2.0 && p[1] > 0.0 && p[1] < 3.0);
        }
    }

    #[test]
    fn facet_ordering_and_adjacency() {
        let m = Mesh::rectangle(0.0, 1.0, 0.0, 1.0, 3, 3, Split::Uniform);
        for w in m.facets.windows(2) {
            assert!(w[0].verts < w[1].verts, "facets sorted by vertex pair");
        }
        for f in &m.facets {
            assert!(f.verts[0] < f.verts[1]);
            if let Some(km) = f.cell_minus {
                assert!(f.cell_plus < km);
            }
        }
    }

    #[test]
    fn normals_unit_and_outward() {
        let m = Mesh::rectangle(0.0, 1.0, 0.0, 2.0, 3, 4, Split::Alternating);
        for f in &m.facets {
            let n = f.normal;
            assert!((n[0].hypot(n[1]) - 1.0).abs() < 1e-14);
            assert!((n[0] * f.tangent[0] + n[1] * f.tangent[1]).abs() < 1e-14);
            let cp = m.centroid[f.cell_plus];
            let d = n[0] * (f.midpoint[0] - cp[0]) + n[1] * (f.midpoint[1] - cp[1]);
            assert!(d > 0.0, "normal must leave K+");
            match f.boundary {
                Some(Side::Left) => assert!((n[0] + 1.0).abs() < 1e-14 && n[1].abs() < 1e-14),
                Some(Side::Right) => assert!((n[0] - 1.0).abs() < 1e-14 && n[1].abs() < 1e-14),
                Some(Side::Bottom) => assert!((n[1] + 1.0).abs() < 1e-14 && n[0].abs() < 1e-14),
                Some(Side::Top) => assert!((n[1] - 1.0).abs() < 1e-14 && n[0].abs() < 1e-14),
                None => {
                    let km = f.cell_minus.expect("interior facet has K-");
                    let cm = m.centroid[km];
                    let dm = n[0] * (f.midpoint[0] - cm[0]) + n[1] * (f.midpoint[1] - cm[1]);
                    assert!(dm < 0.0, "normal must enter K-");
                }
            }
        }
    }

    #[test]
    fn facet_lengths_match_grid() {
        let m = Mesh::rectangle(0.0, 1.0, 0.0, 1.0, 4, 4, Split::Uniform);
        let (hx, hy) = (m.hx(), m.hy());
        let diag = hx.hypot(hy);
        for f in &m.facets {
            let ok = (f.length - hx).abs() < 1e-14
                || (f.length - hy).abs() < 1e-14
                || (f.length - diag).abs() < 1e-14;
            assert!(ok, "facet length {} not an edge of the grid", f.length);
        }
    }

    #[test]
    fn cell_facets_are_incident() {
        let m = Mesh::rectangle(0.0, 1.0, 0.0, 1.0, 3, 2, Split::Alternating);
        for c in 0..m.n_cells() {
            let ids = m.cell_facets[c];
            assert!(ids[0] < ids[1] && ids[1] < ids[2]);
            for &e in &ids {
                let f = &m.facets[e];
                assert!(f.cell_plus == c || f.cell_minus == Some(c));
            }
        }
    }

    #[test]
    fn alternating_split_is_mirror_symmetric_for_even_nx() {
        let m = Mesh::rectangle(-0.5, 0.5, 0.0, 2.0, 4, 3, Split::Alternating);
        for c in 0..m.n_cells() {
            let p = m.centroid[c];
            let q = [-p[0], p[1]];
            let cm = m.locate(q);
            assert!((m.centroid[cm][0] + p[0]).abs() < 1e-13);
            assert!((m.centroid[cm][1] - p[1]).abs() < 1e-13);
            assert!((m.area[cm] - m.area[c]).abs() < 1e-14);
        }
    }

    #[test]
    fn locate_recovers_centroids_and_random_points() {
        let inside = |m: &Mesh, c: usize, p: [f64; 2]| {
            let v = m.cell_coords(c);
            let s = |a: [f64; 2], b: [f64; 2]| {
                (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
            };
            let tol = 1e-12;
            s(v[0], v[1]) >= -tol && s(v[1], v[2]) >= -tol && s(v[2], v[0]) >= -tol
        };
        for &split in &[Split::Uniform, Split::Alternating] {
            let m = Mesh::rectangle(-1.0, 2.0, 0.5, 1.5, 5, 4, split);
            for c in 0..m.n_cells() {
                assert_eq!(m.locate(m.centroid[c]), c);
            }
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
            for _ in 0..500 {
                let p = [rng.random_range(-1.0..2.0), rng.random_range(0.5..1.5)];
                let c = m.locate(p);
                assert!(inside(&m, c, p), "located cell must contain the point");
            }
        }
    }

    #[test]
    fn cell_map_is_affine_onto_cell() {
        let m = Mesh::rectangle(0.0, 1.0, 0.0, 1.0, 2, 3, Split::Uniform);
        for c in 0..m.n_cells() {
            let (b, v0) = m.cell_map(c);
            let p = m.cell_coords(c);
            let det = b[0][0] * b[1][1] - b[0][1] * b[1][0];
            assert!((det - 2.0 * m.area[c]).abs() < 1e-14);
            // Reference vertices map onto the cell vertices.
            for (xi, pk) in [([0.0, 0.0], p[0]), ([1.0, 0.0], p[1]), ([0.0, 1.0], p[2])] {
                let x = [
                    v0[0] + b[0][0] * xi[0] + b[0][1] * xi[1],
                    v0[1] + b[1][0] * xi[0] + b[1][1] * xi[1],
                ];
                assert!((x[0] - pk[0]).abs() < 1e-15 && (x[1] - pk[1]).abs() < 1e-15);
            }
        }
    }
}
