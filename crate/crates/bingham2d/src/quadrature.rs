//! Quadrature rules on the reference triangle and the reference edge.
//!
//! The volume rule is a 6-point symmetric rule exact for polynomials of
//! total degree 4 on the reference triangle `{xi1, xi2 >= 0, xi1 + xi2 <= 1}`;
//! its weights sum to the reference area 1/2. The edge rule is 4-point
//! Gauss-Legendre on `[0, 1]`, exact for degree 7, weights summing to 1.
//! Both are more than exact for every integrand this crate assembles
//! (products of linear basis functions and cellwise-constant coefficients).

/// Symmetric 6-point triangle rule, exact for degree 4.
#[derive(Debug, Clone)]
pub struct TriRule {
    /// Reference coordinates `(xi1, xi2)`.
    pub xi: [[f64; 2]; 6],
    /// Weights, summing to 1/2.
    pub w: [f64; 6],
}

impl TriRule {
    pub fn new() -> Self {
        // Two symmetric orbits with barycentric signatures (a, b, b).
        let a1 = 0.108103018168070;
        let b1 = 0.445948490915965;
        let w1 = 0.223381589678011 * 0.5;
        let a2 = 0.816847572980459;
        let b2 = 0.091576213509771;
        let w2 = 0.109951743655322 * 0.5;
        TriRule {
            xi: [
                [b1, b1],
                [a1, b1],
                [b1, a1],
                [b2, b2],
                [a2, b2],
                [b2, a2],
            ],
            w: [w1, w1, w1, w2, w2, w2],
        }
    }
}

impl Default for TriRule {
    fn default() -> Self {
        Self::new()
    }
}

/// 4-point Gauss-Legendre rule on `[0, 1]`, exact for degree 7.
#[derive(Debug, Clone)]
pub struct EdgeRule {
    /// Nodes in `(0, 1)`.
    pub t: [f64; 4],
    /// Weights, summing to 1.
    pub w: [f64; 4],
}

impl EdgeRule {
    pub fn new() -> Self {
        let r1 = ((3.0 - 2.0 * (6.0f64 / 5.0).sqrt()) / 7.0).sqrt();
        let r2 = ((3.0 + 2.0 * (6.0f64 / 5.0).sqrt()) / 7.0).sqrt();
        let w1 = (18.0 + 30.0f64.sqrt()) / 72.0;
        let w2 = (18.0 - 30.0f64.sqrt()) / 72.0;
        EdgeRule {
            t: [
                0.5 - 0.5 * r2,
                0.5 - 0.5 * r1,
                0.5 + 0.5 * r1,
                0.5 + 0.5 * r2,
            ],
            w: [w2, w1, w1, w2],
        }
    }
}

impl Default for EdgeRule {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exact monomial integral over the reference triangle:
    /// `int xi1^a xi2^b = a! b! / (a + b + 2)!`.
    fn tri_monomial(a: u32, b: u32) -> f64 {
        let fact = |n: u32| (1..=n).map(|k| k as f64).product::<f64>().max(1.0);
        fact(a) * fact(b) / fact(a + b + 2)
    }

    #[test]
    fn tri_rule_weight_sum() {
        let r = TriRule::new();
        let s: f64 = r.w.iter().sum();
        assert!((s - 0.5).abs() < 1e-15);
    }

    #[test]
    fn tri_rule_exact_to_degree_four() {
        let r = TriRule::new();
        for a in 0..=4u32 {
            for b in 0..=(4 - a) {
                let q: f64 = (0..6)
                    .map(|k| r.w[k] * r.xi[k][0].powi(a as i32) * r.xi[k][1].powi(b as i32))
                    .sum();
                let exact = tri_monomial(a, b);
                assert!(
                    (q - exact).abs() < 1e-15,
                    "xi1^{a} xi2^{b}: quadrature {q}, exact {exact}"
                );
            }
        }
    }

    #[test]
    fn tri_rule_points_inside() {
        let r = TriRule::new();
        for p in r.xi {
            assert!(p[0] > 0.0 && p[1] > 0.0 && p[0] + p[1] < 1.0);
        }
    }

    #[test]
    fn edge_rule_exact_to_degree_seven() {
        let r = EdgeRule::new();
        for k in 0..=7u32 {
            let q: f64 = (0..4).map(|i| r.w[i] * r.t[i].powi(k as i32)).sum();
            let exact = 1.0 / (k as f64 + 1.0);
            assert!((q - exact).abs() < 1e-15, "t^{k}: quadrature {q}, exact {exact}");
        }
        // Degree 7 oracle spelled out once more as a plain number.
        let q7: f64 = (0..4).map(|i| r.w[i] * r.t[i].powi(7)).sum();
        assert!((q7 - 0.125).abs() < 1e-15);
    }

    #[test]
    fn edge_rule_symmetric() {
        let r = EdgeRule::new();
        assert!((r.t[0] + r.t[3] - 1.0).abs() < 1e-15);
        assert!((r.t[1] + r.t[2] - 1.0).abs() < 1e-15);
        assert!((r.w[0] - r.w[3]).abs() < 1e-16);
        assert!((r.w[1] - r.w[2]).abs() < 1e-16);
    }
}
