//! Huber (bi-viscosity) regularization of the Bingham constitutive law.
//!
//! For a symmetric tensor `A`, the constitutive magnitude is
//! `|A| = sqrt(A:A / 2)`. The factor 1/2 is the convention under which the
//! yield criterion is stated: in simple shear `u = (u(y), 0)` it gives
//! `|Du| = |u'|/2`, so the rigid core of a channel flow driven by a unit
//! pressure gradient has half-width exactly `tau_s` (with the plain
//! Frobenius norm it would be `tau_s/sqrt(2)`, which contradicts the
//! analytical plug profile the channel benchmark converges to). The
//! regularized norm is `|A|_g = max(tau_s, gamma |A|)`, the effective
//! viscosity is `mu(t) = 2 eta + tau_s gamma / t`, and the regularized
//! stress is `tau(A) = mu(|A|_g) A`. Below the yield threshold
//! (`gamma |A| < tau_s`) the law is linear with viscosity `2 eta + gamma`;
//! at or above it the stress equals the Bingham stress
//! `2 eta A + tau_s A/|A|` exactly. A point is called active when
//! `gamma |A| >= tau_s` (ties count as active).
//!
//! The map `A -> tau(A)` is globally Lipschitz with constant
//! `2 eta + 2 gamma` and strongly monotone with constant `2 eta`; the
//! regularized norm itself is Lipschitz with constant `gamma` (all in the
//! scaled magnitude). The tests below check all three on random tensor
//! pairs.

/// Row-major 2x2 tensor.
pub type Mat2 = [[f64; 2]; 2];

pub fn frob_inner(a: &Mat2, b: &Mat2) -> f64 {
    a[0][0] * b[0][0] + a[0][1] * b[0][1] + a[1][0] * b[1][0] + a[1][1] * b[1][1]
}

pub fn frob_norm(a: &Mat2) -> f64 {
    frob_inner(a, a).sqrt()
}

/// Constitutive tensor magnitude `sqrt(A:A / 2)`; every yield-criterion
/// comparison against `tau_s` uses this scaling.
pub fn tensor_mag(a: &Mat2) -> f64 {
    (0.5 * frob_inner(a, a)).sqrt()
}

/// Regularization parameters: plastic viscosity `eta`, yield stress
/// `tau_s`, regularization slope `gamma`.
#[derive(Debug, Clone, Copy)]
pub struct Huber {
    pub eta: f64,
    pub tau_s: f64,
    pub gamma: f64,
}

impl Huber {
    /// Regularized norm `|A|_g = max(tau_s, gamma |A|)`.
    pub fn norm(&self, a: &Mat2) -> f64 {
        self.norm_of_mag(tensor_mag(a))
    }

    /// Regularized norm from a precomputed tensor magnitude `|A|`.
    pub fn norm_of_mag(&self, mag: f64) -> f64 {
        (self.gamma * mag).max(self.tau_s)
    }

    /// Effective viscosity `mu(t) = 2 eta + tau_s gamma / t` for a
    /// regularized-norm value `t` (which is >= tau_s by construction, so
    /// the quotient is safe whenever tau_s > 0).
    pub fn mu(&self, t: f64) -> f64 {
        if self.tau_s <= 0.0 {
            2.0 * self.eta
        } else {
            2.0 * self.eta + self.tau_s * self.gamma / t
        }
    }

    /// Effective viscosity at the tensor `A`.
    pub fn mu_at(&self, a: &Mat2) -> f64 {
        self.mu(self.norm(a))
    }

    /// Regularized stress `tau(A) = mu(|A|_g) A`.
    pub fn stress(&self, a: &Mat2) -> Mat2 {
        let m = self.mu_at(a);
        [
            [m * a[0][0], m * a[0][1]],
            [m * a[1][0], m * a[1][1]],
        ]
    }

    /// Active-set classifier: `gamma |A| >= tau_s`, ties active.
    pub fn active(&self, a: &Mat2) -> bool {
        self.gamma * tensor_mag(a) >= self.tau_s
    }

    /// Lipschitz constant of `A -> tau(A)`.
    pub fn stress_lipschitz(&self) -> f64 {
        2.0 * self.eta + 2.0 * self.gamma
    }

    /// Strong monotonicity constant of `A -> tau(A)`.
    pub fn monotonicity(&self) -> f64 {
        2.0 * self.eta
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_sym(rng: &mut impl Rng, scale: f64) -> Mat2 {
        let a = rng.random_range(-scale..scale);
        let b = rng.random_range(-scale..scale);
        let c = rng.random_range(-scale..scale);
        [[a, b], [b, c]]
    }

    fn sub(a: &Mat2, b: &Mat2) -> Mat2 {
        [
            [a[0][0] - b[0][0], a[0][1] - b[0][1]],
            [a[1][0] - b[1][0], a[1][1] - b[1][1]],
        ]
    }

    #[test]
    fn plateau_and_slope_values() {
        let h = Huber { eta: 1.0, tau_s: 2.5, gamma: 1e3 };
        // Inactive tensors all see the bi-viscosity plateau 2 eta + gamma.
        let small = [[1e-6, 0.0], [0.0, -1e-6]];
        assert!(!h.active(&small));
        assert!((h.mu_at(&small) - (2.0 + 1e3)).abs() < 1e-9);
        // Far into the active set: mu(5000) = 2 + 2.5 * 1000 / 5000.
        assert!((h.mu(5000.0) - 2.5).abs() < 1e-12);
        // Tie is active; diag(m, m) has magnitude exactly m.
        let mag = h.tau_s / h.gamma;
        let tie = [[mag, 0.0], [0.0, mag]];
        assert!(h.active(&tie));
        assert_eq!(h.norm(&tie), h.tau_s);
        // Zero yield stress collapses to a Newtonian law.
        let newt = Huber { eta: 0.7, tau_s: 0.0, gamma: 1e3 };
        assert!((newt.mu_at(&small) - 1.4).abs() < 1e-15);
        let z = [[0.0; 2]; 2];
        assert!(newt.mu_at(&z).is_finite());
    }

    #[test]
    fn stress_of_zero_is_zero() {
        let h = Huber { eta: 1.0, tau_s: 2.5, gamma: 10.0 };
        let t = h.stress(&[[0.0; 2]; 2]);
        assert_eq!(frob_norm(&t), 0.0);
    }

    #[test]
    fn norm_is_gamma_lipschitz() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for &(tau_s, gamma) in &[(0.0, 10.0), (2.5, 10.0), (0.0, 1e3), (2.5, 1e3)] {
            let h = Huber { eta: 1.0, tau_s, gamma };
            for _ in 0..500 {
                let x = random_sym(&mut rng, 2.0);
                let y = random_sym(&mut rng, 2.0);
                let lhs = (h.norm(&x) - h.norm(&y)).abs();
                let rhs = gamma * tensor_mag(&sub(&x, &y));
                assert!(lhs <= rhs + 1e-12, "norm Lipschitz violated: {lhs} > {rhs}");
            }
        }
    }

    #[test]
    fn stress_is_lipschitz_and_strongly_monotone() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        for &(tau_s, gamma) in &[(0.0, 10.0), (2.5, 10.0), (0.0, 1e3), (2.5, 1e3)] {
            let h = Huber { eta: 1.0, tau_s, gamma };
            for _ in 0..500 {
                let x = random_sym(&mut rng, 2.0);
                let y = random_sym(&mut rng, 2.0);
                let d = sub(&x, &y);
                let dn = tensor_mag(&d);
                let dt = sub(&h.stress(&x), &h.stress(&y));
                let lip = tensor_mag(&dt);
                assert!(
                    lip <= h.stress_lipschitz() * dn + 1e-12,
                    "stress Lipschitz violated: {lip} > {} * {dn}",
                    h.stress_lipschitz()
                );
                // Pairing scaled like the magnitude: (A, B) = A:B / 2.
                let mono = 0.5 * frob_inner(&dt, &d);
                assert!(
                    mono >= h.monotonicity() * dn * dn - 1e-12,
                    "monotonicity violated: {mono} < {} * {dn}^2",
                    h.monotonicity()
                );
            }
        }
    }

    #[test]
    fn stress_matches_bingham_law_on_the_active_set() {
        let h = Huber { eta: 1.0, tau_s: 2.5, gamma: 1e3 };
        let a = [[3.0, 1.0], [1.0, -3.0]];
        let t = h.stress(&a);
        let mag = tensor_mag(&a);
        let exact = |r: usize, s: usize| 2.0 * a[r][s] + h.tau_s * a[r][s] / mag;
        for r in 0..2 {
            for s in 0..2 {
                assert!((t[r][s] - exact(r, s)).abs() < 1e-10);
            }
        }
    }
}
