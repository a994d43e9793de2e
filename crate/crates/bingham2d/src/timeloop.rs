//! Time integration driver: a backward Euler start-up step followed by
//! second-order backward differentiation, with per-step solver reports, a
//! density floor guard, and restartable state snapshots.
//!
//! The state after step `n` carries the full coefficient vector of level
//! `n` together with the density and velocity of level `n - 1`; that pair
//! is exactly what the two-level time stencil and the stability monitors
//! need, and it is what checkpoints persist. Pressure, stress multiplier,
//! and the previous velocity field carry over as the initial Newton guess
//! for the next step.

use thiserror::Error;

use crate::fespace::FeSpace;
use crate::forms::{consistent_multiplier, BoundaryConds, Constraints, FacetWeight, Problem};
use crate::huber::Huber;
use crate::mesh::Mesh;
use crate::ssn::{solve_step, SolveError, SsnOptions, SsnReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeScheme {
    /// Backward Euler for the first step, BDF2 afterwards.
    Bdf2,
    /// Backward Euler throughout.
    BackwardEuler,
}

/// Reaction to a converged step whose density falls below the floor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuardMode {
    /// Abort with a diagnostic naming the offending cell.
    Fail,
    /// Clamp the density up to the floor and continue.
    Clamp,
}

#[derive(Debug, Error)]
pub enum TimeLoopError {
    #[error("step {step} (t = {time}): {source}")]
    Solve { step: usize, time: f64, source: SolveError },
    #[error("time step {dt} does not divide the final time {t_end}")]
    DtMismatch { dt: f64, t_end: f64 },
    #[error(
        "density reached {min:.6e} in cell {cell} after step {step} (t = {time}), below the \
         floor {guard:.1e}"
    )]
    DensityFloor { step: usize, time: f64, min: f64, cell: usize, guard: f64 },
}

/// Solution snapshot after `step` steps (step 0 is the initial data).
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub step: usize,
    pub time: f64,
    /// Full coefficient vector at the current level.
    pub x: Vec<f64>,
    /// Density of the previous level (equals the current one at step 0).
    pub rho_prev: Vec<f64>,
    /// Velocity of the previous level.
    pub u_prev: Vec<f64>,
}

/// A fully specified transient problem on a fixed mesh.
pub struct Simulation<'a> {
    pub mesh: &'a Mesh,
    pub fe: &'a FeSpace,
    pub hub: Huber,
    pub bcs: &'a BoundaryConds,
    pub cons: Constraints,
    pub gravity: [f64; 2],
    pub rho_inflow: Option<f64>,
    pub penalty_a0: f64,
    pub facet_weight: FacetWeight,
    pub rho_guard: f64,
    pub guard_mode: GuardMode,
    pub scheme: TimeScheme,
    pub dt: f64,
    pub t_end: f64,
    pub ssn: SsnOptions,
}

impl<'a> Simulation<'a> {
    /// Number of steps; the step size must divide the final time.
    pub fn n_steps(&self) -> Result<usize, TimeLoopError> {
        let k = self.t_end / self.dt;
        let n = k.round();
        if !(n >= 1.0) || (k - n).abs() > 1e-9 * n.max(1.0) {
            return Err(TimeLoopError::DtMismatch { dt: self.dt, t_end: self.t_end });
        }
        Ok(n as usize)
    }

    /// Packs initial density and velocity into a step-0 state: pressure and
    /// mean constraint start at zero, the stress multiplier starts at its
    /// value consistent with the initial velocity.
    pub fn initial_state(&self, rho0: &[f64], u0: &[f64]) -> State {
        let d = &self.fe.dofs;
        let mut x = vec![0.0; d.n_dofs()];
        x[d.rho_range()].copy_from_slice(rho0);
        x[d.u_range()].copy_from_slice(u0);
        x[d.z_range()].copy_from_slice(&consistent_multiplier(self.fe, &self.hub, u0));
        State {
            step: 0,
            time: 0.0,
            x,
            rho_prev: rho0.to_vec(),
            u_prev: u0.to_vec(),
        }
    }

    /// Advances one step. The previous state is untouched, so callers can
    /// retry or abandon a failing step.
    pub fn step(&self, state: &State) -> Result<(State, SsnReport), TimeLoopError> {
        let d = &self.fe.dofs;
        let problem = Problem {
            mesh: self.mesh,
            fe: self.fe,
            hub: self.hub,
            dt: self.dt,
            bdf2: self.scheme == TimeScheme::Bdf2 && state.step >= 1,
            rho_n: &state.x[d.rho_range()],
            u_n: &state.x[d.u_range()],
            rho_nm1: &state.rho_prev,
            u_nm1: &state.u_prev,
            gravity: self.gravity,
            bcs: self.bcs,
            rho_inflow: self.rho_inflow,
            penalty_a0: self.penalty_a0,
            facet_weight: self.facet_weight,
            rho_guard: self.rho_guard,
        };
        let step = state.step + 1;
        let time = step as f64 * self.dt;
        let (mut x, report) = solve_step(&problem, &self.cons, &state.x, &self.ssn)
            .map_err(|source| TimeLoopError::Solve { step, time, source })?;
        if !report.converged {
            return Err(TimeLoopError::Solve {
                step,
                time,
                source: SolveError::NoConvergence {
                    iterations: report.iterations,
                    tol: self.ssn.tol,
                    abs_res: report.final_abs_res(),
                    rel_res: report.final_rel_res(),
                },
            });
        }

        let rho_range = d.rho_range();
        let (cell, min) = x[rho_range.clone()]
            .iter()
            .copied()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("at least one cell");
        if min < self.rho_guard {
            match self.guard_mode {
                GuardMode::Fail => {
                    return Err(TimeLoopError::DensityFloor {
                        step,
                        time,
                        min,
                        cell,
                        guard: self.rho_guard,
                    });
                }
                GuardMode::Clamp => {
                    for v in &mut x[rho_range] {
                        if *v < self.rho_guard {
                            *v = self.rho_guard;
                        }
                    }
                }
            }
        }

        let next = State {
            step,
            time,
            rho_prev: state.x[d.rho_range()].to_vec(),
            u_prev: state.x[d.u_range()].to_vec(),
            x,
        };
        Ok((next, report))
    }

    /// Runs from `state` to the final time, invoking the observer after
    /// every accepted step.
    pub fn run(
        &self,
        mut state: State,
        observer: &mut dyn FnMut(&State, &SsnReport),
    ) -> Result<State, TimeLoopError> {
        let n = self.n_steps()?;
        while state.step < n {
            let (next, report) = self.step(&state)?;
            observer(&next, &report);
            state = next;
        }
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forms::{velocity_constraints, SideBc};
    use crate::mesh::Split;

    fn lid_simulation<'a>(
        mesh: &'a Mesh,
        fe: &'a FeSpace,
        bcs: &'a BoundaryConds,
        tau_s: f64,
        dt: f64,
        t_end: f64,
    ) -> Simulation<'a> {
        Simulation {
            mesh,
            fe,
            hub: Huber { eta: 1.0, tau_s, gamma: 10.0 },
            bcs,
            cons: velocity_constraints(mesh, fe, bcs),
            gravity: [0.0, 0.0],
            rho_inflow: None,
            penalty_a0: 10.0,
            facet_weight: FacetWeight::Nu,
            rho_guard: 1e-8,
            guard_mode: GuardMode::Fail,
            scheme: TimeScheme::Bdf2,
            dt,
            t_end,
            ssn: SsnOptions { tol: 1e-9, ..SsnOptions::default() },
        }
    }

    fn lid_bcs() -> BoundaryConds {
        let mut bcs = BoundaryConds::no_slip();
        bcs.top = SideBc::Dirichlet(Box::new(|_| [1.0, 0.0]));
        bcs
    }

    #[test]
    fn step_count_requires_dt_to_divide_the_final_time() {
        let mesh = Mesh::rectangle(0.0, 1.0, 0.0, 1.0, 2, 2, Split::Uniform);
        let fe = FeSpace::new(&mesh);
        let bcs = lid_bcs();
        let mut sim = lid_simulation(&mesh, &fe, &bcs, 0.0, 0.3, 1.0);
        assert!(matches!(sim.n_steps(), Err(TimeLoopError::DtMismatch { .. })));
        sim.dt = 0.25;
        assert_eq!(sim.n_steps().unwrap(), 4);
        sim.dt = 0.1;
        sim.t_end = 0.7;
        assert_eq!(sim.n_steps().unwrap(), 7);
    }

    #[test]
    fn lid_driven_run_advances_clock_and_keeps_density_uniform() {
        let mesh = Mesh::rectangle(0.0, 1.0, 0.0, 1.0, 3, 3, Split::Uniform);
        let fe = FeSpace::new(&mesh);
        let d = fe.dofs;
        let bcs = lid_bcs();
        let sim = lid_simulation(&mesh, &fe, &bcs, 0.1, 0.1, 0.3);
        let rho0 = vec![1.0; d.n_cells];
        let u0 = vec![0.0; 2 * d.n_facets];
        let mut seen = Vec::new();
        let end = sim
            .run(sim.initial_state(&rho0, &u0), &mut |s, rep| {
                seen.push((s.step, s.time, rep.iterations));
            })
            .unwrap();
        assert_eq!(end.step, 3);
        assert!((end.time - 0.3).abs() < 1e-12);
        assert_eq!(seen.len(), 3);
        assert!(seen.iter().all(|&(_, _, it)| it >= 1));
        // Uniform density is an exact invariant of the transport rows.
        for c in 0..d.n_cells {
            assert!((end.x[d.rho(c)] - 1.0).abs() < 1e-12);
        }
        // The previous level stored in the state is the level before last.
        assert_eq!(end.rho_prev, vec![1.0; d.n_cells]);
        // Later steps reuse the converged state and need fewer iterations
        // than the cold start.
        assert!(seen.last().unwrap().2 <= seen[0].2);
    }

    #[test]
    fn density_floor_aborts_or_clamps_by_mode() {
        let mesh = Mesh::rectangle(0.0, 1.0, 0.0, 1.0, 2, 2, Split::Uniform);
        let fe = FeSpace::new(&mesh);
        let d = fe.dofs;
        let bcs = lid_bcs();
        // An artificially high floor makes the uniform density rho = 1
        // violate the guard right after the first converged step.
        let mut sim = lid_simulation(&mesh, &fe, &bcs, 0.0, 0.1, 0.2);
        sim.rho_guard = 2.0;
        let rho0 = vec![1.0; d.n_cells];
        let u0 = vec![0.0; 2 * d.n_facets];
        let init = sim.initial_state(&rho0, &u0);
        match sim.step(&init) {
            Err(TimeLoopError::DensityFloor { step: 1, guard, .. }) => {
                assert_eq!(guard, 2.0);
            }
            other => panic!("expected a density floor abort, got {other:?}"),
        }
        sim.guard_mode = GuardMode::Clamp;
        let (next, _) = sim.step(&init).unwrap();
        for c in 0..d.n_cells {
            assert!(next.x[d.rho(c)] >= 2.0);
        }
    }
}
