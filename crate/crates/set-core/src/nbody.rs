//! Charged N-body simulation: softened Coulomb forces integrated with a
//! kick-drift-kick leapfrog. Masses are unit and the Coulomb constant is
//! absorbed into the time units.

use crate::error::DataError;
use crate::rng::stream_rng;
use rand::Rng;
use rand_distr::StandardNormal;

/// Spatial dimension of the simulation.
pub const DIM: usize = 3;

/// Positions and velocities are flat `[N * 3]` row-major buffers; charges
/// are exactly ±1.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleState {
    pub positions: Vec<f64>,
    pub velocities: Vec<f64>,
    pub charges: Vec<f64>,
}

impl ParticleState {
    pub fn n_particles(&self) -> usize {
        self.charges.len()
    }
}

/// Initial conditions: positions i.i.d. standard normal, velocities normal
/// with std 0.5, charges uniform on {-1, +1}. Deterministic given the seed.
pub fn sample_initial_conditions(
    n_particles: usize,
    rng_seed: u64,
) -> Result<ParticleState, DataError> {
    if n_particles < 2 {
        return Err(DataError::InvalidConfig(format!(
            "need at least 2 particles, got {n_particles}"
        )));
    }
    let mut rng = stream_rng(rng_seed, 0, 0);
    let positions: Vec<f64> = (0..n_particles * DIM)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let velocities: Vec<f64> = (0..n_particles * DIM)
        .map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let charges: Vec<f64> = (0..n_particles)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    Ok(ParticleState {
        positions,
        velocities,
        charges,
    })
}

/// `F_i = sum_{j != i} c_i c_j (x_i - x_j) / (|x_i - x_j|^2 + softening)^{3/2}`.
///
/// The pairwise terms are exactly antisymmetric in floating point, so the
/// total force sums to zero up to rounding.
pub fn coulomb_forces(state: &ParticleState, softening: f64) -> Vec<f64> {
    let n = state.n_particles();
    let x = &state.positions;
    let mut forces = vec![0.0; n * DIM];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let mut r2 = 0.0;
            for c in 0..DIM {
                let d = x[i * DIM + c] - x[j * DIM + c];
                r2 += d * d;
            }
            let inv = (r2 + softening).powf(-1.5);
            let qq = state.charges[i] * state.charges[j];
            for c in 0..DIM {
                forces[i * DIM + c] += qq * (x[i * DIM + c] - x[j * DIM + c]) * inv;
            }
        }
    }
    forces
}

/// One kick-drift-kick leapfrog step.
pub fn integrate_step(state: &ParticleState, dt: f64, softening: f64) -> ParticleState {
    let n = state.n_particles();
    let forces = coulomb_forces(state, softening);
    let mut half = state.clone();
    for i in 0..n * DIM {
        half.velocities[i] += 0.5 * dt * forces[i];
    }
    for i in 0..n * DIM {
        half.positions[i] += dt * half.velocities[i];
    }
    let forces_end = coulomb_forces(&half, softening);
    for i in 0..n * DIM {
        half.velocities[i] += 0.5 * dt * forces_end[i];
    }
    half
}

/// Kinetic plus softened Coulomb potential energy (unit masses).
pub fn total_energy(state: &ParticleState, softening: f64) -> f64 {
    let n = state.n_particles();
    let mut e = 0.0;
    for i in 0..n {
        for c in 0..DIM {
            let v = state.velocities[i * DIM + c];
            e += 0.5 * v * v;
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let mut r2 = 0.0;
            for c in 0..DIM {
                let d = state.positions[i * DIM + c] - state.positions[j * DIM + c];
                r2 += d * d;
            }
            e += state.charges[i] * state.charges[j] / (r2 + softening).sqrt();
        }
    }
    e
}

/// Total momentum (unit masses).
pub fn total_momentum(state: &ParticleState) -> [f64; DIM] {
    let mut p = [0.0; DIM];
    for i in 0..state.n_particles() {
        for c in 0..DIM {
            p[c] += state.velocities[i * DIM + c];
        }
    }
    p
}

/// Applies `x -> Q x + b` to positions and `v -> Q v` to velocities.
pub fn transform_state(state: &ParticleState, rotation: &[f64], translation: &[f64]) -> ParticleState {
    let n = state.n_particles();
    let mut out = state.clone();
    for i in 0..n {
        for r in 0..DIM {
            let mut px = 0.0;
            let mut pv = 0.0;
            for c in 0..DIM {
                px += rotation[r * DIM + c] * state.positions[i * DIM + c];
                pv += rotation[r * DIM + c] * state.velocities[i * DIM + c];
            }
            out.positions[i * DIM + r] = px + translation[r];
            out.velocities[i * DIM + r] = pv;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_body(c0: f64, c1: f64) -> ParticleState {
        ParticleState {
            positions: vec![-1.0, 0.0, 0.0, 1.0, 0.0, 0.0],
            velocities: vec![0.0; 6],
            charges: vec![c0, c1],
        }
    }

    #[test]
    fn initial_conditions_are_deterministic_and_shaped() {
        let a = sample_initial_conditions(5, 42).unwrap();
        let b = sample_initial_conditions(5, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.positions.len(), 15);
        assert_eq!(a.velocities.len(), 15);
        assert_eq!(a.charges.len(), 5);
        assert!(a.charges.iter().all(|&c| c == 1.0 || c == -1.0));
        assert!(sample_initial_conditions(1, 0).is_err());
    }

    #[test]
    fn sample_statistics_match_the_distributions() {
        // law-of-large-numbers check over 10k draws
        let n_samples = 2000; // 2000 states x 5 particles = 10k particle draws
        let mut pos_sum = [0.0f64; DIM];
        let mut vel_sq = 0.0f64;
        let mut count = 0usize;
        for s in 0..n_samples {
            let st = sample_initial_conditions(5, s as u64).unwrap();
            for i in 0..5 {
                for c in 0..DIM {
                    pos_sum[c] += st.positions[i * DIM + c];
                    vel_sq += st.velocities[i * DIM + c] * st.velocities[i * DIM + c];
                }
                count += 1;
            }
        }
        let tol = 3.0 / (count as f64).sqrt();
        for c in 0..DIM {
            assert!((pos_sum[c] / count as f64).abs() <= tol);
        }
        let vel_var = vel_sq / (count * DIM) as f64;
        assert!((vel_var - 0.25).abs() < 0.01, "velocity variance {vel_var}");
    }

    #[test]
    fn like_charges_repel_unlike_attract() {
        let rep = coulomb_forces(&two_body(1.0, 1.0), 0.1);
        // particle 0 sits at x=-1: repulsion pushes it further negative
        assert!(rep[0] < 0.0 && rep[3] > 0.0);
        assert!((rep[0] + rep[3]).abs() < 1e-15);

        let att = coulomb_forces(&two_body(1.0, -1.0), 0.1);
        assert!(att[0] > 0.0 && att[3] < 0.0);
    }

    #[test]
    fn forces_sum_to_zero() {
        let state = sample_initial_conditions(5, 3).unwrap();
        let f = coulomb_forces(&state, 0.1);
        for c in 0..DIM {
            let total: f64 = (0..5).map(|i| f[i * DIM + c]).sum();
            assert!(total.abs() <= 1e-12, "net force {total}");
        }
    }

    #[test]
    fn symmetric_pair_moves_apart_symmetrically() {
        let next = integrate_step(&two_body(1.0, 1.0), 1e-2, 0.1);
        assert!(next.positions[0] < -1.0);
        assert!(next.positions[3] > 1.0);
        assert!((next.positions[0] + next.positions[3]).abs() < 1e-14);
    }

    #[test]
    fn free_particle_drifts_exactly() {
        let state = ParticleState {
            positions: vec![0.5, -0.25, 2.0],
            velocities: vec![1.0, 2.0, -3.0],
            charges: vec![1.0],
        };
        let dt = 0.125; // power of two so the drift is exact in f64
        let next = integrate_step(&state, dt, 0.1);
        assert_eq!(next.positions, vec![0.625, 0.0, 1.625]);
        assert_eq!(next.velocities, state.velocities);
    }

    #[test]
    fn energy_drift_below_one_percent_vs_fine_reference() {
        let state = sample_initial_conditions(5, 8).unwrap();
        let softening = 0.1;
        let mut coarse = state.clone();
        for _ in 0..1000 {
            coarse = integrate_step(&coarse, 1e-3, softening);
        }
        let mut fine = state.clone();
        for _ in 0..100_000 {
            fine = integrate_step(&fine, 1e-5, softening);
        }
        let e_coarse = total_energy(&coarse, softening);
        let e_ref = total_energy(&fine, softening);
        let drift = (e_coarse - e_ref).abs() / e_ref.abs();
        assert!(drift < 0.01, "energy drift {drift}");
    }

    #[test]
    fn momentum_is_conserved_over_long_runs() {
        let state = sample_initial_conditions(5, 9).unwrap();
        let p0 = total_momentum(&state);
        let mut s = state;
        for _ in 0..2000 {
            s = integrate_step(&s, 1e-3, 0.1);
        }
        let p1 = total_momentum(&s);
        for c in 0..DIM {
            assert!((p1[c] - p0[c]).abs() <= 1e-8, "momentum drift {:?}", p1);
        }
    }
}
