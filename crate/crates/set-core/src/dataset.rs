//! Trajectory datasets: generation, noise injection and file I/O.
//!
//! A trajectory stores `L + H + 1` recorded states (index 0 is the initial
//! condition); consecutive recorded states are `stride` raw leapfrog steps
//! apart. Model inputs are recorded states `1..=L`, the prediction target is
//! recorded state `L + H`.
//!
//! File layout (`SETD`, little-endian): magic, version u32, header-JSON
//! length u32 + bytes, then per trajectory charges `[N]`, positions
//! `[(L+H+1)*N*3]`, velocities `[(L+H+1)*N*3]`, all f64.

use crate::checkpoint::{read_f64s, read_u32, write_f64s};
use crate::error::DataError;
use crate::nbody::{integrate_step, sample_initial_conditions, ParticleState, DIM};
use crate::rng::{derive_seed, stream_rng};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const DATASET_MAGIC: [u8; 4] = *b"SETD";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_particles: usize,
    pub seq_len: usize,
    pub horizon: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub noise_variance: f64,
    pub dt: f64,
    pub softening: f64,
    pub stride: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_particles: 5,
            seq_len: 10,
            horizon: 500,
            train_count: 1000,
            val_count: 200,
            test_count: 200,
            noise_variance: 0.0,
            dt: 1e-3,
            softening: 0.1,
            stride: 2,
            seed: 7,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_particles < 2 {
            return Err(DataError::InvalidConfig(
                "n_particles must be at least 2".into(),
            ));
        }
        if self.seq_len == 0 {
            return Err(DataError::InvalidConfig("seq_len must be positive".into()));
        }
        if self.horizon <= self.seq_len {
            return Err(DataError::InvalidConfig(format!(
                "horizon ({}) must exceed seq_len ({})",
                self.horizon, self.seq_len
            )));
        }
        if self.dt <= 0.0 || self.softening <= 0.0 || self.stride == 0 {
            return Err(DataError::InvalidConfig(
                "dt, softening and stride must be positive".into(),
            ));
        }
        if self.noise_variance < 0.0 {
            return Err(DataError::InvalidConfig(
                "noise variance must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// The sequence/horizon contract is treated as `horizon >= 10 * seq_len`;
    /// below that ratio generation still works but callers should warn.
    pub fn horizon_warning(&self) -> Option<String> {
        if self.horizon < 10 * self.seq_len {
            Some(format!(
                "horizon {} is below 10 x seq_len ({}); the prediction target \
                 sits close to the input window",
                self.horizon,
                10 * self.seq_len
            ))
        } else {
            None
        }
    }

    pub fn states_per_trajectory(&self) -> usize {
        self.seq_len + self.horizon + 1
    }

    pub fn count_for(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_count,
            Split::Val => self.val_count,
            Split::Test => self.test_count,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, DataError> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(DataError::InvalidConfig(format!("unknown split '{other}'"))),
        }
    }
}

/// One simulated rollout. Buffers are `[T, N, 3]` row-major with
/// `T = seq_len + horizon + 1`; charges are constant across states.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub charges: Vec<f64>,
    pub positions: Vec<f64>,
    pub velocities: Vec<f64>,
}

impl Trajectory {
    pub fn state_at(&self, t: usize, n_particles: usize) -> ParticleState {
        let span = n_particles * DIM;
        ParticleState {
            positions: self.positions[t * span..(t + 1) * span].to_vec(),
            velocities: self.velocities[t * span..(t + 1) * span].to_vec(),
            charges: self.charges.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: String,
    pub config: GenConfig,
    pub trajectories: Vec<Trajectory>,
}

fn simulate_trajectory(config: &GenConfig, seed: u64) -> Result<Trajectory, DataError> {
    let records = config.states_per_trajectory();
    let span = config.n_particles * DIM;
    let mut positions = Vec::with_capacity(records * span);
    let mut velocities = Vec::with_capacity(records * span);
    let mut state = sample_initial_conditions(config.n_particles, seed)?;
    let charges = state.charges.clone();
    positions.extend_from_slice(&state.positions);
    velocities.extend_from_slice(&state.velocities);
    for _ in 1..records {
        for _ in 0..config.stride {
            state = integrate_step(&state, config.dt, config.softening);
        }
        positions.extend_from_slice(&state.positions);
        velocities.extend_from_slice(&state.velocities);
    }
    Ok(Trajectory {
        charges,
        positions,
        velocities,
    })
}

/// Generates one split. Trajectories are independent (seeded per index), so
/// generation parallelizes without affecting determinism.
pub fn generate_split(config: &GenConfig, split: Split) -> Result<Dataset, DataError> {
    config.validate()?;
    let count = config.count_for(split);
    let trajectories: Result<Vec<Trajectory>, DataError> = (0..count)
        .into_par_iter()
        .map(|idx| simulate_trajectory(config, derive_seed(config.seed, split.stream(), idx as u64)))
        .collect();
    let mut dataset = Dataset {
        split: split.name().to_string(),
        config: config.clone(),
        trajectories: trajectories?,
    };
    if config.noise_variance > 0.0 {
        dataset = add_noise(
            &dataset,
            config.noise_variance,
            derive_seed(config.seed, 100 + split.stream(), 0),
        )?;
    }
    Ok(dataset)
}

pub fn generate_all(config: &GenConfig) -> Result<[Dataset; 3], DataError> {
    Ok([
        generate_split(config, Split::Train)?,
        generate_split(config, Split::Val)?,
        generate_split(config, Split::Test)?,
    ])
}

/// Adds i.i.d. `N(0, variance)` noise to every position and velocity,
/// inputs and targets alike; charges are untouched.
pub fn add_noise(dataset: &Dataset, variance: f64, seed: u64) -> Result<Dataset, DataError> {
    if variance < 0.0 {
        return Err(DataError::InvalidConfig(
            "noise variance must be non-negative".into(),
        ));
    }
    if variance == 0.0 {
        return Ok(dataset.clone());
    }
    let std = variance.sqrt();
    let mut rng = stream_rng(seed, 7, 0);
    let mut out = dataset.clone();
    for trajectory in &mut out.trajectories {
        for v in trajectory.positions.iter_mut() {
            *v += std * rng.sample::<f64, _>(StandardNormal);
        }
        for v in trajectory.velocities.iter_mut() {
            *v += std * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct FileHeader {
    split: String,
    n_trajectories: usize,
    config: GenConfig,
}

pub fn write_dataset<W: Write>(w: &mut W, dataset: &Dataset) -> Result<(), DataError> {
    w.write_all(&DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    let header = FileHeader {
        split: dataset.split.clone(),
        n_trajectories: dataset.trajectories.len(),
        config: dataset.config.clone(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| DataError::Corrupt(e.to_string()))?;
    w.write_all(&(header_json.len() as u32).to_le_bytes())?;
    w.write_all(&header_json)?;
    for trajectory in &dataset.trajectories {
        write_f64s(w, &trajectory.charges)?;
        write_f64s(w, &trajectory.positions)?;
        write_f64s(w, &trajectory.velocities)?;
    }
    Ok(())
}

pub fn read_dataset<R: Read>(r: &mut R) -> Result<Dataset, DataError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| DataError::Truncated("missing magic".into()))?;
    if magic != DATASET_MAGIC {
        return Err(DataError::BadMagic {
            expected: DATASET_MAGIC,
            found: magic,
        });
    }
    let version = read_u32(r)?;
    if version != DATASET_VERSION {
        return Err(DataError::Version(version));
    }
    let header_len = read_u32(r)? as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|_| DataError::Truncated("header".into()))?;
    let header: FileHeader =
        serde_json::from_slice(&header_bytes).map_err(|e| DataError::Corrupt(e.to_string()))?;
    let span = header.config.n_particles * DIM;
    let records = header.config.states_per_trajectory();
    let mut trajectories = Vec::with_capacity(header.n_trajectories);
    for idx in 0..header.n_trajectories {
        let charges = read_f64s(r, header.config.n_particles)
            .map_err(|_| DataError::Truncated(format!("charges of trajectory {idx}")))?;
        let positions = read_f64s(r, records * span)
            .map_err(|_| DataError::Truncated(format!("positions of trajectory {idx}")))?;
        let velocities = read_f64s(r, records * span)
            .map_err(|_| DataError::Truncated(format!("velocities of trajectory {idx}")))?;
        trajectories.push(Trajectory {
            charges,
            positions,
            velocities,
        });
    }
    Ok(Dataset {
        split: header.split,
        config: header.config,
        trajectories,
    })
}

pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(&mut w, dataset)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let mut r = BufReader::new(File::open(path)?);
    read_dataset(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nbody::{total_momentum, transform_state};

    fn tiny_config() -> GenConfig {
        GenConfig {
            train_count: 4,
            val_count: 2,
            test_count: 2,
            horizon: 30,
            seq_len: 2,
            ..GenConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let config = tiny_config();
        let a = generate_split(&config, Split::Train).unwrap();
        let b = generate_split(&config, Split::Train).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trajectories.len(), 4);
        let val = generate_split(&config, Split::Val).unwrap();
        assert_eq!(val.trajectories.len(), 2);
        assert_ne!(a.trajectories[0], val.trajectories[0]);
    }

    #[test]
    fn paper_shaped_config_has_l_inputs_and_one_target() {
        let config = GenConfig {
            train_count: 1,
            val_count: 0,
            test_count: 0,
            horizon: 120,
            ..GenConfig::default()
        };
        let ds = generate_split(&config, Split::Train).unwrap();
        let records = config.states_per_trajectory();
        assert_eq!(records, 10 + 120 + 1);
        let t = &ds.trajectories[0];
        assert_eq!(t.positions.len(), records * 5 * DIM);
        // inputs are records 1..=L, target is record L+H
        let target = t.state_at(config.seq_len + config.horizon, 5);
        assert_eq!(target.positions.len(), 15);
    }

    #[test]
    fn charges_constant_across_states() {
        let config = tiny_config();
        let ds = generate_split(&config, Split::Test).unwrap();
        for t in &ds.trajectories {
            assert!(t.charges.iter().all(|&c| c == 1.0 || c == -1.0));
        }
    }

    #[test]
    fn invalid_horizon_rejected() {
        let config = GenConfig {
            horizon: 5,
            seq_len: 10,
            ..GenConfig::default()
        };
        assert!(matches!(
            generate_split(&config, Split::Train),
            Err(DataError::InvalidConfig(_))
        ));
        let warn = GenConfig {
            horizon: 50,
            seq_len: 10,
            ..GenConfig::default()
        };
        assert!(warn.horizon_warning().is_some());
    }

    #[test]
    fn noise_zero_is_bit_exact_identity() {
        let config = tiny_config();
        let ds = generate_split(&config, Split::Train).unwrap();
        let same = add_noise(&ds, 0.0, 99).unwrap();
        assert_eq!(ds, same);
        assert!(add_noise(&ds, -0.5, 0).is_err());
    }

    #[test]
    fn noise_variance_matches_target() {
        let config = GenConfig {
            train_count: 60,
            val_count: 0,
            test_count: 0,
            horizon: 60,
            seq_len: 5,
            ..GenConfig::default()
        };
        let clean = generate_split(&config, Split::Train).unwrap();
        let noisy = add_noise(&clean, 0.5, 123).unwrap();
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        for (c, n) in clean.trajectories.iter().zip(&noisy.trajectories) {
            assert_eq!(c.charges, n.charges);
            for (a, b) in c.positions.iter().zip(&n.positions) {
                sum_sq += (b - a) * (b - a);
                count += 1;
            }
            for (a, b) in c.velocities.iter().zip(&n.velocities) {
                sum_sq += (b - a) * (b - a);
                count += 1;
            }
        }
        assert!(count >= 100_000, "need ≥1e5 scalars, got {count}");
        let variance = sum_sq / count as f64;
        assert!(
            (variance - 0.5).abs() / 0.5 < 0.05,
            "noise variance {variance}"
        );
    }

    #[test]
    fn roundtrip_is_bit_identical_including_empty() {
        let config = tiny_config();
        let ds = generate_split(&config, Split::Val).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &ds).unwrap();
        let back = read_dataset(&mut buf.as_slice()).unwrap();
        assert_eq!(ds, back);

        let empty = Dataset {
            split: "val".into(),
            config: GenConfig {
                val_count: 0,
                ..config
            },
            trajectories: vec![],
        };
        let mut buf = Vec::new();
        write_dataset(&mut buf, &empty).unwrap();
        let back = read_dataset(&mut buf.as_slice()).unwrap();
        assert_eq!(empty, back);
    }

    #[test]
    fn corrupted_magic_reports_error_not_crash() {
        let ds = generate_split(&tiny_config(), Split::Val).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &ds).unwrap();
        buf[1] = b'!';
        assert!(matches!(
            read_dataset(&mut buf.as_slice()),
            Err(DataError::BadMagic { .. })
        ));
        let mut truncated = Vec::new();
        write_dataset(&mut truncated, &ds).unwrap();
        truncated.truncate(truncated.len() / 2);
        assert!(matches!(
            read_dataset(&mut truncated.as_slice()),
            Err(DataError::Truncated(_))
        ));
    }

    #[test]
    fn momentum_conserved_along_stored_trajectories() {
        let config = tiny_config();
        let ds = generate_split(&config, Split::Train).unwrap();
        let records = config.states_per_trajectory();
        for t in &ds.trajectories {
            let p0 = total_momentum(&t.state_at(0, config.n_particles));
            for rec in 1..records {
                let p = total_momentum(&t.state_at(rec, config.n_particles));
                for c in 0..DIM {
                    assert!((p[c] - p0[c]).abs() <= 1e-8);
                }
            }
        }
    }

    #[test]
    fn dynamics_commute_with_isometries() {
        // rotation by 90 degrees about z plus a translation
        let q = vec![0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        let b = vec![0.3, -0.7, 1.1];
        let state = sample_initial_conditions(5, 21).unwrap();
        let mut plain = state.clone();
        let mut moved = transform_state(&state, &q, &b);
        for _ in 0..100 {
            plain = integrate_step(&plain, 1e-3, 0.1);
            moved = integrate_step(&moved, 1e-3, 0.1);
            let expected = transform_state(&plain, &q, &b);
            for (a, e) in moved.positions.iter().zip(&expected.positions) {
                assert!((a - e).abs() <= 1e-8);
            }
            for (a, e) in moved.velocities.iter().zip(&expected.velocities) {
                assert!((a - e).abs() <= 1e-8);
            }
        }
    }
}
