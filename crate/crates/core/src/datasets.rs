//! Charged-particle N-body simulator, synthetic noisy-chain generator and
//! the `MVDS` dataset container.
//!
//! Container layout (little-endian):
//!
//! ```text
//! "MVDS" | version u32 | task u8 (0 nbody, 1 denoise) | samples u64 | nodes u64 |
//!   samples x ( positions f64[n*3] | velocities f64[n*3] | charges_or_roles f64[n] | targets f64[n*3] )
//! ```
//! Denoise files store noised coordinates as positions, zero velocities,
//! atom roles (0 = C, 1 = N, 2 = O) and clean coordinates as targets.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DATASET_MAGIC: &[u8; 4] = b"MVDS";
pub const DATASET_VERSION: u32 = 1;

/// Sample-seed offsets for the train/val/test splits.
pub const SPLIT_OFFSETS: [u64; 3] = [0, 1 << 32, 2 << 32];

/// Neighbours per node in denoising graphs.
pub const DENOISE_K: usize = 16;

pub type Vec3 = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Nbody,
    Denoise,
}

impl Task {
    pub fn tag(self) -> u8 {
        match self {
            Task::Nbody => 0,
            Task::Denoise => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Task> {
        match tag {
            0 => Some(Task::Nbody),
            1 => Some(Task::Denoise),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("simulate: state became non-finite at step {step}")]
    Diverged { step: usize },
    #[error("graph too small: {nodes} nodes, need at least {needed}")]
    GraphTooSmall { nodes: usize, needed: usize },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset format error at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },
}

/// One graph: inputs and target positions.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySample {
    pub x0: Vec<Vec3>,
    pub v0: Vec<Vec3>,
    /// Charges (+-1) for N-body, atom roles for denoising.
    pub q: Vec<f64>,
    pub x_target: Vec<Vec3>,
}

impl TrajectorySample {
    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        let f = |v: &[Vec3]| v.iter().flatten().all(|x| x.is_finite());
        f(&self.x0) && f(&self.v0) && f(&self.x_target) && self.q.iter().all(|x| x.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: Task,
    pub samples: Vec<TrajectorySample>,
}

impl Dataset {
    pub fn nodes_per_sample(&self) -> usize {
        self.samples.first().map_or(0, TrajectorySample::len)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub steps: usize,
    pub dt: f64,
    /// Added to the squared distance inside the 3/2 power.
    pub softening: f64,
    pub coupling: f64,
    pub pos_std: f64,
    pub vel_std: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 5,
            steps: 1000,
            dt: 0.001,
            softening: 0.01,
            coupling: 1.0,
            pos_std: 1.0,
            vel_std: 0.5,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let ok = self.n >= 1
            && self.steps >= 1
            && self.dt > 0.0
            && self.softening > 0.0
            && self.pos_std >= 0.0
            && self.vel_std >= 0.0
            && self.coupling.is_finite();
        if ok {
            Ok(())
        } else {
            Err(DatasetError::Invalid(format!("{self:?}")))
        }
    }
}

fn sample_rng(seed: u64, sample_seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample_seed);
    rng
}

/// Softened Coulomb forces; like charges repel.
pub fn forces(cfg: &SimConfig, x: &[Vec3], q: &[f64]) -> Vec<Vec3> {
    let n = x.len();
    let mut f = vec![[0.0; 3]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = [x[i][0] - x[j][0], x[i][1] - x[j][1], x[i][2] - x[j][2]];
            let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2] + cfg.softening;
            let s = cfg.coupling * q[i] * q[j] / (r2 * r2.sqrt());
            for k in 0..3 {
                f[i][k] += s * d[k];
                f[j][k] -= s * d[k];
            }
        }
    }
    f
}

pub fn kinetic_energy(v: &[Vec3]) -> f64 {
    v.iter().map(|u| 0.5 * (u[0] * u[0] + u[1] * u[1] + u[2] * u[2])).sum()
}

/// Softened Coulomb potential `κ Σ_{i<j} q_i q_j / sqrt(r² + ε_s)`.
pub fn potential_energy(cfg: &SimConfig, x: &[Vec3], q: &[f64]) -> f64 {
    let mut potential = 0.0;
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let r2: f64 = (0..3).map(|k| (x[i][k] - x[j][k]).powi(2)).sum::<f64>() + cfg.softening;
            potential += cfg.coupling * q[i] * q[j] / r2.sqrt();
        }
    }
    potential
}

pub fn total_energy(cfg: &SimConfig, x: &[Vec3], v: &[Vec3], q: &[f64]) -> f64 {
    kinetic_energy(v) + potential_energy(cfg, x, q)
}

/// Secular energy drift: difference between the mean energy over the last
/// and first tenth of `energies`, relative to `scale`.
pub fn energy_drift(energies: &[f64], scale: f64) -> f64 {
    let w = (energies.len() / 10).max(1);
    let mean = |e: &[f64]| e.iter().sum::<f64>() / e.len() as f64;
    (mean(&energies[energies.len() - w..]) - mean(&energies[..w])).abs() / scale
}

/// Kick-drift-kick leapfrog for `cfg.steps` steps. `observe` sees the state
/// after every step (step index starting at 1).
pub fn integrate_with(
    cfg: &SimConfig,
    x0: &[Vec3],
    v0: &[Vec3],
    q: &[f64],
    mut observe: impl FnMut(usize, &[Vec3], &[Vec3]),
) -> Result<(Vec<Vec3>, Vec<Vec3>), DatasetError> {
    cfg.validate()?;
    let (mut x, mut v) = (x0.to_vec(), v0.to_vec());
    let h = 0.5 * cfg.dt;
    let mut f = forces(cfg, &x, q);
    for step in 1..=cfg.steps {
        for (vi, fi) in v.iter_mut().zip(&f) {
            for k in 0..3 {
                vi[k] += h * fi[k];
            }
        }
        for (xi, vi) in x.iter_mut().zip(&v) {
            for k in 0..3 {
                xi[k] += cfg.dt * vi[k];
            }
        }
        f = forces(cfg, &x, q);
        for (vi, fi) in v.iter_mut().zip(&f) {
            for k in 0..3 {
                vi[k] += h * fi[k];
            }
        }
        if !x.iter().chain(&v).flatten().all(|c| c.is_finite()) {
            return Err(DatasetError::Diverged { step });
        }
        observe(step, &x, &v);
    }
    Ok((x, v))
}

pub fn integrate(cfg: &SimConfig, x0: &[Vec3], v0: &[Vec3], q: &[f64]) -> Result<Vec<Vec3>, DatasetError> {
    integrate_with(cfg, x0, v0, q, |_, _, _| {}).map(|(x, _)| x)
}

/// Draws initial conditions for `sample_seed` and integrates them.
pub fn simulate(cfg: &SimConfig, sample_seed: u64) -> Result<TrajectorySample, DatasetError> {
    cfg.validate()?;
    let mut rng = sample_rng(cfg.seed, sample_seed);
    let mut draw = |std: f64| -> Vec3 {
        let mut p = [0.0; 3];
        for c in &mut p {
            let z: f64 = StandardNormal.sample(&mut rng);
            *c = std * z;
        }
        p
    };
    let x0: Vec<Vec3> = (0..cfg.n).map(|_| draw(cfg.pos_std)).collect();
    let v0: Vec<Vec3> = (0..cfg.n).map(|_| draw(cfg.vel_std)).collect();
    let q: Vec<f64> = (0..cfg.n).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
    let x_target = integrate(cfg, &x0, &v0, &q)?;
    Ok(TrajectorySample { x0, v0, q, x_target })
}

/// Simulates `count` samples with seeds `offset..offset + count`.
pub fn simulate_split(cfg: &SimConfig, offset: u64, count: usize) -> Result<Vec<TrajectorySample>, DatasetError> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| simulate(cfg, offset + i))
        .collect()
}

/// Writes `nbody_{train,val,test}.mvds` into `out_dir`.
pub fn generate_nbody(
    n_train: usize,
    n_val: usize,
    n_test: usize,
    cfg: &SimConfig,
    out_dir: &Path,
) -> Result<[PathBuf; 3], DatasetError> {
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(DatasetError::Invalid("split counts must be >= 1".into()));
    }
    create_dir(out_dir)?;
    let mut paths = Vec::with_capacity(3);
    for ((name, count), offset) in ["train", "val", "test"].iter().zip([n_train, n_val, n_test]).zip(SPLIT_OFFSETS) {
        let ds = Dataset {
            task: Task::Nbody,
            samples: simulate_split(cfg, offset, count)?,
        };
        let path = out_dir.join(format!("nbody_{name}.mvds"));
        save_dataset(&ds, &path)?;
        paths.push(path);
    }
    Ok(paths.try_into().unwrap())
}

fn create_dir(dir: &Path) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(|source| DatasetError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn normalize(v: Vec3) -> Vec3 {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn random_unit(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v: Vec3 = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
        if n2 > 1e-12 {
            return normalize(v);
        }
    }
}

/// Persistence of the chain's step direction.
pub const CHAIN_PERSISTENCE: f64 = 0.8;

/// A unit-step random walk whose direction is
/// `normalize(p * previous + (1 - p) * uniform_unit)` with roles cycling C, N, O.
pub fn chain_sample(chain_len: usize, noise_std: f64, rng: &mut impl Rng) -> Result<TrajectorySample, DatasetError> {
    if chain_len < DENOISE_K + 1 {
        return Err(DatasetError::GraphTooSmall {
            nodes: chain_len,
            needed: DENOISE_K + 1,
        });
    }
    if !(noise_std >= 0.0) {
        return Err(DatasetError::Invalid(format!("noise_std {noise_std}")));
    }
    let mut clean = Vec::with_capacity(chain_len);
    let mut pos = [0.0; 3];
    let mut dir = random_unit(rng);
    clean.push(pos);
    for _ in 1..chain_len {
        let u = random_unit(rng);
        let mixed = [
            CHAIN_PERSISTENCE * dir[0] + (1.0 - CHAIN_PERSISTENCE) * u[0],
            CHAIN_PERSISTENCE * dir[1] + (1.0 - CHAIN_PERSISTENCE) * u[1],
            CHAIN_PERSISTENCE * dir[2] + (1.0 - CHAIN_PERSISTENCE) * u[2],
        ];
        // mixed cannot vanish: |0.8 d| > |0.2 u|.
        dir = normalize(mixed);
        for k in 0..3 {
            pos[k] += dir[k];
        }
        clean.push(pos);
    }
    let noise = Normal::new(0.0, noise_std).map_err(|e| DatasetError::Invalid(e.to_string()))?;
    let noised = clean
        .iter()
        .map(|p| [p[0] + noise.sample(rng), p[1] + noise.sample(rng), p[2] + noise.sample(rng)])
        .collect();
    Ok(TrajectorySample {
        x0: noised,
        v0: vec![[0.0; 3]; chain_len],
        q: (0..chain_len).map(|i| (i % 3) as f64).collect(),
        x_target: clean,
    })
}

fn chain_split(count: usize, chain_len: usize, noise_std: f64, seed: u64, offset: u64) -> Result<Vec<TrajectorySample>, DatasetError> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| chain_sample(chain_len, noise_std, &mut sample_rng(seed, offset + i)))
        .collect()
}

/// In-memory chain-denoising dataset; sample `i` uses sample seed `i`.
pub fn generate_chain_denoise(n_samples: usize, chain_len: usize, noise_std: f64, seed: u64) -> Result<Dataset, DatasetError> {
    Ok(Dataset {
        task: Task::Denoise,
        samples: chain_split(n_samples, chain_len, noise_std, seed, 0)?,
    })
}

/// Writes `denoise_{train,val,test}.mvds` into `out_dir`.
pub fn generate_denoise_splits(
    counts: [usize; 3],
    chain_len: usize,
    noise_std: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<[PathBuf; 3], DatasetError> {
    if counts.contains(&0) {
        return Err(DatasetError::Invalid("split counts must be >= 1".into()));
    }
    create_dir(out_dir)?;
    let mut paths = Vec::with_capacity(3);
    for ((name, count), offset) in ["train", "val", "test"].iter().zip(counts).zip(SPLIT_OFFSETS) {
        let ds = Dataset {
            task: Task::Denoise,
            samples: chain_split(count, chain_len, noise_std, seed, offset)?,
        };
        let path = out_dir.join(format!("denoise_{name}.mvds"));
        save_dataset(&ds, &path)?;
        paths.push(path);
    }
    Ok(paths.try_into().unwrap())
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>, DatasetError> {
    let n = ds.nodes_per_sample();
    if ds.samples.iter().any(|s| s.len() != n || s.v0.len() != n || s.q.len() != n || s.x_target.len() != n) {
        return Err(DatasetError::Invalid("all samples must have the same node count".into()));
    }
    let mut out = Vec::with_capacity(29 + ds.samples.len() * n * 10 * 8);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.push(ds.task.tag());
    out.extend_from_slice(&(ds.samples.len() as u64).to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    let mut put = |x: f64| out.extend_from_slice(&x.to_le_bytes());
    for s in &ds.samples {
        s.x0.iter().flatten().for_each(|&x| put(x));
        s.v0.iter().flatten().for_each(|&x| put(x));
        s.q.iter().for_each(|&x| put(x));
        s.x_target.iter().flatten().for_each(|&x| put(x));
    }
    Ok(out)
}

pub fn decode_dataset(buf: &[u8]) -> Result<Dataset, DatasetError> {
    const HEADER: usize = 4 + 4 + 1 + 8 + 8;
    let truncated = |offset: usize, what: &str| DatasetError::Format {
        offset,
        detail: format!("truncated {what}"),
    };
    if buf.len() < 4 || &buf[..4] != DATASET_MAGIC {
        return Err(DatasetError::Format {
            offset: 0,
            detail: "bad magic, expected \"MVDS\"".into(),
        });
    }
    if buf.len() < HEADER {
        return Err(truncated(buf.len(), "header"));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != DATASET_VERSION {
        return Err(DatasetError::Format {
            offset: 4,
            detail: format!("unsupported version {version}"),
        });
    }
    let task = Task::from_tag(buf[8]).ok_or_else(|| DatasetError::Format {
        offset: 8,
        detail: format!("unknown task tag {}", buf[8]),
    })?;
    let count = u64::from_le_bytes(buf[9..17].try_into().unwrap()) as usize;
    let n = u64::from_le_bytes(buf[17..25].try_into().unwrap()) as usize;
    let per_sample = n
        .checked_mul(10 * 8)
        .ok_or_else(|| DatasetError::Format {
            offset: 17,
            detail: format!("node count {n} overflows"),
        })?;
    let body = per_sample.checked_mul(count).ok_or_else(|| DatasetError::Format {
        offset: 9,
        detail: format!("sample count {count} overflows"),
    })?;
    if buf.len() - HEADER < body {
        let complete = (buf.len() - HEADER).checked_div(per_sample).unwrap_or(0);
        return Err(truncated(HEADER + complete * per_sample, &format!("sample {complete}")));
    }
    if buf.len() - HEADER > body {
        return Err(DatasetError::Format {
            offset: HEADER + body,
            detail: "trailing bytes".into(),
        });
    }
    let mut vals = buf[HEADER..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let vec3s = |vals: &mut dyn Iterator<Item = f64>| -> Vec<Vec3> {
        (0..n)
            .map(|_| [vals.next().unwrap(), vals.next().unwrap(), vals.next().unwrap()])
            .collect()
    };
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let x0 = vec3s(&mut vals);
        let v0 = vec3s(&mut vals);
        let q = (0..n).map(|_| vals.next().unwrap()).collect();
        let x_target = vec3s(&mut vals);
        samples.push(TrajectorySample { x0, v0, q, x_target });
    }
    Ok(Dataset { task, samples })
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), DatasetError> {
    let bytes = encode_dataset(ds)?;
    fs::write(path, bytes).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    let bytes = fs::read(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_dataset(&bytes)
}
