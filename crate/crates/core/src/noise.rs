//! Discrete space-time white noise.
//!
//! Each increment `ΔW_{n,i} ~ N(0, ΔtΔx)` is a pure function of
//! `(seed, path, step, cell)`: the ChaCha8 stream is selected by the path and
//! the word position is set from `(step, cell)`, so any increment can be
//! regenerated without replaying earlier ones. Two solvers holding the same
//! plan therefore see the same noise whatever their state or thread.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};
use crate::grid::GridConfig;

/// Uniform on the open interval `(0, 1)` from the top 53 bits of one word.
pub(crate) fn unit_f64(rng: &mut impl RngCore) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

// 32-bit words consumed per cell: two u64 draws for one Box–Muller normal.
const WORDS_PER_CELL: u128 = 4;

#[derive(Debug, Clone)]
pub enum NoiseMode {
    Fresh,
    Replay(Arc<NoiseRecord>),
    Zero,
}

#[derive(Debug, Clone)]
pub struct NoisePlan {
    pub seed: u64,
    pub path: u64,
    pub grid: GridConfig,
    pub mode: NoiseMode,
}

impl NoisePlan {
    pub fn fresh(seed: u64, path: u64, grid: GridConfig) -> Self {
        NoisePlan {
            seed,
            path,
            grid,
            mode: NoiseMode::Fresh,
        }
    }

    pub fn zero(grid: GridConfig) -> Self {
        NoisePlan {
            seed: 0,
            path: 0,
            grid,
            mode: NoiseMode::Zero,
        }
    }

    /// Replays a stored record. The record's grid must match `grid`.
    pub fn replay(record: Arc<NoiseRecord>, grid: GridConfig) -> Result<Self> {
        if record.n_x != grid.n_x() as u64 || record.dt != grid.dt() || record.dx != grid.dx() {
            return Err(Error::config(
                "noise record was produced on a different grid",
            ));
        }
        Ok(NoisePlan {
            seed: record.seed,
            path: record.path,
            grid,
            mode: NoiseMode::Replay(record),
        })
    }

    /// Same seed and grid, another path.
    pub fn with_path(&self, path: u64) -> Self {
        NoisePlan {
            path,
            ..self.clone()
        }
    }

    pub fn n_cells(&self) -> usize {
        self.grid.n_x() - 1
    }

    /// Increments for interior nodes `1..n_x` over `[t_step, t_{step+1}]`.
    pub fn increments(&self, step: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.n_cells()];
        self.fill(step, &mut out)?;
        Ok(out)
    }

    pub fn fill(&self, step: usize, out: &mut [f64]) -> Result<()> {
        let n = self.n_cells();
        if out.len() != n {
            return Err(Error::precondition(format!(
                "increment buffer has length {}, expected {n}",
                out.len()
            )));
        }
        if step >= self.grid.n_steps() {
            return Err(Error::precondition(format!(
                "step {step} is beyond the horizon ({} steps)",
                self.grid.n_steps()
            )));
        }
        match &self.mode {
            NoiseMode::Zero => out.fill(0.0),
            NoiseMode::Replay(rec) => out.copy_from_slice(rec.row(step)?),
            NoiseMode::Fresh => {
                let scale = (self.grid.dt() * self.grid.dx()).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(self.path);
                rng.set_word_pos(step as u128 * n as u128 * WORDS_PER_CELL);
                for v in out.iter_mut() {
                    *v = scale * box_muller(&mut rng);
                }
            }
        }
        Ok(())
    }

    /// Single increment, regenerated from its key.
    pub fn increment_at(&self, step: usize, cell: usize) -> Result<f64> {
        let n = self.n_cells();
        if cell >= n || step >= self.grid.n_steps() {
            return Err(Error::precondition(format!(
                "(step, cell) = ({step}, {cell}) outside the plan"
            )));
        }
        match &self.mode {
            NoiseMode::Zero => Ok(0.0),
            NoiseMode::Replay(rec) => Ok(rec.row(step)?[cell]),
            NoiseMode::Fresh => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(self.path);
                rng.set_word_pos((step as u128 * n as u128 + cell as u128) * WORDS_PER_CELL);
                Ok((self.grid.dt() * self.grid.dx()).sqrt() * box_muller(&mut rng))
            }
        }
    }

    pub fn empty_record(&self) -> NoiseRecord {
        NoiseRecord {
            seed: self.seed,
            path: self.path,
            n_x: self.grid.n_x() as u64,
            n_steps: 0,
            l: self.grid.l(),
            dx: self.grid.dx(),
            dt: self.grid.dt(),
            horizon: self.grid.horizon(),
            data: Vec::new(),
        }
    }

    /// Materializes every increment of the plan.
    pub fn record(&self) -> Result<NoiseRecord> {
        let mut rec = self.empty_record();
        let mut row = vec![0.0; self.n_cells()];
        for step in 0..self.grid.n_steps() {
            self.fill(step, &mut row)?;
            rec.push_row(&row);
        }
        Ok(rec)
    }
}

fn box_muller(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = unit_f64(rng);
    let u2 = unit_f64(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Stored increments, row-major `steps × (n_x − 1)`.
///
/// Binary layout (little endian): 80-byte header
/// `b"SHENOISE"`, version `u32`, reserved `u32`, seed `u64`, path `u64`,
/// `n_x u64`, `n_steps u64`, `L f64`, `Δx f64`, `Δt f64`, `T f64`,
/// followed by the increments as `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRecord {
    pub seed: u64,
    pub path: u64,
    pub n_x: u64,
    pub n_steps: u64,
    pub l: f64,
    pub dx: f64,
    pub dt: f64,
    pub horizon: f64,
    pub data: Vec<f64>,
}

const MAGIC: &[u8; 8] = b"SHENOISE";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 80;

impl NoiseRecord {
    fn width(&self) -> usize {
        self.n_x as usize - 1
    }

    pub fn push_row(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.width());
        self.data.extend_from_slice(row);
        self.n_steps += 1;
    }

    pub fn row(&self, step: usize) -> Result<&[f64]> {
        if step as u64 >= self.n_steps {
            return Err(Error::MissingNoise(format!(
                "record holds {} steps, step {step} requested",
                self.n_steps
            )));
        }
        let w = self.width();
        Ok(&self.data[step * w..(step + 1) * w])
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut header = Vec::with_capacity(HEADER_LEN);
        header.extend_from_slice(MAGIC);
        header.extend_from_slice(&VERSION.to_le_bytes());
        header.extend_from_slice(&0u32.to_le_bytes());
        for v in [self.seed, self.path, self.n_x, self.n_steps] {
            header.extend_from_slice(&v.to_le_bytes());
        }
        for v in [self.l, self.dx, self.dt, self.horizon] {
            header.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&header)?;
        let mut body = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            body.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&body)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut header = [0u8; HEADER_LEN];
        r.read_exact(&mut header)
            .map_err(|e| Error::MissingNoise(format!("truncated header: {e}")))?;
        if &header[0..8] != MAGIC {
            return Err(Error::MissingNoise("not a noise record (bad magic)".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(header[o..o + 8].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(header[o..o + 8].try_into().unwrap());
        let version = u32_at(8);
        if version != VERSION {
            return Err(Error::MissingNoise(format!(
                "unsupported record version {version}"
            )));
        }
        let mut rec = NoiseRecord {
            seed: u64_at(16),
            path: u64_at(24),
            n_x: u64_at(32),
            n_steps: u64_at(40),
            l: f64_at(48),
            dx: f64_at(56),
            dt: f64_at(64),
            horizon: f64_at(72),
            data: Vec::new(),
        };
        if rec.n_x < 2 {
            return Err(Error::MissingNoise(format!(
                "invalid cell count {}",
                rec.n_x
            )));
        }
        let len = rec.n_steps as usize * rec.width();
        let mut body = vec![0u8; len * 8];
        r.read_exact(&mut body)
            .map_err(|e| Error::MissingNoise(format!("truncated body: {e}")))?;
        rec.data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(rec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::MissingNoise(format!("{}: {e}", path.display())))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovarianceReport {
    pub empirical: f64,
    pub analytic: f64,
    pub std_error: f64,
    pub z_score: f64,
    pub n_paths: usize,
}

/// Monte Carlo estimate of `E[W(φ)W(ψ)]` with `W(φ) = Σ_{n,i} φ(t_n, x_i) ΔW_{n,i}`,
/// against the left-point Riemann sum `Σ φψ ΔtΔx` of `∫∫φψ`. Paths
/// `0..n_paths` of `plan`'s seed are used.
pub fn covariance_check(
    plan: &NoisePlan,
    phi: impl Fn(f64, f64) -> f64,
    psi: impl Fn(f64, f64) -> f64,
    n_paths: usize,
) -> Result<CovarianceReport> {
    if n_paths < 2 {
        return Err(Error::precondition(
            "covariance check needs at least 2 paths",
        ));
    }
    let grid = plan.grid;
    let n = plan.n_cells();
    let steps = grid.n_steps();
    let mut phi_v = Vec::with_capacity(steps * n);
    let mut psi_v = Vec::with_capacity(steps * n);
    for s in 0..steps {
        for c in 0..n {
            phi_v.push(phi(grid.t(s), grid.x(c + 1)));
            psi_v.push(psi(grid.t(s), grid.x(c + 1)));
        }
    }
    let analytic: f64 =
        phi_v.iter().zip(&psi_v).map(|(a, b)| a * b).sum::<f64>() * grid.dt() * grid.dx();
    let active: Vec<usize> = (0..steps)
        .filter(|&s| (0..n).any(|c| phi_v[s * n + c] != 0.0 || psi_v[s * n + c] != 0.0))
        .collect();
    let mut products = Vec::with_capacity(n_paths);
    let mut row = vec![0.0; n];
    for p in 0..n_paths {
        let path_plan = plan.with_path(p as u64);
        let (mut wphi, mut wpsi) = (0.0, 0.0);
        for &s in &active {
            path_plan.fill(s, &mut row)?;
            for c in 0..n {
                wphi += phi_v[s * n + c] * row[c];
                wpsi += psi_v[s * n + c] * row[c];
            }
        }
        products.push(wphi * wpsi);
    }
    let mean = products.iter().sum::<f64>() / n_paths as f64;
    let var = products.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n_paths - 1) as f64;
    let std_error = (var / n_paths as f64).sqrt();
    let z_score = if std_error > 0.0 {
        (mean - analytic) / std_error
    } else if mean == analytic {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(CovarianceReport {
        empirical: mean,
        analytic,
        std_error,
        z_score,
        n_paths,
    })
}
