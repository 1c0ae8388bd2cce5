//! Reproducible sampling of Brownian increments, initial inventories and
//! exogenous burst times.
//!
//! Each path draws from its own ChaCha8 stream (`stream = path index`), so a
//! bundle is bit-identical for a given seed regardless of how many threads
//! generate it.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scenario::Scenario;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Seed(pub u64);

/// Stream offset reserved for [`sample_exogenous`], far away from per-path streams.
const EXO_STREAM: u64 = 1 << 62;

/// Sampled randomness for one Monte Carlo run. Matrices are row-major, one
/// row per path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub n_paths: usize,
    pub n_steps: usize,
    pub dt: f64,
    /// Increments of the inventory noise W, each ~ N(0, dt).
    pub dw: Vec<f64>,
    /// Increments of the fundamental-price noise W⁰.
    pub dw0: Vec<f64>,
    /// Initial inventory per path.
    pub iota: Vec<f64>,
    /// Exogenous burst time per path; `f64::INFINITY` when there is none.
    pub tau_exo: Vec<f64>,
}

impl PathBundle {
    #[inline]
    pub fn dw_row(&self, path: usize) -> &[f64] {
        &self.dw[path * self.n_steps..(path + 1) * self.n_steps]
    }

    #[inline]
    pub fn dw0_row(&self, path: usize) -> &[f64] {
        &self.dw0[path * self.n_steps..(path + 1) * self.n_steps]
    }

    #[inline]
    pub fn dw_at(&self, path: usize, step: usize) -> f64 {
        self.dw[path * self.n_steps + step]
    }
}

fn path_rng(seed: Seed, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.0);
    rng.set_stream(stream);
    rng
}

/// Inverse-transform draw for intensity `k·t`: cumulative hazard is `k t²/2`.
#[inline]
fn exo_time_from_exp(k: f64, e: f64) -> f64 {
    if k > 0.0 {
        (2.0 * e / k).sqrt()
    } else {
        f64::INFINITY
    }
}

struct PathDraw {
    iota: f64,
    tau: f64,
    dw: Vec<f64>,
    dw0: Vec<f64>,
}

fn draw_iota(rng: &mut ChaCha8Rng, s: &Scenario) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        let v = s.init.mean + s.init.std * z;
        if !s.init.truncate_at_zero || v >= 0.0 {
            return v;
        }
    }
}

fn draw_pair(s: &Scenario, seed: Seed, pair: usize, n_steps: usize, dt: f64) -> (PathDraw, PathDraw) {
    let mut rng = path_rng(seed, pair as u64);
    let first = draw_path_with(&mut rng, s, n_steps, dt);
    let mut iota = 2.0 * s.init.mean - first.iota;
    if s.init.truncate_at_zero && iota < 0.0 {
        iota = first.iota;
    }
    // U -> 1 - U on the exponential draw behind tau.
    let tau = if first.tau.is_finite() {
        let e = 0.5 * s.burst.k * first.tau * first.tau;
        exo_time_from_exp(s.burst.k, -(-(-e).exp_m1()).ln())
    } else {
        f64::INFINITY
    };
    let second = PathDraw {
        iota,
        tau,
        dw: first.dw.iter().map(|v| -v).collect(),
        dw0: first.dw0.iter().map(|v| -v).collect(),
    };
    (first, second)
}

fn draw_path_with(rng: &mut ChaCha8Rng, s: &Scenario, n_steps: usize, dt: f64) -> PathDraw {
    let iota = draw_iota(rng, s);
    let e: f64 = rng.sample(Exp1);
    let tau = exo_time_from_exp(s.burst.k, e);
    let sd = dt.sqrt();
    let dw = (0..n_steps).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
    let dw0 = (0..n_steps).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
    PathDraw { iota, tau, dw, dw0 }
}

/// Draws a full bundle for the scenario's numerics sizes.
pub fn sample_bundle(s: &Scenario, seed: Seed) -> PathBundle {
    let n_paths = s.numerics.n_paths;
    let n_steps = s.numerics.n_steps;
    let dt = s.model.horizon / n_steps as f64;
    let draws: Vec<PathDraw> = if s.numerics.antithetic {
        let pairs = n_paths.div_ceil(2);
        let mut v: Vec<PathDraw> = (0..pairs)
            .into_par_iter()
            .flat_map_iter(|p| {
                let (a, b) = draw_pair(s, seed, p, n_steps, dt);
                [a, b]
            })
            .collect();
        v.truncate(n_paths);
        v
    } else {
        (0..n_paths)
            .into_par_iter()
            .map(|p| draw_path_with(&mut path_rng(seed, p as u64), s, n_steps, dt))
            .collect()
    };

    let mut bundle = PathBundle {
        n_paths,
        n_steps,
        dt,
        dw: Vec::with_capacity(n_paths * n_steps),
        dw0: Vec::with_capacity(n_paths * n_steps),
        iota: Vec::with_capacity(n_paths),
        tau_exo: Vec::with_capacity(n_paths),
    };
    for d in draws {
        bundle.iota.push(d.iota);
        bundle.tau_exo.push(d.tau);
        bundle.dw.extend_from_slice(&d.dw);
        bundle.dw0.extend_from_slice(&d.dw0);
    }
    bundle
}

/// Exogenous burst times with intensity `k·t`, survival `exp(−k t²/2)`.
pub fn sample_exogenous(k: f64, n: usize, seed: Seed) -> Vec<f64> {
    let mut rng = path_rng(seed, EXO_STREAM);
    (0..n)
        .map(|_| {
            let e: f64 = rng.sample(Exp1);
            exo_time_from_exp(k, e)
        })
        .collect()
}

const CACHE_MAGIC: &[u8; 8] = b"BMFGPB\0\0";
const CACHE_VERSION: u32 = 1;

/// File name under which a bundle for `(seed, scenario)` is cached.
pub fn cache_path(dir: &Path, s: &Scenario, seed: Seed) -> PathBuf {
    dir.join(format!("bundle-{}-{}.bin", seed.0, s.hash_hex()))
}

/// Binary layout: magic, version (u32), n_paths (u64), n_steps (u64), dt,
/// then iota, tau_exo, dw, dw0 as little-endian f64, matrices row-major.
pub fn write_bundle(path: &Path, b: &PathBundle) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&CACHE_VERSION.to_le_bytes())?;
    w.write_all(&(b.n_paths as u64).to_le_bytes())?;
    w.write_all(&(b.n_steps as u64).to_le_bytes())?;
    w.write_all(&b.dt.to_le_bytes())?;
    for v in b.iota.iter().chain(&b.tau_exo).chain(&b.dw).chain(&b.dw0) {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_bundle(path: &Path) -> Result<PathBundle> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(Error::Cache(format!("{} is not a bundle file", path.display())));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b)?;
    let version = u32::from_le_bytes(u32b);
    if version != CACHE_VERSION {
        return Err(Error::Cache(format!("unsupported bundle version {version}")));
    }
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u64b)?;
    let n_paths = u64::from_le_bytes(u64b) as usize;
    r.read_exact(&mut u64b)?;
    let n_steps = u64::from_le_bytes(u64b) as usize;
    r.read_exact(&mut u64b)?;
    let dt = f64::from_le_bytes(u64b);
    let mut read_vec = |len: usize| -> Result<Vec<f64>> {
        let mut buf = vec![0u8; len * 8];
        r.read_exact(&mut buf)?;
        Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    };
    let iota = read_vec(n_paths)?;
    let tau_exo = read_vec(n_paths)?;
    let dw = read_vec(n_paths * n_steps)?;
    let dw0 = read_vec(n_paths * n_steps)?;
    Ok(PathBundle { n_paths, n_steps, dt, dw, dw0, iota, tau_exo })
}

/// Loads the cached bundle when present, otherwise samples and stores it.
pub fn cached_bundle(dir: &Path, s: &Scenario, seed: Seed) -> Result<PathBundle> {
    let path = cache_path(dir, s, seed);
    if path.exists() {
        let b = read_bundle(&path)?;
        if b.n_paths == s.numerics.n_paths && b.n_steps == s.numerics.n_steps {
            return Ok(b);
        }
        log::warn!("cached bundle {} has mismatched sizes, resampling", path.display());
    }
    let b = sample_bundle(s, seed);
    std::fs::create_dir_all(dir)?;
    write_bundle(&path, &b)?;
    Ok(b)
}
