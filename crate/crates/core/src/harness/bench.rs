//! Scan throughput, gated on chunked/sequential agreement.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::ssm::scan::{scan_chunked, scan_sequential, ScanInputs};
use crate::ssm::SsmParams;

/// Largest tolerated chunked/sequential difference.
pub const EQUIVALENCE_LIMIT: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchConfig {
    /// Sequence length.
    pub len: usize,
    /// Channels.
    pub channels: usize,
    /// State size.
    pub state: usize,
    pub reps: usize,
    pub chunk: usize,
    pub seed: u64,
}

impl BenchConfig {
    pub fn new(len: usize, channels: usize, state: usize, reps: usize) -> Self {
        Self {
            len,
            channels,
            state,
            reps,
            chunk: 64,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if [self.len, self.channels, self.state, self.reps, self.chunk].contains(&0) {
            return Err(Error::Param(format!("bench sizes must be positive, got {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub max_abs_diff: f64,
    /// Fastest of `reps` runs, in seconds.
    pub sequential_secs: f64,
    pub chunked_secs: f64,
}

impl BenchReport {
    pub fn sequential_tokens_per_sec(&self) -> f64 {
        self.config.len as f64 / self.sequential_secs
    }

    pub fn chunked_tokens_per_sec(&self) -> f64 {
        self.config.len as f64 / self.chunked_secs
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.config;
        writeln!(
            f,
            "config L={} D={} N={} reps={} chunk={} seed={}",
            c.len, c.channels, c.state, c.reps, c.chunk, c.seed
        )?;
        writeln!(f, "max_abs_diff {:.3e}", self.max_abs_diff)?;
        writeln!(
            f,
            "sequential {:.6} s  {:.0} tokens/s",
            self.sequential_secs,
            self.sequential_tokens_per_sec()
        )?;
        write!(
            f,
            "chunked    {:.6} s  {:.0} tokens/s",
            self.chunked_secs,
            self.chunked_tokens_per_sec()
        )
    }
}

/// Random scan inputs of the given size.
pub fn random_inputs(len: usize, channels: usize, state: usize, seed: u64) -> Result<ScanInputs> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = SsmParams::init(channels, state, &mut rng);
    let x = Tensor::from_fn(&[len, channels], |_| rng.random_range(-1.0..1.0));
    ScanInputs::prepare(&x, &params, None)
}

fn fastest(reps: usize, mut f: impl FnMut() -> Result<Vec<f64>>) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..reps {
        let t = Instant::now();
        std::hint::black_box(f()?);
        best = best.min(t.elapsed().as_secs_f64());
    }
    Ok(best)
}

/// Checks equivalence, then times both scans. Refuses to report when they
/// disagree.
pub fn bench_scan(cfg: BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let inp = random_inputs(cfg.len, cfg.channels, cfg.state, cfg.seed)?;
    let a = scan_sequential(&inp)?;
    let b = scan_chunked(&inp, cfg.chunk)?;
    let max_abs_diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    if !(max_abs_diff < EQUIVALENCE_LIMIT) {
        return Err(Error::Equivalence {
            max_diff: max_abs_diff,
            limit: EQUIVALENCE_LIMIT,
        });
    }
    Ok(BenchReport {
        config: cfg,
        max_abs_diff,
        sequential_secs: fastest(cfg.reps, || scan_sequential(&inp))?,
        chunked_secs: fastest(cfg.reps, || scan_chunked(&inp, cfg.chunk))?,
    })
}

/// Sequential runtime at `2L` over runtime at `L`.
pub fn length_scaling(cfg: BenchConfig) -> Result<f64> {
    let short = bench_scan(cfg)?;
    let long = bench_scan(BenchConfig {
        len: 2 * cfg.len,
        ..cfg
    })?;
    Ok(long.sequential_secs / short.sequential_secs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_echoes_config() {
        let r = bench_scan(BenchConfig::new(128, 4, 2, 2)).unwrap();
        assert!(r.max_abs_diff < EQUIVALENCE_LIMIT);
        let text = r.to_string();
        assert!(text.starts_with("config L=128 D=4 N=2 reps=2 chunk=64 seed=0\n"));
        assert!(text.contains("tokens/s"));
        assert!(r.sequential_tokens_per_sec() > 0.0);
    }

    #[test]
    fn zero_sizes_are_rejected() {
        assert!(matches!(bench_scan(BenchConfig::new(0, 4, 2, 1)), Err(Error::Param(_))));
        assert!(bench_scan(BenchConfig { chunk: 0, ..BenchConfig::new(8, 1, 1, 1) }).is_err());
    }

    #[test]
    fn equivalence_error_maps_to_numeric_exit() {
        let e = Error::Equivalence { max_diff: 1.0, limit: EQUIVALENCE_LIMIT };
        assert_eq!(e.exit_code(), 2);
    }
}
