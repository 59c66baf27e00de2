//! Wall-time sweeps of `ss2d` against a naive quadratic attention baseline.

use std::hint::black_box;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scan::{ss2d_eval, ScanParams, Ss2dConfig};
use crate::tensor::Tensor;

pub const DEFAULT_SWEEP: [usize; 3] = [256, 1024, 4096];

/// Operators the harness can time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operator {
    Ss2d,
    Attention,
}

impl Operator {
    pub const ALL: [Operator; 2] = [Operator::Ss2d, Operator::Attention];

    pub fn name(self) -> &'static str {
        match self {
            Operator::Ss2d => "ss2d",
            Operator::Attention => "attention",
        }
    }
}

impl std::str::FromStr for Operator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Operator::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown operator `{s}` (expected ss2d or attention)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    /// Token counts; each must be a perfect square so `ss2d` sees a square map.
    pub sweep: Vec<usize>,
    pub d_model: usize,
    pub d_state: usize,
    /// Each point gets at least this many timed rounds...
    pub min_reps: usize,
    /// ...and rounds continue until this much time per point has passed.
    pub min_time: Duration,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            sweep: DEFAULT_SWEEP.to_vec(),
            d_model: 16,
            d_state: 16,
            min_reps: 5,
            min_time: Duration::from_millis(300),
            seed: 0,
        }
    }
}

/// One timed point of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub operator: Operator,
    pub tokens: usize,
    pub d_model: usize,
    pub d_state: usize,
    pub mean_ns: f64,
    pub median_ns: f64,
    pub p95_ns: f64,
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("operator,L,d_model,d_state,mean_ns,p95_ns\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.0},{:.0}\n",
            r.operator.name(),
            r.tokens,
            r.d_model,
            r.d_state,
            r.mean_ns,
            r.p95_ns
        ));
    }
    out
}

/// Median-time ratios between consecutive sweep points of one operator.
///
/// The median rather than the mean, so a single preempted repetition
/// cannot skew a ratio.
pub fn growth_ratios(rows: &[BenchRow], op: Operator) -> Vec<f64> {
    let times: Vec<f64> = rows.iter().filter(|r| r.operator == op).map(|r| r.median_ns).collect();
    times.windows(2).map(|w| w[1] / w[0]).collect()
}

/// Single-head softmax attention over `(L, d)` tokens with the given
/// projections, materializing the full `L x L` score matrix.
pub fn naive_attention(x: &[f64], tokens: usize, d: usize, wq: &[f64], wk: &[f64], wv: &[f64]) -> Vec<f64> {
    let project = |w: &[f64]| {
        let mut out = vec![0.0; tokens * d];
        for t in 0..tokens {
            for o in 0..d {
                out[t * d + o] = (0..d).map(|i| x[t * d + i] * w[i * d + o]).sum();
            }
        }
        out
    };
    let (q, k, v) = (project(wq), project(wk), project(wv));
    let scale = 1.0 / (d as f64).sqrt();
    let mut scores = vec![0.0; tokens * tokens];
    for i in 0..tokens {
        let row = &mut scores[i * tokens..(i + 1) * tokens];
        for (j, s) in row.iter_mut().enumerate() {
            *s = (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>() * scale;
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for s in row.iter_mut() {
            *s = (*s - max).exp();
            total += *s;
        }
        row.iter_mut().for_each(|s| *s /= total);
    }
    let mut out = vec![0.0; tokens * d];
    for i in 0..tokens {
        for j in 0..tokens {
            let p = scores[i * tokens + j];
            for c in 0..d {
                out[i * d + c] += p * v[j * d + c];
            }
        }
    }
    out
}

/// Shortest timed slot; faster calls are repeated within one slot.
const MIN_SLOT: Duration = Duration::from_millis(10);

type Job<'a> = Box<dyn FnMut() -> Result<()> + 'a>;

/// `(mean, median, p95)` per job, in nanoseconds per call.
///
/// Jobs are timed round-robin, one slot each per round, so drift in machine
/// speed lands on every sweep point alike instead of skewing their ratios.
fn time_interleaved(cfg: &BenchConfig, jobs: &mut [Job<'_>]) -> Result<Vec<(f64, f64, f64)>> {
    let mut reps = Vec::with_capacity(jobs.len());
    for job in jobs.iter_mut() {
        // warm caches and allocator, and size the slot
        let t = Instant::now();
        job()?;
        let once = t.elapsed().max(Duration::from_nanos(1));
        reps.push((MIN_SLOT.as_nanos() / once.as_nanos()).max(1) as usize);
    }
    let mut samples = vec![Vec::new(); jobs.len()];
    let budget = cfg.min_time * jobs.len() as u32;
    let start = Instant::now();
    while samples[0].len() < cfg.min_reps || start.elapsed() < budget {
        for ((job, &n), out) in jobs.iter_mut().zip(&reps).zip(&mut samples) {
            let t = Instant::now();
            for _ in 0..n {
                job()?;
            }
            out.push(t.elapsed().as_nanos() as f64 / n as f64);
        }
    }
    Ok(samples
        .into_iter()
        .map(|mut v| {
            v.sort_by(f64::total_cmp);
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let median = (v[(v.len() - 1) / 2] + v[v.len() / 2]) / 2.0;
            let rank = ((0.95 * v.len() as f64).ceil() as usize).clamp(1, v.len());
            (mean, median, v[rank - 1])
        })
        .collect())
}

fn side_of(tokens: usize) -> Result<usize> {
    let side = (tokens as f64).sqrt().round() as usize;
    if side * side != tokens || tokens == 0 {
        return Err(Error::Config(format!(
            "sweep length {tokens} is not a non-zero perfect square"
        )));
    }
    Ok(side)
}

/// Times `op` at every sweep point.
pub fn run(op: Operator, cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.d_model == 0 || cfg.d_state == 0 {
        return Err(Error::Config("d_model and d_state must be >= 1".into()));
    }
    if cfg.sweep.is_empty() {
        return Err(Error::Config("empty sweep".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.d_model;
    let mut jobs: Vec<Job<'_>> = Vec::with_capacity(cfg.sweep.len());
    for &tokens in &cfg.sweep {
        let side = side_of(tokens)?;
        let x = Tensor::uniform(&[1, d, side, side], -1.0, 1.0, &mut rng);
        jobs.push(match op {
            Operator::Ss2d => {
                let params = ScanParams::init(d, cfg.d_state, &mut rng);
                let scan = Ss2dConfig {
                    d_state: cfg.d_state,
                    ..Ss2dConfig::default()
                };
                Box::new(move || {
                    black_box(ss2d_eval(&x, &params, &scan)?);
                    Ok(())
                })
            }
            Operator::Attention => {
                let bound = (1.0 / d as f64).sqrt();
                let mut w = || Tensor::uniform(&[d, d], -bound, bound, &mut rng).into_data();
                let (wq, wk, wv) = (w(), w(), w());
                // token-major copy of the NCHW map
                let xt: Vec<f64> = (0..tokens)
                    .flat_map(|t| (0..d).map(move |c| (c, t)))
                    .map(|(c, t)| x.data()[c * tokens + t])
                    .collect();
                Box::new(move || {
                    black_box(naive_attention(&xt, tokens, d, &wq, &wk, &wv));
                    Ok(())
                })
            }
        });
    }
    let times = time_interleaved(cfg, &mut jobs)?;
    Ok(cfg
        .sweep
        .iter()
        .zip(times)
        .map(|(&tokens, (mean_ns, median_ns, p95_ns))| BenchRow {
            operator: op,
            tokens,
            d_model: d,
            d_state: cfg.d_state,
            mean_ns,
            median_ns,
            p95_ns,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_of_identical_tokens_is_their_value() {
        // equal tokens give uniform weights, so the output is v of any token
        let d = 2;
        let x = vec![0.3, -0.7, 0.3, -0.7, 0.3, -0.7];
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        let out = naive_attention(&x, 3, d, &eye, &eye, &eye);
        for t in 0..3 {
            assert!((out[t * d] - 0.3).abs() < 1e-12 && (out[t * d + 1] + 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_square_lengths() {
        let cfg = BenchConfig {
            sweep: vec![200],
            ..BenchConfig::default()
        };
        assert!(run(Operator::Ss2d, &cfg).is_err());
    }

    #[test]
    fn csv_layout() {
        let cfg = BenchConfig {
            sweep: vec![16, 64],
            d_model: 4,
            d_state: 2,
            min_reps: 1,
            min_time: Duration::ZERO,
            seed: 1,
        };
        let rows = run(Operator::Ss2d, &cfg).unwrap();
        let csv = bench_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "operator,L,d_model,d_state,mean_ns,p95_ns");
        assert!(lines[1].starts_with("ss2d,16,4,2,"));
        assert_eq!(growth_ratios(&rows, Operator::Ss2d).len(), 1);
    }
}
