//! Finite-difference gradient suites, three small random shapes per target.
//!
//! Every target reduces its output to a scalar with [`probe_weights`] and
//! compares analytic gradients of the input and all parameters against
//! central differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{
    grad_check_block, probe_weights, Block, C2fVMamba, C2fVMambaConfig, Emca, EmcaConfig, Init, ParamStore, Vss,
    VssConfig,
};
use crate::scan::{ss2d, ScanParams, ScanVars, Ss2dConfig};
use crate::tensor::{grad_check, grad_check_many, ConvSpec, GradReport, Tensor, Var};

pub const EPS: f64 = 3e-6;
pub const TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Conv2d,
    Conv1d,
    Pools,
    Activations,
    GroupNorm,
    Ss2d,
    Vss,
    Emca,
    C2fVMamba,
}

impl Target {
    pub const ALL: [Target; 9] = [
        Target::Conv2d,
        Target::Conv1d,
        Target::Pools,
        Target::Activations,
        Target::GroupNorm,
        Target::Ss2d,
        Target::Vss,
        Target::Emca,
        Target::C2fVMamba,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Target::Conv2d => "conv2d",
            Target::Conv1d => "conv1d",
            Target::Pools => "pools",
            Target::Activations => "activations",
            Target::GroupNorm => "group_norm",
            Target::Ss2d => "ss2d",
            Target::Vss => "vss",
            Target::Emca => "emca",
            Target::C2fVMamba => "c2f_vmamba",
        }
    }
}

impl std::str::FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Target::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| {
            let names: Vec<_> = Target::ALL.iter().map(|t| t.name()).collect();
            Error::Config(format!(
                "unknown gradcheck target `{s}` (expected one of {})",
                names.join(", ")
            ))
        })
    }
}

/// One labelled check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub label: String,
    pub report: GradReport,
}

/// Worst relative error across a suite, and whether every check passed.
pub fn summarize(results: &[CheckResult]) -> (f64, bool) {
    let worst = results.iter().map(|r| r.report.max_rel_err).fold(0.0, f64::max);
    (worst, results.iter().all(|r| r.report.passed))
}

const SHAPES: [[usize; 4]; 3] = [[1, 2, 3, 3], [2, 3, 4, 5], [1, 4, 5, 3]];

fn probe<'t>(y: Var<'t>) -> Result<Var<'t>> {
    y.dot_const(&probe_weights(&y.dims()))
}

pub fn run(target: Target, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |label: String, report: GradReport| out.push(CheckResult { label, report });
    match target {
        Target::Conv2d => {
            for (i, &[n, c, h, w]) in SHAPES.iter().enumerate() {
                let spec = ConvSpec::new(c, 3, 3, 1 + i % 2, 1);
                let inputs = [
                    Tensor::uniform(&[n, c, h, w], -1.0, 1.0, &mut rng),
                    Tensor::uniform(&spec.weight_dims(), -0.5, 0.5, &mut rng),
                    Tensor::uniform(&[3], -0.5, 0.5, &mut rng),
                ];
                let r = grad_check_many(|_, v| probe(v[0].conv2d(v[1], Some(v[2]), spec)?), &inputs, EPS, TOL)?;
                push(format!("conv2d {:?} stride {}", [n, c, h, w], spec.stride), r);
            }
        }
        Target::Conv1d => {
            for (i, c) in [3usize, 6, 9].into_iter().enumerate() {
                let inputs = [
                    Tensor::uniform(&[2, c, 1, 1], -1.0, 1.0, &mut rng),
                    Tensor::uniform(&[3 + 2 * (i % 2)], -1.0, 1.0, &mut rng),
                ];
                let r = grad_check_many(|_, v| probe(v[0].conv1d_channels(v[1])?), &inputs, EPS, TOL)?;
                push(format!("conv1d over {c} channels"), r);
            }
        }
        Target::Pools => {
            for dims in SHAPES {
                let x = Tensor::uniform(&dims, -1.0, 1.0, &mut rng);
                let r = grad_check(
                    |_, x| probe(x.global_avg_pool()?.add(x.global_max_pool()?)?),
                    &x,
                    EPS,
                    TOL,
                )?;
                push(format!("gap+gmp {dims:?}"), r);
            }
        }
        Target::Activations => {
            for dims in SHAPES {
                let x = Tensor::uniform(&dims, -3.0, 3.0, &mut rng);
                push(
                    format!("silu {dims:?}"),
                    grad_check(|_, x| probe(x.silu()), &x, EPS, TOL)?,
                );
                push(
                    format!("sigmoid {dims:?}"),
                    grad_check(|_, x| probe(x.sigmoid()), &x, EPS, TOL)?,
                );
            }
        }
        Target::GroupNorm => {
            for (dims, groups) in [([1, 4, 3, 3], 2), ([2, 6, 2, 3], 3), ([1, 8, 2, 2], 1)] {
                let c = dims[1];
                let inputs = [
                    Tensor::uniform(&dims, -1.0, 1.0, &mut rng),
                    Tensor::uniform(&[c], 0.5, 1.5, &mut rng),
                    Tensor::uniform(&[c], -0.5, 0.5, &mut rng),
                ];
                let r = grad_check_many(
                    |_, v| probe(v[0].group_norm(v[1], v[2], groups, 1e-5)?),
                    &inputs,
                    EPS,
                    TOL,
                )?;
                push(format!("group_norm {dims:?} groups {groups}"), r);
            }
        }
        Target::Ss2d => {
            for (c, ds, h, w) in [(4, 2, 3, 3), (3, 2, 2, 4), (2, 3, 3, 2)] {
                let x = Tensor::uniform(&[1, c, h, w], -1.0, 1.0, &mut rng);
                let mut p = ScanParams::init(c, ds, &mut rng);
                // step sizes large enough for the scan to carry real memory
                p.b_delta = Tensor::uniform(&[c], -1.0, 0.5, &mut rng);
                let cfg = Ss2dConfig {
                    d_state: ds,
                    ..Ss2dConfig::default()
                };
                let inputs = [x, p.w_delta, p.b_delta, p.w_b, p.w_c, p.a_log, p.d_skip];
                let r = grad_check_many(
                    |_, v| {
                        let vars = ScanVars {
                            d_model: c,
                            d_state: ds,
                            w_delta: v[1],
                            b_delta: v[2],
                            w_b: v[3],
                            w_c: v[4],
                            a_log: v[5],
                            d_skip: v[6],
                        };
                        probe(ss2d(v[0], &vars, &cfg)?)
                    },
                    &inputs,
                    EPS,
                    TOL,
                )?;
                push(format!("ss2d 1x{c}x{h}x{w} d_state {ds}"), r);
            }
        }
        Target::Vss => {
            for dims in [[1, 4, 3, 3], [1, 4, 2, 3], [2, 4, 2, 2]] {
                let r = block_check(&mut rng, &dims, |init| {
                    Vss::new(&mut init.sub("vss"), VssConfig::new(4, 2))
                })?;
                push(format!("vss {dims:?}"), r);
            }
        }
        Target::Emca => {
            for dims in [[1, 4, 3, 3], [2, 4, 2, 5], [1, 4, 4, 4]] {
                let cfg = EmcaConfig { channels: 4, k: 3 };
                let r = block_check(&mut rng, &dims, |init| Emca::new(&mut init.sub("emca"), cfg))?;
                push(format!("emca {dims:?}"), r);
            }
        }
        Target::C2fVMamba => {
            for dims in [[1, 8, 4, 4], [1, 8, 2, 3], [1, 8, 3, 2]] {
                let cfg = C2fVMambaConfig {
                    d_state: 2,
                    ..C2fVMambaConfig::new(8, 8, 2)
                };
                let r = block_check(&mut rng, &dims, |init| {
                    C2fVMamba::new(&mut init.sub("c2f"), cfg.clone())
                })?;
                push(format!("c2f_vmamba {dims:?}"), r);
            }
        }
    }
    Ok(out)
}

fn block_check<B: Block>(
    rng: &mut ChaCha8Rng,
    dims: &[usize; 4],
    build: impl FnOnce(&mut Init) -> Result<B>,
) -> Result<GradReport> {
    let mut store = ParamStore::new();
    let block = build(&mut Init::new(&mut store, rng))?;
    // shift zero biases and unit gains so every parameter carries signal
    for p in store.iter_mut().filter(|p| !p.decay) {
        for (j, v) in p.value.data_mut().iter_mut().enumerate() {
            *v += 0.1 * (j as f64 + 0.5).cos();
        }
    }
    let x = Tensor::uniform(dims, -1.0, 1.0, rng);
    grad_check_block(&block, &store, &x, EPS, TOL)
}
