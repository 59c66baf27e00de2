//! Parameters, forward contexts and the composite blocks built from them.

mod blocks;
mod checkpoint;
mod params;

pub use blocks::{
    adaptive_kernel, Block, Bottleneck, C2f, C2fVMamba, C2fVMambaConfig, ConvUnit, Emca, EmcaConfig, Sppf, Vss,
    VssConfig, NORM_EPS,
};
pub use checkpoint::{load_checkpoint, read_checkpoint_from, save_checkpoint, write_checkpoint_to};
pub use params::{ConvParams, Ctx, Init, Param, ParamId, ParamStore};

use crate::error::Result;
use crate::tensor::{grad_check_many, GradReport, Tensor, Var};

/// Fixed, non-uniform weights used to reduce a block output to a scalar so
/// that every output element contributes a distinct gradient.
pub fn probe_weights(dims: &[usize]) -> Tensor {
    let numel: usize = dims.iter().product();
    let data = (0..numel).map(|i| ((i as f64) * 0.7318 + 0.21).sin()).collect();
    Tensor::new(dims, data).expect("dims from an existing tensor")
}

/// Gradient check of a block with respect to its input and every parameter.
pub fn grad_check_block<B: Block>(block: &B, store: &ParamStore, x: &Tensor, eps: f64, tol: f64) -> Result<GradReport> {
    let mut inputs = vec![x.clone()];
    inputs.extend(store.iter().map(|p| p.value.clone()));
    grad_check_many(
        |tape, vars: &[Var]| {
            let ctx = Ctx::from_vars(tape, &vars[1..]);
            let y = block.forward(&ctx, vars[0])?;
            y.dot_const(&probe_weights(&y.dims()))
        },
        &inputs,
        eps,
        tol,
    )
}
