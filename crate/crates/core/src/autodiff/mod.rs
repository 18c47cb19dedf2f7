//! Dense `f32` tensors with a recorded graph for reverse-mode gradients.
//!
//! Every model computation is expressed as [`Graph`] nodes over the op
//! catalog in [`Op`]. The graph evaluates eagerly; [`Graph::backward`]
//! walks it in reverse and [`grad_check`] verifies the result against
//! central differences.

mod gemm;
mod gradcheck;
mod graph;
mod ops;
mod tensor;

pub use gradcheck::{grad_check, op_case, CATALOG_OPS, GRAD_CHECK_FRACTION};
pub use graph::{Gradients, Graph, NodeId};
pub use ops::{forward_op, Op, BCE_CLAMP, LAYER_NORM_EPS};
pub use tensor::Tensor;

pub(crate) use gemm::{gemm, MatRef};

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Runs `f` with subnormal floats flushed to zero on this thread and on
/// every rayon worker, restoring the previous mode afterwards.
///
/// Long training runs drive some gradients and optimiser moments into the
/// subnormal range, where x86 arithmetic is orders of magnitude slower.
/// Flushing changes results only below `f32::MIN_POSITIVE`.
pub fn with_denormals_flushed<R>(f: impl FnOnce() -> R) -> R {
    let saved = fp_mode::set_flush();
    let workers = rayon::broadcast(|_| fp_mode::set_flush());
    let out = f();
    rayon::broadcast(|ctx| fp_mode::restore(workers[ctx.index()]));
    fp_mode::restore(saved);
    out
}

#[cfg(target_arch = "x86_64")]
mod fp_mode {
    #![allow(deprecated)]
    use std::arch::x86_64::{_mm_getcsr, _mm_setcsr};

    /// Flush-to-zero and denormals-are-zero bits of MXCSR.
    const FTZ_DAZ: u32 = 0x8040;

    pub fn set_flush() -> u32 {
        // SAFETY: reading and writing MXCSR only changes how this thread
        // treats subnormal operands and results; SSE is always present on
        // x86_64.
        unsafe {
            let old = _mm_getcsr();
            _mm_setcsr(old | FTZ_DAZ);
            old
        }
    }

    pub fn restore(old: u32) {
        // SAFETY: as above; `old` came from `_mm_getcsr`.
        unsafe { _mm_setcsr(old) }
    }
}

#[cfg(not(target_arch = "x86_64"))]
mod fp_mode {
    pub fn set_flush() -> u32 {
        0
    }

    pub fn restore(_: u32) {}
}
