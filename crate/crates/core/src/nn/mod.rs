//! A small reverse-mode layer library in `f64`.
//!
//! Every layer owns its parameters and matching gradient buffers. `forward`
//! returns the output together with a cache holding exactly what `backward`
//! needs; `backward` consumes the cache, accumulates into the gradient
//! buffers, and returns the gradient with respect to the layer input.
//! Nothing here is implicit: the model assembles layers by hand and the
//! optimizer walks an explicitly collected list of parameter slices.
//!
//! Double precision is deliberate. The gradient implementation is verified
//! against central finite differences, and that comparison needs more
//! headroom than `f32` offers.

pub mod act;
pub mod adam;
pub mod bn;
pub mod conv;
pub mod gru;
pub mod init;
pub mod linear;

/// A named view of one parameter tensor and its gradient, flattened.
/// Collection order is fixed by the model, which is what lets the optimizer
/// and the checkpoint format index state positionally.
pub struct ParamRef<'a> {
    pub name: String,
    pub value: &'a mut [f64],
    pub grad: &'a mut [f64],
}

/// A named non-trainable state tensor (batch-norm running statistics).
pub struct BufferRef<'a> {
    pub name: String,
    pub value: &'a mut [f64],
}

/// Total scalar count across a parameter list.
pub fn param_count(params: &[ParamRef<'_>]) -> usize {
    params.iter().map(|p| p.value.len()).sum()
}
