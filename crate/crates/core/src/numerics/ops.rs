use std::ops::Range;

use crate::error::Result;
use crate::numerics::kernels::LossParts;
use crate::numerics::{ParamId, Params, Tensor};

/// The differentiable operator set. Model code is written once against this
/// trait and runs either on the recording [`Graph`](super::Graph) (training,
/// gradient checks) or the [`Eager`](super::Eager) executor (evaluation,
/// where intermediates are freed as soon as they are dropped).
pub trait Ops {
    type V: Clone;

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor;

    /// Handle for a trainable parameter. Repeated calls with the same id
    /// return the same handle so gradients from every use accumulate.
    fn param(&mut self, params: &Params, id: ParamId) -> Self::V;

    fn constant(&mut self, t: Tensor) -> Self::V;

    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;

    /// `scale * a * b^T`.
    fn matmul_nt(&mut self, a: &Self::V, b: &Self::V, scale: f64) -> Result<Self::V>;

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;

    fn add_bias(&mut self, x: &Self::V, bias: &Self::V) -> Result<Self::V>;

    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;

    fn scale(&mut self, x: &Self::V, s: f64) -> Result<Self::V>;

    fn silu(&mut self, x: &Self::V) -> Result<Self::V>;

    /// RMS normalisation over `group`-wide chunks of the trailing axis.
    fn rmsnorm(&mut self, x: &Self::V, gain: Option<&Self::V>, group: usize) -> Result<Self::V>;

    /// Rotary position rotation of every `head_dim`-wide group of each row.
    fn rotary(&mut self, x: &Self::V, positions: &[usize], head_dim: usize, base: f64) -> Result<Self::V>;

    fn softmax(&mut self, x: &Self::V, axis: usize) -> Result<Self::V>;

    /// Trailing-axis softmax; `visible == None` means no masking.
    fn masked_softmax(&mut self, x: &Self::V, visible: Option<&[bool]>) -> Result<Self::V>;

    fn gather_rows(&mut self, table: &Self::V, ids: &[u32]) -> Result<Self::V>;

    fn slice(&mut self, x: &Self::V, rows: Range<usize>, cols: Range<usize>) -> Result<Self::V>;

    fn concat_cols(&mut self, parts: &[Self::V]) -> Result<Self::V>;

    fn concat_rows(&mut self, parts: &[Self::V]) -> Result<Self::V>;

    /// Multiplies by a precomputed (already rescaled) keep mask.
    fn dropout(&mut self, x: &Self::V, keep_scaled: Vec<f64>) -> Result<Self::V>;

    fn sum(&mut self, x: &Self::V) -> Result<Self::V>;

    /// Scalar `nll + z_coef * mean(lse^2)` over positions where `mask` is set.
    fn lm_loss(
        &mut self,
        logits: &Self::V,
        targets: &[u32],
        mask: &[bool],
        z_coef: f64,
    ) -> Result<(Self::V, LossParts)>;
}
