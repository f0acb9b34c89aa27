use std::collections::HashMap;
use std::ops::Range;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::kernels::{self, LossParts};
use crate::numerics::{Ops, ParamId, Params, Tensor};

/// Forward-only executor. Values are reference counted and released as soon
/// as the model code drops them, so long-context evaluation stays flat in
/// memory.
///
/// Parameter copies are cached per `(parameter set, id)`; build a fresh
/// executor after mutating a parameter set in place.
#[derive(Default)]
pub struct Eager {
    params: HashMap<(usize, ParamId), Rc<Tensor>>,
}

impl Eager {
    pub fn new() -> Self {
        Self::default()
    }
}

fn wrap(t: Tensor, op: &'static str) -> Result<Rc<Tensor>> {
    kernels::check_finite(&t, op)?;
    Ok(Rc::new(t))
}

impl Ops for Eager {
    type V = Rc<Tensor>;

    fn value<'a>(&'a self, v: &'a Rc<Tensor>) -> &'a Tensor {
        v
    }

    fn param(&mut self, params: &Params, id: ParamId) -> Rc<Tensor> {
        let key = (params as *const Params as usize, id);
        self.params.entry(key).or_insert_with(|| Rc::new(params.get(id).clone())).clone()
    }

    fn constant(&mut self, t: Tensor) -> Rc<Tensor> {
        Rc::new(t)
    }

    fn matmul(&mut self, a: &Rc<Tensor>, b: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        wrap(kernels::matmul(a, b)?, "matmul")
    }

    fn matmul_nt(&mut self, a: &Rc<Tensor>, b: &Rc<Tensor>, scale: f64) -> Result<Rc<Tensor>> {
        wrap(kernels::matmul_nt(a, b, scale)?, "matmul_nt")
    }

    fn add(&mut self, a: &Rc<Tensor>, b: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        wrap(kernels::add(a, b)?, "add")
    }

    fn add_bias(&mut self, x: &Rc<Tensor>, bias: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        wrap(kernels::add_bias(x, bias)?, "add_bias")
    }

    fn mul(&mut self, a: &Rc<Tensor>, b: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        wrap(kernels::mul(a, b)?, "mul")
    }

    fn scale(&mut self, x: &Rc<Tensor>, s: f64) -> Result<Rc<Tensor>> {
        wrap(kernels::scale(x, s), "scale")
    }

    fn silu(&mut self, x: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        wrap(kernels::silu(x), "silu")
    }

    fn rmsnorm(&mut self, x: &Rc<Tensor>, gain: Option<&Rc<Tensor>>, group: usize) -> Result<Rc<Tensor>> {
        let (out, _) = kernels::rmsnorm(x, gain.map(|g| g.as_ref()), group)?;
        wrap(out, "rmsnorm")
    }

    fn rotary(&mut self, x: &Rc<Tensor>, positions: &[usize], head_dim: usize, base: f64) -> Result<Rc<Tensor>> {
        let inv_freq = kernels::rotary_inv_freq(head_dim, base);
        wrap(kernels::rotary(x, positions, head_dim, &inv_freq, 1.0)?, "rotary")
    }

    fn softmax(&mut self, x: &Rc<Tensor>, axis: usize) -> Result<Rc<Tensor>> {
        wrap(kernels::softmax(x, axis)?, "softmax")
    }

    fn masked_softmax(&mut self, x: &Rc<Tensor>, visible: Option<&[bool]>) -> Result<Rc<Tensor>> {
        wrap(kernels::masked_softmax(x, visible)?, "softmax")
    }

    fn gather_rows(&mut self, table: &Rc<Tensor>, ids: &[u32]) -> Result<Rc<Tensor>> {
        wrap(kernels::gather_rows(table, ids)?, "gather_rows")
    }

    fn slice(&mut self, x: &Rc<Tensor>, rows: Range<usize>, cols: Range<usize>) -> Result<Rc<Tensor>> {
        wrap(kernels::slice(x, rows, cols)?, "slice")
    }

    fn concat_cols(&mut self, parts: &[Rc<Tensor>]) -> Result<Rc<Tensor>> {
        let refs: Vec<&Tensor> = parts.iter().map(|p| p.as_ref()).collect();
        wrap(kernels::concat_cols(&refs)?, "concat_cols")
    }

    fn concat_rows(&mut self, parts: &[Rc<Tensor>]) -> Result<Rc<Tensor>> {
        let refs: Vec<&Tensor> = parts.iter().map(|p| p.as_ref()).collect();
        wrap(kernels::concat_rows(&refs)?, "concat_rows")
    }

    fn dropout(&mut self, x: &Rc<Tensor>, keep_scaled: Vec<f64>) -> Result<Rc<Tensor>> {
        if keep_scaled.len() != x.numel() {
            return Err(Error::shape("dropout", format!("mask {} for {:?}", keep_scaled.len(), x.shape())));
        }
        let data = x.data().iter().zip(&keep_scaled).map(|(v, k)| v * k).collect();
        wrap(Tensor::new(x.shape().to_vec(), data)?, "dropout")
    }

    fn sum(&mut self, x: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        Ok(Rc::new(Tensor::scalar(x.data().iter().sum())))
    }

    fn lm_loss(
        &mut self,
        logits: &Rc<Tensor>,
        targets: &[u32],
        mask: &[bool],
        z_coef: f64,
    ) -> Result<(Rc<Tensor>, LossParts)> {
        let parts = kernels::lm_loss(logits, targets, mask, z_coef)?;
        Ok((wrap(Tensor::scalar(parts.total()), "lm_loss")?, parts))
    }
}
