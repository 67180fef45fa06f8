//! Rotary position embedding on plain tensors.

use crate::error::{dim_err, Result};
use crate::tensor::{rotate_row, Tensor};

/// Rotates consecutive pairs of the last extent of `x` by `position`
/// radians scaled by `base^(−2i/n)`, where `n` is the last extent.
pub fn rope_apply(x: &Tensor, position: usize, base: f64) -> Result<Tensor> {
    let n = x.shape().last().copied().unwrap_or(1);
    if n % 2 != 0 {
        return dim_err(format!("rope needs an even last extent, got {:?}", x.shape()));
    }
    let mut out = x.clone();
    if n == 0 {
        return Ok(out);
    }
    for row in out.data_mut().chunks_mut(n) {
        rotate_row(row, position as f64, base, n, 1.0);
    }
    Ok(out)
}

/// In-place rotation of a single vector made of `len / group` heads.
pub(crate) fn rope_heads(v: &mut [f64], position: usize, base: f64, group: usize) {
    if group > 0 {
        rotate_row(v, position as f64, base, group, 1.0);
    }
}
