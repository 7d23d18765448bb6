//! One-shot magnitude pruning.

use crate::error::{Error, Result};
use crate::model::Model;

use super::{eligible_weights, float_data_mut};

/// Zeroes the `floor(sparsity * n)` smallest-magnitude elements of every
/// eligible weight tensor.
pub fn prune_magnitude(m: &Model, sparsity: f32) -> Result<Model> {
    check_sparsity(sparsity)?;
    if !m.codebooks.is_empty() {
        return Err(Error::invalid("pruning must run before clustering"));
    }
    let mut out = m.clone();
    for name in eligible_weights(m) {
        prune_slice(float_data_mut(&mut out, &name)?, sparsity);
    }
    Ok(out)
}

pub(crate) fn check_sparsity(sparsity: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(Error::invalid(format!("sparsity must be in [0, 1], got {sparsity}")));
    }
    Ok(())
}

/// Number of elements pruned from a tensor of `n` elements.
pub fn pruned_count(n: usize, sparsity: f32) -> usize {
    ((sparsity as f64 * n as f64).floor() as usize).min(n)
}

/// Prunes one slice in place. Ties in magnitude go to the lower index.
pub fn prune_slice(values: &mut [f32], sparsity: f32) {
    let count = pruned_count(values.len(), sparsity);
    if count == 0 {
        return;
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].abs().total_cmp(&values[b].abs()).then(a.cmp(&b)));
    for &i in &order[..count] {
        values[i] = 0.0;
    }
}
