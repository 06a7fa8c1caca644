//! Overlapping patching and identity injection.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Patch geometry of one scale branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScalePatchConfig {
    pub patch: usize,
    pub stride: usize,
    pub count: usize,
    pub d_model: usize,
}

impl ScalePatchConfig {
    /// Half-overlapping patches (`stride = patch / 2`) unless `overlap` is
    /// off, in which case patches tile the window.
    pub fn new(lookback: usize, patch: usize, d_model: usize, overlap: bool) -> Result<Self> {
        let stride = if overlap { (patch / 2).max(1) } else { patch };
        Ok(ScalePatchConfig {
            patch,
            stride,
            count: patch_count(lookback, patch, stride)?,
            d_model,
        })
    }
}

/// `floor((len - patch) / stride) + 1`.
pub fn patch_count(len: usize, patch: usize, stride: usize) -> Result<usize> {
    if patch == 0 || stride == 0 {
        return Err(Error::invalid("patch", "patch and stride must be positive"));
    }
    if len < patch {
        return Err(Error::invalid(
            "patch",
            format!("branch{patch}: look-back {len} is shorter than the patch"),
        ));
    }
    Ok((len - patch) / stride + 1)
}

/// Patch `i` covers `[i·stride, i·stride + patch)`; the trailing remainder
/// is dropped. Returns `[count, patch]`.
pub fn overlapping_patch(x: &[f64], patch: usize, stride: usize) -> Result<Tensor> {
    let count = patch_count(x.len(), patch, stride)?;
    let mut out = Vec::with_capacity(count * patch);
    for i in 0..count {
        out.extend_from_slice(&x[i * stride..i * stride + patch]);
    }
    Tensor::new(vec![count, patch], out)
}

/// Linear patch projection `[rows, P] -> [rows, D]`.
pub fn embed_patches(tape: &mut Tape, patches: Var, w_emb: Var, b_emb: Var) -> Result<Var> {
    tape.linear(patches, w_emb, Some(b_emb))
}

/// Adds the positional embedding of each patch slot and the node embedding
/// of each row's variate.
///
/// `z_raw` is `[seqs · count, D]` in sequence-major order, `e_pos` is
/// `[count, D]`, `e_node` is `[M, D]`, and `variates[s]` is the variate of
/// sequence `s`.
pub fn add_context(
    tape: &mut Tape,
    z_raw: Var,
    e_pos: Var,
    e_node: Var,
    variates: &[usize],
) -> Result<Var> {
    let [count, d] = *tape.shape(e_pos) else {
        return Err(Error::invalid("add_context", "E_pos must be rank 2"));
    };
    let seqs = variates.len();
    if tape.shape(z_raw) != [seqs * count, d] {
        return Err(Error::shape("add_context", tape.shape(z_raw), &[seqs * count, d]));
    }
    let m = tape.shape(e_node)[0];
    if let Some(bad) = variates.iter().find(|&&v| v >= m) {
        return Err(Error::invalid(
            "add_context",
            format!("variate index {bad} out of range for {m} variates"),
        ));
    }
    let pos = tape.expand(e_pos, seqs);
    let pos = tape.reshape(pos, vec![seqs * count, d])?;
    let rows: Vec<usize> = variates
        .iter()
        .flat_map(|&v| std::iter::repeat_n(v, count))
        .collect();
    let node = tape.index_rows(e_node, &rows)?;
    let z = tape.add(z_raw, pos)?;
    tape.add(z, node)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_for_default_lookback() {
        assert_eq!(patch_count(96, 8, 4).unwrap(), 23);
        assert_eq!(patch_count(96, 16, 8).unwrap(), 11);
        assert_eq!(patch_count(96, 32, 16).unwrap(), 5);
        assert_eq!(patch_count(96, 16, 16).unwrap(), 6);
    }

    #[test]
    fn short_window_names_branch() {
        let err = patch_count(10, 16, 8).unwrap_err().to_string();
        assert!(err.contains("branch16"), "{err}");
    }

    #[test]
    fn patch_bounds() {
        let x: Vec<f64> = (0..96).map(|v| v as f64).collect();
        let p = overlapping_patch(&x, 16, 8).unwrap();
        assert_eq!(p.shape(), &[11, 16]);
        assert_eq!(p.row(0)[0], 0.0);
        assert_eq!(p.row(10), &x[80..96]);
    }

    #[test]
    fn bad_variate_index() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::zeros(vec![2, 4]));
        let pos = t.constant(Tensor::zeros(vec![2, 4]));
        let node = t.constant(Tensor::zeros(vec![3, 4]));
        assert!(add_context(&mut t, z, pos, node, &[3]).is_err());
    }
}
