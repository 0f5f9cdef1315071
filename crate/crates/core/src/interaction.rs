//! From sampled walks to interaction inputs.
//!
//! Each walk step holds a node of a known type; its stored embedding is
//! projected into the shared space by that type's projection matrix. The
//! projected walks stack into an [L, I, E] neighborhood tensor whose padded
//! slots stay exactly zero: padded positions gather a structural zero row
//! that neither reads nor writes the embedding tables.
//!
//! Source and target neighborhoods are then convolved per walk pair and
//! channel. Output slot `n` aggregates every product of a source step `a`
//! with a target step `b` where `a + b = n`: slot 0 is anchor times anchor,
//! higher slots mix progressively wider neighborhood rings. A slot is
//! considered live only if at least one of its (a, b) contributions has both
//! sides unpadded; [`element_mask`] computes this for the attention stage.

use nirec_tensor::{Tape, TensorError, Var};
use thiserror::Error;

use crate::config::PairingMode;
use crate::hin::TypeId;
use crate::sampler::NeighborhoodSample;

/// Errors from neighborhood assembly and pairing.
#[derive(Debug, Error)]
pub enum InteractionError {
    #[error("aligned pairing needs equal walk counts, got {source_walks} source and {target_walks} target")]
    AlignedNeedsEqualWalks {
        source_walks: usize,
        target_walks: usize,
    },
    #[error("neighborhood sample has no walks")]
    NoWalks,
    #[error("walk has {got} steps but the metapath has {expected}")]
    StepCountMismatch { expected: usize, got: usize },
    #[error("walk step type {ty} has no table/projection (have {available})")]
    TypeOutOfRange { ty: u8, available: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Pairs walk `l` of the source with walk `l` of the target.
pub fn aligned_pairs(walks: usize) -> Vec<(u32, u32)> {
    (0..walks as u32).map(|l| (l, l)).collect()
}

/// Pairs every source walk with every target walk, row-major in the source.
pub fn all_pairs(source_walks: usize, target_walks: usize) -> Vec<(u32, u32)> {
    let mut out = Vec::with_capacity(source_walks * target_walks);
    for a in 0..source_walks as u32 {
        for b in 0..target_walks as u32 {
            out.push((a, b));
        }
    }
    out
}

/// The pair list for a pairing mode, validating walk counts.
pub fn pairs_for(
    mode: PairingMode,
    source_walks: usize,
    target_walks: usize,
) -> Result<Vec<(u32, u32)>, InteractionError> {
    match mode {
        PairingMode::Aligned => {
            if source_walks != target_walks {
                return Err(InteractionError::AlignedNeedsEqualWalks {
                    source_walks,
                    target_walks,
                });
            }
            Ok(aligned_pairs(source_walks))
        }
        PairingMode::AllPairs => Ok(all_pairs(source_walks, target_walks)),
    }
}

/// For each convolution output slot `n`, the (source step, target step)
/// index pairs that feed it: exactly those with `a + b = n`.
pub fn slot_components(source_steps: usize, target_steps: usize) -> Vec<Vec<(usize, usize)>> {
    let n_out = source_steps + target_steps - 1;
    (0..n_out)
        .map(|n| {
            let lo = n.saturating_sub(target_steps - 1);
            let hi = n.min(source_steps - 1);
            (lo..=hi).map(|a| (a, n - a)).collect()
        })
        .collect()
}

/// Validity of every interaction element, flattened as `pair * n_out + slot`
/// to match the row order of the interaction tensor reshaped to
/// [pairs * n_out, E]. An element is live when some contributing step pair
/// is unpadded on both sides; all other elements are exactly zero.
pub fn element_mask(
    source: &NeighborhoodSample,
    target: &NeighborhoodSample,
    pairs: &[(u32, u32)],
) -> Vec<bool> {
    let i_s = source.steps();
    let i_t = target.steps();
    let slots = slot_components(i_s, i_t);
    let mut mask = Vec::with_capacity(pairs.len() * slots.len());
    for &(ls, lt) in pairs {
        let ms = &source.walks[ls as usize].mask;
        let mt = &target.walks[lt as usize].mask;
        for components in &slots {
            mask.push(components.iter().any(|&(a, b)| ms[a] && mt[b]));
        }
    }
    mask
}

/// Gathers and projects one neighborhood sample into an [L, I, E] tensor on
/// the tape.
///
/// `tables[t]` is the type-`t` embedding table (its final row is the unused
/// padding row) and `projections_t[t]` is the type-`t` projection already
/// transposed to [raw_dim, E], so each step is a single matmul. Padded walk
/// slots gather `None`, which produces a zero row with no gradient path.
pub fn build_matrix(
    tape: &Tape,
    sample: &NeighborhoodSample,
    types: &[TypeId],
    tables: &[Var],
    projections_t: &[Var],
) -> Result<Var, InteractionError> {
    if sample.walks.is_empty() {
        return Err(InteractionError::NoWalks);
    }
    for walk in &sample.walks {
        if walk.len() != types.len() {
            return Err(InteractionError::StepCountMismatch {
                expected: types.len(),
                got: walk.len(),
            });
        }
    }
    let mut parts = Vec::with_capacity(types.len());
    for (i, &ty) in types.iter().enumerate() {
        let t = ty.0 as usize;
        if t >= tables.len() || t >= projections_t.len() {
            return Err(InteractionError::TypeOutOfRange {
                ty: ty.0,
                available: tables.len().min(projections_t.len()),
            });
        }
        let rows: Vec<Option<usize>> = sample
            .walks
            .iter()
            .map(|w| w.mask[i].then(|| w.nodes[i] as usize))
            .collect();
        let gathered = tape.gather_rows(&tables[t], &rows)?;
        parts.push(gathered.matmul(&projections_t[t])?);
    }
    Ok(tape.stack_axis1(&parts)?)
}
