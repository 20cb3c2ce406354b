use super::{fuse_topk, FusionFallback};
use crate::error::{RamerError, Result};
use crate::numerics::{l2_normalize, Vector};

/// Inputs available when completing one missing slot.
pub struct SlotContext<'a> {
    /// Retrieved vectors of the missing modality, pooled over queries.
    /// Empty when the filler does not use retrieval.
    pub retrieved: &'a [Vector],
    /// Encoder output of the missing modality for an all-zero input; set
    /// only when the filler asks for it.
    pub miss_hidden: Option<&'a [f64]>,
    pub dim: usize,
    pub fallback: FusionFallback,
}

/// A filled slot and whether fusion fell back on a degenerate sum.
#[derive(Debug, Clone, PartialEq)]
pub struct Filled {
    pub values: Vec<f64>,
    pub degenerate: bool,
}

/// Strategy for the missing-modality slots of the joint classifier input.
pub trait SlotFiller: Send + Sync {
    fn name(&self) -> &'static str;

    fn uses_retrieval(&self) -> bool {
        true
    }

    fn uses_miss_hidden(&self) -> bool {
        false
    }

    fn fill(&self, ctx: &SlotContext<'_>) -> Result<Filled>;
}

/// Fused top-K substitute replaces the slot.
#[derive(Debug, Clone, Copy, Default)]
pub struct FusedRetrieval;

impl SlotFiller for FusedRetrieval {
    fn name(&self) -> &'static str {
        "retrieval"
    }

    fn fill(&self, ctx: &SlotContext<'_>) -> Result<Filled> {
        let fused = fuse_topk(ctx.retrieved, ctx.fallback)?;
        Ok(Filled {
            values: fused.vector.into_inner(),
            degenerate: fused.degenerate,
        })
    }
}

/// No retrieval; the slot is all zeros.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroFill;

impl SlotFiller for ZeroFill {
    fn name(&self) -> &'static str {
        "zero"
    }

    fn uses_retrieval(&self) -> bool {
        false
    }

    fn fill(&self, ctx: &SlotContext<'_>) -> Result<Filled> {
        Ok(Filled {
            values: vec![0.0; ctx.dim],
            degenerate: false,
        })
    }
}

/// Mean of the fused substitute and the normalized encoder output for a
/// zero input of the missing modality.
#[derive(Debug, Clone, Copy, Default)]
pub struct KeepMissAverage;

impl SlotFiller for KeepMissAverage {
    fn name(&self) -> &'static str {
        "keep-miss-avg"
    }

    fn uses_miss_hidden(&self) -> bool {
        true
    }

    fn fill(&self, ctx: &SlotContext<'_>) -> Result<Filled> {
        let miss = ctx
            .miss_hidden
            .ok_or(RamerError::Empty("missing-modality hidden feature"))?;
        let miss = l2_normalize(miss)?;
        let fused = fuse_topk(ctx.retrieved, ctx.fallback)?;
        Ok(Filled {
            values: fused
                .vector
                .iter()
                .zip(miss.iter())
                .map(|(f, m)| 0.5 * (f + m))
                .collect(),
            degenerate: fused.degenerate,
        })
    }
}
