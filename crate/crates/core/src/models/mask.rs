use serde::{Deserialize, Serialize};

/// Visibility pattern of a self- or cross-attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskKind {
    Causal,
    Full,
    /// Bidirectional over the first `k` positions, causal afterwards.
    PrefixBidirectional(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub kind: MaskKind,
    pub t_q: usize,
    pub t_k: usize,
}

impl AttentionMask {
    pub fn new(kind: MaskKind, t_q: usize, t_k: usize) -> Self {
        Self { kind, t_q, t_k }
    }

    pub fn visible(&self, i: usize, j: usize) -> bool {
        match self.kind {
            MaskKind::Full => true,
            MaskKind::Causal => j <= i,
            MaskKind::PrefixBidirectional(k) => j < k || j <= i,
        }
    }

    /// Row-major visibility matrix, or `None` when everything is visible.
    pub fn matrix(&self) -> Option<Vec<bool>> {
        if self.kind == MaskKind::Full {
            return None;
        }
        Some(
            (0..self.t_q)
                .flat_map(|i| (0..self.t_k).map(move |j| (i, j)))
                .map(|(i, j)| self.visible(i, j))
                .collect(),
        )
    }
}
