//! Causal attention masks with an optional local window.
//!
//! Keys are laid out as `[memory slots..., current segment...]`. Query `t`
//! of the current segment sits at key index `mem + t`. Every allowed key set
//! is a contiguous range ending at that index, which is what lets the
//! attention kernel skip masked keys entirely.

use std::ops::Range;

use super::Window;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    mem: usize,
    n_keys: usize,
    ranges: Vec<Range<usize>>,
}

impl AttentionMask {
    pub fn n_queries(&self) -> usize {
        self.ranges.len()
    }

    pub fn n_keys(&self) -> usize {
        self.n_keys
    }

    pub fn memory_len(&self) -> usize {
        self.mem
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.ranges[query].contains(&key)
    }

    pub fn key_range(&self, query: usize) -> Range<usize> {
        self.ranges[query].clone()
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    /// Row-major boolean matrix, `true` where attention is allowed.
    pub fn to_dense(&self) -> Vec<Vec<bool>> {
        self.ranges.iter().map(|r| (0..self.n_keys).map(|j| r.contains(&j)).collect()).collect()
    }
}

/// Builds the `[t × (mem + t)]` mask for a segment of `t` queries.
///
/// Query `i` may see key `j` iff `j <= mem + i` and, with a local window,
/// `(mem + i) - j < window`. Memory slots count towards the window.
pub fn attention_mask(t: usize, mem: usize, window: Window) -> Result<AttentionMask> {
    if let Window::Local(0) = window {
        return Err(Error::Config("attention window must be at least 1".into()));
    }
    let ranges = (0..t)
        .map(|i| {
            let q = mem + i;
            let lo = match window {
                Window::Dense => 0,
                Window::Local(w) => (q + 1).saturating_sub(w),
            };
            lo..q + 1
        })
        .collect();
    Ok(AttentionMask { mem, n_keys: mem + t, ranges })
}
