use alloc::vec::Vec;

use super::parse::caption_words;
use crate::attention::TokenSet;

/// Target token positions that are not matched to the source by a longest
/// common subsequence alignment of the two token streams.
pub fn caption_diff(source: &str, target: &str) -> TokenSet {
    let a = caption_words(source);
    let b = caption_words(target);
    let (n, m) = (a.len(), b.len());
    // lcs[i][j] = LCS length of a[i..] and b[j..]
    let mut lcs = alloc::vec![0u32; (n + 1) * (m + 1)];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            lcs[idx(i, j)] = if a[i] == b[j] {
                lcs[idx(i + 1, j + 1)] + 1
            } else {
                lcs[idx(i + 1, j)].max(lcs[idx(i, j + 1)])
            };
        }
    }
    let mut matched = alloc::vec![false; m];
    let (mut i, mut j) = (0, 0);
    while i < n && j < m {
        if a[i] == b[j] {
            matched[j] = true;
            i += 1;
            j += 1;
        } else if lcs[idx(i + 1, j)] >= lcs[idx(i, j + 1)] {
            i += 1;
        } else {
            j += 1;
        }
    }
    matched
        .iter()
        .enumerate()
        .filter(|(_, &hit)| !hit)
        .map(|(k, _)| k)
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}
