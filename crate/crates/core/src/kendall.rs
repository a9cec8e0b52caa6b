//! Normalized Kendall tau distance between channel rankings.

use crate::error::{Error, Result};

/// Channel indices sorted by decreasing gate value (stable on ties).
pub fn ranking(values: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    idx
}

/// Fraction of item pairs ordered differently by the two rankings.
/// Rankings list item ids from first to last place.
pub fn kendall_tau_distance(a: &[usize], b: &[usize]) -> Result<f64> {
    let n = a.len();
    if n != b.len() {
        return Err(Error::InvalidParams(format!("rankings have lengths {n} and {}", b.len())));
    }
    if n < 2 {
        return Err(Error::InvalidParams("rankings need at least two items".into()));
    }
    let mut pos_b = vec![usize::MAX; n];
    for (p, &item) in b.iter().enumerate() {
        if item >= n || pos_b[item] != usize::MAX {
            return Err(Error::InvalidParams("ranking is not a permutation".into()));
        }
        pos_b[item] = p;
    }
    let mut seen = vec![false; n];
    let mut seq = Vec::with_capacity(n);
    for &item in a {
        if item >= n || std::mem::replace(&mut seen[item], true) {
            return Err(Error::InvalidParams("ranking is not a permutation".into()));
        }
        seq.push(pos_b[item]);
    }
    let discordant = inversions(&mut seq);
    Ok(discordant as f64 / (n * (n - 1) / 2) as f64)
}

/// Counts inversions by merge sort, sorting `v` in place.
fn inversions(v: &mut [usize]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut count = inversions(&mut v[..mid]) + inversions(&mut v[mid..]);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[i] <= v[j] {
            merged.push(v[i]);
            i += 1;
        } else {
            merged.push(v[j]);
            count += (mid - i) as u64;
            j += 1;
        }
    }
    merged.extend_from_slice(&v[i..mid]);
    merged.extend_from_slice(&v[j..]);
    v.copy_from_slice(&merged);
    count
}
