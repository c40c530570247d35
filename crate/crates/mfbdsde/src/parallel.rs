//! Deterministic parallel helpers.
//!
//! Reductions are split into fixed-size chunks whose partial results are
//! combined in chunk order, so the floating-point result does not depend on
//! the number of worker threads.

use rayon::prelude::*;

/// Chunk length used by every fixed-order reduction.
pub const CHUNK: usize = 512;

/// Sum of `f(i)` for `i in 0..len`, reduced in a thread-count independent order.
pub fn sum_by<F>(len: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let partials: Vec<f64> = (0..len.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(len);
            let mut acc = 0.0;
            for i in lo..hi {
                acc += f(i);
            }
            acc
        })
        .collect();
    partials.iter().sum()
}

/// Element-wise sum of the vectors produced by `f(i, acc)` for `i in 0..len`.
/// `f` adds its contribution into the accumulator it is handed.
pub fn vec_sum_by<F>(len: usize, width: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let partials: Vec<Vec<f64>> = (0..len.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(len);
            let mut acc = vec![0.0; width];
            for i in lo..hi {
                f(i, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; width];
    for p in &partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// Fill `out` row by row in parallel; row `r` occupies `out[r*width..(r+1)*width]`.
pub fn fill_rows<F>(out: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    if width == 0 {
        return;
    }
    out.par_chunks_mut(width).enumerate().for_each(|(r, row)| f(r, row));
}

/// Mean of each column of a row-major `rows x width` matrix.
pub fn column_means(data: &[f64], width: usize) -> Vec<f64> {
    if width == 0 {
        return Vec::new();
    }
    let rows = data.len() / width;
    let mut s = vec_sum_by(rows, width, |r, acc| {
        for (a, v) in acc.iter_mut().zip(&data[r * width..(r + 1) * width]) {
            *a += v;
        }
    });
    if rows > 0 {
        for v in &mut s {
            *v /= rows as f64;
        }
    }
    s
}
