//! Data-parallel iteration helpers.
//!
//! With the `parallel` feature (default) the loops below run on the rayon
//! pool; without it they compile to plain sequential iteration. Work units
//! always own disjoint output slices and keep their internal accumulation
//! order fixed, so results are bit-identical across thread counts and with
//! the feature disabled.

/// Below this many elements the parallel dispatch falls back to the
/// sequential loop; rayon overhead dominates on tiny kernels.
#[cfg(feature = "parallel")]
const PAR_MIN_ELEMS: usize = 16 * 1024;

/// Applies `f(row_index, row)` to each `row_len` chunk of `data`.
#[cfg(feature = "parallel")]
pub(crate) fn for_each_row_mut<F>(data: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    use rayon::prelude::*;
    if data.len() < PAR_MIN_ELEMS {
        for (i, row) in data.chunks_mut(row_len).enumerate() {
            f(i, row);
        }
    } else {
        data.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn for_each_row_mut<F>(data: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    for (i, row) in data.chunks_mut(row_len).enumerate() {
        f(i, row);
    }
}

/// Applies `f(chunk_index, a_chunk, b_chunk)` over two buffers chunked in
/// lockstep (used where one work unit owns slices of two outputs).
#[cfg(feature = "parallel")]
pub(crate) fn for_each_two_chunks_mut<F>(a: &mut [f64], ca: usize, b: &mut [f64], cb: usize, f: F)
where
    F: Fn(usize, &mut [f64], &mut [f64]) + Sync,
{
    use rayon::prelude::*;
    if a.len() + b.len() < PAR_MIN_ELEMS {
        for (i, (x, y)) in a.chunks_mut(ca).zip(b.chunks_mut(cb)).enumerate() {
            f(i, x, y);
        }
    } else {
        a.par_chunks_mut(ca)
            .zip(b.par_chunks_mut(cb))
            .enumerate()
            .for_each(|(i, (x, y))| f(i, x, y));
    }
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn for_each_two_chunks_mut<F>(a: &mut [f64], ca: usize, b: &mut [f64], cb: usize, f: F)
where
    F: Fn(usize, &mut [f64], &mut [f64]) + Sync,
{
    for (i, (x, y)) in a.chunks_mut(ca).zip(b.chunks_mut(cb)).enumerate() {
        f(i, x, y);
    }
}

/// Three-buffer variant of [`for_each_two_chunks_mut`] with a shared chunk
/// size (attention backward owns slices of dq/dk/dv per sample).
#[cfg(feature = "parallel")]
pub(crate) fn for_each_three_chunks_mut<F>(
    a: &mut [f64],
    b: &mut [f64],
    c: &mut [f64],
    chunk: usize,
    f: F,
) where
    F: Fn(usize, &mut [f64], &mut [f64], &mut [f64]) + Sync,
{
    use rayon::prelude::*;
    if a.len() * 3 < PAR_MIN_ELEMS {
        for (i, ((x, y), z)) in a
            .chunks_mut(chunk)
            .zip(b.chunks_mut(chunk))
            .zip(c.chunks_mut(chunk))
            .enumerate()
        {
            f(i, x, y, z);
        }
    } else {
        a.par_chunks_mut(chunk)
            .zip(b.par_chunks_mut(chunk))
            .zip(c.par_chunks_mut(chunk))
            .enumerate()
            .for_each(|(i, ((x, y), z))| f(i, x, y, z));
    }
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn for_each_three_chunks_mut<F>(
    a: &mut [f64],
    b: &mut [f64],
    c: &mut [f64],
    chunk: usize,
    f: F,
) where
    F: Fn(usize, &mut [f64], &mut [f64], &mut [f64]) + Sync,
{
    for (i, ((x, y), z)) in a
        .chunks_mut(chunk)
        .zip(b.chunks_mut(chunk))
        .zip(c.chunks_mut(chunk))
        .enumerate()
    {
        f(i, x, y, z);
    }
}

/// Maps `f` over `0..n`, collecting results in index order.
#[cfg(feature = "parallel")]
pub(crate) fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..n).map(f).collect()
}
