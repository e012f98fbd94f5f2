//! Row-parallel helpers. With the `parallel` feature the closures run on the
//! rayon pool; without it they run sequentially. Each row is always computed
//! by the same arithmetic, so results are bitwise identical either way.

/// Minimum amount of work (rows × inner size) before we hand a loop to rayon.
#[cfg(feature = "parallel")]
const PAR_THRESHOLD: usize = 1 << 14;

/// Apply `f(row_index, row)` to each `width`-sized chunk of `out`.
pub fn for_each_row<F>(out: &mut [f32], width: usize, work_per_row: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        let rows = out.len() / width;
        if rows > 1 && rows * work_per_row.max(1) >= PAR_THRESHOLD {
            use rayon::prelude::*;
            out.par_chunks_mut(width)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
    }
    let _ = work_per_row;
    out.chunks_mut(width).enumerate().for_each(|(i, row)| f(i, row));
}

/// Like [`for_each_row`] but walks two buffers in lock-step.
pub fn for_each_row2<F>(
    a: &mut [f32],
    a_width: usize,
    b: &mut [f32],
    b_width: usize,
    work_per_row: usize,
    f: F,
) where
    F: Fn(usize, &mut [f32], &mut [f32]) + Sync + Send,
{
    if a_width == 0 {
        return;
    }
    let rows = a.len() / a_width;
    if b_width == 0 {
        for_each_row(a, a_width, work_per_row, |i, ra| f(i, ra, &mut []));
        return;
    }
    debug_assert_eq!(rows, b.len() / b_width);
    #[cfg(feature = "parallel")]
    {
        if rows > 1 && rows * work_per_row.max(1) >= PAR_THRESHOLD {
            use rayon::prelude::*;
            a.par_chunks_mut(a_width)
                .zip(b.par_chunks_mut(b_width))
                .enumerate()
                .for_each(|(i, (ra, rb))| f(i, ra, rb));
            return;
        }
    }
    a.chunks_mut(a_width)
        .zip(b.chunks_mut(b_width))
        .enumerate()
        .for_each(|(i, (ra, rb))| f(i, ra, rb));
}

/// Map over `0..n`, preserving index order in the output.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Map over a slice, preserving order.
pub fn map_slice<S, T, F>(items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}
