//! Dense matrix kernels.
//!
//! Every kernel computes each output row with the same sequential reduction,
//! so the parallel and sequential strategies produce bitwise-identical results.

/// How a kernel distributes output rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

/// Multiply-adds below which a kernel stays on the calling thread.
pub const PARALLEL_THRESHOLD: usize = 1 << 15;

impl Strategy {
    pub fn auto(work: usize) -> Self {
        #[cfg(feature = "parallel")]
        if work >= PARALLEL_THRESHOLD && rayon::current_num_threads() > 1 {
            return Strategy::Parallel;
        }
        let _ = work;
        Strategy::Sequential
    }
}

/// Runs `f(row_index, row)` over each `width`-sized chunk of `out`.
pub fn for_each_row<F>(strategy: Strategy, out: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    match strategy {
        Strategy::Sequential => out.chunks_mut(width).enumerate().for_each(|(i, r)| f(i, r)),
        #[cfg(feature = "parallel")]
        Strategy::Parallel => {
            use rayon::prelude::*;
            out.par_chunks_mut(width)
                .enumerate()
                .for_each(|(i, r)| f(i, r))
        }
    }
}

/// `C[g] = A[g] · B[g]` with `A: [g, m, k]`, `B: [g, k, n]`.
pub fn gemm_nn(
    strategy: Strategy,
    a: &[f64],
    b: &[f64],
    groups: usize,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; groups * m * n];
    for_each_row(strategy, &mut out, n, |r, row| {
        let g = r / m;
        let a_row = &a[r * k..(r + 1) * k];
        let bg = &b[g * k * n..(g + 1) * k * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &bg[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
    out
}

/// `C[g] = A[g] · B[g]ᵀ` with `A: [g, m, k]`, `B: [g, n, k]`.
pub fn gemm_nt(
    strategy: Strategy,
    a: &[f64],
    b: &[f64],
    groups: usize,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; groups * m * n];
    for_each_row(strategy, &mut out, n, |r, row| {
        let g = r / m;
        let a_row = &a[r * k..(r + 1) * k];
        let bg = &b[g * n * k..(g + 1) * n * k];
        for (j, o) in row.iter_mut().enumerate() {
            let b_row = &bg[j * k..(j + 1) * k];
            *o = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    });
    out
}

/// `C[g] = A[g]ᵀ · B[g]` with `A: [g, k, m]`, `B: [g, k, n]`.
pub fn gemm_tn(
    strategy: Strategy,
    a: &[f64],
    b: &[f64],
    groups: usize,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; groups * m * n];
    for_each_row(strategy, &mut out, n, |r, row| {
        let g = r / m;
        let i = r % m;
        let ag = &a[g * k * m..(g + 1) * k * m];
        let bg = &b[g * k * n..(g + 1) * k * n];
        for p in 0..k {
            let av = ag[p * m + i];
            let b_row = &bg[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
    out
}
