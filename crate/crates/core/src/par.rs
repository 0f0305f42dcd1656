//! Data-parallel dispatch for the kernels.
//!
//! Every helper hands each task a disjoint output region and runs the
//! closure for that region sequentially, so results never depend on the
//! thread count. With the `parallel` feature the regions are distributed by
//! rayon; without it, or inside [`sequential`], they run in index order on
//! the calling thread.

use std::cell::Cell;

thread_local! {
    static FORCE_SEQUENTIAL: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` with the sequential fallback forced on the current thread.
pub fn sequential<R>(f: impl FnOnce() -> R) -> R {
    let prev = FORCE_SEQUENTIAL.with(|c| c.replace(true));
    let out = f();
    FORCE_SEQUENTIAL.with(|c| c.set(prev));
    out
}

/// Whether kernels dispatched from this thread fan out across threads.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.with(|c| c.get())
}

/// Caps the kernel thread pool. Only the first call has an effect.
#[cfg(feature = "parallel")]
pub fn configure_threads(n: usize) -> bool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build_global()
        .is_ok()
}

#[cfg(not(feature = "parallel"))]
pub fn configure_threads(_n: usize) -> bool {
    false
}

/// Calls `f(i, chunk)` for every `chunk_len`-sized chunk of `out`.
pub fn for_each_chunk<T, F>(out: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk_len > 0, "chunk_len must be positive");
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in out.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}

/// Evaluates `f` on `0..n` and collects the results in index order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_cover_output_in_order() {
        let mut v = vec![0usize; 10];
        for_each_chunk(&mut v, 3, |i, c| c.iter_mut().for_each(|x| *x = i));
        assert_eq!(v, [0, 0, 0, 1, 1, 1, 2, 2, 2, 3]);
    }

    #[test]
    fn sequential_override_is_scoped() {
        let before = is_parallel();
        sequential(|| assert!(!is_parallel()));
        assert_eq!(is_parallel(), before);
        assert_eq!(map_range(4, |i| i * i), [0, 1, 4, 9]);
    }
}
