//! Data-parallel map helpers.
//!
//! Token-level forwards, Monte-Carlo trials, and trace collection are
//! embarrassingly parallel. With the `parallel` feature (default) the maps
//! run on rayon; without it they fall back to plain iteration. Results are
//! always produced in input order and reduced sequentially by callers, so
//! outputs are bit-identical regardless of thread count.

/// Maps `f` over `0..n` in order, in parallel when available.
pub fn par_collect<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
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

/// Sequential reference path, kept callable even in parallel builds so the
/// bench suite can compare both.
pub fn seq_collect<R, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R,
{
    (0..n).map(f).collect()
}

/// Caps the rayon worker pool from the `MOECOND_THREADS` env var.
///
/// No-op when the variable is unset, unparseable, or the pool was already
/// built. Without the `parallel` feature everything is sequential anyway.
pub fn configure_threads_from_env() {
    #[cfg(feature = "parallel")]
    {
        if let Ok(raw) = std::env::var("MOECOND_THREADS") {
            if let Ok(n) = raw.trim().parse::<usize>() {
                if n >= 1 {
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree_elementwise() {
        let f = |i: usize| (i as f64).sin() * 1e3;
        let a = par_collect(257, f);
        let b = seq_collect(257, f);
        let bits = |xs: &[f64]| xs.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}
