//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the helpers fan out over rayon. Every helper
//! preserves input order in its output, so results are identical in both
//! modes. [`with_mode`] forces sequential execution on the calling thread,
//! which is what the benches use to compare the two paths in one binary.

use std::cell::Cell;

/// Execution strategy for the helpers in this module.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Sequential,
    Parallel,
}

thread_local! {
    static MODE: Cell<Mode> = const { Cell::new(Mode::Parallel) };
}

/// Runs `f` with the given mode active on this thread.
pub fn with_mode<R>(mode: Mode, f: impl FnOnce() -> R) -> R {
    let prev = MODE.with(|m| m.replace(mode));
    let out = f();
    MODE.with(|m| m.set(prev));
    out
}

/// Mode that will actually be used by the next helper call on this thread.
pub fn current_mode() -> Mode {
    if cfg!(feature = "parallel") {
        MODE.with(|m| m.get())
    } else {
        Mode::Sequential
    }
}

/// Order-preserving map over a slice.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if current_mode() == Mode::Parallel {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}

/// Order-preserving map over `0..n`.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if current_mode() == Mode::Parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Order-preserving fallible map; returns the first error by index.
pub fn try_map<T, R, E, F>(items: &[T], f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(&T) -> Result<R, E> + Sync + Send,
{
    map(items, f).into_iter().collect()
}

/// Fallible [`map_range`]; returns the first error by index.
pub fn try_map_range<R, E, F>(n: usize, f: F) -> Result<Vec<R>, E>
where
    R: Send,
    E: Send,
    F: Fn(usize) -> Result<R, E> + Sync + Send,
{
    map_range(n, f).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let xs: Vec<u64> = (0..1000).collect();
        let a = with_mode(Mode::Sequential, || map(&xs, |x| x * x));
        let b = with_mode(Mode::Parallel, || map(&xs, |x| x * x));
        assert_eq!(a, b);
        assert_eq!(map_range(5, |i| i + 1), vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn with_mode_restores() {
        with_mode(Mode::Sequential, || {
            assert_eq!(current_mode(), Mode::Sequential);
        });
        if cfg!(feature = "parallel") {
            assert_eq!(current_mode(), Mode::Parallel);
        }
    }

    #[test]
    fn try_map_reports_first_error() {
        let xs = [1, 2, 3, 4];
        let r: Result<Vec<i32>, i32> = try_map(&xs, |&x| if x >= 3 { Err(x) } else { Ok(x) });
        assert_eq!(r, Err(3));
    }
}
