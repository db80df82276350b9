//! Element-wise work distribution.
//!
//! With the `parallel` feature, index maps run on the rayon pool unless the
//! calling thread has opted into [`Mode::Sequential`]. Without the feature
//! everything runs on the calling thread.

use std::cell::Cell;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Sequential,
    Parallel,
}

thread_local! {
    static MODE: Cell<Mode> = const { Cell::new(Mode::Parallel) };
}

/// The mode in effect on this thread.
pub fn mode() -> Mode {
    if cfg!(feature = "parallel") {
        MODE.with(|m| m.get())
    } else {
        Mode::Sequential
    }
}

/// Runs `f` with this thread's mode set to `mode`, restoring it afterwards.
pub fn with_mode<R>(mode: Mode, f: impl FnOnce() -> R) -> R {
    struct Restore(Mode);
    impl Drop for Restore {
        fn drop(&mut self) {
            MODE.with(|m| m.set(self.0));
        }
    }
    let _restore = Restore(MODE.with(|m| m.replace(mode)));
    f()
}

/// `(0..len).map(f).collect()`, distributed when the mode allows.
pub fn map_indexed<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode() == Mode::Parallel && len > 1 {
        use rayon::prelude::*;
        return (0..len).into_par_iter().map(f).collect();
    }
    (0..len).map(f).collect()
}

/// Fallible variant of [`map_indexed`]; returns the first error by index order.
pub fn try_map_indexed<T, E, F>(len: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_indexed(len, f).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_agree() {
        let seq = with_mode(Mode::Sequential, || map_indexed(100, |i| i * i));
        let par = with_mode(Mode::Parallel, || map_indexed(100, |i| i * i));
        assert_eq!(seq, par);
        assert_eq!(seq[7], 49);
    }

    #[test]
    fn mode_restored() {
        let before = mode();
        with_mode(Mode::Sequential, || assert_eq!(mode(), Mode::Sequential));
        assert_eq!(mode(), before);
    }

    #[test]
    fn first_error_wins() {
        let r: Result<Vec<usize>, usize> = try_map_indexed(10, |i| if i >= 3 { Err(i) } else { Ok(i) });
        assert_eq!(r, Err(3));
    }
}
