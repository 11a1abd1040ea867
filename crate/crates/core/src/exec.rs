//! Execution strategy for the data-parallel loops (grid cells, per-period
//! generation, per-sentence metric counts). With the `parallel` feature off
//! everything runs sequentially and `Execution::Parallel` degrades to it.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Execution {
    Sequential,
    /// `workers = None` uses the global rayon pool.
    Parallel { workers: Option<usize> },
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel { workers: None }
        } else {
            Execution::Sequential
        }
    }
}

impl Execution {
    pub fn with_workers(workers: usize) -> Self {
        if workers <= 1 {
            Execution::Sequential
        } else {
            Execution::Parallel {
                workers: Some(workers),
            }
        }
    }

    pub fn is_parallel(&self) -> bool {
        cfg!(feature = "parallel") && matches!(self, Execution::Parallel { .. })
    }

    /// Maps `f` over `items`, preserving input order in the output.
    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel { workers } => {
                use rayon::prelude::*;
                match workers {
                    Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(*n).build() {
                        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
                        Err(e) => {
                            log::warn!("could not build a {n}-thread pool ({e}); using the global pool");
                            items.par_iter().map(&f).collect()
                        }
                    },
                    None => items.par_iter().map(&f).collect(),
                }
            }
            _ => items.iter().map(f).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order_in_both_modes() {
        let xs: Vec<u64> = (0..1000).collect();
        let seq = Execution::Sequential.map(&xs, |x| x * x);
        let par = Execution::with_workers(4).map(&xs, |x| x * x);
        assert_eq!(seq, par);
        assert_eq!(seq[999], 999 * 999);
    }
}
