//! Execution policy for the data-parallel loops (per sample, per window,
//! per image).
//!
//! Every parallel loop in the crate goes through [`Exec::map`], which
//! returns results in index order. Reductions over those results are done
//! sequentially by the caller, so outputs do not depend on the worker count.
//! With the `parallel` feature disabled every policy runs sequentially.

#[cfg(feature = "parallel")]
use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Clone)]
pub struct Exec {
    workers: usize,
    #[cfg(feature = "parallel")]
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl Default for Exec {
    fn default() -> Self {
        Exec::sequential()
    }
}

impl std::fmt::Debug for Exec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Exec").field("workers", &self.workers).finish()
    }
}

impl Exec {
    pub fn sequential() -> Self {
        Exec {
            workers: 1,
            #[cfg(feature = "parallel")]
            pool: None,
        }
    }

    /// A pool of `workers` threads. `workers == 1` is the sequential policy.
    pub fn with_workers(workers: usize) -> Result<Self> {
        if workers == 0 {
            return Err(Error::Parameter("worker count must be at least 1".into()));
        }
        if workers == 1 {
            return Ok(Exec::sequential());
        }
        #[cfg(feature = "parallel")]
        {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| Error::Parameter(format!("cannot start worker pool: {e}")))?;
            Ok(Exec {
                workers,
                pool: Some(Arc::new(pool)),
            })
        }
        #[cfg(not(feature = "parallel"))]
        {
            log::warn!("built without the `parallel` feature; ignoring --workers {workers}");
            Ok(Exec { workers: 1 })
        }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn is_parallel(&self) -> bool {
        #[cfg(feature = "parallel")]
        {
            self.pool.is_some()
        }
        #[cfg(not(feature = "parallel"))]
        {
            false
        }
    }

    /// Evaluates `f(0..n)` and returns the results in index order.
    pub fn map<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| (0..n).into_par_iter().map(&f).collect());
        }
        (0..n).map(f).collect()
    }

    /// Like [`Exec::map`] but stops at the first error (in index order).
    pub fn try_map<R, F>(&self, n: usize, f: F) -> Result<Vec<R>>
    where
        R: Send,
        F: Fn(usize) -> Result<R> + Sync + Send,
    {
        self.map(n, f).into_iter().collect()
    }
}
