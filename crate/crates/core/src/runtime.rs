//! Worker pools and in-flight bounds shared by the pipeline stages.

use std::sync::{Condvar, Mutex};

/// Counting semaphore that also records the highest concurrent use.
#[derive(Debug)]
pub struct Semaphore {
    state: Mutex<(usize, usize)>,
    limit: usize,
    freed: Condvar,
}

pub struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    pub fn new(limit: usize) -> Self {
        Self {
            state: Mutex::new((0, 0)),
            limit,
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut st = self.state.lock().unwrap();
        while st.0 >= self.limit {
            st = self.freed.wait(st).unwrap();
        }
        st.0 += 1;
        st.1 = st.1.max(st.0);
        Permit(self)
    }

    pub fn peak(&self) -> usize {
        self.state.lock().unwrap().1
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut st = self.0.state.lock().unwrap();
        st.0 -= 1;
        self.0.freed.notify_one();
    }
}

/// Default worker count: the number of logical cores.
pub fn default_parallelism() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Run `f` on a dedicated pool of `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool");
    pool.install(f)
}
