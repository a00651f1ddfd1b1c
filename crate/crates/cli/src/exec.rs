use fireseg::exec::SampleMap;
use rayon::prelude::*;

/// Sequential on one thread, otherwise a dedicated rayon pool. Results come
/// back in index order either way, so training is bitwise identical at any
/// thread count.
pub enum Exec {
    Sequential,
    Pool(rayon::ThreadPool),
}

impl Exec {
    pub fn new(threads: usize) -> anyhow::Result<Self> {
        match threads {
            0 => anyhow::bail!("--threads must be at least 1"),
            1 => Ok(Self::Sequential),
            n => Ok(Self::Pool(rayon::ThreadPoolBuilder::new().num_threads(n).build()?)),
        }
    }
}

impl SampleMap for Exec {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            Self::Sequential => (0..n).map(f).collect(),
            Self::Pool(pool) => pool.install(|| (0..n).into_par_iter().map(f).collect()),
        }
    }
}
