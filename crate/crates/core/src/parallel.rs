//! Worker-pool plumbing. The `GRADSAMPLE_THREADS` environment variable caps
//! parallelism crate-wide (0 or unset = one worker per core).

use std::sync::OnceLock;

static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();

fn pool() -> &'static Option<rayon::ThreadPool> {
    POOL.get_or_init(|| {
        let n: usize = std::env::var("GRADSAMPLE_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(0);
        if n == 0 {
            None
        } else {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .expect("worker pool construction cannot fail with fixed thread count"),
            )
        }
    })
}

/// Runs `f` inside the configured pool (or rayon's default when no cap is
/// set). All parallel iterators inside `f` are bounded by the cap.
pub fn install<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    match pool() {
        Some(p) => p.install(f),
        None => f(),
    }
}
