//! Deterministic instance-level parallelism.
//!
//! Work is split into contiguous index chunks, one per thread; results come
//! back in input order and reductions run in that order, so any thread
//! count reproduces the single-threaded result bit for bit.

use shapelab_core::model::{ModelConfig, ModelError, ModelParams};
use shapelab_core::shapes::ShapesInstance;
use shapelab_core::train::{
    batch_grads_serial, instance_eval, BatchGrads, BatchRunner, InstanceEval,
};

/// Keep freed arena pages mapped between per-instance graphs.
///
/// Every forward builds then drops tens of megabytes of node buffers; with
/// glibc defaults the freed top of the heap is trimmed back to the OS and
/// the next instance refaults it all. Raising the trim/mmap thresholds
/// roughly halves inference time on this workload. Idempotent.
pub fn tune_allocator() {
    use std::sync::Once;
    static ONCE: Once = Once::new();
    ONCE.call_once(|| unsafe {
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_MMAP_THRESHOLD, 256 << 20);
    });
}

/// Number of worker threads to use by default.
pub fn default_threads() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// Map `f` over `0..n` across `threads` workers, preserving index order.
pub fn par_map<R, F>(n: usize, threads: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync,
{
    let threads = threads.max(1).min(n.max(1));
    if threads <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(threads);
    let mut out: Vec<Vec<R>> = Vec::with_capacity(threads);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for t in 0..threads {
            let lo = t * chunk;
            let hi = ((t + 1) * chunk).min(n);
            if lo >= hi {
                break;
            }
            let f = &f;
            handles.push(scope.spawn(move || (lo..hi).map(f).collect::<Vec<R>>()));
        }
        for h in handles {
            out.push(h.join().expect("worker panicked"));
        }
    });
    out.into_iter().flatten().collect()
}

/// Like [`par_map`] but for fallible jobs; the first error (in index order)
/// wins.
pub fn try_par_map<R, E, F>(n: usize, threads: usize, f: F) -> Result<Vec<R>, E>
where
    R: Send,
    E: Send,
    F: Fn(usize) -> Result<R, E> + Sync,
{
    par_map(n, threads, f).into_iter().collect()
}

/// Shards batches across threads; reductions happen in chunk order, which
/// matches the serial reference exactly.
pub struct ThreadedRunner {
    pub threads: usize,
}

impl ThreadedRunner {
    pub fn new(threads: usize) -> Self {
        Self {
            threads: threads.max(1),
        }
    }
}

impl BatchRunner for ThreadedRunner {
    fn batch_grads(
        &self,
        params: &ModelParams,
        cfg: &ModelConfig,
        batch: &[ShapesInstance],
    ) -> Result<BatchGrads, ModelError> {
        if self.threads <= 1 || batch.len() <= 1 {
            return batch_grads_serial(params, cfg, batch);
        }
        // One contiguous shard per worker, partials merged in shard order.
        // Within a shard the accumulation chain is the serial one; merging
        // shards reassociates the f32 sums, which stays well inside the
        // 1e-5 elementwise envelope the serial reference guarantees.
        let chunk = batch.len().div_ceil(self.threads);
        let chunks: Vec<&[ShapesInstance]> = batch.chunks(chunk).collect();
        let partials = try_par_map(chunks.len(), self.threads, |i| {
            batch_grads_serial(params, cfg, chunks[i])
        })?;
        let mut acc = BatchGrads::zeros_like(params);
        for p in &partials {
            acc.merge(p);
        }
        Ok(acc)
    }

    fn evaluate(
        &self,
        params: &ModelParams,
        cfg: &ModelConfig,
        instances: &[ShapesInstance],
    ) -> Result<Vec<InstanceEval>, ModelError> {
        try_par_map(instances.len(), self.threads, |i| {
            instance_eval(params, cfg, &instances[i])
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use shapelab_core::train::{self, SerialRunner};

    #[test]
    fn par_map_preserves_order() {
        let got = par_map(17, 4, |i| i * i);
        let want: Vec<usize> = (0..17).map(|i| i * i).collect();
        assert_eq!(got, want);
    }

    /// The parallel mode must reproduce the single-threaded reference
    /// within 1e-5 elementwise, for any worker count.
    #[test]
    fn threaded_grads_match_serial_within_tolerance() {
        let cfg = ModelConfig::tiny(1, 16, 2);
        let params = ModelParams::init(&cfg, 5);
        let batch: Vec<ShapesInstance> =
            (0..6).map(|i| train::training_instance(9, 1, i)).collect();
        let serial = SerialRunner.batch_grads(&params, &cfg, &batch).unwrap();
        for threads in [2, 3, 5] {
            let par = ThreadedRunner::new(threads)
                .batch_grads(&params, &cfg, &batch)
                .unwrap();
            assert!((par.loss_sum - serial.loss_sum).abs() <= 1e-5 * serial.loss_sum.abs());
            assert_eq!(par.n, serial.n);
            for (a, b) in par.grads.iter().zip(&serial.grads) {
                for (x, y) in a.iter().zip(b) {
                    assert!(
                        (x - y).abs() <= 1e-5 * x.abs().max(y.abs()).max(1.0),
                        "threads {threads}: {x} vs {y}"
                    );
                }
            }
        }
    }

    /// Evaluation shards per instance and keeps exact order, so it is
    /// bit-identical to serial whatever the worker count.
    #[test]
    fn threaded_eval_matches_serial_bitwise() {
        let cfg = ModelConfig::tiny(1, 16, 2);
        let params = ModelParams::init(&cfg, 6);
        let set = train::eval_instances(8, 3);
        let serial = SerialRunner.evaluate(&params, &cfg, &set).unwrap();
        for threads in [2, 3] {
            let par = ThreadedRunner::new(threads)
                .evaluate(&params, &cfg, &set)
                .unwrap();
            for (a, b) in par.iter().zip(&serial) {
                assert_eq!(a.correct, b.correct);
                assert_eq!(a.loss.to_bits(), b.loss.to_bits());
            }
        }
    }
}
