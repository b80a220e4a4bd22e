use shapelab::parallel::ThreadedRunner;
use shapelab_core::model::{ModelConfig, ModelParams};
use shapelab_core::train::{self, BatchRunner};
use std::time::Instant;

fn main() {
    shapelab::parallel::tune_allocator();
    let cfg = ModelConfig::default();
    let params = ModelParams::init(&cfg, 0);

    let t = Instant::now();
    let batch: Vec<_> = (0..64).map(|s| train::training_instance(0, 1, s)).collect();
    println!("gen batch: {:.2} s", t.elapsed().as_secs_f64());

    let runner = ThreadedRunner::new(2);
    for step in 0..3 {
        let t = Instant::now();
        let bg = runner.batch_grads(&params, &cfg, &batch).unwrap();
        println!("batch_grads step {step}: {:.2} s (loss {})", t.elapsed().as_secs_f64(), bg.loss_sum / 64.0);
    }

    let t = Instant::now();
    let evals = runner.evaluate(&params, &cfg, &train::eval_instances(256, 0)).unwrap();
    println!("eval 256 (2 threads): {:.2} s ({} evals)", t.elapsed().as_secs_f64(), evals.len());
}
