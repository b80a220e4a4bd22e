use shapelab::parallel::{tune_allocator, ThreadedRunner};
use shapelab_core::model::{ModelConfig, ModelParams};
use shapelab_core::shapes::{generate, Pool, TaskConfig};
use shapelab_core::train::{Adam, BatchRunner, TrainConfig};

fn main() {
    tune_allocator();
    let args: Vec<String> = std::env::args().collect();
    let lr: f32 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let n: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(8);
    let steps: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(300);
    let cfg = ModelConfig::default();
    let mut params = ModelParams::init(&cfg, 0);
    let tc = TrainConfig {
        lr,
        batch: n,
        ..TrainConfig::default()
    };
    let batch: Vec<_> = (0..n as u64)
        .map(|s| generate::make_instance(s, Pool::Eval, &TaskConfig::default()))
        .collect();
    let runner = ThreadedRunner::new(2);
    let mut adam = Adam::new(&params);
    for step in 1..=steps {
        let bg = runner.batch_grads(&params, &cfg, &batch).unwrap();
        let inv = 1.0 / bg.n as f32;
        let grads: Vec<Vec<f32>> = bg
            .grads
            .iter()
            .map(|g| g.iter().map(|&x| x * inv).collect())
            .collect();
        adam.step(&mut params, &grads, &tc);
        if step % 20 == 0 {
            let evals = runner.evaluate(&params, &cfg, &batch).unwrap();
            let acc = evals.iter().filter(|e| e.correct).count() as f32 / n as f32;
            println!("step {step}: loss {:.4} acc(batch) {acc:.3}", bg.loss_sum * inv);
        }
    }
}
