use shapelab_core::model::{ModelConfig, ModelParams};
use shapelab_core::shapes::{generate, Pool, TaskConfig};
use shapelab_core::train;
use std::time::Instant;

fn main() {
    let cfg = ModelConfig::default();
    let params = ModelParams::init(&cfg, 0);
    let inst = generate::make_instance(1, Pool::Eval, &TaskConfig::default());

    // Forward only (inference)
    let t0 = Instant::now();
    let n = 10;
    for _ in 0..n {
        let _ = train::instance_eval(&params, &cfg, &inst).unwrap();
    }
    let fwd = t0.elapsed().as_secs_f64() / n as f64;

    // Forward + backward
    let t0 = Instant::now();
    for _ in 0..n {
        let _ = train::instance_loss_grads(&params, &cfg, &inst).unwrap();
    }
    let fwdbwd = t0.elapsed().as_secs_f64() / n as f64;

    println!("forward: {:.1} ms, forward+backward: {:.1} ms", fwd * 1e3, fwdbwd * 1e3);
    println!("batch-64 step serial: {:.2} s, 2 threads: {:.2} s", fwdbwd * 64.0, fwdbwd * 32.0);
    println!("n_params: {}", params.n_params());
}
