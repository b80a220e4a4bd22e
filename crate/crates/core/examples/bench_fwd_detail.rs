use shapelab_core::model::{bind_params, embed_prompt, forward, AttnMask, ModelConfig, ModelParams};
use shapelab_core::shapes::{generate, Pool, TaskConfig};
use shapelab_core::tensor::Graph;
use std::time::Instant;

fn main() {
    let cfg = ModelConfig::default();
    let params = ModelParams::init(&cfg, 0);
    let inst = generate::make_instance(1, Pool::Eval, &TaskConfig::default());
    let n = 20;

    // Embedding only
    let t = Instant::now();
    for _ in 0..n {
        let mut g = Graph::inference();
        let pv = bind_params(&mut g, &params);
        let e = embed_prompt(&mut g, &pv, &cfg, &inst).unwrap();
        std::hint::black_box(g.value(e).data()[0]);
    }
    println!("embed: {:.1} ms", t.elapsed().as_secs_f64() / n as f64 * 1e3);

    // Full forward inference
    let t = Instant::now();
    for _ in 0..n {
        let mut g = Graph::inference();
        let pv = bind_params(&mut g, &params);
        let e = embed_prompt(&mut g, &pv, &cfg, &inst).unwrap();
        let positions: Vec<i64> = (0..inst.tokens.len() as i64).collect();
        let out = forward(&mut g, &pv, &cfg, e, &positions, &AttnMask::Causal).unwrap();
        std::hint::black_box(g.value(out.logits).data()[0]);
    }
    println!("embed+forward: {:.1} ms", t.elapsed().as_secs_f64() / n as f64 * 1e3);
}
