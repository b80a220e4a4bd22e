use shapelab_core::model::causal_mask;
use shapelab_core::rng::Pcg32;
use shapelab_core::tensor::kernels::{self, RopeTable};
use shapelab_core::tensor::{Graph, Tensor};
use std::sync::Arc;
use std::time::Instant;

fn t(label: &str, reps: usize, mut f: impl FnMut()) {
    let start = Instant::now();
    for _ in 0..reps {
        f();
    }
    println!("{label}: {:.3} ms", start.elapsed().as_secs_f64() / reps as f64 * 1e3);
}

fn main() {
    let mut rng = Pcg32::new(1, 0);
    let mut rand = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.gauss() * 0.3).collect() };
    let p = 166;
    let d = 128;

    let x = Tensor::from_vec(vec![p, d], rand(p * d)).unwrap();
    let gamma = Tensor::from_vec(vec![d], vec![1.0; d]).unwrap();
    let beta = Tensor::from_vec(vec![d], vec![0.0; d]).unwrap();
    let w = Tensor::from_vec(vec![d, d], rand(d * d)).unwrap();
    let wup = Tensor::from_vec(vec![d, 4 * d], rand(d * 4 * d)).unwrap();
    let hidden = Tensor::from_vec(vec![p, 4 * d], rand(p * 4 * d)).unwrap();
    let bias = Tensor::from_vec(vec![d], rand(d)).unwrap();
    let mask = causal_mask(p);
    let table = Arc::new(RopeTable::new(&(0..p as i64).collect::<Vec<_>>(), 32, 1e4));

    let reps = 100;
    t("graph ln [166,128]", reps, || {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let gv = g.constant(gamma.clone());
        let bv = g.constant(beta.clone());
        let o = g.layer_norm(xv, gv, bv, 1e-5).unwrap();
        std::hint::black_box(g.value(o).data()[0]);
    });
    t("graph matmul [166,128]x[128,128]", reps, || {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let o = g.matmul(xv, wv).unwrap();
        std::hint::black_box(g.value(o).data()[0]);
    });
    t("graph matmul [166,128]x[128,512]", reps, || {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let wv = g.constant(wup.clone());
        let o = g.matmul(xv, wv).unwrap();
        std::hint::black_box(g.value(o).data()[0]);
    });
    t("graph gelu [166,512]", reps, || {
        let mut g = Graph::inference();
        let hv = g.constant(hidden.clone());
        let o = g.gelu(hv);
        std::hint::black_box(g.value(o).data()[0]);
    });
    t("graph add bias [166,128]", reps, || {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let bv = g.constant(bias.clone());
        let o = g.add(xv, bv).unwrap();
        std::hint::black_box(g.value(o).data()[0]);
    });
    t("fused attention fwd (no aux)", reps, || {
        let mut out = vec![0.0f32; p * d];
        kernels::attention_forward(
            x.data(), x.data(), x.data(), mask.data(), &table, 4, 0.177, &mut out, None,
        );
        std::hint::black_box(out[0]);
    });
    // constant(x.clone()) cost itself:
    t("tensor clone + constant", reps, || {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        std::hint::black_box(g.value(xv).data()[0]);
    });
}
