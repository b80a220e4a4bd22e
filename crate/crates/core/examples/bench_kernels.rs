use shapelab_core::rng::Pcg32;
use shapelab_core::tensor::kernels;
use std::time::Instant;

fn main() {
    let mut rng = Pcg32::new(1, 0);
    let mut rand = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.gauss()).collect() };

    // [166,128] x [128,512] like the MLP up-projection
    let (m, k, n) = (166, 128, 512);
    let a = rand(m * k);
    let b = rand(k * n);
    let mut out = vec![0.0f32; m * n];
    let reps = 200;
    let t = Instant::now();
    for _ in 0..reps {
        out.iter_mut().for_each(|x| *x = 0.0);
        kernels::matmul_nn(&a, &b, m, k, n, &mut out);
    }
    let dt = t.elapsed().as_secs_f64() / reps as f64;
    println!("matmul_nn {}x{}x{}: {:.3} ms = {:.1} GFLOP/s", m, k, n, dt * 1e3, 2.0 * (m * k * n) as f64 / dt / 1e9);

    let bt = rand(n * k);
    let t = Instant::now();
    for _ in 0..reps {
        out.iter_mut().for_each(|x| *x = 0.0);
        kernels::matmul_nt(&a, &bt, m, k, n, &mut out);
    }
    let dt = t.elapsed().as_secs_f64() / reps as f64;
    println!("matmul_nt: {:.3} ms = {:.1} GFLOP/s", dt * 1e3, 2.0 * (m * k * n) as f64 / dt / 1e9);

    let bb = rand(m * n);
    let mut out2 = vec![0.0f32; k * n];
    let t = Instant::now();
    for _ in 0..reps {
        out2.iter_mut().for_each(|x| *x = 0.0);
        kernels::matmul_tn(&a, &bb, m, k, n, &mut out2);
    }
    let dt = t.elapsed().as_secs_f64() / reps as f64;
    println!("matmul_tn: {:.3} ms = {:.1} GFLOP/s", dt * 1e3, 2.0 * (m * k * n) as f64 / dt / 1e9);

    // softmax on [166,166] x 16 (4 heads x 4 layers)
    let p = 166;
    let x = rand(p * p);
    let mut y = vec![0.0f32; p * p];
    let t = Instant::now();
    for _ in 0..reps {
        kernels::softmax_strided(&x, &mut y, p, p, p, 1);
    }
    let dt = t.elapsed().as_secs_f64() / reps as f64;
    println!("softmax 166x166: {:.3} ms ({:.1} ns/elem)", dt * 1e3, dt * 1e9 / (p * p) as f64);

    // gelu on [166,512]
    let g = rand(166 * 512);
    let t = Instant::now();
    let mut acc = 0.0f32;
    for _ in 0..reps {
        for &v in &g {
            acc += kernels::gelu(v);
        }
    }
    let dt = t.elapsed().as_secs_f64() / reps as f64;
    println!("gelu 166x512: {:.3} ms (sink {acc})", dt * 1e3);

    // rope table build for 166 positions
    let positions: Vec<i64> = (0..166).collect();
    let t = Instant::now();
    for _ in 0..reps {
        let tab = kernels::RopeTable::new(&positions, 32, 10000.0);
        std::hint::black_box(&tab);
    }
    let dt = t.elapsed().as_secs_f64() / reps as f64;
    println!("rope table 166x16: {:.3} ms", dt * 1e3);
}
