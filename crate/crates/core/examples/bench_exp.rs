use shapelab_core::mathf;
use std::time::Instant;

fn main() {
    let xs: Vec<f32> = (0..85000).map(|i| (i % 1000) as f32 * 0.008 - 4.0).collect();
    let reps = 100;

    let t = Instant::now();
    let mut sink = vec![0.0f32; xs.len()];
    for _ in 0..reps {
        for (o, &x) in sink.iter_mut().zip(&xs) {
            *o = mathf::expf(x);
        }
        std::hint::black_box(&sink);
    }
    println!("mathf::expf: {:.2} ns/elem", t.elapsed().as_secs_f64() / (reps * xs.len()) as f64 * 1e9);

    let t = Instant::now();
    for _ in 0..reps {
        for (o, &x) in sink.iter_mut().zip(&xs) {
            *o = libm::expf(x);
        }
        std::hint::black_box(&sink);
    }
    println!("libm::expf:  {:.2} ns/elem", t.elapsed().as_secs_f64() / (reps * xs.len()) as f64 * 1e9);

    let t = Instant::now();
    for _ in 0..reps {
        for (o, &x) in sink.iter_mut().zip(&xs) {
            *o = mathf::tanhf(x);
        }
        std::hint::black_box(&sink);
    }
    println!("mathf::tanhf: {:.2} ns/elem", t.elapsed().as_secs_f64() / (reps * xs.len()) as f64 * 1e9);

    let t = Instant::now();
    for _ in 0..reps {
        for (o, &x) in sink.iter_mut().zip(&xs) {
            *o = shapelab_core::tensor::kernels::gelu(x);
        }
        std::hint::black_box(&sink);
    }
    println!("gelu: {:.2} ns/elem", t.elapsed().as_secs_f64() / (reps * xs.len()) as f64 * 1e9);
}
