use shapelab::parallel::{tune_allocator, try_par_map};
use shapelab_core::mathf;
use shapelab_core::model::full_forward;
use shapelab_core::shapes::{generate, Pool, TaskConfig};
use shapelab_core::train::eval_instances;

fn main() {
    tune_allocator();
    let args: Vec<String> = std::env::args().collect();
    let ckpt = args.get(1).expect("usage: probe_mass CKPT [N]");
    let n: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(50);
    let (cfg, params) = shapelab::tensorio::load_checkpoint(std::path::Path::new(ckpt)).unwrap();
    let set = eval_instances(n, 31_000_000);
    let stats = try_par_map::<_, shapelab_core::model::ModelError, _>(n, 2, |i| {
        let inst = &set[i];
        let (g, _, out) = full_forward(&params, &cfg, inst, false)?;
        let p = inst.tokens.len();
        let v = cfg.vocab_size;
        let logits = &g.value(out.logits).data()[(p - 1) * v..p * v];
        let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let z: f32 = logits.iter().map(|&l| mathf::expf(l - max)).sum();
        let prob = |tok: u32| mathf::expf(logits[tok as usize] - max) / z;
        let p_correct = prob(inst.answer_item_token);
        let p_distract = prob(inst.item_token(1 - inst.queried_k));
        let argmax = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0 as u32;
        Ok((
            p_correct,
            p_distract,
            (argmax == inst.answer_item_token) as u32,
            (p_correct > p_distract) as u32,
        ))
    })
    .unwrap();
    let nn = n as f32;
    let mass_c: f32 = stats.iter().map(|s| s.0).sum::<f32>() / nn;
    let mass_d: f32 = stats.iter().map(|s| s.1).sum::<f32>() / nn;
    let exact: f32 = stats.iter().map(|s| s.2 as f32).sum::<f32>() / nn;
    let twoway: f32 = stats.iter().map(|s| s.3 as f32).sum::<f32>() / nn;
    println!("P(correct item) = {mass_c:.3}");
    println!("P(distractor)   = {mass_d:.3}");
    println!("P(either)       = {:.3}", mass_c + mass_d);
    println!("argmax == answer: {exact:.3}");
    println!("two-way accuracy: {twoway:.3}");
    let (gen_cfg, _) = (TaskConfig::default(), ());
    let _ = generate::make_instance(0, Pool::Eval, &gen_cfg);
}
