use std::time::Instant;
use poisonbench::data::Distribution;
use poisonbench::model::{cross_entropy_with_grad, Architecture, BackwardRequest, ModelHandle};

#[test]
#[ignore]
fn profile_forward_backward() {
    let dist = Distribution::synthetic(10, 20, 16, 0).unwrap();
    let model = ModelHandle::init(Architecture::tiny(3, 16, 10).unwrap(), 1);
    let images = &dist.pool.images[..64];

    // warm
    for im in images.iter().take(8) { model.forward_cached(im).unwrap(); }

    let t = Instant::now();
    let mut caches = Vec::new();
    for _ in 0..4 {
        caches.clear();
        for im in images { caches.push(model.forward_cached(im).unwrap()); }
    }
    let fwd = t.elapsed() / (4 * images.len() as u32);

    let t = Instant::now();
    for _ in 0..4 {
        for cache in &caches {
            let (_, gl) = cross_entropy_with_grad(&cache.logits, 3);
            let _ = model.backward(cache, &BackwardRequest { grad_logits: Some(gl), ..Default::default() });
        }
    }
    let bwd = t.elapsed() / (4 * images.len() as u32);

    let t = Instant::now();
    for _ in 0..200 {
        let v = vec![0.0f64; model.param_count()];
        std::hint::black_box(&v);
    }
    let alloc = t.elapsed() / 200;

    eprintln!("forward: {fwd:?}/sample, backward: {bwd:?}/sample, grad-vec alloc+zero: {alloc:?}");
}
