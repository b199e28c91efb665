//! Parallel vs sequential throughput of the data-parallel hot paths:
//! batch gradient accumulation, batch prediction, and latent extraction.
//!
//! With the default `parallel` feature the crate maps these loops over
//! rayon; the `*_seq` helpers are the always-sequential fallback (the same
//! code path the crate uses when built with `--no-default-features`), so one
//! run compares both.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use poisonbench::data::generate_synthetic_dataset;
use poisonbench::exec;
use poisonbench::image::Image;
use poisonbench::model::{cross_entropy_with_grad, BackwardRequest, ModelHandle};
use poisonbench::train::batch_loss_and_grad;

fn fixture() -> (ModelHandle, Vec<Image>, Vec<usize>) {
    let (data, _) = generate_synthetic_dataset(10, 20, 16, 0).unwrap();
    let arch = poisonbench::model::Architecture::tiny(3, 16, 10).unwrap();
    let model = ModelHandle::init(arch, 1);
    let images: Vec<Image> = data.images[..64].to_vec();
    let labels: Vec<usize> = data.labels[..64].to_vec();
    (model, images, labels)
}

fn sample_grad(model: &ModelHandle, image: &Image, label: usize) -> Vec<f64> {
    let cache = model.forward_cached(image).unwrap();
    let (_, grad_logits) = cross_entropy_with_grad(&cache.logits, label);
    model
        .backward(
            &cache,
            &BackwardRequest { grad_logits: Some(grad_logits), ..Default::default() },
        )
        .param_grads
}

fn bench_batch_gradients(c: &mut Criterion) {
    let (model, images, labels) = fixture();
    let refs: Vec<&Image> = images.iter().collect();

    let mut group = c.benchmark_group("batch_gradients_64");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter_batched(
            || (),
            |_| batch_loss_and_grad(&model, &refs, &labels).unwrap(),
            BatchSize::SmallInput,
        )
    });
    group.bench_function("sequential", |b| {
        b.iter_batched(
            || (),
            |_| {
                let per_sample =
                    exec::map_indices_seq(refs.len(), |i| sample_grad(&model, refs[i], labels[i]));
                let mut acc = vec![0.0; model.param_count()];
                for g in per_sample {
                    for (a, v) in acc.iter_mut().zip(&g) {
                        *a += v;
                    }
                }
                acc
            },
            BatchSize::SmallInput,
        )
    });
    group.finish();
}

fn bench_prediction(c: &mut Criterion) {
    let (model, images, _) = fixture();

    let mut group = c.benchmark_group("predict_64");
    group.sample_size(20);
    group.bench_function("parallel", |b| {
        b.iter(|| model.predict_batch(&images).unwrap());
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            exec::map_seq(&images, |im| model.predict(im).unwrap())
        });
    });
    group.finish();
}

fn bench_latents(c: &mut Criterion) {
    let (model, images, _) = fixture();

    let mut group = c.benchmark_group("latents_64");
    group.sample_size(20);
    group.bench_function("parallel", |b| {
        b.iter(|| model.latents(&images).unwrap());
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            exec::map_seq(&images, |im| model.latent(im).unwrap())
        });
    });
    group.finish();
}

criterion_group!(benches, bench_batch_gradients, bench_prediction, bench_latents);
criterion_main!(benches);
