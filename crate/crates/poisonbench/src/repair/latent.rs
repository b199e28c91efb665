//! Latent orthogonalization: per-class centroids, the pairwise cosine loss
//! between a frozen and a trainable model, and its analytic gradient.

use log::warn;

use crate::error::{Error, Result};
use crate::exec;
use crate::image::Image;
use crate::model::{BackwardRequest, ModelHandle};

/// Per-class mean latent vectors. Errors when any class has no sample,
/// listing the missing classes.
pub fn centroids(model: &ModelHandle, images: &[Image], labels: &[usize]) -> Result<Vec<Vec<f64>>> {
    let classes = model.class_count();
    let latents = model.latents(images)?;
    centroids_of_latents(&latents, labels, classes)
}

pub(crate) fn centroids_of_latents(
    latents: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
) -> Result<Vec<Vec<f64>>> {
    if latents.is_empty() {
        return Err(Error::EmptyInput("centroid computation"));
    }
    let dim = latents[0].len();
    let mut sums = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0usize; classes];
    for (latent, &label) in latents.iter().zip(labels) {
        counts[label] += 1;
        for (s, v) in sums[label].iter_mut().zip(latent) {
            *s += v;
        }
    }
    let missing: Vec<usize> = (0..classes).filter(|&c| counts[c] == 0).collect();
    if !missing.is_empty() {
        return Err(Error::MissingClasses(missing));
    }
    for (sum, &count) in sums.iter_mut().zip(&counts) {
        for v in sum.iter_mut() {
            *v /= count as f64;
        }
    }
    Ok(sums)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Orthogonality loss between frozen centroids `c` and trainable centroids
/// `c_hat`: over all unordered class pairs, the cosine between the
/// cross-model centroid directions plus the cosine between the trainable
/// centroids themselves.
pub fn orthogonality(c: &[Vec<f64>], c_hat: &[Vec<f64>]) -> Result<f64> {
    Ok(orthogonality_with_grad(c, c_hat)?.0)
}

/// Loss plus its gradient with respect to each trainable centroid.
pub fn orthogonality_with_grad(
    c: &[Vec<f64>],
    c_hat: &[Vec<f64>],
) -> Result<(f64, Vec<Vec<f64>>)> {
    if c.len() != c_hat.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} centroids", c.len()),
            got: format!("{}", c_hat.len()),
        });
    }
    let classes = c.len();
    let dim = c.first().map_or(0, Vec::len);
    let mut loss = 0.0;
    let mut grads = vec![vec![0.0; dim]; classes];

    for i in 0..classes {
        for j in (i + 1)..classes {
            // cross-model direction term: cos(c_i - c_j, ĉ_i - ĉ_j)
            let a: Vec<f64> = c[i].iter().zip(&c[j]).map(|(x, y)| x - y).collect();
            let b: Vec<f64> = c_hat[i].iter().zip(&c_hat[j]).map(|(x, y)| x - y).collect();
            let na = norm(&a);
            let nb = norm(&b);
            if na == 0.0 || nb == 0.0 {
                warn!("zero-norm direction for class pair ({i},{j}); term treated as 0");
            } else {
                let cosine = dot(&a, &b) / (na * nb);
                loss += cosine;
                for d in 0..dim {
                    let g = a[d] / (na * nb) - cosine * b[d] / (nb * nb);
                    grads[i][d] += g;
                    grads[j][d] -= g;
                }
            }

            // within-model term: cos(ĉ_i, ĉ_j)
            let ni = norm(&c_hat[i]);
            let nj = norm(&c_hat[j]);
            if ni == 0.0 || nj == 0.0 {
                warn!("zero-norm centroid in pair ({i},{j}); term treated as 0");
            } else {
                let cosine = dot(&c_hat[i], &c_hat[j]) / (ni * nj);
                loss += cosine;
                for d in 0..dim {
                    grads[i][d] += c_hat[j][d] / (ni * nj) - cosine * c_hat[i][d] / (ni * ni);
                    grads[j][d] += c_hat[i][d] / (ni * nj) - cosine * c_hat[j][d] / (nj * nj);
                }
            }
        }
    }
    Ok((loss, grads))
}

/// The latent orthogonality loss between a frozen model and a trainable
/// model over a labeled batch.
pub fn latent_orthogonality(
    frozen: &ModelHandle,
    trainable: &ModelHandle,
    images: &[Image],
    labels: &[usize],
) -> Result<f64> {
    let c = centroids(frozen, images, labels)?;
    let c_hat = centroids(trainable, images, labels)?;
    orthogonality(&c, &c_hat)
}

/// Loss plus its gradient with respect to the trainable model's parameters.
/// The frozen model contributes constants only; head parameters receive no
/// gradient because latents do not depend on them.
pub fn latent_orthogonality_with_grad(
    frozen: &ModelHandle,
    trainable: &ModelHandle,
    images: &[Image],
    labels: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let classes = trainable.class_count();
    let c = centroids(frozen, images, labels)?;

    let caches = {
        let caches = exec::map(images, |im| trainable.forward_cached(im));
        caches.into_iter().collect::<Result<Vec<_>>>()?
    };
    let latents: Vec<Vec<f64>> = caches.iter().map(|cache| cache.latent.clone()).collect();
    let c_hat = centroids_of_latents(&latents, labels, classes)?;
    let (loss, grad_centroids) = orthogonality_with_grad(&c, &c_hat)?;

    let mut counts = vec![0usize; classes];
    for &label in labels {
        counts[label] += 1;
    }

    let per_sample = exec::map_indices(images.len(), |i| {
        let label = labels[i];
        let scale = 1.0 / counts[label] as f64;
        let grad_latent: Vec<f64> = grad_centroids[label].iter().map(|g| g * scale).collect();
        trainable
            .backward(
                &caches[i],
                &BackwardRequest { grad_latent: Some(grad_latent), ..Default::default() },
            )
            .param_grads
    });

    let mut grads = vec![0.0; trainable.param_count()];
    for sample in per_sample {
        for (acc, g) in grads.iter_mut().zip(&sample) {
            *acc += g;
        }
    }
    Ok((loss, grads))
}
