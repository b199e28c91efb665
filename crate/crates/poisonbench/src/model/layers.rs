//! Forward/backward kernels for the layers of the tiny classifier.
//!
//! All kernels work on flat `f64` slices in CHW order. Convolutions are 3x3,
//! stride 1, zero padding 1, so spatial dimensions are preserved; pooling is
//! 2x2 average.
//!
//! Convolutions go through an im2col patch matrix: every output position
//! owns a contiguous row of `c_in * 9` input values, so the forward pass,
//! the weight gradients, and the input gradients are all dense dot/axpy
//! kernels over contiguous rows. Reductions use four fixed accumulator
//! lanes, which keeps results bit-identical across platforms and thread
//! counts while still vectorizing.

/// Patch matrix for a 3x3 same-convolution: `(h*w) x (c_in*9)`, zeros at the
/// padding border.
fn im2col(input: &[f64], c_in: usize, h: usize, w: usize) -> Vec<f64> {
    let row_len = c_in * 9;
    let mut patches = vec![0.0; h * w * row_len];
    for ci in 0..c_in {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3usize {
            let (y_start, y_end) = axis_range(h, ky);
            for kx in 0..3usize {
                let (x_start, x_end) = axis_range(w, kx);
                let col = ci * 9 + ky * 3 + kx;
                for y in y_start..y_end {
                    let iy = y + ky - 1;
                    for x in x_start..x_end {
                        patches[(y * w + x) * row_len + col] = plane[iy * w + x + kx - 1];
                    }
                }
            }
        }
    }
    patches
}

/// Valid output range for kernel offset `k` (0..3) on an axis of length `n`,
/// so that the read index `pos + k - 1` stays inside `0..n`.
#[inline]
fn axis_range(n: usize, k: usize) -> (usize, usize) {
    match k {
        0 => (1, n),
        1 => (0, n),
        _ => (0, n - 1),
    }
}

#[inline]
fn dot_lanes(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 4];
    let mut ac = a.chunks_exact(4);
    let mut bc = b.chunks_exact(4);
    for (x, y) in (&mut ac).zip(&mut bc) {
        lanes[0] += x[0] * y[0];
        lanes[1] += x[1] * y[1];
        lanes[2] += x[2] * y[2];
        lanes[3] += x[3] * y[3];
    }
    for (x, y) in ac.remainder().iter().zip(bc.remainder()) {
        lanes[0] += x * y;
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3])
}

#[inline]
fn axpy(acc: &mut [f64], scale: f64, values: &[f64]) {
    for (a, v) in acc.iter_mut().zip(values) {
        *a += scale * v;
    }
}

/// 3x3 same-convolution. `input` is (c_in, h, w), `weights` is
/// (c_out, c_in, 3, 3), `bias` is (c_out), `output` is (c_out, h, w).
pub fn conv3x3_forward(
    input: &[f64],
    weights: &[f64],
    bias: &[f64],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    output: &mut [f64],
) {
    debug_assert_eq!(input.len(), c_in * h * w);
    debug_assert_eq!(weights.len(), c_out * c_in * 9);
    debug_assert_eq!(output.len(), c_out * h * w);
    let row_len = c_in * 9;
    let patches = im2col(input, c_in, h, w);
    for co in 0..c_out {
        let k_row = &weights[co * row_len..(co + 1) * row_len];
        let out_plane = &mut output[co * h * w..(co + 1) * h * w];
        for (pos, out) in out_plane.iter_mut().enumerate() {
            *out = bias[co] + dot_lanes(k_row, &patches[pos * row_len..(pos + 1) * row_len]);
        }
    }
}

/// Backward pass of [`conv3x3_forward`].
///
/// Accumulates into `grad_weights`/`grad_bias`; `grad_input`, when given, is
/// overwritten.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward(
    input: &[f64],
    weights: &[f64],
    grad_output: &[f64],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    grad_weights: &mut [f64],
    grad_bias: &mut [f64],
    grad_input: Option<&mut [f64]>,
) {
    let row_len = c_in * 9;
    let patches = im2col(input, c_in, h, w);

    for co in 0..c_out {
        let g_plane = &grad_output[co * h * w..(co + 1) * h * w];
        grad_bias[co] += g_plane.iter().sum::<f64>();
        let gk = &mut grad_weights[co * row_len..(co + 1) * row_len];
        for (pos, &g) in g_plane.iter().enumerate() {
            if g != 0.0 {
                axpy(gk, g, &patches[pos * row_len..(pos + 1) * row_len]);
            }
        }
    }

    if let Some(gi) = grad_input {
        gi.fill(0.0);
        // accumulate gradient patches, then scatter back (col2im)
        let mut g_patches = vec![0.0; h * w * row_len];
        for co in 0..c_out {
            let g_plane = &grad_output[co * h * w..(co + 1) * h * w];
            let k_row = &weights[co * row_len..(co + 1) * row_len];
            for (pos, &g) in g_plane.iter().enumerate() {
                if g != 0.0 {
                    axpy(&mut g_patches[pos * row_len..(pos + 1) * row_len], g, k_row);
                }
            }
        }
        for ci in 0..c_in {
            let plane = &mut gi[ci * h * w..(ci + 1) * h * w];
            for ky in 0..3usize {
                let (y_start, y_end) = axis_range(h, ky);
                for kx in 0..3usize {
                    let (x_start, x_end) = axis_range(w, kx);
                    let col = ci * 9 + ky * 3 + kx;
                    for y in y_start..y_end {
                        let iy = y + ky - 1;
                        for x in x_start..x_end {
                            plane[iy * w + x + kx - 1] += g_patches[(y * w + x) * row_len + col];
                        }
                    }
                }
            }
        }
    }
}

/// 2x2 average pooling; `h` and `w` must be even.
pub fn avgpool2_forward(input: &[f64], c: usize, h: usize, w: usize, output: &mut [f64]) {
    let oh = h / 2;
    let ow = w / 2;
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let base = ch * h * w + 2 * y * w + 2 * x;
                output[ch * oh * ow + y * ow + x] =
                    0.25 * (input[base] + input[base + 1] + input[base + w] + input[base + w + 1]);
            }
        }
    }
}

pub fn avgpool2_backward(grad_output: &[f64], c: usize, h: usize, w: usize, grad_input: &mut [f64]) {
    let oh = h / 2;
    let ow = w / 2;
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let g = 0.25 * grad_output[ch * oh * ow + y * ow + x];
                let base = ch * h * w + 2 * y * w + 2 * x;
                grad_input[base] = g;
                grad_input[base + 1] = g;
                grad_input[base + w] = g;
                grad_input[base + w + 1] = g;
            }
        }
    }
}

pub fn relu_forward(input: &[f64], output: &mut [f64]) {
    for (o, &v) in output.iter_mut().zip(input) {
        *o = if v > 0.0 { v } else { 0.0 };
    }
}

/// ReLU backward using the pre-activation values.
pub fn relu_backward(pre_activation: &[f64], grad_output: &[f64], grad_input: &mut [f64]) {
    for ((gi, &pre), &go) in grad_input.iter_mut().zip(pre_activation).zip(grad_output) {
        *gi = if pre > 0.0 { go } else { 0.0 };
    }
}

/// Dense layer: `output = weights * input + bias`, weights is (n_out, n_in).
pub fn dense_forward(input: &[f64], weights: &[f64], bias: &[f64], n_in: usize, n_out: usize, output: &mut [f64]) {
    for o in 0..n_out {
        output[o] = bias[o] + dot_lanes(&weights[o * n_in..(o + 1) * n_in], input);
    }
}

#[allow(clippy::too_many_arguments)]
pub fn dense_backward(
    input: &[f64],
    weights: &[f64],
    grad_output: &[f64],
    n_in: usize,
    n_out: usize,
    grad_weights: &mut [f64],
    grad_bias: &mut [f64],
    grad_input: Option<&mut [f64]>,
) {
    for o in 0..n_out {
        let g = grad_output[o];
        grad_bias[o] += g;
        axpy(&mut grad_weights[o * n_in..(o + 1) * n_in], g, input);
    }
    if let Some(gi) = grad_input {
        gi.fill(0.0);
        for o in 0..n_out {
            let g = grad_output[o];
            if g != 0.0 {
                axpy(gi, g, &weights[o * n_in..(o + 1) * n_in]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Reference convolution written as the direct five-loop definition.
    fn conv_reference(
        input: &[f64],
        weights: &[f64],
        bias: &[f64],
        c_in: usize,
        c_out: usize,
        h: usize,
        w: usize,
    ) -> Vec<f64> {
        let mut out = vec![0.0; c_out * h * w];
        for co in 0..c_out {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut acc = bias[co];
                    for ci in 0..c_in {
                        for ky in -1..=1isize {
                            for kx in -1..=1isize {
                                let iy = y + ky;
                                let ix = x + kx;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += weights
                                    [((co * c_in + ci) * 3 + (ky + 1) as usize) * 3 + (kx + 1) as usize]
                                    * input[(ci * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[(co * h + y as usize) * w + x as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_reference() {
        let (c_in, c_out, h, w) = (2, 3, 5, 4);
        let input: Vec<f64> = (0..c_in * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let weights: Vec<f64> = (0..c_out * c_in * 9).map(|i| (i as f64 * 0.11).cos()).collect();
        let bias: Vec<f64> = (0..c_out).map(|i| i as f64 * 0.1).collect();
        let mut out = vec![0.0; c_out * h * w];
        conv3x3_forward(&input, &weights, &bias, c_in, c_out, h, w, &mut out);
        let reference = conv_reference(&input, &weights, &bias, c_in, c_out, h, w);
        for (a, b) in out.iter().zip(&reference) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let (c_in, c_out, h, w) = (2, 2, 4, 4);
        let input: Vec<f64> = (0..c_in * h * w).map(|i| (i as f64 * 0.29).sin() * 0.5).collect();
        let mut weights: Vec<f64> = (0..c_out * c_in * 9).map(|i| (i as f64 * 0.17).cos() * 0.3).collect();
        let bias: Vec<f64> = vec![0.05; c_out];
        // loss = sum of squares of outputs
        let loss = |weights: &[f64], input: &[f64]| -> f64 {
            let mut out = vec![0.0; c_out * h * w];
            conv3x3_forward(input, weights, &bias, c_in, c_out, h, w, &mut out);
            out.iter().map(|v| v * v).sum::<f64>()
        };
        let mut out = vec![0.0; c_out * h * w];
        conv3x3_forward(&input, &weights, &bias, c_in, c_out, h, w, &mut out);
        let grad_out: Vec<f64> = out.iter().map(|v| 2.0 * v).collect();
        let mut gw = vec![0.0; weights.len()];
        let mut gb = vec![0.0; bias.len()];
        let mut gi = vec![0.0; input.len()];
        conv3x3_backward(&input, &weights, &grad_out, c_in, c_out, h, w, &mut gw, &mut gb, Some(&mut gi));

        let eps = 1e-6;
        for idx in [0usize, 5, 13, 20, 35] {
            let orig = weights[idx];
            weights[idx] = orig + eps;
            let hi = loss(&weights, &input);
            weights[idx] = orig - eps;
            let lo = loss(&weights, &input);
            weights[idx] = orig;
            let fd = (hi - lo) / (2.0 * eps);
            assert!((fd - gw[idx]).abs() < 1e-5 * fd.abs().max(1.0), "weight {idx}: {fd} vs {}", gw[idx]);
        }
        let mut input_var = input.clone();
        for idx in [0usize, 7, 19, 31] {
            let orig = input_var[idx];
            input_var[idx] = orig + eps;
            let hi = loss(&weights, &input_var);
            input_var[idx] = orig - eps;
            let lo = loss(&weights, &input_var);
            input_var[idx] = orig;
            let fd = (hi - lo) / (2.0 * eps);
            assert!((fd - gi[idx]).abs() < 1e-5 * fd.abs().max(1.0), "input {idx}: {fd} vs {}", gi[idx]);
        }
    }

    #[test]
    fn avgpool_roundtrip_shapes() {
        let input: Vec<f64> = (0..2 * 4 * 4).map(|i| i as f64).collect();
        let mut out = vec![0.0; 2 * 2 * 2];
        avgpool2_forward(&input, 2, 4, 4, &mut out);
        assert!((out[0] - (0.0 + 1.0 + 4.0 + 5.0) / 4.0).abs() < 1e-12);
        let mut gi = vec![0.0; input.len()];
        avgpool2_backward(&out, 2, 4, 4, &mut gi);
        assert!((gi[0] - out[0] * 0.25).abs() < 1e-12);
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let (n_in, n_out) = (6, 3);
        let input: Vec<f64> = (0..n_in).map(|i| 0.3 * i as f64 - 0.7).collect();
        let mut weights: Vec<f64> = (0..n_in * n_out).map(|i| (i as f64 * 0.21).sin()).collect();
        let bias = vec![0.1; n_out];
        let loss = |weights: &[f64], input: &[f64]| {
            let mut out = vec![0.0; n_out];
            dense_forward(input, weights, &bias, n_in, n_out, &mut out);
            out.iter().map(|v| v * v).sum::<f64>()
        };
        let mut out = vec![0.0; n_out];
        dense_forward(&input, &weights, &bias, n_in, n_out, &mut out);
        let grad_out: Vec<f64> = out.iter().map(|v| 2.0 * v).collect();
        let mut gw = vec![0.0; weights.len()];
        let mut gb = vec![0.0; n_out];
        let mut gi = vec![0.0; n_in];
        dense_backward(&input, &weights, &grad_out, n_in, n_out, &mut gw, &mut gb, Some(&mut gi));
        let eps = 1e-6;
        for idx in 0..weights.len() {
            let orig = weights[idx];
            weights[idx] = orig + eps;
            let hi = loss(&weights, &input);
            weights[idx] = orig - eps;
            let lo = loss(&weights, &input);
            weights[idx] = orig;
            let fd = (hi - lo) / (2.0 * eps);
            assert!((fd - gw[idx]).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }
}
