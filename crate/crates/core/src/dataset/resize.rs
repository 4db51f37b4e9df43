//! Square resizing for images (bilinear) and label masks (nearest neighbour).
//!
//! Both use pixel-centre alignment: output pixel `o` samples the source at
//! `(o + 0.5) · in / out − 0.5`.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use crate::error::{Error, Result};

/// Per-axis source taps `(i0, i1, frac)` for bilinear sampling.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f32)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

/// Bilinear resize of an `H × W × C` image to `size × size × C`.
pub fn resize_image(image: ArrayView3<f32>, size: usize) -> Result<Array3<f32>> {
    let (h, w, c) = image.dim();
    if h == 0 || w == 0 || c == 0 || size == 0 {
        return Err(Error::invalid(format!("cannot resize {h}×{w}×{c} image to {size}")));
    }
    if h == size && w == size {
        return Ok(image.to_owned());
    }
    let rows = bilinear_taps(h, size);
    let cols = bilinear_taps(w, size);
    let mut out = Array3::<f32>::zeros((size, size, c));
    for (oi, &(r0, r1, fr)) in rows.iter().enumerate() {
        for (oj, &(c0, c1, fc)) in cols.iter().enumerate() {
            for ch in 0..c {
                let top = image[[r0, c0, ch]] * (1.0 - fc) + image[[r0, c1, ch]] * fc;
                let bottom = image[[r1, c0, ch]] * (1.0 - fc) + image[[r1, c1, ch]] * fc;
                out[[oi, oj, ch]] = top * (1.0 - fr) + bottom * fr;
            }
        }
    }
    Ok(out)
}

fn nearest_taps(input: usize, output: usize) -> Vec<usize> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| (((o as f64 + 0.5) * scale).floor() as usize).min(input - 1))
        .collect()
}

/// Nearest-neighbour resize of a class-id mask; never invents class ids.
pub fn resize_mask(mask: ArrayView2<u8>, size: usize) -> Result<Array2<u8>> {
    let (h, w) = mask.dim();
    if h == 0 || w == 0 || size == 0 {
        return Err(Error::invalid(format!("cannot resize {h}×{w} mask to {size}")));
    }
    let rows = nearest_taps(h, size);
    let cols = nearest_taps(w, size);
    Ok(Array2::from_shape_fn((size, size), |(i, j)| mask[[rows[i], cols[j]]]))
}
