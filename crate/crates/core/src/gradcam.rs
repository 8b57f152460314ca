//! Grad-CAM saliency on the last conv block.

use crate::error::{shape_err, Result};
use crate::mmode::resize_tensor;
use crate::model::{BoundParams, Model, ModelParameters};
use crate::ops::sigmoid_scalar;
use crate::tape::ComputationTape;
use crate::tensor::Tensor;

/// Heat map in `[0, 1]` at input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub heat: Tensor,
    pub source_id: String,
    pub probability: f64,
}

/// `ReLU(Σ_k α_k A_k)` where `α_k` is the spatial mean of the logit's
/// gradient with respect to channel `k` of activation `A` (`[K, h, w]`).
pub fn cam_from_activation(activation: &Tensor, grad: &Tensor) -> Result<Tensor> {
    let [k, h, w] = *activation.shape() else {
        return Err(shape_err!("activation must be [K, h, w], got {:?}", activation.shape()));
    };
    if grad.shape() != activation.shape() {
        return Err(shape_err!("gradient {:?} vs activation {:?}", grad.shape(), activation.shape()));
    }
    let hw = h * w;
    let mut cam = vec![0.0; hw];
    for c in 0..k {
        let g = &grad.data()[c * hw..(c + 1) * hw];
        let alpha = g.iter().sum::<f64>() / hw as f64;
        for (out, a) in cam.iter_mut().zip(&activation.data()[c * hw..(c + 1) * hw]) {
            *out += alpha * a;
        }
    }
    Tensor::new(vec![h, w], cam.into_iter().map(|v| v.max(0.0)).collect())
}

/// Bilinear upsampling to `size × size` followed by min-max normalisation.
/// A constant map becomes all zeros.
pub fn upsample_normalise(cam: &Tensor, size: usize) -> Result<Tensor> {
    let max = cam.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // Pre-scaling keeps values inside the resize clamp; min-max
    // normalisation is unaffected by it.
    let scaled = if max > 0.0 { cam.map(|v| v / max)? } else { cam.clone() };
    let up = resize_tensor(&scaled, size, size)?;
    let lo = up.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = up.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return Ok(Tensor::zeros(&[size, size]));
    }
    up.map(|v| (v - lo) / (hi - lo))
}

/// Saliency for one `[1, 1, S, S]` input.
pub fn grad_cam(model: &Model, params: &ModelParameters, input: &Tensor, source_id: &str) -> Result<SaliencyMap> {
    let shape = input.shape();
    if shape.len() != 4 || shape[0] != 1 {
        return Err(shape_err!("grad_cam takes a single [1, C, S, S] image, got {shape:?}"));
    }
    let size = shape[2];
    let mut tape = ComputationTape::new();
    let bound = BoundParams::bind(&mut tape, params, |_| false);
    // A differentiable input makes every downstream activation carry a
    // gradient.
    let x = tape.param(input.clone());
    let f = model.forward_features(&mut tape, x, &bound)?;
    let logit = model.forward_logits(&mut tape, f.features, &bound)?;
    let root = tape.sum(logit)?;
    tape.retain_grad(f.last_activation);
    let grads = tape.backward(root)?;
    let act = tape.value(f.last_activation);
    let a_shape = &act.shape()[1..];
    let act = act.reshape(a_shape)?;
    let g = grads
        .get(f.last_activation)
        .map(|g| g.reshape(a_shape))
        .transpose()?
        .unwrap_or_else(|| Tensor::zeros(a_shape));
    let cam = cam_from_activation(&act, &g)?;
    let z = tape.value(logit).item()?;
    Ok(SaliencyMap {
        heat: upsample_normalise(&cam, size)?,
        source_id: source_id.to_string(),
        probability: sigmoid_scalar(z),
    })
}

/// Mean heat in rows `< split` and in rows `>= split`.
pub fn region_means(heat: &Tensor, split: usize) -> (f64, f64) {
    let w = heat.shape()[1];
    let d = heat.data();
    let split = split.min(heat.shape()[0]);
    let above = &d[..split * w];
    let below = &d[split * w..];
    let mean = |s: &[f64]| if s.is_empty() { 0.0 } else { s.iter().sum::<f64>() / s.len() as f64 };
    (mean(above), mean(below))
}

/// `original | overlay` side by side, both in `[0, 255]`; the overlay blends
/// the image with the heat map half and half.
pub fn composite(original: &Tensor, heat: &Tensor) -> Result<Tensor> {
    let [h, w] = *original.shape() else {
        return Err(shape_err!("composite needs a 2-D image, got {:?}", original.shape()));
    };
    if heat.shape() != original.shape() {
        return Err(shape_err!("heat {:?} vs image {:?}", heat.shape(), original.shape()));
    }
    let mut data = Vec::with_capacity(h * 2 * w);
    for r in 0..h {
        let row = &original.data()[r * w..(r + 1) * w];
        data.extend_from_slice(row);
        let hr = &heat.data()[r * w..(r + 1) * w];
        data.extend(row.iter().zip(hr).map(|(o, q)| 0.5 * o + 0.5 * 255.0 * q));
    }
    Tensor::new(vec![h, 2 * w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_gradient_gives_relu_of_activation() {
        let a = Tensor::new(vec![1, 2, 2], vec![-1.0, 2.0, 0.5, 3.0]).unwrap();
        let g = Tensor::full(&[1, 2, 2], 0.7);
        let cam = cam_from_activation(&a, &g).unwrap();
        let expect: Vec<f64> = a.data().iter().map(|v| 0.7 * v.max(0.0)).collect();
        assert_eq!(cam.data(), &expect[..]);
        // Negated gradient passes the complementary activations.
        let neg = cam_from_activation(&a, &g.map(|v| -v).unwrap()).unwrap();
        assert_eq!(neg.data(), &[0.7, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn constant_map_normalises_to_zero() {
        let up = upsample_normalise(&Tensor::full(&[3, 3], 2.0), 16).unwrap();
        assert!(up.data().iter().all(|&v| v == 0.0));
        let ramp = upsample_normalise(&Tensor::new(vec![2, 1], vec![0.0, 5.0]).unwrap(), 8).unwrap();
        assert_eq!(ramp.at(&[0, 0]), 0.0);
        assert_eq!(ramp.at(&[7, 3]), 1.0);
    }

    #[test]
    fn composite_layout() {
        let img = Tensor::full(&[2, 2], 100.0);
        let heat = Tensor::full(&[2, 2], 1.0);
        let c = composite(&img, &heat).unwrap();
        assert_eq!(c.shape(), &[2, 4]);
        assert_eq!(c.at(&[1, 1]), 100.0);
        assert_eq!(c.at(&[1, 3]), 177.5);
    }
}
