//! Central finite differences for checking analytic gradients.

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// `∂loss/∂θ` for every scalar of parameter `name`, by central differences
/// with step `h`. The model is restored bit-for-bit afterwards.
pub fn numeric_gradient(model: &mut Model, name: &str, h: f64, loss: &dyn Fn(&Model) -> Result<f64>) -> Result<Tensor> {
    let id = model
        .params()
        .id(name)
        .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))?;
    let shape = model.params().get(id).shape().to_vec();
    let n = model.params().get(id).len();
    let mut out = vec![0.0; n];
    for (i, slot) in out.iter_mut().enumerate() {
        let original = model.params().get(id).data()[i];
        model.params_mut().get_mut(id).data_mut()[i] = original + h;
        let plus = loss(model);
        model.params_mut().get_mut(id).data_mut()[i] = original - h;
        let minus = loss(model);
        model.params_mut().get_mut(id).data_mut()[i] = original;
        *slot = (plus? - minus?) / (2.0 * h);
    }
    Ok(Tensor::new(shape, out))
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both are zero.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_error: size mismatch");
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.l2_norm().max(b.l2_norm());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
