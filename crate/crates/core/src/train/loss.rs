use crate::backbone::Masks;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, Var};

/// 2×2 max-pool of an `N × 1 × H × W` binary label batch.
pub fn half_label<T: Real>(label: &Tensor<T>) -> Result<Tensor<T>> {
    let &[n, c, h, w] = label.shape() else {
        return Err(Error::Data(format!("label batch must be N x 1 x H x W, got {:?}", label.shape())));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Data(format!("cannot halve a {h}x{w} label")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let d = label.data();
    let out = Tensor::from_fn([n, c, oh, ow], |i| {
        let (plane, y, x) = (i / (oh * ow), i / ow % oh, i % ow);
        let at = |dy: usize, dx: usize| d[plane * h * w + (2 * y + dy) * w + 2 * x + dx];
        at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1))
    });
    Ok(out)
}

/// Weighted sum of the fusion loss and the two half-resolution branch losses.
/// Zero-weight terms are skipped; a missing branch with a nonzero weight is
/// an error.
pub fn triple_loss<'t, T: Real>(masks: &Masks<'t, T>, label: &Tensor<T>, weights: [f64; 3]) -> Result<Var<'t, T>> {
    let tape = masks.fusion.tape();
    let mut total = masks.fusion.bce_dice(tape.constant(label.clone()))?.scale(T::lit(weights[0]));
    let branches = [(masks.t1, weights[1], "first"), (masks.t2, weights[2], "second")];
    if branches.iter().all(|b| b.1 == 0.0) {
        return Ok(total);
    }
    let half = tape.constant(half_label(label)?);
    for (mask, weight, name) in branches {
        if weight == 0.0 {
            continue;
        }
        let mask = mask.ok_or_else(|| Error::Config(format!("{name} branch mask missing but its loss weight is {weight}")))?;
        total = total.add(mask.bce_dice(half)?.scale(T::lit(weight)))?;
    }
    Ok(total)
}
