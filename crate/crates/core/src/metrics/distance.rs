use crate::error::{domain_err, shape_err, Result};
use crate::layout::BinaryMask;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Inside,
    Outside,
}

/// Root-mean-square difference of `a` and `b` over the pixels selected by
/// `mask` and `region`. Tensors are `H x W` or `C x H x W`; every channel of a
/// selected pixel counts.
pub fn masked_rmse(a: &Tensor, b: &Tensor, mask: &BinaryMask, region: Region) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let dims = a.dims();
    let (h, w) = match dims {
        [h, w] | [_, h, w] => (*h, *w),
        other => return Err(shape_err!("expected H x W or C x H x W, got {:?}", other)),
    };
    if (h, w) != (mask.height(), mask.width()) {
        return Err(shape_err!("tensor is {h}x{w}, mask is {}x{}", mask.height(), mask.width()));
    }
    let want = region == Region::Inside;
    let plane = h * w;
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        if mask.bits()[i % plane] == want {
            let d = *x as f64 - *y as f64;
            sum += d * d;
            count += 1;
        }
    }
    if count == 0 {
        return Err(domain_err!("selected mask region is empty"));
    }
    Ok(libm::sqrt(sum / count as f64))
}
