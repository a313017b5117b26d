use crate::disparity::DisparityMap;
use crate::error::{ensure, Result};
use crate::tensor::{Scalar, Shape, Tensor};

fn src_index(dst: usize, src_extent: usize, dst_extent: usize) -> usize {
    // floor((dst + 0.5) * src / dst) in exact integer arithmetic
    (((2 * dst + 1) * src_extent) / (2 * dst_extent)).min(src_extent - 1)
}

/// Nearest-neighbour resize of every plane. With `is_disparity` the values
/// are also multiplied by `new_w / old_w` so they stay in pixel units.
pub fn resize_nearest<T: Scalar>(
    t: &Tensor<T>,
    new_h: usize,
    new_w: usize,
    is_disparity: bool,
) -> Result<Tensor<T>> {
    ensure!(new_h > 0 && new_w > 0, "resize target must be positive");
    let [n, c, h, w] = t.shape().0;
    ensure!(h > 0 && w > 0, "cannot resize an empty tensor");
    let factor = T::of(new_w as f64 / w as f64);
    let xs: Vec<usize> = (0..new_w).map(|x| src_index(x, w, new_w)).collect();
    let mut out = Vec::with_capacity(n * c * new_h * new_w);
    for p in 0..n * c {
        let plane = &t.data()[p * h * w..(p + 1) * h * w];
        for y in 0..new_h {
            let row = &plane[src_index(y, h, new_h) * w..];
            for &sx in &xs {
                let v = row[sx];
                out.push(if is_disparity && new_w != w { v * factor } else { v });
            }
        }
    }
    Tensor::from_vec(Shape::new(n, c, new_h, new_w), out)
}

pub fn resize_disparity(d: &DisparityMap, new_h: usize, new_w: usize) -> Result<DisparityMap> {
    let t = resize_nearest(&d.to_tensor::<f32>(), new_h, new_w, true)?;
    DisparityMap::from_tensor(&t, 0)
}
