use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Source coordinate and blend weight along one axis, half-pixel centers:
/// `src = (dst + 0.5) * in / out - 0.5`, clamped to the valid range.
fn taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

/// Bilinear resize of a row-major `h x w` buffer to `target x target`.
pub fn resize_values<T: Scalar>(src: &[T], h: usize, w: usize, target: usize) -> Vec<T> {
    if h == target && w == target {
        return src.to_vec();
    }
    let ys = taps(h, target);
    let xs = taps(w, target);
    let mut out = Vec::with_capacity(target * target);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let at = |y: usize, x: usize| src[y * w + x].as_f64();
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out.push(T::of(top * (1.0 - fy) + bottom * fy));
        }
    }
    out
}

/// `[1, H, W]` to `[1, target, target]`; returns the input unchanged when
/// it already has the target size.
pub fn resize_bilinear<T: Scalar>(img: &Tensor<T>, target: usize) -> Result<Tensor<T>> {
    let (h, w) = match *img.shape() {
        [1, h, w] => (h, w),
        _ => {
            return Err(Error::Contract(format!(
                "resize_bilinear needs a [1, H, W] image, got {:?}",
                img.shape()
            )))
        }
    };
    if target == 0 {
        return Err(Error::Config("resize target must be positive".into()));
    }
    if h == target && w == target {
        return Ok(img.clone());
    }
    Tensor::constant(&[1, target, target], resize_values(img.data(), h, w, target))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_is_identity() {
        let t = Tensor::constant(&[1, 2, 2], vec![0.1f32, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(resize_bilinear(&t, 2).unwrap().data(), t.data());
    }

    #[test]
    fn single_pixel_spreads() {
        let t = Tensor::constant(&[1, 1, 1], vec![0.7f64]).unwrap();
        let r = resize_bilinear(&t, 4).unwrap();
        assert_eq!(r.shape(), &[1, 4, 4]);
        assert!(r.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn checkerboard_center() {
        let t = Tensor::constant(&[1, 2, 2], vec![0.0f64, 1.0, 1.0, 0.0]).unwrap();
        let r = resize_bilinear(&t, 3).unwrap();
        assert!((r.data()[4] - 0.5).abs() < 1e-15);
        // corners sit on source pixel centers after clamping
        assert_eq!(r.data()[0], 0.0);
        assert_eq!(r.data()[2], 1.0);
    }

    #[test]
    fn downsample_averages_pairs() {
        // 4 -> 2: samples land exactly between source pixels
        let src: Vec<f64> = [0.0, 1.0, 2.0, 3.0].repeat(4);
        let r = resize_values(&src, 4, 4, 2);
        assert_eq!(r, vec![0.5, 2.5, 0.5, 2.5]);
    }
}
