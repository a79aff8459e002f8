//! Conversions between the `f32` host containers and the `f64` CHW tensors
//! used by the autodiff tape.

use crate::autodiff::Arr;
use crate::feature_store::{FeatureMap, Image, Sketch};
use crate::tensor::Tensor;

pub fn image_to_chw(image: &Image) -> Arr {
    let (h, w) = (image.height(), image.width());
    let mut data = vec![0.0f64; 3 * h * w];
    for c in 0..3 {
        for i in 0..h {
            for j in 0..w {
                data[(c * h + i) * w + j] = image.pixel(i, j, c) as f64;
            }
        }
    }
    Arr::new(vec![3, h, w], data)
}

pub fn sketch_to_chw(sketch: &Sketch) -> Arr {
    let (h, w) = (sketch.height(), sketch.width());
    let data = sketch.tensor().data().iter().map(|&v| v as f64).collect();
    Arr::new(vec![1, h, w], data)
}

/// CHW `[1, H, W]` tensor to a sketch, clamping into [0, 1].
pub fn chw_to_sketch(arr: &Arr) -> Sketch {
    let (c, h, w) = arr.chw();
    assert_eq!(c, 1, "sketch tensors have one channel");
    let data: Vec<f32> = arr.data.iter().map(|&v| (v as f32).clamp(0.0, 1.0)).collect();
    Sketch::new(Tensor::new(vec![h, w, 1], data).expect("finite sketch data"))
        .expect("clamped sketch is valid")
}

pub fn feature_map_to_arr(map: &FeatureMap) -> Arr {
    let data = map.tensor().data().iter().map(|&v| v as f64).collect();
    Arr::new(
        vec![map.channels(), map.height(), map.width()],
        data,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_roundtrip_layout() {
        let mut data = vec![0.0f32; 8 * 8 * 3];
        data[(2 * 8 + 3) * 3 + 1] = 0.75; // row 2, col 3, green
        let image = Image::new(Tensor::new(vec![8, 8, 3], data).unwrap()).unwrap();
        let chw = image_to_chw(&image);
        assert_eq!(chw.data[(1 * 8 + 2) * 8 + 3], 0.75);
    }

    #[test]
    fn sketch_clamps_on_the_way_back() {
        let arr = Arr::new(vec![1, 2, 2], vec![-0.5, 0.25, 1.5, 1.0]);
        let sketch = chw_to_sketch(&arr);
        assert_eq!(sketch.tensor().data(), &[0.0, 0.25, 1.0, 1.0]);
    }
}
