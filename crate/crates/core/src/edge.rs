//! Sobel edge maps for the skip connections.
//!
//! Edge maps are plain data: they are computed once from the input image,
//! never recorded on a tape, and down-sampled per decoder level.

use serde::{Deserialize, Serialize};

use crate::nn::avg_pool2x2;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EdgeMethod {
    /// Max-normalized gradient magnitude.
    #[default]
    Sobel,
    /// Magnitude binarized at `threshold` after normalization.
    SobelThreshold { threshold: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap {
    /// `1×H×W`, values in [0, 1].
    pub values: Tensor,
    /// Extents of the image the map was first computed from.
    pub source: (usize, usize),
    pub method: EdgeMethod,
}

impl EdgeMap {
    pub fn extents(&self) -> (usize, usize) {
        (self.values.shape()[1], self.values.shape()[2])
    }
}

fn single_channel(img: &Tensor) -> Result<(usize, usize)> {
    match *img.shape() {
        [1, h, w] => Ok((h, w)),
        ref s => Err(Error::Data(format!(
            "edge detection needs a 1×H×W image, got {s:?}"
        ))),
    }
}

/// Raw Sobel responses with replicated borders:
/// `Gx = [-1 0 1; -2 0 2; -1 0 1]`, `Gy = Gxᵀ`.
fn sobel_components(img: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (h, w) = single_channel(img)?;
    let d = img.data();
    let px = |y: isize, x: isize| -> f64 {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        d[y * w + x]
    };
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            // differences first, so equal neighbours cancel exactly
            let dx = |r: isize| px(r, x + 1) - px(r, x - 1);
            let dy = |c: isize| px(y + 1, c) - px(y - 1, c);
            let i = y as usize * w + x as usize;
            gx[i] = dx(y - 1) + 2.0 * dx(y) + dx(y + 1);
            gy[i] = dy(x - 1) + 2.0 * dy(x) + dy(x + 1);
        }
    }
    Ok((gx, gy))
}

/// Gradient magnitude `sqrt(Gx² + Gy²)` normalized by its maximum; an
/// all-zero map when the image is flat.
pub fn sobel_magnitude(img: &Tensor) -> Result<EdgeMap> {
    sobel_with(img, EdgeMethod::Sobel)
}

pub fn sobel_with(img: &Tensor, method: EdgeMethod) -> Result<EdgeMap> {
    let (h, w) = single_channel(img)?;
    let (gx, gy) = sobel_components(img)?;
    let mut mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();
    let peak = mag.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        mag.iter_mut().for_each(|v| *v /= peak);
    }
    if let EdgeMethod::SobelThreshold { threshold } = method {
        mag.iter_mut()
            .for_each(|v| *v = if *v >= threshold && peak > 0.0 { 1.0 } else { 0.0 });
    }
    Ok(EdgeMap {
        values: Tensor::new([1, h, w], mag)?,
        source: (h, w),
        method,
    })
}

/// `levels` maps: level 0 is the full-resolution edge map, each following
/// level the 2×2 average of the previous one.
pub fn edge_pyramid(img: &Tensor, levels: usize, method: EdgeMethod) -> Result<Vec<EdgeMap>> {
    let (h, w) = single_channel(img)?;
    if levels == 0 {
        return Ok(Vec::new());
    }
    let div = 1usize << (levels - 1);
    if h % div != 0 || w % div != 0 {
        return Err(Error::Data(format!(
            "{h}×{w} image cannot be halved {} times",
            levels - 1
        )));
    }
    let mut out = vec![sobel_with(img, method)?];
    for _ in 1..levels {
        let prev = &out.last().expect("nonempty").values;
        let values = avg_pool2x2(prev)?.map(|v| v.clamp(0.0, 1.0));
        out.push(EdgeMap {
            values,
            source: (h, w),
            method,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(h: usize, w: usize) -> Tensor {
        let data = (0..h * w)
            .map(|i| if i % w >= w / 2 { 1.0 } else { 0.0 })
            .collect();
        Tensor::new([1, h, w], data).unwrap()
    }

    #[test]
    fn constant_image_has_no_edges() {
        let e = sobel_magnitude(&Tensor::full([1, 6, 5], 0.7)).unwrap();
        assert!(e.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vertical_step_hits_two_columns() {
        let (h, w) = (6, 8);
        let e = sobel_magnitude(&step(h, w)).unwrap();
        for y in 0..h {
            for x in 0..w {
                let v = e.values.at(&[0, y, x]);
                if x == w / 2 - 1 || x == w / 2 {
                    assert_eq!(v, 1.0);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn rejects_multichannel() {
        assert!(sobel_magnitude(&Tensor::ones([2, 4, 4])).is_err());
    }

    #[test]
    fn threshold_binarizes() {
        let img = Tensor::new([1, 4, 4], (0..16).map(|i| ((i * 7) % 5) as f64).collect()).unwrap();
        let e = sobel_with(&img, EdgeMethod::SobelThreshold { threshold: 0.5 }).unwrap();
        assert!(e.values.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(e.values.data().contains(&1.0));
    }

    #[test]
    fn pyramid_levels() {
        let img = step(64, 64);
        let p = edge_pyramid(&img, 3, EdgeMethod::Sobel).unwrap();
        let ext: Vec<_> = p.iter().map(EdgeMap::extents).collect();
        assert_eq!(ext, vec![(64, 64), (32, 32), (16, 16)]);
        assert_eq!(p[0], sobel_magnitude(&img).unwrap());
        assert_eq!(edge_pyramid(&img, 1, EdgeMethod::Sobel).unwrap().len(), 1);
        assert!(edge_pyramid(&step(12, 12), 4, EdgeMethod::Sobel).is_err());
        for m in &p {
            assert!(m.values.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn average_pooling_keeps_constant() {
        let c = Tensor::full([1, 8, 8], 0.375);
        assert_eq!(avg_pool2x2(&c).unwrap(), Tensor::full([1, 4, 4], 0.375));
    }
}
