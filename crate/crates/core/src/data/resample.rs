//! Volume slicing, min-max normalization and resampling.

use super::nifti::Volume;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// A 2D scalar image, row-major (`height` rows of `width` values).
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Data(format!(
                "{} values for a {height}×{width} plane",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }
}

/// Every 2D plane of the volume in storage order; rows run along y and
/// columns along x.
pub fn slice_volume(v: &Volume) -> Vec<(usize, Plane)> {
    let (nx, ny) = (v.nx(), v.ny());
    v.data
        .chunks(nx * ny)
        .enumerate()
        .map(|(k, chunk)| {
            (
                k,
                Plane {
                    height: ny,
                    width: nx,
                    data: chunk.to_vec(),
                },
            )
        })
        .collect()
}

/// Min-max scaling to [0, 1]; a constant image maps to zeros.
pub fn normalize(img: &Plane) -> Plane {
    let lo = img.data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = img.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let data = if range > 0.0 && range.is_finite() {
        img.data.iter().map(|&v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; img.data.len()]
    };
    Plane { data, ..*img }
}

/// Source coordinate of output index `i` with corners aligned.
fn source_coord(i: usize, input: usize, output: usize) -> f64 {
    if output == 1 {
        (input as f64 - 1.0) / 2.0
    } else {
        i as f64 * (input as f64 - 1.0) / (output as f64 - 1.0)
    }
}

/// Bilinear resampling with corner alignment, so the four corner values
/// are kept exactly.
pub fn resize_bilinear(img: &Plane, height: usize, width: usize) -> Result<Plane> {
    if height == 0 || width == 0 {
        return Err(Error::Data(format!("target extents {height}×{width}")));
    }
    let mut data = Vec::with_capacity(height * width);
    for r in 0..height {
        let y = source_coord(r, img.height, height);
        let y0 = (y.floor() as usize).min(img.height - 1);
        let y1 = (y0 + 1).min(img.height - 1);
        let fy = y - y0 as f64;
        for c in 0..width {
            let x = source_coord(c, img.width, width);
            let x0 = (x.floor() as usize).min(img.width - 1);
            let x1 = (x0 + 1).min(img.width - 1);
            let fx = x - x0 as f64;
            let top = img.get(y0, x0) * (1.0 - fx) + img.get(y0, x1) * fx;
            let bottom = img.get(y1, x0) * (1.0 - fx) + img.get(y1, x1) * fx;
            data.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Plane::new(height, width, data)
}

/// Nearest-neighbour resampling on the same grid as [`resize_bilinear`];
/// output values are always input values.
pub fn resize_nearest<T: Copy>(
    values: &[T],
    in_extents: (usize, usize),
    height: usize,
    width: usize,
) -> Result<Vec<T>> {
    let (ih, iw) = in_extents;
    if height == 0 || width == 0 || values.len() != ih * iw || values.is_empty() {
        return Err(Error::Data(format!(
            "cannot resample {} values of {ih}×{iw} to {height}×{width}",
            values.len()
        )));
    }
    let mut out = Vec::with_capacity(height * width);
    for r in 0..height {
        let y = (source_coord(r, ih, height).round() as usize).min(ih - 1);
        for c in 0..width {
            let x = (source_coord(c, iw, width).round() as usize).min(iw - 1);
            out.push(values[y * iw + x]);
        }
    }
    Ok(out)
}

/// Min-max normalization followed by bilinear resampling to `1×H×W`.
pub fn normalize_resize(img: &Plane, target: (usize, usize)) -> Result<Tensor> {
    let resized = resize_bilinear(&normalize(img), target.0, target.1)?;
    let data = resized.data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Ok(Tensor::new([1, target.0, target.1], data)?)
}

/// Pixel spacing after resampling `input` samples onto `output` with
/// aligned corners.
pub fn resampled_spacing(spacing: f64, input: usize, output: usize) -> f64 {
    if input <= 1 || output <= 1 {
        spacing * input as f64 / output as f64
    } else {
        spacing * (input as f64 - 1.0) / (output as f64 - 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::nifti::Datatype;

    #[test]
    fn slices_in_order() {
        let v = Volume {
            dims: vec![4, 4, 2],
            spacing: vec![1.0; 3],
            data: (0..32).map(|x| x as f64).collect(),
            datatype: Datatype::F32,
        };
        let s = slice_volume(&v);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].1.data, (0..16).map(|x| x as f64).collect::<Vec<_>>());
        assert_eq!(s[1].0, 1);
        let flat = Volume {
            dims: vec![3, 2],
            spacing: vec![1.0; 2],
            data: vec![1.0; 6],
            datatype: Datatype::U8,
        };
        let s = slice_volume(&flat);
        assert_eq!(s.len(), 1);
        assert_eq!((s[0].1.height, s[0].1.width), (2, 3));
    }

    #[test]
    fn normalization_endpoints_and_constant() {
        let p = Plane::new(1, 3, vec![0.0, 10.0, 5.0]).unwrap();
        assert_eq!(normalize(&p).data, vec![0.0, 1.0, 0.5]);
        let c = Plane::new(2, 2, vec![4.0; 4]).unwrap();
        assert_eq!(normalize_resize(&c, (3, 3)).unwrap(), Tensor::zeros([1, 3, 3]));
    }

    #[test]
    fn bilinear_keeps_corners() {
        let p = Plane::new(2, 2, vec![1.0, 2.0, 3.0, 5.0]).unwrap();
        let r = resize_bilinear(&p, 4, 4).unwrap();
        assert_eq!(r.get(0, 0), 1.0);
        assert_eq!(r.get(0, 3), 2.0);
        assert_eq!(r.get(3, 0), 3.0);
        assert_eq!(r.get(3, 3), 5.0);
        // one third of the way along the top row
        assert!((r.get(0, 1) - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn nearest_never_invents_labels() {
        let labels = vec![0u8, 3, 1, 2];
        let out = resize_nearest(&labels, (2, 2), 5, 7).unwrap();
        assert!(out.iter().all(|l| labels.contains(l)));
        assert_eq!(resize_nearest(&labels, (2, 2), 2, 2).unwrap(), labels);
    }
}
