//! Forward mapping of a low-resolution field onto a sparse high-resolution
//! grid: low-res pixel (x', y') lands at (round(s x'), round(s y')) with its
//! confidence, every other pixel holds data 0 and confidence 0.

use std::rc::Rc;

use crate::error::{dim_err, Error, Result};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

/// A high-resolution data/confidence pair with zero confidence wherever no
/// low-resolution sample landed.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseGrid {
    pub data: Tensor,
    pub conf: Tensor,
    /// Populated pixels per (batch, channel) plane.
    pub populated: usize,
    pub scale: usize,
}

/// Validates a scale factor; only positive integers give a regular grid.
pub fn integer_scale(s: f64) -> Result<usize> {
    if s == 0.0 {
        return Err(Error::InvalidArgument("scale must be >= 1".into()));
    }
    if !s.is_finite() || s < 1.0 || s.fract() != 0.0 {
        return Err(Error::UnsupportedScale(s));
    }
    Ok(s as usize)
}

/// Rounds half away from zero, clamped to `[0, len)`.
fn map_coord(src: usize, s: usize, len: usize) -> usize {
    let v = (s as f64 * src as f64).round() as usize;
    v.min(len - 1)
}

/// Flat destination index of every low-resolution element.
pub fn scatter_index(lowres: Shape, s: usize) -> Rc<Vec<usize>> {
    let (hh, hw) = (lowres.h * s, lowres.w * s);
    let mut idx = Vec::with_capacity(lowres.numel());
    for n in 0..lowres.n {
        for c in 0..lowres.c {
            let base = (n * lowres.c + c) * hh * hw;
            for y in 0..lowres.h {
                let yy = map_coord(y, s, hh);
                for x in 0..lowres.w {
                    idx.push(base + yy * hw + map_coord(x, s, hw));
                }
            }
        }
    }
    Rc::new(idx)
}

pub fn highres_shape(lowres: Shape, s: usize) -> Shape {
    Shape::new(lowres.n, lowres.c, lowres.h * s, lowres.w * s)
}

/// Differentiable scatter of data and weights through the same map.
/// Panics if two sources land on one destination.
pub fn forward_map_vars<'t>(
    data: Var<'t>,
    weights: Var<'t>,
    s: usize,
) -> Result<(Var<'t>, Var<'t>)> {
    if data.shape() != weights.shape() {
        return dim_err(format!(
            "forward_map: data {} vs weights {}",
            data.shape(),
            weights.shape()
        ));
    }
    if s == 0 {
        return Err(Error::InvalidArgument("scale must be >= 1".into()));
    }
    let idx = scatter_index(data.shape(), s);
    let hs = highres_shape(data.shape(), s);
    Ok((
        data.scatter(Rc::clone(&idx), hs)?,
        weights.scatter(idx, hs)?,
    ))
}

pub fn forward_map(lowres: &Tensor, weights_lr: &Tensor, s: f64) -> Result<SparseGrid> {
    let s = integer_scale(s)?;
    let tape = Tape::new();
    let (d, c) = forward_map_vars(tape.leaf(lowres.clone()), tape.leaf(weights_lr.clone()), s)?;
    let lr = lowres.shape();
    Ok(SparseGrid {
        data: (*d.value()).clone(),
        conf: (*c.value()).clone(),
        populated: lr.h * lr.w,
        scale: s,
    })
}

/// Gathers the values sitting at mapped coordinates back to low resolution.
pub fn read_back(grid: &Tensor, s: usize) -> Result<Tensor> {
    let hs = grid.shape();
    if s == 0 || hs.h % s != 0 || hs.w % s != 0 {
        return dim_err(format!("read_back: grid {hs} is not a scale-{s} grid"));
    }
    let lr = Shape::new(hs.n, hs.c, hs.h / s, hs.w / s);
    let idx = scatter_index(lr, s);
    Tensor::new(lr, idx.iter().map(|&i| grid.data()[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-5.0..5.0))
    }

    #[test]
    fn scale_one_is_identity() {
        let x = random(Shape::new(1, 2, 3, 4), 1);
        let w = random(x.shape(), 2).map(f64::abs);
        let g = forward_map(&x, &w, 1.0).unwrap();
        assert_eq!(g.data, x);
        assert_eq!(g.conf, w);
        assert_eq!(g.populated, 12);
        assert_eq!(read_back(&x, 1).unwrap(), x);
    }

    #[test]
    fn source_pixel_lands_at_scaled_coordinate() {
        let mut x = Tensor::zeros(Shape::new(1, 1, 5, 4));
        // x' = 2 (column), y' = 3 (row)
        x.set(0, 0, 3, 2, 1.5);
        let g = forward_map(&x, &Tensor::ones(x.shape()), 4.0).unwrap();
        assert_eq!(g.data.at(0, 0, 12, 8), 1.5);
        assert_eq!(g.data.sum(), 1.5);
    }

    #[test]
    fn scale_validation() {
        let x = Tensor::zeros(Shape::new(1, 1, 2, 2));
        assert!(matches!(
            forward_map(&x, &x, 2.5),
            Err(Error::UnsupportedScale(_))
        ));
        assert!(matches!(
            forward_map(&x, &x, 0.0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(read_back(&Tensor::zeros(Shape::new(1, 1, 6, 6)), 4).is_err());
    }

    #[test]
    fn count_and_mass_on_8x8() {
        let x = random(Shape::new(1, 1, 8, 8), 3);
        let w = random(x.shape(), 4).map(f64::abs);
        let g = forward_map(&x, &w, 4.0).unwrap();
        assert_eq!(g.data.shape(), Shape::new(1, 1, 32, 32));
        assert_eq!(g.conf.data().iter().filter(|&&c| c != 0.0).count(), 64);
        assert_eq!(g.data.sum(), x.sum());
        assert_eq!(g.conf.sum(), w.sum());
    }

    #[test]
    fn read_back_round_trip_and_zeros() {
        let x = random(Shape::new(1, 1, 5, 7), 5);
        let g = forward_map(&x, &Tensor::ones(x.shape()), 3.0).unwrap();
        assert_eq!(read_back(&g.data, 3).unwrap(), x);
        let z = Tensor::zeros(Shape::new(1, 1, 4, 4));
        let gz = forward_map(&z, &z, 2.0).unwrap();
        assert_eq!(read_back(&gz.data, 2).unwrap(), z);
    }

    #[test]
    fn weights_and_data_share_the_sparsity_pattern() {
        let x = random(Shape::new(2, 2, 3, 3), 6);
        let w = random(x.shape(), 7).map(|v| v.abs() + 0.1);
        let g = forward_map(&x, &w, 3.0).unwrap();
        for (d, c) in g.data.data().iter().zip(g.conf.data()) {
            if *c == 0.0 {
                assert_eq!(*d, 0.0);
            }
        }
    }
}
