//! Orthonormal 2-D Haar wavelet transform over `(N, C, H, W)` tensors.
//!
//! Every level splits each channel into one low-pass band and three detail
//! bands, all at half resolution. The four analysis kernels are outer
//! products of the 1-D filters `L = [1, 1]/√2` and `H = [-1, 1]/√2`,
//! applied with stride-2 correlation (no kernel flip). Orientation
//! convention used throughout the crate:
//!
//! | band | kernel  | 2×2 weights            |
//! |------|---------|------------------------|
//! | low  | `LᵀL`   | `½ [[ 1,  1], [ 1, 1]]` |
//! | v    | `HᵀL`   | `½ [[-1, -1], [ 1, 1]]` |
//! | h    | `LᵀH`   | `½ [[-1,  1], [-1, 1]]` |
//! | d    | `HᵀH`   | `½ [[ 1, -1], [-1, 1]]` |
//!
//! `v` responds to changes across rows, `h` to changes across columns.
//! The transform rejects odd spatial sizes; padding is the caller's job.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};

pub type Kernel2 = [[f64; 2]; 2];

/// The four 2×2 Haar analysis kernels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSet {
    pub ll: Kernel2,
    pub v: Kernel2,
    pub h: Kernel2,
    pub d: Kernel2,
}

impl KernelSet {
    pub fn as_array(&self) -> [Kernel2; 4] {
        [self.ll, self.v, self.h, self.d]
    }
}

/// 1-D low-pass Haar filter.
pub fn low_pass() -> [f64; 2] {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    [s, s]
}

/// 1-D high-pass Haar filter.
pub fn high_pass() -> [f64; 2] {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    [-s, s]
}

fn outer(col: [f64; 2], row: [f64; 2]) -> Kernel2 {
    [
        [col[0] * row[0], col[0] * row[1]],
        [col[1] * row[0], col[1] * row[1]],
    ]
}

pub fn haar_kernels() -> KernelSet {
    let (l, h) = (low_pass(), high_pass());
    KernelSet {
        ll: outer(l, l),
        v: outer(h, l),
        h: outer(l, h),
        d: outer(h, h),
    }
}

/// One-level decomposition: low band plus `v`, `h`, `d` detail bands.
#[derive(Debug, Clone)]
pub struct SubbandQuad {
    pub low: Tensor,
    pub v: Tensor,
    pub h: Tensor,
    pub d: Tensor,
}

/// Vertical, horizontal and diagonal detail bands of one level.
#[derive(Debug, Clone)]
pub struct HighFreqTriplet {
    pub v: Tensor,
    pub h: Tensor,
    pub d: Tensor,
}

impl HighFreqTriplet {
    pub fn new(v: Tensor, h: Tensor, d: Tensor) -> Result<Self> {
        if v.dims() != h.dims() || v.dims() != d.dims() {
            return Err(Error::Shape(format!(
                "triplet bands differ: v {:?}, h {:?}, d {:?}",
                v.dims(),
                h.dims(),
                d.dims()
            )));
        }
        Ok(Self { v, h, d })
    }

    /// Channel-wise concatenation `v ‖ h ‖ d`.
    pub fn concat(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&[&self.v, &self.h, &self.d], 1)?)
    }

    pub fn dims(&self) -> &[usize] {
        self.v.dims()
    }

    pub fn detach(&self) -> Self {
        Self {
            v: self.v.detach(),
            h: self.h.detach(),
            d: self.d.detach(),
        }
    }

    pub fn zeros_like(&self) -> Result<Self> {
        Ok(Self {
            v: self.v.zeros_like()?,
            h: self.h.zeros_like()?,
            d: self.d.zeros_like()?,
        })
    }
}

/// A `K`-level decomposition. `highs[0]` is the finest level (k = 1) and
/// `highs[K-1]` shares its spatial size with `low`.
#[derive(Debug, Clone)]
pub struct WaveletPyramid {
    pub low: Tensor,
    pub highs: Vec<HighFreqTriplet>,
}

impl WaveletPyramid {
    pub fn levels(&self) -> usize {
        self.highs.len()
    }
}

fn check_even(x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 {
        return Err(Error::Dimension {
            axis: "height",
            size: h,
            divisor: 2,
        });
    }
    if w % 2 != 0 {
        return Err(Error::Dimension {
            axis: "width",
            size: w,
            divisor: 2,
        });
    }
    Ok((n, c, h, w))
}

pub fn dwt_level(x: &Tensor) -> Result<SubbandQuad> {
    let (n, c, h, w) = check_even(x)?;
    let (h2, w2) = (h / 2, w / 2);
    let blocks = x.reshape((n, c, h2, 2, w2, 2))?;
    let pick = |r: usize, s: usize| -> Result<Tensor> {
        Ok(blocks
            .narrow(3, r, 1)?
            .narrow(5, s, 1)?
            .reshape((n, c, h2, w2))?)
    };
    // a b
    // c d
    let (a, b, cc, d) = (pick(0, 0)?, pick(0, 1)?, pick(1, 0)?, pick(1, 1)?);
    let top = (&a + &b)?;
    let bottom = (&cc + &d)?;
    let left = (&a + &cc)?;
    let right = (&b + &d)?;
    let main = (&a + &d)?;
    let anti = (&b + &cc)?;
    Ok(SubbandQuad {
        low: ((&top + &bottom)? * 0.5)?,
        v: ((&bottom - &top)? * 0.5)?,
        h: ((&right - &left)? * 0.5)?,
        d: ((&main - &anti)? * 0.5)?,
    })
}

pub fn dwt(x: &Tensor, levels: usize) -> Result<WaveletPyramid> {
    let (_, _, h, w) = x.dims4()?;
    let divisor = 1usize << levels;
    if h % divisor != 0 {
        return Err(Error::Dimension {
            axis: "height",
            size: h,
            divisor,
        });
    }
    if w % divisor != 0 {
        return Err(Error::Dimension {
            axis: "width",
            size: w,
            divisor,
        });
    }
    let mut low = x.clone();
    let mut highs = Vec::with_capacity(levels);
    for _ in 0..levels {
        let q = dwt_level(&low)?;
        highs.push(HighFreqTriplet {
            v: q.v,
            h: q.h,
            d: q.d,
        });
        low = q.low;
    }
    Ok(WaveletPyramid { low, highs })
}

pub fn idwt_level(q: &SubbandQuad) -> Result<Tensor> {
    let dims = q.low.dims();
    for (name, band) in [("v", &q.v), ("h", &q.h), ("d", &q.d)] {
        if band.dims() != dims {
            return Err(Error::Shape(format!(
                "subband {name} has shape {:?}, low has {:?}",
                band.dims(),
                dims
            )));
        }
    }
    let (n, c, h2, w2) = q.low.dims4()?;
    let lo_plus_d = (&q.low + &q.d)?;
    let lo_minus_d = (&q.low - &q.d)?;
    let v_plus_h = (&q.v + &q.h)?;
    let v_minus_h = (&q.v - &q.h)?;
    let a = ((&lo_plus_d - &v_plus_h)? * 0.5)?;
    let b = ((&lo_minus_d - &v_minus_h)? * 0.5)?;
    let cc = ((&lo_minus_d + &v_minus_h)? * 0.5)?;
    let d = ((&lo_plus_d + &v_plus_h)? * 0.5)?;
    let top = Tensor::stack(&[&a, &b], D::Minus1)?;
    let bottom = Tensor::stack(&[&cc, &d], D::Minus1)?;
    Ok(Tensor::stack(&[&top, &bottom], 3)?.reshape((n, c, 2 * h2, 2 * w2))?)
}

pub fn idwt(p: &WaveletPyramid) -> Result<Tensor> {
    let mut low = p.low.clone();
    for (k, t) in p.highs.iter().enumerate().rev() {
        if t.v.dims() != low.dims() {
            return Err(Error::Shape(format!(
                "level {} details {:?} do not match running low band {:?}",
                k + 1,
                t.v.dims(),
                low.dims()
            )));
        }
        low = idwt_level(&SubbandQuad {
            low,
            v: t.v.clone(),
            h: t.h.clone(),
            d: t.d.clone(),
        })?;
    }
    Ok(low)
}
