//! Host-side image buffers and their conversion to batched tensors.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// Interleaved `height × width × channels` image.
///
/// Raw files live in `[0, 255]`; the model works on the normalized range
/// `[-1, 1]` (see [`ImagePlane::normalized`]).
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImagePlane {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "buffer of {} values cannot hold {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(height, width, channels)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// Linear map `[0, 255] → [-1, 1]`.
    pub fn normalized(&self) -> Self {
        self.map(|v| v / 127.5 - 1.0)
    }

    /// Inverse of [`ImagePlane::normalized`].
    pub fn denormalized(&self) -> Self {
        self.map(|v| (v + 1.0) * 127.5)
    }

    /// Mean of every channel.
    pub fn channel_means(&self) -> Vec<f64> {
        let mut sums = vec![0.0f64; self.channels];
        for px in self.data.chunks_exact(self.channels) {
            for (s, &v) in sums.iter_mut().zip(px) {
                *s += v as f64;
            }
        }
        let n = (self.height * self.width).max(1) as f64;
        sums.into_iter().map(|s| s / n).collect()
    }

    /// Horizontally mirrored copy.
    pub fn flipped_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, self.channels, |y, x, c| {
            self.get(y, self.width - 1 - x, c)
        })
    }

    /// Copy of the `h × w` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > self.height || left + w > self.width {
            return Err(Error::Shape(format!(
                "crop {h}x{w} at ({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        Ok(Self::from_fn(h, w, self.channels, |y, x, c| {
            self.get(top + y, left + x, c)
        }))
    }

    /// Pads bottom/right by edge replication so both dims become at least
    /// `min_h`/`min_w` and multiples of `multiple`.
    pub fn pad_replicate(&self, multiple: usize, min_h: usize, min_w: usize) -> Self {
        let round = |v: usize| v.max(1).div_ceil(multiple) * multiple;
        let h = round(self.height.max(min_h));
        let w = round(self.width.max(min_w));
        if h == self.height && w == self.width {
            return self.clone();
        }
        Self::from_fn(h, w, self.channels, |y, x, c| {
            self.get(y.min(self.height - 1), x.min(self.width - 1), c)
        })
    }

    /// Converts to a `(1, C, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(
            &self.data,
            (self.height, self.width, self.channels),
            device,
        )?
        .permute((2, 0, 1))?
        .unsqueeze(0)?
        .to_dtype(dtype)?
        .contiguous()?;
        Ok(t)
    }

    /// Stacks equal-shaped planes into an `(N, C, H, W)` tensor.
    pub fn stack(planes: &[&ImagePlane], dtype: DType, device: &Device) -> Result<Tensor> {
        let ts = planes
            .iter()
            .map(|p| p.to_tensor(dtype, device))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&ts, 0)?)
    }

    /// Extracts item `index` of an `(N, C, H, W)` tensor.
    pub fn from_tensor(t: &Tensor, index: usize) -> Result<Self> {
        let (_, c, h, w) = t.dims4()?;
        let data = t
            .get(index)?
            .permute((1, 2, 0))?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Self::new(h, w, c, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_endpoints() {
        let p = ImagePlane::new(1, 2, 1, vec![0.0, 255.0]).unwrap();
        let n = p.normalized();
        assert_eq!(n.data(), &[-1.0, 1.0]);
        assert_eq!(n.denormalized().data(), &[0.0, 255.0]);
    }

    #[test]
    fn normalization_inverts_every_byte() {
        for v in 0..=255u8 {
            let p = ImagePlane::filled(1, 1, 1, v as f32);
            let back = p.normalized().denormalized().data()[0].round() as u8;
            assert_eq!(back, v);
        }
    }

    #[test]
    fn tensor_round_trip() {
        let p = ImagePlane::from_fn(3, 5, 3, |y, x, c| (y * 100 + x * 10 + c) as f32);
        let t = p.to_tensor(DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[1, 3, 3, 5]);
        assert_eq!(ImagePlane::from_tensor(&t, 0).unwrap(), p);
    }

    #[test]
    fn replicate_padding_repeats_edges() {
        let p = ImagePlane::from_fn(3, 3, 1, |y, x, _| (y * 3 + x) as f32);
        let q = p.pad_replicate(4, 0, 0);
        assert_eq!((q.height(), q.width()), (4, 4));
        assert_eq!(q.get(3, 3, 0), 8.0);
        assert_eq!(q.get(0, 3, 0), 2.0);
        assert_eq!(q.crop(0, 0, 3, 3).unwrap(), p);
    }
}
