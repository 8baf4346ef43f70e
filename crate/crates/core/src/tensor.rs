//! Dense row-major `f32` tensors and the video/point-grid views built on them.
//!
//! Videos are stored channel-last as `[T, H, W, C]`. Color and point channels
//! live in `[0, 1]` on disk and are mapped affinely to `[-1, 1]` for diffusion.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};

pub const MAX_DIMS: usize = 5;

/// Dense tensor of finite `f32` values in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorF {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl TensorF {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() || dims.len() > MAX_DIMS {
            return Err(Error::Tensor(format!("rank {} not in 1..={MAX_DIMS}", dims.len())));
        }
        let mut count: usize = 1;
        for &d in &dims {
            if d == 0 {
                return Err(Error::Tensor(format!("zero extent in {dims:?}")));
            }
            count = count
                .checked_mul(d)
                .ok_or_else(|| Error::Tensor(format!("element count overflows for {dims:?}")))?;
        }
        if count != data.len() {
            return Err(Error::Tensor(format!(
                "dims {dims:?} need {count} elements, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Tensor(format!("non-finite value at flat index {i}")));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims.to_vec(), vec![0.0; n])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<f32>) {
        (self.dims, self.data)
    }

    /// Applies `f` elementwise. The result is re-validated for finiteness.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(self.dims.clone(), self.data.iter().map(|&v| f(v)).collect())
    }
}

/// Maps a storage value in `[0, 1]` to the diffusion range `[-1, 1]`.
#[inline]
pub fn to_diffusion(x: f32) -> f32 {
    2.0 * x - 1.0
}

/// Inverse of [`to_diffusion`].
#[inline]
pub fn from_diffusion(x: f32) -> f32 {
    (x + 1.0) * 0.5
}

fn video_dims(t: &TensorF, channels: usize, what: &str) -> Result<[usize; 4]> {
    match *t.dims() {
        [tt, h, w, c] if c == channels => Ok([tt, h, w, c]),
        _ => Err(Error::Tensor(format!("{what} must be [T,H,W,{channels}], got {:?}", t.dims()))),
    }
}

macro_rules! video_view {
    ($(#[$m:meta])* $name:ident, $channels:expr) => {
        $(#[$m])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            tensor: TensorF,
        }

        impl $name {
            pub const CHANNELS: usize = $channels;

            pub fn tensor(&self) -> &TensorF {
                &self.tensor
            }

            pub fn into_tensor(self) -> TensorF {
                self.tensor
            }

            pub fn frames(&self) -> usize {
                self.tensor.dims()[0]
            }

            pub fn height(&self) -> usize {
                self.tensor.dims()[1]
            }

            pub fn width(&self) -> usize {
                self.tensor.dims()[2]
            }

            #[inline]
            pub fn index(&self, t: usize, row: usize, col: usize) -> usize {
                ((t * self.height() + row) * self.width() + col) * Self::CHANNELS
            }

            pub fn pixel(&self, t: usize, row: usize, col: usize) -> &[f32] {
                let i = self.index(t, row, col);
                &self.tensor.data()[i..i + Self::CHANNELS]
            }
        }
    };
}

video_view!(
    /// RGB video `[T, H, W, 3]` with values in `[0, 1]`.
    RgbVideo,
    3
);
video_view!(
    /// Pixel-aligned point trajectories `[T, H, W, 3]` holding normalized `(u, v, d)`.
    ///
    /// Background pixels are exactly zero in every frame.
    PointGrid,
    3
);
video_view!(
    /// Channel concatenation of an [`RgbVideo`] and a [`PointGrid`]: `[T, H, W, 6]`.
    JointVideo,
    6
);

impl RgbVideo {
    pub fn new(tensor: TensorF) -> Result<Self> {
        video_dims(&tensor, 3, "RgbVideo")?;
        if let Some(i) = tensor.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Tensor(format!(
                "RgbVideo value {} at flat index {i} outside [0,1]",
                tensor.data()[i]
            )));
        }
        Ok(Self { tensor })
    }
}

impl PointGrid {
    pub fn new(tensor: TensorF) -> Result<Self> {
        video_dims(&tensor, 3, "PointGrid")?;
        Ok(Self { tensor })
    }

    /// Largest absolute value over pixels where `mask` is false. Zero for a
    /// well-formed grid.
    pub fn max_background_abs(&self, mask: &ForegroundMask) -> Result<f32> {
        mask.check_dims(self.height(), self.width())?;
        let mut worst = 0.0f32;
        for t in 0..self.frames() {
            for r in 0..self.height() {
                for c in 0..self.width() {
                    if !mask.get(r, c) {
                        for v in self.pixel(t, r, c) {
                            worst = worst.max(v.abs());
                        }
                    }
                }
            }
        }
        Ok(worst)
    }
}

impl JointVideo {
    pub fn new(tensor: TensorF) -> Result<Self> {
        video_dims(&tensor, 6, "JointVideo")?;
        Ok(Self { tensor })
    }
}

/// Concatenates color and point channels into a joint video.
pub fn concat_vp(v: &RgbVideo, p: &PointGrid) -> Result<JointVideo> {
    if v.tensor.dims()[..3] != p.tensor.dims()[..3] {
        return Err(shape_err(v.tensor.dims(), p.tensor.dims()));
    }
    let pixels = v.tensor.len() / 3;
    let mut data = Vec::with_capacity(pixels * 6);
    for (a, b) in v.tensor.data().chunks_exact(3).zip(p.tensor.data().chunks_exact(3)) {
        data.extend_from_slice(a);
        data.extend_from_slice(b);
    }
    let [t, h, w, _] = video_dims(&v.tensor, 3, "RgbVideo")?;
    JointVideo::new(TensorF::new(vec![t, h, w, 6], data)?)
}

/// Splits a joint video into its color and point halves.
pub fn slice_channels(j: &JointVideo) -> Result<(RgbVideo, PointGrid)> {
    let [t, h, w, _] = video_dims(&j.tensor, 6, "JointVideo")?;
    let pixels = t * h * w;
    let mut rgb = Vec::with_capacity(pixels * 3);
    let mut pts = Vec::with_capacity(pixels * 3);
    for px in j.tensor.data().chunks_exact(6) {
        rgb.extend_from_slice(&px[..3]);
        pts.extend_from_slice(&px[3..]);
    }
    Ok((
        RgbVideo::new(TensorF::new(vec![t, h, w, 3], rgb)?)?,
        PointGrid::new(TensorF::new(vec![t, h, w, 3], pts)?)?,
    ))
}

/// Binary `H x W` foreground mask of the reference frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForegroundMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl ForegroundMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(shape_err(&[height, width], &[bits.len()]));
        }
        Ok(Self { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![false; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Foreground pixels in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i / self.width, i % self.width))
    }

    pub fn check_dims(&self, height: usize, width: usize) -> Result<()> {
        if self.height != height || self.width != width {
            return Err(shape_err(&[self.height, self.width], &[height, width]));
        }
        Ok(())
    }

    /// Mask as a `[H, W]` tensor of 0/1 values.
    pub fn to_tensor(&self) -> TensorF {
        let data = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        TensorF { dims: vec![self.height, self.width], data }
    }

    /// Reads a `[H, W]` tensor; any non-zero value is foreground.
    pub fn from_tensor(t: &TensorF) -> Result<Self> {
        match *t.dims() {
            [h, w] => Ok(Self { height: h, width: w, bits: t.data().iter().map(|&v| v != 0.0).collect() }),
            _ => Err(Error::Tensor(format!("mask must be [H,W], got {:?}", t.dims()))),
        }
    }
}
