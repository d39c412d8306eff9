//! Bicubic resampling with the Keys cubic kernel.
//!
//! Convention: `a = -0.5`, half-pixel centers (`src = (dst + 0.5)·in/out − 0.5`),
//! clamp-to-edge sampling. No anti-aliasing prefilter is applied when
//! downscaling. The resize is separable and linear in its input, so it is
//! expressed as `Wy · X · Wxᵀ` with dense weight matrices; the taped version
//! and the plain version share that computation and agree bit for bit.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};

const KEYS_A: f64 = -0.5;

/// Keys cubic convolution kernel.
pub fn keys_kernel(x: f64) -> f64 {
    let a = KEYS_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((x - 5.0) * x + 8.0) * x * a - 4.0 * a
    } else {
        0.0
    }
}

/// Dense `[out_len, in_len]` interpolation matrix along one axis.
pub fn bicubic_weights<T: Scalar>(in_len: usize, out_len: usize) -> Result<Tensor<T>> {
    if in_len == 0 || out_len == 0 {
        return Err(Error::Invalid(format!("cannot resize {in_len} -> {out_len}")));
    }
    let ratio = in_len as f64 / out_len as f64;
    let mut w = vec![0.0f64; out_len * in_len];
    for o in 0..out_len {
        let src = (o as f64 + 0.5) * ratio - 0.5;
        let base = src.floor() as isize;
        let row = &mut w[o * in_len..(o + 1) * in_len];
        for tap in base - 1..=base + 2 {
            let k = keys_kernel(src - tap as f64);
            if k != 0.0 {
                let idx = tap.clamp(0, in_len as isize - 1) as usize;
                row[idx] += k;
            }
        }
    }
    Tensor::new([out_len, in_len], w.into_iter().map(T::lit).collect())
}

/// Resizes the trailing `[h, w]` planes of `x` to `[out_h, out_w]`.
pub fn bicubic_resize_tensor<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (wy, wx) = plane_weights(x.shape(), out_h, out_w)?;
    crate::numerics::tape_separable(x, &wy, &wx)
}

/// Taped bicubic resize of `x[.., h, w]`.
pub fn bicubic_resize_var<T: Scalar>(tape: &mut Tape<T>, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
    let (wy, wx) = plane_weights(tape.shape(x), out_h, out_w)?;
    tape.separable(x, Rc::new(wy), Rc::new(wx))
}

fn plane_weights<T: Scalar>(shape: &[usize], out_h: usize, out_w: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    if shape.len() < 2 {
        return Err(Error::Invalid(format!("resize needs at least 2 dims, got {shape:?}")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    Ok((bicubic_weights(h, out_h)?, bicubic_weights(w, out_w)?))
}

/// A `[channels, height, width]` image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pixels: Tensor<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let pixels = Tensor::new([channels, height, width], data)?;
        if !pixels.all_finite() {
            return Err(Error::NonFinite("image"));
        }
        Ok(Self { pixels })
    }

    pub fn from_tensor(t: Tensor<f32>) -> Result<Self> {
        if t.ndim() != 3 {
            return Err(Error::Invalid(format!("image tensor must be [c, h, w], got {:?}", t.shape())));
        }
        if !t.all_finite() {
            return Err(Error::NonFinite("image"));
        }
        Ok(Self { pixels: t })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            pixels: Tensor::full([channels, height, width], value),
        }
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels.data()[(c * self.height() + y) * self.width() + x]
    }

    pub fn data(&self) -> &[f32] {
        self.pixels.data()
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        self.pixels.data_mut()
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.pixels
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.pixels
    }

    /// Copies the window `[y0, y0+h) × [x0, x0+w)` of every channel.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || y0 + h > self.height() || x0 + w > self.width() {
            return Err(Error::Invalid(format!(
                "crop {h}x{w}+{y0}+{x0} outside {}x{} image",
                self.height(),
                self.width()
            )));
        }
        let (c, iw) = (self.channels(), self.width());
        let mut data = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in y0..y0 + h {
                let row = (ch * self.height() + y) * iw;
                data.extend_from_slice(&self.data()[row + x0..row + x0 + w]);
            }
        }
        Self::new(c, h, w, data)
    }

    pub fn clamped(&self) -> Self {
        Self {
            pixels: self.pixels.map(|v| v.clamp(0.0, 1.0)),
        }
    }

    /// Rec.601 luma of an RGB image; single-channel images are returned as is.
    pub fn luminance(&self) -> Self {
        if self.channels() != 3 {
            return self.clone();
        }
        let n = self.height() * self.width();
        let d = self.data();
        let data = (0..n)
            .map(|i| 0.299 * d[i] + 0.587 * d[n + i] + 0.114 * d[2 * n + i])
            .collect();
        Self {
            pixels: Tensor::new([1, self.height(), self.width()], data).expect("shape is consistent"),
        }
    }
}

/// Bicubic resize of every channel of `img`.
pub fn bicubic_resize(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    Image::from_tensor(bicubic_resize_tensor(img.tensor(), out_h, out_w)?)
}

/// Downscales by an integer factor, cropping the bottom/right edges first if
/// the dimensions are not multiples of `factor`.
pub fn downsample(img: &Image, factor: usize) -> Result<Image> {
    if factor == 0 || img.height() < factor || img.width() < factor {
        return Err(Error::Invalid(format!(
            "cannot downsample {}x{} by {factor}",
            img.height(),
            img.width()
        )));
    }
    let (h, w) = (img.height() / factor * factor, img.width() / factor * factor);
    let cropped;
    let src = if (h, w) == (img.height(), img.width()) {
        img
    } else {
        cropped = img.crop(0, 0, h, w)?;
        &cropped
    };
    bicubic_resize(src, h / factor, w / factor)
}

pub fn downsample_x8(img: &Image) -> Result<Image> {
    downsample(img, 8)
}
