//! Fundamental grid types: images, flow fields, sigma maps, and the
//! resampling/warping/derivative primitives everything else is built on.
//!
//! Layout convention: `Image` stores one row-major plane per channel,
//! intensities nominally in [0,1]. Flow vectors are in pixels, positive x
//! to the right and positive y downward.

use crate::error::{Error, Result};

/// A single- or multi-channel scalar grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        Image {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        let mut img = Self::new(width, height, channels);
        img.data.fill(value);
        img
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height * channels, "data length mismatch");
        assert!(channels == 1 || channels == 3);
        Image {
            width,
            height,
            channels,
            data,
        }
    }

    /// Build a single-channel image from a per-pixel function.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut img = Self::new(width, height, 1);
        for y in 0..height {
            for x in 0..width {
                img.data[y * width + x] = f(x, y);
            }
        }
        img
    }

    pub fn zeros_like(&self) -> Self {
        Self::new(self.width, self.height, self.channels)
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[c * self.width * self.height + y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[c * self.width * self.height + y * self.width + x] = v;
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Mean of (R+G+B)/3, or the plane itself for single-channel images.
    pub fn luminance(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let n = self.num_pixels();
        let mut out = Image::new(self.width, self.height, 1);
        for i in 0..n {
            out.data[i] = (self.data[i] + self.data[n + i] + self.data[2 * n + i]) / 3.0;
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        assert!(self.same_dims(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn dot(&self, other: &Image) -> f64 {
        assert!(self.same_dims(other));
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

/// Per-pixel 2-vector displacement in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl FlowField {
    pub fn new(width: usize, height: usize) -> Self {
        FlowField {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
        }
    }

    pub fn uniform(width: usize, height: usize, du: f64, dv: f64) -> Self {
        FlowField {
            width,
            height,
            u: vec![du; width * height],
            v: vec![dv; width * height],
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, du: f64, dv: f64) {
        let i = y * self.width + x;
        self.u[i] = du;
        self.v[i] = dv;
    }

    /// Flow pointing exactly the other way at every pixel. Used to derive a
    /// missing directional flow at sequence boundaries under the
    /// constant-velocity assumption.
    pub fn negated(&self) -> FlowField {
        FlowField {
            width: self.width,
            height: self.height,
            u: self.u.iter().map(|x| -x).collect(),
            v: self.v.iter().map(|x| -x).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(self.v.iter()).all(|x| x.is_finite())
    }
}

/// Per-pixel non-negative Gaussian standard deviation in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaMap {
    width: usize,
    height: usize,
    pub sigma: Vec<f64>,
}

impl SigmaMap {
    pub fn uniform(width: usize, height: usize, sigma: f64) -> Self {
        assert!(sigma >= 0.0);
        SigmaMap {
            width,
            height,
            sigma: vec![sigma; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, sigma: Vec<f64>) -> Self {
        assert_eq!(sigma.len(), width * height);
        SigmaMap {
            width,
            height,
            sigma,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.sigma[y * self.width + x]
    }

    pub fn is_finite(&self) -> bool {
        self.sigma.iter().all(|x| x.is_finite())
    }
}

/// Per-pixel validity bitmap (true = inside the source rectangle).
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    width: usize,
    height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn all_valid(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn intersect(&self, other: &Mask) -> Mask {
        assert_eq!(self.width, other.width);
        assert_eq!(self.height, other.height);
        Mask {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| *a && *b)
                .collect(),
        }
    }

    pub fn count_valid(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }
}

/// Bilinear sample of one channel with clamp-to-border semantics.
#[inline]
pub fn sample_bilinear(img: &Image, c: usize, sx: f64, sy: f64) -> f64 {
    let w = img.width();
    let h = img.height();
    let sx = sx.clamp(0.0, (w - 1) as f64);
    let sy = sy.clamp(0.0, (h - 1) as f64);
    let x0 = sx.floor() as usize;
    let y0 = sy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = sx - x0 as f64;
    let fy = sy - y0 as f64;
    let p = img.plane(c);
    let v00 = p[y0 * w + x0];
    let v10 = p[y0 * w + x1];
    let v01 = p[y1 * w + x0];
    let v11 = p[y1 * w + x1];
    (1.0 - fy) * ((1.0 - fx) * v00 + fx * v10) + fy * ((1.0 - fx) * v01 + fx * v11)
}

#[inline]
pub fn in_rect(sx: f64, sy: f64, w: usize, h: usize) -> bool {
    sx >= 0.0 && sy >= 0.0 && sx <= (w - 1) as f64 && sy <= (h - 1) as f64
}

/// Warp an image along a flow: output(x) = img(x + flow(x)), sampled
/// bilinearly. The mask flags pixels whose target stays inside the image
/// rectangle; out-of-range samples clamp to the border.
pub fn warp_bilinear(img: &Image, flow: &FlowField) -> Result<(Image, Mask)> {
    if img.width() != flow.width() || img.height() != flow.height() {
        return Err(Error::DimensionMismatch {
            context: "warp_bilinear",
            a_w: img.width(),
            a_h: img.height(),
            b_w: flow.width(),
            b_h: flow.height(),
        });
    }
    let w = img.width();
    let h = img.height();
    let mut out = img.zeros_like();
    let mut mask = Mask::all_valid(w, h);
    for y in 0..h {
        for x in 0..w {
            let (du, dv) = flow.at(x, y);
            let sx = x as f64 + du;
            let sy = y as f64 + dv;
            mask.data[y * w + x] = in_rect(sx, sy, w, h);
            for c in 0..img.channels() {
                out.set(x, y, c, sample_bilinear(img, c, sx, sy));
            }
        }
    }
    Ok((out, mask))
}

/// Forward differences with Neumann boundary: the last column of dx and the
/// last row of dy are zero. The matching adjoint is the negative backward
/// difference, so TV dual updates stay exact.
pub fn spatial_gradient(img: &Image) -> (Image, Image) {
    let w = img.width();
    let h = img.height();
    let mut dx = img.zeros_like();
    let mut dy = img.zeros_like();
    for c in 0..img.channels() {
        let p = img.plane(c);
        let px = dx.plane_mut(c);
        for y in 0..h {
            for x in 0..w.saturating_sub(1) {
                px[y * w + x] = p[y * w + x + 1] - p[y * w + x];
            }
        }
        let py = dy.plane_mut(c);
        for y in 0..h.saturating_sub(1) {
            for x in 0..w {
                py[y * w + x] = p[(y + 1) * w + x] - p[y * w + x];
            }
        }
    }
    (dx, dy)
}

/// Adjoint of `spatial_gradient` applied to a (gx, gy) pair:
/// out = dx^T gx + dy^T gy (negative divergence).
pub fn gradient_adjoint(gx: &Image, gy: &Image) -> Image {
    let w = gx.width();
    let h = gx.height();
    let mut out = gx.zeros_like();
    for c in 0..gx.channels() {
        let px = gx.plane(c);
        let py = gy.plane(c);
        let o = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut v = 0.0;
                // column x of dx^T: +g(x-1) - g(x), skipping the zeroed last column
                if x + 1 < w {
                    v -= px[y * w + x];
                }
                if x > 0 {
                    v += px[y * w + x - 1];
                }
                if y + 1 < h {
                    v -= py[y * w + x];
                }
                if y > 0 {
                    v += py[(y - 1) * w + x];
                }
                o[y * w + x] = v;
            }
        }
    }
    out
}

/// Bilinear resample to new dimensions using pixel-center alignment.
pub fn resample_image(img: &Image, new_w: usize, new_h: usize) -> Image {
    assert!(new_w >= 1 && new_h >= 1);
    if new_w == img.width() && new_h == img.height() {
        return img.clone();
    }
    let sx = img.width() as f64 / new_w as f64;
    let sy = img.height() as f64 / new_h as f64;
    let mut out = Image::new(new_w, new_h, img.channels());
    for y in 0..new_h {
        for x in 0..new_w {
            let ox = (x as f64 + 0.5) * sx - 0.5;
            let oy = (y as f64 + 0.5) * sy - 0.5;
            for c in 0..img.channels() {
                out.set(x, y, c, sample_bilinear(img, c, ox, oy));
            }
        }
    }
    out
}

/// Resample a flow field to new dimensions; displacements are rescaled so
/// they stay metrically correct at the new resolution.
pub fn resample_flow(flow: &FlowField, new_w: usize, new_h: usize) -> FlowField {
    assert!(new_w >= 1 && new_h >= 1);
    if new_w == flow.width() && new_h == flow.height() {
        return flow.clone();
    }
    let old_w = flow.width();
    let old_h = flow.height();
    let u_img = Image::from_data(old_w, old_h, 1, flow.u.clone());
    let v_img = Image::from_data(old_w, old_h, 1, flow.v.clone());
    let u_rs = resample_image(&u_img, new_w, new_h);
    let v_rs = resample_image(&v_img, new_w, new_h);
    let ku = new_w as f64 / old_w as f64;
    let kv = new_h as f64 / old_h as f64;
    FlowField {
        width: new_w,
        height: new_h,
        u: u_rs.data().iter().map(|x| x * ku).collect(),
        v: v_rs.data().iter().map(|x| x * kv).collect(),
    }
}

/// Compose two flows: out(x) = u_a(x) + u_b(x + u_a(x)). The validity mask
/// is the intersection of u_a's reach staying in-rect with nothing else;
/// callers combining further warps intersect masks themselves.
pub fn chain_flows(u_a: &FlowField, u_b: &FlowField) -> Result<(FlowField, Mask)> {
    if u_a.width() != u_b.width() || u_a.height() != u_b.height() {
        return Err(Error::DimensionMismatch {
            context: "chain_flows",
            a_w: u_a.width(),
            a_h: u_a.height(),
            b_w: u_b.width(),
            b_h: u_b.height(),
        });
    }
    let w = u_a.width();
    let h = u_a.height();
    let bu = Image::from_data(w, h, 1, u_b.u.clone());
    let bv = Image::from_data(w, h, 1, u_b.v.clone());
    let mut out = FlowField::new(w, h);
    let mut mask = Mask::all_valid(w, h);
    for y in 0..h {
        for x in 0..w {
            let (au, av) = u_a.at(x, y);
            let sx = x as f64 + au;
            let sy = y as f64 + av;
            mask.data[y * w + x] = in_rect(sx, sy, w, h);
            let cu = au + sample_bilinear(&bu, 0, sx, sy);
            let cv = av + sample_bilinear(&bv, 0, sx, sy);
            out.set(x, y, cu, cv);
        }
    }
    Ok((out, mask))
}

/// Separable Gaussian filter with replicate borders, kernel truncated at
/// ceil(3*sigma) and normalized. sigma <= 0 returns the input unchanged.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for d in -radius..=radius {
        kernel.push((-(d * d) as f64 / (2.0 * sigma * sigma)).exp());
    }
    let sum: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= sum;
    }
    let w = img.width() as i64;
    let h = img.height() as i64;
    let mut tmp = img.zeros_like();
    for c in 0..img.channels() {
        let src = img.plane(c);
        let dst = tmp.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, k) in kernel.iter().enumerate() {
                    let xx = (x + j as i64 - radius).clamp(0, w - 1);
                    acc += k * src[(y * w + xx) as usize];
                }
                dst[(y * w + x) as usize] = acc;
            }
        }
    }
    let mut out = img.zeros_like();
    for c in 0..img.channels() {
        let src = tmp.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, k) in kernel.iter().enumerate() {
                    let yy = (y + j as i64 - radius).clamp(0, h - 1);
                    acc += k * src[(yy * w + x) as usize];
                }
                dst[(y * w + x) as usize] = acc;
            }
        }
    }
    out
}
