//! 2-D convolution and transposed convolution.
//!
//! Both layers funnel through the same two primitives: `im2col`, which
//! gathers kernel-sized patches into a matrix so the convolution becomes a
//! single matrix product, and `col2im_add`, its adjoint scatter. The
//! transposed convolution is the data-gradient of a convolution, so its
//! forward uses the scatter and its backward the gather.

use ndarray::{Array1, Array2, Array4, ArrayView3, ArrayView4};
use rand::Rng;

use super::init::kaiming_uniform;
use super::ParamRef;
use crate::error::{Error, Result};

/// Output extent of a convolution along one axis.
pub fn conv_out(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::Shape(format!(
            "kernel {kernel} does not fit input {input} with padding {pad}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Output extent of a transposed convolution along one axis.
pub fn convt_out(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let grown = (input - 1) * stride + kernel;
    if grown < 2 * pad {
        return Err(Error::Shape(format!(
            "padding {pad} swallows transposed output of extent {grown}"
        )));
    }
    Ok(grown - 2 * pad)
}

/// Gather `(c, kh, kw)` patches of `x` into a `(C*k*k, gh*gw)` matrix,
/// where position `(oh, ow)` of the grid reads `x[c, oh*s + kh - p, ...]`
/// (zero outside the image).
fn im2col(
    x: ArrayView3<'_, f64>,
    kernel: usize,
    stride: usize,
    pad: usize,
    grid_h: usize,
    grid_w: usize,
) -> Array2<f64> {
    let (c_in, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((c_in * kernel * kernel, grid_h * grid_w));
    for c in 0..c_in {
        for kh in 0..kernel {
            for kw in 0..kernel {
                let row = (c * kernel + kh) * kernel + kw;
                let mut out_row = cols.row_mut(row);
                for oh in 0..grid_h {
                    let ih = (oh * stride + kh) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for ow in 0..grid_w {
                        let iw = (ow * stride + kw) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        out_row[oh * grid_w + ow] = x[[c, ih as usize, iw as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add a `(C*k*k, gh*gw)` matrix into a
/// `(C, target_h, target_w)` image, position `(oh, ow)` writing to
/// `[c, oh*s + kh - p, ...]`.
fn col2im_add(
    cols: &Array2<f64>,
    c_out: usize,
    target_h: usize,
    target_w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    grid_h: usize,
    grid_w: usize,
) -> ndarray::Array3<f64> {
    let mut img = ndarray::Array3::<f64>::zeros((c_out, target_h, target_w));
    for c in 0..c_out {
        for kh in 0..kernel {
            for kw in 0..kernel {
                let row = (c * kernel + kh) * kernel + kw;
                let in_row = cols.row(row);
                for oh in 0..grid_h {
                    let th = (oh * stride + kh) as isize - pad as isize;
                    if th < 0 || th >= target_h as isize {
                        continue;
                    }
                    for ow in 0..grid_w {
                        let tw = (ow * stride + kw) as isize - pad as isize;
                        if tw < 0 || tw >= target_w as isize {
                            continue;
                        }
                        img[[c, th as usize, tw as usize]] += in_row[oh * grid_w + ow];
                    }
                }
            }
        }
    }
    img
}

pub struct Conv2d {
    /// `(out_channels, in_channels, k, k)`.
    pub w: Array4<f64>,
    pub b: Array1<f64>,
    pub gw: Array4<f64>,
    pub gb: Array1<f64>,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct Conv2dCache {
    x: Array4<f64>,
}

impl Conv2d {
    pub fn new<R: Rng>(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let mut w = Array4::zeros((out_c, in_c, kernel, kernel));
        kaiming_uniform(w.as_slice_mut().unwrap(), in_c * kernel * kernel, rng);
        Conv2d {
            w,
            b: Array1::zeros(out_c),
            gw: Array4::zeros((out_c, in_c, kernel, kernel)),
            gb: Array1::zeros(out_c),
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_shape(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            conv_out(h, self.kernel, self.stride, self.pad)?,
            conv_out(w, self.kernel, self.stride, self.pad)?,
        ))
    }

    /// `x` is `(batch, in_channels, h, w)`.
    pub fn forward(&self, x: Array4<f64>) -> Result<(Array4<f64>, Conv2dCache)> {
        let (n, _c_in, h, w) = x.dim();
        let (ho, wo) = self.out_shape(h, w)?;
        let (oc, ic, k, _) = self.w.dim();
        let w2 = self
            .w
            .view()
            .into_shape_with_order((oc, ic * k * k))
            .expect("conv weight is contiguous");
        let mut y = Array4::<f64>::zeros((n, oc, ho, wo));
        for i in 0..n {
            let cols = im2col(
                x.index_axis(ndarray::Axis(0), i),
                k,
                self.stride,
                self.pad,
                ho,
                wo,
            );
            let out = w2.dot(&cols); // (oc, ho*wo)
            let mut y_i = y.index_axis_mut(ndarray::Axis(0), i);
            for c in 0..oc {
                let bias = self.b[c];
                let src = out.row(c);
                for oh in 0..ho {
                    for ow in 0..wo {
                        y_i[[c, oh, ow]] = src[oh * wo + ow] + bias;
                    }
                }
            }
        }
        Ok((y, Conv2dCache { x }))
    }

    pub fn backward(&mut self, cache: Conv2dCache, gy: ArrayView4<'_, f64>) -> Array4<f64> {
        let x = cache.x;
        let (n, c_in, h, w) = x.dim();
        let (_, oc, ho, wo) = gy.dim();
        let k = self.kernel;
        let w2 = self
            .w
            .view()
            .into_shape_with_order((oc, c_in * k * k))
            .expect("conv weight is contiguous");
        let mut gw2 = Array2::<f64>::zeros((oc, c_in * k * k));
        let mut gx = Array4::<f64>::zeros((n, c_in, h, w));
        for i in 0..n {
            let gy_i = gy.index_axis(ndarray::Axis(0), i);
            let gy_flat = gy_i
                .into_shape_with_order((oc, ho * wo))
                .expect("gradient is contiguous");
            let cols = im2col(
                x.index_axis(ndarray::Axis(0), i),
                k,
                self.stride,
                self.pad,
                ho,
                wo,
            );
            gw2 += &gy_flat.dot(&cols.t());
            let gcols = w2.t().dot(&gy_flat); // (c_in*k*k, ho*wo)
            let gx_i = col2im_add(&gcols, c_in, h, w, k, self.stride, self.pad, ho, wo);
            gx.index_axis_mut(ndarray::Axis(0), i).assign(&gx_i);
            for c in 0..oc {
                self.gb[c] += gy_flat.row(c).sum();
            }
        }
        let gw4 = gw2
            .into_shape_with_order((oc, c_in, k, k))
            .expect("gradient reshapes");
        self.gw += &gw4;
        gx
    }

    pub fn zero_grad(&mut self) {
        self.gw.fill(0.0);
        self.gb.fill(0.0);
    }

    pub fn collect<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        out.push(ParamRef {
            name: format!("{prefix}.w"),
            value: self.w.as_slice_mut().unwrap(),
            grad: self.gw.as_slice_mut().unwrap(),
        });
        out.push(ParamRef {
            name: format!("{prefix}.b"),
            value: self.b.as_slice_mut().unwrap(),
            grad: self.gb.as_slice_mut().unwrap(),
        });
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

pub struct ConvTranspose2d {
    /// `(in_channels, out_channels, k, k)` — note the transposed layout.
    pub w: Array4<f64>,
    pub b: Array1<f64>,
    pub gw: Array4<f64>,
    pub gb: Array1<f64>,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvTranspose2dCache {
    x: Array4<f64>,
}

impl ConvTranspose2d {
    pub fn new<R: Rng>(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let mut w = Array4::zeros((in_c, out_c, kernel, kernel));
        // Fan-in of the equivalent forward convolution.
        kaiming_uniform(w.as_slice_mut().unwrap(), in_c * kernel * kernel, rng);
        ConvTranspose2d {
            w,
            b: Array1::zeros(out_c),
            gw: Array4::zeros((in_c, out_c, kernel, kernel)),
            gb: Array1::zeros(out_c),
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_shape(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            convt_out(h, self.kernel, self.stride, self.pad)?,
            convt_out(w, self.kernel, self.stride, self.pad)?,
        ))
    }

    /// `x` is `(batch, in_channels, h, w)`; output spatial extent is
    /// `(h-1)*stride - 2*pad + k` per axis.
    pub fn forward(&self, x: Array4<f64>) -> Result<(Array4<f64>, ConvTranspose2dCache)> {
        let (n, c_in, h, w) = x.dim();
        let (ho, wo) = self.out_shape(h, w)?;
        let (_, oc, k, _) = self.w.dim();
        let w2 = self
            .w
            .view()
            .into_shape_with_order((c_in, oc * k * k))
            .expect("weight is contiguous");
        let mut y = Array4::<f64>::zeros((n, oc, ho, wo));
        for i in 0..n {
            let x_i = x.index_axis(ndarray::Axis(0), i);
            let x_flat = x_i
                .into_shape_with_order((c_in, h * w))
                .expect("input is contiguous");
            let cols = w2.t().dot(&x_flat); // (oc*k*k, h*w)
            let y_i = col2im_add(&cols, oc, ho, wo, k, self.stride, self.pad, h, w);
            let mut dst = y.index_axis_mut(ndarray::Axis(0), i);
            dst.assign(&y_i);
            for c in 0..oc {
                let bias = self.b[c];
                dst.index_axis_mut(ndarray::Axis(0), c)
                    .mapv_inplace(|v| v + bias);
            }
        }
        Ok((y, ConvTranspose2dCache { x }))
    }

    pub fn backward(
        &mut self,
        cache: ConvTranspose2dCache,
        gy: ArrayView4<'_, f64>,
    ) -> Array4<f64> {
        let x = cache.x;
        let (n, c_in, h, w) = x.dim();
        let (_, oc, _ho, _wo) = gy.dim();
        let k = self.kernel;
        let w2 = self
            .w
            .view()
            .into_shape_with_order((c_in, oc * k * k))
            .expect("weight is contiguous");
        let mut gw2 = Array2::<f64>::zeros((c_in, oc * k * k));
        let mut gx = Array4::<f64>::zeros((n, c_in, h, w));
        for i in 0..n {
            let gy_i = gy.index_axis(ndarray::Axis(0), i);
            // The adjoint of the forward scatter is the patch gather.
            let gcols = im2col(gy_i, k, self.stride, self.pad, h, w); // (oc*k*k, h*w)
            let gx_flat = w2.dot(&gcols); // (c_in, h*w)
            let x_i = x.index_axis(ndarray::Axis(0), i);
            let x_flat = x_i
                .into_shape_with_order((c_in, h * w))
                .expect("input is contiguous");
            gw2 += &x_flat.dot(&gcols.t());
            let gx_3 = gx_flat
                .into_shape_with_order((c_in, h, w))
                .expect("gradient reshapes");
            gx.index_axis_mut(ndarray::Axis(0), i).assign(&gx_3);
            for c in 0..oc {
                self.gb[c] += gy_i.index_axis(ndarray::Axis(0), c).sum();
            }
        }
        let gw4 = gw2
            .into_shape_with_order((c_in, oc, k, k))
            .expect("gradient reshapes");
        self.gw += &gw4;
        gx
    }

    pub fn zero_grad(&mut self) {
        self.gw.fill(0.0);
        self.gb.fill(0.0);
    }

    pub fn collect<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        out.push(ParamRef {
            name: format!("{prefix}.w"),
            value: self.w.as_slice_mut().unwrap(),
            grad: self.gw.as_slice_mut().unwrap(),
        });
        out.push(ParamRef {
            name: format!("{prefix}.b"),
            value: self.b.as_slice_mut().unwrap(),
            grad: self.gb.as_slice_mut().unwrap(),
        });
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}
