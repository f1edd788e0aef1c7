//! 2-D convolution and transposed convolution via im2col + GEMM.

use super::{Function, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Geometry of a zero-padded cross-correlation from an `[n, c, h, w]`
/// image to `[n, _, ho, wo]`.
#[derive(Clone, Copy, Debug)]
struct Geom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn new(
        (n, c, h, w): (usize, usize, usize, usize),
        (kh, kw): (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::dim("stride must be positive"));
        }
        let out = |size: usize, k: usize| -> Result<usize> {
            let span = (size + 2 * pad).checked_sub(k).ok_or_else(|| {
                Error::dim(format!(
                    "kernel {k} larger than padded input {size}+2·{pad}"
                ))
            })?;
            if span % stride != 0 {
                return Err(Error::dim(format!(
                    "output size ({size}+2·{pad}-{k})/{stride}+1 is not integral"
                )));
            }
            Ok(span / stride + 1)
        };
        Ok(Geom {
            n,
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho: out(h, kh)?,
            wo: out(w, kw)?,
        })
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }

    /// Input coordinate hit by output `o` and kernel tap `k`, if in bounds.
    #[inline]
    fn src(&self, o: usize, k: usize, size: usize) -> Option<usize> {
        (o * self.stride + k)
            .checked_sub(self.pad)
            .filter(|&i| i < size)
    }
}

/// `[n, c, h, w]` image to `[c·kh·kw, n·ho·wo]` patch matrix.
fn im2col<T: Real>(x: &[T], g: &Geom) -> Vec<T> {
    let (p, hw_out) = (g.cols(), g.ho * g.wo);
    let mut cols = vec![T::zero(); g.rows() * p];
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * p..(row + 1) * p];
                for b in 0..g.n {
                    let plane = &x[(b * g.c + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.ho {
                        let Some(iy) = g.src(oy, i, g.h) else {
                            continue;
                        };
                        let line = &plane[iy * g.w..(iy + 1) * g.w];
                        let out = &mut dst[b * hw_out + oy * g.wo..][..g.wo];
                        for (ox, o) in out.iter_mut().enumerate() {
                            if let Some(ix) = g.src(ox, j, g.w) {
                                *o = line[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters-and-adds patches back into an image.
fn col2im<T: Real>(cols: &[T], g: &Geom) -> Vec<T> {
    let (p, hw_out) = (g.cols(), g.ho * g.wo);
    let mut x = vec![T::zero(); g.n * g.c * g.h * g.w];
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * p..(row + 1) * p];
                for b in 0..g.n {
                    let plane = &mut x[(b * g.c + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.ho {
                        let Some(iy) = g.src(oy, i, g.h) else {
                            continue;
                        };
                        let line = &mut plane[iy * g.w..(iy + 1) * g.w];
                        let vals = &src[b * hw_out + oy * g.wo..][..g.wo];
                        for (ox, v) in vals.iter().enumerate() {
                            if let Some(ix) = g.src(ox, j, g.w) {
                                line[ix] = line[ix] + *v;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[a, b, s] -> [b, a, s]`.
fn swap_leading<T: Real>(x: &[T], a: usize, b: usize, s: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..a {
        for j in 0..b {
            out[(j * a + i) * s..][..s].copy_from_slice(&x[(i * b + j) * s..][..s]);
        }
    }
    out
}

fn channel_sums<T: Real>(grad: &[T], n: usize, c: usize, s: usize) -> Vec<T> {
    let mut db = vec![T::zero(); c];
    for b in 0..n {
        for (ci, d) in db.iter_mut().enumerate() {
            *d = *d + grad[(b * c + ci) * s..][..s].iter().copied().sum::<T>();
        }
    }
    db
}

struct Conv2dFn {
    geom: Geom,
    cout: usize,
}

impl<T: Real> Function<T> for Conv2dFn {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_out: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let g = &self.geom;
        let (k, p) = (g.rows(), g.cols());
        let gy = swap_leading(grad_out, g.n, self.cout, g.ho * g.wo);
        let gx = needs[0].then(|| {
            let mut dcols = vec![T::zero(); k * p];
            T::gemm(
                k,
                self.cout,
                p,
                inputs[1].data(),
                true,
                &gy,
                false,
                &mut dcols,
                false,
            );
            col2im(&dcols, g)
        });
        let gw = needs[1].then(|| {
            let cols = im2col(inputs[0].data(), g);
            let mut dw = vec![T::zero(); self.cout * k];
            T::gemm(self.cout, p, k, &gy, false, &cols, true, &mut dw, false);
            dw
        });
        let mut out = vec![gx, gw];
        if inputs.len() == 3 {
            out.push(needs[2].then(|| channel_sums(grad_out, g.n, self.cout, g.ho * g.wo)));
        }
        out
    }
}

struct ConvTranspose2dFn {
    /// Geometry of the adjoint convolution: output image -> input image.
    geom: Geom,
    cin: usize,
}

impl<T: Real> Function<T> for ConvTranspose2dFn {
    fn name(&self) -> &'static str {
        "conv_transpose2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_out: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let g = &self.geom;
        let (k, p) = (g.rows(), g.cols());
        let dcols = im2col(grad_out, g);
        let gx = needs[0].then(|| {
            let mut dx = vec![T::zero(); self.cin * p];
            T::gemm(
                self.cin,
                k,
                p,
                inputs[1].data(),
                false,
                &dcols,
                false,
                &mut dx,
                false,
            );
            swap_leading(&dx, self.cin, g.n, g.ho * g.wo)
        });
        let gw = needs[1].then(|| {
            let x = swap_leading(inputs[0].data(), g.n, self.cin, g.ho * g.wo);
            let mut dw = vec![T::zero(); self.cin * k];
            T::gemm(self.cin, p, k, &x, false, &dcols, true, &mut dw, false);
            dw
        });
        let mut out = vec![gx, gw];
        if inputs.len() == 3 {
            out.push(needs[2].then(|| channel_sums(grad_out, g.n, g.c, g.h * g.w)));
        }
        out
    }
}

impl<T: Real> Graph<T> {
    /// Zero-padded cross-correlation.
    ///
    /// `input [N, Cin, H, W]`, `weight [Cout, Cin, kh, kw]`, `bias [Cout]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let dims = self.value(input).dims4()?;
        let (cout, cin, kh, kw) = self.value(weight).dims4()?;
        if cin != dims.1 {
            return Err(Error::dim(format!(
                "conv2d: input has {} channels, weight expects {cin}",
                dims.1
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::dim(format!(
                    "conv2d: bias {:?} for {cout} output channels",
                    self.shape(b)
                )));
            }
        }
        let geom = Geom::new(dims, (kh, kw), stride, pad)?;
        let (k, p) = (geom.rows(), geom.cols());
        let cols = im2col(self.value(input).data(), &geom);
        let mut y = vec![T::zero(); cout * p];
        T::gemm(
            cout,
            k,
            p,
            self.value(weight).data(),
            false,
            &cols,
            false,
            &mut y,
            false,
        );
        let hw = geom.ho * geom.wo;
        let mut y = swap_leading(&y, cout, geom.n, hw);
        if let Some(b) = bias {
            add_channel_bias(&mut y, self.value(b).data(), hw);
        }
        let out = Tensor::new(&[geom.n, cout, geom.ho, geom.wo], y)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.record(out, &inputs, Conv2dFn { geom, cout })
    }

    /// Transposed convolution (the adjoint of [`Graph::conv2d`]).
    ///
    /// `input [N, Cin, H, W]`, `weight [Cin, Cout, kh, kw]`, `bias [Cout]`;
    /// output side is `(H - 1)·stride - 2·pad + kh`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, cin, h, w) = self.value(input).dims4()?;
        let (wcin, cout, kh, kw) = self.value(weight).dims4()?;
        if wcin != cin {
            return Err(Error::dim(format!(
                "conv_transpose2d: input has {cin} channels, weight expects {wcin}"
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::dim(format!(
                    "conv_transpose2d: bias {:?} for {cout} output channels",
                    self.shape(b)
                )));
            }
        }
        if stride == 0 {
            return Err(Error::dim("stride must be positive"));
        }
        let size = |s: usize, k: usize| {
            ((s.saturating_sub(1)) * stride + k)
                .checked_sub(2 * pad)
                .filter(|v| *v > 0)
                .ok_or_else(|| Error::dim("conv_transpose2d: padding exceeds output"))
        };
        let (ho, wo) = (size(h, kh)?, size(w, kw)?);
        let geom = Geom::new((n, cout, ho, wo), (kh, kw), stride, pad)?;
        if geom.ho != h || geom.wo != w {
            return Err(Error::dim(
                "conv_transpose2d: inconsistent shape arithmetic",
            ));
        }
        let (k, p) = (geom.rows(), geom.cols());
        let x = swap_leading(self.value(input).data(), n, cin, h * w);
        let mut cols = vec![T::zero(); k * p];
        T::gemm(
            k,
            cin,
            p,
            self.value(weight).data(),
            true,
            &x,
            false,
            &mut cols,
            false,
        );
        let mut y = col2im(&cols, &geom);
        if let Some(b) = bias {
            add_channel_bias(&mut y, self.value(b).data(), ho * wo);
        }
        let out = Tensor::new(&[n, cout, ho, wo], y)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.record(out, &inputs, ConvTranspose2dFn { geom, cin })
    }
}

fn add_channel_bias<T: Real>(y: &mut [T], bias: &[T], hw: usize) {
    let c = bias.len();
    for (i, plane) in y.chunks_mut(hw).enumerate() {
        let b = bias[i % c];
        plane.iter_mut().for_each(|v| *v = *v + b);
    }
}
