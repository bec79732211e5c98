//! Spatial operations on `[N, C, H, W]` tensors.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::tape::Var;
use crate::numerics::tensor::Tensor;

/// Output length of a strided, padded window sweep.
pub fn conv_output_len(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Half-open range of output positions whose tap at `offset` lands inside the input.
fn valid_range(
    out_len: usize,
    in_len: usize,
    offset: usize,
    stride: usize,
    padding: usize,
) -> (usize, usize) {
    let lo = if padding > offset {
        (padding - offset).div_ceil(stride)
    } else {
        0
    };
    let last = in_len as isize - 1 + padding as isize - offset as isize;
    if last < 0 {
        return (0, 0);
    }
    let hi = out_len.min(last as usize / stride + 1);
    (lo.min(hi), hi)
}

fn dims4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    match t.shape() {
        &[a, b, c, d] => Ok([a, b, c, d]),
        s => Err(Error::shape(format!("{what} must be rank 4, got {s:?}"))),
    }
}

/// Geometry shared by the forward and backward sweeps of one convolution.
#[derive(Clone, Copy)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    /// Calls `f(ky, kx, oy, iy, ox_lo, ox_hi, ix_lo)` for every in-bounds kernel row.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize, usize)) {
        for ky in 0..self.kh {
            let (oy_lo, oy_hi) = valid_range(self.oh, self.h, ky, self.stride, self.padding);
            for kx in 0..self.kw {
                let (ox_lo, ox_hi) = valid_range(self.ow, self.w, kx, self.stride, self.padding);
                if ox_lo >= ox_hi {
                    continue;
                }
                let ix_lo = ox_lo * self.stride + kx - self.padding;
                for oy in oy_lo..oy_hi {
                    let iy = oy * self.stride + ky - self.padding;
                    f(ky, kx, oy, iy, ox_lo, ox_hi, ix_lo);
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    /// 2-D cross-correlation of `[N, Cin, H, W]` with `[Cout, Cin, kh, kw]`.
    pub fn conv2d(
        self,
        kernel: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t>> {
        self.same_tape(&kernel)?;
        if let Some(b) = &bias {
            self.same_tape(b)?;
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be positive"));
        }
        let x = self.value();
        let k = kernel.value();
        let [n, cin, h, w] = dims4(&x, "conv2d input")?;
        let [cout, kcin, kh, kw] = dims4(&k, "conv2d kernel")?;
        if kcin != cin {
            return Err(Error::shape(format!(
                "conv2d: input has {cin} channels but kernel {:?} expects {kcin}",
                k.shape()
            )));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(format!(
                "conv2d: padded input {}x{} smaller than kernel {kh}x{kw}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let bias_value = match &bias {
            Some(b) => {
                let bv = b.value();
                if bv.shape() != [cout] {
                    return Err(Error::shape(format!(
                        "conv2d: bias shape {:?} does not match {cout} output channels",
                        bv.shape()
                    )));
                }
                Some(bv)
            }
            None => None,
        };
        let g = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            oh: conv_output_len(h, kh, stride, padding),
            ow: conv_output_len(w, kw, stride, padding),
            stride,
            padding,
        };
        let out = conv_forward(&g, x.data(), k.data(), bias_value.as_deref().map(|b| b.data()));
        let ids: Vec<usize> = std::iter::once(self.id())
            .chain(std::iter::once(kernel.id()))
            .chain(bias.map(|b| b.id()))
            .collect();
        let (ix, ik) = (self.id(), kernel.id());
        let ib = bias.map(|b| b.id());
        Ok(self.tape().push_op(
            Rc::new(Tensor::from_raw(vec![n, cout, g.oh, g.ow], out)),
            &ids,
            Box::new(move |grad, sink| {
                if sink.wants(ix) {
                    conv_backward_input(&g, grad, k.data(), sink.slot(ix));
                }
                if sink.wants(ik) {
                    conv_backward_kernel(&g, grad, x.data(), sink.slot(ik));
                }
                if let Some(ib) = ib.filter(|&ib| sink.wants(ib)) {
                    let plane = g.oh * g.ow;
                    let slot = sink.slot(ib);
                    for b in 0..g.n {
                        for (co, s) in slot.iter_mut().enumerate() {
                            let start = (b * g.cout + co) * plane;
                            *s += grad[start..start + plane].iter().sum::<f64>();
                        }
                    }
                }
            }),
        ))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(self, factor: usize) -> Result<Var<'t>> {
        if factor == 0 {
            return Err(Error::invalid("upsample_nearest: factor must be at least 1"));
        }
        let x = self.value();
        let [n, c, h, w] = dims4(&x, "upsample_nearest input")?;
        let (oh, ow) = (h * factor, w * factor);
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &x.data()[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for oy in 0..oh {
                let row = &src[(oy / factor) * w..(oy / factor + 1) * w];
                for ox in 0..ow {
                    dst[oy * ow + ox] = row[ox / factor];
                }
            }
        }
        let id = self.id();
        Ok(self.tape().push_op(
            Rc::new(Tensor::from_raw(vec![n, c, oh, ow], out)),
            &[id],
            Box::new(move |g, sink| {
                let slot = sink.slot(id);
                for plane in 0..n * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            slot[plane * h * w + (oy / factor) * w + ox / factor] +=
                                g[plane * oh * ow + oy * ow + ox];
                        }
                    }
                }
            }),
        ))
    }

    /// Non-overlapping average pooling with a square window.
    pub fn avg_pool2d(self, size: usize) -> Result<Var<'t>> {
        let x = self.value();
        let [n, c, h, w] = dims4(&x, "avg_pool2d input")?;
        if size == 0 || h % size != 0 || w % size != 0 {
            return Err(Error::shape(format!(
                "avg_pool2d: {h}x{w} not divisible by window {size}"
            )));
        }
        let (oh, ow) = (h / size, w / size);
        let inv = 1.0 / (size * size) as f64;
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            for y in 0..h {
                for xx in 0..w {
                    out[plane * oh * ow + (y / size) * ow + xx / size] +=
                        x.data()[plane * h * w + y * w + xx] * inv;
                }
            }
        }
        let id = self.id();
        Ok(self.tape().push_op(
            Rc::new(Tensor::from_raw(vec![n, c, oh, ow], out)),
            &[id],
            Box::new(move |g, sink| {
                let slot = sink.slot(id);
                for plane in 0..n * c {
                    for y in 0..h {
                        for xx in 0..w {
                            slot[plane * h * w + y * w + xx] +=
                                g[plane * oh * ow + (y / size) * ow + xx / size] * inv;
                        }
                    }
                }
            }),
        ))
    }
}

/// Per-pixel class indices interpreted as a one-hot `[1, classes, H, W]` input.
#[derive(Clone, Copy, Debug)]
pub struct OneHotMap<'a> {
    pub classes: &'a [u8],
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
}

impl OneHotMap<'_> {
    /// Dense one-hot expansion, `[1, num_classes, H, W]`.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.height * self.width;
        let mut data = vec![0.0; self.num_classes * plane];
        for (p, &c) in self.classes.iter().enumerate() {
            data[c as usize * plane + p] = 1.0;
        }
        Tensor::from_raw(vec![1, self.num_classes, self.height, self.width], data)
    }
}

/// Stride-1 convolution of a one-hot class map, evaluated as a gather over the
/// kernel. Equal to `conv2d` on [`OneHotMap::to_tensor`]; the map itself is
/// constant, so only `kernel` and `bias` receive gradients.
pub fn conv2d_onehot<'t>(
    map: OneHotMap<'_>,
    kernel: Var<'t>,
    bias: Option<Var<'t>>,
    padding: usize,
) -> Result<Var<'t>> {
    let k = kernel.value();
    let [cout, kc, kh, kw] = dims4(&k, "conv2d_onehot kernel")?;
    let (h, w) = (map.height, map.width);
    if kc != map.num_classes {
        return Err(Error::shape(format!(
            "conv2d_onehot: kernel expects {kc} classes, map has {}",
            map.num_classes
        )));
    }
    if map.classes.len() != h * w {
        return Err(Error::shape(format!(
            "conv2d_onehot: {} class entries for a {h}x{w} map",
            map.classes.len()
        )));
    }
    if let Some(&bad) = map.classes.iter().find(|&&c| c as usize >= kc) {
        return Err(Error::invalid(format!("conv2d_onehot: class {bad} >= {kc}")));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::shape("conv2d_onehot: padded map smaller than kernel"));
    }
    if let Some(b) = &bias {
        kernel.same_tape(b)?;
        if b.value().shape() != [cout] {
            return Err(Error::shape("conv2d_onehot: bias length mismatch"));
        }
    }
    let g = ConvGeom {
        n: 1,
        cin: kc,
        h,
        w,
        cout,
        kh,
        kw,
        oh: conv_output_len(h, kh, 1, padding),
        ow: conv_output_len(w, kw, 1, padding),
        stride: 1,
        padding,
    };
    let plane = g.oh * g.ow;
    let classes: Rc<[u8]> = Rc::from(map.classes);
    let mut out = vec![0.0; cout * plane];
    for co in 0..cout {
        let dst = &mut out[co * plane..(co + 1) * plane];
        if let Some(b) = &bias {
            dst.fill(b.value().data()[co]);
        }
        let kbase = co * kc * kh * kw;
        g.for_each_tap(|ky, kx, oy, iy, ox_lo, ox_hi, ix_lo| {
            let row = &classes[iy * w + ix_lo..iy * w + ix_lo + (ox_hi - ox_lo)];
            let tap = kbase + ky * kw + kx;
            for (o, &c) in dst[oy * g.ow + ox_lo..oy * g.ow + ox_hi].iter_mut().zip(row) {
                *o += k.data()[tap + c as usize * kh * kw];
            }
        });
    }
    let ids: Vec<usize> = std::iter::once(kernel.id()).chain(bias.map(|b| b.id())).collect();
    let ik = kernel.id();
    let ib = bias.map(|b| b.id());
    Ok(kernel.tape().push_op(
        Rc::new(Tensor::from_raw(vec![1, cout, g.oh, g.ow], out)),
        &ids,
        Box::new(move |grad, sink| {
            if sink.wants(ik) {
                let slot = sink.slot(ik);
                for co in 0..cout {
                    let src = &grad[co * plane..(co + 1) * plane];
                    let kbase = co * kc * kh * kw;
                    g.for_each_tap(|ky, kx, oy, iy, ox_lo, ox_hi, ix_lo| {
                        let row = &classes[iy * w + ix_lo..iy * w + ix_lo + (ox_hi - ox_lo)];
                        let tap = kbase + ky * kw + kx;
                        for (gv, &c) in src[oy * g.ow + ox_lo..oy * g.ow + ox_hi].iter().zip(row) {
                            slot[tap + c as usize * kh * kw] += gv;
                        }
                    });
                }
            }
            if let Some(ib) = ib.filter(|&ib| sink.wants(ib)) {
                let slot = sink.slot(ib);
                for (co, s) in slot.iter_mut().enumerate() {
                    *s += grad[co * plane..(co + 1) * plane].iter().sum::<f64>();
                }
            }
        }),
    ))
}

fn conv_forward(g: &ConvGeom, x: &[f64], k: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    let ksize = g.kh * g.kw;
    let mut out = vec![0.0; g.n * g.cout * out_plane];
    for b in 0..g.n {
        for co in 0..g.cout {
            let dst = &mut out[(b * g.cout + co) * out_plane..(b * g.cout + co + 1) * out_plane];
            if let Some(bias) = bias {
                dst.fill(bias[co]);
            }
            for ci in 0..g.cin {
                let src = &x[(b * g.cin + ci) * in_plane..(b * g.cin + ci + 1) * in_plane];
                let kern = &k[(co * g.cin + ci) * ksize..(co * g.cin + ci + 1) * ksize];
                g.for_each_tap(|ky, kx, oy, iy, ox_lo, ox_hi, ix_lo| {
                    let wv = kern[ky * g.kw + kx];
                    let drow = &mut dst[oy * g.ow + ox_lo..oy * g.ow + ox_hi];
                    let srow = &src[iy * g.w..(iy + 1) * g.w];
                    if g.stride == 1 {
                        for (o, s) in drow.iter_mut().zip(&srow[ix_lo..]) {
                            *o += wv * s;
                        }
                    } else {
                        for (j, o) in drow.iter_mut().enumerate() {
                            *o += wv * srow[ix_lo + j * g.stride];
                        }
                    }
                });
            }
        }
    }
    out
}

fn conv_backward_input(g: &ConvGeom, grad: &[f64], k: &[f64], dx: &mut [f64]) {
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    let ksize = g.kh * g.kw;
    for b in 0..g.n {
        for co in 0..g.cout {
            let src = &grad[(b * g.cout + co) * out_plane..(b * g.cout + co + 1) * out_plane];
            for ci in 0..g.cin {
                let dst = &mut dx[(b * g.cin + ci) * in_plane..(b * g.cin + ci + 1) * in_plane];
                let kern = &k[(co * g.cin + ci) * ksize..(co * g.cin + ci + 1) * ksize];
                g.for_each_tap(|ky, kx, oy, iy, ox_lo, ox_hi, ix_lo| {
                    let wv = kern[ky * g.kw + kx];
                    let grow = &src[oy * g.ow + ox_lo..oy * g.ow + ox_hi];
                    let drow = &mut dst[iy * g.w..(iy + 1) * g.w];
                    if g.stride == 1 {
                        for (d, gv) in drow[ix_lo..].iter_mut().zip(grow) {
                            *d += wv * gv;
                        }
                    } else {
                        for (j, gv) in grow.iter().enumerate() {
                            drow[ix_lo + j * g.stride] += wv * gv;
                        }
                    }
                });
            }
        }
    }
}

fn conv_backward_kernel(g: &ConvGeom, grad: &[f64], x: &[f64], dk: &mut [f64]) {
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    let ksize = g.kh * g.kw;
    for b in 0..g.n {
        for co in 0..g.cout {
            let src = &grad[(b * g.cout + co) * out_plane..(b * g.cout + co + 1) * out_plane];
            for ci in 0..g.cin {
                let inp = &x[(b * g.cin + ci) * in_plane..(b * g.cin + ci + 1) * in_plane];
                let kern = &mut dk[(co * g.cin + ci) * ksize..(co * g.cin + ci + 1) * ksize];
                g.for_each_tap(|ky, kx, oy, iy, ox_lo, ox_hi, ix_lo| {
                    let grow = &src[oy * g.ow + ox_lo..oy * g.ow + ox_hi];
                    let irow = &inp[iy * g.w..(iy + 1) * g.w];
                    let acc: f64 = if g.stride == 1 {
                        grow.iter().zip(&irow[ix_lo..]).map(|(a, b)| a * b).sum()
                    } else {
                        grow.iter()
                            .enumerate()
                            .map(|(j, a)| a * irow[ix_lo + j * g.stride])
                            .sum()
                    };
                    kern[ky * g.kw + kx] += acc;
                });
            }
        }
    }
}
