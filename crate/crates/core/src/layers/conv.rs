//! 3x3, stride 1, zero-padding 1 convolution.
//!
//! Forward and adjoints go through im2col and a single-precision GEMM per
//! image. Weight gradients are accumulated image by image in batch order.

use crate::autograd::{BackwardFn, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

/// A convolution layer's shape and its parameters (`weight [out,in,3,3]`, `bias [out]`).
#[derive(Clone, Debug)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvSpec {
    /// Registers `{name}.weight` and `{name}.bias`; weights drawn from
    /// N(0, 2/fan_in), bias zero.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::shape("convolution channels must be positive"));
        }
        let fan_in = (in_channels * TAPS) as f32;
        let std = (2.0 / fan_in).sqrt();
        let n = out_channels * in_channels * TAPS;
        let w: Vec<f32> = (0..n).map(|_| rng.normal() * std).collect();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::new(&[out_channels, in_channels, KERNEL, KERNEL], w)?,
            true,
        )?;
        let bias = store.add(
            format!("{name}.bias"),
            Tensor::zeros(&[out_channels])?,
            false,
        )?;
        Ok(ConvSpec {
            in_channels,
            out_channels,
            weight,
            bias,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        conv2d(g, x, w, b)
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * TAPS + self.out_channels
    }
}

/// `c = a·b + beta·c` for row-major / strided operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (usize, usize),
    b: &[f32],
    b_strides: (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    let span =
        |rows: usize, cols: usize, (rs, cs): (usize, usize)| (rows - 1) * rs + (cols - 1) * cs + 1;
    assert!(a.len() >= span(m, k, a_strides));
    assert!(b.len() >= span(k, n, b_strides));
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfold one `[C,H,W]` image into `[C*9, H*W]` patch columns.
fn im2col(x: &[f32], c: usize, h: usize, w: usize, cols: &mut [f32]) {
    let plane = h * w;
    for ci in 0..c {
        let src = &x[ci * plane..(ci + 1) * plane];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &mut cols[((ci * TAPS) + ky * KERNEL + kx) * plane..][..plane];
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = 0.0;
                            dst[1..].copy_from_slice(&srow[..w - 1]);
                        }
                        1 => dst.copy_from_slice(srow),
                        _ => {
                            dst[..w - 1].copy_from_slice(&srow[1..]);
                            dst[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into `[C,H,W]`.
fn col2im(cols: &[f32], c: usize, h: usize, w: usize, dx: &mut [f32]) {
    let plane = h * w;
    for ci in 0..c {
        let dst = &mut dx[ci * plane..(ci + 1) * plane];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &cols[((ci * TAPS) + ky * KERNEL + kx) * plane..][..plane];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let drow = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            for (d, s) in drow[..w - 1].iter_mut().zip(&src[1..]) {
                                *d += s;
                            }
                        }
                        1 => {
                            for (d, s) in drow.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                        _ => {
                            for (d, s) in drow[1..].iter_mut().zip(&src[..w - 1]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x` (`[C,H,W]` or `[N,C,H,W]`) with `w [O,C,3,3]` plus `b [O]`.
pub fn conv2d(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let xv = g.value(x);
    let wv = g.value(w);
    let bv = g.value(b);
    let [n, cin, h, wd] = xv.nchw()?;
    let (cout, wcin) = match *wv.shape() {
        [o, i, KERNEL, KERNEL] => (o, i),
        _ => {
            return Err(Error::shape(format!(
                "conv weight must be [out,in,3,3], got {:?}",
                wv.shape()
            )))
        }
    };
    if wcin != cin {
        return Err(Error::shape(format!(
            "conv expects {wcin} input channels, got {cin}"
        )));
    }
    if bv.shape() != [cout] {
        return Err(Error::shape(format!(
            "conv bias must be [{cout}], got {:?}",
            bv.shape()
        )));
    }
    let plane = h * wd;
    let k = cin * TAPS;
    let mut out = vec![0.0f32; n * cout * plane];
    let mut cols = vec![0.0f32; k * plane];
    for img in 0..n {
        im2col(
            &xv.data()[img * cin * plane..][..cin * plane],
            cin,
            h,
            wd,
            &mut cols,
        );
        let dst = &mut out[img * cout * plane..][..cout * plane];
        gemm(
            cout,
            k,
            plane,
            wv.data(),
            (k, 1),
            &cols,
            (plane, 1),
            0.0,
            dst,
        );
        for (co, &bias) in bv.data().iter().enumerate() {
            for v in &mut dst[co * plane..(co + 1) * plane] {
                *v += bias;
            }
        }
    }
    let mut shape = xv.shape().to_vec();
    let rank = shape.len();
    shape[rank - 3] = cout;
    let out = Tensor::from_parts(shape, out);

    let backward: BackwardFn = Box::new(move |gout, inputs, _| {
        let (xv, wv) = (inputs[0], inputs[1]);
        let gd = gout.data();
        let mut dx = vec![0.0f32; n * cin * plane];
        let mut dw = vec![0.0f32; cout * k];
        let mut db = vec![0.0f32; cout];
        let mut cols = vec![0.0f32; k * plane];
        let mut dcols = vec![0.0f32; k * plane];
        for img in 0..n {
            let go = &gd[img * cout * plane..][..cout * plane];
            im2col(
                &xv.data()[img * cin * plane..][..cin * plane],
                cin,
                h,
                wd,
                &mut cols,
            );
            // dW += dOut · colsᵀ
            gemm(
                cout,
                plane,
                k,
                go,
                (plane, 1),
                &cols,
                (1, plane),
                1.0,
                &mut dw,
            );
            for (co, acc) in db.iter_mut().enumerate() {
                *acc += go[co * plane..(co + 1) * plane].iter().sum::<f32>();
            }
            // dCols = Wᵀ · dOut
            gemm(
                k,
                cout,
                plane,
                wv.data(),
                (1, k),
                go,
                (plane, 1),
                0.0,
                &mut dcols,
            );
            col2im(
                &dcols,
                cin,
                h,
                wd,
                &mut dx[img * cin * plane..][..cin * plane],
            );
        }
        vec![
            Some(Tensor::from_parts(xv.shape().to_vec(), dx)),
            Some(Tensor::from_parts(wv.shape().to_vec(), dw)),
            Some(Tensor::from_parts(vec![cout], db)),
        ]
    });
    Ok(g.record(out, &[x, w, b], backward))
}
