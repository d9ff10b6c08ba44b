//! Non-overlapping 2x2 max pooling that remembers where each maximum came
//! from, and the matching sparse unpooling used by the decoder.

use std::sync::Arc;

use crate::autograd::{BackwardFn, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Argmax offsets of a 2x2 pooling, one per pooled cell.
///
/// Offset `k` in `0..4` means row `k / 2`, column `k % 2` of the window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    /// Extents of the pooled tensor (`[C,h,w]` or `[N,C,h,w]`).
    shape: Vec<usize>,
    offsets: Arc<Vec<u8>>,
}

impl PoolIndices {
    pub fn new(shape: &[usize], offsets: Vec<u8>) -> Result<Self> {
        if shape.len() < 3 || shape.iter().product::<usize>() != offsets.len() {
            return Err(Error::shape(format!(
                "pool indices {shape:?} do not match {} offsets",
                offsets.len()
            )));
        }
        if offsets.iter().any(|&o| o > 3) {
            return Err(Error::shape("pool offset outside 0..4"));
        }
        Ok(PoolIndices {
            shape: shape.to_vec(),
            offsets: Arc::new(offsets),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn offsets(&self) -> &[u8] {
        &self.offsets
    }
}

/// Flat position in the unpooled `[.., H, W]` tensor of pooled cell `i`.
#[inline]
fn source_position(i: usize, offset: u8, pw: usize, ph: usize) -> usize {
    let plane = ph * pw;
    let (map, cell) = (i / plane, i % plane);
    let (py, px) = (cell / pw, cell % pw);
    let (y, x) = (
        2 * py + (offset as usize >> 1),
        2 * px + (offset as usize & 1),
    );
    map * 4 * plane + y * 2 * pw + x
}

/// 2x2 stride-2 max pooling; ties resolve to the lowest window offset.
pub fn maxpool2x2(g: &mut Graph, x: Var) -> Result<(Var, PoolIndices)> {
    let xv = g.value(x);
    let [n, c, h, w] = xv.nchw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "max pooling needs even extents, got {h}x{w}"
        )));
    }
    let (ph, pw) = (h / 2, w / 2);
    let cells = n * c * ph * pw;
    let mut out = vec![0.0f32; cells];
    let mut offsets = vec![0u8; cells];
    let data = xv.data();
    for i in 0..cells {
        let base = source_position(i, 0, pw, ph);
        let window = [
            data[base],
            data[base + 1],
            data[base + w],
            data[base + w + 1],
        ];
        let mut best = 0;
        for k in 1..4 {
            if window[k] > window[best] {
                best = k;
            }
        }
        out[i] = window[best];
        offsets[i] = best as u8;
    }
    let mut shape = xv.shape().to_vec();
    let rank = shape.len();
    shape[rank - 2] = ph;
    shape[rank - 1] = pw;
    let indices = PoolIndices {
        shape: shape.clone(),
        offsets: Arc::new(offsets),
    };
    let saved = indices.clone();
    let backward: BackwardFn = Box::new(move |gout, inputs, _| {
        let mut dx = vec![0.0f32; inputs[0].len()];
        for (i, (&gv, &off)) in gout.data().iter().zip(saved.offsets.iter()).enumerate() {
            dx[source_position(i, off, pw, ph)] += gv;
        }
        vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), dx))]
    });
    let y = g.record(Tensor::from_parts(shape, out), &[x], backward);
    Ok((y, indices))
}

/// Place each pooled value back at its recorded position; everything else is zero.
pub fn maxunpool2x2(g: &mut Graph, y: Var, indices: &PoolIndices) -> Result<Var> {
    let yv = g.value(y);
    if yv.shape() != indices.shape() {
        return Err(Error::shape(format!(
            "unpool input {:?} does not match indices {:?}",
            yv.shape(),
            indices.shape()
        )));
    }
    let rank = yv.rank();
    let (ph, pw) = (yv.shape()[rank - 2], yv.shape()[rank - 1]);
    let mut shape = yv.shape().to_vec();
    shape[rank - 2] = 2 * ph;
    shape[rank - 1] = 2 * pw;
    let mut out = vec![0.0f32; yv.len() * 4];
    for (i, (&v, &off)) in yv.data().iter().zip(indices.offsets.iter()).enumerate() {
        out[source_position(i, off, pw, ph)] = v;
    }
    let saved = indices.clone();
    let backward: BackwardFn = Box::new(move |gout, inputs, _| {
        let gd = gout.data();
        let dy = saved
            .offsets
            .iter()
            .enumerate()
            .map(|(i, &off)| gd[source_position(i, off, pw, ph)])
            .collect();
        vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), dy))]
    });
    Ok(g.record(Tensor::from_parts(shape, out), &[y], backward))
}
