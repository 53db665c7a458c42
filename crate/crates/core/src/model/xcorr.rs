//! Depth-wise cross-correlation: every channel of the search features is
//! correlated with the matching channel of the template kernel.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Valid (unpadded) per-channel correlation of `search` (`C x S x S`) with
/// `kernel` (`C x K x K`), producing `C x (S-K+1) x (S-K+1)`.
pub fn depthwise_xcorr(search: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (c, sh, sw) = search.shape();
    let (kc, kh, kw) = kernel.shape();
    if c != kc {
        return Err(Error::Shape(format!(
            "xcorr channel mismatch: search {c}, kernel {kc}"
        )));
    }
    if kh > sh || kw > sw || kh == 0 || kw == 0 {
        return Err(Error::Shape(format!(
            "xcorr kernel {kh}x{kw} larger than search {sh}x{sw}"
        )));
    }
    let (oh, ow) = (sh - kh + 1, sw - kw + 1);
    let mut out = Tensor::zeros(c, oh, ow);
    for ch in 0..c {
        let s = search.plane(ch);
        let k = kernel.plane(ch);
        let o = out.plane_mut(ch);
        for u in 0..kh {
            for v in 0..kw {
                let kv = k[u * kw + v];
                for y in 0..oh {
                    let src = &s[(y + u) * sw + v..(y + u) * sw + v + ow];
                    let dst = &mut o[y * ow..(y + 1) * ow];
                    for (d, &sv) in dst.iter_mut().zip(src) {
                        *d += kv * sv;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`depthwise_xcorr`] with respect to the search features and
/// the kernel.
pub fn depthwise_xcorr_backward(search: &Tensor, kernel: &Tensor, grad: &Tensor) -> (Tensor, Tensor) {
    let (c, sh, sw) = search.shape();
    let (_, kh, kw) = kernel.shape();
    let (oh, ow) = (grad.height(), grad.width());
    let mut dsearch = Tensor::zeros(c, sh, sw);
    let mut dkernel = Tensor::zeros(c, kh, kw);
    for ch in 0..c {
        let s = search.plane(ch);
        let k = kernel.plane(ch);
        let g = grad.plane(ch);
        let ds = dsearch.plane_mut(ch);
        for u in 0..kh {
            for v in 0..kw {
                let kv = k[u * kw + v];
                let mut acc = 0.0f32;
                for y in 0..oh {
                    let row = (y + u) * sw + v;
                    let gr = &g[y * ow..(y + 1) * ow];
                    let sr = &s[row..row + ow];
                    acc += gr.iter().zip(sr).map(|(a, b)| a * b).sum::<f32>();
                    for (d, &gv) in ds[row..row + ow].iter_mut().zip(gr) {
                        *d += kv * gv;
                    }
                }
                *dkernel.at_mut(ch, u, v) = acc;
            }
        }
    }
    (dsearch, dkernel)
}
