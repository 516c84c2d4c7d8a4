//! im2col lowering for stride-1 2-D cross-correlation.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Output positions across the batch.
    pub fn positions(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Kernel taps per output channel.
    pub fn taps(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    /// For tap column `j`, the output columns `[lo, hi)` that read inside the
    /// input row, and the input column of `lo`.
    #[inline]
    fn x_span(&self, j: usize) -> (usize, usize, usize) {
        let lo = self.pad_w.saturating_sub(j);
        let hi = (self.width + self.pad_w).saturating_sub(j).min(self.out_w);
        (lo, hi.max(lo), lo + j - self.pad_w)
    }

    #[inline]
    fn y_source(&self, oy: usize, i: usize) -> Option<usize> {
        let y = (oy + i).checked_sub(self.pad_h)?;
        (y < self.height).then_some(y)
    }
}

/// Lowered input, tap-major: `[taps, positions]` with positions ordered `(n, oy, ox)`.
pub(crate) fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let r = g.positions();
    let mut col = vec![0.0; g.taps() * r];
    let plane = g.height * g.width;
    for c in 0..g.in_ch {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let k = (c * g.kh + i) * g.kw + j;
                let dst = &mut col[k * r..(k + 1) * r];
                let (lo, hi, x0) = g.x_span(j);
                for n in 0..g.batch {
                    let base = (n * g.in_ch + c) * plane;
                    for oy in 0..g.out_h {
                        if let Some(y) = g.y_source(oy, i) {
                            let d = (n * g.out_h + oy) * g.out_w;
                            let s = base + y * g.width + x0;
                            dst[d + lo..d + hi].copy_from_slice(&input[s..s + hi - lo]);
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-adds a lowered gradient back onto the input layout.
pub(crate) fn col2im(col: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let r = g.positions();
    let plane = g.height * g.width;
    for c in 0..g.in_ch {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let k = (c * g.kh + i) * g.kw + j;
                let src = &col[k * r..(k + 1) * r];
                let (lo, hi, x0) = g.x_span(j);
                for n in 0..g.batch {
                    let base = (n * g.in_ch + c) * plane;
                    for oy in 0..g.out_h {
                        if let Some(y) = g.y_source(oy, i) {
                            let d = (n * g.out_h + oy) * g.out_w;
                            let s = base + y * g.width + x0;
                            for (o, v) in out[s..s + hi - lo].iter_mut().zip(&src[d + lo..d + hi]) {
                                *o += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[O, N, H*W]` to `[N, O, H*W]`.
pub(crate) fn channel_major_to_nchw(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    swap_outer(x, g.out_ch, g.batch, g.out_h * g.out_w)
}

/// `[N, O, H*W]` to `[O, N, H*W]`.
pub(crate) fn nchw_to_channel_major(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    swap_outer(x, g.batch, g.out_ch, g.out_h * g.out_w)
}

fn swap_outer(x: &[f64], a: usize, b: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for p in 0..a {
        for q in 0..b {
            let src = &x[(p * b + q) * inner..(p * b + q + 1) * inner];
            out[(q * a + p) * inner..(q * a + p + 1) * inner].copy_from_slice(src);
        }
    }
    out
}
