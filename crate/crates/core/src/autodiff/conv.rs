//! 3D convolution, transposed convolution, and max pooling.
//!
//! Single-sample layout `(channels, depth, height, width)`, w contiguous.
//! All accumulation happens in f64 scratch buffers; the stride-1 inner loops
//! are shaped as contiguous axpy/dot over the w axis so they autovectorize.

use super::{bad_arg, shape_err, AdError, Op, Scalar, Tape, TensorId};

/// `floor((size + 2 pad - kernel) / stride) + 1`.
pub fn conv_output_size(size: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (size + 2 * padding - kernel) / stride + 1
}

/// `(size - 1) stride - 2 pad + kernel`.
pub fn conv_transpose_output_size(
    size: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> usize {
    (size - 1) * stride + kernel - 2 * padding
}

struct ConvDims {
    c_in: usize,
    c_out: usize,
    k: usize,
    d_in: [usize; 3],
    d_out: [usize; 3],
}

impl<F: Scalar> Tape<F> {
    fn conv_dims(
        &self,
        op: &'static str,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: usize,
        padding: usize,
        transpose: bool,
    ) -> Result<ConvDims, AdError> {
        let xs = &self.nodes[x.0].shape;
        let ws = &self.nodes[w.0].shape;
        if xs.len() != 4 {
            return Err(bad_arg(op, format!("input must be (c, d, h, w), got {xs:?}")));
        }
        if ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(bad_arg(op, format!("weights must be cubic 5-d, got {ws:?}")));
        }
        if stride == 0 {
            return Err(bad_arg(op, "stride must be positive"));
        }
        // Convolution weights are (c_out, c_in, k, k, k); transposed
        // convolution weights are (c_in, c_out, k, k, k).
        let (c_out, c_in) = if transpose { (ws[1], ws[0]) } else { (ws[0], ws[1]) };
        if xs[0] != c_in {
            return Err(shape_err(op, xs, ws));
        }
        let k = ws[2];
        let d_in = [xs[1], xs[2], xs[3]];
        let mut d_out = [0usize; 3];
        for a in 0..3 {
            if transpose {
                d_out[a] = conv_transpose_output_size(d_in[a], k, stride, padding);
            } else {
                if d_in[a] + 2 * padding < k {
                    return Err(bad_arg(
                        op,
                        format!("kernel {k} exceeds padded input {}", d_in[a] + 2 * padding),
                    ));
                }
                d_out[a] = conv_output_size(d_in[a], k, stride, padding);
            }
        }
        if let Some(b) = b {
            let bs = &self.nodes[b.0].shape;
            if bs != &[c_out] {
                return Err(shape_err(op, bs, &[c_out]));
            }
        }
        Ok(ConvDims {
            c_in,
            c_out,
            k,
            d_in,
            d_out,
        })
    }

    /// 3D convolution with cubic kernel, symmetric zero padding.
    /// Output spatial size is `floor((in + 2 pad - k) / stride) + 1`.
    pub fn conv3d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId, AdError> {
        let dims = self.conv_dims("conv3d", x, w, b, stride, padding, false)?;
        let ConvDims {
            c_in,
            c_out,
            k,
            d_in,
            d_out,
        } = dims;
        let [di, hi, wi] = d_in;
        let [do_, ho, wo] = d_out;
        let out_spatial = do_ * ho * wo;
        let mut acc = vec![0.0f64; c_out * out_spatial];
        if let Some(b) = b {
            for (co, &bias) in self.nodes[b.0].values.iter().enumerate() {
                acc[co * out_spatial..(co + 1) * out_spatial].fill(bias.to_f64());
            }
        }
        let xv = &self.nodes[x.0].values;
        let wv = &self.nodes[w.0].values;
        let p = padding as isize;
        let s = stride as isize;
        for co in 0..c_out {
            for ci in 0..c_in {
                let x_ch = &xv[ci * di * hi * wi..(ci + 1) * di * hi * wi];
                let w_ch = &wv[(co * c_in + ci) * k * k * k..(co * c_in + ci + 1) * k * k * k];
                for kd in 0..k {
                    for kh in 0..k {
                        for kw in 0..k {
                            let weight = w_ch[(kd * k + kh) * k + kw].to_f64();
                            if weight == 0.0 {
                                continue;
                            }
                            for od in 0..do_ {
                                let id = od as isize * s - p + kd as isize;
                                if id < 0 || id >= di as isize {
                                    continue;
                                }
                                for oh in 0..ho {
                                    let ih = oh as isize * s - p + kh as isize;
                                    if ih < 0 || ih >= hi as isize {
                                        continue;
                                    }
                                    let x_row =
                                        &x_ch[(id as usize * hi + ih as usize) * wi..][..wi];
                                    let acc_row =
                                        &mut acc[co * out_spatial + (od * ho + oh) * wo..][..wo];
                                    // Valid ow range: 0 <= ow*s - p + kw < wi.
                                    let off = kw as isize - p;
                                    if s == 1 {
                                        let lo = (-off).max(0) as usize;
                                        let hi_ow = (wi as isize - off).min(wo as isize).max(0)
                                            as usize;
                                        let src = &x_row[(lo as isize + off) as usize..];
                                        for (a, &xv) in acc_row[lo..hi_ow]
                                            .iter_mut()
                                            .zip(&src[..hi_ow - lo])
                                        {
                                            *a += weight * xv.to_f64();
                                        }
                                    } else {
                                        for (ow, a) in acc_row.iter_mut().enumerate() {
                                            let iw = ow as isize * s + off;
                                            if iw >= 0 && iw < wi as isize {
                                                *a += weight * x_row[iw as usize].to_f64();
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let values = acc.iter().map(|&v| F::from_f64(v)).collect();
        Ok(self.push(
            vec![c_out, do_, ho, wo],
            values,
            &[x, w, b.unwrap_or(x)],
            Op::Conv3d {
                x,
                w,
                b,
                stride,
                padding,
            },
        ))
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn bw_conv3d(
        &self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: usize,
        padding: usize,
        gout: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let dims = self
            .conv_dims("conv3d", x, w, b, stride, padding, false)
            .expect("shapes already validated in forward");
        let ConvDims {
            c_in,
            c_out,
            k,
            d_in,
            d_out,
        } = dims;
        let [di, hi, wi] = d_in;
        let [do_, ho, wo] = d_out;
        let out_spatial = do_ * ho * wo;
        let in_spatial = di * hi * wi;
        let xv = &self.nodes[x.0].values;
        let wv = &self.nodes[w.0].values;
        let p = padding as isize;
        let s = stride as isize;

        if let Some(b) = b {
            if self.needs_grad(b) {
                let mut db = vec![0.0f64; c_out];
                for co in 0..c_out {
                    db[co] = gout[co * out_spatial..(co + 1) * out_spatial]
                        .iter()
                        .map(|g| g.to_f64())
                        .sum();
                }
                super::add_to_f64(&mut grads[b.0], &db);
            }
        }

        let need_x = self.needs_grad(x);
        let need_w = self.needs_grad(w);
        if !need_x && !need_w {
            return;
        }
        let mut dx = if need_x { vec![0.0f64; xv.len()] } else { Vec::new() };
        let mut dw = if need_w { vec![0.0f64; wv.len()] } else { Vec::new() };

        for co in 0..c_out {
            let g_ch = &gout[co * out_spatial..(co + 1) * out_spatial];
            for ci in 0..c_in {
                let x_ch = &xv[ci * in_spatial..(ci + 1) * in_spatial];
                let w_base = (co * c_in + ci) * k * k * k;
                for kd in 0..k {
                    for kh in 0..k {
                        for kw in 0..k {
                            let weight = wv[w_base + (kd * k + kh) * k + kw].to_f64();
                            let mut wsum = 0.0f64;
                            for od in 0..do_ {
                                let id = od as isize * s - p + kd as isize;
                                if id < 0 || id >= di as isize {
                                    continue;
                                }
                                for oh in 0..ho {
                                    let ih = oh as isize * s - p + kh as isize;
                                    if ih < 0 || ih >= hi as isize {
                                        continue;
                                    }
                                    let row_in = (id as usize * hi + ih as usize) * wi;
                                    let g_row = &g_ch[(od * ho + oh) * wo..][..wo];
                                    let off = kw as isize - p;
                                    if s == 1 {
                                        let lo = (-off).max(0) as usize;
                                        let hi_ow = (wi as isize - off).min(wo as isize).max(0)
                                            as usize;
                                        if lo >= hi_ow {
                                            continue;
                                        }
                                        let in_lo = (lo as isize + off) as usize;
                                        if need_w {
                                            let x_row = &x_ch[row_in + in_lo..][..hi_ow - lo];
                                            for (g, &xval) in
                                                g_row[lo..hi_ow].iter().zip(x_row)
                                            {
                                                wsum += g.to_f64() * xval.to_f64();
                                            }
                                        }
                                        if need_x {
                                            let dx_row =
                                                &mut dx[ci * in_spatial + row_in + in_lo..]
                                                    [..hi_ow - lo];
                                            for (d, g) in
                                                dx_row.iter_mut().zip(&g_row[lo..hi_ow])
                                            {
                                                *d += weight * g.to_f64();
                                            }
                                        }
                                    } else {
                                        for (ow, g) in g_row.iter().enumerate() {
                                            let iw = ow as isize * s + off;
                                            if iw < 0 || iw >= wi as isize {
                                                continue;
                                            }
                                            let idx = row_in + iw as usize;
                                            if need_w {
                                                wsum += g.to_f64() * x_ch[idx].to_f64();
                                            }
                                            if need_x {
                                                dx[ci * in_spatial + idx] +=
                                                    weight * g.to_f64();
                                            }
                                        }
                                    }
                                }
                            }
                            if need_w {
                                dw[w_base + (kd * k + kh) * k + kw] += wsum;
                            }
                        }
                    }
                }
            }
        }
        if need_x {
            super::add_to_f64(&mut grads[x.0], &dx);
        }
        if need_w {
            super::add_to_f64(&mut grads[w.0], &dw);
        }
    }

    /// Transposed 3D convolution (fractionally-strided upsampling).
    /// Weights are `(c_in, c_out, k, k, k)`; output spatial size is
    /// `(in - 1) stride - 2 pad + k`.
    pub fn conv_transpose3d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId, AdError> {
        let dims = self.conv_dims("conv_transpose3d", x, w, b, stride, padding, true)?;
        let ConvDims {
            c_in,
            c_out,
            k,
            d_in,
            d_out,
        } = dims;
        let [di, hi, wi] = d_in;
        let [do_, ho, wo] = d_out;
        let out_spatial = do_ * ho * wo;
        let in_spatial = di * hi * wi;
        let mut acc = vec![0.0f64; c_out * out_spatial];
        if let Some(b) = b {
            for (co, &bias) in self.nodes[b.0].values.iter().enumerate() {
                acc[co * out_spatial..(co + 1) * out_spatial].fill(bias.to_f64());
            }
        }
        let xv = &self.nodes[x.0].values;
        let wv = &self.nodes[w.0].values;
        let p = padding as isize;
        let s = stride as isize;
        for ci in 0..c_in {
            let x_ch = &xv[ci * in_spatial..(ci + 1) * in_spatial];
            for co in 0..c_out {
                let w_ch = &wv[(ci * c_out + co) * k * k * k..(ci * c_out + co + 1) * k * k * k];
                let acc_ch = &mut acc[co * out_spatial..(co + 1) * out_spatial];
                for kd in 0..k {
                    for kh in 0..k {
                        for kw in 0..k {
                            let weight = w_ch[(kd * k + kh) * k + kw].to_f64();
                            if weight == 0.0 {
                                continue;
                            }
                            for id in 0..di {
                                let od = id as isize * s - p + kd as isize;
                                if od < 0 || od >= do_ as isize {
                                    continue;
                                }
                                for ih in 0..hi {
                                    let oh = ih as isize * s - p + kh as isize;
                                    if oh < 0 || oh >= ho as isize {
                                        continue;
                                    }
                                    let x_row = &x_ch[(id * hi + ih) * wi..][..wi];
                                    let acc_row = &mut acc_ch
                                        [(od as usize * ho + oh as usize) * wo..][..wo];
                                    for (iw, &xval) in x_row.iter().enumerate() {
                                        let ow = iw as isize * s - p + kw as isize;
                                        if ow >= 0 && ow < wo as isize {
                                            acc_row[ow as usize] += weight * xval.to_f64();
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let values = acc.iter().map(|&v| F::from_f64(v)).collect();
        Ok(self.push(
            vec![c_out, do_, ho, wo],
            values,
            &[x, w, b.unwrap_or(x)],
            Op::ConvTranspose3d {
                x,
                w,
                b,
                stride,
                padding,
            },
        ))
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn bw_conv_transpose3d(
        &self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: usize,
        padding: usize,
        gout: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let dims = self
            .conv_dims("conv_transpose3d", x, w, b, stride, padding, true)
            .expect("shapes already validated in forward");
        let ConvDims {
            c_in,
            c_out,
            k,
            d_in,
            d_out,
        } = dims;
        let [di, hi, wi] = d_in;
        let [do_, ho, wo] = d_out;
        let out_spatial = do_ * ho * wo;
        let in_spatial = di * hi * wi;
        let xv = &self.nodes[x.0].values;
        let wv = &self.nodes[w.0].values;
        let p = padding as isize;
        let s = stride as isize;

        if let Some(b) = b {
            if self.needs_grad(b) {
                let mut db = vec![0.0f64; c_out];
                for co in 0..c_out {
                    db[co] = gout[co * out_spatial..(co + 1) * out_spatial]
                        .iter()
                        .map(|g| g.to_f64())
                        .sum();
                }
                super::add_to_f64(&mut grads[b.0], &db);
            }
        }

        let need_x = self.needs_grad(x);
        let need_w = self.needs_grad(w);
        if !need_x && !need_w {
            return;
        }
        let mut dx = if need_x { vec![0.0f64; xv.len()] } else { Vec::new() };
        let mut dw = if need_w { vec![0.0f64; wv.len()] } else { Vec::new() };

        for ci in 0..c_in {
            let x_ch = &xv[ci * in_spatial..(ci + 1) * in_spatial];
            for co in 0..c_out {
                let g_ch = &gout[co * out_spatial..(co + 1) * out_spatial];
                let w_base = (ci * c_out + co) * k * k * k;
                for kd in 0..k {
                    for kh in 0..k {
                        for kw in 0..k {
                            let weight = wv[w_base + (kd * k + kh) * k + kw].to_f64();
                            let mut wsum = 0.0f64;
                            for id in 0..di {
                                let od = id as isize * s - p + kd as isize;
                                if od < 0 || od >= do_ as isize {
                                    continue;
                                }
                                for ih in 0..hi {
                                    let oh = ih as isize * s - p + kh as isize;
                                    if oh < 0 || oh >= ho as isize {
                                        continue;
                                    }
                                    let row_in = (id * hi + ih) * wi;
                                    let g_row = &g_ch
                                        [(od as usize * ho + oh as usize) * wo..][..wo];
                                    for iw in 0..wi {
                                        let ow = iw as isize * s - p + kw as isize;
                                        if ow < 0 || ow >= wo as isize {
                                            continue;
                                        }
                                        let g = g_row[ow as usize].to_f64();
                                        if need_w {
                                            wsum += g * x_ch[row_in + iw].to_f64();
                                        }
                                        if need_x {
                                            dx[ci * in_spatial + row_in + iw] += weight * g;
                                        }
                                    }
                                }
                            }
                            if need_w {
                                dw[w_base + (kd * k + kh) * k + kw] += wsum;
                            }
                        }
                    }
                }
            }
        }
        if need_x {
            super::add_to_f64(&mut grads[x.0], &dx);
        }
        if need_w {
            super::add_to_f64(&mut grads[w.0], &dw);
        }
    }

    /// Max pooling with cubic window `size` and equal stride; spatial
    /// dimensions must divide evenly. Argmax (first maximum) is saved for
    /// backward.
    pub fn maxpool3d(&mut self, x: TensorId, size: usize) -> Result<TensorId, AdError> {
        let xs = &self.nodes[x.0].shape;
        if xs.len() != 4 {
            return Err(bad_arg("maxpool3d", format!("input must be (c, d, h, w), got {xs:?}")));
        }
        if size == 0 || xs[1] % size != 0 || xs[2] % size != 0 || xs[3] % size != 0 {
            return Err(bad_arg(
                "maxpool3d",
                format!("window {size} must divide spatial dims of {xs:?}"),
            ));
        }
        let (c, di, hi, wi) = (xs[0], xs[1], xs[2], xs[3]);
        let (do_, ho, wo) = (di / size, hi / size, wi / size);
        let xv = &self.nodes[x.0].values;
        let mut values = Vec::with_capacity(c * do_ * ho * wo);
        let mut argmax = Vec::with_capacity(c * do_ * ho * wo);
        for ch in 0..c {
            let base = ch * di * hi * wi;
            for od in 0..do_ {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for dd in 0..size {
                            for dh in 0..size {
                                for dw in 0..size {
                                    let idx = base
                                        + ((od * size + dd) * hi + oh * size + dh) * wi
                                        + ow * size
                                        + dw;
                                    let v = xv[idx].to_f64();
                                    if v > best {
                                        best = v;
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        values.push(F::from_f64(best));
                        argmax.push(best_idx as u32);
                    }
                }
            }
        }
        Ok(self.push(
            vec![c, do_, ho, wo],
            values,
            &[x],
            Op::MaxPool3d { x, argmax },
        ))
    }

    pub(crate) fn bw_maxpool3d(
        &self,
        x: TensorId,
        argmax: &[u32],
        gout: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        if !self.needs_grad(x) {
            return;
        }
        let mut delta = vec![0.0f64; self.nodes[x.0].values.len()];
        for (g, &idx) in gout.iter().zip(argmax) {
            delta[idx as usize] += g.to_f64();
        }
        super::add_to_f64(&mut grads[x.0], &delta);
    }
}
