//! Dense affine maps and normalization layers.

use super::{bad_arg, shape_err, AdError, Op, Scalar, Tape, TensorId};

/// Normalization epsilon shared by group and batch normalization.
pub const NORM_EPS: f64 = 1e-5;

/// Batch statistics captured by a training-mode batch-norm application, used
/// by the optimizer to update running estimates.
#[derive(Debug, Clone)]
pub struct BatchStats {
    /// Per-channel mean over spatial positions.
    pub mean: Vec<f64>,
    /// Per-channel population variance over spatial positions.
    pub var: Vec<f64>,
}

impl<F: Scalar> Tape<F> {
    /// Dense affine map: rows of `x` (shape `(n, in)` or `(in,)`) times
    /// `w` (shape `(out, in)`), plus optional bias `(out,)`.
    pub fn linear(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
    ) -> Result<TensorId, AdError> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        if ws.len() != 2 {
            return Err(bad_arg("linear", format!("weights must be a matrix, got {ws:?}")));
        }
        let (out_dim, in_dim) = (ws[0], ws[1]);
        let (rows, vec_in) = match xs.len() {
            1 => (1, true),
            2 => (xs[0], false),
            _ => return Err(bad_arg("linear", format!("input must be rank 1 or 2, got {xs:?}"))),
        };
        if *xs.last().unwrap() != in_dim {
            return Err(shape_err("linear", &xs, &ws));
        }
        if let Some(b) = b {
            if self.nodes[b.0].shape != [out_dim] {
                return Err(shape_err("linear", &self.nodes[b.0].shape, &[out_dim]));
            }
        }
        let xv = &self.nodes[x.0].values;
        let wv = &self.nodes[w.0].values;
        let mut values = Vec::with_capacity(rows * out_dim);
        for r in 0..rows {
            let xrow = &xv[r * in_dim..(r + 1) * in_dim];
            for o in 0..out_dim {
                let wrow = &wv[o * in_dim..(o + 1) * in_dim];
                let mut acc = match b {
                    Some(b) => self.nodes[b.0].values[o].to_f64(),
                    None => 0.0,
                };
                for (xi, wi) in xrow.iter().zip(wrow) {
                    acc += xi.to_f64() * wi.to_f64();
                }
                values.push(F::from_f64(acc));
            }
        }
        let shape = if vec_in { vec![out_dim] } else { vec![rows, out_dim] };
        Ok(self.push(shape, values, &[x, w, b.unwrap_or(x)], Op::Linear { x, w, b }))
    }

    pub(crate) fn bw_linear(
        &self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        gout: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let ws = &self.nodes[w.0].shape;
        let (out_dim, in_dim) = (ws[0], ws[1]);
        let rows = self.nodes[x.0].values.len() / in_dim;
        let xv = &self.nodes[x.0].values;
        let wv = &self.nodes[w.0].values;

        if let Some(b) = b {
            if self.needs_grad(b) {
                let mut db = vec![0.0f64; out_dim];
                for r in 0..rows {
                    for o in 0..out_dim {
                        db[o] += gout[r * out_dim + o].to_f64();
                    }
                }
                super::add_to_f64(&mut grads[b.0], &db);
            }
        }
        if self.needs_grad(x) {
            let mut dx = vec![0.0f64; rows * in_dim];
            for r in 0..rows {
                for o in 0..out_dim {
                    let g = gout[r * out_dim + o].to_f64();
                    if g == 0.0 {
                        continue;
                    }
                    let wrow = &wv[o * in_dim..(o + 1) * in_dim];
                    for (dxi, wi) in dx[r * in_dim..(r + 1) * in_dim].iter_mut().zip(wrow) {
                        *dxi += g * wi.to_f64();
                    }
                }
            }
            super::add_to_f64(&mut grads[x.0], &dx);
        }
        if self.needs_grad(w) {
            let mut dw = vec![0.0f64; out_dim * in_dim];
            for r in 0..rows {
                let xrow = &xv[r * in_dim..(r + 1) * in_dim];
                for o in 0..out_dim {
                    let g = gout[r * out_dim + o].to_f64();
                    if g == 0.0 {
                        continue;
                    }
                    for (dwi, xi) in dw[o * in_dim..(o + 1) * in_dim].iter_mut().zip(xrow) {
                        *dwi += g * xi.to_f64();
                    }
                }
            }
            super::add_to_f64(&mut grads[w.0], &dw);
        }
    }

    /// Group normalization over a `(c, d, h, w)` volume with affine
    /// parameters `gamma`, `beta` of shape `(c,)`. Statistics are computed
    /// per group of channels with population variance and epsilon 1e-5.
    pub fn group_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        groups: usize,
    ) -> Result<TensorId, AdError> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 4 {
            return Err(bad_arg("group_norm", format!("input must be (c, d, h, w), got {xs:?}")));
        }
        let c = xs[0];
        if groups == 0 || c % groups != 0 {
            return Err(bad_arg("group_norm", format!("{groups} groups do not divide {c} channels")));
        }
        for affine in [gamma, beta] {
            if self.nodes[affine.0].shape != [c] {
                return Err(shape_err("group_norm", &self.nodes[affine.0].shape, &[c]));
            }
        }
        let spatial: usize = xs[1..].iter().product();
        let cg = c / groups;
        let group_len = cg * spatial;
        let xv = &self.nodes[x.0].values;
        let gv = &self.nodes[gamma.0].values;
        let bv = &self.nodes[beta.0].values;
        let mut mean = vec![0.0f64; groups];
        let mut invstd = vec![0.0f64; groups];
        let mut values = vec![F::ZERO; xv.len()];
        for g in 0..groups {
            let seg = &xv[g * group_len..(g + 1) * group_len];
            let m: f64 = seg.iter().map(|v| v.to_f64()).sum::<f64>() / group_len as f64;
            let var: f64 = seg
                .iter()
                .map(|v| {
                    let d = v.to_f64() - m;
                    d * d
                })
                .sum::<f64>()
                / group_len as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            mean[g] = m;
            invstd[g] = inv;
            for local_c in 0..cg {
                let ch = g * cg + local_c;
                let (gm, bt) = (gv[ch].to_f64(), bv[ch].to_f64());
                let in_seg = &seg[local_c * spatial..(local_c + 1) * spatial];
                let out_seg = &mut values[ch * spatial..(ch + 1) * spatial];
                for (o, v) in out_seg.iter_mut().zip(in_seg) {
                    *o = F::from_f64(gm * (v.to_f64() - m) * inv + bt);
                }
            }
        }
        Ok(self.push(
            xs,
            values,
            &[x, gamma, beta],
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                invstd,
            },
        ))
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn bw_group_norm(
        &self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        groups: usize,
        mean: &[f64],
        invstd: &[f64],
        gout: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let xs = &self.nodes[x.0].shape;
        let c = xs[0];
        let spatial: usize = xs[1..].iter().product();
        let cg = c / groups;
        let group_len = cg * spatial;
        let xv = &self.nodes[x.0].values;
        let gv = &self.nodes[gamma.0].values;

        if self.needs_grad(beta) {
            let mut db = vec![0.0f64; c];
            for ch in 0..c {
                db[ch] = gout[ch * spatial..(ch + 1) * spatial]
                    .iter()
                    .map(|g| g.to_f64())
                    .sum();
            }
            super::add_to_f64(&mut grads[beta.0], &db);
        }
        if self.needs_grad(gamma) {
            let mut dg = vec![0.0f64; c];
            for ch in 0..c {
                let g_idx = ch / cg;
                let (m, inv) = (mean[g_idx], invstd[g_idx]);
                dg[ch] = gout[ch * spatial..(ch + 1) * spatial]
                    .iter()
                    .zip(&xv[ch * spatial..(ch + 1) * spatial])
                    .map(|(g, v)| g.to_f64() * (v.to_f64() - m) * inv)
                    .sum();
            }
            super::add_to_f64(&mut grads[gamma.0], &dg);
        }
        if self.needs_grad(x) {
            let mut dx = vec![0.0f64; xv.len()];
            let n = group_len as f64;
            for g in 0..groups {
                let (m, inv) = (mean[g], invstd[g]);
                // dxhat = gout * gamma (per channel); then the standard
                // normalization backward within the group:
                // dx = inv/n (n dxhat - sum(dxhat) - xhat sum(dxhat xhat)).
                let mut sum_dxhat = 0.0f64;
                let mut sum_dxhat_xhat = 0.0f64;
                for local_c in 0..cg {
                    let ch = g * cg + local_c;
                    let gm = gv[ch].to_f64();
                    for s in 0..spatial {
                        let idx = ch * spatial + s;
                        let dxhat = gout[idx].to_f64() * gm;
                        let xhat = (xv[idx].to_f64() - m) * inv;
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                }
                for local_c in 0..cg {
                    let ch = g * cg + local_c;
                    let gm = gv[ch].to_f64();
                    for s in 0..spatial {
                        let idx = ch * spatial + s;
                        let dxhat = gout[idx].to_f64() * gm;
                        let xhat = (xv[idx].to_f64() - m) * inv;
                        dx[idx] = inv / n * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                    }
                }
            }
            super::add_to_f64(&mut grads[x.0], &dx);
        }
    }

    /// Batch normalization in training mode on a single `(c, d, h, w)`
    /// sample: statistics are computed over spatial positions per channel.
    /// Returns the output and the batch statistics for running-estimate
    /// updates.
    pub fn batch_norm_train(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
    ) -> Result<(TensorId, BatchStats), AdError> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 4 {
            return Err(bad_arg("batch_norm", format!("input must be (c, d, h, w), got {xs:?}")));
        }
        let c = xs[0];
        for affine in [gamma, beta] {
            if self.nodes[affine.0].shape != [c] {
                return Err(shape_err("batch_norm", &self.nodes[affine.0].shape, &[c]));
            }
        }
        let spatial: usize = xs[1..].iter().product();
        let xv = &self.nodes[x.0].values;
        let gv = &self.nodes[gamma.0].values;
        let bv = &self.nodes[beta.0].values;
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        let mut invstd = vec![0.0f64; c];
        let mut values = vec![F::ZERO; xv.len()];
        for ch in 0..c {
            let seg = &xv[ch * spatial..(ch + 1) * spatial];
            let m: f64 = seg.iter().map(|v| v.to_f64()).sum::<f64>() / spatial as f64;
            let v: f64 = seg
                .iter()
                .map(|val| {
                    let d = val.to_f64() - m;
                    d * d
                })
                .sum::<f64>()
                / spatial as f64;
            let inv = 1.0 / (v + NORM_EPS).sqrt();
            mean[ch] = m;
            var[ch] = v;
            invstd[ch] = inv;
            let (gm, bt) = (gv[ch].to_f64(), bv[ch].to_f64());
            for (o, val) in values[ch * spatial..(ch + 1) * spatial].iter_mut().zip(seg) {
                *o = F::from_f64(gm * (val.to_f64() - m) * inv + bt);
            }
        }
        let stats = BatchStats {
            mean: mean.clone(),
            var,
        };
        let id = self.push(
            xs,
            values,
            &[x, gamma, beta],
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                mean,
                invstd,
            },
        );
        Ok((id, stats))
    }

    /// Batch normalization with frozen running statistics: a per-channel
    /// affine map, used at inference.
    pub fn batch_norm_eval(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<TensorId, AdError> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 4 {
            return Err(bad_arg("batch_norm", format!("input must be (c, d, h, w), got {xs:?}")));
        }
        let c = xs[0];
        if running_mean.len() != c || running_var.len() != c {
            return Err(bad_arg(
                "batch_norm",
                format!("{} running stats for {c} channels", running_mean.len()),
            ));
        }
        for affine in [gamma, beta] {
            if self.nodes[affine.0].shape != [c] {
                return Err(shape_err("batch_norm", &self.nodes[affine.0].shape, &[c]));
            }
        }
        let spatial: usize = xs[1..].iter().product();
        let xv = &self.nodes[x.0].values;
        let gv = &self.nodes[gamma.0].values;
        let bv = &self.nodes[beta.0].values;
        let invstd: Vec<f64> = running_var
            .iter()
            .map(|&v| 1.0 / (v + NORM_EPS).sqrt())
            .collect();
        let mut values = vec![F::ZERO; xv.len()];
        for ch in 0..c {
            let (m, inv) = (running_mean[ch], invstd[ch]);
            let (gm, bt) = (gv[ch].to_f64(), bv[ch].to_f64());
            let seg = &xv[ch * spatial..(ch + 1) * spatial];
            for (o, val) in values[ch * spatial..(ch + 1) * spatial].iter_mut().zip(seg) {
                *o = F::from_f64(gm * (val.to_f64() - m) * inv + bt);
            }
        }
        Ok(self.push(
            xs,
            values,
            &[x, gamma, beta],
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                invstd,
            },
        ))
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn bw_batch_norm_eval(
        &self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: &[f64],
        invstd: &[f64],
        gout: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let xs = &self.nodes[x.0].shape;
        let c = xs[0];
        let spatial: usize = xs[1..].iter().product();
        let xv = &self.nodes[x.0].values;
        let gv = &self.nodes[gamma.0].values;
        if self.needs_grad(beta) {
            let mut db = vec![0.0f64; c];
            for ch in 0..c {
                db[ch] = gout[ch * spatial..(ch + 1) * spatial]
                    .iter()
                    .map(|g| g.to_f64())
                    .sum();
            }
            super::add_to_f64(&mut grads[beta.0], &db);
        }
        if self.needs_grad(gamma) {
            let mut dg = vec![0.0f64; c];
            for ch in 0..c {
                dg[ch] = gout[ch * spatial..(ch + 1) * spatial]
                    .iter()
                    .zip(&xv[ch * spatial..(ch + 1) * spatial])
                    .map(|(g, v)| g.to_f64() * (v.to_f64() - mean[ch]) * invstd[ch])
                    .sum();
            }
            super::add_to_f64(&mut grads[gamma.0], &dg);
        }
        if self.needs_grad(x) {
            let mut dx = vec![0.0f64; xv.len()];
            for ch in 0..c {
                let scale = gv[ch].to_f64() * invstd[ch];
                for s in 0..spatial {
                    dx[ch * spatial + s] = gout[ch * spatial + s].to_f64() * scale;
                }
            }
            super::add_to_f64(&mut grads[x.0], &dx);
        }
    }
}

/// Group count policy: 8 groups when the channel count allows, else a single
/// group (whole-layer normalization). Every channel count in the encoder and
/// decoder stacks is divisible by 8.
pub fn default_group_count(channels: usize) -> usize {
    if channels % 8 == 0 {
        8
    } else {
        1
    }
}
