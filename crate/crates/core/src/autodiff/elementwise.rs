//! Elementwise ops, shape plumbing, gathers, reductions, and losses.

use super::{add_to_f64, bad_arg, shape_err, AdError, Op, Scalar, Tape, TensorId};

#[inline]
fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<F: Scalar> Tape<F> {
    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let values = self.nodes[x.0]
            .values
            .iter()
            .map(|&v| if v.to_f64() > 0.0 { v } else { F::ZERO })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, values, &[x], Op::Relu { x })
    }

    pub(crate) fn bw_relu(&self, x: TensorId, gout: &[F], grads: &mut [Option<Vec<F>>]) {
        if !self.needs_grad(x) {
            return;
        }
        let xv = &self.nodes[x.0].values;
        let delta: Vec<f64> = xv
            .iter()
            .zip(gout)
            .map(|(&v, &g)| if v.to_f64() > 0.0 { g.to_f64() } else { 0.0 })
            .collect();
        add_to_f64(&mut grads[x.0], &delta);
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let values = self.nodes[x.0]
            .values
            .iter()
            .map(|&v| F::from_f64(sigmoid_f64(v.to_f64())))
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, values, &[x], Op::Sigmoid { x })
    }

    pub(crate) fn bw_sigmoid(&self, x: TensorId, gout: &[F], grads: &mut [Option<Vec<F>>]) {
        if !self.needs_grad(x) {
            return;
        }
        let xv = &self.nodes[x.0].values;
        let delta: Vec<f64> = xv
            .iter()
            .zip(gout)
            .map(|(&v, &g)| {
                let y = sigmoid_f64(v.to_f64());
                g.to_f64() * y * (1.0 - y)
            })
            .collect();
        add_to_f64(&mut grads[x.0], &delta);
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId, AdError> {
        let shape = self.nodes[x.0].shape.clone();
        let last = *shape
            .last()
            .ok_or_else(|| bad_arg("softmax", "scalar input has no last dimension"))?;
        let xv = &self.nodes[x.0].values;
        let mut values = Vec::with_capacity(xv.len());
        for row in xv.chunks(last) {
            let m = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v.to_f64() - m).exp()).collect();
            let sum: f64 = exps.iter().sum();
            values.extend(exps.iter().map(|&e| F::from_f64(e / sum)));
        }
        Ok(self.push(shape, values, &[x], Op::Softmax { x }))
    }

    pub(crate) fn bw_softmax(&self, x: TensorId, gout: &[F], grads: &mut [Option<Vec<F>>]) {
        if !self.needs_grad(x) {
            return;
        }
        let xv = &self.nodes[x.0].values;
        let last = *self.nodes[x.0].shape.last().unwrap();
        let mut delta = vec![0.0f64; xv.len()];
        for (r, row) in xv.chunks(last).enumerate() {
            let m = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v.to_f64() - m).exp()).collect();
            let sum: f64 = exps.iter().sum();
            let y: Vec<f64> = exps.iter().map(|&e| e / sum).collect();
            let g = &gout[r * last..(r + 1) * last];
            let dot: f64 = g.iter().zip(&y).map(|(gi, yi)| gi.to_f64() * yi).sum();
            for c in 0..last {
                delta[r * last + c] = y[c] * (g[c].to_f64() - dot);
            }
        }
        add_to_f64(&mut grads[x.0], &delta);
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AdError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(shape_err("add", &self.nodes[a.0].shape, &self.nodes[b.0].shape));
        }
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| F::from_f64(x.to_f64() + y.to_f64()))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, values, &[a, b], Op::Add { a, b }))
    }

    pub(crate) fn bw_add(&self, a: TensorId, b: TensorId, gout: &[F], grads: &mut [Option<Vec<F>>]) {
        for id in [a, b] {
            if self.needs_grad(id) {
                let delta: Vec<f64> = gout.iter().map(|g| g.to_f64()).collect();
                add_to_f64(&mut grads[id.0], &delta);
            }
        }
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AdError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(shape_err("mul", &self.nodes[a.0].shape, &self.nodes[b.0].shape));
        }
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| F::from_f64(x.to_f64() * y.to_f64()))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, values, &[a, b], Op::Mul { a, b }))
    }

    pub(crate) fn bw_mul(&self, a: TensorId, b: TensorId, gout: &[F], grads: &mut [Option<Vec<F>>]) {
        if self.needs_grad(a) {
            let delta: Vec<f64> = gout
                .iter()
                .zip(&self.nodes[b.0].values)
                .map(|(g, &y)| g.to_f64() * y.to_f64())
                .collect();
            add_to_f64(&mut grads[a.0], &delta);
        }
        if self.needs_grad(b) {
            let delta: Vec<f64> = gout
                .iter()
                .zip(&self.nodes[a.0].values)
                .map(|(g, &x)| g.to_f64() * x.to_f64())
                .collect();
            add_to_f64(&mut grads[b.0], &delta);
        }
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let values = self.nodes[x.0]
            .values
            .iter()
            .map(|&v| F::from_f64(v.to_f64() * c))
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, values, &[x], Op::Scale { x, c })
    }

    pub(crate) fn bw_scale(&self, x: TensorId, c: f64, gout: &[F], grads: &mut [Option<Vec<F>>]) {
        if !self.needs_grad(x) {
            return;
        }
        let delta: Vec<f64> = gout.iter().map(|g| g.to_f64() * c).collect();
        add_to_f64(&mut grads[x.0], &delta);
    }

    /// Concatenation along the first dimension (e.g. channel stacking of
    /// equally-sized volumes).
    pub fn concat_first(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AdError> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != sb.len() || sa.is_empty() || sa[1..] != sb[1..] {
            return Err(shape_err("concat_first", sa, sb));
        }
        let mut shape = sa.clone();
        shape[0] += sb[0];
        let mut values = self.nodes[a.0].values.clone();
        values.extend_from_slice(&self.nodes[b.0].values);
        Ok(self.push(shape, values, &[a, b], Op::ConcatFirst { a, b }))
    }

    pub(crate) fn bw_concat_first(
        &self,
        a: TensorId,
        b: TensorId,
        gout: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let na = self.nodes[a.0].values.len();
        if self.needs_grad(a) {
            let delta: Vec<f64> = gout[..na].iter().map(|g| g.to_f64()).collect();
            add_to_f64(&mut grads[a.0], &delta);
        }
        if self.needs_grad(b) {
            let delta: Vec<f64> = gout[na..].iter().map(|g| g.to_f64()).collect();
            add_to_f64(&mut grads[b.0], &delta);
        }
    }

    /// Concatenation along the last dimension; leading dimensions must agree.
    pub fn concat_last(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AdError> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(shape_err("concat_last", sa, sb));
        }
        let (la, lb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows = self.nodes[a.0].values.len() / la.max(1);
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = la + lb;
        let mut values = Vec::with_capacity(rows * (la + lb));
        for r in 0..rows {
            values.extend_from_slice(&self.nodes[a.0].values[r * la..(r + 1) * la]);
            values.extend_from_slice(&self.nodes[b.0].values[r * lb..(r + 1) * lb]);
        }
        Ok(self.push(shape, values, &[a, b], Op::ConcatLast { a, b }))
    }

    pub(crate) fn bw_concat_last(
        &self,
        a: TensorId,
        b: TensorId,
        gout: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let la = *self.nodes[a.0].shape.last().unwrap();
        let lb = *self.nodes[b.0].shape.last().unwrap();
        let rows = self.nodes[a.0].values.len() / la.max(1);
        if self.needs_grad(a) {
            let mut delta = vec![0.0f64; self.nodes[a.0].values.len()];
            for r in 0..rows {
                for c in 0..la {
                    delta[r * la + c] = gout[r * (la + lb) + c].to_f64();
                }
            }
            add_to_f64(&mut grads[a.0], &delta);
        }
        if self.needs_grad(b) {
            let mut delta = vec![0.0f64; self.nodes[b.0].values.len()];
            for r in 0..rows {
                for c in 0..lb {
                    delta[r * lb + c] = gout[r * (la + lb) + la + c].to_f64();
                }
            }
            add_to_f64(&mut grads[b.0], &delta);
        }
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId, AdError> {
        let want: usize = shape.iter().product();
        if want != self.nodes[x.0].values.len() {
            return Err(shape_err("reshape", &self.nodes[x.0].shape, shape));
        }
        let values = self.nodes[x.0].values.clone();
        Ok(self.push(shape.to_vec(), values, &[x], Op::Reshape { x }))
    }

    pub(crate) fn bw_reshape(&self, x: TensorId, gout: &[F], grads: &mut [Option<Vec<F>>]) {
        if !self.needs_grad(x) {
            return;
        }
        let delta: Vec<f64> = gout.iter().map(|g| g.to_f64()).collect();
        add_to_f64(&mut grads[x.0], &delta);
    }

    /// Gathers rows of a matrix `(n, d)`; indices may repeat.
    pub fn select_rows(&mut self, x: TensorId, rows: &[usize]) -> Result<TensorId, AdError> {
        let shape = &self.nodes[x.0].shape;
        if shape.len() != 2 {
            return Err(bad_arg("select_rows", format!("need a matrix, got {shape:?}")));
        }
        let (n, d) = (shape[0], shape[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(bad_arg("select_rows", format!("row {bad} out of {n}")));
        }
        let mut values = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            values.extend_from_slice(&self.nodes[x.0].values[r * d..(r + 1) * d]);
        }
        Ok(self.push(
            vec![rows.len(), d],
            values,
            &[x],
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    pub(crate) fn bw_select_rows(
        &self,
        x: TensorId,
        rows: &[usize],
        gout: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        if !self.needs_grad(x) {
            return;
        }
        let d = self.nodes[x.0].shape[1];
        let mut delta = vec![0.0f64; self.nodes[x.0].values.len()];
        for (k, &r) in rows.iter().enumerate() {
            for c in 0..d {
                delta[r * d + c] += gout[k * d + c].to_f64();
            }
        }
        add_to_f64(&mut grads[x.0], &delta);
    }

    /// Takes `[start, start+len)` along the last dimension.
    pub fn slice_last(
        &mut self,
        x: TensorId,
        start: usize,
        len: usize,
    ) -> Result<TensorId, AdError> {
        let shape = self.nodes[x.0].shape.clone();
        let last = *shape
            .last()
            .ok_or_else(|| bad_arg("slice_last", "scalar input has no last dimension"))?;
        if start + len > last {
            return Err(bad_arg(
                "slice_last",
                format!("[{start}, {}) out of last dimension {last}", start + len),
            ));
        }
        let rows = self.nodes[x.0].values.len() / last;
        let mut values = Vec::with_capacity(rows * len);
        for r in 0..rows {
            values.extend_from_slice(&self.nodes[x.0].values[r * last + start..r * last + start + len]);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        Ok(self.push(out_shape, values, &[x], Op::SliceLast { x, start }))
    }

    pub(crate) fn bw_slice_last(
        &self,
        x: TensorId,
        start: usize,
        gout: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        if !self.needs_grad(x) {
            return;
        }
        let last = *self.nodes[x.0].shape.last().unwrap();
        let rows = self.nodes[x.0].values.len() / last;
        let len = gout.len() / rows;
        let mut delta = vec![0.0f64; self.nodes[x.0].values.len()];
        for r in 0..rows {
            for c in 0..len {
                delta[r * last + start + c] = gout[r * len + c].to_f64();
            }
        }
        add_to_f64(&mut grads[x.0], &delta);
    }

    /// `(p, c) -> (p, p, 2c)`: `out[i][j] = [x[i], x[j]]`, every ordered pair.
    pub fn pair_concat(&mut self, x: TensorId) -> Result<TensorId, AdError> {
        let shape = &self.nodes[x.0].shape;
        if shape.len() != 2 {
            return Err(bad_arg("pair_concat", format!("need a matrix, got {shape:?}")));
        }
        let (p, c) = (shape[0], shape[1]);
        let xv = &self.nodes[x.0].values;
        let mut values = Vec::with_capacity(p * p * 2 * c);
        for i in 0..p {
            for j in 0..p {
                values.extend_from_slice(&xv[i * c..(i + 1) * c]);
                values.extend_from_slice(&xv[j * c..(j + 1) * c]);
            }
        }
        Ok(self.push(vec![p, p, 2 * c], values, &[x], Op::PairConcat { x }))
    }

    pub(crate) fn bw_pair_concat(&self, x: TensorId, gout: &[F], grads: &mut [Option<Vec<F>>]) {
        if !self.needs_grad(x) {
            return;
        }
        let (p, c) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
        let mut delta = vec![0.0f64; p * c];
        for i in 0..p {
            for j in 0..p {
                let base = (i * p + j) * 2 * c;
                for k in 0..c {
                    delta[i * c + k] += gout[base + k].to_f64();
                    delta[j * c + k] += gout[base + c + k].to_f64();
                }
            }
        }
        add_to_f64(&mut grads[x.0], &delta);
    }

    /// Symmetrized entries of a square matrix at the given index pairs:
    /// `out[k] = (x[i_k][j_k] + x[j_k][i_k]) / 2`.
    pub fn sym_pairs(
        &mut self,
        x: TensorId,
        pairs: &[(usize, usize)],
    ) -> Result<TensorId, AdError> {
        let shape = &self.nodes[x.0].shape;
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(bad_arg("sym_pairs", format!("need a square matrix, got {shape:?}")));
        }
        let p = shape[0];
        if let Some(&bad) = pairs.iter().find(|&&(i, j)| i >= p || j >= p) {
            return Err(bad_arg("sym_pairs", format!("pair {bad:?} out of {p}")));
        }
        let xv = &self.nodes[x.0].values;
        let values = pairs
            .iter()
            .map(|&(i, j)| F::from_f64(0.5 * (xv[i * p + j].to_f64() + xv[j * p + i].to_f64())))
            .collect();
        Ok(self.push(
            vec![pairs.len()],
            values,
            &[x],
            Op::SymPairs {
                x,
                pairs: pairs.to_vec(),
            },
        ))
    }

    pub(crate) fn bw_sym_pairs(
        &self,
        x: TensorId,
        pairs: &[(usize, usize)],
        gout: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        if !self.needs_grad(x) {
            return;
        }
        let p = self.nodes[x.0].shape[0];
        let mut delta = vec![0.0f64; p * p];
        for (k, &(i, j)) in pairs.iter().enumerate() {
            let g = 0.5 * gout[k].to_f64();
            delta[i * p + j] += g;
            delta[j * p + i] += g;
        }
        add_to_f64(&mut grads[x.0], &delta);
    }

    /// Message-passing aggregation. For latents `(p, c)`, per-pair features
    /// `(p, p, c)` and edge logits `(p, p)`:
    ///
    /// `out[i] = [latents[i], sum_j g(i,j) feats[i][j], max_j g(i,j) feats[i][j]]`
    ///
    /// with `g = sigmoid(logits)` and the max taken per coordinate over all
    /// `j` (first index wins ties). Output is `(p, 3c)`.
    pub fn mp_aggregate(
        &mut self,
        latents: TensorId,
        feats: TensorId,
        logits: TensorId,
    ) -> Result<TensorId, AdError> {
        let sl = self.nodes[latents.0].shape.clone();
        let sf = self.nodes[feats.0].shape.clone();
        let sg = self.nodes[logits.0].shape.clone();
        if sl.len() != 2 {
            return Err(bad_arg("mp_aggregate", format!("latents must be a matrix, got {sl:?}")));
        }
        let (p, c) = (sl[0], sl[1]);
        if sf != [p, p, c] {
            return Err(shape_err("mp_aggregate", &sf, &[p, p, c]));
        }
        if sg != [p, p] {
            return Err(shape_err("mp_aggregate", &sg, &[p, p]));
        }
        let lv = &self.nodes[latents.0].values;
        let fv = &self.nodes[feats.0].values;
        let gv = &self.nodes[logits.0].values;
        let mut values = Vec::with_capacity(p * 3 * c);
        let mut argmax = vec![0u32; p * c];
        for i in 0..p {
            values.extend_from_slice(&lv[i * c..(i + 1) * c]);
            let mut sums = vec![0.0f64; c];
            let mut maxs = vec![f64::NEG_INFINITY; c];
            for j in 0..p {
                let g = sigmoid_f64(gv[i * p + j].to_f64());
                let row = &fv[(i * p + j) * c..(i * p + j + 1) * c];
                for k in 0..c {
                    let m = g * row[k].to_f64();
                    sums[k] += m;
                    if m > maxs[k] {
                        maxs[k] = m;
                        argmax[i * c + k] = j as u32;
                    }
                }
            }
            values.extend(sums.iter().map(|&v| F::from_f64(v)));
            values.extend(maxs.iter().map(|&v| F::from_f64(v)));
        }
        Ok(self.push(
            vec![p, 3 * c],
            values,
            &[latents, feats, logits],
            Op::MpAggregate {
                latents,
                feats,
                logits,
                argmax,
            },
        ))
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn bw_mp_aggregate(
        &self,
        latents: TensorId,
        feats: TensorId,
        logits: TensorId,
        argmax: &[u32],
        gout: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let (p, c) = (self.nodes[latents.0].shape[0], self.nodes[latents.0].shape[1]);
        let fv = &self.nodes[feats.0].values;
        let gv = &self.nodes[logits.0].values;
        if self.needs_grad(latents) {
            let mut delta = vec![0.0f64; p * c];
            for i in 0..p {
                for k in 0..c {
                    delta[i * c + k] = gout[i * 3 * c + k].to_f64();
                }
            }
            add_to_f64(&mut grads[latents.0], &delta);
        }
        let need_f = self.needs_grad(feats);
        let need_g = self.needs_grad(logits);
        if !need_f && !need_g {
            return;
        }
        let mut df = vec![0.0f64; fv.len()];
        let mut dg = vec![0.0f64; gv.len()];
        for i in 0..p {
            let gsum = &gout[i * 3 * c + c..i * 3 * c + 2 * c];
            let gmax = &gout[i * 3 * c + 2 * c..i * 3 * c + 3 * c];
            for j in 0..p {
                let l = gv[i * p + j].to_f64();
                let g = sigmoid_f64(l);
                let gprime = g * (1.0 - g);
                let row = &fv[(i * p + j) * c..(i * p + j + 1) * c];
                let mut dl = 0.0f64;
                for k in 0..c {
                    let mut dm = gsum[k].to_f64();
                    if argmax[i * c + k] == j as u32 {
                        dm += gmax[k].to_f64();
                    }
                    if dm != 0.0 {
                        df[(i * p + j) * c + k] += g * dm;
                        dl += row[k].to_f64() * dm;
                    }
                }
                dg[i * p + j] += gprime * dl;
            }
        }
        if need_f {
            add_to_f64(&mut grads[feats.0], &df);
        }
        if need_g {
            add_to_f64(&mut grads[logits.0], &dg);
        }
    }

    /// Weighted sum of constant volumes: `out = sum_m weights[m] * priors[m]`.
    /// `priors` is flattened `m * volume`; output shape is `out_shape`.
    pub fn weighted_grid_sum(
        &mut self,
        weights: TensorId,
        priors: &[F],
        out_shape: &[usize],
    ) -> Result<TensorId, AdError> {
        let m = self.nodes[weights.0].values.len();
        let volume: usize = out_shape.iter().product();
        if m == 0 || priors.len() != m * volume {
            return Err(bad_arg(
                "weighted_grid_sum",
                format!("{m} weights with {} prior values for volume {volume}", priors.len()),
            ));
        }
        let wv = &self.nodes[weights.0].values;
        let mut acc = vec![0.0f64; volume];
        for (mi, &w) in wv.iter().enumerate() {
            let w = w.to_f64();
            let row = &priors[mi * volume..(mi + 1) * volume];
            for (a, &pv) in acc.iter_mut().zip(row) {
                *a += w * pv.to_f64();
            }
        }
        let values = acc.iter().map(|&v| F::from_f64(v)).collect();
        Ok(self.push(
            out_shape.to_vec(),
            values,
            &[weights],
            Op::WeightedGridSum {
                weights,
                priors: priors.to_vec(),
            },
        ))
    }

    pub(crate) fn bw_weighted_grid_sum(
        &self,
        weights: TensorId,
        priors: &[F],
        gout: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        if !self.needs_grad(weights) {
            return;
        }
        let m = self.nodes[weights.0].values.len();
        let volume = gout.len();
        let mut delta = vec![0.0f64; m];
        for mi in 0..m {
            let row = &priors[mi * volume..(mi + 1) * volume];
            delta[mi] = row
                .iter()
                .zip(gout)
                .map(|(&pv, &g)| pv.to_f64() * g.to_f64())
                .sum();
        }
        add_to_f64(&mut grads[weights.0], &delta);
    }

    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let total: f64 = self.nodes[x.0].values.iter().map(|v| v.to_f64()).sum();
        self.push(vec![], vec![F::from_f64(total)], &[x], Op::Sum { x })
    }

    pub(crate) fn bw_sum(&self, x: TensorId, gout: &[F], grads: &mut [Option<Vec<F>>]) {
        if !self.needs_grad(x) {
            return;
        }
        let g = gout[0].to_f64();
        let delta = vec![g; self.nodes[x.0].values.len()];
        add_to_f64(&mut grads[x.0], &delta);
    }

    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let n = self.nodes[x.0].values.len().max(1);
        let total: f64 = self.nodes[x.0].values.iter().map(|v| v.to_f64()).sum();
        self.push(
            vec![],
            vec![F::from_f64(total / n as f64)],
            &[x],
            Op::Mean { x },
        )
    }

    pub(crate) fn bw_mean(&self, x: TensorId, gout: &[F], grads: &mut [Option<Vec<F>>]) {
        if !self.needs_grad(x) {
            return;
        }
        let n = self.nodes[x.0].values.len().max(1);
        let g = gout[0].to_f64() / n as f64;
        let delta = vec![g; self.nodes[x.0].values.len()];
        add_to_f64(&mut grads[x.0], &delta);
    }

    /// Multi-class cross entropy from logits `(n, c)` against index targets,
    /// averaged over rows. Computed as `logsumexp(row) - row[target]`.
    pub fn ce_with_logits(
        &mut self,
        logits: TensorId,
        targets: &[usize],
    ) -> Result<TensorId, AdError> {
        let shape = &self.nodes[logits.0].shape;
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(bad_arg(
                "ce_with_logits",
                format!("logits {shape:?} vs {} targets", targets.len()),
            ));
        }
        let (n, c) = (shape[0], shape[1]);
        if n == 0 {
            return Err(bad_arg("ce_with_logits", "no rows"));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(bad_arg("ce_with_logits", format!("target {bad} out of {c} classes")));
        }
        let xv = &self.nodes[logits.0].values;
        let mut total = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            let row = &xv[r * c..(r + 1) * c];
            let m = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v.to_f64() - m).exp()).sum::<f64>().ln();
            total += lse - row[t].to_f64();
        }
        let value = F::from_f64(total / n as f64);
        Ok(self.push(
            vec![],
            vec![value],
            &[logits],
            Op::CeWithLogits {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    pub(crate) fn bw_ce_with_logits(
        &self,
        logits: TensorId,
        targets: &[usize],
        gout: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        if !self.needs_grad(logits) {
            return;
        }
        let (n, c) = (self.nodes[logits.0].shape[0], self.nodes[logits.0].shape[1]);
        let xv = &self.nodes[logits.0].values;
        let g = gout[0].to_f64() / n as f64;
        let mut delta = vec![0.0f64; n * c];
        for (r, &t) in targets.iter().enumerate() {
            let row = &xv[r * c..(r + 1) * c];
            let m = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v.to_f64() - m).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for k in 0..c {
                let softmax = exps[k] / sum;
                delta[r * c + k] = g * (softmax - if k == t { 1.0 } else { 0.0 });
            }
        }
        add_to_f64(&mut grads[logits.0], &delta);
    }

    /// Binary cross entropy from logits against targets in `[0,1]`, averaged
    /// over elements. Stable form `max(x,0) - x t + ln(1 + e^{-|x|})`.
    pub fn bce_with_logits(
        &mut self,
        logits: TensorId,
        targets: &[F],
    ) -> Result<TensorId, AdError> {
        let n = self.nodes[logits.0].values.len();
        if n != targets.len() || n == 0 {
            return Err(bad_arg(
                "bce_with_logits",
                format!("{n} logits vs {} targets", targets.len()),
            ));
        }
        let xv = &self.nodes[logits.0].values;
        let mut total = 0.0f64;
        for (&x, &t) in xv.iter().zip(targets) {
            let x = x.to_f64();
            let t = t.to_f64();
            total += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
        }
        let value = F::from_f64(total / n as f64);
        Ok(self.push(
            vec![],
            vec![value],
            &[logits],
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    pub(crate) fn bw_bce_with_logits(
        &self,
        logits: TensorId,
        targets: &[F],
        gout: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        if !self.needs_grad(logits) {
            return;
        }
        let n = targets.len();
        let g = gout[0].to_f64() / n as f64;
        let delta: Vec<f64> = self.nodes[logits.0]
            .values
            .iter()
            .zip(targets)
            .map(|(&x, &t)| g * (sigmoid_f64(x.to_f64()) - t.to_f64()))
            .collect();
        add_to_f64(&mut grads[logits.0], &delta);
    }

    /// Binary cross entropy on probabilities (inputs already in `[0,1]`),
    /// clamped to `[1e-7, 1 - 1e-7]`, averaged over elements.
    pub fn bce_probs(&mut self, probs: TensorId, targets: &[F]) -> Result<TensorId, AdError> {
        let n = self.nodes[probs.0].values.len();
        if n != targets.len() || n == 0 {
            return Err(bad_arg(
                "bce_probs",
                format!("{n} probabilities vs {} targets", targets.len()),
            ));
        }
        const EPS: f64 = 1e-7;
        let xv = &self.nodes[probs.0].values;
        let mut total = 0.0f64;
        for (&p, &t) in xv.iter().zip(targets) {
            let p = p.to_f64().clamp(EPS, 1.0 - EPS);
            let t = t.to_f64();
            total -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        }
        let value = F::from_f64(total / n as f64);
        Ok(self.push(
            vec![],
            vec![value],
            &[probs],
            Op::BceProbs {
                probs,
                targets: targets.to_vec(),
            },
        ))
    }

    pub(crate) fn bw_bce_probs(
        &self,
        probs: TensorId,
        targets: &[F],
        gout: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        if !self.needs_grad(probs) {
            return;
        }
        const EPS: f64 = 1e-7;
        let n = targets.len();
        let g = gout[0].to_f64() / n as f64;
        let delta: Vec<f64> = self.nodes[probs.0]
            .values
            .iter()
            .zip(targets)
            .map(|(&p, &t)| {
                let raw = p.to_f64();
                // Clamped region has zero slope.
                if !(EPS..=1.0 - EPS).contains(&raw) {
                    return 0.0;
                }
                g * (raw - t.to_f64()) / (raw * (1.0 - raw))
            })
            .collect();
        add_to_f64(&mut grads[probs.0], &delta);
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AdError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(shape_err("mse", &self.nodes[a.0].shape, &self.nodes[b.0].shape));
        }
        let n = self.nodes[a.0].values.len();
        if n == 0 {
            return Err(bad_arg("mse", "empty tensors"));
        }
        let total: f64 = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| {
                let d = x.to_f64() - y.to_f64();
                d * d
            })
            .sum();
        let value = F::from_f64(total / n as f64);
        Ok(self.push(vec![], vec![value], &[a, b], Op::Mse { a, b }))
    }

    pub(crate) fn bw_mse(&self, a: TensorId, b: TensorId, gout: &[F], grads: &mut [Option<Vec<F>>]) {
        let n = self.nodes[a.0].values.len();
        let g = 2.0 * gout[0].to_f64() / n as f64;
        if self.needs_grad(a) {
            let delta: Vec<f64> = self.nodes[a.0]
                .values
                .iter()
                .zip(&self.nodes[b.0].values)
                .map(|(&x, &y)| g * (x.to_f64() - y.to_f64()))
                .collect();
            add_to_f64(&mut grads[a.0], &delta);
        }
        if self.needs_grad(b) {
            let delta: Vec<f64> = self.nodes[a.0]
                .values
                .iter()
                .zip(&self.nodes[b.0].values)
                .map(|(&x, &y)| -g * (x.to_f64() - y.to_f64()))
                .collect();
            add_to_f64(&mut grads[b.0], &delta);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{grad_check, Tape};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn relu_all_negative_is_zero() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.param(&[4], vec![-1.0, -0.5, -3.0, -1e-9]).unwrap();
        let y = tape.relu(x);
        assert_eq!(tape.values(y), &[0.0; 4]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape: Tape<f32> = Tape::new();
        let vals: Vec<f32> = (0..6 * 9).map(|_| rng.gen_range(-8.0..8.0)).collect();
        let x = tape.param(&[6, 9], vals).unwrap();
        let y = tape.softmax(x).unwrap();
        for row in tape.values(y).chunks(9) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
        }
    }

    #[test]
    fn ce_matches_logsumexp_formulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape: Tape<f64> = Tape::new();
        let n = 5;
        let c = 7;
        let vals: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let x = tape.param(&[n, c], vals.clone()).unwrap();
        let loss = tape.ce_with_logits(x, &targets).unwrap();

        // Independent log-sum-exp evaluation.
        let mut expect = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            let row = &vals[r * c..(r + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            expect += lse - row[t];
        }
        expect /= n as f64;
        assert!((tape.scalar_value(loss) - expect).abs() < 1e-9);
    }

    #[test]
    fn bce_with_logits_matches_direct_formula() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.param(&[3], vec![2.0, -3.0, 0.0]).unwrap();
        let loss = tape
            .bce_with_logits(x, &[1.0, 0.0, 1.0])
            .unwrap();
        // -ln sigmoid(2) - ln(1 - sigmoid(-3)) - ln sigmoid(0), averaged.
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        let expect = (-(s(2.0).ln()) - (1.0 - s(-3.0)).ln() - s(0.0).ln()) / 3.0;
        assert!((tape.scalar_value(loss) - expect).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_bce_chain_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shapes = vec![vec![10usize]];
        let inits = vec![rand_vec(10, &mut rng)];
        let report = grad_check(
            |tape, ids| {
                let targets: Vec<f64> = (0..10).map(|i| (i % 2) as f64).collect();
                tape.bce_with_logits(ids[0], &targets)
            },
            &shapes,
            &inits,
            1e-3,
            1e-4,
            100,
            5,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_error);
    }

    #[test]
    fn gather_and_shape_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shapes = vec![vec![4usize, 6], vec![4usize, 3]];
        let inits: Vec<Vec<f64>> = shapes
            .iter()
            .map(|s| rand_vec(s.iter().product(), &mut rng))
            .collect();
        let report = grad_check(
            |tape, ids| {
                let picked = tape.select_rows(ids[0], &[1, 3, 1])?;
                let sliced = tape.slice_last(picked, 1, 3)?;
                let b = tape.select_rows(ids[1], &[0, 2, 2])?;
                let merged = tape.concat_last(sliced, b)?;
                let reshaped = tape.reshape(merged, &[2, 9])?;
                Ok(tape.mean(reshaped))
            },
            &shapes,
            &inits,
            1e-4,
            1e-6,
            200,
            6,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_error);
    }

    #[test]
    fn pair_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shapes = vec![vec![3usize, 4], vec![3usize, 3]];
        let inits: Vec<Vec<f64>> = shapes
            .iter()
            .map(|s| rand_vec(s.iter().product(), &mut rng))
            .collect();
        let report = grad_check(
            |tape, ids| {
                let pairs = tape.pair_concat(ids[0])?;
                let pooled = tape.mean(pairs);
                let sym = tape.sym_pairs(ids[1], &[(0, 1), (2, 0), (1, 1)])?;
                let s = tape.sum(sym);
                let both = tape.add(pooled, s)?;
                Ok(tape.sum(both))
            },
            &shapes,
            &inits,
            1e-4,
            1e-6,
            100,
            7,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_error);
    }

    #[test]
    fn mp_aggregate_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = 3;
        let c = 4;
        let shapes = vec![vec![p, c], vec![p, p, c], vec![p, p]];
        let inits: Vec<Vec<f64>> = shapes
            .iter()
            .map(|s| rand_vec(s.iter().product(), &mut rng))
            .collect();
        let report = grad_check(
            |tape, ids| {
                let agg = tape.mp_aggregate(ids[0], ids[1], ids[2])?;
                // Square via mul to exercise nonlinearity in the check.
                let sq = tape.mul(agg, agg)?;
                Ok(tape.mean(sq))
            },
            &shapes,
            &inits,
            1e-4,
            1e-5,
            200,
            8,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_error);
    }

    #[test]
    fn weighted_grid_sum_forward_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let volume = 8;
        let m = 3;
        let priors: Vec<f64> = (0..m * volume).map(|_| rng.gen_range(0.0..1.0)).collect();
        let weights = vec![0.5, 0.25, 0.25];

        let mut tape: Tape<f64> = Tape::new();
        let w = tape.param(&[m], weights.clone()).unwrap();
        let out = tape.weighted_grid_sum(w, &priors, &[2, 2, 2]).unwrap();
        for v in 0..volume {
            let expect: f64 = (0..m).map(|mi| weights[mi] * priors[mi * volume + v]).sum();
            assert!((tape.values(out)[v] - expect).abs() < 1e-12);
        }

        let priors_clone = priors.clone();
        let report = grad_check(
            move |tape, ids| {
                let out = tape.weighted_grid_sum(ids[0], &priors_clone, &[2, 2, 2])?;
                Ok(tape.sum(out))
            },
            &[vec![m]],
            &[weights],
            1e-4,
            1e-6,
            10,
            9,
        )
        .unwrap();
        assert!(report.pass);
    }

    #[test]
    fn losses_and_activations_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let shapes = vec![vec![4usize, 5], vec![12usize], vec![12usize]];
        let inits: Vec<Vec<f64>> = shapes
            .iter()
            .map(|s| rand_vec(s.iter().product(), &mut rng))
            .collect();
        let report = grad_check(
            |tape, ids| {
                let sm = tape.softmax(ids[0])?;
                let ce = tape.ce_with_logits(ids[0], &[0, 3, 2, 4])?;
                let sig = tape.sigmoid(ids[1]);
                let targets: Vec<f64> = (0..12).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect();
                let bce_p = tape.bce_probs(sig, &targets)?;
                let sm_mean = tape.mean(sm);
                let scaled = tape.scale(sm_mean, 0.7);
                let m = tape.mse(ids[1], ids[2])?;
                let t1 = tape.add(ce, bce_p)?;
                let t2 = tape.add(scaled, m)?;
                tape.add(t1, t2)
            },
            &shapes,
            &inits,
            1e-4,
            1e-5,
            300,
            10,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_error);
    }

    #[test]
    fn concat_first_splits_gradient() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.param(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = tape.param(&[2, 2, 2], (0..8).map(|i| i as f64).collect()).unwrap();
        let cat = tape.concat_first(a, b).unwrap();
        assert_eq!(tape.shape(cat), &[3, 2, 2]);
        let loss = tape.sum(cat);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[1.0; 4]);
        assert_eq!(grads.get(b).unwrap(), &[1.0; 8]);
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let mut tape: Tape<f32> = Tape::new();
        let a = tape.param(&[2, 3], vec![0.0; 6]).unwrap();
        let b = tape.param(&[3, 2], vec![0.0; 6]).unwrap();
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }
}
