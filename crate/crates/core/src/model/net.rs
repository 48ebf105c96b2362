//! Forward passes for every sub-network, written against the tape so the
//! same code runs in f32 for training and f64 for gradient checking.

use std::collections::BTreeMap;

use crate::autodiff::{bad_arg, BatchStats, Scalar, Tape, TensorId};
use crate::autodiff::{default_group_count, AdError};
#[cfg(test)]
use crate::voxelgrid::AngleBin;
use crate::voxelgrid::OccupancyGrid;

use super::params::ParamStore;
use super::{direct_decoder_stages, AblationFlags, BankLayout, FEATURE_DIM, PART_NODES};

/// Layer-name → output-shape trace used by the architecture audit.
pub type ShapeLog = Vec<(String, Vec<usize>)>;

/// Parameter tensors bound to one tape, keyed by store name.
pub struct BoundParams {
    map: BTreeMap<String, TensorId>,
}

impl BoundParams {
    /// Binds every store entry: trainable tensors as gradient-carrying
    /// leaves, buffers as constants.
    pub fn bind<F: Scalar>(
        tape: &mut Tape<F>,
        store: &ParamStore,
    ) -> Result<BoundParams, AdError> {
        let mut map = BTreeMap::new();
        for (name, p) in store.iter() {
            let values: Vec<F> = p.values.iter().map(|&v| F::from_f64(v as f64)).collect();
            let id = if p.trainable {
                tape.param(&p.shape, values)?
            } else {
                tape.constant(&p.shape, values)?
            };
            map.insert(name.clone(), id);
        }
        Ok(BoundParams { map })
    }

    /// Binds the store with every tensor as a constant except the named
    /// overrides, which map to caller-owned leaves. Lets a gradient check
    /// differentiate one parameter group while the rest stay fixed.
    pub fn bind_with_overrides<F: Scalar>(
        tape: &mut Tape<F>,
        store: &ParamStore,
        overrides: &[(&str, TensorId)],
    ) -> Result<BoundParams, AdError> {
        let mut map = BTreeMap::new();
        for (name, p) in store.iter() {
            if let Some(&(_, id)) = overrides.iter().find(|(n, _)| n == name) {
                map.insert(name.clone(), id);
                continue;
            }
            let values: Vec<F> = p.values.iter().map(|&v| F::from_f64(v as f64)).collect();
            let id = tape.constant(&p.shape, values)?;
            map.insert(name.clone(), id);
        }
        Ok(BoundParams { map })
    }

    /// Wraps pre-created leaves (the gradient-check harness owns them).
    pub fn from_pairs(names: &[String], ids: &[TensorId]) -> BoundParams {
        assert_eq!(names.len(), ids.len());
        BoundParams {
            map: names.iter().cloned().zip(ids.iter().copied()).collect(),
        }
    }

    pub fn id(&self, name: &str) -> TensorId {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn get(&self, name: &str) -> Option<TensorId> {
        self.map.get(name).copied()
    }
}

fn note(audit: &mut Option<&mut ShapeLog>, name: &str, shape: &[usize]) {
    if let Some(log) = audit.as_deref_mut() {
        log.push((name.to_string(), shape.to_vec()));
    }
}

fn conv_block<F: Scalar>(
    tape: &mut Tape<F>,
    p: &BoundParams,
    x: TensorId,
    conv: &str,
    norm: &str,
    stride: usize,
    padding: usize,
    audit: &mut Option<&mut ShapeLog>,
) -> Result<TensorId, AdError> {
    let x = tape.conv3d(
        x,
        p.id(&format!("{conv}.weight")),
        Some(p.id(&format!("{conv}.bias"))),
        stride,
        padding,
    )?;
    note(audit, conv, tape.shape(x));
    let channels = tape.shape(x)[0];
    let x = tape.group_norm(
        x,
        p.id(&format!("{norm}.gamma")),
        p.id(&format!("{norm}.beta")),
        default_group_count(channels),
    )?;
    note(audit, norm, tape.shape(x));
    let x = tape.relu(x);
    note(audit, &format!("{norm}.relu"), tape.shape(x));
    Ok(x)
}

fn encoder_stages<F: Scalar>(
    tape: &mut Tape<F>,
    p: &BoundParams,
    scan: TensorId,
    resolution: usize,
    mut audit: Option<&mut ShapeLog>,
) -> Result<TensorId, AdError> {
    if !matches!(resolution, 16 | 32 | 64) {
        return Err(bad_arg(
            "encode_object",
            format!("unsupported resolution {resolution}"),
        ));
    }
    if tape.shape(scan) != [1, resolution, resolution, resolution] {
        return Err(bad_arg(
            "encode_object",
            format!(
                "input shaped {:?}, expected (1, {resolution}, {resolution}, {resolution})",
                tape.shape(scan)
            ),
        ));
    }
    let mut x = conv_block(tape, p, scan, "encoder.conv0", "encoder.gn0", 2, 2, &mut audit)?;
    if resolution == 64 {
        // Extra halving keeps the rest of the stack identical to the 32³ path.
        x = tape.maxpool3d(x, 2)?;
        note(&mut audit, "encoder.pool_extra", tape.shape(x));
    }
    x = tape.maxpool3d(x, 2)?;
    note(&mut audit, "encoder.pool1", tape.shape(x));
    x = conv_block(tape, p, x, "encoder.conv1", "encoder.gn1", 1, 1, &mut audit)?;
    x = tape.maxpool3d(x, 2)?;
    note(&mut audit, "encoder.pool2", tape.shape(x));
    x = conv_block(tape, p, x, "encoder.conv2", "encoder.gn2", 2, 2, &mut audit)?;
    if resolution >= 32 {
        // At 16³ the previous block already lands on 1³.
        x = tape.maxpool3d(x, 2)?;
        note(&mut audit, "encoder.pool3", tape.shape(x));
    }
    x = conv_block(tape, p, x, "encoder.conv3", "encoder.gn3", 1, 0, &mut audit)?;
    let z = tape.reshape(x, &[FEATURE_DIM])?;
    note(&mut audit, "encoder.flat", tape.shape(z));
    Ok(z)
}

/// Encodes a `(1, R, R, R)` scan grid into the 128-wide object feature.
pub fn encode_object<F: Scalar>(
    tape: &mut Tape<F>,
    p: &BoundParams,
    scan: TensorId,
    resolution: usize,
) -> Result<TensorId, AdError> {
    encoder_stages(tape, p, scan, resolution, None)
}

/// Same as [`encode_object`] but records every layer's output shape.
pub fn encode_object_audit<F: Scalar>(
    tape: &mut Tape<F>,
    p: &BoundParams,
    scan: TensorId,
    resolution: usize,
) -> Result<(TensorId, ShapeLog), AdError> {
    let mut log = ShapeLog::new();
    let z = encoder_stages(tape, p, scan, resolution, Some(&mut log))?;
    Ok((z, log))
}

/// Orientation head: 128 → 128 → 8 logits over the angle bins. Argmax ties
/// break to the lowest bin index.
pub fn predict_orientation<F: Scalar>(
    tape: &mut Tape<F>,
    p: &BoundParams,
    z: TensorId,
) -> Result<TensorId, AdError> {
    let h = tape.linear(z, p.id("orient.lin0.weight"), Some(p.id("orient.lin0.bias")))?;
    let h = tape.relu(h);
    tape.linear(h, p.id("orient.lin1.weight"), Some(p.id("orient.lin1.bias")))
}

/// Lowest-index argmax over raw logit values.
pub fn argmax_bin(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

pub struct TreeDecode {
    /// Raw per-slot latents, `(10, 128)`.
    pub latents: TensorId,
    /// Slot existence logits, `(10,)`.
    pub node_exist_logits: TensorId,
    /// Hidden pair features feeding message passing, `(10, 10, 128)`.
    pub edge_hidden: TensorId,
    /// Raw adjacency logits, `(10, 10)`; consumers symmetrize.
    pub edge_logits: TensorId,
    /// Per-slot semantic logits over all part types, `(10, |types|)`.
    pub semantic_logits: TensorId,
    /// Final child features z', `(10, 128)`.
    pub child_latents: TensorId,
}

/// Decodes the object feature into 10 part slots: latents, existence,
/// pairwise adjacency, semantics, and downstream child features.
pub fn decode_part_tree<F: Scalar>(
    tape: &mut Tape<F>,
    p: &BoundParams,
    z: TensorId,
    part_type_count: usize,
    flags: AblationFlags,
    mut audit: Option<&mut ShapeLog>,
) -> Result<TreeDecode, AdError> {
    let n = PART_NODES;
    let h = tape.linear(z, p.id("tree.lin0.weight"), Some(p.id("tree.lin0.bias")))?;
    let h = tape.relu(h);
    note(&mut audit, "tree.lin0", tape.shape(h));
    let latents = tape.reshape(h, &[n, FEATURE_DIM])?;
    note(&mut audit, "tree.reshape0", tape.shape(latents));

    let ne = tape.linear(
        latents,
        p.id("tree.node_exist.weight"),
        Some(p.id("tree.node_exist.bias")),
    )?;
    note(&mut audit, "tree.node_exist", tape.shape(ne));
    let node_exist_logits = tape.reshape(ne, &[n])?;

    let pairs = tape.pair_concat(latents)?;
    note(&mut audit, "tree.concat0", tape.shape(pairs));
    let flat = tape.reshape(pairs, &[n * n, 2 * FEATURE_DIM])?;
    let eh = tape.linear(flat, p.id("tree.lin1.weight"), Some(p.id("tree.lin1.bias")))?;
    let eh = tape.relu(eh);
    let edge_hidden = tape.reshape(eh, &[n, n, FEATURE_DIM])?;
    note(&mut audit, "tree.lin1", tape.shape(edge_hidden));
    let el = tape.linear(
        eh,
        p.id("tree.edge_exist.weight"),
        Some(p.id("tree.edge_exist.bias")),
    )?;
    note(&mut audit, "tree.edge_exist", &[n, n, 1]);
    let edge_logits = tape.reshape(el, &[n, n])?;

    let agg = if flags.no_message_passing {
        // Pass-through arm: node latent padded with zeros to the same width.
        let pad = tape.zeros(&[n, 2 * FEATURE_DIM]);
        tape.concat_last(latents, pad)?
    } else {
        tape.mp_aggregate(latents, edge_hidden, edge_logits)?
    };
    note(&mut audit, "tree.mp", tape.shape(agg));

    let sem_hidden = tape.linear(agg, p.id("tree.lin2.weight"), Some(p.id("tree.lin2.bias")))?;
    let sem_hidden = tape.relu(sem_hidden);
    note(&mut audit, "tree.lin2", tape.shape(sem_hidden));
    let semantic_logits = tape.linear(
        sem_hidden,
        p.id("tree.node_sem.weight"),
        Some(p.id("tree.node_sem.bias")),
    )?;
    note(&mut audit, "tree.node_sem", tape.shape(semantic_logits));
    debug_assert_eq!(tape.shape(semantic_logits), [n, part_type_count]);

    let cl = tape.linear(
        sem_hidden,
        p.id("tree.lin3.weight"),
        Some(p.id("tree.lin3.bias")),
    )?;
    let child_latents = tape.relu(cl);
    note(&mut audit, "tree.lin3", tape.shape(child_latents));

    Ok(TreeDecode {
        latents,
        node_exist_logits,
        edge_hidden,
        edge_logits,
        semantic_logits,
        child_latents,
    })
}

/// Softmax-weighted convex combination of one part type's rotated priors for
/// one slot. Returns `(weights (1, M_t), mask (R, R, R))`.
///
/// `rotated_priors` must be the bank's centroids for `part_type`, already
/// rotated into the sample frame, in bank order.
pub fn compose_coarse_mask<F: Scalar>(
    tape: &mut Tape<F>,
    p: &BoundParams,
    child_latents: TensorId,
    node: usize,
    part_type: usize,
    layout: &BankLayout,
    rotated_priors: &[OccupancyGrid],
) -> Result<(TensorId, TensorId), AdError> {
    let m = layout.counts[part_type];
    if m == 0 {
        return Err(bad_arg(
            "compose_coarse_mask",
            format!("part type {part_type} has no priors in the bank"),
        ));
    }
    if rotated_priors.len() != m {
        return Err(bad_arg(
            "compose_coarse_mask",
            format!("{} rotated priors for M_t = {m}", rotated_priors.len()),
        ));
    }
    let r = rotated_priors[0].resolution();
    let row = tape.select_rows(child_latents, &[node])?;
    let all = tape.linear(row, p.id("phi.weight"), Some(p.id("phi.bias")))?;
    let slice = tape.slice_last(all, layout.offsets[part_type], m)?;
    let weights = tape.softmax(slice)?;
    let mut prior_values = Vec::with_capacity(m * r * r * r);
    for g in rotated_priors {
        prior_values.extend(g.values().iter().map(|&v| F::from_f64(v as f64)));
    }
    let mask = tape.weighted_grid_sum(weights, &prior_values, &[r, r, r])?;
    Ok((weights, mask))
}

/// Ablation mask head: decodes one slot's latent straight to a voxel grid
/// through transposed convolutions. Returns `(logits, probabilities)`, both
/// `(R, R, R)`.
pub fn direct_decode_mask<F: Scalar>(
    tape: &mut Tape<F>,
    p: &BoundParams,
    child_latents: TensorId,
    node: usize,
    resolution: usize,
) -> Result<(TensorId, TensorId), AdError> {
    let row = tape.select_rows(child_latents, &[node])?;
    let h = tape.linear(row, p.id("direct.lin.weight"), Some(p.id("direct.lin.bias")))?;
    let h = tape.relu(h);
    let mut x = tape.reshape(h, &[64, 2, 2, 2])?;
    let stages = direct_decoder_stages(resolution);
    let last = stages.len() - 1;
    for (i, _) in stages.iter().enumerate() {
        x = tape.conv_transpose3d(
            x,
            p.id(&format!("direct.tconv{i}.weight")),
            Some(p.id(&format!("direct.tconv{i}.bias"))),
            2,
            1,
        )?;
        if i != last {
            x = tape.relu(x);
        }
    }
    let logits = tape.reshape(x, &[resolution, resolution, resolution])?;
    let probs = tape.sigmoid(logits);
    Ok((logits, probs))
}

/// Whether refiner normalization uses batch statistics (training) or the
/// store's running statistics (inference).
pub enum RefineMode<'a> {
    Train,
    Eval(&'a ParamStore),
}

fn refiner_norm<F: Scalar>(
    tape: &mut Tape<F>,
    p: &BoundParams,
    x: TensorId,
    name: &str,
    mode: &RefineMode,
    stats: &mut Vec<(String, BatchStats)>,
) -> Result<TensorId, AdError> {
    let gamma = p.id(&format!("{name}.gamma"));
    let beta = p.id(&format!("{name}.beta"));
    match mode {
        RefineMode::Train => {
            let (out, batch) = tape.batch_norm_train(x, gamma, beta)?;
            stats.push((name.to_string(), batch));
            Ok(out)
        }
        RefineMode::Eval(store) => {
            let to_f64 = |suffix: &str| -> Vec<f64> {
                store
                    .get(&format!("{name}.{suffix}"))
                    .unwrap_or_else(|_| panic!("{name}.{suffix} missing"))
                    .values
                    .iter()
                    .map(|&v| v as f64)
                    .collect()
            };
            tape.batch_norm_eval(x, gamma, beta, &to_f64("running_mean"), &to_f64("running_var"))
        }
    }
}

/// Scan-conditioned residual stack: concat(coarse, scan) through three 3³
/// conv+norm+ReLU blocks and a 1³ projection. Returns the residual grid and
/// the batch statistics gathered in training mode.
pub fn refine_residual<F: Scalar>(
    tape: &mut Tape<F>,
    p: &BoundParams,
    coarse: TensorId,
    scan: TensorId,
    mode: RefineMode,
    mut audit: Option<&mut ShapeLog>,
) -> Result<(TensorId, Vec<(String, BatchStats)>), AdError> {
    let cs = tape.shape(coarse).to_vec();
    if cs.len() != 3 || tape.shape(scan) != cs {
        return Err(bad_arg(
            "refine_residual",
            format!("coarse {:?} vs scan {:?}", cs, tape.shape(scan)),
        ));
    }
    let r = cs[0];
    let c = tape.reshape(coarse, &[1, r, r, r])?;
    let s = tape.reshape(scan, &[1, r, r, r])?;
    let mut x = tape.concat_first(c, s)?;
    note(&mut audit, "refiner.concat0", tape.shape(x));
    let mut stats = Vec::new();
    let blocks = [("refiner.conv0", "refiner.bn0"), ("refiner.conv1", "refiner.bn1"), ("refiner.conv2", "refiner.bn2")];
    for (conv, bn) in blocks {
        x = tape.conv3d(
            x,
            p.id(&format!("{conv}.weight")),
            Some(p.id(&format!("{conv}.bias"))),
            1,
            1,
        )?;
        note(&mut audit, conv, tape.shape(x));
        x = refiner_norm(tape, p, x, bn, &mode, &mut stats)?;
        note(&mut audit, bn, tape.shape(x));
        x = tape.relu(x);
        note(&mut audit, &format!("{bn}.relu"), tape.shape(x));
    }
    x = tape.conv3d(
        x,
        p.id("refiner.conv3.weight"),
        Some(p.id("refiner.conv3.bias")),
        1,
        0,
    )?;
    note(&mut audit, "refiner.conv3", tape.shape(x));
    let residual = tape.reshape(x, &[r, r, r])?;
    Ok((residual, stats))
}

/// How the final mask combines coarse and residual, per ablation flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinalForm {
    /// sigmoid(coarse + residual)
    SigmoidAdd,
    /// sigmoid(residual)
    SigmoidResidual,
    /// coarse unchanged (refiner unused)
    CoarseOnly,
    /// coarse + residual, clamped to probabilities at the loss/extraction
    AdditiveClamp,
}

impl FinalForm {
    pub fn from_flags(flags: AblationFlags) -> FinalForm {
        if flags.no_refine {
            FinalForm::CoarseOnly
        } else if flags.refine_absolute {
            FinalForm::SigmoidResidual
        } else if flags.additive_final {
            FinalForm::AdditiveClamp
        } else {
            FinalForm::SigmoidAdd
        }
    }
}
