//! Per-sample training loss and whole-object inference.
//!
//! Training flow: encode the (rotated-frame) partial scan, decode part slots,
//! pair targets with slots by Hungarian matching on detached costs, then
//! assemble the supervised terms on the tape. Priors are rotated with the
//! sample's ground-truth bin during training (teacher forcing); inference
//! uses the predicted bin.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Scalar, Tape, TensorId};
use crate::priorbank::{priors_for, PriorBank};
use crate::taxonomy::{PartTreeTarget, Taxonomy};
use crate::voxelgrid::{AngleBin, GridSemantics, OccupancyGrid, N_ANGLE_BINS};

use super::matching::{match_children, Matching};
use super::net::{
    argmax_bin, compose_coarse_mask, decode_part_tree, direct_decode_mask, encode_object,
    predict_orientation, refine_residual, BoundParams, FinalForm, RefineMode, TreeDecode,
};
use super::{Model, ModelError, FEATURE_DIM, PART_NODES};

/// One training example: the partial scan and its ground truth, both in the
/// sample's rotated frame.
#[derive(Debug, Clone, Copy)]
pub struct SampleTarget<'a> {
    pub scan: &'a OccupancyGrid,
    pub rotation: AngleBin,
    pub tree: &'a PartTreeTarget,
}

/// Loss terms as plain numbers, plus their weighted sum. `coarse` is `None`
/// in the direct-decoder arm, where no prior composition exists.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub semantic: f64,
    pub existence: f64,
    pub adjacency: f64,
    pub orientation: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coarse: Option<f64>,
    pub final_mask: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn zero(with_coarse: bool) -> LossBreakdown {
        LossBreakdown {
            semantic: 0.0,
            existence: 0.0,
            adjacency: 0.0,
            orientation: 0.0,
            coarse: if with_coarse { Some(0.0) } else { None },
            final_mask: 0.0,
            total: 0.0,
        }
    }

    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.semantic += other.semantic;
        self.existence += other.existence;
        self.adjacency += other.adjacency;
        self.orientation += other.orientation;
        self.coarse = match (self.coarse, other.coarse) {
            (Some(a), Some(b)) => Some(a + b),
            (None, None) => None,
            _ => panic!("mixed coarse-term presence in one accumulation"),
        };
        self.final_mask += other.final_mask;
        self.total += other.total;
    }

    pub fn scale(&mut self, f: f64) {
        self.semantic *= f;
        self.existence *= f;
        self.adjacency *= f;
        self.orientation *= f;
        if let Some(c) = self.coarse.as_mut() {
            *c *= f;
        }
        self.final_mask *= f;
        self.total *= f;
    }
}

/// Everything one training forward produces.
pub struct TrainForward {
    /// Weighted total loss (scalar node); backpropagate from here.
    pub total: TensorId,
    pub breakdown: LossBreakdown,
    /// Refiner batch statistics in evaluation order, for running-stat folds.
    pub stats: Vec<(String, BatchStats)>,
    pub matching: Matching,
}

/// Tree-level outputs shared by training and inference.
pub(crate) struct HeadOutputs {
    /// Scan as an `(R, R, R)` constant (refiner conditioning input).
    pub scan_grid: TensorId,
    pub orient_logits: TensorId,
    pub tree: TreeDecode,
}

fn sigmoid64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// IoU of two hard masks given soft values; both empty → 1.
fn mask_iou(pred: &[f64], target: &[f32]) -> f64 {
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&p, &t) in pred.iter().zip(target) {
        let p = p > 0.5;
        let t = t > 0.5;
        inter += (p && t) as u64;
        union += (p || t) as u64;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

impl Model {
    pub fn resolution(&self) -> usize {
        self.config.resolution
    }

    pub fn part_type_count(&self) -> usize {
        self.params
            .get("tree.node_sem.weight")
            .expect("semantic head exists")
            .shape[0]
    }

    pub(crate) fn forward_heads<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        p: &BoundParams,
        scan: &OccupancyGrid,
    ) -> Result<HeadOutputs, ModelError> {
        let r = self.config.resolution;
        let values: Vec<F> = scan.values().iter().map(|&v| F::from_f64(v as f64)).collect();
        let scan4 = tape.constant(&[1, r, r, r], values)?;
        let scan_grid = tape.reshape(scan4, &[r, r, r])?;
        let z = encode_object(tape, p, scan4, r)?;
        let orient_logits = predict_orientation(tape, p, z)?;
        let tree = decode_part_tree(
            tape,
            p,
            z,
            self.part_type_count(),
            self.config.ablation,
            None,
        )?;
        Ok(HeadOutputs {
            scan_grid,
            orient_logits,
            tree,
        })
    }

    /// Rotated priors for each part type appearing in the target list.
    fn rotated_priors(
        &self,
        bank: &PriorBank,
        tree: &PartTreeTarget,
        rotation: AngleBin,
    ) -> Result<BTreeMap<usize, Vec<OccupancyGrid>>, ModelError> {
        let mut cache = BTreeMap::new();
        for part in &tree.parts {
            if !cache.contains_key(&part.part_type) {
                cache.insert(part.part_type, priors_for(bank, part.part_type, rotation)?);
            }
        }
        Ok(cache)
    }

    /// Prior composition without the tape, for matching costs: softmax over
    /// the type's weight-head slice, then the convex prior combination.
    fn detached_coarse(
        &self,
        latent: &[f64],
        part_type: usize,
        priors: &[OccupancyGrid],
    ) -> Vec<f64> {
        let m = self.layout.counts[part_type];
        debug_assert_eq!(m, priors.len());
        debug_assert!(m > 0);
        let w = &self.params.get("phi.weight").expect("phi bound").values;
        let b = &self.params.get("phi.bias").expect("phi bound").values;
        let off = self.layout.offsets[part_type];
        let mut logits = vec![0.0f64; m];
        for (mi, logit) in logits.iter_mut().enumerate() {
            let row = &w[(off + mi) * FEATURE_DIM..(off + mi + 1) * FEATURE_DIM];
            *logit = b[off + mi] as f64
                + row
                    .iter()
                    .zip(latent)
                    .map(|(&wv, &lv)| wv as f64 * lv)
                    .sum::<f64>();
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut weights: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let norm: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= norm);
        let volume = priors[0].values().len();
        let mut out = vec![0.0f64; volume];
        for (wm, g) in weights.iter().zip(priors) {
            for (o, &pv) in out.iter_mut().zip(g.values()) {
                *o += wm * pv as f64;
            }
        }
        out
    }

    /// cost(target, slot) = semantic cross-entropy + (1 − coarse-mask IoU),
    /// all from detached values.
    fn matching_costs<F: Scalar>(
        &self,
        tape: &Tape<F>,
        tree_out: &TreeDecode,
        sample: &SampleTarget,
        priors: &BTreeMap<usize, Vec<OccupancyGrid>>,
        direct_probs: Option<&[Vec<f64>]>,
    ) -> Vec<Vec<f64>> {
        let t_count = self.part_type_count();
        let sem: Vec<f64> = tape
            .values(tree_out.semantic_logits)
            .iter()
            .map(|v| v.to_f64())
            .collect();
        let latents: Vec<f64> = tape
            .values(tree_out.child_latents)
            .iter()
            .map(|v| v.to_f64())
            .collect();
        let mut cost = vec![vec![0.0f64; PART_NODES]; sample.tree.parts.len()];
        // Per-slot coarse masks depend only on the candidate type, so compute
        // them once per (slot, type) rather than per (slot, target).
        let mut coarse_by_type: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
        for (ti, part) in sample.tree.parts.iter().enumerate() {
            for k in 0..PART_NODES {
                let row = &sem[k * t_count..(k + 1) * t_count];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
                let ce = lse - row[part.part_type];
                let geo = match direct_probs {
                    Some(probs) => 1.0 - mask_iou(&probs[k], part.mask.values()),
                    None => {
                        let coarse = coarse_by_type
                            .entry((k, part.part_type))
                            .or_insert_with(|| {
                                self.detached_coarse(
                                    &latents[k * FEATURE_DIM..(k + 1) * FEATURE_DIM],
                                    part.part_type,
                                    &priors[&part.part_type],
                                )
                            });
                        1.0 - mask_iou(coarse, part.mask.values())
                    }
                };
                cost[ti][k] = ce + geo;
            }
        }
        cost
    }

    /// Builds every supervised term on the tape and returns the weighted
    /// total. `fixed_matching` pins the target/slot pairing (used by the
    /// finite-difference gradient checks, where re-matching under perturbed
    /// parameters would make the loss discontinuous).
    pub(crate) fn losses_from_outputs<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        p: &BoundParams,
        heads: &HeadOutputs,
        sample: &SampleTarget,
        bank: &PriorBank,
        fixed_matching: Option<&Matching>,
    ) -> Result<TrainForward, ModelError> {
        let r = self.config.resolution;
        let flags = self.config.ablation;
        let weights = self.config.loss_weights;
        let n_targets = sample.tree.parts.len();
        assert!(
            n_targets <= PART_NODES,
            "{n_targets} targets exceed {PART_NODES} slots"
        );
        let final_form = FinalForm::from_flags(flags);

        let prior_cache = if flags.no_priors {
            BTreeMap::new()
        } else {
            self.rotated_priors(bank, sample.tree, sample.rotation)?
        };

        // Direct-decoder arm: decode all slots up front; matching reads the
        // probabilities, losses reuse the same nodes.
        let mut direct: Vec<(TensorId, TensorId)> = Vec::new();
        let mut direct_probs: Vec<Vec<f64>> = Vec::new();
        if flags.no_priors {
            for k in 0..PART_NODES {
                let pair = direct_decode_mask(tape, p, heads.tree.child_latents, k, r)?;
                direct_probs.push(tape.values(pair.1).iter().map(|v| v.to_f64()).collect());
                direct.push(pair);
            }
        }

        let matching = match fixed_matching {
            Some(m) => m.clone(),
            None => {
                let cost = self.matching_costs(
                    tape,
                    &heads.tree,
                    sample,
                    &prior_cache,
                    flags.no_priors.then_some(direct_probs.as_slice()),
                );
                match_children(&cost, PART_NODES)
            }
        };
        assert_eq!(matching.node_for_target.len(), n_targets);

        let mut stats = Vec::new();
        let mut terms: Vec<(TensorId, f64)> = Vec::new();

        // Existence: all slots, matched → 1.
        let exist_targets: Vec<F> = matching
            .target_for_node
            .iter()
            .map(|t| F::from_f64(t.is_some() as u8 as f64))
            .collect();
        let existence = tape.bce_with_logits(heads.tree.node_exist_logits, &exist_targets)?;
        terms.push((existence, weights.existence));

        // Orientation over the 8 bins.
        let orient2 = tape.reshape(heads.orient_logits, &[1, N_ANGLE_BINS])?;
        let orientation = tape.ce_with_logits(orient2, &[sample.rotation.index()])?;
        terms.push((orientation, weights.orientation));

        // Matched-only terms.
        let mut semantic = None;
        let mut adjacency = None;
        let mut coarse_mse = None;
        let mut final_bce = None;
        if n_targets > 0 {
            let matched_nodes = matching.node_for_target.clone();
            let types: Vec<usize> = sample.tree.parts.iter().map(|p| p.part_type).collect();
            let sel = tape.select_rows(heads.tree.semantic_logits, &matched_nodes)?;
            let sem = tape.ce_with_logits(sel, &types)?;
            terms.push((sem, weights.semantic));
            semantic = Some(sem);

            if n_targets >= 2 {
                let mut pairs = Vec::new();
                let mut adj_targets: Vec<F> = Vec::new();
                for ti in 0..n_targets {
                    for tj in (ti + 1)..n_targets {
                        let (a, b) = (matched_nodes[ti], matched_nodes[tj]);
                        pairs.push((a.min(b), a.max(b)));
                        adj_targets
                            .push(F::from_f64(sample.tree.adjacent(ti, tj) as u8 as f64));
                    }
                }
                let sym = tape.sym_pairs(heads.tree.edge_logits, &pairs)?;
                let adj = tape.bce_with_logits(sym, &adj_targets)?;
                terms.push((adj, weights.adjacency));
                adjacency = Some(adj);
            }

            let mut mse_terms = Vec::new();
            let mut bce_terms = Vec::new();
            for (ti, part) in sample.tree.parts.iter().enumerate() {
                let k = matching.node_for_target[ti];
                let target_vals: Vec<F> = part
                    .mask
                    .values()
                    .iter()
                    .map(|&v| F::from_f64(v as f64))
                    .collect();
                let (coarse_probs, coarse_logits) = if flags.no_priors {
                    let (logits, probs) = direct[k];
                    (probs, Some(logits))
                } else {
                    let (_, mask) = compose_coarse_mask(
                        tape,
                        p,
                        heads.tree.child_latents,
                        k,
                        part.part_type,
                        &self.layout,
                        &prior_cache[&part.part_type],
                    )?;
                    (mask, None)
                };
                if !flags.no_priors {
                    let target = tape.constant(&[r, r, r], target_vals.clone())?;
                    mse_terms.push(tape.mse(coarse_probs, target)?);
                }
                let bce = match final_form {
                    FinalForm::CoarseOnly => match coarse_logits {
                        // Direct head: identical value, better conditioning.
                        Some(logits) => tape.bce_with_logits(logits, &target_vals)?,
                        None => tape.bce_probs(coarse_probs, &target_vals)?,
                    },
                    FinalForm::SigmoidAdd | FinalForm::AdditiveClamp | FinalForm::SigmoidResidual => {
                        let (residual, mut batch) = refine_residual(
                            tape,
                            p,
                            coarse_probs,
                            heads.scan_grid,
                            RefineMode::Train,
                            None,
                        )?;
                        stats.append(&mut batch);
                        match final_form {
                            FinalForm::SigmoidResidual => {
                                tape.bce_with_logits(residual, &target_vals)?
                            }
                            FinalForm::AdditiveClamp => {
                                let pre = tape.add(coarse_probs, residual)?;
                                tape.bce_probs(pre, &target_vals)?
                            }
                            _ => {
                                let pre = tape.add(coarse_probs, residual)?;
                                tape.bce_with_logits(pre, &target_vals)?
                            }
                        }
                    }
                };
                bce_terms.push(bce);
            }
            let mean_of = |tape: &mut Tape<F>, ids: &[TensorId]| -> Result<TensorId, ModelError> {
                let mut acc = ids[0];
                for &id in &ids[1..] {
                    acc = tape.add(acc, id)?;
                }
                Ok(tape.scale(acc, 1.0 / ids.len() as f64))
            };
            if !mse_terms.is_empty() {
                let m = mean_of(tape, &mse_terms)?;
                terms.push((m, weights.coarse));
                coarse_mse = Some(m);
            }
            let fb = mean_of(tape, &bce_terms)?;
            terms.push((fb, weights.final_mask));
            final_bce = Some(fb);
        }

        let mut total = {
            let (first, w) = terms[0];
            tape.scale(first, w)
        };
        for &(term, w) in &terms[1..] {
            let scaled = tape.scale(term, w);
            total = tape.add(total, scaled)?;
        }

        let breakdown = LossBreakdown {
            semantic: semantic.map_or(0.0, |id| tape.scalar_value(id)),
            existence: tape.scalar_value(existence),
            adjacency: adjacency.map_or(0.0, |id| tape.scalar_value(id)),
            orientation: tape.scalar_value(orientation),
            coarse: if flags.no_priors {
                None
            } else {
                Some(coarse_mse.map_or(0.0, |id| tape.scalar_value(id)))
            },
            final_mask: final_bce.map_or(0.0, |id| tape.scalar_value(id)),
            total: tape.scalar_value(total),
        };
        Ok(TrainForward {
            total,
            breakdown,
            stats,
            matching,
        })
    }

    /// Full training forward for one sample: heads, matching, loss terms.
    pub fn training_losses<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        p: &BoundParams,
        sample: &SampleTarget,
        bank: &PriorBank,
        fixed_matching: Option<&Matching>,
    ) -> Result<TrainForward, ModelError> {
        let heads = self.forward_heads(tape, p, sample.scan)?;
        self.losses_from_outputs(tape, p, &heads, sample, bank, fixed_matching)
    }

    /// Blends freshly observed refiner batch statistics into the running
    /// buffers: running = momentum·running + (1−momentum)·batch.
    pub fn fold_batch_stats(
        &mut self,
        stats: &[(String, BatchStats)],
        momentum: f64,
    ) -> Result<(), ModelError> {
        for (name, batch) in stats {
            for (suffix, fresh) in [("running_mean", &batch.mean), ("running_var", &batch.var)] {
                let buf = self.params.get_mut(&format!("{name}.{suffix}"))?;
                for (slot, &value) in buf.values.iter_mut().zip(fresh) {
                    *slot = (momentum * *slot as f64 + (1.0 - momentum) * value) as f32;
                }
            }
        }
        Ok(())
    }
}

/// One kept part from inference.
#[derive(Debug, Clone)]
pub struct InferredPart {
    /// Decoder slot this part came from.
    pub node: usize,
    pub part_type: usize,
    /// σ(existence logit).
    pub existence: f64,
    /// Soft coarse mask (prior composition, or direct decode in that arm).
    pub coarse: OccupancyGrid,
    /// Soft final mask.
    pub mask: OccupancyGrid,
}

/// Inference output for one object.
#[derive(Debug, Clone)]
pub struct InferredTree {
    pub class: usize,
    /// Predicted orientation bin (lowest-index argmax).
    pub rotation: AngleBin,
    pub orientation_logits: Vec<f64>,
    /// Parts with σ(existence) > 0.5, in slot order.
    pub parts: Vec<InferredPart>,
    /// Symmetrized adjacency probabilities > 0.5 among kept parts
    /// (index-aligned with `parts`).
    pub adjacency: Vec<Vec<bool>>,
    /// Mean σ(existence) over kept parts; 0 when none kept.
    pub confidence: f64,
}

impl Model {
    /// Runs the full pipeline on one scan: orientation, part slots, semantic
    /// types restricted to the class's legal (and prior-backed) types, masks
    /// through composition and refinement in evaluation mode.
    pub fn infer(
        &self,
        taxonomy: &Taxonomy,
        bank: &PriorBank,
        scan: &OccupancyGrid,
        class: usize,
    ) -> Result<InferredTree, ModelError> {
        let r = self.config.resolution;
        let flags = self.config.ablation;
        let final_form = FinalForm::from_flags(flags);
        let mut tape: Tape<f32> = Tape::new();
        let p = BoundParams::bind(&mut tape, &self.params)?;
        let heads = self.forward_heads(&mut tape, &p, scan)?;

        let orientation_logits: Vec<f64> = tape
            .values(heads.orient_logits)
            .iter()
            .map(|v| v.to_f64())
            .collect();
        let rotation =
            AngleBin::new(argmax_bin(&orientation_logits)).expect("argmax over 8 bins");

        // Candidate types: legal for the class, and present in the bank when
        // composition needs priors.
        let legal: Vec<usize> = taxonomy
            .class(class)
            .part_types()
            .iter()
            .copied()
            .filter(|&t| flags.no_priors || self.layout.counts[t] > 0)
            .collect();
        assert!(
            !legal.is_empty(),
            "class {class} has no usable part types"
        );

        let exist: Vec<f64> = tape
            .values(heads.tree.node_exist_logits)
            .iter()
            .map(|v| sigmoid64(v.to_f64()))
            .collect();
        let sem: Vec<f64> = tape
            .values(heads.tree.semantic_logits)
            .iter()
            .map(|v| v.to_f64())
            .collect();
        let t_count = self.part_type_count();

        let mut parts = Vec::new();
        for k in 0..PART_NODES {
            if exist[k] <= 0.5 {
                continue;
            }
            let row = &sem[k * t_count..(k + 1) * t_count];
            let part_type = legal
                .iter()
                .copied()
                .max_by(|&a, &b| {
                    row[a]
                        .partial_cmp(&row[b])
                        .unwrap()
                        .then(b.cmp(&a)) // lowest index wins ties
                })
                .unwrap();
            let coarse_id = if flags.no_priors {
                direct_decode_mask(&mut tape, &p, heads.tree.child_latents, k, r)?.1
            } else {
                let priors = priors_for(bank, part_type, rotation)?;
                compose_coarse_mask(
                    &mut tape,
                    &p,
                    heads.tree.child_latents,
                    k,
                    part_type,
                    &self.layout,
                    &priors,
                )?
                .1
            };
            let final_id = match final_form {
                FinalForm::CoarseOnly => coarse_id,
                form => {
                    let (residual, _) = refine_residual(
                        &mut tape,
                        &p,
                        coarse_id,
                        heads.scan_grid,
                        RefineMode::Eval(&self.params),
                        None,
                    )?;
                    match form {
                        FinalForm::SigmoidResidual => tape.sigmoid(residual),
                        FinalForm::AdditiveClamp => tape.add(coarse_id, residual)?,
                        _ => {
                            let pre = tape.add(coarse_id, residual)?;
                            tape.sigmoid(pre)
                        }
                    }
                }
            };
            let extract = |tape: &Tape<f32>, id: TensorId| -> OccupancyGrid {
                let values: Vec<f32> = tape
                    .values(id)
                    .iter()
                    .map(|&v| v.clamp(0.0, 1.0))
                    .collect();
                OccupancyGrid::from_values(r, GridSemantics::Soft, values)
                    .expect("clamped probabilities are valid")
            };
            parts.push(InferredPart {
                node: k,
                part_type,
                existence: exist[k],
                coarse: extract(&tape, coarse_id),
                mask: extract(&tape, final_id),
            });
        }

        let edges: Vec<f64> = tape
            .values(heads.tree.edge_logits)
            .iter()
            .map(|v| v.to_f64())
            .collect();
        let n = parts.len();
        let mut adjacency = vec![vec![false; n]; n];
        for i in 0..n {
            for j in (i + 1)..n {
                let (a, b) = (parts[i].node, parts[j].node);
                let sym = 0.5 * (edges[a * PART_NODES + b] + edges[b * PART_NODES + a]);
                let adjacent = sigmoid64(sym) > 0.5;
                adjacency[i][j] = adjacent;
                adjacency[j][i] = adjacent;
            }
        }
        let confidence = if parts.is_empty() {
            0.0
        } else {
            parts.iter().map(|p| p.existence).sum::<f64>() / parts.len() as f64
        };
        Ok(InferredTree {
            class,
            rotation,
            orientation_logits,
            parts,
            adjacency,
            confidence,
        })
    }
}
