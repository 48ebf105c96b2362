//! The completion networks and their losses: object encoder, orientation
//! head, part-tree decoder with message passing, prior-weight head, direct
//! mask decoder (ablation), scan-conditioned refiner, slot matching, and the
//! per-sample training loss.

mod matching;
mod net;
pub mod params;
mod pipeline;

pub use matching::{hungarian, match_children, Matching};
pub use net::{
    compose_coarse_mask, decode_part_tree, direct_decode_mask, encode_object,
    encode_object_audit, predict_orientation, refine_residual, BoundParams, FinalForm,
    RefineMode, ShapeLog, TreeDecode,
};
pub use params::{Param, ParamError, ParamStore};
pub use pipeline::{InferredPart, InferredTree, LossBreakdown, SampleTarget, TrainForward};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::priorbank::PriorBank;
use crate::taxonomy::Taxonomy;

/// Fixed number of child slots decoded per object.
pub const PART_NODES: usize = 10;
/// Width of the object feature and all decoder latents.
pub const FEATURE_DIM: usize = 128;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{0}")]
    Param(#[from] ParamError),
    #[error("autodiff: {0}")]
    Ad(#[from] crate::autodiff::AdError),
    #[error("prior bank: {0}")]
    Prior(#[from] crate::priorbank::PriorError),
    #[error("unsupported resolution {0} (expected 16, 32 or 64)")]
    BadResolution(usize),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("prior bank has no priors at all")]
    EmptyBank,
    #[error("config parse: {0}")]
    ConfigParse(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-term multipliers for the training loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub semantic: f64,
    pub existence: f64,
    pub adjacency: f64,
    pub orientation: f64,
    pub coarse: f64,
    pub final_mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            semantic: 1.0,
            existence: 1.0,
            adjacency: 1.0,
            orientation: 1.0,
            coarse: 1.0,
            final_mask: 1.0,
        }
    }
}

/// Independent switches selecting alternative computation paths.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    /// Replace prior composition with a direct transposed-conv mask decoder;
    /// the coarse-MSE loss term is absent in this arm.
    pub no_priors: bool,
    /// Replace edge aggregation with the node latent padded by zeros.
    pub no_message_passing: bool,
    /// Final mask = coarse mask; the refiner never runs.
    pub no_refine: bool,
    /// Final mask = sigmoid(residual): the refiner replaces rather than adds.
    pub refine_absolute: bool,
    /// Final mask = clamp(coarse + residual) with no sigmoid (the additive
    /// formula without an activation; off by default).
    pub additive_final: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub resolution: usize,
    /// Hex SHA-256 of the taxonomy document this model was built against.
    pub taxonomy_hash: String,
    /// Clusters per part type requested when the bank was built.
    pub prior_k: usize,
    /// Hex SHA-256 of the serialized prior bank.
    pub bank_hash: String,
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default)]
    pub ablation: AblationFlags,
}

impl ModelConfig {
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_toml_str(s: &str) -> Result<Self, ModelError> {
        let cfg: ModelConfig =
            toml::from_str(s).map_err(|e| ModelError::ConfigParse(e.to_string()))?;
        if !matches!(cfg.resolution, 16 | 32 | 64) {
            return Err(ModelError::BadResolution(cfg.resolution));
        }
        Ok(cfg)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_toml_string())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ModelError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

/// Where each part type's priors sit inside the flat prior-weight head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BankLayout {
    /// Priors per part type (0 for types absent from the bank).
    pub counts: Vec<usize>,
    /// Start offset of each type's block in the concatenated weight vector.
    pub offsets: Vec<usize>,
    pub total: usize,
}

impl BankLayout {
    pub fn from_bank(bank: &PriorBank, part_count: usize) -> BankLayout {
        let mut counts = vec![0usize; part_count];
        for t in bank.part_types() {
            if t < part_count {
                counts[t] = bank.prior_count(t).expect("listed type");
            }
        }
        let mut offsets = vec![0usize; part_count];
        let mut total = 0;
        for (t, &c) in counts.iter().enumerate() {
            offsets[t] = total;
            total += c;
        }
        BankLayout {
            counts,
            offsets,
            total,
        }
    }
}

/// Networks plus their configuration. All parameter groups exist regardless
/// of ablation flags, so checkpoints share one schema and toggling a flag
/// never changes another path's initial values.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub layout: BankLayout,
    pub params: ParamStore,
}

/// Transposed-conv stages (c_in, c_out) that upsample 2³ to `resolution`,
/// doubling the side per stage (kernel 4, stride 2, padding 1).
pub fn direct_decoder_stages(resolution: usize) -> Vec<(usize, usize)> {
    let mut stages = Vec::new();
    let mut side = 2;
    let mut c = 64;
    while side < resolution {
        let last = side * 2 >= resolution;
        let c_out = if last { 1 } else { (c / 2).max(1) };
        stages.push((c, c_out));
        c = c_out;
        side *= 2;
    }
    stages
}

/// Rescaled copy of a parameter table used as the operating point for
/// finite-difference gradient checks.
///
/// A ±ε weight step shifts pre-activations by O(ε·sensitivity); any ReLU
/// kink or max-pool near-tie inside that band makes the difference quotient
/// diverge from the (correct) subgradient. Every conv stack here feeds a
/// normalizer, so scaling those groups up widens the margins around kinks
/// and ties without changing what the network computes downstream; the
/// direct consumers of the last normalized feature are counter-scaled to
/// keep the heads and losses at their usual operating point. Training never
/// uses this transform.
pub fn fd_conditioned_params(
    store: &ParamStore,
    scale: f64,
) -> Result<ParamStore, ParamError> {
    assert!(scale.is_finite() && scale > 0.0);
    let mut out = store.clone();
    let mut rescale = |name: String, factor: f64| -> Result<(), ParamError> {
        for v in &mut out.get_mut(&name)?.values {
            *v = (*v as f64 * factor) as f32;
        }
        Ok(())
    };
    for i in 0..4 {
        for leaf in ["weight", "bias"] {
            rescale(format!("encoder.conv{i}.{leaf}"), scale)?;
        }
        for leaf in ["gamma", "beta"] {
            rescale(format!("encoder.gn{i}.{leaf}"), scale)?;
        }
    }
    for i in 0..3 {
        for leaf in ["weight", "bias"] {
            rescale(format!("refiner.conv{i}.{leaf}"), scale)?;
        }
        for leaf in ["gamma", "beta"] {
            rescale(format!("refiner.bn{i}.{leaf}"), scale)?;
        }
    }
    // Exact counter-scales: lin(s·z, W/s, b) = lin(z, W, b).
    for name in ["orient.lin0.weight", "tree.lin0.weight", "refiner.conv3.weight"] {
        rescale(name.to_string(), 1.0 / scale)?;
    }
    Ok(out)
}

impl Model {
    /// Creates every parameter group with `(seed, name)`-keyed initializers.
    pub fn new(
        config: ModelConfig,
        taxonomy: &Taxonomy,
        bank: &PriorBank,
        seed: u64,
    ) -> Result<Model, ModelError> {
        if !matches!(config.resolution, 16 | 32 | 64) {
            return Err(ModelError::BadResolution(config.resolution));
        }
        if bank.resolution() != config.resolution {
            return Err(ModelError::ConfigMismatch(format!(
                "bank resolution {} vs model resolution {}",
                bank.resolution(),
                config.resolution
            )));
        }
        if taxonomy.content_hash_hex() != config.taxonomy_hash {
            return Err(ModelError::ConfigMismatch(
                "taxonomy hash differs from config".into(),
            ));
        }
        if bank.content_hash_hex() != config.bank_hash {
            return Err(ModelError::ConfigMismatch(
                "prior bank hash differs from config".into(),
            ));
        }
        let layout = BankLayout::from_bank(bank, taxonomy.part_count());
        if layout.total == 0 {
            return Err(ModelError::EmptyBank);
        }

        let mut p = ParamStore::new();
        let conv = |p: &mut ParamStore,
                    name: &str,
                    c_out: usize,
                    c_in: usize,
                    k: usize|
         -> Result<(), ParamError> {
            let fan = c_in * k * k * k;
            p.init_uniform(&format!("{name}.weight"), &[c_out, c_in, k, k, k], fan, seed)?;
            p.init_uniform(&format!("{name}.bias"), &[c_out], fan, seed)
        };
        let lin = |p: &mut ParamStore,
                   name: &str,
                   out_dim: usize,
                   in_dim: usize|
         -> Result<(), ParamError> {
            p.init_uniform(&format!("{name}.weight"), &[out_dim, in_dim], in_dim, seed)?;
            p.init_uniform(&format!("{name}.bias"), &[out_dim], in_dim, seed)
        };
        let affine = |p: &mut ParamStore, name: &str, c: usize| -> Result<(), ParamError> {
            p.init_const(&format!("{name}.gamma"), &[c], 1.0, true)?;
            p.init_const(&format!("{name}.beta"), &[c], 0.0, true)
        };

        conv(&mut p, "encoder.conv0", 16, 1, 5)?;
        affine(&mut p, "encoder.gn0", 16)?;
        conv(&mut p, "encoder.conv1", 32, 16, 3)?;
        affine(&mut p, "encoder.gn1", 32)?;
        conv(&mut p, "encoder.conv2", 64, 32, 5)?;
        affine(&mut p, "encoder.gn2", 64)?;
        conv(&mut p, "encoder.conv3", 128, 64, 1)?;
        affine(&mut p, "encoder.gn3", 128)?;

        lin(&mut p, "orient.lin0", FEATURE_DIM, FEATURE_DIM)?;
        lin(&mut p, "orient.lin1", crate::voxelgrid::N_ANGLE_BINS, FEATURE_DIM)?;

        lin(&mut p, "tree.lin0", PART_NODES * FEATURE_DIM, FEATURE_DIM)?;
        lin(&mut p, "tree.node_exist", 1, FEATURE_DIM)?;
        lin(&mut p, "tree.lin1", FEATURE_DIM, 2 * FEATURE_DIM)?;
        lin(&mut p, "tree.edge_exist", 1, FEATURE_DIM)?;
        lin(&mut p, "tree.lin2", FEATURE_DIM, 3 * FEATURE_DIM)?;
        lin(&mut p, "tree.node_sem", taxonomy.part_count(), FEATURE_DIM)?;
        lin(&mut p, "tree.lin3", FEATURE_DIM, FEATURE_DIM)?;

        lin(&mut p, "phi", layout.total, FEATURE_DIM)?;

        conv(&mut p, "refiner.conv0", 8, 2, 3)?;
        affine(&mut p, "refiner.bn0", 8)?;
        p.init_const("refiner.bn0.running_mean", &[8], 0.0, false)?;
        p.init_const("refiner.bn0.running_var", &[8], 1.0, false)?;
        conv(&mut p, "refiner.conv1", 16, 8, 3)?;
        affine(&mut p, "refiner.bn1", 16)?;
        p.init_const("refiner.bn1.running_mean", &[16], 0.0, false)?;
        p.init_const("refiner.bn1.running_var", &[16], 1.0, false)?;
        conv(&mut p, "refiner.conv2", 8, 16, 3)?;
        affine(&mut p, "refiner.bn2", 8)?;
        p.init_const("refiner.bn2.running_mean", &[8], 0.0, false)?;
        p.init_const("refiner.bn2.running_var", &[8], 1.0, false)?;
        conv(&mut p, "refiner.conv3", 1, 8, 1)?;

        lin(&mut p, "direct.lin", 64 * 8, FEATURE_DIM)?;
        for (i, (c_in, c_out)) in direct_decoder_stages(config.resolution).iter().enumerate() {
            let fan = c_in * 64;
            p.init_uniform(
                &format!("direct.tconv{i}.weight"),
                &[*c_in, *c_out, 4, 4, 4],
                fan,
                seed,
            )?;
            p.init_uniform(&format!("direct.tconv{i}.bias"), &[*c_out], fan, seed)?;
        }

        Ok(Model {
            config,
            layout,
            params: p,
        })
    }

    /// Reassembles a model from a checkpointed store plus its config and the
    /// bank it was trained with (verified against the config hashes).
    pub fn from_parts(
        config: ModelConfig,
        taxonomy: &Taxonomy,
        bank: &PriorBank,
        params: ParamStore,
    ) -> Result<Model, ModelError> {
        if taxonomy.content_hash_hex() != config.taxonomy_hash {
            return Err(ModelError::ConfigMismatch(
                "taxonomy hash differs from config".into(),
            ));
        }
        if bank.content_hash_hex() != config.bank_hash {
            return Err(ModelError::ConfigMismatch(
                "prior bank hash differs from config".into(),
            ));
        }
        let layout = BankLayout::from_bank(bank, taxonomy.part_count());
        let phi = params.get("phi.weight")?;
        if phi.shape != [layout.total, FEATURE_DIM] {
            return Err(ModelError::ConfigMismatch(format!(
                "prior-weight head shaped {:?} but bank holds {} priors",
                phi.shape, layout.total
            )));
        }
        Ok(Model {
            config,
            layout,
            params,
        })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::voxelgrid::OccupancyGrid;
    use std::collections::BTreeMap;

    pub(crate) fn tiny_bank(resolution: usize, k: usize, types: &[usize]) -> PriorBank {
        let mut masks: BTreeMap<usize, Vec<OccupancyGrid>> = BTreeMap::new();
        for (i, &t) in types.iter().enumerate() {
            let mut list = Vec::new();
            for j in 0..(k + 1) {
                let mut g = OccupancyGrid::zeros_binary(resolution);
                for x in 0..resolution {
                    g.set(x, (i + j) % resolution, (i * 2 + j) % resolution, 1.0);
                }
                list.push(g);
            }
            masks.insert(t, list);
        }
        crate::priorbank::build_prior_bank(&masks, k, 99).unwrap().0
    }

    pub(crate) fn test_config(resolution: usize, bank: &PriorBank) -> ModelConfig {
        ModelConfig {
            resolution,
            taxonomy_hash: Taxonomy::builtin().content_hash_hex(),
            prior_k: bank.k(),
            bank_hash: bank.content_hash_hex(),
            loss_weights: LossWeights::default(),
            ablation: AblationFlags::default(),
        }
    }

    #[test]
    fn config_toml_roundtrip_and_validation() {
        let bank = tiny_bank(16, 2, &[0, 1, 3]);
        let cfg = test_config(16, &bank);
        let text = cfg.to_toml_string();
        let back = ModelConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
        let mut bad = cfg.clone();
        bad.resolution = 24;
        assert!(matches!(
            ModelConfig::from_toml_str(&bad.to_toml_string()),
            Err(ModelError::BadResolution(24))
        ));
        // Omitted weights/flags fall back to defaults.
        let minimal = "resolution = 16\ntaxonomy_hash = \"x\"\nprior_k = 2\nbank_hash = \"y\"\n";
        let parsed = ModelConfig::from_toml_str(minimal).unwrap();
        assert_eq!(parsed.loss_weights, LossWeights::default());
        assert_eq!(parsed.ablation, AblationFlags::default());
    }

    #[test]
    fn layout_tracks_bank_counts_and_offsets() {
        let bank = tiny_bank(16, 2, &[1, 4]);
        let layout = BankLayout::from_bank(&bank, 6);
        assert_eq!(layout.counts, vec![0, 2, 0, 0, 2, 0]);
        assert_eq!(layout.offsets[1], 0);
        assert_eq!(layout.offsets[4], 2);
        assert_eq!(layout.total, 4);
    }

    #[test]
    fn model_construction_and_flag_independent_init() {
        let tax = Taxonomy::builtin();
        let bank = tiny_bank(16, 2, &[0, 1, 2]);
        let cfg = test_config(16, &bank);
        let model = Model::new(cfg.clone(), &tax, &bank, 5).unwrap();
        assert_eq!(
            model.params.get("phi.weight").unwrap().shape,
            vec![6, FEATURE_DIM]
        );
        // Toggling flags must not change any initial values.
        let mut flagged_cfg = cfg.clone();
        flagged_cfg.ablation.no_priors = true;
        flagged_cfg.ablation.no_message_passing = true;
        let flagged = Model::new(flagged_cfg, &tax, &bank, 5).unwrap();
        assert!(model.params.bit_eq(&flagged.params));
        // Different seed changes them.
        let other = Model::new(cfg.clone(), &tax, &bank, 6).unwrap();
        assert!(!model.params.bit_eq(&other.params));

        // Hash mismatches are rejected.
        let mut wrong = cfg;
        wrong.bank_hash = "deadbeef".into();
        assert!(matches!(
            Model::new(wrong, &tax, &bank, 5),
            Err(ModelError::ConfigMismatch(_))
        ));
    }

    #[test]
    fn direct_decoder_stage_schedule() {
        assert_eq!(direct_decoder_stages(16), vec![(64, 32), (32, 16), (16, 1)]);
        assert_eq!(
            direct_decoder_stages(32),
            vec![(64, 32), (32, 16), (16, 8), (8, 1)]
        );
        assert_eq!(
            direct_decoder_stages(64),
            vec![(64, 32), (32, 16), (16, 8), (8, 4), (4, 1)]
        );
    }

    #[test]
    fn checkpoint_reload_into_model() {
        let tax = Taxonomy::builtin();
        let bank = tiny_bank(16, 1, &[0, 2]);
        let cfg = test_config(16, &bank);
        let model = Model::new(cfg.clone(), &tax, &bank, 11).unwrap();
        let bytes = model.params.to_bytes();
        let restored = ParamStore::from_bytes(&bytes).unwrap();
        let rebuilt = Model::from_parts(cfg, &tax, &bank, restored).unwrap();
        assert!(rebuilt.params.bit_eq(&model.params));
    }
}
