//! The trained cascade and its JSON model file.
//!
//! Reject thresholds of `-inf` are written as `null`. Floats are written in
//! shortest round-trip form, so save followed by load is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::boost::Calibration;
use super::plan::StagePlan;
use super::tree::DecisionTree;
use crate::channels::validate_shrink;
use crate::conv::Backbone;
use crate::error::{McfError, Result};
use crate::layers::ChannelSource;

pub const MODEL_FORMAT: &str = "mcf-cascade";
pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub layer_index: usize,
    pub trees: Vec<DecisionTree>,
    /// Cumulative-score threshold after each tree.
    #[serde(with = "neg_inf_as_null")]
    pub reject_thresholds: Vec<f64>,
}

impl Stage {
    /// Adds this stage's trees to `carried`. Returns the new score and
    /// whether every threshold was met. With `early_exit` the walk stops at
    /// the first miss.
    pub fn evaluate(
        &self,
        channels: &impl ChannelSource,
        carried: f64,
        early_exit: bool,
    ) -> Result<(f64, bool)> {
        let mut score = carried;
        let mut passed = true;
        for (tree, &t) in self.trees.iter().zip(&self.reject_thresholds) {
            score += tree.predict(channels)?;
            if score < t {
                passed = false;
                if early_exit {
                    break;
                }
            }
        }
        Ok((score, passed))
    }

    pub fn clear_thresholds(&mut self) {
        self.reject_thresholds.fill(f64::NEG_INFINITY);
    }
}

/// Ties the model to the backbone whose exports feed stages `2..=N`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneBinding {
    /// SHA-256 of the weight file contents.
    pub hash: String,
    pub exports: Vec<usize>,
    /// `(channels, width, height)` per exported block.
    pub export_geometry: Vec<(usize, usize, usize)>,
}

impl BackboneBinding {
    pub fn of(backbone: &Backbone) -> Result<Self> {
        Ok(BackboneBinding {
            hash: backbone.hash(),
            exports: backbone.exports().to_vec(),
            export_geometry: backbone.spec().export_geometry()?,
        })
    }

    pub fn check(&self, backbone: &Backbone) -> Result<()> {
        let other = BackboneBinding::of(backbone)?;
        if other.hash != self.hash {
            return Err(McfError::Config(format!(
                "model was trained with weights {} but {} was given",
                short(&self.hash),
                short(&other.hash)
            )));
        }
        if other.exports != self.exports {
            return Err(McfError::Config(format!(
                "model expects exported blocks {:?}, backbone exports {:?}",
                self.exports, other.exports
            )));
        }
        Ok(())
    }
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub seed: u64,
    pub tree_depth: usize,
    pub bootstrap_rounds: Vec<usize>,
    pub negatives_per_round: usize,
    pub calibration: Calibration,
    pub n_positives: usize,
    pub n_negatives: usize,
    /// Exponential-loss trace per stage, `ln(sum exp(-y H))` after each tree.
    pub loss_traces: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeModel {
    pub format: String,
    pub version: u32,
    pub plan: StagePlan,
    pub shrink: usize,
    pub stages: Vec<Stage>,
    pub backbone: Option<BackboneBinding>,
    pub metadata: TrainingMetadata,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreResult {
    pub score: f64,
    /// 1-based stage where the window was rejected, or the stage count.
    pub stage_reached: usize,
    pub accepted: bool,
}

impl CascadeModel {
    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn n_trees(&self) -> usize {
        self.stages.iter().map(|s| s.trees.len()).sum()
    }

    /// Sum of all tree outputs. With `early_exit`, evaluation stops at the
    /// first tree whose cumulative score falls below its threshold, and only
    /// the layers up to that stage are read.
    pub fn score(&self, channels: &impl ChannelSource, early_exit: bool) -> Result<ScoreResult> {
        let mut score = 0.0;
        let mut accepted = true;
        for (i, stage) in self.stages.iter().enumerate() {
            let (s, passed) = stage.evaluate(channels, score, early_exit)?;
            score = s;
            if !passed {
                accepted = false;
                if early_exit {
                    return Ok(ScoreResult {
                        score,
                        stage_reached: i + 1,
                        accepted,
                    });
                }
            }
        }
        Ok(ScoreResult {
            score,
            stage_reached: self.stages.len(),
            accepted,
        })
    }

    pub fn clear_thresholds(&mut self) {
        self.stages.iter_mut().for_each(Stage::clear_thresholds);
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(McfError::Load {
            what: "model".into(),
            reason: msg,
        });
        if self.format != MODEL_FORMAT {
            return bad(format!("format {:?} is not {MODEL_FORMAT:?}", self.format));
        }
        if self.version != MODEL_VERSION {
            return bad(format!("unsupported version {}", self.version));
        }
        validate_shrink(self.shrink)?;
        if self.stages.len() != self.plan.n_stages || self.plan.k.len() != self.plan.n_stages {
            return bad(format!(
                "{} stages for a {}-stage plan",
                self.stages.len(),
                self.plan.n_stages
            ));
        }
        for (i, (stage, &k)) in self.stages.iter().zip(&self.plan.k).enumerate() {
            if stage.layer_index != i + 1 {
                return bad(format!("stage {} reads layer {}", i + 1, stage.layer_index));
            }
            if stage.trees.len() != k || stage.reject_thresholds.len() != k {
                return bad(format!(
                    "stage {} has {} trees and {} thresholds, plan says {k}",
                    i + 1,
                    stage.trees.len(),
                    stage.reject_thresholds.len()
                ));
            }
            if stage.reject_thresholds.iter().any(|t| t.is_nan() || *t == f64::INFINITY) {
                return bad(format!("stage {} has an invalid reject threshold", i + 1));
            }
            for tree in &stage.trees {
                tree.validate()?;
                if let Some(f) = tree.features().find(|f| f.layer != stage.layer_index) {
                    return bad(format!("stage {} tree reads layer {}", i + 1, f.layer));
                }
            }
        }
        match &self.backbone {
            Some(b) if b.exports.len() + 1 < self.stages.len() => bad(format!(
                "{} exported conv layers cannot feed {} stages",
                b.exports.len(),
                self.stages.len()
            )),
            None if self.stages.len() > 1 => bad("multi-stage model without a backbone binding".into()),
            _ => Ok(()),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: CascadeModel = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| McfError::Load {
            what: path.display().to_string(),
            reason: e.to_string(),
        })?;
        CascadeModel::from_json(&text)
    }
}

mod neg_inf_as_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(values: &[f64], s: S) -> Result<S::Ok, S::Error> {
        values
            .iter()
            .map(|v| v.is_finite().then_some(*v))
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let raw: Vec<Option<f64>> = Vec::deserialize(d)?;
        Ok(raw.into_iter().map(|v| v.unwrap_or(f64::NEG_INFINITY)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::tree::Node;
    use crate::channels::ChannelStack;
    use crate::features::FeatureSpec;
    use crate::layers::{LayerData, MultiLayerChannels};
    use proptest::prelude::*;

    fn stump(layer: usize, threshold: f32, lo: f64, hi: f64) -> DecisionTree {
        DecisionTree {
            depth: 1,
            nodes: vec![
                Node::Split {
                    feature: FeatureSpec::zero(layer, 0, 0, 0),
                    threshold,
                    left: 1,
                    right: 2,
                },
                Node::Leaf { value: lo },
                Node::Leaf { value: hi },
            ],
        }
    }

    pub(crate) fn toy_model(thresholds: [f64; 3]) -> CascadeModel {
        CascadeModel {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            plan: StagePlan {
                n_all: 4,
                n_stages: 2,
                k: vec![2, 1],
            },
            shrink: 4,
            stages: vec![
                Stage {
                    layer_index: 1,
                    trees: vec![stump(1, 0.5, -1.0, 1.0), stump(1, 0.25, -0.5, 0.5)],
                    reject_thresholds: thresholds[..2].to_vec(),
                },
                Stage {
                    layer_index: 2,
                    trees: vec![stump(2, 0.1, -0.3, 0.7)],
                    reject_thresholds: thresholds[2..].to_vec(),
                },
            ],
            backbone: Some(BackboneBinding {
                hash: "00".into(),
                exports: vec![4],
                export_geometry: vec![(1, 1, 1)],
            }),
            metadata: TrainingMetadata {
                seed: 0,
                tree_depth: 1,
                bootstrap_rounds: vec![],
                negatives_per_round: 0,
                calibration: Calibration::default(),
                n_positives: 0,
                n_negatives: 0,
                loss_traces: vec![],
            },
        }
    }

    fn window(a: f32, b: f32) -> MultiLayerChannels {
        let mut m = MultiLayerChannels::new(
            0,
            LayerData::whole(ChannelStack::new(1, 1, 1, 1, vec![a]).unwrap()),
            2,
        );
        m.set_layer(2, LayerData::whole(ChannelStack::new(2, 1, 1, 1, vec![b]).unwrap()))
            .unwrap();
        m
    }

    #[test]
    fn early_exit_stops_at_first_miss() {
        let model = toy_model([0.0, 0.0, 0.0]);
        // Tree 1 gives -1 < 0: rejected in stage 1 without touching layer 2.
        let l1_only = MultiLayerChannels::new(
            0,
            LayerData::whole(ChannelStack::new(1, 1, 1, 1, vec![0.0]).unwrap()),
            2,
        );
        let r = model.score(&l1_only, true).unwrap();
        assert_eq!((r.score, r.stage_reached, r.accepted), (-1.0, 1, false));
        let full = model.score(&window(0.0, 0.0), false).unwrap();
        assert_eq!((full.score, full.stage_reached, full.accepted), (-1.8, 2, false));
        let pass = model.score(&window(1.0, 1.0), true).unwrap();
        assert_eq!((pass.score, pass.stage_reached, pass.accepted), (2.2, 2, true));
    }

    #[test]
    fn unbounded_thresholds_give_full_sum() {
        let model = toy_model([f64::NEG_INFINITY; 3]);
        for (a, b) in [(0.0, 0.0), (0.3, 0.9), (1.0, 0.0)] {
            let w = window(a, b);
            assert_eq!(model.score(&w, true).unwrap(), model.score(&w, false).unwrap());
        }
    }

    #[test]
    fn json_round_trip_keeps_neg_inf() {
        let model = toy_model([f64::NEG_INFINITY, -0.25, 0.1]);
        let text = model.to_json().unwrap();
        assert!(text.contains("null"));
        assert_eq!(CascadeModel::from_json(&text).unwrap(), model);
    }

    #[test]
    fn load_rejects_foreign_layer_features() {
        let mut model = toy_model([0.0; 3]);
        model.stages[1].trees[0] = stump(1, 0.1, -0.3, 0.7);
        let err = CascadeModel::from_json(&model.to_json().unwrap()).unwrap_err();
        assert!(err.to_string().contains("reads layer 1"), "{err}");
    }

    proptest! {
        #[test]
        fn arbitrary_floats_round_trip_bit_exact(
            t in prop::array::uniform3(prop::num::f64::NORMAL | prop::num::f64::NEGATIVE),
            thr in prop::num::f32::NORMAL,
            leaf in prop::num::f64::ANY.prop_filter("finite", |v| v.is_finite()),
        ) {
            let mut model = toy_model(t);
            model.stages[0].trees[0] = stump(1, thr, leaf, -leaf);
            let back = CascadeModel::from_json(&model.to_json().unwrap()).unwrap();
            prop_assert_eq!(back.to_json().unwrap(), model.to_json().unwrap());
            prop_assert_eq!(back, model);
        }
    }
}
