//! A trained network with everything needed to score new samples, and its
//! JSON file format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DataConfig, Standardizer};
use crate::error::{Error, Result};
use crate::losses::{LossSpec, LossState};
use crate::network::Network;
use crate::scoring::Calibration;
use crate::training::TrainConfig;

pub const MODEL_FORMAT: &str = "ffoc-model/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainedModel {
    pub format: String,
    pub network: Network,
    pub spec: LossSpec,
    /// Initialization seed.
    pub seed: u64,
    /// One state per layer, fitted on the full training split after training.
    pub layer_states: Vec<LossState>,
    pub calibration: Option<Calibration>,
    /// Input transform applied before the network; `None` means raw features.
    #[serde(default)]
    pub standardizer: Option<Standardizer>,
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

impl TrainedModel {
    pub fn new(network: Network, spec: LossSpec, seed: u64) -> Self {
        TrainedModel {
            format: MODEL_FORMAT.to_string(),
            network,
            spec,
            seed,
            layer_states: Vec::new(),
            calibration: None,
            standardizer: None,
            data: None,
            train: None,
        }
    }

    /// State of the last layer, the one scoring reads.
    pub fn final_state(&self) -> Option<&LossState> {
        if self.layer_states.len() == self.network.depth() {
            self.layer_states.last()
        } else {
            None
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: TrainedModel = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != MODEL_FORMAT {
            return Err(Error::Format(format!(
                "unsupported model format `{}` (expected `{MODEL_FORMAT}`)",
                self.format
            )));
        }
        self.network.validate()?;
        self.spec.validate()?;
        if !self.layer_states.is_empty() && self.layer_states.len() != self.network.depth() {
            return Err(Error::Format(format!(
                "{} loss states for {} layers",
                self.layer_states.len(),
                self.network.depth()
            )));
        }
        for (state, layer) in self.layer_states.iter().zip(&self.network.layers) {
            if state.center.len() != layer.outputs() {
                return Err(Error::Format("loss state width does not match its layer".into()));
            }
        }
        if let Some(st) = &self.standardizer {
            if st.mean.len() != self.network.input_width() || st.std.len() != st.mean.len() {
                return Err(Error::Format("standardizer width does not match the input".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossKind;
    use crate::network::init_network;
    use crate::tensor::Vector;
    use proptest::prelude::*;

    fn sample(seed: u64, kind: LossKind) -> TrainedModel {
        let net = init_network(&[4, 3, 2], seed).unwrap();
        let mut m = TrainedModel::new(net, LossSpec::new(kind), seed);
        let mut rng = crate::rng::SplitMix64::new(seed ^ 7);
        m.layer_states = [3, 2]
            .iter()
            .map(|&q| LossState {
                center: Vector::new((0..q).map(|_| rng.normal()).collect()),
                radius_sq: rng.next_f64() * 1e-3,
            })
            .collect();
        m.calibration = Some(Calibration {
            train_max_distance: 1.0 + rng.next_f64(),
            threshold: rng.next_f64(),
            nu: 0.05,
        });
        m.standardizer = Some(Standardizer {
            mean: vec![0.1, 1.0 / 3.0, -2.5, 1e-300],
            std: vec![1.0, 2.0, 0.7, 1e-12],
        });
        m
    }

    #[test]
    fn save_load_round_trip() {
        let m = sample(3, LossKind::Svdd);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        m.save(&path).unwrap();
        assert_eq!(TrainedModel::load(&path).unwrap(), m);
    }

    #[test]
    fn corrupt_files_rejected() {
        assert!(TrainedModel::from_json("{").is_err());
        let mut m = sample(1, LossKind::Goodness);
        m.format = "other/9".into();
        assert!(TrainedModel::from_json(&m.to_json().unwrap()).is_err());
        let mut m = sample(1, LossKind::Goodness);
        m.layer_states.pop();
        assert!(TrainedModel::from_json(&m.to_json().unwrap()).is_err());
        let text = sample(1, LossKind::Goodness).to_json().unwrap();
        let extra = text.replacen('{', "{\"surprise\": 1,", 1);
        assert!(TrainedModel::from_json(&extra).is_err());
    }

    #[test]
    fn final_state_needs_every_layer() {
        let mut m = sample(2, LossKind::HbSvdd);
        assert_eq!(m.final_state(), m.layer_states.last());
        m.layer_states.clear();
        assert!(m.final_state().is_none());
    }

    proptest! {
        #[test]
        fn json_round_trip_is_bit_exact(seed in any::<u64>(), k in 0usize..5) {
            let m = sample(seed, LossKind::ALL[k]);
            let back = TrainedModel::from_json(&m.to_json().unwrap()).unwrap();
            for (a, b) in m.network.layers.iter().zip(&back.network.layers) {
                let bits = |s: &[f64]| s.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                prop_assert_eq!(bits(a.w.as_slice()), bits(b.w.as_slice()));
            }
            prop_assert_eq!(back, m);
        }
    }
}
