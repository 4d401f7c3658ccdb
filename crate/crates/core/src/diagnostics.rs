//! Finite-difference gradient checks for each trainable component, on
//! small random instances.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Domain, FeatureMatrix, PairedExample, TokenSequence, Vocab};
use crate::error::{Error, Result};
use crate::first_pass::train::utterance_loss;
use crate::first_pass::{EncoderConfig, FirstPassConfig, FirstPassModel, JoinerConfig, PredictorConfig};
use crate::numerics::gradcheck::DEFAULT_EPSILON;
use crate::numerics::{grad_check_selected, seeded_rng, GradCheckReport, Graph, Tensor, Var};
use crate::rescorer::{Rescorer, RescorerConfig};

pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Component {
    Encoder,
    Predictor,
    Joiner,
    Rescorer,
    /// Every first-pass parameter through the full transducer NLL.
    TransducerLoss,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::Encoder,
        Component::Predictor,
        Component::Joiner,
        Component::Rescorer,
        Component::TransducerLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Encoder => "encoder",
            Component::Predictor => "predictor",
            Component::Joiner => "joiner",
            Component::Rescorer => "rescorer",
            Component::TransducerLoss => "transducer-loss",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown component {s:?}")))
    }
}

fn first_pass_model(seed: u64) -> Result<FirstPassModel> {
    let config = FirstPassConfig {
        encoder: EncoderConfig {
            feature_dim: 3,
            stack: 2,
            layers: 2,
            dim: 5,
            lookahead: 2,
        },
        predictor: PredictorConfig {
            embed_dim: 4,
            hidden: 5,
            layers: 1,
        },
        joiner: JoinerConfig { dim: 6 },
    };
    FirstPassModel::new(config, Vocab::new(3), seed)
}

fn random(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

/// `sum(x * w)` for a fixed random `w`, so every output element carries
/// a distinct gradient.
fn project(g: &mut Graph, x: Var, w: &Tensor) -> Result<Var> {
    let w = g.constant(w.clone());
    let p = g.mul(x, w)?;
    Ok(g.sum_all(p))
}

/// Checks one component on a seeded random instance.
pub fn check_component(component: Component, seed: u64) -> Result<GradCheckReport> {
    check_component_with(component, seed, DEFAULT_EPSILON)
}

pub fn check_component_with(component: Component, seed: u64, eps: f64) -> Result<GradCheckReport> {
    let mut rng = seeded_rng(seed);
    match component {
        Component::Encoder => {
            let model = first_pass_model(seed)?;
            let x = FeatureMatrix::new(random(&mut rng, 7, 3))?;
            let w = random(&mut rng, 4, 5);
            let mut store = model.store().clone();
            grad_check_selected(
                &mut store,
                |g| {
                    let h = model.encode_graph(g, &x)?;
                    project(g, h, &w)
                },
                eps,
                |n| n.starts_with("encoder."),
            )
        }
        Component::Predictor => {
            let model = first_pass_model(seed)?;
            let tokens = [2, 1, 3];
            let w = random(&mut rng, 4, 5);
            let mut store = model.store().clone();
            grad_check_selected(
                &mut store,
                |g| {
                    let p = model.predict_graph(g, &tokens)?;
                    project(g, p, &w)
                },
                eps,
                |n| n.starts_with("predictor."),
            )
        }
        Component::Joiner => {
            let model = first_pass_model(seed)?;
            let (h, p) = (random(&mut rng, 3, 5), random(&mut rng, 2, 5));
            let w = random(&mut rng, 6, 4);
            let mut store = model.store().clone();
            grad_check_selected(
                &mut store,
                |g| {
                    let (h, p) = (g.constant(h.clone()), g.constant(p.clone()));
                    let z = model.joint_logits_graph(g, h, p)?;
                    let lp = g.log_softmax(z)?;
                    project(g, lp, &w)
                },
                eps,
                |n| n.starts_with("joiner."),
            )
        }
        Component::Rescorer => {
            let config = RescorerConfig {
                layers: 2,
                dim: 4,
                heads: 2,
                ff_dim: 5,
                max_len: 8,
                dropout: 0.1,
                memory_dim: 3,
            };
            let model = Rescorer::new(config, Vocab::new(3), seed)?;
            let h = random(&mut rng, 4, 3);
            let y = TokenSequence(vec![3, 1, 2]);
            let mut store = model.store().clone();
            grad_check_selected(
                &mut store,
                |g| {
                    let mem = g.constant(h.clone());
                    model.nll_graph(g, mem, &y, &mut None)
                },
                eps,
                |_| true,
            )
        }
        Component::TransducerLoss => {
            let model = first_pass_model(seed)?;
            let ex = PairedExample {
                id: "check".into(),
                features: FeatureMatrix::new(random(&mut rng, 6, 3))?,
                tokens: TokenSequence(vec![2, 1, 3, 2]),
                domain: Domain::A,
            };
            let mut store = model.store().clone();
            grad_check_selected(&mut store, |g| utterance_loss(&model, g, &ex), eps, |_| true)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_component_passes() {
        for c in Component::ALL {
            let report = check_component(c, 2).unwrap();
            assert!(!report.params.is_empty(), "{c}");
            assert!(report.passes(TOLERANCE), "{c}: {report:?}");
        }
    }

    #[test]
    fn filters_to_the_component() {
        let report = check_component(Component::Joiner, 1).unwrap();
        assert!(report.params.iter().all(|p| p.name.starts_with("joiner.")));
        assert_eq!(report.params.len(), 6);
    }

    #[test]
    fn residual_error_is_finite_difference_truncation() {
        // this instance has a small, strongly curved gradient element
        let errs: Vec<f64> = [1e-3, 1e-4, 1e-5]
            .iter()
            .map(|&e| check_component_with(Component::Rescorer, 9, e).unwrap().max_rel_error())
            .collect();
        assert!(errs[0] > 50.0 * errs[1] && errs[1] > 50.0 * errs[2], "{errs:?}");
    }

    #[test]
    fn names_round_trip() {
        for c in Component::ALL {
            assert_eq!(c.name().parse::<Component>().unwrap(), c);
        }
        assert!("decoder".parse::<Component>().is_err());
    }
}
