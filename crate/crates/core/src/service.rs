//! The C-class service model: softmax regression, MLP, or random forest.
//!
//! The deployed pipeline trains these on encoder output; attack experiments
//! also train them on raw features to serve as extraction targets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forest::{ForestConfig, RandomForest};
use crate::nn::{fit, Activation, Dense, Gradients, Network, OptimizerKind, Targets, TrainConfig};
use crate::numeric::{argmax, softmax_in_place, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ServiceKind {
    #[serde(rename = "lr")]
    SoftmaxRegression,
    #[serde(rename = "dnn")]
    Mlp,
    #[serde(rename = "rf")]
    RandomForest,
}

impl ServiceKind {
    pub const ALL: [ServiceKind; 3] = [
        ServiceKind::RandomForest,
        ServiceKind::SoftmaxRegression,
        ServiceKind::Mlp,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            ServiceKind::SoftmaxRegression => "lr",
            ServiceKind::Mlp => "dnn",
            ServiceKind::RandomForest => "rf",
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            ServiceKind::SoftmaxRegression => 0,
            ServiceKind::Mlp => 1,
            ServiceKind::RandomForest => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.tag() == tag)
    }
}

impl fmt::Display for ServiceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for ServiceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lr" | "softmax" => Ok(ServiceKind::SoftmaxRegression),
            "dnn" | "mlp" => Ok(ServiceKind::Mlp),
            "rf" | "forest" => Ok(ServiceKind::RandomForest),
            other => Err(Error::domain(format!("unknown model kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub kind: ServiceKind,
    pub train: TrainConfig,
    /// L2 penalty for softmax regression.
    pub l2: f64,
    pub forest: ForestConfig,
}

impl ServiceConfig {
    pub fn for_kind(kind: ServiceKind, seed: u64) -> Self {
        let train = match kind {
            // full-batch gradient descent; `epochs` counts iterations
            ServiceKind::SoftmaxRegression => TrainConfig {
                epochs: 300,
                batch_size: 1,
                learning_rate: 0.5,
                seed,
                widths: Vec::new(),
                optimizer: OptimizerKind::Sgd,
            },
            ServiceKind::Mlp => TrainConfig {
                epochs: 30,
                batch_size: 32,
                learning_rate: 1e-3,
                seed,
                widths: vec![64, 32],
                optimizer: OptimizerKind::Adam,
            },
            ServiceKind::RandomForest => TrainConfig {
                seed,
                ..TrainConfig::default()
            },
        };
        Self {
            kind,
            train,
            l2: 1e-4,
            forest: ForestConfig {
                seed,
                ..ForestConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ServiceParams {
    /// Single linear layer `C × m` followed by softmax.
    Softmax(Dense),
    Mlp(Network),
    Forest(RandomForest),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceModel {
    params: ServiceParams,
    num_classes: usize,
    input_dim: usize,
}

impl ServiceModel {
    pub fn new(params: ServiceParams, num_classes: usize, input_dim: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::domain("a service model needs at least 2 classes"));
        }
        let (inputs, outputs) = match &params {
            ServiceParams::Softmax(d) => (d.inputs(), d.outputs()),
            ServiceParams::Mlp(n) => (n.input_dim(), n.output_dim()),
            ServiceParams::Forest(f) => (input_dim, f.classes()),
        };
        if inputs != input_dim || outputs != num_classes {
            return Err(Error::shape(format!(
                "parameters map {inputs}→{outputs}, expected {input_dim}→{num_classes}"
            )));
        }
        Ok(Self {
            params,
            num_classes,
            input_dim,
        })
    }

    pub fn kind(&self) -> ServiceKind {
        match self.params {
            ServiceParams::Softmax(_) => ServiceKind::SoftmaxRegression,
            ServiceParams::Mlp(_) => ServiceKind::Mlp,
            ServiceParams::Forest(_) => ServiceKind::RandomForest,
        }
    }

    pub fn params(&self) -> &ServiceParams {
        &self.params
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn predict_proba(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.input_dim {
            return Err(Error::shape(format!(
                "service model expects {} inputs, got {}",
                self.input_dim,
                z.len()
            )));
        }
        Ok(match &self.params {
            ServiceParams::Softmax(layer) => {
                let mut logits = Network {
                    layers: vec![layer.clone()],
                }
                .forward(z)?;
                softmax_in_place(&mut logits);
                logits
            }
            ServiceParams::Mlp(net) => {
                let mut logits = net.forward(z)?;
                softmax_in_place(&mut logits);
                logits
            }
            ServiceParams::Forest(forest) => forest.predict_proba(z),
        })
    }

    /// Argmax of [`predict_proba`](Self::predict_proba), lowest index on ties.
    pub fn predict(&self, z: &[f64]) -> Result<usize> {
        Ok(argmax(&self.predict_proba(z)?))
    }

    pub fn accuracy(&self, data: &Matrix, labels: &[usize]) -> Result<f64> {
        let mut correct = 0usize;
        for (row, &y) in data.iter_rows().zip(labels) {
            if self.predict(row)? == y {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.rows().max(1) as f64)
    }
}

pub fn train_service_model(
    inputs: &Matrix,
    labels: &[usize],
    num_classes: usize,
    cfg: &ServiceConfig,
) -> Result<ServiceModel> {
    if num_classes < 2 {
        return Err(Error::domain("a service model needs at least 2 classes"));
    }
    if labels.len() != inputs.rows() {
        return Err(Error::shape(format!(
            "{} labels for {} rows",
            labels.len(),
            inputs.rows()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::domain(format!(
            "label {bad} outside [0, {num_classes})"
        )));
    }
    if inputs.rows() < num_classes {
        return Err(Error::domain("fewer samples than classes"));
    }
    let first = labels[0];
    if labels.iter().all(|&y| y == first) {
        return Err(Error::domain("training labels contain a single class"));
    }
    let m = inputs.cols();
    let params = match cfg.kind {
        ServiceKind::SoftmaxRegression => {
            ServiceParams::Softmax(train_softmax(inputs, labels, num_classes, cfg)?)
        }
        ServiceKind::Mlp => {
            let mut widths = vec![m];
            widths.extend_from_slice(&cfg.train.widths);
            widths.push(num_classes);
            let mut rng = Rng::new(cfg.train.seed);
            let mut net = Network::glorot(&widths, Activation::Identity, &mut rng);
            fit(&mut net, inputs, Targets::Classes(labels), &cfg.train, &mut rng)?;
            ServiceParams::Mlp(net)
        }
        ServiceKind::RandomForest => {
            ServiceParams::Forest(RandomForest::fit(inputs, labels, num_classes, &cfg.forest)?)
        }
    };
    ServiceModel::new(params, num_classes, m)
}

/// Full-batch gradient descent on cross-entropy plus `l2 · ‖W‖² / 2`.
fn train_softmax(
    inputs: &Matrix,
    labels: &[usize],
    classes: usize,
    cfg: &ServiceConfig,
) -> Result<Dense> {
    if !(cfg.train.learning_rate > 0.0) {
        return Err(Error::domain("learning rate must be positive"));
    }
    let mut net = Network {
        layers: vec![Dense::zeros(inputs.cols(), classes, Activation::Identity)],
    };
    let all: Vec<usize> = (0..inputs.rows()).collect();
    for iter in 0..cfg.train.epochs {
        let (loss, mut grads): (f64, Gradients) =
            net.loss_and_gradients(inputs, Targets::Classes(labels), &all);
        if !loss.is_finite() {
            return Err(Error::Training {
                epoch: iter + 1,
                reason: "softmax loss became non-finite".into(),
            });
        }
        let layer = &mut net.layers[0];
        for (g, w) in grads.weights[0].iter_mut().zip(layer.weights.data()) {
            *g += cfg.l2 * w;
        }
        for (w, g) in layer.weights.data_mut().iter_mut().zip(&grads.weights[0]) {
            *w -= cfg.train.learning_rate * g;
        }
        for (b, g) in layer.bias.iter_mut().zip(&grads.bias[0]) {
            *b -= cfg.train.learning_rate * g;
        }
    }
    Ok(net.layers.pop().expect("one layer"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck;
    use crate::numeric::uniform;

    fn blobs(n: usize, seed: u64) -> (Matrix, Vec<usize>) {
        let mut rng = Rng::new(seed);
        let centers = [[-0.6, 0.5, -0.2], [0.6, -0.4, 0.3]];
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 2;
            for j in 0..3 {
                data.push((centers[c][j] + 0.15 * rng.normal()).clamp(-1.0, 1.0));
            }
            labels.push(c);
        }
        (Matrix::new(n, 3, data).unwrap(), labels)
    }

    fn quick(kind: ServiceKind) -> ServiceConfig {
        let mut cfg = ServiceConfig::for_kind(kind, 1);
        cfg.forest.trees = 10;
        cfg
    }

    #[test]
    fn every_kind_separates_blobs() {
        let (x, y) = blobs(200, 1);
        for kind in ServiceKind::ALL {
            let model = train_service_model(&x, &y, 2, &quick(kind)).unwrap();
            let acc = model.accuracy(&x, &y).unwrap();
            assert!(acc >= 0.95, "{kind}: {acc}");
            assert_eq!(model.kind(), kind);
        }
    }

    #[test]
    fn rejects_bad_labels() {
        let (x, mut y) = blobs(20, 2);
        let cfg = quick(ServiceKind::SoftmaxRegression);
        let single = vec![0; 20];
        assert!(matches!(train_service_model(&x, &single, 2, &cfg), Err(Error::Domain(_))));
        assert!(train_service_model(&x, &y, 1, &cfg).is_err());
        y[3] = 5;
        assert!(matches!(train_service_model(&x, &y, 2, &cfg), Err(Error::Domain(_))));
    }

    #[test]
    fn zero_softmax_is_uniform_and_ties_go_low() {
        let model = ServiceModel::new(
            ServiceParams::Softmax(Dense::zeros(4, 3, Activation::Identity)),
            3,
            4,
        )
        .unwrap();
        let p = model.predict_proba(&[0.3, -0.1, 0.9, 0.0]).unwrap();
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(model.predict(&[0.3, -0.1, 0.9, 0.0]).unwrap(), 0);
        assert!(matches!(model.predict(&[0.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn predict_agrees_with_proba_and_rows_sum_to_one() {
        let (x, y) = blobs(120, 3);
        let mut rng = Rng::new(4);
        for kind in ServiceKind::ALL {
            let model = train_service_model(&x, &y, 2, &quick(kind)).unwrap();
            for _ in 0..1000 {
                let z = uniform(&mut rng, -1.0, 1.0, 3).unwrap();
                let p = model.predict_proba(&z).unwrap();
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(p.iter().all(|&v| v >= 0.0));
                assert_eq!(model.predict(&z).unwrap(), argmax(&p));
                assert_eq!(model.predict_proba(&z).unwrap(), p);
            }
        }
    }

    #[test]
    fn forest_is_invariant_to_tree_order() {
        let (x, y) = blobs(120, 5);
        let model = train_service_model(&x, &y, 2, &quick(ServiceKind::RandomForest)).unwrap();
        let ServiceParams::Forest(forest) = model.params() else {
            unreachable!()
        };
        let mut reversed = forest.trees().to_vec();
        reversed.reverse();
        let flipped = RandomForest::new(reversed, 2).unwrap();
        let mut rng = Rng::new(6);
        for _ in 0..500 {
            let z = uniform(&mut rng, -1.0, 1.0, 3).unwrap();
            let a = forest.predict_proba(&z);
            let b = flipped.predict_proba(&z);
            assert_eq!(argmax(&a), argmax(&b));
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mlp_gradient_check() {
        let mut rng = Rng::new(7);
        let net = Network::glorot(&[4, 64, 32, 3], Activation::Identity, &mut rng);
        let x = Matrix::new(5, 4, uniform(&mut rng, -1.0, 1.0, 20).unwrap()).unwrap();
        let labels = [0, 2, 1, 1, 0];
        let err = gradcheck::max_relative_error(&net, &x, Targets::Classes(&labels), 1e-5);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn kind_names_round_trip() {
        for kind in ServiceKind::ALL {
            assert_eq!(kind.short_name().parse::<ServiceKind>().unwrap(), kind);
        }
        assert!("svm".parse::<ServiceKind>().is_err());
    }
}
