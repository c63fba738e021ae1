//! Reference architectures and parameter initialisation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, GraphBuilder, LayerKind};
use crate::tensor::ParamVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ArchKind {
    /// Fully connected ReLU network with `hidden_layers` layers of `width`.
    Fcn { hidden_layers: usize, width: usize },
    /// Two 5x5 valid convolutions (6 and 16 channels), each followed by
    /// ReLU and 2x2 average pooling, then dense layers of 120 and 84 units.
    Lenet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    #[serde(flatten)]
    pub kind: ArchKind,
    /// Applied after every hidden dense ReLU. Zero disables dropout layers.
    #[serde(default)]
    pub dropout_rate: f64,
}

impl ArchSpec {
    pub fn fcn(hidden_layers: usize, width: usize) -> Self {
        Self {
            kind: ArchKind::Fcn { hidden_layers, width },
            dropout_rate: 0.0,
        }
    }

    pub fn lenet() -> Self {
        Self {
            kind: ArchKind::Lenet,
            dropout_rate: 0.0,
        }
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout_rate = rate;
        self
    }
}

fn hidden_dense(b: GraphBuilder, name: &str, width: usize, rate: f64) -> Result<GraphBuilder> {
    let b = b.dense(name, width)?.relu(&format!("{name}.relu"))?;
    if rate > 0.0 {
        b.dropout(&format!("{name}.dropout"), rate)
    } else {
        Ok(b)
    }
}

/// Builds the graph for `arch` on inputs of `input_shape` with `num_outputs`
/// raw outputs.
pub fn build(arch: &ArchSpec, input_shape: &[usize], num_outputs: usize) -> Result<Graph> {
    let rate = arch.dropout_rate;
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    let mut b = GraphBuilder::new(input_shape)?;
    match arch.kind {
        ArchKind::Fcn { hidden_layers, width } => {
            if hidden_layers > 0 && width == 0 {
                return Err(Error::invalid("hidden width must be positive"));
            }
            for l in 0..hidden_layers {
                b = hidden_dense(b, &format!("dense{}", l + 1), width, rate)?;
            }
        }
        ArchKind::Lenet => {
            b = b
                .conv("conv1", 6, 5)?
                .relu("conv1.relu")?
                .avg_pool("pool1")?
                .conv("conv2", 16, 5)?
                .relu("conv2.relu")?
                .avg_pool("pool2")?;
            b = hidden_dense(b, "fc1", 120, rate)?;
            b = hidden_dense(b, "fc2", 84, rate)?;
        }
    }
    b.dense("out", num_outputs)?.build()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitSpec {
    pub seed: u64,
}

/// He-normal weights (`std = sqrt(2 / fan_in)`) and zero biases.
pub fn init(graph: &Graph, spec: InitSpec) -> Result<ParamVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pv = ParamVector::zeros(graph.layout().to_vec())?;
    for node in graph.nodes() {
        let Some(ws) = node.weight_slot else { continue };
        let fan_in = match node.kind {
            LayerKind::Dense { inputs, .. } => inputs,
            LayerKind::Conv { geom, .. } => geom.patch_len(),
            _ => unreachable!("only dense and conv layers own parameters"),
        };
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).map_err(|e| Error::invalid(e.to_string()))?;
        let range = graph.layout()[ws].range();
        for v in &mut pv.values_mut()[range] {
            *v = normal.sample(&mut rng);
        }
    }
    Ok(pv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lenet_parameter_count() {
        let g = build(&ArchSpec::lenet(), &[28, 28, 1], 10).unwrap();
        let expected = (25 * 6 + 6) + (150 * 16 + 16) + (256 * 120 + 120) + (120 * 84 + 84) + (84 * 10 + 10);
        assert_eq!(g.num_params(), expected);
        assert_eq!(g.num_outputs(), 10);
    }

    #[test]
    fn lenet_rejects_small_images() {
        assert!(build(&ArchSpec::lenet(), &[12, 12], 10).is_err());
    }

    #[test]
    fn fcn_has_dropout_only_when_requested() {
        let g = build(&ArchSpec::fcn(2, 8), &[3], 2).unwrap();
        assert!(!g.has_dropout());
        let g = build(&ArchSpec::fcn(2, 8).with_dropout(0.2), &[3], 2).unwrap();
        assert!(g.has_dropout());
        assert_eq!(g.nodes().len(), 2 * 3 + 1);
    }

    #[test]
    fn init_is_seeded_with_zero_biases() {
        let g = build(&ArchSpec::fcn(1, 50), &[40], 3).unwrap();
        let a = init(&g, InitSpec { seed: 5 }).unwrap();
        assert_eq!(a, init(&g, InitSpec { seed: 5 }).unwrap());
        assert_ne!(a, init(&g, InitSpec { seed: 6 }).unwrap());
        assert!(a.slot_values(1).iter().all(|&v| v == 0.0));
        let w = a.slot_values(0);
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        assert!((var - 2.0 / 40.0).abs() < 0.01, "{var}");
    }

    #[test]
    fn arch_spec_round_trips_through_json() {
        let a = ArchSpec::fcn(3, 64).with_dropout(0.1);
        let s = serde_json::to_string(&a).unwrap();
        assert_eq!(serde_json::from_str::<ArchSpec>(&s).unwrap(), a);
    }
}
