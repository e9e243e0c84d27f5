//! Small layer helpers shared by the encoder and the heads.

use crate::error::Result;
use crate::tensor::{Graph, NodeId, ParamStore, Rng64};

/// Affine map `x W + b` over the last axis of a rank-2 input.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: String,
    bias: Option<String>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
        rng: &mut Rng64,
    ) -> Self {
        let weight = format!("{name}.weight");
        store.init_uniform(&weight, &[inputs, outputs], inputs, rng);
        let bias = bias.then(|| {
            let b = format!("{name}.bias");
            store.init_uniform(&b, &[outputs], inputs, rng);
            b
        });
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.bind(ps, &self.weight)?;
        let y = g.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = g.bind(ps, b)?;
                g.add(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }

    pub fn bias_name(&self) -> Option<&str> {
        self.bias.as_deref()
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut Rng64) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, mut x: NodeId) -> Result<NodeId> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, ps, x)?;
            if i < last {
                x = g.relu(x)?;
            }
        }
        Ok(x)
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }
}
