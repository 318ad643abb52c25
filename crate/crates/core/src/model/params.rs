use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub heads: Vec<HeadParams>,
    pub w_o: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Every learnable tensor of a model, plus the fixed positional matrix `P`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub encoder: Tensor,
    pub layers: Vec<LayerParams>,
    pub decoder: Tensor,
    positions: Tensor,
}

#[derive(Clone, Debug)]
pub struct HeadVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

#[derive(Clone, Debug)]
pub struct LayerVars {
    pub heads: Vec<HeadVars>,
    pub w_o: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Tape handles for a recorded [`ModelParams`], in [`ModelParams::named`] order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub encoder: Var,
    pub layers: Vec<LayerVars>,
    pub decoder: Var,
}

impl ParamVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.encoder];
        for l in &self.layers {
            for h in &l.heads {
                v.extend([h.w_q, h.w_k, h.w_v]);
            }
            v.extend([l.w_o, l.w1, l.b1, l.w2, l.b2]);
        }
        v.push(self.decoder);
        v
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (1.0 / rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

impl ModelParams {
    /// Seeded initialization: weights uniform in `±sqrt(1/fan_in)`, biases zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config;
        let encoder = uniform(&mut rng, c.d_in(), c.d_x);
        let layers = (0..c.num_layers)
            .map(|_| {
                let heads = (0..c.heads)
                    .map(|_| HeadParams {
                        w_q: uniform(&mut rng, c.qk_in(), c.d_m()),
                        w_k: uniform(&mut rng, c.qk_in(), c.d_m()),
                        w_v: uniform(&mut rng, c.d_x, c.d_v),
                    })
                    .collect();
                LayerParams {
                    heads,
                    w_o: uniform(&mut rng, c.heads * c.d_v, c.d_o),
                    w1: uniform(&mut rng, c.d_o + c.d_x, c.mlp_hidden),
                    b1: Tensor::zeros(&[c.mlp_hidden]),
                    w2: uniform(&mut rng, c.mlp_hidden, c.d_x),
                    b2: Tensor::zeros(&[c.d_x]),
                }
            })
            .collect();
        let decoder = uniform(&mut rng, c.d_x, 1);
        Ok(ModelParams {
            config: config.clone(),
            encoder,
            layers,
            decoder,
            positions: Tensor::identity(c.d_p),
        })
    }

    /// The fixed positional encodings (identity, one row per position).
    pub fn positions(&self) -> &Tensor {
        &self.positions
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("encoder".to_string(), &self.encoder)];
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                out.push((format!("layer.{l}.head.{h}.W_Q"), &head.w_q));
                out.push((format!("layer.{l}.head.{h}.W_K"), &head.w_k));
                out.push((format!("layer.{l}.head.{h}.W_V"), &head.w_v));
            }
            out.push((format!("layer.{l}.W_O"), &layer.w_o));
            out.push((format!("layer.{l}.mlp.W1"), &layer.w1));
            out.push((format!("layer.{l}.mlp.b1"), &layer.b1));
            out.push((format!("layer.{l}.mlp.W2"), &layer.w2));
            out.push((format!("layer.{l}.mlp.b2"), &layer.b2));
        }
        out.push(("decoder".to_string(), &self.decoder));
        out
    }

    /// Learnable tensors in [`ModelParams::named`] order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.encoder];
        for layer in &mut self.layers {
            for head in &mut layer.heads {
                out.push(&mut head.w_q);
                out.push(&mut head.w_k);
                out.push(&mut head.w_v);
            }
            out.push(&mut layer.w_o);
            out.push(&mut layer.w1);
            out.push(&mut layer.b1);
            out.push(&mut layer.w2);
            out.push(&mut layer.b2);
        }
        out.push(&mut self.decoder);
        out
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Pushes every learnable tensor onto `tape` as a leaf.
    pub fn record(&self, tape: &mut Tape, requires_grad: bool) -> ParamVars {
        let mut leaf = |t: &Tensor| tape.leaf(t.clone().with_grad(requires_grad));
        let encoder = leaf(&self.encoder);
        let layers = self
            .layers
            .iter()
            .map(|l| LayerVars {
                heads: l
                    .heads
                    .iter()
                    .map(|h| HeadVars {
                        w_q: leaf(&h.w_q),
                        w_k: leaf(&h.w_k),
                        w_v: leaf(&h.w_v),
                    })
                    .collect(),
                w_o: leaf(&l.w_o),
                w1: leaf(&l.w1),
                b1: leaf(&l.b1),
                w2: leaf(&l.w2),
                b2: leaf(&l.b2),
            })
            .collect();
        let decoder = leaf(&self.decoder);
        ParamVars {
            encoder,
            layers,
            decoder,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AttentionKind;

    #[test]
    fn init_is_seeded() {
        let c = ModelConfig::new(8, AttentionKind::Positional);
        let a = ModelParams::init(&c, 1).unwrap();
        assert_eq!(a, ModelParams::init(&c, 1).unwrap());
        assert_ne!(a, ModelParams::init(&c, 2).unwrap());
        assert_eq!(a.num_params(), c.param_count());
        assert!(a.layers[0].b1.data().iter().all(|&b| b == 0.0));
        let bound = (1.0f64 / 128.0).sqrt();
        assert!(a.layers[0].w1.data().iter().all(|w| w.abs() <= bound));
        assert_eq!(a.positions(), &Tensor::identity(9));
        for kind in [AttentionKind::SelfAttention, AttentionKind::SelfRope] {
            let c = ModelConfig::new(4, kind);
            assert_eq!(ModelParams::init(&c, 0).unwrap().num_params(), c.param_count());
        }
    }
}
