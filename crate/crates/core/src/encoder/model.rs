use rand_distr::{Distribution, Normal};

use super::layers::{attention_block, ffn_block, rmsnorm, BlockVars};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{AttentionMask, Graph, Real, Tensor, Var};

const INIT_STD: f64 = 0.02;

/// Token grid plus attention visibility and per-token positions.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderInput {
    /// Row-major `[batch, len]`.
    pub ids: Vec<u32>,
    pub batch: usize,
    pub len: usize,
    pub mask: AttentionMask,
    /// Row-major `[batch, len]` rotary positions.
    pub positions: Vec<usize>,
}

impl EncoderInput {
    pub fn new(ids: Vec<u32>, batch: usize, len: usize, mask: AttentionMask, positions: Vec<usize>) -> Result<Self> {
        if batch == 0 || len == 0 {
            return Err(Error::input("encoder input needs at least one token"));
        }
        if ids.len() != batch * len || positions.len() != batch * len {
            return Err(Error::Dimension {
                op: "encoder_input",
                left: vec![batch, len],
                right: vec![ids.len(), positions.len()],
            });
        }
        if mask.batch() != batch || mask.len() != len {
            return Err(Error::Dimension {
                op: "encoder_input",
                left: vec![batch, len],
                right: vec![mask.batch(), mask.len()],
            });
        }
        Ok(Self {
            ids,
            batch,
            len,
            mask,
            positions,
        })
    }

    /// One unpadded sequence with full attention and positions `0..L`.
    pub fn single(ids: &[u32]) -> Result<Self> {
        Self::new(
            ids.to_vec(),
            1,
            ids.len(),
            AttentionMask::full(1, ids.len()),
            (0..ids.len()).collect(),
        )
    }

    /// Independent sequences right-padded to the longest one.
    pub fn padded(seqs: &[Vec<u32>], pad_id: u32) -> Result<Self> {
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut segments = Vec::with_capacity(seqs.len() * len);
        let mut positions = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            if s.is_empty() {
                return Err(Error::input("empty sequence in batch"));
            }
            for p in 0..len {
                if p < s.len() {
                    ids.push(s[p]);
                    segments.push(1);
                    positions.push(p);
                } else {
                    ids.push(pad_id);
                    segments.push(0);
                    positions.push(0);
                }
            }
        }
        let mask = AttentionMask::segments(seqs.len(), len, segments)?;
        Self::new(ids, seqs.len(), len, mask, positions)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub attn_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ffn_norm: Tensor<T>,
    pub w_gate: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

/// Pre-RMSNorm encoder with rotary attention, SwiGLU feed-forward and an
/// MLM head `H` stored separately from the embedding table `E`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel<T> {
    config: ModelConfig,
    /// `[vocab, width]`
    pub embed: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Tensor<T>,
    /// `[width, vocab]`
    pub lm_head: Tensor<T>,
    pub lm_head_bias: Tensor<T>,
}

/// Model parameters registered in one graph.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub embed: Var,
    pub blocks: Vec<BlockVars>,
    pub final_norm: Var,
    pub lm_head: Var,
    pub lm_head_bias: Var,
}

impl BoundModel {
    /// Handles in canonical parameter order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.embed];
        for b in &self.blocks {
            out.extend([
                b.attn_norm, b.wq, b.wk, b.wv, b.wo, b.ffn_norm, b.w_gate, b.w_up, b.w_down,
            ]);
        }
        out.extend([self.final_norm, self.lm_head, self.lm_head_bias]);
        out
    }
}

impl<T: Real> EncoderModel<T> {
    /// Fresh model: matrices ~ N(0, 0.02²), gains 1, bias 0.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, rng::INIT, &[]);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut matrix = |rows: usize, cols: usize| {
            let data = (0..rows * cols).map(|_| T::of(normal.sample(&mut rng))).collect();
            Tensor::from_vec(&[rows, cols], data).expect("shape")
        };
        let (v, d, f) = (config.vocab_size, config.width, config.ffn_hidden);
        let embed = matrix(v, d);
        let layers = (0..config.depth)
            .map(|_| LayerParams {
                attn_norm: Tensor::full(&[d], T::one()),
                wq: matrix(d, d),
                wk: matrix(d, d),
                wv: matrix(d, d),
                wo: matrix(d, d),
                ffn_norm: Tensor::full(&[d], T::one()),
                w_gate: matrix(d, f),
                w_up: matrix(d, f),
                w_down: matrix(f, d),
            })
            .collect();
        let lm_head = matrix(d, v);
        let mut model = Self {
            embed,
            layers,
            final_norm: Tensor::full(&[d], T::one()),
            lm_head,
            lm_head_bias: Tensor::zeros(&[v]),
            config,
        };
        for (_, p) in model.parameters_mut() {
            p.set_requires_grad(true);
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Named parameters in canonical order.
    pub fn parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            out.extend([
                (p("attn_norm"), &l.attn_norm),
                (p("wq"), &l.wq),
                (p("wk"), &l.wk),
                (p("wv"), &l.wv),
                (p("wo"), &l.wo),
                (p("ffn_norm"), &l.ffn_norm),
                (p("w_gate"), &l.w_gate),
                (p("w_up"), &l.w_up),
                (p("w_down"), &l.w_down),
            ]);
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("lm_head".into(), &self.lm_head));
        out.push(("lm_head_bias".into(), &self.lm_head_bias));
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![("embed".to_string(), &mut self.embed)];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            out.extend([
                (p("attn_norm"), &mut l.attn_norm),
                (p("wq"), &mut l.wq),
                (p("wk"), &mut l.wk),
                (p("wv"), &mut l.wv),
                (p("wo"), &mut l.wo),
                (p("ffn_norm"), &mut l.ffn_norm),
                (p("w_gate"), &mut l.w_gate),
                (p("w_up"), &mut l.w_up),
                (p("w_down"), &mut l.w_down),
            ]);
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        out.push(("lm_head".into(), &mut self.lm_head));
        out.push(("lm_head_bias".into(), &mut self.lm_head_bias));
        out
    }

    /// Whether weight decay applies, per canonical parameter. Norm gains and
    /// biases are excluded.
    pub fn decay_mask(&self) -> Vec<bool> {
        self.parameters()
            .iter()
            .map(|(n, _)| !(n.ends_with("norm") || n.ends_with("bias")))
            .collect()
    }

    /// Allocated scalar count.
    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Registers the parameters as gradient-receiving leaves of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> BoundModel {
        self.bind_with(g, true)
    }

    /// Registers the parameters as constants (inference).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> BoundModel {
        self.bind_with(g, false)
    }

    fn bind_with(&self, g: &mut Graph<T>, trainable: bool) -> BoundModel {
        let mut put = |t: &Tensor<T>| if trainable { g.param(t) } else { g.constant(t.clone()) };
        let embed = put(&self.embed);
        let blocks = self
            .layers
            .iter()
            .map(|l| BlockVars {
                attn_norm: put(&l.attn_norm),
                wq: put(&l.wq),
                wk: put(&l.wk),
                wv: put(&l.wv),
                wo: put(&l.wo),
                ffn_norm: put(&l.ffn_norm),
                w_gate: put(&l.w_gate),
                w_up: put(&l.w_up),
                w_down: put(&l.w_down),
            })
            .collect();
        BoundModel {
            embed,
            blocks,
            final_norm: put(&self.final_norm),
            lm_head: put(&self.lm_head),
            lm_head_bias: put(&self.lm_head_bias),
        }
    }

    /// Final hidden states `[B, L, d]`.
    pub fn encode(&self, g: &mut Graph<T>, bound: &BoundModel, input: &EncoderInput) -> Result<Var> {
        let cfg = &self.config;
        if input.len > cfg.max_context {
            return Err(Error::Context {
                len: input.len,
                max_context: cfg.max_context,
            });
        }
        let ids: Vec<usize> = input.ids.iter().map(|&i| i as usize).collect();
        let mut x = g.embedding(bound.embed, &ids, &[input.batch, input.len])?;
        for block in &bound.blocks {
            x = attention_block(
                g,
                x,
                block,
                cfg.num_heads,
                &input.mask,
                &input.positions,
                cfg.rope_theta,
                cfg.rmsnorm_eps,
            )?;
            x = ffn_block(g, x, block, cfg.rmsnorm_eps)?;
        }
        rmsnorm(g, x, bound.final_norm, cfg.rmsnorm_eps)
    }

    /// `hidden · H + bias`
    pub fn logits(&self, g: &mut Graph<T>, bound: &BoundModel, hidden: Var) -> Result<Var> {
        let z = g.matmul(hidden, bound.lm_head)?;
        g.add_bias(z, bound.lm_head_bias)
    }

    /// Inference forward pass returning hidden states `[B, L, d]`.
    pub fn forward(&self, input: &EncoderInput) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.bind_frozen(&mut g);
        let h = self.encode(&mut g, &bound, input)?;
        Ok(g.value(h).clone())
    }

    /// MLM logits `[B, L, vocab]` for hidden states from [`Self::forward`].
    pub fn mlm_logits(&self, hidden: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let h = g.constant(hidden.clone());
        let head = g.constant(self.lm_head.clone());
        let bias = g.constant(self.lm_head_bias.clone());
        let z = g.matmul(h, head)?;
        let z = g.add_bias(z, bias)?;
        Ok(g.value(z).clone())
    }

    /// Adds the graph's leaf gradients into the parameters' gradient buffers.
    pub fn accumulate_grads(&mut self, g: &Graph<T>, bound: &BoundModel) -> Result<()> {
        let vars = bound.vars();
        for ((_, p), v) in self.parameters_mut().into_iter().zip(vars) {
            if let Some(grad) = g.grad(v) {
                p.accumulate_grad(grad)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.parameters_mut() {
            p.zero_grad();
        }
    }

    /// Raises `max_context`; no parameter changes because rotary positions
    /// carry no weights.
    pub fn extend_context(&mut self, new_window: usize) -> Result<()> {
        if new_window < self.config.max_context {
            return Err(Error::config(format!(
                "cannot shrink context from {} to {new_window}",
                self.config.max_context
            )));
        }
        self.config.max_context = new_window;
        Ok(())
    }

    /// Overwrites `H` with the values of `Eᵀ`. Storage stays separate.
    pub fn copy_embedding_into_head(&mut self) {
        let (v, d) = (self.config.vocab_size, self.config.width);
        let e = self.embed.data().to_vec();
        let h = self.lm_head.data_mut();
        for i in 0..v {
            for k in 0..d {
                h[k * v + i] = e[i * d + k];
            }
        }
    }

    /// Replaces all parameter values, in canonical order. Shapes must match.
    pub fn load_parameters(&mut self, tensors: Vec<Tensor<T>>) -> Result<()> {
        let mut params = self.parameters_mut();
        if tensors.len() != params.len() {
            return Err(Error::Format {
                offset: 0,
                msg: format!("expected {} parameter tensors, got {}", params.len(), tensors.len()),
            });
        }
        for ((name, p), t) in params.iter_mut().zip(tensors) {
            if p.shape() != t.shape() {
                return Err(Error::config(format!(
                    "{name}: shape {:?} does not match model shape {:?}",
                    t.shape(),
                    p.shape()
                )));
            }
            let mut t = t;
            t.set_requires_grad(true);
            **p = t;
        }
        Ok(())
    }
}
