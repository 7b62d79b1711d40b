//! Adaptive prompt layer: a GRU encoder over the input's token embeddings and
//! a GRU decoder with additive attention that emits `s` continuous vectors in
//! the language model's embedding space.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Graph, NodeId, ParamId, ParamStore, Parameterized, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptGenConfig {
    pub d_model: usize,
    pub d_hidden: usize,
    /// Number of generated prompt vectors.
    pub s: usize,
    pub seed: u64,
}

impl PromptGenConfig {
    pub fn new(d_model: usize) -> Self {
        PromptGenConfig { d_model, d_hidden: d_model, s: 4, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.s == 0 || self.d_model == 0 || self.d_hidden == 0 {
            return Err(Error::Config("s, d_model and d_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// Generated prompt vectors plus the decoder's attention over input rows.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptivePrompt {
    /// `s x d_model`.
    pub vectors: Tensor,
    /// `s x n`; each row sums to one.
    pub attention_trace: Tensor,
}

/// Graph handles for a generated prompt.
#[derive(Clone, Debug)]
pub struct PromptNodes {
    pub vectors: NodeId,
    /// One `n x 1` weight column per decoder step.
    pub attention: Vec<NodeId>,
}

#[derive(Clone, Debug)]
struct GruIds {
    wz: ParamId,
    uz: ParamId,
    bz: ParamId,
    wr: ParamId,
    ur: ParamId,
    br: ParamId,
    wn: ParamId,
    un: ParamId,
    bn: ParamId,
}

#[derive(Clone, Debug)]
pub struct PromptGenLayer {
    config: PromptGenConfig,
    params: ParamStore,
    enc: GruIds,
    dec: GruIds,
    att_query: ParamId,
    att_keys: ParamId,
    att_bias: ParamId,
    att_score: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    start: ParamId,
}

fn gru_params(p: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, input: usize, hidden: usize) -> GruIds {
    let wi = 1.0 / (input as f64).sqrt();
    let wh = 1.0 / (hidden as f64).sqrt();
    let mut w = |p: &mut ParamStore, n: &str, shape: &[usize], std: f64| {
        p.add(format!("{prefix}.{n}"), Tensor::randn(shape, std, rng))
    };
    GruIds {
        wz: w(p, "wz", &[input, hidden], wi),
        uz: w(p, "uz", &[hidden, hidden], wh),
        bz: p.add(format!("{prefix}.bz"), Tensor::zeros(&[hidden])),
        wr: w(p, "wr", &[input, hidden], wi),
        ur: w(p, "ur", &[hidden, hidden], wh),
        br: p.add(format!("{prefix}.br"), Tensor::zeros(&[hidden])),
        wn: w(p, "wn", &[input, hidden], wi),
        un: w(p, "un", &[hidden, hidden], wh),
        bn: p.add(format!("{prefix}.bn"), Tensor::zeros(&[hidden])),
    }
}

impl PromptGenLayer {
    pub fn new(config: PromptGenConfig) -> Result<Self> {
        config.validate()?;
        let (d, h) = (config.d_model, config.d_hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamStore::new();
        let enc = gru_params(&mut p, &mut rng, "pg.enc", d, h);
        let dec = gru_params(&mut p, &mut rng, "pg.dec", d + h, h);
        let sh = 1.0 / (h as f64).sqrt();
        let att_query = p.add("pg.att.query", Tensor::randn(&[h, h], sh, &mut rng));
        let att_keys = p.add("pg.att.keys", Tensor::randn(&[h, h], sh, &mut rng));
        let att_bias = p.add("pg.att.bias", Tensor::zeros(&[h]));
        let att_score = p.add("pg.att.score", Tensor::randn(&[h, 1], sh, &mut rng));
        let out_w = p.add("pg.out.w", Tensor::randn(&[h, d], sh, &mut rng));
        let out_b = p.add("pg.out.b", Tensor::zeros(&[d]));
        let start = p.add("pg.start", Tensor::randn(&[1, d], 1.0, &mut rng));
        Ok(PromptGenLayer { config, params: p, enc, dec, att_query, att_keys, att_bias, att_score, out_w, out_b, start })
    }

    pub fn from_params(config: PromptGenConfig, params: ParamStore) -> Result<Self> {
        let mut layer = Self::new(config)?;
        if layer.params.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} prompt-layer tensors, found {}",
                layer.params.len(),
                params.len()
            )));
        }
        for id in layer.params.ids() {
            if layer.params.name(id) != params.name(id) || layer.params.get(id).shape() != params.get(id).shape() {
                return Err(Error::Config(format!("prompt tensor `{}` does not match the config", params.name(id))));
            }
        }
        layer.params = params;
        Ok(layer)
    }

    pub fn config(&self) -> &PromptGenConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// One GRU update. `xw` holds the precomputed input projections
    /// `(x Wz, x Wr, x Wn)`, each `1 x d_hidden`.
    fn gru_step(&self, g: &mut Graph, ids: &GruIds, xw: [NodeId; 3], state: NodeId) -> Result<NodeId> {
        let p = &self.params;
        let gate = |g: &mut Graph, xw: NodeId, u: ParamId, b: ParamId, state: NodeId| -> Result<NodeId> {
            let u = g.param(p, u);
            let b = g.param(p, b);
            let hu = g.matmul(state, u)?;
            let s = g.add(xw, hu)?;
            g.add_row(s, b)
        };
        let z = gate(g, xw[0], ids.uz, ids.bz, state)?;
        let z = g.sigmoid(z)?;
        let r = gate(g, xw[1], ids.ur, ids.br, state)?;
        let r = g.sigmoid(r)?;
        let gated = g.mul(r, state)?;
        let n = gate(g, xw[2], ids.un, ids.bn, gated)?;
        let n = g.tanh(n)?;
        let delta = g.sub(n, state)?;
        let step = g.mul(z, delta)?;
        g.add(state, step)
    }

    fn project_inputs(&self, g: &mut Graph, ids: &GruIds, x: NodeId) -> Result<[NodeId; 3]> {
        let p = &self.params;
        let mut out = [x; 3];
        for (slot, w) in out.iter_mut().zip([ids.wz, ids.wr, ids.wn]) {
            let w = g.param(p, w);
            *slot = g.matmul(x, w)?;
        }
        Ok(out)
    }

    /// Unidirectional GRU pass over the `n x d_model` input rows; returns the
    /// `n x d_hidden` state sequence.
    pub fn encode_input(&self, g: &mut Graph, input: NodeId) -> Result<NodeId> {
        let (n, d) = g.value(input).dims2()?;
        if n == 0 {
            return Err(Error::EmptyInput("prompt generator needs at least one input row".into()));
        }
        if d != self.config.d_model {
            return Err(Error::Shape(format!("input width {d} != d_model {}", self.config.d_model)));
        }
        let xw = self.project_inputs(g, &self.enc, input)?;
        let mut state = g.constant(Tensor::zeros(&[1, self.config.d_hidden]))?;
        let mut states = Vec::with_capacity(n);
        for j in 0..n {
            let row = [g.slice(xw[0], 0, j, 1)?, g.slice(xw[1], 0, j, 1)?, g.slice(xw[2], 0, j, 1)?];
            state = self.gru_step(g, &self.enc, row, state)?;
            states.push(state);
        }
        if n == 1 {
            Ok(states[0])
        } else {
            g.concat(&states, 0)
        }
    }

    /// Additive attention of a `1 x d_hidden` decoder state over `n x d_hidden`
    /// encoder states. Returns `(context 1 x d_hidden, weights n x 1)`.
    pub fn attend(&self, g: &mut Graph, state: NodeId, encoder_states: NodeId) -> Result<(NodeId, NodeId)> {
        let keys = {
            let u = g.param(&self.params, self.att_keys);
            g.matmul(encoder_states, u)?
        };
        self.attend_keys(g, state, encoder_states, keys)
    }

    fn attend_keys(&self, g: &mut Graph, state: NodeId, encoder_states: NodeId, keys: NodeId) -> Result<(NodeId, NodeId)> {
        let h = self.config.d_hidden;
        if g.shape(state) != [1, h] || g.value(encoder_states).dims2()?.1 != h {
            return Err(Error::Shape(format!(
                "attend: state {:?} / encoder states {:?} do not match d_hidden {h}",
                g.shape(state),
                g.shape(encoder_states)
            )));
        }
        let p = &self.params;
        let wq = g.param(p, self.att_query);
        let q = g.matmul(state, wq)?;
        let e = g.add_row(keys, q)?;
        let b = g.param(p, self.att_bias);
        let e = g.add_row(e, b)?;
        let e = g.tanh(e)?;
        let v = g.param(p, self.att_score);
        let scores = g.matmul(e, v)?;
        let weights = g.softmax(scores, 0)?;
        let context = g.matmul_t(weights, encoder_states, true, false)?;
        Ok((context, weights))
    }

    /// Encodes the input, then runs `s` decoder steps. Step one reads the
    /// learned start vector, later steps read the previous output vector.
    pub fn generate(&self, g: &mut Graph, input: NodeId) -> Result<PromptNodes> {
        let enc_states = self.encode_input(g, input)?;
        let n = g.shape(enc_states)[0];
        let keys = {
            let u = g.param(&self.params, self.att_keys);
            g.matmul(enc_states, u)?
        };
        let p = &self.params;
        let mut state = g.slice(enc_states, 0, n - 1, 1)?;
        let mut prev = g.param(p, self.start);
        let (wo, bo) = (g.param(p, self.out_w), g.param(p, self.out_b));
        let mut outputs = Vec::with_capacity(self.config.s);
        let mut attention = Vec::with_capacity(self.config.s);
        for _ in 0..self.config.s {
            let (context, weights) = self.attend_keys(g, state, enc_states, keys)?;
            let x = g.concat(&[prev, context], 1)?;
            let xw = self.project_inputs(g, &self.dec, x)?;
            state = self.gru_step(g, &self.dec, xw, state)?;
            let out = g.matmul(state, wo)?;
            let out = g.add_row(out, bo)?;
            outputs.push(out);
            attention.push(weights);
            prev = out;
        }
        let vectors = if outputs.len() == 1 { outputs[0] } else { g.concat(&outputs, 0)? };
        Ok(PromptNodes { vectors, attention })
    }

    /// Convenience wrapper over [`generate`](Self::generate) for plain tensors.
    pub fn generate_prompt(&self, input_embeddings: &Tensor) -> Result<AdaptivePrompt> {
        let mut g = Graph::new();
        let x = g.constant(input_embeddings.clone())?;
        let nodes = self.generate(&mut g, x)?;
        let n = input_embeddings.dims2()?.0;
        let mut trace = Vec::with_capacity(self.config.s * n);
        for &a in &nodes.attention {
            trace.extend_from_slice(g.value(a).data());
        }
        Ok(AdaptivePrompt {
            vectors: g.value(nodes.vectors).clone(),
            attention_trace: Tensor::from_vec(vec![self.config.s, n], trace)?,
        })
    }
}

impl Parameterized for PromptGenLayer {
    fn stores(&self) -> Vec<&ParamStore> {
        vec![&self.params]
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![&mut self.params]
    }
}
