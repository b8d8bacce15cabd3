//! The history-conditioned policy: a small pre-norm causal transformer.
//!
//! A history of `h` completed turns plus a live query is encoded as `h + 1`
//! tokens. Token `t` carries the question asked at turn `t` together with the
//! previous turn's full outcome (winner, loser, question), so the output at
//! position `t` is a distribution over actions for question `t` given
//! everything observed before it. One causal pass therefore scores every turn
//! of a training history at once.

use serde::{Deserialize, Serialize};

use crate::datagen::PreferenceTriple;
use crate::env::{ActionId, Context};
use crate::error::{Error, Result};
use crate::numcore::{Array, Graph, ParamStore, ParamVars, Rng, Var};

/// Learnable parameters of the policy.
pub type PolicyParams = ParamStore;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub max_positions: usize,
    pub num_actions: usize,
    pub context_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            heads: 4,
            hidden: 256,
            max_positions: 16,
            num_actions: 4,
            context_dim: 3,
        }
    }
}

impl ModelConfig {
    /// Query context, winner and loser one-hots, previous context.
    pub fn token_dim(&self) -> usize {
        2 * self.context_dim + 2 * self.num_actions
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::config("model.layers", "must be at least 1"));
        }
        if self.heads == 0 || self.hidden == 0 || self.hidden % self.heads != 0 {
            return Err(Error::config("model.hidden", "must be a positive multiple of model.heads"));
        }
        if self.max_positions == 0 {
            return Err(Error::config("model.max_positions", "must be at least 1"));
        }
        if self.num_actions < 2 {
            return Err(Error::config("model.num_actions", "must be at least 2"));
        }
        if self.context_dim == 0 {
            return Err(Error::config("model.context_dim", "must be at least 1"));
        }
        Ok(())
    }

    /// Every parameter name with its shape, in store order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let h = self.hidden;
        let mut out = vec![
            ("tok_emb.w".to_string(), vec![self.token_dim(), h]),
            ("tok_emb.b".to_string(), vec![h]),
            ("pos_emb".to_string(), vec![self.max_positions, h]),
        ];
        for l in 0..self.layers {
            let p = |s: &str| format!("blocks.{l}.{s}");
            out.extend([
                (p("ln1.g"), vec![h]),
                (p("ln1.b"), vec![h]),
                (p("attn.wq"), vec![h, h]),
                (p("attn.bq"), vec![h]),
                (p("attn.wk"), vec![h, h]),
                (p("attn.bk"), vec![h]),
                (p("attn.wv"), vec![h, h]),
                (p("attn.bv"), vec![h]),
                (p("attn.wo"), vec![h, h]),
                (p("attn.bo"), vec![h]),
                (p("ln2.g"), vec![h]),
                (p("ln2.b"), vec![h]),
                (p("mlp.w1"), vec![h, 4 * h]),
                (p("mlp.b1"), vec![4 * h]),
                (p("mlp.w2"), vec![4 * h, h]),
                (p("mlp.b2"), vec![h]),
            ]);
        }
        out.extend([
            ("ln_f.g".to_string(), vec![h]),
            ("ln_f.b".to_string(), vec![h]),
            ("head.w".to_string(), vec![h, self.num_actions]),
            ("head.b".to_string(), vec![self.num_actions]),
        ]);
        out
    }
}

/// Gaussian init (std 0.02, residual output projections scaled by
/// `1/√(2·layers)`), unit layer-norm gains, zero biases and a zero output head.
pub fn init_params(rng: &Rng, config: &ModelConfig) -> Result<PolicyParams> {
    config.validate()?;
    let mut rng = rng.fork("init");
    let residual_std = INIT_STD / (2.0 * config.layers as f64).sqrt();
    let mut params = ParamStore::new();
    for (name, shape) in config.param_shapes() {
        let n: usize = shape.iter().product();
        let leaf = name.rsplit('.').next().unwrap_or(&name);
        let data: Vec<f64> = if name.starts_with("head.") {
            vec![0.0; n]
        } else if leaf == "g" {
            vec![1.0; n]
        } else if leaf == "wo" || leaf == "w2" {
            (0..n).map(|_| rng.gaussian(0.0, residual_std)).collect()
        } else if shape.len() == 2 {
            (0..n).map(|_| rng.gaussian(0.0, INIT_STD)).collect()
        } else {
            vec![0.0; n]
        };
        params.insert(name, Array::new(shape, data)?)?;
    }
    Ok(params)
}

/// Encoded model input: `len × token_dim` values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    token_dim: usize,
    data: Vec<f64>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.data.len() / self.token_dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn token(&self, t: usize) -> &[f64] {
        &self.data[t * self.token_dim..(t + 1) * self.token_dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Overwrites one token, e.g. to probe causality.
    pub fn set_token(&mut self, t: usize, values: &[f64]) {
        assert_eq!(values.len(), self.token_dim);
        self.data[t * self.token_dim..(t + 1) * self.token_dim].copy_from_slice(values);
    }
}

/// Builds the token sequence for questions `contexts` where the first
/// `completed.len()` turns have finished and the last context is live.
pub fn encode_sequence(config: &ModelConfig, contexts: &[&Context], completed: &[&PreferenceTriple]) -> Result<TokenSequence> {
    if contexts.len() != completed.len() + 1 {
        return Err(Error::invalid(format!(
            "{} contexts for {} completed turns; need exactly one more context",
            contexts.len(),
            completed.len()
        )));
    }
    let d = config.context_dim;
    let a = config.num_actions;
    let dim = config.token_dim();
    let mut data = vec![0.0; contexts.len() * dim];
    for (t, x) in contexts.iter().enumerate() {
        if x.dim() != d {
            return Err(Error::invalid(format!("context of dimension {} (model expects {d})", x.dim())));
        }
        let tok = &mut data[t * dim..(t + 1) * dim];
        tok[..d].copy_from_slice(x.coords());
        if t > 0 {
            let prev = completed[t - 1];
            let (w, l) = (prev.winner.index(), prev.loser.index());
            if w >= a || l >= a || prev.x.dim() != d {
                return Err(Error::invalid("history triple does not fit the model"));
            }
            tok[d + w] = 1.0;
            tok[d + a + l] = 1.0;
            tok[d + 2 * a..].copy_from_slice(prev.x.coords());
        }
    }
    Ok(TokenSequence { token_dim: dim, data })
}

/// Tokens for a full training history: position `t` predicts turn `t`'s pair.
pub fn encode_history(config: &ModelConfig, triples: &[PreferenceTriple]) -> Result<TokenSequence> {
    if triples.is_empty() {
        return Err(Error::invalid("cannot encode an empty history"));
    }
    let contexts: Vec<&Context> = triples.iter().map(|t| &t.x).collect();
    let completed: Vec<&PreferenceTriple> = triples[..triples.len() - 1].iter().collect();
    encode_sequence(config, &contexts, &completed)
}

/// Adds the network to `graph` and returns the `(batch·len) × num_actions`
/// logits. All sequences in `batch` must have the same length.
pub fn build_logits(graph: &mut Graph<'_>, vars: &ParamVars, config: &ModelConfig, batch: &[&TokenSequence]) -> Result<Var> {
    let seq = batch.first().map(|s| s.len()).ok_or_else(|| Error::invalid("empty batch"))?;
    if seq == 0 {
        return Err(Error::invalid("empty token sequence"));
    }
    if seq > config.max_positions {
        return Err(Error::invalid(format!(
            "sequence of length {seq} exceeds max_positions = {}",
            config.max_positions
        )));
    }
    if batch.iter().any(|s| s.len() != seq || s.token_dim() != config.token_dim()) {
        return Err(Error::Shape("batch sequences must share length and token size".into()));
    }
    let b = batch.len();
    let mut input = Vec::with_capacity(b * seq * config.token_dim());
    for s in batch {
        input.extend_from_slice(s.data());
    }
    let tokens = graph.constant(b * seq, config.token_dim(), input);
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..seq).collect();

    let emb = graph.linear(tokens, vars.get("tok_emb.w"), vars.get("tok_emb.b"));
    let pos = graph.gather_rows(vars.get("pos_emb"), &positions);
    let mut x = graph.add(emb, pos);

    for l in 0..config.layers {
        let p = |s: &str| vars.get(&format!("blocks.{l}.{s}"));
        let h = graph.layer_norm(x, p("ln1.g"), p("ln1.b"));
        let q = graph.linear(h, p("attn.wq"), p("attn.bq"));
        let k = graph.linear(h, p("attn.wk"), p("attn.bk"));
        let v = graph.linear(h, p("attn.wv"), p("attn.bv"));
        let att = graph.causal_attention(q, k, v, b, seq, config.heads);
        let proj = graph.linear(att, p("attn.wo"), p("attn.bo"));
        x = graph.add(x, proj);

        let h = graph.layer_norm(x, p("ln2.g"), p("ln2.b"));
        let up = graph.linear(h, p("mlp.w1"), p("mlp.b1"));
        let act = graph.gelu(up);
        let down = graph.linear(act, p("mlp.w2"), p("mlp.b2"));
        x = graph.add(x, down);
    }
    let x = graph.layer_norm(x, vars.get("ln_f.g"), vars.get("ln_f.b"));
    Ok(graph.linear(x, vars.get("head.w"), vars.get("head.b")))
}

/// Per-position action distributions for each sequence of an equal-length batch.
pub fn forward_batch(params: &PolicyParams, config: &ModelConfig, batch: &[&TokenSequence]) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut graph = Graph::new();
    let vars = ParamVars::register(&mut graph, params);
    let logits = build_logits(&mut graph, &vars, config, batch)?;
    let probs = graph.softmax(logits);
    let a = config.num_actions;
    let seq = batch[0].len();
    let values = graph.value(probs);
    Ok(values
        .chunks_exact(seq * a)
        .map(|s| s.chunks_exact(a).map(<[f64]>::to_vec).collect())
        .collect())
}

/// Per-position action distributions for one sequence.
pub fn forward(params: &PolicyParams, config: &ModelConfig, tokens: &TokenSequence) -> Result<Vec<Vec<f64>>> {
    Ok(forward_batch(params, config, &[tokens])?.remove(0))
}

/// `M(query; history)`: the distribution at the live query's position.
pub fn policy_at(params: &PolicyParams, config: &ModelConfig, history: &[PreferenceTriple], query: &Context) -> Result<Vec<f64>> {
    Ok(policy_batch(params, config, history, std::slice::from_ref(query))?.remove(0))
}

/// `M(query; history)` for many queries sharing one history, in one pass.
pub fn policy_batch(params: &PolicyParams, config: &ModelConfig, history: &[PreferenceTriple], queries: &[Context]) -> Result<Vec<Vec<f64>>> {
    if history.len() + 1 > config.max_positions {
        return Err(Error::invalid(format!(
            "history of {} turns needs more than max_positions = {}",
            history.len(),
            config.max_positions
        )));
    }
    if queries.is_empty() {
        return Ok(Vec::new());
    }
    let completed: Vec<&PreferenceTriple> = history.iter().collect();
    let seqs = queries
        .iter()
        .map(|q| {
            let contexts: Vec<&Context> = history.iter().map(|t| &t.x).chain(std::iter::once(q)).collect();
            encode_sequence(config, &contexts, &completed)
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&TokenSequence> = seqs.iter().collect();
    let out = forward_batch(params, config, &refs)?;
    Ok(out.into_iter().map(|mut rows| rows.pop().expect("non-empty sequence")).collect())
}

/// Greedy action (ties → lowest index).
pub fn argmax_action(dist: &[f64]) -> ActionId {
    let mut best = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p > dist[best] {
            best = i;
        }
    }
    ActionId(best)
}
