//! Structure-aware graph transformer that predicts per-edge noise.
//!
//! Edge tensors are kept flat as `[N², hidden]` with row `i·N + j`.

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use sedan_tensor::{BoundParams, LinearBlock, MlpBlock, ParamStore, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::graph_model::UrbanGraph;
use crate::rng::{stream_rng, Stream};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionSupport {
    /// Every region attends to every region.
    #[default]
    Dense,
    /// Attention restricted to contiguous regions plus the region itself.
    Adjacent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    /// Width of the regional attribute vector.
    pub input_dim: usize,
    #[serde(default = "yes")]
    pub use_adjacency: bool,
    #[serde(default = "yes")]
    pub use_distance: bool,
    #[serde(default)]
    pub attention: AttentionSupport,
}

fn yes() -> bool {
    true
}

impl DenoiserConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            hidden: 32,
            layers: 4,
            heads: 4,
            input_dim,
            use_adjacency: true,
            use_distance: true,
            attention: AttentionSupport::Dense,
        }
    }

    /// The ablation with both spatial priors switched off.
    pub fn without_priors(mut self) -> Self {
        self.use_adjacency = false;
        self.use_distance = false;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Invalid(format!(
                "hidden width {} must be a positive multiple of the head count {}",
                self.hidden, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::Invalid("the denoiser needs at least one layer".into()));
        }
        if self.input_dim == 0 {
            return Err(Error::Invalid("input feature width must be positive".into()));
        }
        Ok(())
    }

    /// Scalar parameter count as a function of the configuration alone.
    pub fn parameter_count(&self) -> usize {
        let (d, h, k, dk) = (self.input_dim, self.hidden, self.heads, self.head_dim());
        let node_embed = d * h + h + h * h + h;
        let edge_embed = h + h + h * h + h;
        let priors = 2 * h + 2 * h;
        let per_layer = (2 * h * h + h) + k * (3 * dk * h + h) + 2 * (h * h + h) + (k * h + h + h * h + h);
        let output = h * h + h + h + 1;
        node_embed + edge_embed + priors + self.layers * per_layer + output
    }
}

/// Per-city tensors that do not depend on the diffusion state.
#[derive(Clone, Debug)]
pub struct CityContext {
    n: usize,
    features: Tensor,
    adjacency: Tensor,
    distance: Tensor,
    support: Vec<bool>,
}

impl CityContext {
    /// `graph` should already carry normalized features.
    pub fn new(graph: &UrbanGraph) -> Self {
        let n = graph.n_regions();
        let x = graph.features();
        let features = Tensor::new(vec![n, x.ncols()], x.iter().copied().collect()).expect("shape");
        let a = graph.adjacency();
        let adjacency = Tensor::new(vec![n * n, 1], a.iter().copied().collect()).expect("shape");
        let dn = graph.normalized_distance();
        let distance = Tensor::new(vec![n * n, 1], dn.iter().copied().collect()).expect("shape");
        let support = (0..n * n).map(|k| k / n == k % n || a[[k / n, k % n]] != 0.0).collect();
        Self { n, features, adjacency, distance, support }
    }

    pub fn n_regions(&self) -> usize {
        self.n
    }

    pub fn input_dim(&self) -> usize {
        self.features.shape()[1]
    }
}

/// Sinusoidal embedding of step `t` with `dim` channels: `sin` on even and
/// `cos` on odd channels, frequencies `10000^(-2i/dim)`.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|c| {
            let i = (c / 2) as f64;
            let freq = 10000f64.powf(-2.0 * i / dim as f64);
            let arg = t as f64 * freq;
            if c % 2 == 0 {
                arg.sin()
            } else {
                arg.cos()
            }
        })
        .collect()
}

struct Head {
    query: String,
    key: String,
    value: String,
    bias_weight: String,
}

struct Layer {
    edge_bias: LinearBlock,
    heads: Vec<Head>,
    node_out: MlpBlock,
    edge_out: MlpBlock,
}

/// Attention probabilities from one forward pass, `[layer][head]`, each
/// `N×N` with rows summing to one.
pub type AttentionMaps = Vec<Vec<Array2<f64>>>;

/// Inputs to the first layer, reshaped to `N×N×hidden` for edges.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub nodes: Array2<f64>,
    pub edges: Array3<f64>,
    pub adjacency: Array3<f64>,
    pub distance: Array3<f64>,
}

pub struct Denoiser {
    config: DenoiserConfig,
    params: ParamStore,
    node_embed: MlpBlock,
    edge_embed: MlpBlock,
    adj_proj: LinearBlock,
    dist_proj: LinearBlock,
    layers: Vec<Layer>,
    output: MlpBlock,
}

fn uniform(shape: [usize; 2], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let data = (0..shape[0] * shape[1]).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

impl Denoiser {
    /// Fresh parameters drawn from the `Init` stream of `seed`.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let mut store = ParamStore::new();
        let (d, h, k, dk) = (config.input_dim, config.hidden, config.heads, config.head_dim());
        MlpBlock::init(&mut store, "node_embed", d, h, h, &mut rng);
        MlpBlock::init(&mut store, "edge_embed", 1, h, h, &mut rng);
        LinearBlock::init(&mut store, "adj_proj", 1, h, &mut rng);
        LinearBlock::init(&mut store, "dist_proj", 1, h, &mut rng);
        for l in 0..config.layers {
            LinearBlock::init(&mut store, &format!("layers.{l}.edge_bias"), 2 * h, h, &mut rng);
            for head in 0..k {
                let p = format!("layers.{l}.heads.{head}");
                for m in ["query", "key", "value"] {
                    store.insert(format!("{p}.{m}"), uniform([dk, h], h, &mut rng));
                }
                store.insert(format!("{p}.bias_weight"), uniform([1, h], h, &mut rng));
            }
            MlpBlock::init(&mut store, &format!("layers.{l}.node_out"), h, h, h, &mut rng);
            MlpBlock::init(&mut store, &format!("layers.{l}.edge_out"), k, h, h, &mut rng);
        }
        MlpBlock::init(&mut store, "output", h, h, 1, &mut rng);
        Self::from_params(config, store)
    }

    /// Wraps existing parameters, checking that every expected tensor is
    /// present with the right shape and nothing else is.
    pub fn from_params(config: DenoiserConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let (d, h, k, dk) = (config.input_dim, config.hidden, config.heads, config.head_dim());
        let mut expected: Vec<(String, Vec<usize>)> = Vec::new();
        let mut mlp = |p: &str, i: usize, hid: usize, o: usize| {
            expected.push((format!("{p}.0.weight"), vec![hid, i]));
            expected.push((format!("{p}.0.bias"), vec![hid]));
            expected.push((format!("{p}.1.weight"), vec![o, hid]));
            expected.push((format!("{p}.1.bias"), vec![o]));
        };
        mlp("node_embed", d, h, h);
        mlp("edge_embed", 1, h, h);
        let mut layers = Vec::new();
        for l in 0..config.layers {
            mlp(&format!("layers.{l}.node_out"), h, h, h);
            mlp(&format!("layers.{l}.edge_out"), k, h, h);
        }
        mlp("output", h, h, 1);
        for p in ["adj_proj", "dist_proj"] {
            expected.push((format!("{p}.weight"), vec![h, 1]));
            expected.push((format!("{p}.bias"), vec![h]));
        }
        for l in 0..config.layers {
            expected.push((format!("layers.{l}.edge_bias.weight"), vec![h, 2 * h]));
            expected.push((format!("layers.{l}.edge_bias.bias"), vec![h]));
            let mut heads = Vec::new();
            for head in 0..k {
                let p = format!("layers.{l}.heads.{head}");
                for m in ["query", "key", "value"] {
                    expected.push((format!("{p}.{m}"), vec![dk, h]));
                }
                expected.push((format!("{p}.bias_weight"), vec![1, h]));
                heads.push(Head {
                    query: format!("{p}.query"),
                    key: format!("{p}.key"),
                    value: format!("{p}.value"),
                    bias_weight: format!("{p}.bias_weight"),
                });
            }
            layers.push(Layer {
                edge_bias: LinearBlock::named(&format!("layers.{l}.edge_bias"), 2 * h, h),
                heads,
                node_out: MlpBlock::named(&format!("layers.{l}.node_out"), h, h, h),
                edge_out: MlpBlock::named(&format!("layers.{l}.edge_out"), k, h, h),
            });
        }
        for (name, shape) in &expected {
            let t = params.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!("parameter {name} is {:?}, expected {shape:?}", t.shape())));
            }
        }
        if params.len() != expected.len() {
            let unknown: Vec<&str> = params.names().filter(|n| !expected.iter().any(|(e, _)| e == n)).collect();
            return Err(Error::Invalid(format!("unexpected parameters: {}", unknown.join(", "))));
        }
        Ok(Self {
            node_embed: MlpBlock::named("node_embed", d, h, h),
            edge_embed: MlpBlock::named("edge_embed", 1, h, h),
            adj_proj: LinearBlock::named("adj_proj", 1, h),
            dist_proj: LinearBlock::named("dist_proj", 1, h),
            output: MlpBlock::named("output", h, h, 1),
            layers,
            config,
            params,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    fn check_inputs(&self, ctx: &CityContext, noisy: &Array2<f64>) -> Result<()> {
        if ctx.input_dim() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "city has {} features, model expects {}",
                ctx.input_dim(),
                self.config.input_dim
            )));
        }
        if noisy.dim() != (ctx.n, ctx.n) {
            return Err(Error::Shape(format!("noisy OD is {:?} for {} regions", noisy.dim(), ctx.n)));
        }
        if !noisy.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite noisy OD entry".into()));
        }
        Ok(())
    }

    /// Records `(H⁰, E⁰, S_adj, S_dis)` on `tape`.
    fn embed_vars(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        ctx: &CityContext,
        noisy: &Array2<f64>,
        t: usize,
    ) -> Result<[Var; 4]> {
        let n = ctx.n;
        let h = self.config.hidden;
        let x = tape.constant(ctx.features.clone());
        let nodes = self.node_embed.forward(tape, p, x)?;
        let flat = tape.constant(Tensor::new(vec![n * n, 1], noisy.iter().copied().collect())?);
        let edges = self.edge_embed.forward(tape, p, flat)?;
        let temb = tape.constant(Tensor::new(vec![h], time_embedding(t, h))?);
        let edges = tape.add(edges, temb)?;
        let s_adj = if self.config.use_adjacency {
            let a = tape.constant(ctx.adjacency.clone());
            self.adj_proj.forward(tape, p, a)?
        } else {
            tape.constant(Tensor::zeros(&[n * n, h]))
        };
        let s_dis = if self.config.use_distance {
            let dn = tape.constant(ctx.distance.clone());
            self.dist_proj.forward(tape, p, dn)?
        } else {
            tape.constant(Tensor::zeros(&[n * n, h]))
        };
        Ok([nodes, edges, s_adj, s_dis])
    }

    #[allow(clippy::too_many_arguments)]
    fn layer(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        layer: &Layer,
        ctx: &CityContext,
        nodes: Var,
        edges: Var,
        s_adj: Var,
        s_dis: Var,
        trace: Option<&mut Vec<Array2<f64>>>,
    ) -> Result<(Var, Var)> {
        let n = ctx.n;
        let scale = 1.0 / (self.config.head_dim() as f64).sqrt();
        let mask = match self.config.attention {
            AttentionSupport::Dense => None,
            AttentionSupport::Adjacent => Some(ctx.support.as_slice()),
        };
        let joined = tape.concat(&[edges, s_adj], 1)?;
        let bias_in = layer.edge_bias.forward(tape, p, joined)?;
        let bias_in = tape.relu(bias_in);
        let mut outs = Vec::with_capacity(layer.heads.len());
        let mut logits = Vec::with_capacity(layer.heads.len());
        let mut probs = Vec::new();
        for head in &layer.heads {
            let q = tape.matmul_nt(nodes, p.var(&head.query)?)?;
            let k = tape.matmul_nt(nodes, p.var(&head.key)?)?;
            let v = tape.matmul_nt(nodes, p.var(&head.value)?)?;
            let scores = tape.matmul_nt(q, k)?;
            let scores = tape.scale(scores, scale);
            let bias = tape.matmul_nt(bias_in, p.var(&head.bias_weight)?)?;
            let bias = tape.reshape(bias, &[n, n])?;
            let a = tape.add(scores, bias)?;
            if !tape.value(a).is_finite() {
                return Err(Error::Numerical("non-finite attention logits".into()));
            }
            let alpha = tape.softmax_masked(a, 1, mask)?;
            if trace.is_some() {
                probs.push(Array2::from_shape_vec((n, n), tape.value(alpha).data().to_vec()).expect("shape"));
            }
            outs.push(tape.matmul(alpha, v)?);
            logits.push(tape.reshape(a, &[n * n, 1])?);
        }
        if let Some(trace) = trace {
            trace.extend(probs);
        }
        let joined = tape.concat(&outs, 1)?;
        let nodes = layer.node_out.forward(tape, p, joined)?;
        let joined = tape.concat(&logits, 1)?;
        let edges = layer.edge_out.forward(tape, p, joined)?;
        let edges = tape.add(edges, s_dis)?;
        Ok((nodes, edges))
    }

    fn forward_impl(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        ctx: &CityContext,
        noisy: &Array2<f64>,
        t: usize,
        mut trace: Option<&mut AttentionMaps>,
    ) -> Result<Var> {
        self.check_inputs(ctx, noisy)?;
        let [mut nodes, mut edges, s_adj, s_dis] = self.embed_vars(tape, p, ctx, noisy, t)?;
        for layer in &self.layers {
            let mut maps = Vec::new();
            let slot = trace.as_ref().map(|_| &mut maps);
            (nodes, edges) = self.layer(tape, p, layer, ctx, nodes, edges, s_adj, s_dis, slot)?;
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(maps);
            }
        }
        let out = self.output.forward(tape, p, edges)?;
        Ok(tape.reshape(out, &[ctx.n, ctx.n])?)
    }

    /// Records the full network on `tape` and returns the `[N, N]` noise
    /// estimate.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        ctx: &CityContext,
        noisy: &Array2<f64>,
        t: usize,
    ) -> Result<Var> {
        self.forward_impl(tape, params, ctx, noisy, t, None)
    }

    /// Inference-only noise estimate.
    pub fn predict_noise(&self, ctx: &CityContext, noisy: &Array2<f64>, t: usize) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let out = self.forward(&mut tape, &p, ctx, noisy, t)?;
        let out = to_array2(tape.value(out), ctx.n);
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite noise estimate at t = {t}")));
        }
        Ok(out)
    }

    /// Noise estimate together with every layer's attention probabilities.
    pub fn predict_with_attention(
        &self,
        ctx: &CityContext,
        noisy: &Array2<f64>,
        t: usize,
    ) -> Result<(Array2<f64>, AttentionMaps)> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let mut maps = Vec::new();
        let out = self.forward_impl(&mut tape, &p, ctx, noisy, t, Some(&mut maps))?;
        Ok((to_array2(tape.value(out), ctx.n), maps))
    }

    pub fn embed(&self, ctx: &CityContext, noisy: &Array2<f64>, t: usize) -> Result<Embedding> {
        self.check_inputs(ctx, noisy)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let [nodes, edges, s_adj, s_dis] = self.embed_vars(&mut tape, &p, ctx, noisy, t)?;
        let (n, h) = (ctx.n, self.config.hidden);
        let cube = |v: Var| Array3::from_shape_vec((n, n, h), tape.value(v).data().to_vec()).expect("shape");
        Ok(Embedding {
            nodes: Array2::from_shape_vec((n, h), tape.value(nodes).data().to_vec()).expect("shape"),
            edges: cube(edges),
            adjacency: cube(s_adj),
            distance: cube(s_dis),
        })
    }
}

fn to_array2(t: &Tensor, n: usize) -> Array2<f64> {
    Array2::from_shape_vec((n, n), t.data().to_vec()).expect("shape")
}
