//! Trainable path model: GIN node encoder, input projections, recursive path
//! embeddings and the MultiAttn / TriAttn scorers.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PathScorer, PathState, RankerError};
use crate::encoder::{base_matrix, BaseEmbeddings, EdgeIndex, GinStack, WeightingMode};
use crate::kg::{ConceptId, KnowledgeGraph, RelationType, Subgraph};
use crate::numerics::{
    load_checkpoint, save_checkpoint, Linear, Mlp, MultiHeadAttention, ParamStore, Tape, Tensor,
    TensorError, Trilinear, Var,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    MultiAttn,
    #[default]
    TriAttn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Provider embedding dim `D`.
    pub embed_dim: usize,
    /// GIN layers `K`.
    pub gin_layers: usize,
    /// Reduced dim `d` for paths and scorers.
    pub model_dim: usize,
    pub heads: usize,
    pub tri_rank: usize,
    pub variant: Variant,
    pub weighting: WeightingMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            gin_layers: 2,
            model_dim: 64,
            heads: 4,
            tri_rank: 32,
            variant: Variant::TriAttn,
            weighting: WeightingMode::BeforeGin,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), RankerError> {
        let bad = |m: &str| Err(RankerError::Config(m.to_string()));
        if self.embed_dim == 0 || self.model_dim == 0 {
            return bad("embed_dim and model_dim must be positive");
        }
        if self.gin_layers == 0 {
            return bad("gin_layers must be at least 1");
        }
        if self.tri_rank == 0 {
            return bad("tri_rank must be at least 1");
        }
        if self.variant == Variant::MultiAttn
            && (self.heads == 0 || !self.model_dim.is_multiple_of(self.heads))
        {
            return Err(RankerError::Config(format!(
                "model_dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Scorer {
    Multi {
        attn: MultiHeadAttention,
        sigma: Linear,
        phi: Mlp,
    },
    Tri {
        tri: Trilinear,
        sigma: Linear,
        phi: Mlp,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    model: ModelConfig,
    relation_vocab: Vec<String>,
}

/// All trainable parameters plus the layer handles that read them.
#[derive(Clone, Debug)]
pub struct PathModel {
    pub config: ModelConfig,
    pub relation_vocab: Vec<String>,
    pub store: ParamStore,
    gin: GinStack,
    text_proj: Linear,
    concept_proj: Linear,
    node_proj: Linear,
    path_prev: Linear,
    path_new: Linear,
    path_ffn: Mlp,
    scorer: Scorer,
}

impl PathModel {
    pub fn new(
        config: ModelConfig,
        relation_vocab: Vec<String>,
        seed: u64,
    ) -> Result<Self, RankerError> {
        config.validate()?;
        if relation_vocab.is_empty() {
            return Err(RankerError::Config("relation vocabulary is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (dd, d, r) = (config.embed_dim, config.model_dim, relation_vocab.len());
        let gin = GinStack::new(&mut store, config.gin_layers, dd, r, &mut rng)?;
        let text_proj = Linear::new(&mut store, "text_proj", dd, d, true, &mut rng)?;
        let concept_proj = Linear::new(&mut store, "concept_proj", dd, d, true, &mut rng)?;
        let node_proj = Linear::new(&mut store, "node_proj", gin.out_dim(), d, true, &mut rng)?;
        let path_prev = Linear::new(&mut store, "path.prev", d, d, false, &mut rng)?;
        let path_new = Linear::new(&mut store, "path.new", r + d, d, true, &mut rng)?;
        let path_ffn = Mlp::new(&mut store, "path.ffn", &[d, d, d], &mut rng)?;
        let scorer = match config.variant {
            Variant::MultiAttn => Scorer::Multi {
                attn: MultiHeadAttention::new(&mut store, "score.attn", d, config.heads, &mut rng)?,
                sigma: Linear::new(&mut store, "score.sigma", d, d, true, &mut rng)?,
                phi: Mlp::new(&mut store, "score.phi", &[d, d, 1], &mut rng)?,
            },
            Variant::TriAttn => Scorer::Tri {
                tri: Trilinear::new(&mut store, "score.tri", d, config.tri_rank, &mut rng)?,
                sigma: Linear::new(&mut store, "score.sigma", 1, d, true, &mut rng)?,
                phi: Mlp::new(&mut store, "score.phi", &[d, d, 1], &mut rng)?,
            },
        };
        Ok(Self {
            config,
            relation_vocab,
            store,
            gin,
            text_proj,
            concept_proj,
            node_proj,
            path_prev,
            path_new,
            path_ffn,
            scorer,
        })
    }

    pub fn gin(&self) -> &GinStack {
        &self.gin
    }

    /// Trilinear factors, when the scorer is TriAttn.
    pub fn trilinear(&self) -> Option<&Trilinear> {
        match &self.scorer {
            Scorer::Tri { tri, .. } => Some(tri),
            Scorer::Multi { .. } => None,
        }
    }

    pub fn relation_index(&self, label: &str) -> Result<usize, RankerError> {
        self.relation_vocab
            .binary_search_by(|l| l.as_str().cmp(label))
            .map_err(|_| {
                RankerError::Graph(crate::kg::GraphError::UnknownRelation(label.to_string()))
            })
    }

    /// Fails unless the graph's relation vocabulary equals the model's.
    pub fn check_graph(&self, graph: &KnowledgeGraph) -> Result<(), RankerError> {
        if graph.relation_vocab() != self.relation_vocab.as_slice() {
            return Err(RankerError::Config(format!(
                "graph relation vocabulary {:?} differs from the model's {:?}",
                graph.relation_vocab(),
                self.relation_vocab
            )));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<(), RankerError> {
        let meta = serde_json::to_value(Metadata {
            model: self.config.clone(),
            relation_vocab: self.relation_vocab.clone(),
        })
        .map_err(|e| TensorError::Checkpoint(e.to_string()))?;
        save_checkpoint(&self.store, dir, meta)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, RankerError> {
        let ck = load_checkpoint(dir)?;
        let meta: Metadata = serde_json::from_value(ck.manifest.metadata.clone())
            .map_err(|e| TensorError::Checkpoint(format!("metadata: {e}")))?;
        let mut model = Self::new(meta.model, meta.relation_vocab, 0)?;
        ck.apply_to(&mut model.store)?;
        Ok(model)
    }

    /// `p' = FFN(p W_h + [onehot(rel); h_target] W_t + b)`.
    pub fn extend_embedding(
        &self,
        tape: &Tape,
        parent: Var,
        rel: usize,
        target: Var,
    ) -> Result<Var, TensorError> {
        let mut onehot = vec![0.0; self.relation_vocab.len()];
        onehot[rel] = 1.0;
        let edge = tape.concat(&[tape.constant(Tensor::row(onehot)), target], 1)?;
        let pre = tape.add(
            self.path_prev.forward(tape, &self.store, parent)?,
            self.path_new.forward(tape, &self.store, edge)?,
        )?;
        self.path_ffn.forward(tape, &self.store, pre)
    }

    /// Raw score `S = φ(ReLU(σ(α)))` of path embedding `p: [1, d]`.
    pub fn score_path(
        &self,
        tape: &Tape,
        input: &EncodedInput,
        p: Var,
    ) -> Result<Var, TensorError> {
        let store = &self.store;
        let s = match &self.scorer {
            Scorer::Multi { attn, sigma, phi } => {
                let rel = |a: Var| -> Result<Var, TensorError> {
                    tape.concat(&[a, p, tape.sub(a, p)?, tape.mul(a, p)?], 0)
                };
                let x = tape.mul(rel(input.hx)?, rel(input.hv)?)?;
                let alpha = tape.mean_rows(attn.forward(tape, store, x, x, x)?)?;
                phi.forward(tape, store, tape.relu(sigma.forward(tape, store, alpha)?)?)?
            }
            Scorer::Tri { tri, sigma, phi } => {
                let alpha =
                    tape.reshape(tri.forward(tape, store, input.hx, input.hv, p)?, &[1, 1])?;
                phi.forward(tape, store, tape.relu(sigma.forward(tape, store, alpha)?)?)?
            }
        };
        tape.reshape(s, &[1])
    }

    /// `[n, d]` projected node encodings for the nodes of `sub`, in order.
    pub fn encode_nodes(
        &self,
        tape: &Tape,
        graph: &KnowledgeGraph,
        sub: &Subgraph,
        base: &BaseEmbeddings,
        weights: &BTreeMap<ConceptId, f64>,
    ) -> Result<Var, RankerError> {
        let edges = EdgeIndex::from_subgraph(sub, graph)?;
        let h0 = tape.constant(base_matrix(sub, base, weights, self.config.weighting)?);
        let mut stacked = self.gin.forward(tape, &self.store, &edges, h0)?;
        if self.config.weighting == WeightingMode::AfterGin {
            let width = self.gin.out_dim();
            let mut scale = Vec::with_capacity(sub.nodes.len() * width);
            for id in &sub.nodes {
                let w = weights.get(id).copied().unwrap_or(1.0);
                scale.extend(std::iter::repeat_n(w, width));
            }
            let scale = tape.constant(Tensor::new(vec![sub.nodes.len(), width], scale)?);
            stacked = tape.mul(stacked, scale)?;
        }
        Ok(self.node_proj.forward(tape, &self.store, stacked)?)
    }
}

/// Projected note and concept context for one note.
#[derive(Clone, Copy, Debug)]
pub struct EncodedInput {
    /// `[1, d]`
    pub hx: Var,
    /// `[1, d]`
    pub hv: Var,
}

/// Mean of the (optionally weighted) base vectors of distinct sources.
pub fn mean_source_vector(
    sources: &BTreeSet<ConceptId>,
    base: &BaseEmbeddings,
    weights: &BTreeMap<ConceptId, f64>,
    mode: WeightingMode,
) -> Result<Vec<f64>, RankerError> {
    if sources.is_empty() {
        return Err(RankerError::EmptySources);
    }
    let mut acc = vec![0.0; base.dim];
    for s in sources {
        let w = match mode {
            WeightingMode::BeforeGin => weights.get(s).copied().unwrap_or(1.0),
            _ => 1.0,
        };
        for (a, x) in acc.iter_mut().zip(base.get(s)?) {
            *a += w * x;
        }
    }
    let n = sources.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// `h_x = text_proj(note)`, `h_v = concept_proj(mean of source vectors)`.
pub fn encode_input(
    model: &PathModel,
    tape: &Tape,
    note_vector: &[f64],
    sources: &BTreeSet<ConceptId>,
    base: &BaseEmbeddings,
    weights: &BTreeMap<ConceptId, f64>,
) -> Result<EncodedInput, RankerError> {
    if note_vector.len() != model.config.embed_dim {
        return Err(RankerError::Config(format!(
            "note vector has dim {}, expected {}",
            note_vector.len(),
            model.config.embed_dim
        )));
    }
    let mean = mean_source_vector(sources, base, weights, model.config.weighting)?;
    let x = tape.constant(Tensor::row(note_vector.to_vec()));
    let v = tape.constant(Tensor::row(mean));
    Ok(EncodedInput {
        hx: model.text_proj.forward(tape, &model.store, x)?,
        hv: model.concept_proj.forward(tape, &model.store, v)?,
    })
}

/// [`PathScorer`] backed by a [`PathModel`] on one tape. Keeps every path
/// embedding and every score variable so a trainer can build losses on them.
pub struct NeuralScorer<'a> {
    model: &'a PathModel,
    tape: &'a Tape,
    graph: &'a KnowledgeGraph,
    base: &'a BaseEmbeddings,
    weights: &'a BTreeMap<ConceptId, f64>,
    pub input: EncodedInput,
    hop_nodes: Option<(Subgraph, Var)>,
    node_rows: BTreeMap<ConceptId, Var>,
    /// Path embedding per handle.
    pub paths: Vec<Var>,
    /// Score variables per hop, in scoring order.
    pub hop_scores: Vec<Vec<Var>>,
}

impl<'a> NeuralScorer<'a> {
    pub fn new(
        model: &'a PathModel,
        tape: &'a Tape,
        graph: &'a KnowledgeGraph,
        base: &'a BaseEmbeddings,
        weights: &'a BTreeMap<ConceptId, f64>,
        input: EncodedInput,
    ) -> Self {
        Self {
            model,
            tape,
            graph,
            base,
            weights,
            input,
            hop_nodes: None,
            node_rows: BTreeMap::new(),
            paths: Vec::new(),
            hop_scores: Vec::new(),
        }
    }

    fn node_state(&mut self, id: &ConceptId) -> Result<Var, RankerError> {
        if let Some(v) = self.node_rows.get(id) {
            return Ok(*v);
        }
        let (sub, mat) = self
            .hop_nodes
            .as_ref()
            .ok_or_else(|| RankerError::MissingEncoding(id.to_string()))?;
        let row = sub
            .node_index(id)
            .ok_or_else(|| RankerError::MissingEncoding(id.to_string()))?;
        let v = self.tape.narrow(*mat, 0, row, 1)?;
        self.node_rows.insert(id.clone(), v);
        Ok(v)
    }
}

impl PathScorer for NeuralScorer<'_> {
    fn begin_hop(
        &mut self,
        _hop: usize,
        frontier: &BTreeSet<ConceptId>,
    ) -> Result<(), RankerError> {
        let sub = self.graph.one_hop_subgraph(frontier)?;
        let mat = self
            .model
            .encode_nodes(self.tape, self.graph, &sub, self.base, self.weights)?;
        self.hop_nodes = Some((sub, mat));
        self.node_rows.clear();
        self.hop_scores.push(Vec::new());
        Ok(())
    }

    fn root(&mut self, source: &ConceptId) -> Result<usize, RankerError> {
        let v = self.node_state(source)?;
        self.paths.push(v);
        Ok(self.paths.len() - 1)
    }

    fn extend(
        &mut self,
        parent: usize,
        rel: &RelationType,
        target: &ConceptId,
    ) -> Result<usize, RankerError> {
        let h = self.node_state(target)?;
        let r = self.model.relation_index(&rel.label)?;
        let p = self
            .model
            .extend_embedding(self.tape, self.paths[parent], r, h)?;
        self.paths.push(p);
        Ok(self.paths.len() - 1)
    }

    fn score(&mut self, path: &PathState) -> Result<f64, RankerError> {
        let s = self
            .model
            .score_path(self.tape, &self.input, self.paths[path.handle])?;
        let value = self.tape.item(s)?;
        self.hop_scores
            .last_mut()
            .expect("begin_hop called")
            .push(s);
        Ok(value)
    }
}
