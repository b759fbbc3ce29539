//! Node representations: name-document embeddings from a pluggable provider,
//! optional W_CUI scaling, and stacked GIN layers over a retrieved subgraph.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extract::tokenize;
use crate::kg::{Concept, ConceptId, GraphError, KnowledgeGraph, Subgraph};
use crate::numerics::{Linear, Mlp, ParamId, ParamStore, Tape, Tensor, TensorError, Var};
use crate::seed::fnv1a;

pub const SEP: &str = " [SEP] ";

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("provider dim {found} does not match configured dim {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("nothing to embed: {0:?} has no tokens")]
    EmptyText(String),
    #[error("no cached vector for {0}")]
    Missing(String),
    #[error("embedding for {0} is all zeros")]
    ZeroVector(String),
    #[error("{file}:{line}: {message}")]
    Cache {
        file: String,
        line: usize,
        message: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// `l_i`: all names of a concept joined by `" [SEP] "`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConceptNameDoc {
    pub cui: ConceptId,
    pub doc: String,
}

pub fn build_concept_doc(c: &Concept) -> ConceptNameDoc {
    ConceptNameDoc {
        cui: c.id.clone(),
        doc: c.names.join(SEP),
    }
}

/// Deterministic text embedder with a fixed output dim.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;

    fn embed(&self, text: &str) -> Result<Vec<f64>, EncoderError>;

    fn embed_concept(&self, concept: &Concept) -> Result<Vec<f64>, EncoderError> {
        self.embed(&build_concept_doc(concept).doc)
    }

    fn embed_note(&self, _note_id: &str, text: &str) -> Result<Vec<f64>, EncoderError> {
        self.embed(text)
    }
}

/// Sum of per-token pseudo-random vectors, L2-normalized. Token vectors are
/// seeded from a hash of the token, so shared words give correlated texts.
#[derive(Clone, Debug)]
pub struct HashingProvider {
    dim: usize,
    seed: u64,
}

impl HashingProvider {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token.as_bytes()) ^ self.seed);
        (0..self.dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }
}

impl EmbeddingProvider for HashingProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EncoderError> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(EncoderError::EmptyText(text.to_string()));
        }
        let mut acc = vec![0.0; self.dim];
        for t in tokens {
            for (a, v) in acc.iter_mut().zip(self.token_vector(&t.text)) {
                *a += v;
            }
        }
        l2_normalize(acc, text)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CacheLine {
    #[serde(default)]
    cui: Option<String>,
    #[serde(default)]
    note_id: Option<String>,
    vector: Vec<f64>,
}

/// Precomputed vectors keyed by CUI and note id, read from JSONL lines
/// `{"cui": .., "vector": [..]}` or `{"note_id": .., "vector": [..]}`.
pub struct CachedProvider {
    dim: usize,
    concepts: HashMap<String, Vec<f64>>,
    notes: HashMap<String, Vec<f64>>,
    fallback: Option<Box<dyn EmbeddingProvider>>,
}

impl CachedProvider {
    pub fn from_jsonl(text: &str, file: &str, dim: usize) -> Result<Self, EncoderError> {
        let mut me = Self {
            dim,
            concepts: HashMap::new(),
            notes: HashMap::new(),
            fallback: None,
        };
        for (i, l) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let err = |message: String| EncoderError::Cache {
                file: file.to_string(),
                line: i + 1,
                message,
            };
            let row: CacheLine = serde_json::from_str(l).map_err(|e| err(e.to_string()))?;
            if row.vector.len() != dim {
                return Err(err(format!(
                    "vector has dim {}, expected {dim}",
                    row.vector.len()
                )));
            }
            match (row.cui, row.note_id) {
                (Some(c), None) => {
                    me.concepts.insert(c, row.vector);
                }
                (None, Some(n)) => {
                    me.notes.insert(n, row.vector);
                }
                _ => return Err(err("exactly one of cui or note_id is required".into())),
            }
        }
        Ok(me)
    }

    pub fn load(path: &Path, dim: usize) -> Result<Self, EncoderError> {
        let text = std::fs::read_to_string(path).map_err(|source| EncoderError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_jsonl(&text, &path.display().to_string(), dim)
    }

    /// Used for free text and for keys absent from the cache.
    pub fn with_fallback(
        mut self,
        fallback: Box<dyn EmbeddingProvider>,
    ) -> Result<Self, EncoderError> {
        if fallback.dim() != self.dim {
            return Err(EncoderError::DimMismatch {
                expected: self.dim,
                found: fallback.dim(),
            });
        }
        self.fallback = Some(fallback);
        Ok(self)
    }
}

impl EmbeddingProvider for CachedProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EncoderError> {
        match &self.fallback {
            Some(f) => f.embed(text),
            None => Err(EncoderError::Missing(format!("free text {text:?}"))),
        }
    }

    fn embed_concept(&self, concept: &Concept) -> Result<Vec<f64>, EncoderError> {
        match self.concepts.get(concept.id.as_str()) {
            Some(v) => Ok(v.clone()),
            None => match &self.fallback {
                Some(f) => f.embed_concept(concept),
                None => Err(EncoderError::Missing(concept.id.to_string())),
            },
        }
    }

    fn embed_note(&self, note_id: &str, text: &str) -> Result<Vec<f64>, EncoderError> {
        match self.notes.get(note_id) {
            Some(v) => Ok(v.clone()),
            None => match &self.fallback {
                Some(f) => f.embed_note(note_id, text),
                None => Err(EncoderError::Missing(format!("note {note_id}"))),
            },
        }
    }
}

pub fn l2_normalize(mut v: Vec<f64>, what: &str) -> Result<Vec<f64>, EncoderError> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return Err(EncoderError::ZeroVector(what.to_string()));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

/// L2-normalized base vector `h_i` for every concept of a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseEmbeddings {
    pub dim: usize,
    vectors: BTreeMap<ConceptId, Vec<f64>>,
}

impl BaseEmbeddings {
    pub fn get(&self, id: &ConceptId) -> Result<&[f64], EncoderError> {
        self.vectors
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| EncoderError::Missing(id.to_string()))
    }

    pub fn from_vectors(
        dim: usize,
        vectors: BTreeMap<ConceptId, Vec<f64>>,
    ) -> Result<Self, EncoderError> {
        if let Some(v) = vectors.values().find(|v| v.len() != dim) {
            return Err(EncoderError::DimMismatch {
                expected: dim,
                found: v.len(),
            });
        }
        Ok(Self { dim, vectors })
    }
}

/// Embeds every concept's name document and L2-normalizes it.
pub fn encode_concepts(
    provider: &dyn EmbeddingProvider,
    graph: &KnowledgeGraph,
    dim: usize,
) -> Result<BaseEmbeddings, EncoderError> {
    if provider.dim() != dim {
        return Err(EncoderError::DimMismatch {
            expected: dim,
            found: provider.dim(),
        });
    }
    let mut vectors = BTreeMap::new();
    for c in graph.concepts() {
        let v = provider.embed_concept(c)?;
        if v.len() != dim {
            return Err(EncoderError::DimMismatch {
                expected: dim,
                found: v.len(),
            });
        }
        vectors.insert(c.id.clone(), l2_normalize(v, c.id.as_str())?);
    }
    Ok(BaseEmbeddings { dim, vectors })
}

/// `h_i ← W_CUI(c_i) · h_i` for every concept listed in `weights`.
pub fn apply_weights(h: &[f64], weight: f64) -> Vec<f64> {
    h.iter().map(|x| x * weight).collect()
}

/// Where W_CUI scaling is applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingMode {
    Off,
    /// Scale base vectors before the GIN stack.
    #[default]
    BeforeGin,
    /// Scale stacked outputs after the GIN stack.
    AfterGin,
}

/// One SGIN layer: `h' = mlp((1 + ε) h + Σ_in ReLU(rel_proj([h_s; onehot(e)])))`.
#[derive(Clone, Debug)]
pub struct GinLayer {
    pub index: usize,
    pub eps: ParamId,
    pub rel_proj: Linear,
    pub mlp: Mlp,
}

impl GinLayer {
    pub fn new(
        store: &mut ParamStore,
        index: usize,
        dim: usize,
        n_relations: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, TensorError> {
        let name = format!("gin.{index}");
        Ok(Self {
            index,
            eps: store.add(format!("{name}.eps"), Tensor::scalar(0.0))?,
            rel_proj: Linear::new(
                store,
                &format!("{name}.rel_proj"),
                dim + n_relations,
                dim,
                true,
                rng,
            )?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), &[dim, dim, dim], rng)?,
        })
    }
}

/// Edge structure of a subgraph as index arrays for the GIN.
#[derive(Clone, Debug)]
pub struct EdgeIndex {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub rel: Vec<usize>,
    pub n_nodes: usize,
    pub n_relations: usize,
}

impl EdgeIndex {
    /// Stored edges only; implicit self-loops carry no message.
    pub fn from_subgraph(sub: &Subgraph, graph: &KnowledgeGraph) -> Result<Self, EncoderError> {
        let mut me = Self {
            src: Vec::new(),
            dst: Vec::new(),
            rel: Vec::new(),
            n_nodes: sub.nodes.len(),
            n_relations: graph.relation_vocab().len(),
        };
        for t in sub.stored_edges() {
            me.src.push(sub.node_index(&t.src).expect("subgraph node"));
            me.dst.push(sub.node_index(&t.dst).expect("subgraph node"));
            me.rel.push(graph.relation_index(&t.rel.label)?);
        }
        Ok(me)
    }

    fn onehots(&self) -> Tensor {
        let mut data = vec![0.0; self.rel.len() * self.n_relations];
        for (e, r) in self.rel.iter().enumerate() {
            data[e * self.n_relations + r] = 1.0;
        }
        Tensor::new(vec![self.rel.len(), self.n_relations], data).expect("finite")
    }

    /// `[n_nodes, n_edges]` with a one at `(dst(e), e)`.
    fn incidence(&self) -> Tensor {
        let e = self.dst.len();
        let mut data = vec![0.0; self.n_nodes * e];
        for (j, d) in self.dst.iter().enumerate() {
            data[d * e + j] = 1.0;
        }
        Tensor::new(vec![self.n_nodes, e], data).expect("finite")
    }
}

pub fn gin_layer_forward(
    layer: &GinLayer,
    tape: &Tape,
    store: &ParamStore,
    edges: &EdgeIndex,
    h: Var,
) -> Result<Var, TensorError> {
    let dim = layer.rel_proj.out_dim;
    let agg = if edges.src.is_empty() {
        tape.constant(Tensor::zeros(&[edges.n_nodes, dim]))
    } else {
        let hs = tape.gather_rows(h, &edges.src)?;
        let input = tape.concat(&[hs, tape.constant(edges.onehots())], 1)?;
        let msg = tape.relu(layer.rel_proj.forward(tape, store, input)?)?;
        tape.matmul(tape.constant(edges.incidence()), msg)?
    };
    let one_plus_eps = tape.add_scalar(tape.param(store, layer.eps), 1.0)?;
    let pre = tape.add(tape.mul_scalar(h, one_plus_eps)?, agg)?;
    layer.mlp.forward(tape, store, pre)
}

/// `K` GIN layers; output rows are `[h^(1); …; h^(K)]`.
#[derive(Clone, Debug)]
pub struct GinStack {
    pub layers: Vec<GinLayer>,
    pub dim: usize,
}

impl GinStack {
    pub fn new(
        store: &mut ParamStore,
        k: usize,
        dim: usize,
        n_relations: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, TensorError> {
        if k == 0 {
            return Err(TensorError::Config(
                "at least one GIN layer is required".into(),
            ));
        }
        let layers = (0..k)
            .map(|i| GinLayer::new(store, i, dim, n_relations, rng))
            .collect::<Result<_, _>>()?;
        Ok(Self { layers, dim })
    }

    pub fn out_dim(&self) -> usize {
        self.layers.len() * self.dim
    }

    /// `base: [n_nodes, D]` → `[n_nodes, K·D]`.
    pub fn forward(
        &self,
        tape: &Tape,
        store: &ParamStore,
        edges: &EdgeIndex,
        base: Var,
    ) -> Result<Var, TensorError> {
        let mut h = base;
        let mut states = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            h = gin_layer_forward(layer, tape, store, edges, h)?;
            states.push(h);
        }
        if states.len() == 1 {
            Ok(states[0])
        } else {
            tape.concat(&states, 1)
        }
    }
}

/// Base rows for `sub.nodes`, each scaled by its entry in `weights` when
/// `mode` is [`WeightingMode::BeforeGin`].
pub fn base_matrix(
    sub: &Subgraph,
    base: &BaseEmbeddings,
    weights: &BTreeMap<ConceptId, f64>,
    mode: WeightingMode,
) -> Result<Tensor, EncoderError> {
    let mut data = Vec::with_capacity(sub.nodes.len() * base.dim);
    for id in &sub.nodes {
        let h = base.get(id)?;
        match (mode, weights.get(id)) {
            (WeightingMode::BeforeGin, Some(w)) => data.extend(apply_weights(h, *w)),
            _ => data.extend_from_slice(h),
        }
    }
    Ok(Tensor::new(vec![sub.nodes.len(), base.dim], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::RawTriple;

    fn cid(n: u32) -> ConceptId {
        ConceptId::new(&format!("C{n:07}")).unwrap()
    }

    #[test]
    fn concept_docs() {
        let one = Concept::new(cid(1), vec!["Sepsis".into()], vec![]).unwrap();
        assert_eq!(build_concept_doc(&one).doc, "Sepsis");
        let two = Concept::new(cid(2), vec!["Pneumonia".into(), "PNA".into()], vec![]).unwrap();
        assert_eq!(build_concept_doc(&two).doc, "Pneumonia [SEP] PNA");
        let three = Concept::new(cid(3), vec!["a".into(), "b".into(), "c".into()], vec![]).unwrap();
        assert_eq!(build_concept_doc(&three).doc.matches("[SEP]").count(), 2);
    }

    #[test]
    fn hashing_provider_is_deterministic_and_normalized() {
        let p = HashingProvider::new(16, 3);
        let a = p.embed("fever and cough").unwrap();
        assert_eq!(a, p.embed("fever and cough").unwrap());
        assert!((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_ne!(a, p.embed("fever").unwrap());
        assert!(p.embed(" ;; ").is_err());
    }

    #[test]
    fn cache_provider() {
        let text = "{\"cui\":\"C0000001\",\"vector\":[1.0,0.0]}\n{\"note_id\":\"n1\",\"vector\":[0.0,2.0]}\n";
        let p = CachedProvider::from_jsonl(text, "cache", 2).unwrap();
        let c = Concept::new(cid(1), vec!["x".into()], vec![]).unwrap();
        assert_eq!(p.embed_concept(&c).unwrap(), vec![1.0, 0.0]);
        assert_eq!(p.embed_note("n1", "").unwrap(), vec![0.0, 2.0]);
        assert!(p.embed_note("n2", "text").is_err());
        let p = p
            .with_fallback(Box::new(HashingProvider::new(2, 0)))
            .unwrap();
        assert_eq!(p.embed_note("n2", "text").unwrap().len(), 2);
        assert!(CachedProvider::from_jsonl(
            "{\"cui\":\"C0000001\",\"vector\":[1.0]}\n",
            "cache",
            2
        )
        .is_err());
    }

    #[test]
    fn weighting_scales() {
        let h = [0.6, -0.8];
        assert_eq!(apply_weights(&h, 0.0), vec![0.0, -0.0]);
        assert_eq!(apply_weights(&h, 2.0), vec![1.2, -1.6]);
    }

    #[test]
    fn provider_dim_mismatch() {
        let (g, _) = KnowledgeGraph::build(
            vec![Concept::new(cid(1), vec!["a".into()], vec![]).unwrap()],
            vec![],
            &["isa".to_string()],
        )
        .unwrap();
        assert!(matches!(
            encode_concepts(&HashingProvider::new(4, 0), &g, 8),
            Err(EncoderError::DimMismatch { .. })
        ));
    }

    /// Sets a layer to ε = 0, identity MLP (ReLU-safe for non-negative input)
    /// and a zero relation projection.
    fn identity_layer(store: &mut ParamStore, layer: &GinLayer, dim: usize) {
        for lin in &layer.mlp.layers {
            store.set(lin.weight, Tensor::identity(dim)).unwrap();
            store.set(lin.bias.unwrap(), Tensor::zeros(&[dim])).unwrap();
        }
        let w = store.value(layer.rel_proj.weight).shape().to_vec();
        store.set(layer.rel_proj.weight, Tensor::zeros(&w)).unwrap();
        store
            .set(layer.rel_proj.bias.unwrap(), Tensor::zeros(&[dim]))
            .unwrap();
    }

    fn path_graph() -> (KnowledgeGraph, Subgraph) {
        let concepts = (1..=3)
            .map(|i| Concept::new(cid(i), vec![format!("n{i}")], vec![]).unwrap())
            .collect();
        let triples = vec![
            RawTriple {
                src: "C0000001".into(),
                rel: "r".into(),
                dst: "C0000002".into(),
                line: 1,
            },
            RawTriple {
                src: "C0000002".into(),
                rel: "r".into(),
                dst: "C0000003".into(),
                line: 2,
            },
        ];
        let (g, _) = KnowledgeGraph::build(concepts, triples, &["r".to_string()]).unwrap();
        let sub = g
            .one_hop_subgraph(&[cid(1), cid(2)].into_iter().collect())
            .unwrap();
        (g, sub)
    }

    #[test]
    fn degenerate_layer_is_identity() {
        let (g, sub) = path_graph();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = GinLayer::new(&mut store, 0, 2, 2, &mut rng).unwrap();
        identity_layer(&mut store, &layer, 2);
        let edges = EdgeIndex::from_subgraph(&sub, &g).unwrap();
        let tape = Tape::new();
        let h = Tensor::matrix(3, 2, vec![0.5, 1.0, 0.25, 0.0, 2.0, 3.0]).unwrap();
        let out =
            gin_layer_forward(&layer, &tape, &store, &edges, tape.constant(h.clone())).unwrap();
        assert_eq!(tape.value(out).unwrap(), h);
    }

    /// Path 1 → 2 → 3 with hand-set 2x2 weights.
    #[test]
    fn hand_computed_aggregation() {
        let (g, sub) = path_graph();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // vocab = ["r", "self"], so rel_proj input is [h0, h1, onehot_r, onehot_self].
        let layer = GinLayer::new(&mut store, 0, 2, 2, &mut rng).unwrap();
        identity_layer(&mut store, &layer, 2);
        store.set(layer.eps, Tensor::scalar(0.5)).unwrap();
        let w = Tensor::matrix(4, 2, vec![1.0, 0.0, 1.0, -1.0, 0.5, 0.5, 0.0, 0.0]).unwrap();
        store.set(layer.rel_proj.weight, w).unwrap();
        let edges = EdgeIndex::from_subgraph(&sub, &g).unwrap();
        let tape = Tape::new();
        let h = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 1.0, 0.0, 1.0]).unwrap();
        let out = tape
            .value(gin_layer_forward(&layer, &tape, &store, &edges, tape.constant(h)).unwrap())
            .unwrap();
        // msg(1→2) = ReLU([1+2+0.5, 0-2+0.5]) = [3.5, 0]; msg(2→3) = ReLU([3+1+0.5, -1+0.5]) = [4.5, 0].
        // node1: 1.5*[1,2] = [1.5,3]; node2: 1.5*[3,1] + [3.5,0] = [8,1.5]; node3: 1.5*[0,1] + [4.5,0] = [4.5,1.5].
        assert_eq!(out.data(), &[1.5, 3.0, 8.0, 1.5, 4.5, 1.5]);
    }

    #[test]
    fn stack_shapes() {
        let (g, sub) = path_graph();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let edges = EdgeIndex::from_subgraph(&sub, &g).unwrap();
        for k in [1, 2] {
            let stack = GinStack::new(&mut store, k, 4, 2, &mut rng).unwrap();
            let tape = Tape::new();
            let out = stack
                .forward(
                    &tape,
                    &store,
                    &edges,
                    tape.constant(Tensor::filled(&[3, 4], 0.1)),
                )
                .unwrap();
            assert_eq!(tape.shape(out).unwrap(), vec![3, 4 * k]);
            store = ParamStore::new();
        }
    }
}
