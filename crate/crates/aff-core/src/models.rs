//! Reference models exposing multi-source fusion insertion points.
//!
//! Four architectures produce per-sample feature sources:
//! * direct: raw multi-source vectors pass straight to fusion,
//! * cnn: two conv/relu/maxpool stages on 16x16 images, sources are the
//!   spatially averaged stage outputs,
//! * rnn: Elman recurrence over token embeddings, sources are the last,
//!   mean, and max hidden states,
//! * gcn: two graph-convolution layers, sources are the mean-pooled node
//!   embeddings of each layer.
//!
//! Every fusion mode shares the projection-head architecture; the arms
//! differ only in how projected sources combine (full adaptive block,
//! concat + linear, sum, or product), so comparisons isolate the fusion
//! strategy. Parameters register backbone first, then the fusion arm
//! (projection heads in source order before any arm-specific extras),
//! then the classifier; arms built from the same seed therefore share
//! backbone and head initializations bit for bit.

use serde::{Deserialize, Serialize};

use crate::data::{GraphSample, GraphDataset, ImageDataset, MultiSourceDataset, TokenDataset};
use crate::error::{Error, Result};
use crate::fusion::{
    affine, fuse_add, fuse_concat_linear, fuse_mul, project_sources, ConcatProjection,
    FusionBlock, FusionBlockConfig, FusionOutput, Mode, ProjectionHead, SourceSpec,
};
use crate::rng::RngStream;
use crate::tensor::{glorot_uniform, ParamId, ParamStore, Tape, Tensor};

/// Image side length produced by the shape generator.
pub const IMAGE_SIDE: usize = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    #[default]
    Aff,
    Concat,
    Add,
    Mul,
}

impl FusionMode {
    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Aff => "aff",
            FusionMode::Concat => "concat",
            FusionMode::Add => "add",
            FusionMode::Mul => "mul",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectSpec {
    pub dims: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnSpec {
    #[serde(default = "default_conv1")]
    pub conv1_channels: usize,
    #[serde(default = "default_conv2")]
    pub conv2_channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RnnSpec {
    pub vocab: usize,
    #[serde(default = "default_embed")]
    pub embed_dim: usize,
    #[serde(default = "default_hidden_rnn")]
    pub hidden: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GcnSpec {
    pub feat_dim: usize,
    #[serde(default = "default_hidden_gcn")]
    pub hidden: usize,
}

fn default_conv1() -> usize {
    8
}
fn default_conv2() -> usize {
    16
}
fn default_embed() -> usize {
    16
}
fn default_hidden_rnn() -> usize {
    32
}
fn default_hidden_gcn() -> usize {
    16
}

impl Default for CnnSpec {
    fn default() -> Self {
        Self {
            conv1_channels: default_conv1(),
            conv2_channels: default_conv2(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchSpec {
    Direct(DirectSpec),
    Cnn(CnnSpec),
    Rnn(RnnSpec),
    Gcn(GcnSpec),
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            ArchSpec::Direct(s) => !s.dims.is_empty() && s.dims.iter().all(|&d| d > 0),
            ArchSpec::Cnn(s) => s.conv1_channels > 0 && s.conv2_channels > 0,
            ArchSpec::Rnn(s) => s.vocab > 0 && s.embed_dim > 0 && s.hidden > 0,
            ArchSpec::Gcn(s) => s.feat_dim > 0 && s.hidden > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidValue {
                what: "architecture",
                detail: "all extents must be at least 1".into(),
            })
        }
    }

    /// The feature sources this architecture emits, in order.
    pub fn source_specs(&self) -> Vec<SourceSpec> {
        let named = |pairs: Vec<(&str, usize)>| {
            pairs
                .into_iter()
                .map(|(name, dim)| SourceSpec {
                    name: name.to_string(),
                    dim,
                })
                .collect()
        };
        match self {
            ArchSpec::Direct(s) => s
                .dims
                .iter()
                .enumerate()
                .map(|(k, &dim)| SourceSpec {
                    name: format!("src{k}"),
                    dim,
                })
                .collect(),
            ArchSpec::Cnn(s) => named(vec![
                ("conv1", s.conv1_channels),
                ("conv2", s.conv2_channels),
            ]),
            ArchSpec::Rnn(s) => named(vec![
                ("last", s.hidden),
                ("mean", s.hidden),
                ("max", s.hidden),
            ]),
            ArchSpec::Gcn(s) => named(vec![("layer1", s.hidden), ("layer2", s.hidden)]),
        }
    }
}

/// Complete model description as embedded in experiment JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: ArchSpec,
    pub classes: usize,
    #[serde(default)]
    pub fusion_mode: FusionMode,
    #[serde(default = "bare_fusion_config")]
    pub fusion: FusionBlockConfig,
}

fn bare_fusion_config() -> FusionBlockConfig {
    FusionBlockConfig::new(Vec::new())
}

impl ModelConfig {
    pub fn new(arch: ArchSpec, classes: usize) -> Self {
        Self {
            arch,
            classes,
            fusion_mode: FusionMode::Aff,
            fusion: bare_fusion_config(),
        }
    }

    /// The fusion config with `sources` filled in from the architecture.
    /// Explicit sources must match the architecture's extents.
    pub fn resolved_fusion(&self) -> Result<FusionBlockConfig> {
        let derived = self.arch.source_specs();
        let mut fusion = self.fusion.clone();
        if fusion.sources.is_empty() {
            fusion.sources = derived;
        } else {
            if fusion.sources.len() != derived.len() {
                return Err(Error::CountMismatch {
                    what: "fusion sources",
                    expected: derived.len(),
                    got: fusion.sources.len(),
                });
            }
            for (given, want) in fusion.sources.iter().zip(&derived) {
                if given.dim != want.dim {
                    return Err(Error::InvalidValue {
                        what: "fusion source dim",
                        detail: format!(
                            "source {} has dim {}, architecture emits {}",
                            given.name, given.dim, want.dim
                        ),
                    });
                }
            }
        }
        fusion.validate()?;
        Ok(fusion)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.classes < 2 {
            return Err(Error::InvalidValue {
                what: "classes",
                detail: format!("{} < 2", self.classes),
            });
        }
        self.resolved_fusion().map(|_| ())
    }
}

/// One minibatch, matched to the architecture kind.
#[derive(Clone, Debug)]
pub enum Batch {
    MultiSource {
        /// One (B, d_k) tensor per source.
        sources: Vec<Tensor>,
        labels: Vec<usize>,
        /// Per sample, per source corruption flags.
        corrupted: Vec<Vec<bool>>,
    },
    Images {
        /// (B, 1, side, side).
        images: Tensor,
        labels: Vec<usize>,
    },
    Tokens {
        /// B rows of equal length.
        tokens: Vec<Vec<usize>>,
        labels: Vec<usize>,
    },
    Graphs {
        graphs: Vec<GraphSample>,
        labels: Vec<usize>,
    },
}

impl Batch {
    pub fn labels(&self) -> &[usize] {
        match self {
            Batch::MultiSource { labels, .. }
            | Batch::Images { labels, .. }
            | Batch::Tokens { labels, .. }
            | Batch::Graphs { labels, .. } => labels,
        }
    }

    pub fn len(&self) -> usize {
        self.labels().len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels().is_empty()
    }
}

/// A dataset the training loop can index into batches.
#[derive(Clone, Debug)]
pub enum TaskData {
    MultiSource(MultiSourceDataset),
    Images(ImageDataset),
    Tokens(TokenDataset),
    Graphs(GraphDataset),
}

impl TaskData {
    pub fn len(&self) -> usize {
        match self {
            TaskData::MultiSource(d) => d.samples.len(),
            TaskData::Images(d) => d.samples.len(),
            TaskData::Tokens(d) => d.samples.len(),
            TaskData::Graphs(d) => d.samples.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> usize {
        match self {
            TaskData::MultiSource(d) => d.classes,
            TaskData::Images(d) => d.classes,
            TaskData::Tokens(d) => d.classes,
            TaskData::Graphs(d) => d.classes,
        }
    }

    pub fn label(&self, index: usize) -> usize {
        match self {
            TaskData::MultiSource(d) => d.samples[index].label,
            TaskData::Images(d) => d.samples[index].label,
            TaskData::Tokens(d) => d.samples[index].label,
            TaskData::Graphs(d) => d.samples[index].label,
        }
    }

    /// Assemble the samples at `indices` into one batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::Empty { what: "batch" });
        }
        for &i in indices {
            if i >= self.len() {
                return Err(Error::IndexOutOfRange {
                    what: "sample",
                    index: i,
                    bound: self.len(),
                });
            }
        }
        match self {
            TaskData::MultiSource(d) => {
                let b = indices.len();
                let mut sources = Vec::with_capacity(d.k);
                for k in 0..d.k {
                    let dim = d.dims[k];
                    let mut data = Vec::with_capacity(b * dim);
                    for &i in indices {
                        data.extend_from_slice(&d.samples[i].sources[k]);
                    }
                    sources.push(Tensor::from_vec(vec![b, dim], data)?);
                }
                Ok(Batch::MultiSource {
                    sources,
                    labels: indices.iter().map(|&i| d.samples[i].label).collect(),
                    corrupted: indices.iter().map(|&i| d.samples[i].corrupted.clone()).collect(),
                })
            }
            TaskData::Images(d) => {
                let side = d.side;
                let mut data = Vec::with_capacity(indices.len() * side * side);
                for &i in indices {
                    data.extend_from_slice(&d.samples[i].pixels);
                }
                Ok(Batch::Images {
                    images: Tensor::from_vec(vec![indices.len(), 1, side, side], data)?,
                    labels: indices.iter().map(|&i| d.samples[i].label).collect(),
                })
            }
            TaskData::Tokens(d) => {
                let t0 = d.samples[indices[0]].tokens.len();
                for &i in indices {
                    if d.samples[i].tokens.len() != t0 {
                        return Err(Error::InvalidValue {
                            what: "token batch",
                            detail: "sequence lengths differ within a batch".into(),
                        });
                    }
                }
                Ok(Batch::Tokens {
                    tokens: indices.iter().map(|&i| d.samples[i].tokens.clone()).collect(),
                    labels: indices.iter().map(|&i| d.samples[i].label).collect(),
                })
            }
            TaskData::Graphs(d) => Ok(Batch::Graphs {
                graphs: indices.iter().map(|&i| d.samples[i].clone()).collect(),
                labels: indices.iter().map(|&i| d.samples[i].label).collect(),
            }),
        }
    }
}

/// Symmetric normalization D^{-1/2}(A + I)D^{-1/2} with D the row sums of
/// A + I. `a` is row-major N x N, symmetric, nonnegative, zero diagonal.
pub fn normalize_adjacency(n: usize, a: &[f64]) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Empty { what: "adjacency" });
    }
    if a.len() != n * n {
        return Err(Error::CountMismatch {
            what: "adjacency entries",
            expected: n * n,
            got: a.len(),
        });
    }
    for i in 0..n {
        for j in 0..n {
            let v = a[i * n + j];
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidValue {
                    what: "adjacency entry",
                    detail: format!("({i},{j}) = {v}"),
                });
            }
            if i == j && v != 0.0 {
                return Err(Error::InvalidValue {
                    what: "adjacency diagonal",
                    detail: format!("({i},{i}) = {v}, must be 0"),
                });
            }
            if a[i * n + j] != a[j * n + i] {
                return Err(Error::InvalidValue {
                    what: "adjacency symmetry",
                    detail: format!("({i},{j}) != ({j},{i})"),
                });
            }
        }
    }
    let degrees: Vec<f64> = (0..n)
        .map(|i| 1.0 + a[i * n..(i + 1) * n].iter().sum::<f64>())
        .collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let aij = a[i * n + j] + if i == j { 1.0 } else { 0.0 };
            out[i * n + j] = aij / (degrees[i] * degrees[j]).sqrt();
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct CnnBackbone {
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
    pub c1: usize,
    pub c2: usize,
}

impl CnnBackbone {
    fn init(store: &mut ParamStore, spec: &CnnSpec, rng: &mut RngStream) -> Self {
        let (c1, c2) = (spec.conv1_channels, spec.conv2_channels);
        let conv1_w = store.add(
            "cnn.conv1.weight",
            glorot_uniform(vec![c1, 1, 3, 3], 9, c1 * 9, rng),
            false,
        );
        let conv1_b = store.add("cnn.conv1.bias", Tensor::zeros(vec![c1]), true);
        let conv2_w = store.add(
            "cnn.conv2.weight",
            glorot_uniform(vec![c2, c1, 3, 3], c1 * 9, c2 * 9, rng),
            false,
        );
        let conv2_b = store.add("cnn.conv2.bias", Tensor::zeros(vec![c2]), true);
        Self {
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            c1,
            c2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RnnBackbone {
    pub embed: ParamId,
    pub wx: ParamId,
    pub wh: ParamId,
    pub bias: ParamId,
    pub vocab: usize,
    pub embed_dim: usize,
    pub hidden: usize,
}

impl RnnBackbone {
    fn init(store: &mut ParamStore, spec: &RnnSpec, rng: &mut RngStream) -> Self {
        let (v, e, h) = (spec.vocab, spec.embed_dim, spec.hidden);
        let embed = store.add("rnn.embed", glorot_uniform(vec![v, e], v, e, rng), false);
        let wx = store.add("rnn.wx", glorot_uniform(vec![h, e], e, h, rng), false);
        let wh = store.add("rnn.wh", glorot_uniform(vec![h, h], h, h, rng), false);
        let bias = store.add("rnn.bias", Tensor::zeros(vec![h]), true);
        Self {
            embed,
            wx,
            wh,
            bias,
            vocab: v,
            embed_dim: e,
            hidden: h,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GcnBackbone {
    pub w1: ParamId,
    pub w2: ParamId,
    pub feat_dim: usize,
    pub hidden: usize,
}

impl GcnBackbone {
    fn init(store: &mut ParamStore, spec: &GcnSpec, rng: &mut RngStream) -> Self {
        let (f, h) = (spec.feat_dim, spec.hidden);
        let w1 = store.add("gcn.layer1.weight", glorot_uniform(vec![f, h], f, h, rng), false);
        let w2 = store.add("gcn.layer2.weight", glorot_uniform(vec![h, h], h, h, rng), false);
        Self {
            w1,
            w2,
            feat_dim: f,
            hidden: h,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Arch {
    Direct { dims: Vec<usize> },
    Cnn(CnnBackbone),
    Rnn(RnnBackbone),
    Gcn(GcnBackbone),
}

impl Arch {
    fn build(spec: &ArchSpec, store: &mut ParamStore, rng: &mut RngStream) -> Self {
        match spec {
            ArchSpec::Direct(s) => Arch::Direct { dims: s.dims.clone() },
            ArchSpec::Cnn(s) => Arch::Cnn(CnnBackbone::init(store, s, rng)),
            ArchSpec::Rnn(s) => Arch::Rnn(RnnBackbone::init(store, s, rng)),
            ArchSpec::Gcn(s) => Arch::Gcn(GcnBackbone::init(store, s, rng)),
        }
    }

    fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Arch::Direct { .. } => Vec::new(),
            Arch::Cnn(b) => vec![b.conv1_w, b.conv1_b, b.conv2_w, b.conv2_b],
            Arch::Rnn(b) => vec![b.embed, b.wx, b.wh, b.bias],
            Arch::Gcn(b) => vec![b.w1, b.w2],
        }
    }

    /// Run the backbone and emit the per-source feature matrices, each
    /// (B, d_k).
    pub fn extract_sources(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &Batch,
    ) -> Result<Vec<Tensor>> {
        match (self, batch) {
            (Arch::Direct { dims }, Batch::MultiSource { sources, .. }) => {
                if sources.len() != dims.len() {
                    return Err(Error::CountMismatch {
                        what: "batch sources",
                        expected: dims.len(),
                        got: sources.len(),
                    });
                }
                sources.iter().map(|s| tape.constant(s)).collect()
            }
            (Arch::Cnn(b), Batch::Images { images, .. }) => {
                let w1 = tape.watch(store, b.conv1_w)?;
                let b1 = tape.watch(store, b.conv1_b)?;
                let w2 = tape.watch(store, b.conv2_w)?;
                let b2 = tape.watch(store, b.conv2_b)?;
                let x = tape.constant(images)?;
                let a1 = tape.conv2d(&x, &w1, &b1, 1)?;
                let a1 = tape.relu(&a1)?;
                let p1 = tape.max_pool2(&a1)?;
                let a2 = tape.conv2d(&p1, &w2, &b2, 1)?;
                let a2 = tape.relu(&a2)?;
                let p2 = tape.max_pool2(&a2)?;
                Ok(vec![spatial_mean(tape, &p1)?, spatial_mean(tape, &p2)?])
            }
            (Arch::Rnn(b), Batch::Tokens { tokens, .. }) => {
                let batch_size = tokens.len();
                let t_len = tokens[0].len();
                if t_len == 0 {
                    return Err(Error::Empty { what: "token sequence" });
                }
                for row in tokens {
                    for &tok in row {
                        if tok >= b.vocab {
                            return Err(Error::IndexOutOfRange {
                                what: "token",
                                index: tok,
                                bound: b.vocab,
                            });
                        }
                    }
                }
                let embed = tape.watch(store, b.embed)?;
                let wx = tape.watch(store, b.wx)?;
                let wh = tape.watch(store, b.wh)?;
                let bias = tape.watch(store, b.bias)?;
                let wxt = tape.transpose2d(&wx)?;
                let wht = tape.transpose2d(&wh)?;
                let mut h = tape.constant(&Tensor::zeros(vec![batch_size, b.hidden]))?;
                let mut steps = Vec::with_capacity(t_len);
                for t in 0..t_len {
                    let ids: Vec<usize> = tokens.iter().map(|row| row[t]).collect();
                    let e = tape.gather_rows(&embed, &ids)?;
                    let xe = tape.matmul(&e, &wxt)?;
                    let hh = tape.matmul(&h, &wht)?;
                    let pre = tape.add(&xe, &hh)?;
                    let pre = tape.add(&pre, &bias)?;
                    h = tape.tanh(&pre)?;
                    steps.push(tape.reshape(&h, vec![batch_size, 1, b.hidden])?);
                }
                let refs: Vec<&Tensor> = steps.iter().collect();
                let stack = tape.concat(&refs, 1)?;
                let mean = tape.mean_axis(&stack, 1)?;
                let max = tape.max_axis(&stack, 1)?;
                Ok(vec![h, mean, max])
            }
            (Arch::Gcn(b), Batch::Graphs { graphs, .. }) => {
                let w1 = tape.watch(store, b.w1)?;
                let w2 = tape.watch(store, b.w2)?;
                let mut pooled1 = Vec::with_capacity(graphs.len());
                let mut pooled2 = Vec::with_capacity(graphs.len());
                for g in graphs {
                    let n = g.n_nodes;
                    if g.features.len() != n * b.feat_dim {
                        return Err(Error::CountMismatch {
                            what: "node features",
                            expected: n * b.feat_dim,
                            got: g.features.len(),
                        });
                    }
                    let ahat = normalize_adjacency(n, &g.adjacency)?;
                    let ahat = tape.constant(&Tensor::from_vec(vec![n, n], ahat)?)?;
                    let x = tape.constant(&Tensor::from_vec(
                        vec![n, b.feat_dim],
                        g.features.clone(),
                    )?)?;
                    let ax = tape.matmul(&ahat, &x)?;
                    let h1 = tape.matmul(&ax, &w1)?;
                    let h1 = tape.relu(&h1)?;
                    let ah = tape.matmul(&ahat, &h1)?;
                    let h2 = tape.matmul(&ah, &w2)?;
                    let h2 = tape.relu(&h2)?;
                    let m1 = tape.mean_axis(&h1, 0)?;
                    let m2 = tape.mean_axis(&h2, 0)?;
                    pooled1.push(tape.reshape(&m1, vec![1, b.hidden])?);
                    pooled2.push(tape.reshape(&m2, vec![1, b.hidden])?);
                }
                let refs1: Vec<&Tensor> = pooled1.iter().collect();
                let refs2: Vec<&Tensor> = pooled2.iter().collect();
                Ok(vec![tape.concat(&refs1, 0)?, tape.concat(&refs2, 0)?])
            }
            _ => Err(Error::InvalidValue {
                what: "batch",
                detail: "batch kind does not match the architecture".into(),
            }),
        }
    }
}

/// Mean over the spatial extent of a (B, C, H, W) map.
fn spatial_mean(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    let s = x.shape().to_vec();
    if s.len() != 4 {
        return Err(Error::Rank {
            op: "spatial_mean",
            expected: 4,
            got: s.len(),
        });
    }
    let flat = tape.reshape(x, vec![s[0], s[1], s[2] * s[3]])?;
    tape.mean_axis(&flat, 2)
}

#[derive(Clone, Debug)]
pub enum FusionArm {
    Aff(FusionBlock),
    Concat {
        heads: Vec<ProjectionHead>,
        proj: ConcatProjection,
    },
    Static {
        heads: Vec<ProjectionHead>,
        mode: FusionMode,
    },
}

#[derive(Clone, Debug)]
pub struct Model {
    pub arch: Arch,
    pub fusion: FusionArm,
    pub classifier_w: ParamId,
    pub classifier_b: ParamId,
    pub classes: usize,
    pub common_dim: usize,
    /// Applied by the baseline arms to their fused output at train time;
    /// the adaptive arm's block handles its own dropout.
    pub dropout_p: f64,
}

impl Model {
    /// Registers backbone, fusion arm, and classifier parameters (in that
    /// order) into `store`, drawing initial values from `rng`.
    pub fn build(config: &ModelConfig, store: &mut ParamStore, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let fusion_cfg = config.resolved_fusion()?;
        let arch = Arch::build(&config.arch, store, rng);
        let d = fusion_cfg.common_dim;
        let build_heads = |store: &mut ParamStore, rng: &mut RngStream| -> Vec<ProjectionHead> {
            fusion_cfg
                .sources
                .iter()
                .map(|s| {
                    ProjectionHead::init(
                        store,
                        &format!("fusion.proj.{}", s.name),
                        s.dim,
                        d,
                        fusion_cfg.proj_act,
                        rng,
                    )
                })
                .collect()
        };
        let fusion = match config.fusion_mode {
            FusionMode::Aff => FusionArm::Aff(FusionBlock::build(&fusion_cfg, store, rng)?),
            FusionMode::Concat => {
                let heads = build_heads(store, rng);
                let proj = ConcatProjection::init(
                    store,
                    "fusion.concat",
                    fusion_cfg.sources.len(),
                    d,
                    rng,
                );
                FusionArm::Concat { heads, proj }
            }
            FusionMode::Add | FusionMode::Mul => FusionArm::Static {
                heads: build_heads(store, rng),
                mode: config.fusion_mode,
            },
        };
        let classifier_w = store.add(
            "classifier.weight",
            glorot_uniform(vec![config.classes, d], d, config.classes, rng),
            false,
        );
        let classifier_b = store.add("classifier.bias", Tensor::zeros(vec![config.classes]), true);
        Ok(Self {
            arch,
            fusion,
            classifier_w,
            classifier_b,
            classes: config.classes,
            common_dim: d,
            dropout_p: fusion_cfg.dropout_p,
        })
    }

    /// All parameters in registration order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.arch.param_ids();
        match &self.fusion {
            FusionArm::Aff(block) => ids.extend(block.param_ids()),
            FusionArm::Concat { heads, proj } => {
                for h in heads {
                    ids.extend([h.weight, h.bias]);
                }
                ids.extend([proj.weight, proj.bias]);
            }
            FusionArm::Static { heads, .. } => {
                for h in heads {
                    ids.extend([h.weight, h.bias]);
                }
            }
        }
        ids.extend([self.classifier_w, self.classifier_b]);
        ids
    }

    /// Parameters belonging to the fusion arm (heads plus arm extras).
    pub fn fusion_param_ids(&self) -> Vec<ParamId> {
        match &self.fusion {
            FusionArm::Aff(block) => block.param_ids(),
            FusionArm::Concat { heads, proj } => {
                let mut ids: Vec<ParamId> =
                    heads.iter().flat_map(|h| [h.weight, h.bias]).collect();
                ids.extend([proj.weight, proj.bias]);
                ids
            }
            FusionArm::Static { heads, .. } => {
                heads.iter().flat_map(|h| [h.weight, h.bias]).collect()
            }
        }
    }

    /// Extract sources, fuse them per the configured arm, and classify.
    /// `rng` is drawn from only for train-time dropout.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &Batch,
        mode: Mode,
        rng: &mut RngStream,
    ) -> Result<(Tensor, FusionOutput)> {
        let sources = self.arch.extract_sources(tape, store, batch)?;
        let out = match &self.fusion {
            FusionArm::Aff(block) => block.forward(tape, store, &sources, mode, rng)?,
            FusionArm::Concat { heads, proj } => {
                let z = project_sources(tape, store, &sources, heads)?;
                let fused = fuse_concat_linear(tape, store, &z, proj)?;
                self.baseline_output(tape, fused, mode, rng)?
            }
            FusionArm::Static { heads, mode: fmode } => {
                let z = project_sources(tape, store, &sources, heads)?;
                let fused = match fmode {
                    FusionMode::Add => fuse_add(tape, &z)?,
                    FusionMode::Mul => fuse_mul(tape, &z)?,
                    _ => unreachable!("static arm is add or mul"),
                };
                self.baseline_output(tape, fused, mode, rng)?
            }
        };
        let logits = affine(tape, store, &out.fused, self.classifier_w, self.classifier_b)?;
        Ok((logits, out))
    }

    fn baseline_output(
        &self,
        tape: &mut Tape,
        fused: Tensor,
        mode: Mode,
        rng: &mut RngStream,
    ) -> Result<FusionOutput> {
        let fused = if mode == Mode::Train && self.dropout_p > 0.0 {
            tape.dropout(&fused, self.dropout_p, rng)?
        } else {
            fused
        };
        Ok(FusionOutput {
            fused,
            alphas: None,
            gates: None,
            aux_pred: None,
            aux_target: None,
        })
    }
}
