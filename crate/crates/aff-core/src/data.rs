//! Seeded synthetic datasets and file loaders.
//!
//! Every generator is a pure function of its arguments: the draw order from
//! the seeded [`RngStream`] is part of each generator's contract and is
//! spelled out in its doc comment, so datasets are bit-identical across runs
//! and platforms.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// One multi-source sample. `sources[k]` has the generator's feature extent
/// plus one trailing coordinate equal to the corruption flag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiSourceSample {
    pub sources: Vec<Vec<f64>>,
    pub label: usize,
    pub corrupted: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiSourceDataset {
    pub samples: Vec<MultiSourceSample>,
    pub k: usize,
    /// Per-source vector extents (uniform across samples).
    pub dims: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageSample {
    /// Row-major 16x16, single channel.
    pub pixels: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageDataset {
    pub samples: Vec<ImageSample>,
    pub side: usize,
    pub classes: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenSample {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenDataset {
    pub samples: Vec<TokenSample>,
    pub vocab: usize,
    pub classes: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphSample {
    /// Row-major N x N 0/1 adjacency, symmetric, zero diagonal.
    pub adjacency: Vec<f64>,
    /// Row-major N x F node features.
    pub features: Vec<f64>,
    pub n_nodes: usize,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphDataset {
    pub samples: Vec<GraphSample>,
    pub feat_dim: usize,
    pub classes: usize,
    pub seed: u64,
}

/// Train/test index partition: disjoint and covering.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetSplit {
    /// Shuffle 0..n and cut off round(n * test_ratio) test indices.
    pub fn random(n: usize, test_ratio: f64, rng: &mut RngStream) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty { what: "dataset" });
        }
        if !(0.0..=1.0).contains(&test_ratio) {
            return Err(Error::InvalidValue {
                what: "test ratio",
                detail: format!("{test_ratio}"),
            });
        }
        let mut idx: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut idx);
        let n_test = (n as f64 * test_ratio).round() as usize;
        let test = idx.split_off(n - n_test);
        Ok(Self { train: idx, test })
    }

    /// First `n_train` indices train, next `n_test` test.
    pub fn contiguous(n_train: usize, n_test: usize) -> Self {
        Self {
            train: (0..n_train).collect(),
            test: (n_train..n_train + n_test).collect(),
        }
    }
}

/// Parameters for [`gen_multisource`]; `new(n)` fills in the stock values.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiSourceSpec {
    pub n: usize,
    pub k: usize,
    /// Drawn feature extent per source; stored vectors carry d+1 coordinates.
    pub d: usize,
    pub classes: usize,
    /// Within-class feature noise (standard deviation).
    pub sigma: f64,
    pub p_corrupt: f64,
    /// Replacement noise scale for corrupted sources (standard deviation).
    pub sigma_noise: f64,
}

impl MultiSourceSpec {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            k: 3,
            d: 8,
            classes: 2,
            sigma: 0.5,
            p_corrupt: 0.5,
            sigma_noise: 3.0,
        }
    }
}

/// Labeled samples with K feature sources per sample. Per (class, source)
/// prototypes are standard normal; a sample's source k is prototype plus
/// Normal(0, sigma^2) noise, except that with probability p_corrupt the
/// whole source is replaced by Normal(0, sigma_noise^2) and flagged. The
/// flag is appended to the vector as a 0/1 coordinate, making reliability
/// visible to a fusion rule that cares to look.
///
/// Draw order: prototypes mu[c][k][j] for c, k, j ascending; then per
/// sample: label (one index draw), then per source one uniform for the
/// corruption decision followed by d normals.
pub fn gen_multisource(spec: &MultiSourceSpec, seed: u64) -> Result<MultiSourceDataset> {
    if spec.n < 1 {
        return Err(Error::Empty { what: "sample count" });
    }
    if spec.k < 2 {
        return Err(Error::InvalidValue {
            what: "source count",
            detail: format!("need at least 2, got {}", spec.k),
        });
    }
    if spec.d < 1 || spec.classes < 2 {
        return Err(Error::InvalidValue {
            what: "multisource extents",
            detail: format!("d {} classes {}", spec.d, spec.classes),
        });
    }
    if !(0.0..=1.0).contains(&spec.p_corrupt) {
        return Err(Error::InvalidValue {
            what: "corruption probability",
            detail: format!("{}", spec.p_corrupt),
        });
    }
    if spec.sigma < 0.0 || spec.sigma_noise < 0.0 {
        return Err(Error::InvalidValue {
            what: "noise scale",
            detail: format!("sigma {} sigma_noise {}", spec.sigma, spec.sigma_noise),
        });
    }
    let mut rng = RngStream::new(seed);
    let mut proto = vec![0.0; spec.classes * spec.k * spec.d];
    for v in proto.iter_mut() {
        *v = rng.next_normal();
    }
    let mut samples = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let label = rng.next_index(spec.classes);
        let mut sources = Vec::with_capacity(spec.k);
        let mut corrupted = Vec::with_capacity(spec.k);
        for k in 0..spec.k {
            let corrupt = rng.next_uniform() <= spec.p_corrupt;
            let mut v = Vec::with_capacity(spec.d + 1);
            for j in 0..spec.d {
                let z = rng.next_normal();
                if corrupt {
                    v.push(spec.sigma_noise * z);
                } else {
                    v.push(proto[(label * spec.k + k) * spec.d + j] + spec.sigma * z);
                }
            }
            v.push(if corrupt { 1.0 } else { 0.0 });
            sources.push(v);
            corrupted.push(corrupt);
        }
        samples.push(MultiSourceSample {
            sources,
            label,
            corrupted,
        });
    }
    Ok(MultiSourceDataset {
        samples,
        k: spec.k,
        dims: vec![spec.d + 1; spec.k],
        classes: spec.classes,
        seed,
    })
}

/// 16x16 grayscale images of three shapes, labels round-robin by index:
/// 0 horizontal bar, 1 vertical bar, 2 cross. Bars sit at a random row or
/// column; the cross draws its row first, then its column. Shape pixels are
/// 1, background 0, then Normal(0, 0.1^2) noise is added to every pixel in
/// row-major order and the result clamped to [-1, 2].
pub fn gen_shapes(n: usize, seed: u64) -> Result<ImageDataset> {
    if n < 1 {
        return Err(Error::Empty { what: "sample count" });
    }
    const SIDE: usize = 16;
    let mut rng = RngStream::new(seed);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 3;
        let mut pixels = vec![0.0; SIDE * SIDE];
        match label {
            0 => {
                let row = rng.next_index(SIDE);
                for x in 0..SIDE {
                    pixels[row * SIDE + x] = 1.0;
                }
            }
            1 => {
                let col = rng.next_index(SIDE);
                for y in 0..SIDE {
                    pixels[y * SIDE + col] = 1.0;
                }
            }
            _ => {
                let row = rng.next_index(SIDE);
                let col = rng.next_index(SIDE);
                for x in 0..SIDE {
                    pixels[row * SIDE + x] = 1.0;
                }
                for y in 0..SIDE {
                    pixels[y * SIDE + col] = 1.0;
                }
            }
        }
        for p in pixels.iter_mut() {
            *p = (*p + 0.1 * rng.next_normal()).clamp(-1.0, 2.0);
        }
        samples.push(ImageSample { pixels, label });
    }
    Ok(ImageDataset {
        samples,
        side: SIDE,
        classes: 3,
        seed,
    })
}

/// Token id layout for [`gen_token_sentiment`]: ids 0..8 positive lexicon,
/// 8..16 negative lexicon, 16..V neutral.
pub const SENTIMENT_LEXICON: usize = 8;

/// Binary sentiment sequences of length T over vocabulary V. Labels
/// alternate round-robin. Position 0 is always a lexicon token of the
/// sequence's label; each later position draws one uniform and becomes a
/// lexicon token of the label when it is <= 0.5, otherwise a neutral token.
/// Only the label's own lexicon ever appears, so the majority lexicon is
/// the label by construction.
pub fn gen_token_sentiment(n: usize, t: usize, vocab: usize, seed: u64) -> Result<TokenDataset> {
    if n < 1 {
        return Err(Error::Empty { what: "sample count" });
    }
    if t < 1 {
        return Err(Error::Empty { what: "sequence length" });
    }
    if vocab <= 2 * SENTIMENT_LEXICON {
        return Err(Error::InvalidValue {
            what: "vocabulary size",
            detail: format!("need more than {} ids, got {vocab}", 2 * SENTIMENT_LEXICON),
        });
    }
    let mut rng = RngStream::new(seed);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let lex_base = label * SENTIMENT_LEXICON;
        let mut tokens = Vec::with_capacity(t);
        tokens.push(lex_base + rng.next_index(SENTIMENT_LEXICON));
        for _ in 1..t {
            if rng.next_uniform() <= 0.5 {
                tokens.push(lex_base + rng.next_index(SENTIMENT_LEXICON));
            } else {
                tokens.push(2 * SENTIMENT_LEXICON + rng.next_index(vocab - 2 * SENTIMENT_LEXICON));
            }
        }
        samples.push(TokenSample { tokens, label });
    }
    Ok(TokenDataset {
        samples,
        vocab,
        classes: 2,
        seed,
    })
}

/// Two graph families with round-robin labels: class 0 is the cycle C_N,
/// class 1 the star S_{N-1} (node 0 is the hub). N is drawn uniformly from
/// [min_nodes, max_nodes] per graph (the only draw). Node features are the
/// one-hot degree; the feature extent is max_nodes (largest degree is
/// max_nodes - 1) so every graph in the dataset shares it.
pub fn gen_graphs(n: usize, min_nodes: usize, max_nodes: usize, seed: u64) -> Result<GraphDataset> {
    if n < 1 {
        return Err(Error::Empty { what: "sample count" });
    }
    if min_nodes < 3 || min_nodes > max_nodes {
        return Err(Error::InvalidValue {
            what: "node range",
            detail: format!("[{min_nodes}, {max_nodes}]"),
        });
    }
    let feat_dim = max_nodes;
    let mut rng = RngStream::new(seed);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let nn = min_nodes + rng.next_index(max_nodes - min_nodes + 1);
        let mut adjacency = vec![0.0; nn * nn];
        if label == 0 {
            for v in 0..nn {
                let w = (v + 1) % nn;
                adjacency[v * nn + w] = 1.0;
                adjacency[w * nn + v] = 1.0;
            }
        } else {
            for v in 1..nn {
                adjacency[v] = 1.0;
                adjacency[v * nn] = 1.0;
            }
        }
        let mut features = vec![0.0; nn * feat_dim];
        for v in 0..nn {
            let degree = adjacency[v * nn..(v + 1) * nn]
                .iter()
                .filter(|&&e| e != 0.0)
                .count();
            features[v * feat_dim + degree] = 1.0;
        }
        samples.push(GraphSample {
            adjacency,
            features,
            n_nodes: nn,
            label,
        });
    }
    Ok(GraphDataset {
        samples,
        feat_dim,
        classes: 2,
        seed,
    })
}

// ---- file formats -----------------------------------------------------------

/// Multi-source CSV: header `label` then, per source k, columns
/// `src<k>_<j>` for the drawn coordinates and `src<k>_corrupt` for the
/// appended flag coordinate. One sample per row, floats in plain decimal.
pub fn save_multisource_csv(ds: &MultiSourceDataset, path: &Path) -> Result<()> {
    let mut out = String::from("label");
    for (k, &dim) in ds.dims.iter().enumerate() {
        for j in 0..dim - 1 {
            write!(out, ",src{k}_{j}").expect("string write");
        }
        write!(out, ",src{k}_corrupt").expect("string write");
    }
    out.push('\n');
    for s in &ds.samples {
        write!(out, "{}", s.label).expect("string write");
        for src in &s.sources {
            for v in src {
                write!(out, ",{v}").expect("string write");
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_multisource_csv(path: &Path) -> Result<MultiSourceDataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Empty { what: "csv file" })?;
    let dims = parse_multisource_header(header)?;
    let k = dims.len();
    let columns = 1 + dims.iter().sum::<usize>();
    let mut samples = Vec::new();
    let mut max_label = 0usize;
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns {
            return Err(Error::Parse {
                line: line_no,
                detail: format!("expected {columns} fields, got {}", fields.len()),
            });
        }
        let label: usize = fields[0].parse().map_err(|_| Error::Parse {
            line: line_no,
            detail: format!("bad label {:?}", fields[0]),
        })?;
        max_label = max_label.max(label);
        let mut sources = Vec::with_capacity(k);
        let mut corrupted = Vec::with_capacity(k);
        let mut pos = 1;
        for &dim in &dims {
            let mut v = Vec::with_capacity(dim);
            for _ in 0..dim {
                let x: f64 = fields[pos].parse().map_err(|_| Error::Parse {
                    line: line_no,
                    detail: format!("bad float {:?}", fields[pos]),
                })?;
                if !x.is_finite() {
                    return Err(Error::Parse {
                        line: line_no,
                        detail: format!("non-finite value {:?}", fields[pos]),
                    });
                }
                v.push(x);
                pos += 1;
            }
            let flag = *v.last().expect("dim >= 1");
            if flag != 0.0 && flag != 1.0 {
                return Err(Error::Parse {
                    line: line_no,
                    detail: format!("corrupt flag must be 0 or 1, got {flag}"),
                });
            }
            corrupted.push(flag == 1.0);
            sources.push(v);
        }
        samples.push(MultiSourceSample {
            sources,
            label,
            corrupted,
        });
    }
    if samples.is_empty() {
        return Err(Error::Empty { what: "csv rows" });
    }
    Ok(MultiSourceDataset {
        samples,
        k,
        dims,
        classes: max_label + 1,
        seed: 0,
    })
}

/// Column extents per source implied by a multi-source header.
fn parse_multisource_header(header: &str) -> Result<Vec<usize>> {
    let mut fields = header.split(',');
    if fields.next() != Some("label") {
        return Err(Error::Parse {
            line: 1,
            detail: format!("header must start with 'label', got {header:?}"),
        });
    }
    let mut dims: Vec<usize> = Vec::new();
    let mut coord = 0usize;
    for f in fields {
        let rest = f.strip_prefix("src").ok_or_else(|| Error::Parse {
            line: 1,
            detail: format!("unknown column {f:?}"),
        })?;
        let (k_str, tail) = rest.split_once('_').ok_or_else(|| Error::Parse {
            line: 1,
            detail: format!("unknown column {f:?}"),
        })?;
        let k: usize = k_str.parse().map_err(|_| Error::Parse {
            line: 1,
            detail: format!("unknown column {f:?}"),
        })?;
        if k != dims.len() {
            return Err(Error::Parse {
                line: 1,
                detail: format!("column {f:?} out of order"),
            });
        }
        if tail == "corrupt" {
            dims.push(coord + 1);
            coord = 0;
        } else {
            let j: usize = tail.parse().map_err(|_| Error::Parse {
                line: 1,
                detail: format!("unknown column {f:?}"),
            })?;
            if j != coord {
                return Err(Error::Parse {
                    line: 1,
                    detail: format!("column {f:?} out of order"),
                });
            }
            coord += 1;
        }
    }
    if dims.is_empty() {
        return Err(Error::Parse {
            line: 1,
            detail: "header declares no sources".into(),
        });
    }
    if coord != 0 {
        return Err(Error::Parse {
            line: 1,
            detail: "last source lacks a corrupt column".into(),
        });
    }
    Ok(dims)
}

/// Edge-list graph file: per graph a `graph <id> <label>` line, one
/// `node <i> <f0> <f1> ...` line per node in index order, one
/// `edge <i> <j>` line per undirected edge with i < j, then a blank line.
pub fn save_edge_list(ds: &GraphDataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (id, g) in ds.samples.iter().enumerate() {
        writeln!(out, "graph {id} {}", g.label).expect("string write");
        for v in 0..g.n_nodes {
            write!(out, "node {v}").expect("string write");
            for f in &g.features[v * ds.feat_dim..(v + 1) * ds.feat_dim] {
                write!(out, " {f}").expect("string write");
            }
            out.push('\n');
        }
        for i in 0..g.n_nodes {
            for j in i + 1..g.n_nodes {
                if g.adjacency[i * g.n_nodes + j] != 0.0 {
                    writeln!(out, "edge {i} {j}").expect("string write");
                }
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_edge_list(path: &Path) -> Result<GraphDataset> {
    let text = std::fs::read_to_string(path)?;
    let mut samples: Vec<GraphSample> = Vec::new();
    let mut feat_dim: Option<usize> = None;
    let mut max_label = 0usize;

    struct Block {
        label: usize,
        features: Vec<Vec<f64>>,
        edges: Vec<(usize, usize)>,
    }
    let mut current: Option<Block> = None;

    let finish = |block: Block, feat_dim: &mut Option<usize>, line: usize| -> Result<GraphSample> {
        let nn = block.features.len();
        if nn == 0 {
            return Err(Error::Parse {
                line,
                detail: "graph block has no nodes".into(),
            });
        }
        let fd = block.features[0].len();
        match *feat_dim {
            None => *feat_dim = Some(fd),
            Some(prev) if prev != fd => {
                return Err(Error::Parse {
                    line,
                    detail: format!("feature extent {fd} differs from earlier {prev}"),
                })
            }
            _ => {}
        }
        let mut adjacency = vec![0.0; nn * nn];
        for (i, j) in block.edges {
            if i >= nn || j >= nn {
                return Err(Error::Parse {
                    line,
                    detail: format!("edge ({i},{j}) references missing node"),
                });
            }
            adjacency[i * nn + j] = 1.0;
            adjacency[j * nn + i] = 1.0;
        }
        Ok(GraphSample {
            adjacency,
            features: block.features.concat(),
            n_nodes: nn,
            label: block.label,
        })
    };

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            if let Some(block) = current.take() {
                max_label = max_label.max(block.label);
                samples.push(finish(block, &mut feat_dim, line_no)?);
            }
            continue;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("graph") => {
                if let Some(block) = current.take() {
                    max_label = max_label.max(block.label);
                    samples.push(finish(block, &mut feat_dim, line_no)?);
                }
                let _id = parts.next().ok_or_else(|| Error::Parse {
                    line: line_no,
                    detail: "graph line needs id and label".into(),
                })?;
                let label: usize = parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Parse {
                        line: line_no,
                        detail: "graph line needs an integer label".into(),
                    })?;
                current = Some(Block {
                    label,
                    features: Vec::new(),
                    edges: Vec::new(),
                });
            }
            Some("node") => {
                let block = current.as_mut().ok_or_else(|| Error::Parse {
                    line: line_no,
                    detail: "node line outside a graph block".into(),
                })?;
                let idx: usize = parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Parse {
                        line: line_no,
                        detail: "node line needs an index".into(),
                    })?;
                if idx != block.features.len() {
                    return Err(Error::Parse {
                        line: line_no,
                        detail: format!(
                            "node index {idx} out of order (expected {})",
                            block.features.len()
                        ),
                    });
                }
                let feats: Vec<f64> = parts
                    .map(|s| {
                        s.parse::<f64>().map_err(|_| Error::Parse {
                            line: line_no,
                            detail: format!("bad node feature {s:?}"),
                        })
                    })
                    .collect::<Result<_>>()?;
                if feats.is_empty() {
                    return Err(Error::Parse {
                        line: line_no,
                        detail: "node line has no features".into(),
                    });
                }
                if let Some(first) = block.features.first() {
                    if feats.len() != first.len() {
                        return Err(Error::Parse {
                            line: line_no,
                            detail: format!(
                                "node has {} features, block uses {}",
                                feats.len(),
                                first.len()
                            ),
                        });
                    }
                }
                block.features.push(feats);
            }
            Some("edge") => {
                let block = current.as_mut().ok_or_else(|| Error::Parse {
                    line: line_no,
                    detail: "edge line outside a graph block".into(),
                })?;
                let i: usize = parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Parse {
                        line: line_no,
                        detail: "edge line needs two indices".into(),
                    })?;
                let j: usize = parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Parse {
                        line: line_no,
                        detail: "edge line needs two indices".into(),
                    })?;
                if i == j {
                    return Err(Error::Parse {
                        line: line_no,
                        detail: format!("self-loop on node {i}"),
                    });
                }
                block.edges.push((i, j));
            }
            Some(other) => {
                return Err(Error::Parse {
                    line: line_no,
                    detail: format!("unknown directive {other:?}"),
                })
            }
            None => unreachable!("blank lines handled above"),
        }
    }
    if let Some(block) = current.take() {
        let line = text.lines().count();
        max_label = max_label.max(block.label);
        samples.push(finish(block, &mut feat_dim, line)?);
    }
    if samples.is_empty() {
        return Err(Error::Empty { what: "graph file" });
    }
    Ok(GraphDataset {
        feat_dim: feat_dim.expect("nonempty dataset has nodes"),
        samples,
        classes: max_label + 1,
        seed: 0,
    })
}
