//! Input formats, vocabulary and batching.

pub mod penman;
pub mod vocab;

use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{levi_transform, tokenize_graph, GraphError, MultiRelGraph, TokenGraph, Triple};
use penman::{parse_penman, PenmanError};
use vocab::{normalize_text, Vocab, PAD};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: malformed record: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("line {line}: triple index {index} out of range for {len} nodes")]
    IndexOutOfRange { line: usize, index: usize, len: usize },
    #[error("block starting at line {line}: {source}")]
    Penman { line: usize, source: PenmanError },
    #[error("block starting at line {line}: missing `# ::snt` sentence")]
    MissingSentence { line: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("not a dataset file: {0}")]
    BadDataset(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A graph paired with its reference text, before vocabulary lookup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawExample {
    pub graph: MultiRelGraph,
    pub text: String,
}

/// A training/evaluation instance with its token graph and target ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub graph: MultiRelGraph,
    pub token_graph: TokenGraph,
    /// Normalized reference text.
    pub target_text: String,
    /// Target ids, terminated by EOS.
    pub target_ids: Vec<u32>,
}

impl Example {
    pub fn encode(raw: &RawExample, vocab: &Vocab) -> Result<Self, GraphError> {
        let token_graph = tokenize_graph(&levi_transform(&raw.graph), vocab)?;
        Ok(Self {
            graph: raw.graph.clone(),
            token_graph,
            target_text: normalize_text(&raw.text, vocab.lowercase()),
            target_ids: vocab.encode_target(&raw.text),
        })
    }
}

pub fn encode_examples(raws: &[RawExample], vocab: &Vocab) -> Result<Vec<Example>, GraphError> {
    raws.iter().map(|r| Example::encode(r, vocab)).collect()
}

/// Every string the vocabulary should cover: node labels, relation labels
/// and reference texts.
pub fn corpus_strings(raws: &[RawExample]) -> Vec<&str> {
    let mut out = Vec::new();
    for r in raws {
        out.extend(r.graph.nodes().iter().map(String::as_str));
        out.extend(r.graph.triples().iter().map(|t| t.relation.as_str()));
        out.push(r.text.as_str());
    }
    out
}

#[derive(Serialize, Deserialize)]
struct KgRecord {
    nodes: Vec<String>,
    triples: Vec<(usize, String, usize)>,
    text: String,
}

fn parse_kg_line(line: &str, lineno: usize) -> Result<RawExample, IngestError> {
    let rec: KgRecord = serde_json::from_str(line)
        .map_err(|e| IngestError::MalformedRecord { line: lineno, message: e.to_string() })?;
    let len = rec.nodes.len();
    if len == 0 {
        return Err(IngestError::MalformedRecord { line: lineno, message: "no nodes".into() });
    }
    let mut triples = Vec::with_capacity(rec.triples.len());
    for (head, relation, tail) in rec.triples {
        for index in [head, tail] {
            if index >= len {
                return Err(IngestError::IndexOutOfRange { line: lineno, index, len });
            }
        }
        triples.push(Triple { head, relation, tail });
    }
    Ok(RawExample { graph: MultiRelGraph::new(rec.nodes, triples)?, text: rec.text })
}

/// Read line-delimited KG records (`{"nodes", "triples", "text"}`); blank
/// lines are skipped, line numbers are 1-based.
pub fn read_kg_records(path: &Path) -> Result<Vec<RawExample>, IngestError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_kg_line(&line, i + 1)?);
    }
    Ok(out)
}

pub fn kg_record_line(raw: &RawExample) -> String {
    let rec = KgRecord {
        nodes: raw.graph.nodes().to_vec(),
        triples: raw
            .graph
            .triples()
            .iter()
            .map(|t| (t.head, t.relation.clone(), t.tail))
            .collect(),
        text: raw.text.clone(),
    };
    serde_json::to_string(&rec).expect("records always serialize")
}

pub fn write_kg_records(path: &Path, raws: &[RawExample]) -> io::Result<()> {
    let mut out = io::BufWriter::new(fs::File::create(path)?);
    for r in raws {
        writeln!(out, "{}", kg_record_line(r))?;
    }
    out.flush()
}

/// Parse an AMR file: blank-line separated blocks, each with a `# ::snt`
/// comment line and one PENMAN graph.
pub fn parse_amr_text(text: &str) -> Result<Vec<RawExample>, IngestError> {
    let mut out = Vec::new();
    let mut block: Vec<&str> = Vec::new();
    let mut block_start = 1;
    let lines: Vec<&str> = text.lines().collect();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            if !block.is_empty() {
                out.push(parse_amr_block(&block, block_start)?);
                block.clear();
            }
            block_start = i + 2;
        } else {
            block.push(line);
        }
    }
    if !block.is_empty() {
        out.push(parse_amr_block(&block, block_start)?);
    }
    Ok(out)
}

fn parse_amr_block(lines: &[&str], line: usize) -> Result<RawExample, IngestError> {
    let mut sentence = None;
    let mut graph_text = String::new();
    for l in lines {
        let t = l.trim_start();
        if let Some(rest) = t.strip_prefix('#') {
            if let Some(snt) = rest.trim_start().strip_prefix("::snt") {
                sentence = Some(snt.trim().to_string());
            }
        } else {
            graph_text.push_str(l);
            graph_text.push('\n');
        }
    }
    let text = sentence.ok_or(IngestError::MissingSentence { line })?;
    let graph = parse_penman(&graph_text).map_err(|source| IngestError::Penman { line, source })?;
    Ok(RawExample { graph, text })
}

pub fn read_amr_file(path: &Path) -> Result<Vec<RawExample>, IngestError> {
    parse_amr_text(&fs::read_to_string(path)?)
}

const DATASET_MAGIC: &[u8; 8] = b"G2TDATA1";

/// Encoded examples as a magic tag followed by their bincode encoding.
pub fn save_dataset(path: &Path, examples: &[Example]) -> Result<(), IngestError> {
    let mut out = io::BufWriter::new(fs::File::create(path)?);
    out.write_all(DATASET_MAGIC)?;
    bincode::serialize_into(&mut out, examples).map_err(|e| IngestError::BadDataset(e.to_string()))?;
    out.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<Example>, IngestError> {
    let bytes = fs::read(path)?;
    match bytes.strip_prefix(DATASET_MAGIC) {
        Some(body) => bincode::deserialize(body).map_err(|e| IngestError::BadDataset(e.to_string())),
        None => Err(IngestError::BadDataset(format!("{} lacks the dataset header", path.display()))),
    }
}

/// A group of examples padded to per-batch maxima.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub example_indices: Vec<usize>,
    pub graphs: Vec<TokenGraph>,
    /// Node token ids, `[batch][max_nodes]`, PAD beyond each graph's size.
    pub node_ids: Vec<Vec<u32>>,
    pub node_mask: Vec<Vec<bool>>,
    /// Intra-span token positions, zero on padding.
    pub span_pos: Vec<Vec<usize>>,
    /// Target ids, `[batch][max_len]`, PAD beyond each target.
    pub targets: Vec<Vec<u32>>,
    pub target_mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn from_examples(examples: &[Example], indices: &[usize]) -> Self {
        let max_nodes = indices.iter().map(|&i| examples[i].token_graph.num_nodes()).max().unwrap_or(0);
        let max_len = indices.iter().map(|&i| examples[i].target_ids.len()).max().unwrap_or(0);
        let pad_to = |v: &[u32], n: usize| {
            let mut out = v.to_vec();
            out.resize(n, PAD);
            out
        };
        let mask = |len: usize, n: usize| (0..n).map(|k| k < len).collect::<Vec<_>>();
        let mut b = Batch {
            example_indices: indices.to_vec(),
            graphs: Vec::new(),
            node_ids: Vec::new(),
            node_mask: Vec::new(),
            span_pos: Vec::new(),
            targets: Vec::new(),
            target_mask: Vec::new(),
        };
        for &i in indices {
            let ex = &examples[i];
            let g = &ex.token_graph;
            b.node_ids.push(pad_to(&g.tokens, max_nodes));
            b.node_mask.push(mask(g.num_nodes(), max_nodes));
            let mut pos = g.span_pos.clone();
            pos.resize(max_nodes, 0);
            b.span_pos.push(pos);
            b.targets.push(pad_to(&ex.target_ids, max_len));
            b.target_mask.push(mask(ex.target_ids.len(), max_len));
            b.graphs.push(g.clone());
        }
        b
    }

    pub fn len(&self) -> usize {
        self.example_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.example_indices.is_empty()
    }

    pub fn target_len(&self, b: usize) -> usize {
        self.target_mask[b].iter().filter(|&&m| m).count()
    }

    /// Non-pad target positions across the batch.
    pub fn token_count(&self) -> usize {
        (0..self.len()).map(|b| self.target_len(b)).sum()
    }
}

/// Shuffle (deterministically under `seed`) and cut into batches.
pub fn make_batches(examples: &[Example], batch_size: usize, seed: u64) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
        .chunks(batch_size)
        .map(|chunk| Batch::from_examples(examples, chunk))
        .collect()
}
