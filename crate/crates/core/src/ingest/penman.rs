//! PENMAN reader and writer.
//!
//! Concepts and constants both become graph nodes. A target atom that names
//! a variable defined anywhere in the graph is a re-reference to that node;
//! an undefined atom shaped like a variable (`[a-z][0-9]*`) is an error, any
//! other atom is a constant leaf.

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::graph::{GraphError, MultiRelGraph, Triple};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PenmanError {
    #[error("empty input")]
    EmptyInput { offset: usize },
    #[error("unbalanced parentheses at byte {offset}")]
    UnbalancedParens { offset: usize },
    #[error("variable `{name}` referenced at byte {offset} is never defined")]
    DanglingVariable { name: String, offset: usize },
    #[error("unexpected {found} at byte {offset}, expected {expected}")]
    Unexpected { found: String, expected: &'static str, offset: usize },
    #[error("variable `{name}` defined twice (second at byte {offset})")]
    Redefined { name: String, offset: usize },
    #[error("unterminated string starting at byte {offset}")]
    UnterminatedString { offset: usize },
    #[error("node {node} is not reachable from the root")]
    Unreachable { node: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Open,
    Close,
    Slash,
    Role(String),
    Atom(String),
    Str(String),
}

fn describe(tok: Option<&(Tok, usize)>) -> String {
    match tok {
        None => "end of input".into(),
        Some((Tok::Open, _)) => "`(`".into(),
        Some((Tok::Close, _)) => "`)`".into(),
        Some((Tok::Slash, _)) => "`/`".into(),
        Some((Tok::Role(r), _)) => format!("role `:{r}`"),
        Some((Tok::Atom(a), _)) => format!("atom `{a}`"),
        Some((Tok::Str(s), _)) => format!("string {s:?}"),
    }
}

fn lex(s: &str) -> Result<Vec<(Tok, usize)>, PenmanError> {
    let bytes = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        match c {
            b if b.is_ascii_whitespace() => i += 1,
            b'(' => {
                out.push((Tok::Open, i));
                i += 1;
            }
            b')' => {
                out.push((Tok::Close, i));
                i += 1;
            }
            b'/' => {
                out.push((Tok::Slash, i));
                i += 1;
            }
            b'"' => {
                let start = i;
                i += 1;
                let mut value = String::new();
                loop {
                    match s[i..].chars().next() {
                        None => return Err(PenmanError::UnterminatedString { offset: start }),
                        Some('"') => {
                            i += 1;
                            break;
                        }
                        Some('\\') => {
                            i += 1;
                            let Some(next) = s[i..].chars().next() else {
                                return Err(PenmanError::UnterminatedString { offset: start });
                            };
                            value.push(next);
                            i += next.len_utf8();
                        }
                        Some(ch) => {
                            value.push(ch);
                            i += ch.len_utf8();
                        }
                    }
                }
                out.push((Tok::Str(value), start));
            }
            _ => {
                let start = i;
                while i < bytes.len()
                    && !bytes[i].is_ascii_whitespace()
                    && !matches!(bytes[i], b'(' | b')' | b'/' | b'"')
                {
                    i += 1;
                }
                let text = &s[start..i];
                if let Some(role) = text.strip_prefix(':') {
                    out.push((Tok::Role(role.to_string()), start));
                } else {
                    out.push((Tok::Atom(text.to_string()), start));
                }
            }
        }
    }
    Ok(out)
}

enum Target {
    Node(usize),
    Atom(String, usize),
    Constant(String),
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    end: usize,
    nodes: Vec<String>,
    vars: HashMap<String, usize>,
    edges: Vec<(usize, String, Target)>,
}

impl Parser {
    fn peek(&self) -> Option<&(Tok, usize)> {
        self.toks.get(self.pos)
    }

    fn unexpected(&self, expected: &'static str) -> PenmanError {
        match self.peek() {
            None => PenmanError::UnbalancedParens { offset: self.end },
            tok => PenmanError::Unexpected {
                found: describe(tok),
                expected,
                offset: tok.map_or(self.end, |t| t.1),
            },
        }
    }

    fn node(&mut self) -> Result<usize, PenmanError> {
        match self.peek() {
            Some((Tok::Open, _)) => self.pos += 1,
            _ => return Err(self.unexpected("`(`")),
        }
        let (var, var_offset) = match self.peek() {
            Some((Tok::Atom(a), off)) => (a.clone(), *off),
            _ => return Err(self.unexpected("variable")),
        };
        self.pos += 1;
        match self.peek() {
            Some((Tok::Slash, _)) => self.pos += 1,
            _ => return Err(self.unexpected("`/`")),
        }
        let concept = match self.peek() {
            Some((Tok::Atom(a), _)) | Some((Tok::Str(a), _)) => a.clone(),
            _ => return Err(self.unexpected("concept")),
        };
        self.pos += 1;
        if self.vars.contains_key(&var) {
            return Err(PenmanError::Redefined { name: var, offset: var_offset });
        }
        let id = self.nodes.len();
        self.nodes.push(concept);
        self.vars.insert(var, id);

        loop {
            match self.peek() {
                Some((Tok::Close, _)) => {
                    self.pos += 1;
                    return Ok(id);
                }
                Some((Tok::Role(role), _)) => {
                    let role = role.clone();
                    self.pos += 1;
                    let target = match self.peek() {
                        Some((Tok::Open, _)) => Target::Node(self.node()?),
                        Some((Tok::Atom(a), off)) => {
                            let t = Target::Atom(a.clone(), *off);
                            self.pos += 1;
                            t
                        }
                        Some((Tok::Str(s), _)) => {
                            let t = Target::Constant(s.clone());
                            self.pos += 1;
                            t
                        }
                        _ => return Err(self.unexpected("role target")),
                    };
                    self.edges.push((id, role, target));
                }
                _ => return Err(self.unexpected("role or `)`")),
            }
        }
    }
}

fn looks_like_variable(atom: &str) -> bool {
    let mut chars = atom.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_lowercase()) && chars.all(|c| c.is_ascii_digit())
}

/// Parse one PENMAN graph.
pub fn parse_penman(s: &str) -> Result<MultiRelGraph, PenmanError> {
    let toks = lex(s)?;
    if toks.is_empty() {
        return Err(PenmanError::EmptyInput { offset: 0 });
    }
    let mut p = Parser {
        toks,
        pos: 0,
        end: s.len(),
        nodes: Vec::new(),
        vars: HashMap::new(),
        edges: Vec::new(),
    };
    p.node()?;
    if let Some((tok, offset)) = p.peek() {
        return Err(match tok {
            Tok::Close => PenmanError::UnbalancedParens { offset: *offset },
            _ => PenmanError::Unexpected {
                found: describe(p.peek()),
                expected: "end of input",
                offset: *offset,
            },
        });
    }

    let mut nodes = p.nodes;
    let mut triples = Vec::with_capacity(p.edges.len());
    for (head, relation, target) in p.edges {
        let tail = match target {
            Target::Node(n) => n,
            Target::Atom(a, offset) => match p.vars.get(&a) {
                Some(&n) => n,
                None if looks_like_variable(&a) => {
                    return Err(PenmanError::DanglingVariable { name: a, offset })
                }
                None => {
                    nodes.push(a);
                    nodes.len() - 1
                }
            },
            Target::Constant(c) => {
                nodes.push(c);
                nodes.len() - 1
            }
        };
        triples.push(Triple { head, relation, tail });
    }
    Ok(MultiRelGraph::new(nodes, triples)?)
}

fn write_label(out: &mut String, label: &str) {
    let plain = !label.is_empty()
        && !label.starts_with(':')
        && !label
            .chars()
            .any(|c| c.is_whitespace() || matches!(c, '(' | ')' | '/' | '"' | '\\'));
    if plain {
        out.push_str(label);
    } else {
        out.push('"');
        for c in label.chars() {
            if matches!(c, '"' | '\\') {
                out.push('\\');
            }
            out.push(c);
        }
        out.push('"');
    }
}

/// Serialize a graph rooted at node 0. Every node is written as
/// `(vN / label)`; edges to already-written nodes become re-references.
pub fn to_penman(g: &MultiRelGraph) -> Result<String, PenmanError> {
    let mut outgoing: Vec<Vec<&Triple>> = vec![Vec::new(); g.num_nodes()];
    for t in g.triples() {
        outgoing[t.head].push(t);
    }
    let mut written = vec![false; g.num_nodes()];
    let mut out = String::new();
    write_node(g, 0, &outgoing, &mut written, &mut out);
    if let Some(node) = written.iter().position(|w| !w) {
        return Err(PenmanError::Unreachable { node });
    }
    Ok(out)
}

fn write_node(g: &MultiRelGraph, n: usize, outgoing: &[Vec<&Triple>], written: &mut [bool], out: &mut String) {
    written[n] = true;
    let _ = write!(out, "(v{n} / ");
    write_label(out, &g.nodes()[n]);
    for t in &outgoing[n] {
        let _ = write!(out, " :{} ", t.relation);
        if written[t.tail] {
            let _ = write!(out, "v{}", t.tail);
        } else {
            write_node(g, t.tail, outgoing, written, out);
        }
    }
    out.push(')');
}
