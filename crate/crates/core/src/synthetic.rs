//! Seeded synthetic graph-text corpora for tests and experiments.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::MultiRelGraph;
use crate::ingest::RawExample;

const ENTITIES: [&str; 32] = [
    "alice", "bob", "carol", "dave", "erin", "frank", "grace", "heidi", "ivan", "judy", "mallory", "niaj", "olivia",
    "peggy", "rupert", "sybil", "trent", "victor", "walter", "yvonne", "paris", "london", "berlin", "rome", "oslo",
    "music", "chess", "tennis", "poetry", "physics", "cooking", "sailing",
];

const RELATIONS: [&str; 6] = ["knows", "likes", "visits", "teaches", "admires", "follows"];

fn pick_entities(rng: &mut impl Rng, pool: usize, k: usize) -> Vec<&'static str> {
    let mut names: Vec<&str> = ENTITIES[..pool].to_vec();
    names.shuffle(rng);
    names.truncate(k);
    names
}

/// Random small knowledge graphs whose text states every triple as
/// `head relation tail`, sentences joined by ` . `.
pub fn memorization_set(count: usize, seed: u64) -> Vec<RawExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let n = rng.gen_range(3..=5);
            let names = pick_entities(&mut rng, ENTITIES.len(), n);
            let edges = rng.gen_range(n - 1..=n);
            let mut triples = Vec::with_capacity(edges);
            for i in 0..edges {
                let h = if i + 1 < n { i } else { rng.gen_range(0..n) };
                let t = if i + 1 < n { i + 1 } else { (h + rng.gen_range(1..n)) % n };
                triples.push((h, RELATIONS[rng.gen_range(0..RELATIONS.len())].to_string(), t));
            }
            let text = triples
                .iter()
                .map(|(h, r, t)| format!("{} {r} {}", names[*h], names[*t]))
                .collect::<Vec<_>>()
                .join(" . ");
            let g = MultiRelGraph::from_parts(names, triples).expect("indices in range");
            RawExample { graph: g, text }
        })
        .collect()
}

/// Chains `e_0 -next-> e_1 -next-> ... e_k` over entity names drawn from
/// the first `pool` names. Nodes and triples are listed in shuffled order,
/// so the text (the names in chain order) is recoverable only from the
/// edges.
pub fn chain_order_set(count: usize, min_len: usize, max_len: usize, pool: usize, seed: u64) -> Vec<RawExample> {
    chain_stride_set(count, min_len, max_len, pool, 1, seed)
}

/// Like [`chain_order_set`] but the text names only every `stride`-th chain
/// element starting from the head, so consecutive words are `stride` hops
/// apart in the entity graph.
pub fn chain_stride_set(
    count: usize,
    min_len: usize,
    max_len: usize,
    pool: usize,
    stride: usize,
    seed: u64,
) -> Vec<RawExample> {
    assert!(stride >= 1, "stride must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = pool.clamp(max_len, ENTITIES.len());
    (0..count)
        .map(|_| {
            let k = rng.gen_range(min_len..=max_len);
            let chain = pick_entities(&mut rng, pool, k);
            let mut order: Vec<usize> = (0..k).collect();
            order.shuffle(&mut rng);
            let mut slot = vec![0; k];
            for (pos, &c) in order.iter().enumerate() {
                slot[c] = pos;
            }
            let nodes: Vec<&str> = order.iter().map(|&c| chain[c]).collect();
            let mut triples: Vec<(usize, String, usize)> =
                (1..k).map(|i| (slot[i - 1], "next".to_string(), slot[i])).collect();
            triples.shuffle(&mut rng);
            let g = MultiRelGraph::from_parts(nodes, triples).expect("indices in range");
            RawExample { graph: g, text: chain.iter().step_by(stride).copied().collect::<Vec<_>>().join(" ") }
        })
        .collect()
}

/// `count` directed paths of `nodes` nodes each.
pub fn path_set(count: usize, nodes: usize, seed: u64) -> Vec<RawExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let names = pick_entities(&mut rng, ENTITIES.len(), nodes.min(ENTITIES.len()));
            let triples = (1..names.len()).map(|i| (i - 1, "next".to_string(), i));
            let text = names.join(" ");
            RawExample { graph: MultiRelGraph::from_parts(names, triples).expect("indices in range"), text }
        })
        .collect()
}
