//! Near-duplicate clustering: connected components of the graph whose edges
//! join hashes within a Hamming radius.

use std::collections::BTreeMap;

use super::phash::PerceptualHash;

pub(crate) struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    pub(crate) fn new(n: usize) -> Self {
        Self { parent: (0..n).collect(), rank: vec![0; n] }
    }

    pub(crate) fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub(crate) fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

/// BK-tree over Hamming distance for radius queries.
struct BkTree {
    nodes: Vec<BkNode>,
}

struct BkNode {
    hash: PerceptualHash,
    items: Vec<usize>,
    children: BTreeMap<u32, usize>,
}

impl BkTree {
    fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn insert(&mut self, hash: PerceptualHash, item: usize) {
        if self.nodes.is_empty() {
            self.nodes.push(BkNode { hash, items: vec![item], children: BTreeMap::new() });
            return;
        }
        let mut cur = 0;
        loop {
            let d = self.nodes[cur].hash.distance(hash);
            if d == 0 {
                self.nodes[cur].items.push(item);
                return;
            }
            match self.nodes[cur].children.get(&d) {
                Some(&next) => cur = next,
                None => {
                    let idx = self.nodes.len();
                    self.nodes.push(BkNode { hash, items: vec![item], children: BTreeMap::new() });
                    self.nodes[cur].children.insert(d, idx);
                    return;
                }
            }
        }
    }

    fn within(&self, hash: PerceptualHash, radius: u32, out: &mut Vec<usize>) {
        if self.nodes.is_empty() {
            return;
        }
        let mut stack = vec![0];
        while let Some(cur) = stack.pop() {
            let node = &self.nodes[cur];
            let d = node.hash.distance(hash);
            if d <= radius {
                out.extend_from_slice(&node.items);
            }
            let lo = d.saturating_sub(radius);
            let hi = d + radius;
            stack.extend(node.children.range(lo..=hi).map(|(_, &c)| c));
        }
    }
}

/// Component label (root index) for every input hash.
pub(crate) fn components(hashes: &[PerceptualHash], radius: u32) -> Vec<usize> {
    let mut uf = UnionFind::new(hashes.len());
    let mut tree = BkTree::new();
    let mut hits = Vec::new();
    for (i, &h) in hashes.iter().enumerate() {
        hits.clear();
        tree.within(h, radius, &mut hits);
        for &j in &hits {
            uf.union(i, j);
        }
        tree.insert(h, i);
    }
    (0..hashes.len()).map(|i| uf.find(i)).collect()
}
