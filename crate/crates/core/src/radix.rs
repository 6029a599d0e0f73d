//! Radix tree over token sequences at block granularity.
//!
//! Every non-root node stands for exactly one full block of `block_size`
//! tokens, so a root-to-node path spells a block-aligned prefix. Both the
//! per-engine cache index and the scheduler's global prompt trees are built
//! on this.

use std::collections::HashMap;

pub type NodeId = usize;

#[derive(Debug, Clone)]
pub struct Node<T> {
    pub parent: Option<NodeId>,
    pub chunk: Box<[u32]>,
    pub depth: u32,
    pub data: T,
    children: HashMap<Box<[u32]>, NodeId>,
}

impl<T> Node<T> {
    pub fn child_count(&self) -> usize {
        self.children.len()
    }
}

#[derive(Debug, Clone)]
pub struct BlockRadixTree<T> {
    block_size: usize,
    nodes: Vec<Option<Node<T>>>,
    free: Vec<NodeId>,
    live: usize,
}

impl<T> BlockRadixTree<T> {
    pub const ROOT: NodeId = 0;

    pub fn new(block_size: usize, root_data: T) -> Self {
        assert!(block_size > 0, "block size must be positive");
        let root = Node {
            parent: None,
            chunk: Box::new([]),
            depth: 0,
            data: root_data,
            children: HashMap::new(),
        };
        BlockRadixTree {
            block_size,
            nodes: vec![Some(root)],
            free: Vec::new(),
            live: 1,
        }
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// Number of nodes, root included.
    pub fn len(&self) -> usize {
        self.live
    }

    pub fn is_empty(&self) -> bool {
        self.live == 1
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.nodes.get(id).is_some_and(|n| n.is_some())
    }

    pub fn node(&self, id: NodeId) -> &Node<T> {
        self.nodes[id].as_ref().expect("live node")
    }

    pub fn node_mut(&mut self, id: NodeId) -> &mut Node<T> {
        self.nodes[id].as_mut().expect("live node")
    }

    pub fn get(&self, id: NodeId) -> Option<&Node<T>> {
        self.nodes.get(id).and_then(|n| n.as_ref())
    }

    pub fn child(&self, id: NodeId, chunk: &[u32]) -> Option<NodeId> {
        self.node(id).children.get(chunk).copied()
    }

    /// Children of `id` in ascending id order.
    pub fn children(&self, id: NodeId) -> Vec<NodeId> {
        let mut c: Vec<NodeId> = self.node(id).children.values().copied().collect();
        c.sort_unstable();
        c
    }

    /// Live node ids in ascending order, root first.
    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.as_ref().map(|_| i))
    }

    /// Nodes matched by the whole-block prefix of `tokens`, root excluded.
    pub fn walk(&self, tokens: &[u32]) -> Vec<NodeId> {
        let mut path = Vec::new();
        let mut cur = Self::ROOT;
        for chunk in tokens.chunks_exact(self.block_size) {
            match self.child(cur, chunk) {
                Some(next) => {
                    path.push(next);
                    cur = next;
                }
                None => break,
            }
        }
        path
    }

    /// Ensures the whole-block prefix of `tokens` exists and returns its path.
    /// `make` builds data for created nodes; the flag tells whether a node is new.
    pub fn insert_path<F>(&mut self, tokens: &[u32], mut make: F) -> Vec<(NodeId, bool)>
    where
        F: FnMut(usize) -> T,
    {
        let mut path = Vec::new();
        let mut cur = Self::ROOT;
        for (i, chunk) in tokens.chunks_exact(self.block_size).enumerate() {
            if let Some(next) = self.child(cur, chunk) {
                path.push((next, false));
                cur = next;
                continue;
            }
            let node = Node {
                parent: Some(cur),
                chunk: chunk.into(),
                depth: i as u32 + 1,
                data: make(i),
                children: HashMap::new(),
            };
            let id = match self.free.pop() {
                Some(slot) => {
                    self.nodes[slot] = Some(node);
                    slot
                }
                None => {
                    self.nodes.push(Some(node));
                    self.nodes.len() - 1
                }
            };
            self.live += 1;
            self.node_mut(cur).children.insert(chunk.into(), id);
            path.push((id, true));
            cur = id;
        }
        path
    }

    /// Detaches `id` and everything below it. Returns the removed nodes,
    /// children before parents, siblings in id order.
    pub fn remove_subtree(&mut self, id: NodeId) -> Vec<(NodeId, Node<T>)> {
        assert_ne!(id, Self::ROOT, "cannot remove the root");
        let parent = self.node(id).parent.expect("non-root");
        let chunk = self.node(id).chunk.clone();
        self.node_mut(parent).children.remove(&chunk);
        let mut order = Vec::new();
        let mut stack = vec![(id, false)];
        while let Some((n, expanded)) = stack.pop() {
            if expanded {
                order.push(n);
                continue;
            }
            stack.push((n, true));
            for c in self.children(n).into_iter().rev() {
                stack.push((c, false));
            }
        }
        order
            .into_iter()
            .map(|n| {
                let node = self.nodes[n].take().expect("live node");
                self.free.push(n);
                self.live -= 1;
                (n, node)
            })
            .collect()
    }

    /// Tokens spelled by the path from the root down to `id`.
    pub fn path_tokens(&self, id: NodeId) -> Vec<u32> {
        let mut chunks = Vec::new();
        let mut cur = id;
        while let Some(p) = self.node(cur).parent {
            chunks.push(cur);
            cur = p;
        }
        let mut out = Vec::with_capacity(chunks.len() * self.block_size);
        for n in chunks.into_iter().rev() {
            out.extend_from_slice(&self.node(n).chunk);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_then_walk() {
        let mut t = BlockRadixTree::new(2, ());
        let p = t.insert_path(&[1, 2, 3, 4, 5], |_| ());
        assert_eq!(p.len(), 2);
        assert!(p.iter().all(|(_, new)| *new));
        assert_eq!(t.walk(&[1, 2, 3, 4]).len(), 2);
        assert_eq!(t.walk(&[1, 2, 3, 9]).len(), 1);
        assert_eq!(t.walk(&[9]).len(), 0);
        assert_eq!(t.path_tokens(p[1].0), vec![1, 2, 3, 4]);
    }

    #[test]
    fn branches_share_prefix() {
        let mut t = BlockRadixTree::new(1, ());
        t.insert_path(&[1, 2], |_| ());
        let p = t.insert_path(&[1, 3], |_| ());
        assert!(!p[0].1 && p[1].1);
        let one = t.walk(&[1])[0];
        assert_eq!(t.children(one).len(), 2);
        assert_eq!(t.len(), 4);
    }

    #[test]
    fn remove_subtree_postorder_and_slot_reuse() {
        let mut t = BlockRadixTree::new(1, 0u32);
        t.insert_path(&[1, 2, 3], |d| d as u32);
        t.insert_path(&[1, 4], |d| d as u32);
        let one = t.walk(&[1])[0];
        let removed = t.remove_subtree(one);
        assert_eq!(removed.len(), 4);
        assert_eq!(removed.last().unwrap().0, one);
        assert!(t.is_empty());
        t.insert_path(&[7], |_| 0);
        assert_eq!(t.len(), 2);
        assert!(t.nodes.len() <= 5);
    }
}
