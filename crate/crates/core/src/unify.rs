//! Union-find over nodes that may carry a bound label.
//!
//! Dimension refinement binds equivalence classes to concrete extents and
//! device placement binds them to devices; both share this structure. A bind
//! conflict surfaces both labels and their recorded origins so callers can
//! report which constraints clashed.

/// Labels a class may be bound to. Merging two bound classes requires equal
/// labels.
pub trait Label: Clone + PartialEq + std::fmt::Debug + std::fmt::Display {}
impl<T: Clone + PartialEq + std::fmt::Debug + std::fmt::Display> Label for T {}

#[derive(Debug, Clone)]
struct Node<L> {
    parent: usize,
    rank: u32,
    bound: Option<(L, String)>,
}

#[derive(Debug, Clone)]
pub struct UnionFind<L> {
    nodes: Vec<Node<L>>,
}

/// Two classes were forced to unequal labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BindConflict<L> {
    pub a: L,
    pub a_src: String,
    pub b: L,
    pub b_src: String,
}

impl<L: Label> Default for UnionFind<L> {
    fn default() -> Self {
        Self::new()
    }
}

impl<L: Label> UnionFind<L> {
    pub fn new() -> Self {
        UnionFind { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn fresh(&mut self) -> usize {
        self.nodes.push(Node { parent: self.nodes.len(), rank: 0, bound: None });
        self.nodes.len() - 1
    }

    /// Ensures ids `0..n` exist.
    pub fn ensure(&mut self, n: usize) {
        while self.nodes.len() < n {
            self.fresh();
        }
    }

    pub fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.nodes[root].parent != root {
            root = self.nodes[root].parent;
        }
        let mut cur = x;
        while self.nodes[cur].parent != root {
            let next = self.nodes[cur].parent;
            self.nodes[cur].parent = root;
            cur = next;
        }
        root
    }

    pub fn bound(&mut self, x: usize) -> Option<L> {
        let r = self.find(x);
        self.nodes[r].bound.as_ref().map(|(l, _)| l.clone())
    }

    pub fn bound_with_src(&mut self, x: usize) -> Option<(L, String)> {
        let r = self.find(x);
        self.nodes[r].bound.clone()
    }

    /// Binds the class of `x` to `label`, recording `src` for diagnostics.
    pub fn bind(&mut self, x: usize, label: L, src: &str) -> Result<(), BindConflict<L>> {
        let r = self.find(x);
        match &self.nodes[r].bound {
            Some((existing, esrc)) if *existing != label => Err(BindConflict {
                a: existing.clone(),
                a_src: esrc.clone(),
                b: label,
                b_src: src.to_string(),
            }),
            Some(_) => Ok(()),
            None => {
                self.nodes[r].bound = Some((label, src.to_string()));
                Ok(())
            }
        }
    }

    pub fn union(&mut self, x: usize, y: usize) -> Result<usize, BindConflict<L>> {
        let rx = self.find(x);
        let ry = self.find(y);
        if rx == ry {
            return Ok(rx);
        }
        let merged = match (self.nodes[rx].bound.clone(), self.nodes[ry].bound.clone()) {
            (Some((a, a_src)), Some((b, b_src))) => {
                if a != b {
                    return Err(BindConflict { a, a_src, b, b_src });
                }
                Some((a, a_src))
            }
            (Some(b), None) | (None, Some(b)) => Some(b),
            (None, None) => None,
        };
        let (hi, lo) = if self.nodes[rx].rank >= self.nodes[ry].rank { (rx, ry) } else { (ry, rx) };
        self.nodes[lo].parent = hi;
        if self.nodes[rx].rank == self.nodes[ry].rank {
            self.nodes[hi].rank += 1;
        }
        self.nodes[hi].bound = merged;
        Ok(hi)
    }

    /// Attempts the union and leaves both classes untouched when the merge
    /// would conflict. Returns whether the union happened.
    pub fn union_if_compatible(&mut self, x: usize, y: usize) -> bool {
        let rx = self.find(x);
        let ry = self.find(y);
        if rx == ry {
            return true;
        }
        let compatible = match (&self.nodes[rx].bound, &self.nodes[ry].bound) {
            (Some((a, _)), Some((b, _))) => a == b,
            _ => true,
        };
        if compatible {
            self.union(rx, ry).expect("checked compatible");
        }
        compatible
    }

    pub fn same(&mut self, x: usize, y: usize) -> bool {
        self.find(x) == self.find(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn union_merges_and_finds() {
        let mut uf: UnionFind<u32> = UnionFind::new();
        let a = uf.fresh();
        let b = uf.fresh();
        let c = uf.fresh();
        assert!(!uf.same(a, b));
        uf.union(a, b).unwrap();
        assert!(uf.same(a, b));
        assert!(!uf.same(a, c));
        uf.union(b, c).unwrap();
        assert!(uf.same(a, c));
    }

    #[test]
    fn bind_propagates_through_union() {
        let mut uf: UnionFind<u32> = UnionFind::new();
        let a = uf.fresh();
        let b = uf.fresh();
        uf.bind(a, 8, "decl a").unwrap();
        uf.union(a, b).unwrap();
        assert_eq!(uf.bound(b), Some(8));
    }

    #[test]
    fn conflicting_bind_reports_both_sources() {
        let mut uf: UnionFind<u32> = UnionFind::new();
        let a = uf.fresh();
        let b = uf.fresh();
        uf.bind(a, 8, "decl a").unwrap();
        uf.bind(b, 9, "decl b").unwrap();
        let err = uf.union(a, b).unwrap_err();
        assert_eq!((err.a, err.b), (8, 9));
        assert_eq!((err.a_src.as_str(), err.b_src.as_str()), ("decl a", "decl b"));
    }

    #[test]
    fn union_if_compatible_declines_conflicts() {
        let mut uf: UnionFind<u32> = UnionFind::new();
        let a = uf.fresh();
        let b = uf.fresh();
        uf.bind(a, 1, "a").unwrap();
        uf.bind(b, 2, "b").unwrap();
        assert!(!uf.union_if_compatible(a, b));
        assert!(!uf.same(a, b));
        assert_eq!(uf.bound(a), Some(1));
        assert_eq!(uf.bound(b), Some(2));
    }
}
