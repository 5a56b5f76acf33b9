//! Rooted trees up to isomorphism: canonical forms, automorphisms, grafting
//! and the index sets that drive the flow equations.
//!
//! A [`Tree`] is stored as the level sequence of a depth-first walk in which
//! the children of every node are visited in increasing order of their
//! nested-parenthesis encoding. That walk also fixes the canonical node order
//! used by elementary differentials and force coefficients.

use crate::err;
use crate::error::Result;
use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

/// Canonical unlabelled rooted tree.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Tree {
    // Ordering compares size first, then the parenthesis string.
    size: usize,
    parens: String,
}

/// One isomorphism class produced by grafting, with the number of grafting
/// nodes that produce it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraftTerm {
    pub result: Tree,
    pub multiplicity: usize,
}

/// One way of obtaining a tree by grafting `tau2` onto a node of `tau1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndEntry {
    pub tau1: Tree,
    pub tau2: Tree,
    /// Node positions of the canonical labelling of `tau1` that give the target.
    pub node_count: usize,
    /// Those positions, as canonical node indices of `tau1`.
    pub nodes: Vec<usize>,
}

/// A labelled tree given as a node set, an edge set and a root.
#[derive(Debug, Clone)]
pub struct LabelledTree {
    pub nodes: Vec<u64>,
    pub edges: Vec<(u64, u64)>,
    pub root: u64,
}

impl fmt::Debug for Tree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tree{}", self.parens)
    }
}

impl fmt::Display for Tree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.parens)
    }
}

/// Canonical parenthesis string of the subtree below `v` in a child-list tree.
fn encode(children: &[Vec<usize>], v: usize) -> String {
    let mut codes: Vec<String> = children[v].iter().map(|&c| encode(children, c)).collect();
    codes.sort();
    let mut s = String::from("(");
    for c in codes {
        s.push_str(&c);
    }
    s.push(')');
    s
}

/// Canonical code of the subtree at `v` and its nodes in canonical preorder.
fn encode_ordered(children: &[Vec<usize>], v: usize) -> (String, Vec<usize>) {
    let mut parts: Vec<(String, Vec<usize>)> = children[v].iter().map(|&c| encode_ordered(children, c)).collect();
    // Stable: isomorphic siblings keep their insertion order.
    parts.sort_by(|a, b| a.0.cmp(&b.0));
    let mut s = String::from("(");
    let mut order = vec![v];
    for (code, nodes) in parts {
        s.push_str(&code);
        order.extend(nodes);
    }
    s.push(')');
    (s, order)
}

impl Tree {
    /// The single-node tree.
    pub fn dot() -> Tree {
        Tree::parse("()").unwrap()
    }
    /// Root with one leaf child.
    pub fn cherry() -> Tree {
        Tree::parse("(())").unwrap()
    }
    /// Path on three nodes rooted at an end.
    pub fn chain() -> Tree {
        Tree::parse("((()))").unwrap()
    }
    /// Root with two leaf children.
    pub fn star() -> Tree {
        Tree::parse("(()())").unwrap()
    }

    /// Builds a tree from a child-list description rooted at node 0.
    pub fn from_children(children: &[Vec<usize>]) -> Tree {
        let parens = encode(children, 0);
        Tree { size: parens.len() / 2, parens }
    }

    /// Like [`Tree::from_children`], also returning the input node at each
    /// canonical preorder position.
    pub fn from_children_ordered(children: &[Vec<usize>]) -> (Tree, Vec<usize>) {
        let (parens, order) = encode_ordered(children, 0);
        (Tree { size: parens.len() / 2, parens }, order)
    }

    /// Parses the nested-parenthesis form, canonicalizing it.
    pub fn parse(text: &str) -> Result<Tree> {
        let mut children: Vec<Vec<usize>> = Vec::new();
        let mut stack: Vec<usize> = Vec::new();
        let mut closed_root = false;
        for ch in text.chars().filter(|c| !c.is_whitespace()) {
            if closed_root {
                return Err(err!(Structure, "text after the root closes: {text}"));
            }
            match ch {
                '(' => {
                    let id = children.len();
                    children.push(Vec::new());
                    if let Some(&p) = stack.last() {
                        children[p].push(id);
                    } else if id != 0 {
                        return Err(err!(Structure, "more than one root in {text}"));
                    }
                    stack.push(id);
                }
                ')' => {
                    stack.pop().ok_or_else(|| err!(Structure, "unbalanced parentheses in {text}"))?;
                    if stack.is_empty() {
                        closed_root = true;
                    }
                }
                other => return Err(err!(Structure, "unexpected character {other:?}")),
            }
        }
        if children.is_empty() || !stack.is_empty() {
            return Err(err!(Structure, "unbalanced parentheses in {text}"));
        }
        Ok(Tree::from_children(&children))
    }

    /// Number of edges.
    pub fn order(&self) -> usize {
        self.size - 1
    }

    /// Number of nodes.
    pub fn size(&self) -> usize {
        self.size
    }

    /// Scaling `-1 + size * H`.
    pub fn scaling(&self, hurst: f64) -> f64 {
        -1.0 + self.size as f64 * hurst
    }

    /// The nested-parenthesis text form.
    pub fn as_str(&self) -> &str {
        &self.parens
    }

    /// Depth of every node in canonical order; the canonical code.
    pub fn canonical_code(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.size);
        let mut depth = 0u32;
        for ch in self.parens.chars() {
            if ch == '(' {
                out.push(depth);
                depth += 1;
            } else {
                depth -= 1;
            }
        }
        out
    }

    /// Rebuilds a tree from its level sequence.
    pub fn from_code(code: &[u32]) -> Result<Tree> {
        if code.first() != Some(&0) || code[1..].iter().any(|&d| d == 0) {
            return Err(err!(Structure, "level sequence must have a single root at depth 0"));
        }
        let mut children = vec![Vec::new(); code.len()];
        let mut path: Vec<usize> = vec![0];
        for (i, &d) in code.iter().enumerate().skip(1) {
            let d = d as usize;
            if d > path.len() {
                return Err(err!(Structure, "level sequence jumps by more than one"));
            }
            path.truncate(d);
            children[*path.last().unwrap()].push(i);
            path.push(i);
        }
        Ok(Tree::from_children(&children))
    }

    /// Parent of each node in canonical order (`None` for the root).
    pub fn parents(&self) -> Vec<Option<usize>> {
        let mut out = Vec::with_capacity(self.size);
        let mut stack: Vec<usize> = Vec::new();
        for ch in self.parens.chars() {
            if ch == '(' {
                out.push(stack.last().copied());
                stack.push(out.len() - 1);
            } else {
                stack.pop();
            }
        }
        out
    }

    /// Children of each node in canonical order.
    pub fn children(&self) -> Vec<Vec<usize>> {
        let mut ch = vec![Vec::new(); self.size];
        for (i, p) in self.parents().into_iter().enumerate() {
            if let Some(p) = p {
                ch[p].push(i);
            }
        }
        ch
    }

    /// Subtree hanging below `node`, as a canonical tree.
    pub fn subtree(&self, node: usize) -> Tree {
        let ch = self.children();
        let mut map = Vec::new();
        let mut local: Vec<Vec<usize>> = Vec::new();
        fn walk(v: usize, ch: &[Vec<usize>], map: &mut Vec<usize>, local: &mut Vec<Vec<usize>>) -> usize {
            let id = local.len();
            local.push(Vec::new());
            map.push(v);
            for &c in &ch[v] {
                let cid = walk(c, ch, map, local);
                local[id].push(cid);
            }
            id
        }
        walk(node, &ch, &mut map, &mut local);
        Tree::from_children(&local)
    }

    /// Number of automorphisms of any labelled representative.
    pub fn aut_size(&self) -> u64 {
        fn aut(v: usize, ch: &[Vec<usize>], codes: &[String]) -> u64 {
            let mut total = 1u64;
            let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
            for &c in &ch[v] {
                total *= aut(c, ch, codes);
                *counts.entry(codes[c].as_str()).or_default() += 1;
            }
            for k in counts.values() {
                total *= (1..=*k).product::<u64>();
            }
            total
        }
        let ch = self.children();
        let codes: Vec<String> = (0..self.size).map(|v| encode(&ch, v)).collect();
        aut(0, &ch, &codes)
    }

    /// The tree obtained by attaching `other` as a new child of `node`.
    pub fn graft_at(&self, other: &Tree, node: usize) -> Tree {
        let mut ch = self.children();
        let offset = ch.len();
        let och = other.children();
        ch[node].push(offset);
        for list in och {
            ch.push(list.into_iter().map(|c| c + offset).collect());
        }
        Tree::from_children(&ch)
    }
}

/// Canonical form of a labelled rooted tree.
pub fn canonicalize(input: &LabelledTree) -> Result<Tree> {
    let n = input.nodes.len();
    if n == 0 {
        return Err(err!(Structure, "empty node set"));
    }
    let index: BTreeMap<u64, usize> = input.nodes.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    if index.len() != n {
        return Err(err!(Structure, "duplicate node labels"));
    }
    let root = *index.get(&input.root).ok_or_else(|| err!(Structure, "root is not a node"))?;
    if input.edges.len() != n - 1 {
        return Err(err!(Structure, "{} edges for {} nodes: not a tree", input.edges.len(), n));
    }
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in &input.edges {
        let ia = *index.get(&a).ok_or_else(|| err!(Structure, "edge endpoint {a} is not a node"))?;
        let ib = *index.get(&b).ok_or_else(|| err!(Structure, "edge endpoint {b} is not a node"))?;
        if ia == ib {
            return Err(err!(Structure, "self loop at {a}"));
        }
        adj[ia].push(ib);
        adj[ib].push(ia);
    }
    // Orient away from the root; with n-1 edges, reaching every node rules out cycles.
    let mut children = vec![Vec::new(); n];
    let mut seen = vec![false; n];
    let mut order = vec![root];
    seen[root] = true;
    let mut k = 0;
    while k < order.len() {
        let v = order[k];
        k += 1;
        for &w in &adj[v] {
            if !seen[w] {
                seen[w] = true;
                children[v].push(w);
                order.push(w);
            }
        }
    }
    if order.len() != n {
        return Err(err!(Structure, "graph is disconnected or cyclic"));
    }
    // Relabel so that the root is node 0.
    let mut pos = vec![0usize; n];
    for (i, &v) in order.iter().enumerate() {
        pos[v] = i;
    }
    let relabelled: Vec<Vec<usize>> =
        order.iter().map(|&v| children[v].iter().map(|&c| pos[c]).collect()).collect();
    Ok(Tree::from_children(&relabelled))
}

/// All isomorphism classes of `tau2` grafted onto a node of `tau1`, with multiplicities.
pub fn graft_all(tau2: &Tree, tau1: &Tree) -> Vec<GraftTerm> {
    let mut counts: BTreeMap<Tree, usize> = BTreeMap::new();
    for n in 0..tau1.size() {
        *counts.entry(tau1.graft_at(tau2, n)).or_default() += 1;
    }
    counts.into_iter().map(|(result, multiplicity)| GraftTerm { result, multiplicity }).collect()
}

/// The truncation set (trees of order at most two) and its grafting closure.
pub fn truncation_sets() -> (Vec<Tree>, Vec<Tree>) {
    let base = vec![Tree::dot(), Tree::cherry(), Tree::chain(), Tree::star()];
    let mut star_set: Vec<Tree> = vec![Tree::dot()];
    for t1 in &base {
        for t2 in &base {
            for g in graft_all(t2, t1) {
                if !star_set.contains(&g.result) {
                    star_set.push(g.result);
                }
            }
        }
    }
    star_set.sort();
    (base, star_set)
}

/// Pairs in the truncation set whose grafting produces `tau`.
pub fn ind_set(tau: &Tree) -> Result<Vec<IndEntry>> {
    let (base, closure) = truncation_sets();
    if !closure.contains(tau) {
        return Err(err!(Domain, "{tau} is not in the grafting closure"));
    }
    let mut out = Vec::new();
    for t1 in &base {
        for t2 in &base {
            if t1.size() + t2.size() != tau.size() {
                continue;
            }
            let nodes: Vec<usize> = (0..t1.size()).filter(|&n| t1.graft_at(t2, n) == *tau).collect();
            if !nodes.is_empty() {
                out.push(IndEntry { tau1: t1.clone(), tau2: t2.clone(), node_count: nodes.len(), nodes });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_forms_round_trip() {
        for s in ["()", "(())", "((()))", "(()())"] {
            assert_eq!(Tree::parse(s).unwrap().as_str(), s);
        }
        assert!(Tree::parse("(()").is_err());
        assert!(Tree::parse("()()").is_err());
    }

    #[test]
    fn code_round_trip() {
        for t in truncation_sets().1 {
            assert_eq!(Tree::from_code(&t.canonical_code()).unwrap(), t);
        }
    }

    #[test]
    fn subtree_and_parents() {
        let t = Tree::parse("((())())").unwrap();
        assert_eq!(t.parents()[0], None);
        assert_eq!(t.subtree(1), Tree::cherry());
    }
}
