//! Histogram regression trees grown leaf-wise.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    /// Rows with `bin <= bin` go left.
    Split { feature: usize, bin: u16, left: usize, right: usize },
    Leaf { value: f64 },
}

/// Nodes in preorder; the root is node 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<TreeNode>,
}

impl RegressionTree {
    pub fn leaf(value: f64) -> Self {
        RegressionTree { nodes: vec![TreeNode::Leaf { value }] }
    }

    pub fn eval_binned(&self, bins: impl Fn(usize) -> u16) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                TreeNode::Leaf { value } => return value,
                TreeNode::Split { feature, bin, left, right } => at = if bins(feature) <= bin { left } else { right },
            }
        }
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, TreeNode::Leaf { .. })).count()
    }

    pub fn split_features(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            TreeNode::Split { feature, .. } => Some(*feature),
            TreeNode::Leaf { .. } => None,
        })
    }

    /// Checks preorder layout and index bounds.
    pub fn validate(&self, n_features: usize, n_bins: &[usize]) -> bool {
        fn walk(t: &RegressionTree, at: usize, next: &mut usize, nf: usize, nb: &[usize]) -> bool {
            if at != *next || at >= t.nodes.len() {
                return false;
            }
            *next += 1;
            match t.nodes[at] {
                TreeNode::Leaf { value } => value.is_finite(),
                TreeNode::Split { feature, bin, left, right } => {
                    feature < nf
                        && (bin as usize) + 1 < nb[feature].max(1)
                        && walk(t, left, next, nf, nb)
                        && walk(t, right, next, nf, nb)
                }
            }
        }
        let mut next = 0;
        walk(self, 0, &mut next, n_features, n_bins) && next == self.nodes.len()
    }
}

/// Training inputs for one tree: pre-binned columns and per-row
/// residual/weight pairs over the sampled rows.
pub(crate) struct GrowInput<'a> {
    pub bins: &'a [Vec<u16>],
    pub n_bins: &'a [usize],
    pub rows: &'a [usize],
    pub residual: &'a [f64],
    pub weight: &'a [f64],
    pub num_leaves: usize,
    pub min_samples_leaf: usize,
}

#[derive(Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: usize,
    bin: u16,
}

struct Leaf {
    rows: Vec<usize>,
    g: f64,
    h: f64,
    best: Option<Candidate>,
}

/// Temporary tree shape before preorder renumbering.
enum Shape {
    Leaf(f64),
    Split(usize, u16, Box<Shape>, Box<Shape>),
}

fn best_split(inp: &GrowInput<'_>, rows: &[usize], g: f64, h: f64, min_gain: f64) -> Option<Candidate> {
    if rows.len() < 2 * inp.min_samples_leaf.max(1) || h <= 0.0 {
        return None;
    }
    let parent = g * g / h;
    let mut best: Option<Candidate> = None;
    for (f, col) in inp.bins.iter().enumerate() {
        let nb = inp.n_bins[f];
        if nb < 2 {
            continue;
        }
        let mut hg = vec![0.0; nb];
        let mut hh = vec![0.0; nb];
        let mut hc = vec![0usize; nb];
        for &i in rows {
            let b = col[i] as usize;
            hg[b] += inp.residual[i] * inp.weight[i];
            hh[b] += inp.weight[i];
            hc[b] += 1;
        }
        let (mut gl, mut hl, mut cl) = (0.0, 0.0, 0usize);
        for b in 0..nb - 1 {
            gl += hg[b];
            hl += hh[b];
            cl += hc[b];
            let cr = rows.len() - cl;
            if cl < inp.min_samples_leaf || cr < inp.min_samples_leaf {
                continue;
            }
            let (gr, hr) = (g - gl, h - hl);
            if hl <= 0.0 || hr <= 0.0 {
                continue;
            }
            let gain = gl * gl / hl + gr * gr / hr - parent;
            if gain > min_gain && best.map_or(true, |c| gain > c.gain) {
                best = Some(Candidate { gain, feature: f, bin: b as u16 });
            }
        }
    }
    best
}

pub(crate) fn grow_tree(inp: &GrowInput<'_>) -> RegressionTree {
    let sums = |rows: &[usize]| {
        rows.iter().fold((0.0, 0.0), |(g, h), &i| (g + inp.residual[i] * inp.weight[i], h + inp.weight[i]))
    };
    let total_sq: f64 = inp.rows.iter().map(|&i| inp.weight[i] * inp.residual[i] * inp.residual[i]).sum();
    let min_gain = 1e-12 * total_sq.max(f64::MIN_POSITIVE);

    let (g, h) = sums(inp.rows);
    let mut leaves = vec![Leaf { rows: inp.rows.to_vec(), g, h, best: None }];
    leaves[0].best = best_split(inp, &leaves[0].rows, g, h, min_gain);
    // children[k] = Some((feature, bin, left leaf, right leaf)) once leaf k split
    let mut children: Vec<Option<(usize, u16, usize, usize)>> = vec![None];

    while leaves.len() - children.iter().filter(|c| c.is_some()).count() < inp.num_leaves {
        let pick = (0..leaves.len())
            .filter(|&k| children[k].is_none())
            .filter_map(|k| leaves[k].best.map(|c| (k, c.gain)))
            .fold(None, |acc: Option<(usize, f64)>, (k, gain)| match acc {
                Some((_, g)) if g >= gain => acc,
                _ => Some((k, gain)),
            });
        let Some((k, _)) = pick else { break };
        let c = leaves[k].best.expect("picked leaf has a split");
        let col = &inp.bins[c.feature];
        let (l, r): (Vec<usize>, Vec<usize>) = leaves[k].rows.iter().partition(|&&i| col[i] <= c.bin);
        let mut make = |rows: Vec<usize>| {
            let (g, h) = sums(&rows);
            let best = best_split(inp, &rows, g, h, min_gain);
            leaves.push(Leaf { rows, g, h, best });
            children.push(None);
            leaves.len() - 1
        };
        let (li, ri) = (make(l), make(r));
        children[k] = Some((c.feature, c.bin, li, ri));
    }

    fn shape(k: usize, leaves: &[Leaf], children: &[Option<(usize, u16, usize, usize)>]) -> Shape {
        match children[k] {
            Some((f, b, l, r)) => Shape::Split(f, b, Box::new(shape(l, leaves, children)), Box::new(shape(r, leaves, children))),
            None => Shape::Leaf(if leaves[k].h > 0.0 { leaves[k].g / leaves[k].h } else { 0.0 }),
        }
    }
    fn emit(s: &Shape, out: &mut Vec<TreeNode>) -> usize {
        let at = out.len();
        match s {
            Shape::Leaf(v) => out.push(TreeNode::Leaf { value: *v }),
            Shape::Split(f, b, l, r) => {
                out.push(TreeNode::Leaf { value: 0.0 });
                let left = emit(l, out);
                let right = emit(r, out);
                out[at] = TreeNode::Split { feature: *f, bin: *b, left, right };
            }
        }
        at
    }
    let mut nodes = Vec::new();
    emit(&shape(0, &leaves, &children), &mut nodes);
    RegressionTree { nodes }
}
