//! `MGBM01` text checkpoints.
//!
//! ```text
//! MGBM01
//! features <n>
//! base_score <f64>
//! shrinkage <f64>
//! edges <feature> <count> <f64>...
//! trees <count>
//! tree <nodes>
//! S <feature> <bin> <left> <right>
//! L <value>
//! ```
//! Floats use Rust's shortest round-trip formatting, so a reload is exact.

use std::path::Path;

use super::{GbmModel, RegressionTree, TreeNode};
use crate::error::{Error, Result};

const HEADER: &str = "MGBM01";

impl GbmModel {
    pub fn to_checkpoint(&self) -> String {
        let mut s = format!("{HEADER}\nfeatures {}\nbase_score {:?}\nshrinkage {:?}\n", self.n_features, self.base_score, self.shrinkage);
        for (f, e) in self.bin_edges.iter().enumerate() {
            s.push_str(&format!("edges {f} {}", e.len()));
            for v in e {
                s.push_str(&format!(" {v:?}"));
            }
            s.push('\n');
        }
        s.push_str(&format!("trees {}\n", self.trees.len()));
        for t in &self.trees {
            s.push_str(&format!("tree {}\n", t.nodes.len()));
            for n in &t.nodes {
                match n {
                    TreeNode::Split { feature, bin, left, right } => s.push_str(&format!("S {feature} {bin} {left} {right}\n")),
                    TreeNode::Leaf { value } => s.push_str(&format!("L {value:?}\n")),
                }
            }
        }
        s
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.split_whitespace().collect::<Vec<_>>()));
        fn err(line: usize, m: &str) -> Error {
            Error::Parse { line, column: 1, message: format!("MGBM01 checkpoint: {m}") }
        }
        fn expect<'a>(lines: &mut impl Iterator<Item = (usize, Vec<&'a str>)>, want: &str) -> Result<(usize, Vec<&'a str>)> {
            let (ln, toks) = lines.next().ok_or_else(|| err(0, &format!("unexpected end, expected `{want}`")))?;
            if toks.first() != Some(&want) {
                return Err(err(ln, &format!("expected `{want}`")));
            }
            Ok((ln, toks))
        }

        fn num<T: std::str::FromStr>(toks: &[&str], k: usize, ln: usize) -> Result<T> {
            toks.get(k).and_then(|t| t.parse().ok()).ok_or_else(|| Error::Parse {
                line: ln,
                column: k + 1,
                message: "MGBM01 checkpoint: bad number".into(),
            })
        }
        expect(&mut lines, HEADER)?;
        let (ln, t) = expect(&mut lines, "features")?;
        let n_features: usize = num(&t, 1, ln)?;
        let (ln, t) = expect(&mut lines, "base_score")?;
        let base_score: f64 = num(&t, 1, ln)?;
        let (ln, t) = expect(&mut lines, "shrinkage")?;
        let shrinkage: f64 = num(&t, 1, ln)?;
        let mut bin_edges = Vec::with_capacity(n_features);
        for f in 0..n_features {
            let (ln, t) = expect(&mut lines, "edges")?;
            let count: usize = num(&t, 2, ln)?;
            if num::<usize>(&t, 1, ln)? != f || t.len() != 3 + count {
                return Err(err(ln, "malformed edges line"));
            }
            let e = (0..count).map(|k| num::<f64>(&t, 3 + k, ln)).collect::<Result<Vec<_>>>()?;
            if e.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(err(ln, "bin edges must increase"));
            }
            bin_edges.push(e);
        }
        let (ln, t) = expect(&mut lines, "trees")?;
        let n_trees: usize = num(&t, 1, ln)?;
        let n_bins: Vec<usize> = bin_edges.iter().map(|e| e.len() + 1).collect();
        let mut trees = Vec::with_capacity(n_trees.min(1 << 16));
        for _ in 0..n_trees {
            let (ln, t) = expect(&mut lines, "tree")?;
            let count: usize = num(&t, 1, ln)?;
            let mut nodes = Vec::with_capacity(count.min(1 << 16));
            for _ in 0..count {
                let (ln, t) = lines.next().ok_or_else(|| err(0, "unexpected end inside tree"))?;
                nodes.push(match t.first() {
                    Some(&"S") => TreeNode::Split { feature: num(&t, 1, ln)?, bin: num(&t, 2, ln)?, left: num(&t, 3, ln)?, right: num(&t, 4, ln)? },
                    Some(&"L") => TreeNode::Leaf { value: num(&t, 1, ln)? },
                    _ => return Err(err(ln, "expected `S` or `L` node")),
                });
            }
            let tree = RegressionTree { nodes };
            if !tree.validate(n_features, &n_bins) {
                return Err(err(ln, "tree is not a valid preorder layout"));
            }
            trees.push(tree);
        }
        if let Some((ln, _)) = lines.find(|(_, t)| !t.is_empty()) {
            return Err(err(ln, "trailing content"));
        }
        let mut split_counts = vec![0; n_features];
        for t in &trees {
            for f in t.split_features() {
                split_counts[f] += 1;
            }
        }
        Ok(GbmModel { n_features, base_score, shrinkage, bin_edges, trees, split_counts })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::step_fixture;
    use super::super::{fit, GbmParams};
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let (x, y) = step_fixture(80, 4);
        let y: Vec<f64> = y.iter().zip(&x).map(|(v, r)| v + r[1] / 3.0).collect();
        let m = fit(&x, &y, &GbmParams { num_iterations: 12, ..Default::default() }).unwrap();
        let text = m.to_checkpoint();
        assert!(text.starts_with("MGBM01\n"));
        let back = GbmModel::from_checkpoint(&text).unwrap();
        assert_eq!(back, m);
        let (p, q) = (m.predict(&x).unwrap(), back.predict(&x).unwrap());
        assert!(p.iter().zip(&q).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back.to_checkpoint(), text);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mgbm");
        m.save(&path).unwrap();
        assert_eq!(GbmModel::load(&path).unwrap(), m);
    }

    #[test]
    fn rejects_corruption() {
        let (x, y) = step_fixture(40, 5);
        let text = fit(&x, &y, &GbmParams { num_iterations: 3, ..Default::default() }).unwrap().to_checkpoint();
        assert!(GbmModel::from_checkpoint(&text.replacen("MGBM01", "MGBM02", 1)).is_err());
        assert!(GbmModel::from_checkpoint(&text[..text.len() / 2]).is_err());
        assert!(GbmModel::from_checkpoint(&format!("{text}L 1.0\n")).is_err());
        let bad_feature = text.replacen("S 0 ", "S 9 ", 1);
        assert!(GbmModel::from_checkpoint(&bad_feature).is_err());
    }
}
