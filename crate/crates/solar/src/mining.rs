//! Offline hard-negative mining: exact top-k cosine retrieval per feature
//! space, union across spaces with provenance, and per-step sampling.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SolarError};
use crate::numerics::pairwise_cosine;
use crate::tensor::Tensor;

/// One embedding table per retrieval view; query row i and corpus row i both
/// belong to sample i.
pub struct FeatureSpace {
    pub name: String,
    pub queries: Tensor,
    pub corpus: Tensor,
}

impl FeatureSpace {
    pub fn symmetric(name: impl Into<String>, table: Tensor) -> Self {
        let name = name.into();
        FeatureSpace { name, queries: table.clone(), corpus: table }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MinedNegative {
    pub id: String,
    pub spaces: Vec<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct HardNegativeIndex {
    /// anchor id -> union of hard negatives with retrieval provenance
    pub entries: BTreeMap<String, Vec<MinedNegative>>,
}

/// Exact top-k by cosine similarity; ties broken toward the lower corpus
/// index. When `exclude_self` is set, corpus row i is skipped for query i.
pub fn topk_neighbors(
    queries: &Tensor,
    corpus: &Tensor,
    k: usize,
    exclude_self: bool,
) -> Result<Vec<Vec<usize>>> {
    let c = corpus.rows();
    if c <= k {
        return Err(SolarError::Config(format!(
            "top-k needs corpus larger than k: corpus {c}, k {k}"
        )));
    }
    let sims = pairwise_cosine(queries, corpus)?;
    let mut out = Vec::with_capacity(queries.rows());
    for i in 0..queries.rows() {
        let row = &sims.data()[i * c..(i + 1) * c];
        let mut ids: Vec<usize> =
            (0..c).filter(|&j| !(exclude_self && j == i)).collect();
        ids.sort_by(|&a, &b| {
            row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b))
        });
        ids.truncate(k);
        out.push(ids);
    }
    Ok(out)
}

/// Union of per-space exact top-k retrievals.
pub fn build_index(ids: &[String], spaces: &[FeatureSpace], k: usize) -> Result<HardNegativeIndex> {
    let n = ids.len();
    let mut entries: BTreeMap<String, Vec<MinedNegative>> =
        ids.iter().map(|id| (id.clone(), Vec::new())).collect();
    for space in spaces {
        for (label, t) in [("queries", &space.queries), ("corpus", &space.corpus)] {
            if t.rows() != n {
                return Err(SolarError::Config(format!(
                    "feature space {} {} covers {} samples, dataset has {}",
                    space.name,
                    label,
                    t.rows(),
                    n
                )));
            }
        }
        let topk = topk_neighbors(&space.queries, &space.corpus, k, true)?;
        for (i, neighbors) in topk.iter().enumerate() {
            let set = entries.get_mut(&ids[i]).unwrap();
            for &j in neighbors {
                match set.iter_mut().find(|m| m.id == ids[j]) {
                    Some(m) => m.spaces.push(space.name.clone()),
                    None => set.push(MinedNegative {
                        id: ids[j].clone(),
                        spaces: vec![space.name.clone()],
                    }),
                }
            }
        }
    }
    Ok(HardNegativeIndex { entries })
}

impl HardNegativeIndex {
    /// Draw up to n distinct negatives for one anchor; smaller sets are
    /// returned whole, missing/empty sets give an empty draw.
    pub fn sample_negatives<R: Rng>(&self, anchor_id: &str, n: usize, rng: &mut R) -> Vec<String> {
        let set = match self.entries.get(anchor_id) {
            Some(s) if !s.is_empty() => s,
            _ => return Vec::new(),
        };
        if set.len() <= n {
            return set.iter().map(|m| m.id.clone()).collect();
        }
        // partial Fisher-Yates for n draws without replacement
        let mut pool: Vec<usize> = (0..set.len()).collect();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
            out.push(set[pool[i]].id.clone());
        }
        out
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for (anchor, negs) in &self.entries {
            let line = serde_json::json!({ "anchor_id": anchor, "negatives": negs });
            writeln!(f, "{line}")?;
        }
        Ok(())
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Line {
            anchor_id: String,
            negatives: Vec<MinedNegative>,
        }
        let f = std::fs::File::open(path)
            .map_err(|e| SolarError::Load(format!("{}: {}", path.display(), e)))?;
        let mut entries = BTreeMap::new();
        for line in BufReader::new(f).lines() {
            let l: Line = serde_json::from_str(&line?)?;
            entries.insert(l.anchor_id, l.negatives);
        }
        Ok(HardNegativeIndex { entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, stream};

    fn randn(seed: u64, m: usize, d: usize) -> Tensor {
        let mut rng = stream(seed, 0xabc);
        Tensor::new(vec![m, d], (0..m * d).map(|_| normal(&mut rng)).collect())
    }

    #[test]
    fn duplicate_of_query_ranks_first() {
        let q = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]);
        let corpus = Tensor::from_rows(&[
            vec![3.0, -1.0, 0.5],
            vec![2.0, 4.0, 6.0], // same direction as the query
            vec![0.0, 1.0, -1.0],
        ]);
        let top = topk_neighbors(&q, &corpus, 2, false).unwrap();
        assert_eq!(top[0][0], 1);
    }

    #[test]
    fn k_equals_c_minus_one_returns_all_non_self() {
        let t = randn(1, 5, 3);
        let top = topk_neighbors(&t, &t, 4, true).unwrap();
        for (i, ids) in top.iter().enumerate() {
            assert_eq!(ids.len(), 4);
            assert!(!ids.contains(&i));
        }
    }

    #[test]
    fn corpus_not_larger_than_k_is_error() {
        let t = randn(2, 4, 3);
        assert!(topk_neighbors(&t, &t, 4, false).is_err());
    }

    #[test]
    fn matches_full_sort_oracle() {
        let q = randn(3, 50, 8);
        let c = randn(4, 50, 8);
        let k = 10;
        let ours = topk_neighbors(&q, &c, k, false).unwrap();
        for i in 0..q.rows() {
            let sims: Vec<f64> = (0..c.rows())
                .map(|j| crate::numerics::cosine(q.row(i), c.row(j)).unwrap())
                .collect();
            let mut order: Vec<usize> = (0..c.rows()).collect();
            order.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap().then(a.cmp(&b)));
            assert_eq!(ours[i], order[..k].to_vec(), "query {i}");
        }
    }

    #[test]
    fn union_and_provenance() {
        let ids: Vec<String> = (0..6).map(|i| format!("s{i}")).collect();
        let a = randn(5, 6, 4);
        let b = randn(6, 6, 4);
        let idx = build_index(
            &ids,
            &[
                FeatureSpace::symmetric("a", a.clone()),
                FeatureSpace::symmetric("b", b),
            ],
            2,
        )
        .unwrap();
        for (anchor, negs) in &idx.entries {
            assert!(negs.len() <= 4);
            assert!(negs.iter().all(|m| m.id != *anchor), "self-negative for {anchor}");
            let mut seen = std::collections::HashSet::new();
            for m in negs {
                assert!(seen.insert(&m.id), "duplicate negative");
                assert!(!m.spaces.is_empty());
            }
        }
        // single space reproduces its own top-k
        let only = build_index(&ids, &[FeatureSpace::symmetric("a", a.clone())], 2).unwrap();
        let top = topk_neighbors(&a, &a, 2, true).unwrap();
        for (i, id) in ids.iter().enumerate() {
            let got: Vec<&String> = only.entries[id].iter().map(|m| &m.id).collect();
            let expect: Vec<String> = top[i].iter().map(|&j| ids[j].clone()).collect();
            assert_eq!(got, expect.iter().collect::<Vec<_>>());
        }
    }

    #[test]
    fn coverage_mismatch_names_space() {
        let ids: Vec<String> = (0..6).map(|i| format!("s{i}")).collect();
        let short = randn(7, 5, 4);
        let err = build_index(&ids, &[FeatureSpace::symmetric("teacher-text", short)], 2)
            .unwrap_err();
        assert!(err.to_string().contains("teacher-text"), "{err}");
    }

    #[test]
    fn sampling_rules() {
        let mut idx = HardNegativeIndex::default();
        idx.entries.insert(
            "a".into(),
            vec![MinedNegative { id: "b".into(), spaces: vec!["x".into()] }],
        );
        idx.entries.insert(
            "c".into(),
            (0..5)
                .map(|i| MinedNegative { id: format!("n{i}"), spaces: vec!["x".into()] })
                .collect(),
        );
        let mut rng = stream(9, 9);
        assert_eq!(idx.sample_negatives("a", 2, &mut rng), vec!["b".to_string()]);
        assert!(idx.sample_negatives("missing", 2, &mut rng).is_empty());
        let draw = idx.sample_negatives("c", 2, &mut rng);
        assert_eq!(draw.len(), 2);
        assert_ne!(draw[0], draw[1]);
        let again = idx.sample_negatives("c", 2, &mut stream(10, 10));
        let again2 = idx.sample_negatives("c", 2, &mut stream(10, 10));
        assert_eq!(again, again2);
    }

    #[test]
    fn jsonl_round_trip() {
        let ids: Vec<String> = (0..6).map(|i| format!("s{i}")).collect();
        let idx = build_index(&ids, &[FeatureSpace::symmetric("a", randn(11, 6, 4))], 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.jsonl");
        idx.save_jsonl(&path).unwrap();
        let back = HardNegativeIndex::load_jsonl(&path).unwrap();
        assert_eq!(serde_json::to_string(&idx).unwrap(), serde_json::to_string(&back).unwrap());
    }
}
