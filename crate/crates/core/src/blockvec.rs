//! Dense real vectors partitioned into named blocks.

use std::sync::Arc;

use crate::error::{BamError, Result};

/// A dense vector split into an ordered list of named, non-empty blocks.
///
/// Values are never mutated in place: every update builds a new vector, so a
/// `BlockVector` can be shared freely across threads. All entries are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockVector {
    ids: Arc<[String]>,
    blocks: Vec<Vec<f64>>,
}

impl BlockVector {
    pub fn new<S: Into<String>>(blocks: Vec<(S, Vec<f64>)>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(BamError::InvalidInput("a block vector needs at least one block".into()));
        }
        let mut ids = Vec::with_capacity(blocks.len());
        let mut values = Vec::with_capacity(blocks.len());
        for (id, block) in blocks {
            let id = id.into();
            if ids.contains(&id) {
                return Err(BamError::InvalidInput(format!("duplicate block id '{id}'")));
            }
            if block.is_empty() {
                return Err(BamError::InvalidInput(format!("block '{id}' is empty")));
            }
            check_finite(&id, &block)?;
            ids.push(id);
            values.push(block);
        }
        Ok(Self { ids: ids.into(), blocks: values })
    }

    /// Zero vector with the given `(id, dimension)` layout.
    pub fn zeros<S: AsRef<str>>(layout: &[(S, usize)]) -> Result<Self> {
        Self::new(
            layout
                .iter()
                .map(|(id, dim)| (id.as_ref().to_string(), vec![0.0; *dim]))
                .collect(),
        )
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn total_dim(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn block(&self, i: usize) -> &[f64] {
        &self.blocks[i]
    }

    pub fn blocks(&self) -> impl Iterator<Item = &[f64]> {
        self.blocks.iter().map(Vec::as_slice)
    }

    pub fn block_dims(&self) -> Vec<usize> {
        self.blocks.iter().map(Vec::len).collect()
    }

    pub fn same_structure(&self, other: &BlockVector) -> bool {
        self.ids == other.ids
            && self.blocks.len() == other.blocks.len()
            && self.blocks.iter().zip(&other.blocks).all(|(a, b)| a.len() == b.len())
    }

    /// Returns a copy with block `i` replaced.
    pub fn with_block(&self, i: usize, values: Vec<f64>) -> Result<Self> {
        if i >= self.blocks.len() {
            return Err(BamError::Shape(format!(
                "block index {i} out of range for {} blocks",
                self.blocks.len()
            )));
        }
        if values.len() != self.blocks[i].len() {
            return Err(BamError::Shape(format!(
                "block '{}' has dimension {}, got {}",
                self.ids[i],
                self.blocks[i].len(),
                values.len()
            )));
        }
        check_finite(&self.ids[i], &values)?;
        let mut blocks = self.blocks.clone();
        blocks[i] = values;
        Ok(Self { ids: Arc::clone(&self.ids), blocks })
    }

    /// Concatenation of all blocks in order.
    pub fn flatten(&self) -> Vec<f64> {
        self.blocks.iter().flatten().copied().collect()
    }

    /// Inverse of [`flatten`](Self::flatten) using this vector's layout.
    pub fn from_flat_like(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.total_dim() {
            return Err(BamError::Shape(format!(
                "expected {} entries, got {}",
                self.total_dim(),
                flat.len()
            )));
        }
        let mut offset = 0;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (id, b) in self.ids.iter().zip(&self.blocks) {
            let chunk = flat[offset..offset + b.len()].to_vec();
            check_finite(id, &chunk)?;
            offset += b.len();
            blocks.push(chunk);
        }
        Ok(Self { ids: Arc::clone(&self.ids), blocks })
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks.iter().flatten().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

fn check_finite(id: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(j) => Err(BamError::InvalidInput(format!(
            "non-finite entry {} at index {j} of block '{id}'",
            values[j]
        ))),
        None => Ok(()),
    }
}

/// Squared Euclidean norm over all blocks.
pub fn norm_sq(v: &BlockVector) -> f64 {
    v.blocks.iter().map(|b| slice_norm_sq(b)).sum()
}

/// `a*u + b*v`, blockwise.
pub fn combine(a: f64, u: &BlockVector, b: f64, v: &BlockVector) -> Result<BlockVector> {
    if !u.same_structure(v) {
        return Err(BamError::Shape(format!(
            "cannot combine vectors with layouts {:?}/{:?} and {:?}/{:?}",
            u.ids,
            u.block_dims(),
            v.ids,
            v.block_dims()
        )));
    }
    let blocks = u
        .blocks
        .iter()
        .zip(&v.blocks)
        .map(|(ub, vb)| ub.iter().zip(vb).map(|(x, y)| a * x + b * y).collect::<Vec<_>>())
        .collect::<Vec<_>>();
    for (id, blk) in u.ids.iter().zip(&blocks) {
        check_finite(id, blk)?;
    }
    Ok(BlockVector { ids: Arc::clone(&u.ids), blocks })
}

/// Squared distance `|u - v|^2`.
pub fn dist_sq(u: &BlockVector, v: &BlockVector) -> Result<f64> {
    if !u.same_structure(v) {
        return Err(BamError::Shape("distance between vectors of different layouts".into()));
    }
    Ok(u.blocks.iter().zip(&v.blocks).map(|(a, b)| slice_dist_sq(a, b)).sum())
}

pub(crate) fn slice_norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

pub(crate) fn slice_dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(v: Vec<f64>) -> BlockVector {
        BlockVector::new(vec![("x", v)]).unwrap()
    }

    #[test]
    fn norm_sq_examples() {
        assert_eq!(norm_sq(&single(vec![0.0, 0.0, 0.0])), 0.0);
        let yz = BlockVector::new(vec![("y", vec![3.0]), ("z", vec![4.0])]).unwrap();
        assert_eq!(norm_sq(&yz), 25.0);
        assert_eq!(norm_sq(&single(vec![1.0; 10])), 10.0);
    }

    #[test]
    fn combine_examples() {
        let x = single(vec![1.5, -2.0]);
        let junk = single(vec![7.0, 9.0]);
        assert_eq!(combine(1.0, &x, 0.0, &junk).unwrap(), x);

        let u = single(vec![1.0, 2.0]);
        assert_eq!(combine(1.0, &u, -1.0, &u).unwrap().flatten(), vec![0.0, 0.0]);

        let e1 = single(vec![1.0, 0.0]);
        let e2 = single(vec![0.0, 1.0]);
        assert_eq!(combine(2.0, &e1, 3.0, &e2).unwrap().flatten(), vec![2.0, 3.0]);
    }

    #[test]
    fn combine_rejects_mismatched_layouts() {
        let a = single(vec![1.0, 2.0]);
        let b = BlockVector::new(vec![("x", vec![1.0]), ("y", vec![2.0])]).unwrap();
        assert!(matches!(combine(1.0, &a, 1.0, &b), Err(BamError::Shape(_))));
    }

    #[test]
    fn construction_rejects_bad_input() {
        assert!(matches!(
            BlockVector::new(vec![("x", vec![f64::NAN])]),
            Err(BamError::InvalidInput(_))
        ));
        assert!(matches!(
            BlockVector::new(vec![("x", vec![f64::INFINITY])]),
            Err(BamError::InvalidInput(_))
        ));
        assert!(BlockVector::new(vec![("x", Vec::<f64>::new())]).is_err());
        assert!(BlockVector::new(vec![("x", vec![1.0]), ("x", vec![2.0])]).is_err());
        assert!(single(vec![1.0]).with_block(0, vec![f64::NAN]).is_err());
        assert!(single(vec![1.0]).with_block(0, vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn combine_overflow_is_rejected() {
        let big = single(vec![f64::MAX]);
        assert!(combine(1.0, &big, 1.0, &big).is_err());
    }

    proptest! {
        #[test]
        fn self_cancellation(v in prop::collection::vec(-1e6f64..1e6, 1..20)) {
            let u = single(v);
            prop_assert_eq!(norm_sq(&combine(1.0, &u, -1.0, &u).unwrap()), 0.0);
        }

        #[test]
        fn norm_independent_of_split(v in prop::collection::vec(-1e3f64..1e3, 2..20), cut in 1usize..19) {
            let cut = cut.min(v.len() - 1);
            let whole = single(v.clone());
            let split = BlockVector::new(vec![("a", v[..cut].to_vec()), ("b", v[cut..].to_vec())]).unwrap();
            let (n1, n2) = (norm_sq(&whole), norm_sq(&split));
            prop_assert!((n1 - n2).abs() <= 1e-9 * (1.0 + n1));
        }

        #[test]
        fn combine_is_entrywise(
            pairs in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..20),
            a in -10.0f64..10.0,
            b in -10.0f64..10.0,
        ) {
            let (u, v): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let w = combine(a, &single(u.clone()), b, &single(v.clone())).unwrap();
            for (i, wi) in w.flatten().into_iter().enumerate() {
                prop_assert_eq!(wi, a * u[i] + b * v[i]);
            }
        }
    }
}
