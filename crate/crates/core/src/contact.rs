//! Trans-contact blocks, whole maps and per-chromosome block rows.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::genome::GenomeSpec;

/// Dense row-major matrix of contact counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Block {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(CoreError::Domain(format!(
                "block dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(CoreError::Geometry(format!(
                "{rows}x{cols} block given {} values",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `(row, col)` of the largest entry; first occurrence wins.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (k, v) in self.data.iter().enumerate() {
            if *v > self.data[best] {
                best = k;
            }
        }
        (best / self.cols, best % self.cols)
    }

    pub fn transpose(&self) -> Block {
        let mut t = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Block {
            rows: self.cols,
            cols: self.rows,
            data: t,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Block {
        Block {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    /// Block divided by its own maximum; all-zero blocks pass through.
    pub fn max_normalized(&self) -> Block {
        let m = self.max();
        if m > 0.0 {
            self.map(|v| v / m)
        } else {
            self.clone()
        }
    }
}

/// Upper trans-contact blocks of a contact map, one per pair `i < j`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContactMap {
    genome: GenomeSpec,
    blocks: Vec<Block>,
}

impl ContactMap {
    /// Blocks in [`GenomeSpec::pairs`] order.
    pub fn new(genome: GenomeSpec, blocks: Vec<Block>) -> Result<Self> {
        if blocks.len() != genome.num_pairs() {
            return Err(CoreError::Geometry(format!(
                "{} blocks for {} chromosome pairs",
                blocks.len(),
                genome.num_pairs()
            )));
        }
        for ((i, j), b) in genome.pairs().zip(&blocks) {
            let want = genome.block_shape(i, j)?;
            if b.shape() != want {
                return Err(CoreError::Geometry(format!(
                    "block ({i},{j}) has shape {:?}, expected {want:?}",
                    b.shape()
                )));
            }
            if let Some(v) = b.data().iter().find(|v| v.is_nan() || **v < 0.0) {
                return Err(CoreError::Domain(format!(
                    "block ({i},{j}) holds a negative or NaN count {v}"
                )));
            }
        }
        Ok(Self { genome, blocks })
    }

    pub fn genome(&self) -> &GenomeSpec {
        &self.genome
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Block `(i, j)` with `i < j`.
    pub fn block(&self, i: usize, j: usize) -> &Block {
        &self.blocks[self.genome.pair_index(i, j)]
    }

    /// Block `(i, j)` oriented so chromosome `i` indexes rows, for any `i != j`.
    pub fn oriented_block(&self, i: usize, j: usize) -> Block {
        if i < j {
            self.block(i, j).clone()
        } else {
            self.block(j, i).transpose()
        }
    }

    pub fn same_geometry(&self, other: &ContactMap) -> Result<()> {
        if self.genome != other.genome {
            return Err(CoreError::Geometry("contact maps built on different genomes".into()));
        }
        Ok(())
    }

    /// The `i`-th line of blocks.
    pub fn block_row(&self, i: usize) -> BlockRow {
        let l = self.genome.num_chromosomes();
        BlockRow {
            chrom: i,
            partners: (0..l).filter(|&j| j != i).collect(),
            blocks: (0..l).filter(|&j| j != i).map(|j| self.oriented_block(i, j)).collect(),
        }
    }

    /// Full symmetric `total_bins x total_bins` matrix with zero cis blocks.
    pub fn to_symmetric(&self) -> Vec<f64> {
        let n = self.genome.total_bins();
        let mut m = vec![0.0; n * n];
        for ((i, j), b) in self.genome.pairs().zip(&self.blocks) {
            let (oi, oj) = (self.genome.bin_offset(i), self.genome.bin_offset(j));
            for r in 0..b.rows() {
                for c in 0..b.cols() {
                    let v = b.get(r, c);
                    m[(oi + r) * n + oj + c] = v;
                    m[(oj + c) * n + oi + r] = v;
                }
            }
        }
        m
    }

    /// Reads the upper trans blocks back out of a full symmetric matrix.
    pub fn from_symmetric(genome: GenomeSpec, m: &[f64]) -> Result<Self> {
        let n = genome.total_bins();
        if m.len() != n * n {
            return Err(CoreError::Geometry(format!(
                "matrix has {} entries, genome needs {n}x{n}",
                m.len()
            )));
        }
        let blocks = genome
            .pairs()
            .map(|(i, j)| {
                let (oi, oj) = (genome.bin_offset(i), genome.bin_offset(j));
                let (rows, cols) = (genome.bins(i), genome.bins(j));
                let mut b = Block::zeros(rows, cols);
                for r in 0..rows {
                    for c in 0..cols {
                        b.set(r, c, m[(oi + r) * n + oj + c]);
                    }
                }
                b
            })
            .collect();
        Self::new(genome, blocks)
    }

    pub fn max_normalized(&self) -> ContactMap {
        ContactMap {
            genome: self.genome.clone(),
            blocks: self.blocks.iter().map(Block::max_normalized).collect(),
        }
    }
}

/// The blocks pairing chromosome `chrom` with every other chromosome, each
/// oriented so `chrom` indexes rows.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockRow {
    pub chrom: usize,
    /// Partner chromosome of each block, ascending.
    pub partners: Vec<usize>,
    pub blocks: Vec<Block>,
}

impl BlockRow {
    pub fn check_geometry(&self, genome: &GenomeSpec) -> Result<()> {
        let l = genome.num_chromosomes();
        if self.blocks.len() != l - 1 || self.partners.len() != l - 1 {
            return Err(CoreError::Geometry(format!(
                "block row of chromosome {} has {} blocks, expected {}",
                self.chrom,
                self.blocks.len(),
                l - 1
            )));
        }
        for (j, b) in self.partners.iter().zip(&self.blocks) {
            let want = genome.block_shape(self.chrom, *j)?;
            if b.shape() != want {
                return Err(CoreError::Geometry(format!(
                    "block ({},{j}) has shape {:?}, expected {want:?}",
                    self.chrom,
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    /// Row `r` of the horizontal concatenation of all blocks.
    pub fn concat_row(&self, r: usize) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.row(r).iter().copied()).collect()
    }

    pub fn rows(&self) -> usize {
        self.blocks.first().map_or(0, Block::rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ContactMap {
        let g = GenomeSpec::from_lengths(10, &[20, 30, 15]).unwrap();
        let blocks = g
            .pairs()
            .enumerate()
            .map(|(k, (i, j))| {
                let (r, c) = g.block_shape(i, j).unwrap();
                Block::new(r, c, (0..r * c).map(|v| (v + 10 * k) as f64).collect()).unwrap()
            })
            .collect();
        ContactMap::new(g, blocks).unwrap()
    }

    #[test]
    fn symmetric_round_trip() {
        let m = small();
        let full = m.to_symmetric();
        let n = m.genome().total_bins();
        for a in 0..n {
            for b in 0..n {
                assert_eq!(full[a * n + b], full[b * n + a]);
            }
        }
        let back = ContactMap::from_symmetric(m.genome().clone(), &full).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn block_row_orientation() {
        let m = small();
        let row = m.block_row(1);
        assert_eq!(row.partners, vec![0, 2]);
        assert_eq!(row.blocks[0], m.block(0, 1).transpose());
        assert_eq!(row.blocks[1], *m.block(1, 2));
        row.check_geometry(m.genome()).unwrap();
        assert!(row.blocks.iter().all(|b| b.rows() == 3));
    }

    #[test]
    fn rejects_bad_geometry_and_negatives() {
        let g = GenomeSpec::from_lengths(10, &[20, 30]).unwrap();
        assert!(ContactMap::new(g.clone(), vec![Block::zeros(3, 2)]).is_err());
        let neg = Block::new(2, 3, vec![0.0, 1.0, -1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(ContactMap::new(g.clone(), vec![neg]).is_err());
        assert!(ContactMap::new(g, vec![]).is_err());
        assert!(Block::new(0, 3, vec![]).is_err());
    }

    #[test]
    fn argmax_and_normalization() {
        let b = Block::new(2, 2, vec![1.0, 4.0, 2.0, 4.0]).unwrap();
        assert_eq!(b.argmax(), (0, 1));
        assert_eq!(b.max_normalized().data(), &[0.25, 1.0, 0.5, 1.0]);
        assert_eq!(Block::zeros(2, 2).max_normalized(), Block::zeros(2, 2));
    }
}
