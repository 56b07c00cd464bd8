//! Contact-map persistence, iterative correction (ICE) and synthetic
//! reference maps.
//!
//! A map is stored as a directory holding one headerless tab-separated
//! matrix per upper trans block (`block_<i>_<j>.tsv`) and a `map.json`
//! sidecar describing the geometry and provenance.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::contact::{Block, ContactMap};
use crate::error::{CoreError, Result};
use crate::genome::GenomeSpec;
use crate::rng::seeded;
use crate::simulator::simulate_map;

pub const SIDECAR: &str = "map.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceMode {
    Raw,
    Normalized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub i: usize,
    pub j: usize,
    pub file: String,
    pub rows: usize,
    pub cols: usize,
}

/// Sidecar metadata of a stored map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapMeta {
    pub genome_hash: String,
    pub resolution_bp: u64,
    pub blocks: Vec<BlockEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_ref: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<ReferenceMode>,
}

impl MapMeta {
    pub fn for_map(map: &ContactMap) -> Self {
        let g = map.genome();
        Self {
            genome_hash: g.hash(),
            resolution_bp: g.resolution(),
            blocks: g
                .pairs()
                .map(|(i, j)| BlockEntry {
                    i,
                    j,
                    file: format!("block_{i}_{j}.tsv"),
                    rows: g.bins(i),
                    cols: g.bins(j),
                })
                .collect(),
            theta_ref: None,
            seed: None,
            mode: None,
        }
    }
}

fn load_err(path: &Path, detail: impl Into<String>) -> CoreError {
    CoreError::Load {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn block_tsv(b: &Block) -> String {
    let mut s = String::with_capacity(b.data().len() * 12);
    for r in 0..b.rows() {
        for (c, v) in b.row(r).iter().enumerate() {
            if c > 0 {
                s.push('\t');
            }
            // `Display` for f64 is the shortest exact round-trip form.
            write!(s, "{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// Writes `map` into directory `dir` (created if needed).
pub fn save_map(dir: &Path, map: &ContactMap, meta: &MapMeta) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (entry, b) in meta.blocks.iter().zip(map.blocks()) {
        fs::write(dir.join(&entry.file), block_tsv(b))?;
    }
    fs::write(dir.join(SIDECAR), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

fn parse_block(path: &Path, text: &str, entry: &BlockEntry) -> Result<Block> {
    let (i, j) = (entry.i, entry.j);
    if text.trim().is_empty() {
        return Err(load_err(path, format!("block ({i},{j}) file is empty")));
    }
    let mut data = Vec::with_capacity(entry.rows * entry.cols);
    let mut rows = 0;
    for (r, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut cols = 0;
        for (c, cell) in line.split('\t').enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                load_err(
                    path,
                    format!("block ({i},{j}) cell ({r},{c}) is not a number: {cell:?}"),
                )
            })?;
            if v.is_nan() || v < 0.0 {
                return Err(load_err(
                    path,
                    format!("block ({i},{j}) cell ({r},{c}) has negative count {v}"),
                ));
            }
            data.push(v);
            cols += 1;
        }
        if cols != entry.cols {
            return Err(load_err(
                path,
                format!("block ({i},{j}) row {r} has {cols} columns, expected {}", entry.cols),
            ));
        }
        rows += 1;
    }
    if rows != entry.rows {
        return Err(load_err(
            path,
            format!("block ({i},{j}) has {rows} rows, expected {}", entry.rows),
        ));
    }
    Block::new(entry.rows, entry.cols, data)
}

/// Reads a map stored by [`save_map`], checking it against `genome`.
pub fn load_map(dir: &Path, genome: &GenomeSpec) -> Result<(ContactMap, MapMeta)> {
    let side = dir.join(SIDECAR);
    let text = fs::read_to_string(&side).map_err(|e| load_err(&side, e.to_string()))?;
    if text.trim().is_empty() {
        return Err(load_err(&side, "empty sidecar"));
    }
    let meta: MapMeta = serde_json::from_str(&text).map_err(|e| load_err(&side, e.to_string()))?;
    if meta.genome_hash != genome.hash() {
        return Err(load_err(&side, "genome hash does not match the supplied genome spec"));
    }
    let pairs: Vec<_> = genome.pairs().collect();
    if meta.blocks.len() != pairs.len() {
        return Err(load_err(
            &side,
            format!("{} blocks listed, genome has {} pairs", meta.blocks.len(), pairs.len()),
        ));
    }
    let mut blocks = Vec::with_capacity(pairs.len());
    for (entry, (i, j)) in meta.blocks.iter().zip(pairs) {
        let (rows, cols) = genome.block_shape(i, j)?;
        if (entry.i, entry.j) != (i, j) || (entry.rows, entry.cols) != (rows, cols) {
            return Err(load_err(
                &side,
                format!(
                    "block ({i},{j}) expected with shape ({rows},{cols}), sidecar lists ({},{}) with shape ({},{})",
                    entry.i, entry.j, entry.rows, entry.cols
                ),
            ));
        }
        let path: PathBuf = dir.join(&entry.file);
        let text = fs::read_to_string(&path).map_err(|e| load_err(&path, e.to_string()))?;
        blocks.push(parse_block(&path, &text, entry)?);
    }
    Ok((ContactMap::new(genome.clone(), blocks)?, meta))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IceOptions {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for IceOptions {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IceResult {
    /// Normalized `n x n` matrix, row-major.
    pub matrix: Vec<f64>,
    /// Cumulative per-bin scaling, `out_ij = in_ij * bias_i * bias_j`.
    pub bias: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Rows that are entirely zero; left untouched.
    pub zero_rows: Vec<usize>,
    /// Largest `|row sum - 1|` over non-zero rows at exit.
    pub max_deviation: f64,
}

/// Iterative correction of a symmetric non-negative matrix towards unit
/// row and column sums.
///
/// Each sweep rescales `m_ij <- m_ij / sqrt(s_i s_j)` with `s` the current
/// row sums, which keeps the matrix symmetric at every step.
pub fn ice_normalize(m: &[f64], n: usize, opts: IceOptions) -> Result<IceResult> {
    if m.len() != n * n {
        return Err(CoreError::Geometry(format!(
            "ICE needs a square matrix: {} entries for n = {n}",
            m.len()
        )));
    }
    for a in 0..n {
        for b in a + 1..n {
            let (x, y) = (m[a * n + b], m[b * n + a]);
            if (x - y).abs() > 1e-9 * x.abs().max(y.abs()).max(1.0) {
                return Err(CoreError::Domain(format!(
                    "ICE input is not symmetric at ({a},{b}): {x} vs {y}"
                )));
            }
        }
    }
    if let Some(v) = m.iter().find(|v| v.is_nan() || **v < 0.0) {
        return Err(CoreError::Domain(format!("ICE input has negative entry {v}")));
    }
    let mut w = m.to_vec();
    let mut bias = vec![1.0; n];
    let row_sums = |w: &[f64]| -> Vec<f64> { w.chunks_exact(n).map(|r| r.iter().sum()).collect() };
    let zero_rows: Vec<usize> = row_sums(&w)
        .iter()
        .enumerate()
        .filter(|(_, s)| **s == 0.0)
        .map(|(k, _)| k)
        .collect();
    let mut iterations = 0;
    let mut converged = false;
    let mut max_deviation;
    loop {
        let s = row_sums(&w);
        max_deviation = s
            .iter()
            .filter(|v| **v > 0.0)
            .map(|v| (v - 1.0).abs())
            .fold(0.0, f64::max);
        if max_deviation <= opts.tol {
            converged = true;
            break;
        }
        if iterations == opts.max_iters {
            break;
        }
        let d: Vec<f64> = s.iter().map(|v| if *v > 0.0 { 1.0 / v.sqrt() } else { 1.0 }).collect();
        for a in 0..n {
            for b in 0..n {
                w[a * n + b] *= d[a] * d[b];
            }
        }
        bias.iter_mut().zip(&d).for_each(|(b, x)| *b *= x);
        iterations += 1;
    }
    if !zero_rows.is_empty() {
        log::info!("ICE: {} all-zero rows left unnormalized", zero_rows.len());
    }
    if !converged {
        log::warn!("ICE stopped after {iterations} sweeps with row-sum deviation {max_deviation:.3e}");
    }
    Ok(IceResult {
        matrix: w,
        bias,
        iterations,
        converged,
        zero_rows,
        max_deviation,
    })
}

/// ICE over the symmetrized trans-only matrix of `map`.
pub fn normalize_map(map: &ContactMap, opts: IceOptions) -> Result<(ContactMap, IceResult)> {
    let n = map.genome().total_bins();
    let res = ice_normalize(&map.to_symmetric(), n, opts)?;
    let out = ContactMap::from_symmetric(map.genome().clone(), &res.matrix)?;
    Ok((out, res))
}

/// Synthetic reference map simulated from `theta_ref` with a fixed seed.
pub fn make_reference(
    genome: &GenomeSpec,
    theta_ref: &[f64],
    seed: u64,
    mode: ReferenceMode,
) -> Result<(ContactMap, MapMeta)> {
    let raw = simulate_map(genome, theta_ref, &mut seeded(seed))?;
    let map = match mode {
        ReferenceMode::Raw => raw,
        ReferenceMode::Normalized => normalize_map(&raw, IceOptions::default())?.0,
    };
    let mut meta = MapMeta::for_map(&map);
    meta.theta_ref = Some(theta_ref.to_vec());
    meta.seed = Some(seed);
    meta.mode = Some(mode);
    Ok((map, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_sym(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = seeded(seed);
        let mut m = vec![0.0; n * n];
        for a in 0..n {
            for b in a..n {
                let v = rng.random_range(0.1..5.0);
                m[a * n + b] = v;
                m[b * n + a] = v;
            }
        }
        m
    }

    #[test]
    fn doubly_stochastic_fixed_point() {
        let m = vec![0.5, 0.25, 0.25, 0.25, 0.5, 0.25, 0.25, 0.25, 0.5];
        let r = ice_normalize(&m, 3, IceOptions::default()).unwrap();
        assert!(r.converged);
        for (a, b) in r.matrix.iter().zip(&m) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_by_two_single_scaling() {
        let r = ice_normalize(&[0.0, 2.0, 2.0, 0.0], 2, IceOptions::default()).unwrap();
        for (a, b) in r.matrix.iter().zip([0.0, 1.0, 1.0, 0.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(r.iterations, 1);
    }

    #[test]
    fn random_positive_converges() {
        let n = 10;
        let r = ice_normalize(&random_sym(n, 4), n, IceOptions::default()).unwrap();
        assert!(r.converged);
        for row in r.matrix.chunks_exact(n) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn zero_rows_preserved() {
        let mut m = random_sym(5, 6);
        for k in 0..5 {
            m[2 * 5 + k] = 0.0;
            m[k * 5 + 2] = 0.0;
        }
        let r = ice_normalize(&m, 5, IceOptions::default()).unwrap();
        assert_eq!(r.zero_rows, vec![2]);
        for k in 0..5 {
            assert_eq!(r.matrix[2 * 5 + k], 0.0);
        }
        assert!(r.converged);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ice_normalize(&[1.0, 2.0, 3.0], 2, IceOptions::default()).is_err());
        assert!(ice_normalize(&[1.0, 2.0, 2.1, 1.0], 2, IceOptions::default()).is_err());
        assert!(ice_normalize(&[1.0, -2.0, -2.0, 1.0], 2, IceOptions::default()).is_err());
    }
}
