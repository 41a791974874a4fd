//! Blocked matrix multiplication as a task graph: one task per result block
//! `C_ij = sum_k A_ik * B_kj`, then an assemble task that checksums `C`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use sha2::{Digest, Sha256};

use super::agent::TaskRegistry;
use super::graph::{Matrix, ResultMap, TaskGraph, TaskInput, TaskSpec, TaskValue};

pub const BLOCK_KIND: &str = "matmul.block";
pub const ASSEMBLE_KIND: &str = "matmul.assemble";
pub const ASSEMBLE_ID: &str = "assemble";

pub struct MatmulWorkload {
    pub graph: TaskGraph,
    pub a: Matrix,
    pub b: Matrix,
    pub blocks: usize,
    pub block_size: usize,
}

pub fn random_matrix(n: usize, rng: &mut impl Rng) -> Matrix {
    Matrix {
        rows: n,
        cols: n,
        data: (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

pub fn block_id(i: usize, j: usize) -> String {
    format!("C_{i}_{j}")
}

/// `m` blocks per dimension of size `b`; `A` and `B` are `(m*b) x (m*b)`
/// and drawn from `seed`. The graph has `m*m + 1` tasks.
pub fn blocked_matmul_graph(m: usize, b: usize, seed: u64) -> MatmulWorkload {
    assert!(m >= 1 && b >= 1, "blocks and block size must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = m * b;
    let a = random_matrix(n, &mut rng);
    let bm = random_matrix(n, &mut rng);
    let a_blocks: Vec<Vec<Arc<TaskValue>>> = (0..m)
        .map(|i| (0..m).map(|k| Arc::new(TaskValue::Matrix(a.block(i, k, b)))).collect())
        .collect();
    let b_blocks: Vec<Vec<Arc<TaskValue>>> = (0..m)
        .map(|k| (0..m).map(|j| Arc::new(TaskValue::Matrix(bm.block(k, j, b)))).collect())
        .collect();

    let mut graph = TaskGraph::new();
    for (i, row) in a_blocks.iter().enumerate() {
        for j in 0..m {
            let inputs = row
                .iter()
                .map(|blk| TaskInput::Literal(blk.clone()))
                .chain(b_blocks.iter().map(|col| TaskInput::Literal(col[j].clone())))
                .collect();
            graph.add(TaskSpec::new(block_id(i, j), BLOCK_KIND, inputs));
        }
    }
    let refs = (0..m)
        .flat_map(|i| (0..m).map(move |j| TaskInput::Output(block_id(i, j))))
        .collect();
    graph.add(TaskSpec::new(ASSEMBLE_ID, ASSEMBLE_KIND, refs));
    MatmulWorkload {
        graph,
        a,
        b: bm,
        blocks: m,
        block_size: b,
    }
}

/// Reference triple loop.
pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let mut c = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut s = 0.0;
            for k in 0..a.cols {
                s += a.get(i, k) * b.get(k, j);
            }
            c.set(i, j, s);
        }
    }
    c
}

/// SHA-256 over the row-major IEEE-754 bit patterns.
pub fn checksum(m: &Matrix) -> String {
    let mut h = Sha256::new();
    h.update((m.rows as u64).to_le_bytes());
    h.update((m.cols as u64).to_le_bytes());
    for v in &m.data {
        h.update(v.to_bits().to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn matrices(inputs: &[Arc<TaskValue>]) -> Result<Vec<&Matrix>, String> {
    inputs
        .iter()
        .map(|v| v.as_matrix().ok_or_else(|| "expected matrix input".to_string()))
        .collect()
}

fn block_task(inputs: &[Arc<TaskValue>]) -> Result<TaskValue, String> {
    let ms = matrices(inputs)?;
    if ms.is_empty() || ms.len() % 2 != 0 {
        return Err("block task needs 2m matrices".into());
    }
    let m = ms.len() / 2;
    let (a_row, b_col) = ms.split_at(m);
    let mut c = Matrix::zeros(a_row[0].rows, b_col[0].cols);
    for k in 0..m {
        c.mul_add(a_row[k], b_col[k]);
    }
    Ok(TaskValue::Matrix(c))
}

/// Places row-major blocks into the full product.
pub fn assemble(blocks: &[&Matrix]) -> Result<Matrix, String> {
    let m = (blocks.len() as f64).sqrt().round() as usize;
    if m * m != blocks.len() || m == 0 {
        return Err(format!("{} blocks do not form a square", blocks.len()));
    }
    let size = blocks[0].rows;
    let mut c = Matrix::zeros(m * size, m * size);
    for (idx, blk) in blocks.iter().enumerate() {
        c.put_block(idx / m, idx % m, blk);
    }
    Ok(c)
}

fn assemble_task(inputs: &[Arc<TaskValue>]) -> Result<TaskValue, String> {
    let c = assemble(&matrices(inputs)?)?;
    Ok(TaskValue::Json(json!({
        "checksum": checksum(&c),
        "rows": c.rows,
        "cols": c.cols,
    })))
}

pub fn register(r: &mut TaskRegistry) {
    r.register(BLOCK_KIND, Arc::new(block_task));
    r.register(ASSEMBLE_KIND, Arc::new(assemble_task));
}

/// The full product, rebuilt from the block results of a finished run.
pub fn product_from_results(results: &ResultMap, m: usize) -> Option<Matrix> {
    let blocks: Option<Vec<&Matrix>> = (0..m)
        .flat_map(|i| (0..m).map(move |j| block_id(i, j)))
        .map(|id| results.get(&id).and_then(|v| v.as_matrix()))
        .collect();
    assemble(&blocks?).ok()
}

pub fn result_checksum(results: &ResultMap) -> Option<String> {
    results
        .get(ASSEMBLE_ID)?
        .as_json()?
        .get("checksum")?
        .as_str()
        .map(str::to_string)
}
