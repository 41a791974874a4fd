use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Row-major dense matrix. On the wire `data` is the base64 of its
/// little-endian bytes, which is exact and far cheaper than decimal text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    #[serde(with = "packed_f64")]
    pub data: Vec<f64>,
}

mod packed_f64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(data: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let bytes: Vec<u8> = data.iter().flat_map(|x| x.to_le_bytes()).collect();
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = STANDARD.decode(text).map_err(D::Error::custom)?;
        if bytes.len() % 8 != 0 {
            return Err(D::Error::custom("packed matrix length is not a multiple of 8"));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// `self += a * b`, accumulating each element in increasing inner index
    /// order.
    pub fn mul_add(&mut self, a: &Matrix, b: &Matrix) {
        assert_eq!(a.cols, b.rows, "inner dimensions differ");
        assert_eq!((self.rows, self.cols), (a.rows, b.cols), "output shape differs");
        let n = b.cols;
        for i in 0..a.rows {
            let row = &mut self.data[i * n..(i + 1) * n];
            for k in 0..a.cols {
                let aik = a.data[i * a.cols + k];
                let brow = &b.data[k * n..(k + 1) * n];
                for (c, bkj) in row.iter_mut().zip(brow) {
                    *c += aik * bkj;
                }
            }
        }
    }

    /// Copy of the `size x size` block at block coordinates `(bi, bj)`.
    pub fn block(&self, bi: usize, bj: usize, size: usize) -> Matrix {
        let mut out = Matrix::zeros(size, size);
        for r in 0..size {
            let src = (bi * size + r) * self.cols + bj * size;
            out.data[r * size..(r + 1) * size].copy_from_slice(&self.data[src..src + size]);
        }
        out
    }

    pub fn put_block(&mut self, bi: usize, bj: usize, block: &Matrix) {
        let size = block.rows;
        for r in 0..size {
            let dst = (bi * size + r) * self.cols + bj * size;
            self.data[dst..dst + size].copy_from_slice(&block.data[r * size..(r + 1) * size]);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "lowercase")]
pub enum TaskValue {
    Json(Value),
    Matrix(Matrix),
}

impl TaskValue {
    pub fn as_matrix(&self) -> Option<&Matrix> {
        match self {
            TaskValue::Matrix(m) => Some(m),
            TaskValue::Json(_) => None,
        }
    }

    pub fn as_json(&self) -> Option<&Value> {
        match self {
            TaskValue::Json(v) => Some(v),
            TaskValue::Matrix(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskInput {
    Literal(Arc<TaskValue>),
    /// Output of another task in the same graph.
    Output(String),
}

impl TaskInput {
    pub fn literal(v: TaskValue) -> Self {
        TaskInput::Literal(Arc::new(v))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub id: String,
    pub kind: String,
    pub inputs: Vec<TaskInput>,
    pub cores: usize,
}

impl TaskSpec {
    pub fn new(id: impl Into<String>, kind: impl Into<String>, inputs: Vec<TaskInput>) -> Self {
        Self {
            id: id.into(),
            kind: kind.into(),
            inputs,
            cores: 1,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("duplicate task id {0:?}")]
    DuplicateId(String),
    #[error("edge or input references unknown task {0:?}")]
    UnknownTask(String),
    #[error("task {0:?} needs at least one core")]
    ZeroCores(String),
    #[error("dependency cycle through {0:?}")]
    Cycle(String),
}

/// Tasks plus dependencies. Output references imply an edge; extra
/// ordering-only edges can be added explicitly.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TaskGraph {
    pub tasks: Vec<TaskSpec>,
    pub edges: Vec<(String, String)>,
}

impl TaskGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, task: TaskSpec) -> &mut Self {
        for input in &task.inputs {
            if let TaskInput::Output(p) = input {
                self.edges.push((p.clone(), task.id.clone()));
            }
        }
        self.tasks.push(task);
        self
    }

    pub fn add_edge(&mut self, producer: impl Into<String>, consumer: impl Into<String>) -> &mut Self {
        self.edges.push((producer.into(), consumer.into()));
        self
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.id == id)
    }

    /// Checks the invariants and returns successor lists and in-degrees, by
    /// task index.
    pub fn structure(&self) -> Result<(Vec<Vec<usize>>, Vec<usize>), GraphError> {
        let mut index = HashMap::new();
        for (i, t) in self.tasks.iter().enumerate() {
            if t.cores == 0 {
                return Err(GraphError::ZeroCores(t.id.clone()));
            }
            if index.insert(t.id.as_str(), i).is_some() {
                return Err(GraphError::DuplicateId(t.id.clone()));
            }
        }
        let mut succ = vec![Vec::new(); self.tasks.len()];
        let mut indeg = vec![0; self.tasks.len()];
        let mut seen = std::collections::HashSet::new();
        for (a, b) in &self.edges {
            let ia = *index.get(a.as_str()).ok_or_else(|| GraphError::UnknownTask(a.clone()))?;
            let ib = *index.get(b.as_str()).ok_or_else(|| GraphError::UnknownTask(b.clone()))?;
            if seen.insert((ia, ib)) {
                succ[ia].push(ib);
                indeg[ib] += 1;
            }
        }
        Ok((succ, indeg))
    }

    /// Kahn order, ties in insertion order.
    pub fn topological_order(&self) -> Result<Vec<usize>, GraphError> {
        let (succ, mut indeg) = self.structure()?;
        let mut q: VecDeque<usize> = (0..self.tasks.len()).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(self.tasks.len());
        while let Some(i) = q.pop_front() {
            order.push(i);
            for &j in &succ[i] {
                indeg[j] -= 1;
                if indeg[j] == 0 {
                    q.push_back(j);
                }
            }
        }
        if order.len() != self.tasks.len() {
            let stuck = (0..self.tasks.len()).find(|i| !order.contains(i)).unwrap();
            return Err(GraphError::Cycle(self.tasks[stuck].id.clone()));
        }
        Ok(order)
    }

    /// Dependency level of every task (sources are level 0).
    pub fn levels(&self) -> Result<Vec<usize>, GraphError> {
        let order = self.topological_order()?;
        let (succ, _) = self.structure()?;
        let mut level = vec![0; self.tasks.len()];
        for &i in &order {
            for &j in &succ[i] {
                level[j] = level[j].max(level[i] + 1);
            }
        }
        Ok(level)
    }
}

pub type ResultMap = BTreeMap<String, Arc<TaskValue>>;
