use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// What a tensor is for; persisted in checkpoint manifests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Embedding,
    Attention,
    Norm,
    Head,
    ExpertFfn,
    RouterRow,
    RouterBias,
    Other,
}

/// A named dense array with an optional gradient slot and a freeze flag.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
    pub grad: Option<Vec<f32>>,
    pub trainable: bool,
    pub role: Role,
}

impl TensorRecord {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f32>, role: Role) -> Self {
        let name = name.into();
        assert!(shape.iter().all(|&d| d > 0), "tensor {name}: zero-sized dimension");
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "tensor {name}: shape/value length mismatch"
        );
        Self {
            name,
            shape,
            values,
            grad: None,
            trainable: false,
            role,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>, role: Role) -> Self {
        let n = shape.iter().product();
        Self::new(name, shape, vec![0.0; n], role)
    }

    pub fn filled(name: impl Into<String>, shape: Vec<usize>, value: f32, role: Role) -> Self {
        let n = shape.iter().product();
        Self::new(name, shape, vec![value; n], role)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Rows and columns when viewed as a matrix; 1-D tensors are a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => {
                let c = *other.last().expect("non-empty shape");
                (self.values.len() / c, c)
            }
        }
    }

    /// Replaces the gradient; the slot must match the value shape.
    pub fn set_grad(&mut self, grad: Vec<f32>) {
        assert_eq!(grad.len(), self.values.len(), "grad shape mismatch for {}", self.name);
        self.grad = Some(grad);
    }

    /// SHA-256 over name, shape and the little-endian value bytes.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.name.as_bytes());
        h.update([0u8]);
        for d in &self.shape {
            h.update((*d as u64).to_le_bytes());
        }
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Bitwise equality of values (NaN-safe, distinguishes -0.0).
    pub fn bits_eq(&self, other: &TensorRecord) -> bool {
        self.name == other.name
            && self.shape == other.shape
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
