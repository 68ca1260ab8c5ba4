use std::fmt::Write as _;

use super::model::{DeployModel, Entry};

/// Bytes of one tensor stored densely and as deployed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorBytes {
    pub name: String,
    pub elements: usize,
    pub packed: bool,
    /// Every element at the report's float width.
    pub dense_bytes: usize,
    /// Packed payload plus a 4-byte scale, or the dense size.
    pub deployed_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryReport {
    pub float_bytes: usize,
    pub tensors: Vec<TensorBytes>,
}

/// Size of a packed tensor's scale field.
pub const SCALE_BYTES: usize = 4;

pub fn tensor_bytes(name: &str, entry: &Entry, float_bytes: usize) -> TensorBytes {
    let elements = entry.elements();
    let dense_bytes = elements * float_bytes;
    let (packed, deployed_bytes) = match entry {
        Entry::Packed(p) => (true, p.payload().len() + SCALE_BYTES),
        Entry::Dense { .. } => (false, dense_bytes),
    };
    TensorBytes {
        name: name.to_string(),
        elements,
        packed,
        dense_bytes,
        deployed_bytes,
    }
}

/// Per-tensor accounting with unquantized tensors at `float_bytes` per
/// element in both columns (2 for a 16-bit baseline).
pub fn memory_report(model: &DeployModel, float_bytes: usize) -> MemoryReport {
    MemoryReport {
        float_bytes,
        tensors: model
            .entries()
            .iter()
            .map(|(n, e)| tensor_bytes(n, e, float_bytes))
            .collect(),
    }
}

impl MemoryReport {
    pub fn dense_total(&self) -> usize {
        self.tensors.iter().map(|t| t.dense_bytes).sum()
    }

    pub fn deployed_total(&self) -> usize {
        self.tensors.iter().map(|t| t.deployed_bytes).sum()
    }

    /// Deployed over dense total.
    pub fn ratio(&self) -> f64 {
        self.deployed_total() as f64 / self.dense_total().max(1) as f64
    }

    pub fn packed_dense_bytes(&self) -> usize {
        self.tensors.iter().filter(|t| t.packed).map(|t| t.dense_bytes).sum()
    }

    pub fn packed_deployed_bytes(&self) -> usize {
        self.tensors.iter().filter(|t| t.packed).map(|t| t.deployed_bytes).sum()
    }

    /// Columns `name,elements,packed,dense_bytes,deployed_bytes` plus a
    /// `TOTAL` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,elements,packed,dense_bytes,deployed_bytes\n");
        for t in &self.tensors {
            let _ = writeln!(s, "{},{},{},{},{}", t.name, t.elements, t.packed, t.dense_bytes, t.deployed_bytes);
        }
        let elements: usize = self.tensors.iter().map(|t| t.elements).sum();
        let _ = writeln!(s, "TOTAL,{elements},,{},{}", self.dense_total(), self.deployed_total());
        s
    }
}
