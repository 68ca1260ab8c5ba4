//! Frozen ternary deployment: trit packing, add/subtract kernels, a
//! standalone inference model, export files, memory accounting and a
//! latency harness.

mod bench;
mod export;
mod memory;
mod model;
mod pack;

pub use bench::{bench, summarize, BenchConfig, BenchReport};
pub use export::{decode_export, encode_export, load_export, save_export, EXPORT_MAGIC, EXPORT_VERSION};
pub use memory::{memory_report, tensor_bytes, MemoryReport, TensorBytes, SCALE_BYTES};
pub use model::{DeployDecodeState, DeployModel, Entry};
pub use pack::{pack, pack_codes, pack_f32, packed_matmul, packed_matvec, unpacked_matvec, PackedTernaryMatrix, TritEncoding};

#[cfg(test)]
mod tests;
