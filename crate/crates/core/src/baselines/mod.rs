//! Comparison methods: reduced-kernel embedding, random and magnitude
//! masks, and compressed sensing with OMP reconstruction.

mod cs;
mod du;
mod masks;
mod omp;

pub use cs::{cs_bench, cs_reconstruct, cs_reconstruct_image, dct_matrix, natural_patch, psnr, CsBenchRow, MeasurementEnsemble, MeasurementKind};
pub use du::{du_embed, du_kernels, du_mix};
pub use masks::{magnitude_mask, random_mask};
pub use omp::{omp, OmpResult};
