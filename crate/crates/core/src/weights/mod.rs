//! Named weight collections, the SBCW container and weight transforms.

mod fold;
mod io;
mod store;

pub use fold::{fold_batchnorm, fold_batchnorm_eps, perturb_norm_statistics};
pub use io::{export_random, from_bytes, load, save, to_bytes, DTYPE_F32, FORMAT_VERSION, MAGIC, PAYLOAD_ALIGN};
pub use store::{WeightStore, MAX_NAME_BYTES};
