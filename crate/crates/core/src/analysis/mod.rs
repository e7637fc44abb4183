//! Diagnostics over captured attention maps: principal-component images and
//! the on-disk dump format.

pub mod dump;
pub mod pca;

pub use dump::{read_dump, read_index, read_payload, DumpEntry, DumpKind, DumpRecord, DumpWriter, INDEX_FILE};
pub use pca::{pca_rgb, PcaImage};
