//! Dataset files: IDX (MNIST family), the native image container, and the
//! synthetic toy-glyph generator.

pub(crate) mod bytes;
pub mod container;
pub mod idx;
pub mod toy;

pub use container::{Container, ContainerKind};
pub use idx::{read_idx, write_idx};
pub use toy::generate_toy_glyphs;
