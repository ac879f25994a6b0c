//! Dense matrices, a reverse-mode gradient tape, Adam and the embedding file format.

pub mod adam;
pub mod emb_file;
pub mod matrix;
pub mod tape;

pub use adam::{Adam, AdamConfig};
pub use emb_file::{load_matrix, load_matrix_list, read_matrix, save_matrix, save_matrix_list, write_matrix};
pub use matrix::{Matrix, SparseMatrix};
pub use tape::{Gradients, Tape, Var};
