//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! ```
//! use autodiff::{Array, Tape};
//!
//! let tape = Tape::higher_order();
//! let x = tape.leaf(Array::scalar(3.0));
//! let y = x.square() * x; // x^3
//! let dy = tape.grad(y, &[x]).unwrap();
//! assert_eq!(dy[0].item(), 27.0);
//! let d2y = tape.grad(dy[0], &[x]).unwrap();
//! assert_eq!(d2y[0].item(), 18.0);
//! ```

mod array;
pub mod check;
mod error;
mod tape;

pub use array::Array;
pub use check::{fd_check, fd_check_with, FdReport};
pub use error::AdError;
pub use tape::{Primitive, Tape, Var};
