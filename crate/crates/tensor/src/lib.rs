//! Numeric substrate: dense `f64` tensors, a define-by-run tape for
//! reverse-mode gradients, a named parameter store with Adam, seeded
//! random streams and the `MCCT` binary tensor format.
//!
//! ```
//! use mcc_tensor::{Tape, Tensor, ParameterStore};
//!
//! let mut store = ParameterStore::new();
//! let w = store.insert("w", Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
//! let mut tape = Tape::new();
//! let wv = tape.param(&store, w);
//! let loss = tape.sum(wv);
//! tape.backward(loss, &mut store).unwrap();
//! assert_eq!(store.grad(w).data(), &[1.0; 4]);
//! ```

mod error;
pub mod gradcheck;
pub mod io;
mod kernels;
mod param;
mod rng;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use param::{adam_step, AdamConfig, Param, ParamId, ParameterStore};
pub use rng::{glorot_limit, glorot_uniform, Rng};
pub use tape::{logmeanexp, Gradients, Tape, Var};
pub use tensor::Tensor;
