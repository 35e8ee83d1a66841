//! Fixed-point sparse inference engines and a memory access cost model.
//!
//! * [`fxp`]: 16-bit Q-format values, saturating MACs, op counting.
//! * [`codec`]: sparsity-map compression and delta-event streams.
//! * [`conv`]: zero-skipping convolution with fused ReLU/pooling.
//! * [`gru`]: delta-threshold GRU with stored pre-activations.
//! * [`mem`]: DRAM row/burst cost model, energy, brain power budget.
//! * [`report`]: run reports, figures of merit, scatter charts.
//! * [`netdesc`]: network description files.
//! * [`synth`]: seeded synthetic inputs and weights.

pub mod codec;
pub mod conv;
pub mod error;
pub mod fxp;
pub mod gru;
pub mod io;
pub mod mem;
pub mod netdesc;
pub mod par;
pub mod report;
pub mod synth;

pub use error::{Error, Result};
pub use fxp::{OpCounter, QFormat, QScalar, QTensor};
