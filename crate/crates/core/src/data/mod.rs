//! Domain types, dataset handling and the synthetic benchmark.

mod dataset;
pub mod filters;
mod io;
mod resize;
pub mod synthetic;
mod tensor;

pub use dataset::{Dataset, Domain, DomainSplit, Sample, Split};
pub use io::{load_dataset, save_dataset};
pub use resize::{resize, resize_mask};
pub use synthetic::{generate_synthetic_pair, SyntheticShiftSpec};
pub use tensor::{ImageTensor, LabelMask, SoftLabelMap, STOCHASTIC_TOL};
