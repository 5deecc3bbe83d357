pub mod control;
pub mod dynamics;
pub mod exec;
pub mod linear;
pub mod moments;
pub mod error;
pub mod numerics;
pub mod obstruction;
pub mod reference;
pub mod spectral;

pub use control::{ControlSignal, SignalKind};
pub use error::{Result, WellError};
pub use numerics::C64;
pub use spectral::{BasisSpec, CouplingData, Dipole, DipoleSpec};
