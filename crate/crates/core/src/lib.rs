pub mod dataio;
pub mod error;
pub mod gdc;
pub mod layers;
pub mod modality;
pub mod mselector;
pub mod numcore;
pub mod objective;
pub mod pcca;
pub mod trainer;

pub use error::{Error, Result};
pub use modality::Modality;
