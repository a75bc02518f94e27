pub mod cli;
pub mod countdist;
pub mod curemodel;
pub mod em;
pub mod error;
pub mod lifetime;
pub mod optim;
pub mod sim;

pub use countdist::{Dispersion, SeriesPolicy};
pub use curemodel::{
    cure_rate, f_pop, intensities, observed_loglik, s1, s_pop, CureModel, ExposureProfile, LinkConfig,
    ModelSpec, ParamVector, PreparedData, Status, Subject,
};
pub use error::{CureError, Result};
pub use lifetime::{PromotionTime, WeibullParams};
