//! Normal (Bachelier) implied volatility under local-volatility dynamics
//! `dS = sigma_D(S) dW + mu(t) dt`: short-maturity expansion of the smile,
//! a forward-equation PDE solver, closed-form references and a Monte Carlo
//! cross-check.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::excessive_precision)]

pub mod asymptotics;
pub mod bachelier;
pub mod error;
pub mod exact;
pub mod mc;
pub mod models;
pub mod pde;
pub mod quadrature;
pub mod smile;
pub mod special;

pub use asymptotics::{Expansion, ExpansionCoeffs, MidpointApprox};
pub use bachelier::{bachelier_call, implied_normal_vol, LognormalQuote, NormalQuote};
pub use error::{Error, Result};
pub use exact::{Classification, FitReport};
pub use mc::{McEstimate, McSpec};
pub use models::{LocalVolModel, MarketSetup, ModelSpec, Side};
pub use pde::{PdeGrid, PdeMeta, PdeSolution, Stretching};
pub use quadrature::QuadratureSpec;
pub use smile::{OrderTag, Smile, SmileFlag, SmilePoint};
