//! Sequential discrete auto-encoding by greedy refinement.
//!
//! A refinement network looks at the current reconstruction and proposes `K`
//! candidate refinements. Encoding picks the candidate closest to the target
//! at each of `N` stages; the chosen indices form the latent code. Decoding
//! replays the choices.

pub mod autodiff;
pub mod codec;
pub mod data;
pub mod error;
pub mod params;
pub mod refiner;
pub mod tensor;
pub mod training;

pub use codec::{decode, encode, sample, EncodeTrace, LatentCode};
pub use data::{gen_mixture, load_idx, write_image_grid, Dataset, MixtureSpec, Split};
pub use error::{Error, Result};
pub use params::{Bound, ParamId, ParamStore};
pub use refiner::{Architecture, Refiner, RefinerConfig};
pub use tensor::{Scalar, Tensor};
pub use training::{train_step, AdamState, MetricsRow, TrainConfig, Trainer};
