pub mod grad;
pub mod model;
pub mod nn;
pub mod objective;
pub mod pipeline;
pub mod scalar;
pub mod world;

/// Double-precision aliases.
pub type Graph = grad::Graph<f64>;
pub type ParamStore = nn::ParamStore<f64>;
pub type Tape<'p> = nn::Tape<'p, f64>;
pub type Grads = nn::Grads<f64>;
pub type Model = model::Mssm<f64>;
