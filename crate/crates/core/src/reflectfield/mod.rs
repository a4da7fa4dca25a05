//! Trainable volumetric reflectance field: triplane features decoded by a
//! light- and view-conditioned MLP, volume-rendered into OLAT images.

mod checkpoint;
mod field;
mod render;
mod train;

pub use checkpoint::{load_field, save_field, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use field::{
    decode, positional_encoding, sample_triplane, softplus, Decoded, FieldDims, ParamLayout, Plane,
    TriplaneField, PE_DIM, PE_FREQUENCIES,
};
pub use render::{
    backward, composite, forward_batch, render_olat, render_ray, Composite, FieldRay, RayOutput,
    RaySampleConfig, RayTrace, SampleAux,
};
pub use train::{train, train_with, Adam, TrainConfig, TrainError, TrainView, Trained};
