//! On-disk formats: binary weight files and text model configs.

mod config_text;
mod weights;

pub use config_text::{parse_config, render_config};
pub use weights::{
    decode_weights, encode_weights, load_weights, save_weights, WeightData, WeightEntry, WeightStore, FORMAT_VERSION,
    MAGIC,
};
