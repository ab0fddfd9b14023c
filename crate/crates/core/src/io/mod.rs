//! File formats: the `IFW1` weight container, JSON model configs and binary
//! PPM images.

mod config_json;
mod ppm;
mod weights;

pub use config_json::{config_from_json, config_to_json, load_config, save_config, CONFIG_VERSION};
pub use ppm::{encode_ppm, load_image_ppm, parse_ppm, PpmImage, IMAGENET_MEAN, IMAGENET_STD};
pub use weights::WeightStore;

use std::path::Path;

use crate::error::Result;

pub fn save_weights(store: &WeightStore, path: impl AsRef<Path>) -> Result<()> {
    store.save(path)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightStore> {
    WeightStore::load(path)
}
