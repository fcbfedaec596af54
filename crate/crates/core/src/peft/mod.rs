//! Method registry, tuner configs, attachment and adapter checkpoints.

mod attach;
mod checkpoint;
pub mod config;
pub mod manifest;
pub mod registry;

pub use attach::{attach, merge, AttachHandle};
pub use checkpoint::{
    decode_adapter, encode_adapter, load_adapter, read_adapter, save_adapter, AdapterCheckpoint,
};
pub use config::{parse_config, HyperValue, RawTunerConfig, TunerConfig};
pub use manifest::{Family, MethodManifest};
pub use registry::{discover_from_env, discover_methods, scan_methods, Diagnostic, Discovery, MethodRegistry, Origin};
