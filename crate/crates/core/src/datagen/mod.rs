//! Synthetic multi-domain scenes and the three evaluation protocols.
//!
//! Class appearance is a bank of oriented sinusoids whose amplitudes follow
//! from the class name's word embedding; each domain restyles images with a
//! per-channel gain, a bias and an additive texture, all scaled by one shift
//! magnitude. A backbone is "pretrained" on unrelated concept names drawn
//! from the same rule, which is what lets unseen classes be recognized.

mod dump;
mod pretrain;
mod split;
mod world;

pub use dump::{parse_manifest, read_dump, write_dump, LoadedDump, FORMAT, MANIFEST};
pub use pretrain::{pretrained_backbone, PretrainConfig};
pub use split::{
    build_split, plan_split, DataConfig, Datasets, DomainBatch, EvalSet, EvalSpec, Protocol,
    ProtocolSplit,
};
pub use world::{
    class_names, generate_sample, ClassPrototype, DomainSpec, PatternWorld, WaveComponent,
    CLASS_NAMES, WAVE_SLOTS,
};
