pub mod augment;
pub mod features;

pub use augment::{
    add_noise, channel_confusion, mix_same_class, pitch_shift, spec_augment, speed_change,
    AudioAugConfig, OfflineOp, SpecMasks,
};
pub use features::{build_lmfb, delta, mel_project, stft_power, LmfbTensor, Waveform};
