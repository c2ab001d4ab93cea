//! Spiking building blocks.
//!
//! Graph-level modules ([`EmbedBlock`], [`PatchEmbed`], [`Mixer`], [`Mlp`],
//! [`Block`], [`Head`]) run inside a [`Forward`] pass over a [`ParamStore`] and
//! exchange domain-tagged [`Stream`]s of shape `[T·B, C, H, W]`. The
//! tensor-level operators in deployment form work on [`SpikeTensor`]s.

mod blocks;
mod inference;
mod store;

pub use blocks::{
    hidden_width, shortcut, BatchNorm, Block, ConvBn, EmbedBlock, EmbedKind, Head, Mixer, Mlp, PatchEmbed,
    PatchEmbedKind, ShortcutKind, Ssa, TokenMixer, DEFAULT_SSA_SCALE, EMBED_POOL, MIXER_POOL,
};
pub use inference::{
    avg_pool, bn_fold, conv2d_bias, dwc_token_mix, max_pool, smlp_block, spike_matmul, ssa, BnParams, SpikeTag,
    SpikeTensor,
};
pub(crate) use store::apply_bn_updates;
pub use store::{
    check_domain, Domain, Forward, LayerKind, LayerRecord, ParamId, ParamRole, ParamStore, Part, Phase, Stream,
    Transmission, BN_MOMENTUM,
};
