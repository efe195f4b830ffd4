pub mod audio;
pub mod backends;
pub mod cache;
pub mod config;
pub mod digest;
pub mod evalsuite;
pub mod features;
pub mod geometry;
pub mod grounding;
pub mod ingest;
pub mod media;
pub mod par;
pub mod scenes;
pub mod templates;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/features.md")]
    pub mod features {}
    #[doc = include_str!("../../../book/src/scenes.md")]
    pub mod scenes {}
    #[doc = include_str!("../../../book/src/audio.md")]
    pub mod audio {}
    #[doc = include_str!("../../../book/src/grounding.md")]
    pub mod grounding {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub mod evaluation {}
    #[doc = include_str!("../../../book/src/backends.md")]
    pub mod backends {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
