//! Compiles and runs every code block in the guide (`book/`) as a doctest,
//! so the prose cannot drift from the library. Built only under
//! `cfg(doctest)`.

#[doc = include_str!("../../../book/src/introduction.md")]
mod introduction {}

#[doc = include_str!("../../../book/src/audio-features.md")]
mod audio_features {}

#[doc = include_str!("../../../book/src/corpora.md")]
mod corpora {}

#[doc = include_str!("../../../book/src/synthetic-data.md")]
mod synthetic_data {}

#[doc = include_str!("../../../book/src/autodiff.md")]
mod autodiff {}

#[doc = include_str!("../../../book/src/model.md")]
mod model {}

#[doc = include_str!("../../../book/src/loss.md")]
mod loss {}

#[doc = include_str!("../../../book/src/training.md")]
mod training {}

#[doc = include_str!("../../../book/src/evaluation.md")]
mod evaluation {}

#[doc = include_str!("../../../book/src/benchmark.md")]
mod benchmark {}

#[doc = include_str!("../../../book/src/cli.md")]
mod cli {}
