//! On-disk formats: PPM frame directories, little-endian binary blobs for
//! latents, weights, embeddings and feature caches.

mod binary;
mod frames;

pub use binary::{
    read_embeddings, read_feature_cache, read_latents, read_pairnet, write_embeddings,
    write_feature_cache, write_latents, write_pairnet,
};
pub use frames::{load_frames, read_ppm, save_frames, write_ppm, FrameSink, FrameSource, MANIFEST};

/// Adds the path to an I/O error's message.
pub(crate) fn at(
    path: &std::path::Path,
) -> impl FnOnce(std::io::Error) -> crate::error::Error + '_ {
    move |e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())).into()
}
