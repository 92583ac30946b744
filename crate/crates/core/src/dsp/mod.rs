//! Time-frequency analysis, spectral compression and audio file I/O.

mod compress;
mod image;
mod stft;
mod wav;

pub use compress::{
    compress, compress_value, decompress, decompress_value, DEFAULT_ALPHA, DEFAULT_BETA,
};
pub use image::{spectrogram_csv, spectrogram_pgm, write_spectrogram};
pub use realfft::num_complex::Complex64;
pub use stft::{istft, stft, ComplexSpectrogram, StftConfig, StftPlan};
pub use wav::{quantize, read_wav, write_wav};
