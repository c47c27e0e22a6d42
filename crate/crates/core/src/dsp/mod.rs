//! Signal processing: framing, features, synthetic audio, rooms, mixing,
//! separation metrics and dereverberation.

pub mod mel;
pub mod metrics;
pub mod mix;
pub mod room;
pub mod stft;
pub mod synth;
pub mod wave;
pub mod wpe;

pub use mel::{log_mel_gmvn, GlobalStats, MelFilterbank, StatsAccumulator};
pub use metrics::si_snr;
pub use mix::mix;
pub use room::{spatialize, RoomMode, RoomSpec};
pub use stft::{istft, stft, ComplexSpectrogram, StftParams};
pub use synth::{synth_utterance, SpeakerProfile};
pub use wave::{read_wav, write_wav, write_wav_pcm16, Waveform, DEFAULT_SAMPLE_RATE};
pub use wpe::{wpe, WpeParams};
