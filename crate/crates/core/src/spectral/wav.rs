//! 16-bit PCM WAV through `hound`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const FULL_SCALE: f64 = 32768.0;

/// Reads a 16-bit PCM file as `[1, N]` samples in `[-1, 1)`. Multi-channel
/// input is averaged to mono.
pub fn wav_read(path: &Path) -> Result<(Tensor, u32)> {
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Wav(format!(
            "{}: unsupported sample format ({:?}, {} bits); only 16-bit PCM is read",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    let channels = spec.channels as usize;
    let raw: Vec<i16> = reader
        .samples::<i16>()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| wav_error(path, e))?;
    if channels > 1 {
        log::warn!("{}: averaging {channels} channels to mono", path.display());
    }
    let data: Vec<f64> = raw
        .chunks_exact(channels)
        .map(|frame| frame.iter().map(|&s| s as f64).sum::<f64>() / (channels as f64 * FULL_SCALE))
        .collect();
    if data.is_empty() {
        return Err(Error::Wav(format!("{}: no samples", path.display())));
    }
    let n = data.len();
    Ok((Tensor::new(&[1, n], data)?, spec.sample_rate))
}

/// Writes `[1, N]` or `[N]` samples as mono 16-bit PCM, rounding to the
/// nearest step and clipping to the representable range.
pub fn wav_write(path: &Path, wave: &Tensor, sample_rate: u32) -> Result<()> {
    let mono = match wave.shape() {
        [_] => true,
        [1, _] => true,
        _ => false,
    };
    if !mono {
        return Err(Error::InvalidShape(format!(
            "wav_write takes one channel, got shape {:?}",
            wave.shape()
        )));
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &v in wave.data() {
        let q = (v * FULL_SCALE).round().clamp(-FULL_SCALE, FULL_SCALE - 1.0) as i16;
        writer.write_sample(q).map_err(|e| wav_error(path, e))?;
    }
    writer.finalize().map_err(|e| wav_error(path, e))?;
    Ok(())
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) if io.kind() == std::io::ErrorKind::NotFound => Error::Io(io),
        other => Error::Wav(format!("{}: {other}", path.display())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn full_scale_negative_reads_as_minus_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(i16::MIN).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        let (t, sr) = wav_read(&path).unwrap();
        assert_eq!(sr, 16_000);
        assert_eq!(t.data(), &[-1.0, 0.0]);
    }

    #[test]
    fn silence_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        wav_write(&path, &Tensor::zeros(&[1, 100]), 16_000).unwrap();
        let (t, _) = wav_read(&path).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
        assert_eq!(t.shape(), &[1, 100]);
    }

    #[test]
    fn dithered_roundtrip_within_one_step() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.wav");
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::from_fn(&[1, 5000], |_| rng.random_range(-1.0..1.0));
        wav_write(&path, &x, 16_000).unwrap();
        let (back, _) = wav_read(&path).unwrap();
        assert!(back.max_abs_diff(&x) <= 1.0 / 32768.0);
        // Already-quantized samples survive exactly.
        wav_write(&path, &back, 16_000).unwrap();
        assert_eq!(wav_read(&path).unwrap().0, back);
    }

    #[test]
    fn stereo_is_averaged() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("st.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for s in [1000i16, 3000, -200, 200] {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
        let (t, _) = wav_read(&path).unwrap();
        assert_eq!(t.data(), &[2000.0 / 32768.0, 0.0]);
    }

    #[test]
    fn malformed_and_unsupported_files_are_structured_errors() {
        let dir = tempfile::tempdir().unwrap();
        let junk = dir.path().join("junk.wav");
        std::fs::write(&junk, b"RIFF not really").unwrap();
        assert!(matches!(wav_read(&junk), Err(Error::Wav(_))));

        let deep = dir.path().join("deep.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 24,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&deep, spec).unwrap();
        w.write_sample(5i32).unwrap();
        w.finalize().unwrap();
        let err = wav_read(&deep).unwrap_err();
        assert!(err.to_string().contains("24 bits"), "{err}");

        assert!(matches!(wav_read(&dir.path().join("missing.wav")), Err(Error::Io(_))));
    }
}
