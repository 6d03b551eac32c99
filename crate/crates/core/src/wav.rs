//! WAV input/output for mono and multichannel signals.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::dsp::Waveform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

/// Reads every channel of a WAV file (16/24/32-bit PCM or 32-bit float).
pub fn read_wav(path: impl AsRef<Path>) -> Result<Vec<Waveform>> {
    let mut reader = WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let fs = spec.sample_rate as f64;
    let interleaved: Vec<f64> = match spec.sample_format {
        SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()?,
        SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 * scale))
                .collect::<Result<_, _>>()?
        }
    };
    if channels == 0 || interleaved.is_empty() {
        return Err(Error::invalid("WAV file has no samples"));
    }
    (0..channels)
        .map(|c| {
            let samples = interleaved.iter().skip(c).step_by(channels).copied().collect();
            Waveform::new(samples, fs)
        })
        .collect()
}

pub fn read_mono(path: impl AsRef<Path>) -> Result<Waveform> {
    let mut chans = read_wav(path)?;
    if chans.len() == 1 {
        return Ok(chans.remove(0));
    }
    // downmix
    let n = chans[0].len();
    let fs = chans[0].sample_rate_hz;
    let inv = 1.0 / chans.len() as f64;
    let samples = (0..n)
        .map(|i| chans.iter().map(|c| c.samples[i]).sum::<f64>() * inv)
        .collect();
    Waveform::new(samples, fs)
}

pub fn read_stereo(path: impl AsRef<Path>) -> Result<(Waveform, Waveform)> {
    let mut chans = read_wav(path)?;
    if chans.len() != 2 {
        return Err(Error::mismatch("2 channels", format!("{} channels", chans.len())));
    }
    let right = chans.pop().unwrap();
    let left = chans.pop().unwrap();
    Ok((left, right))
}

/// Writes channels of equal length and sample rate as one interleaved file.
pub fn write_wav(path: impl AsRef<Path>, channels: &[&Waveform], encoding: WavEncoding) -> Result<()> {
    let first = channels
        .first()
        .ok_or_else(|| Error::invalid("no channels to write"))?;
    let n = first.len();
    let fs = first.sample_rate_hz;
    for c in channels {
        if c.len() != n || c.sample_rate_hz != fs {
            return Err(Error::mismatch(
                format!("{n} samples @ {fs} Hz"),
                format!("{} samples @ {} Hz", c.len(), c.sample_rate_hz),
            ));
        }
    }
    if fs.fract() != 0.0 || fs > u32::MAX as f64 {
        return Err(Error::invalid(format!("sample rate {fs} not representable in WAV")));
    }
    let spec = WavSpec {
        channels: channels.len() as u16,
        sample_rate: fs as u32,
        bits_per_sample: match encoding {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::Pcm16 => SampleFormat::Int,
            WavEncoding::Float32 => SampleFormat::Float,
        },
    };
    let mut writer = WavWriter::create(path, spec)?;
    for i in 0..n {
        for c in channels {
            let v = c.samples[i];
            match encoding {
                WavEncoding::Pcm16 => {
                    let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    writer.write_sample(q)?;
                }
                WavEncoding::Float32 => writer.write_sample(v as f32)?,
            }
        }
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_stereo_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let l = Waveform::new(vec![0.5, -0.25, 0.125], 16_000.0).unwrap();
        let r = Waveform::new(vec![0.0, 1.0, -1.0], 16_000.0).unwrap();
        write_wav(&path, &[&l, &r], WavEncoding::Float32).unwrap();
        let (l2, r2) = read_stereo(&path).unwrap();
        assert_eq!(l2, l);
        assert_eq!(r2, r);
    }

    #[test]
    fn pcm16_mono_quantises() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.wav");
        let x = Waveform::new(vec![0.5, -0.5, 0.1], 48_000.0).unwrap();
        write_wav(&path, &[&x], WavEncoding::Pcm16).unwrap();
        let y = read_mono(&path).unwrap();
        assert_eq!(y.sample_rate_hz, 48_000.0);
        for (a, b) in x.samples.iter().zip(&y.samples) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn stereo_reader_rejects_mono() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.wav");
        let x = Waveform::new(vec![0.5; 10], 8000.0).unwrap();
        write_wav(&path, &[&x], WavEncoding::Float32).unwrap();
        assert!(read_stereo(&path).is_err());
    }
}
