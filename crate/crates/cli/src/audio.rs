//! Waveform files: mono WAV (any PCM or float encoding) or raw
//! little-endian `f32` samples whose rate is given on the command line.

use std::path::Path;

use anyhow::{bail, Context, Result};
use holitok::dsp::corpus::{read_pcm, write_pcm};

fn is_wav(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

/// Samples and their rate. For raw files the rate is `raw_rate`.
pub fn read_waveform(path: &Path, raw_rate: u32) -> Result<(Vec<f64>, u32)> {
    if !is_wav(path) {
        return Ok((read_pcm(path)?, raw_rate));
    }
    let mut r = hound::WavReader::open(path).with_context(|| format!("reading {}", path.display()))?;
    let spec = r.spec();
    if spec.channels != 1 {
        bail!("{}: expected mono audio, found {} channels", path.display(), spec.channels);
    }
    let samples = match spec.sample_format {
        hound::SampleFormat::Float => r.samples::<f32>().map(|s| s.map(f64::from)).collect::<Result<Vec<_>, _>>()?,
        hound::SampleFormat::Int => {
            let full = (1i64 << (spec.bits_per_sample - 1)) as f64;
            r.samples::<i32>().map(|s| s.map(|v| v as f64 / full)).collect::<Result<Vec<_>, _>>()?
        }
    };
    Ok((samples, spec.sample_rate))
}

/// Writes 32-bit float WAV for `.wav` paths, raw `f32` otherwise.
pub fn write_waveform(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    if !is_wav(path) {
        return Ok(write_pcm(path, samples)?);
    }
    let spec = hound::WavSpec { channels: 1, sample_rate, bits_per_sample: 32, sample_format: hound::SampleFormat::Float };
    let mut w = hound::WavWriter::create(path, spec).with_context(|| format!("writing {}", path.display()))?;
    for &s in samples {
        w.write_sample(s as f32)?;
    }
    w.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wav_and_raw_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let x = vec![0.0, 0.25, -0.5, 1.0];
        for name in ["a.wav", "a.f32"] {
            let p = dir.path().join(name);
            write_waveform(&p, &x, 8000).unwrap();
            assert_eq!(read_waveform(&p, 8000).unwrap(), (x.clone(), 8000));
        }
        let p = dir.path().join("b.wav");
        write_waveform(&p, &x, 16000).unwrap();
        assert_eq!(read_waveform(&p, 8000).unwrap().1, 16000);
    }
}
