//! On-disk video container: a directory of binary PPM frames named
//! `frame_%04d.ppm` next to a `manifest.json`.
//!
//! PPM is always RGB; single-channel videos are written with the gray value
//! replicated and read back from the first channel.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageReader};
use ndarray::{Array3, Array4, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::VideoTensor;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerManifest {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub fps: u32,
    pub seed: u64,
    /// Free-form note on where the clip came from.
    pub provenance: String,
}

pub fn frame_name(i: usize) -> String {
    format!("frame_{i:04}.ppm")
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `video` into `dir`, creating it if needed. Existing frame files are
/// overwritten.
pub fn write_video(dir: &Path, video: &VideoTensor, fps: u32, seed: u64, provenance: &str) -> Result<ContainerManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (f, h, w, c) = video.data().dim();
    let mut buf = vec![0u8; h * w * 3];
    for i in 0..f {
        let fr = video.frame(i);
        for y in 0..h {
            for x in 0..w {
                for k in 0..3 {
                    buf[(y * w + x) * 3 + k] = quantize(fr[[y, x, if c == 1 { 0 } else { k }]]);
                }
            }
        }
        let path = dir.join(frame_name(i));
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        PnmEncoder::new(BufWriter::new(file))
            .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
            .write_image(&buf, w as u32, h as u32, ExtendedColorType::Rgb8)
            .map_err(|e| Error::format(&path, e.to_string()))?;
    }
    let manifest = ContainerManifest {
        frames: f,
        height: h,
        width: w,
        channels: c,
        fps,
        seed,
        provenance: provenance.into(),
    };
    let mp = dir.join(MANIFEST_FILE);
    fs::write(&mp, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mp, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<ContainerManifest> {
    let mp = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let m: ContainerManifest = serde_json::from_str(&text).map_err(|e| Error::format(&mp, e.to_string()))?;
    if m.frames == 0 || m.height == 0 || m.width == 0 || !(m.channels == 1 || m.channels == 3) {
        return Err(Error::format(&mp, "manifest declares an empty or unsupported video"));
    }
    Ok(m)
}

/// Reads a container, checking the frame count and every frame's size
/// against the manifest.
pub fn read_video(dir: &Path) -> Result<(VideoTensor, ContainerManifest)> {
    let m = read_manifest(dir)?;
    let mut data = Array4::zeros((m.frames, m.height, m.width, m.channels));
    for i in 0..m.frames {
        let path = dir.join(frame_name(i));
        if !path.exists() {
            return Err(Error::format(dir, format!("missing {}", frame_name(i))));
        }
        let img = ImageReader::open(&path)
            .map_err(|e| Error::io(&path, e))?
            .with_guessed_format()
            .map_err(|e| Error::io(&path, e))?
            .decode()
            .map_err(|e| Error::format(&path, e.to_string()))?
            .to_rgb8();
        if (img.height() as usize, img.width() as usize) != (m.height, m.width) {
            return Err(Error::format(
                &path,
                format!("frame is {}x{}, manifest says {}x{}", img.width(), img.height(), m.width, m.height),
            ));
        }
        for (x, y, px) in img.enumerate_pixels() {
            for k in 0..m.channels {
                data[[i, y as usize, x as usize, k]] = px[k] as f64 / 255.0;
            }
        }
    }
    if dir.join(frame_name(m.frames)).exists() {
        return Err(Error::format(dir, format!("more frames on disk than the {} in the manifest", m.frames)));
    }
    Ok((VideoTensor::new(data)?, m))
}

/// Writes one `(H, W, C)` image as a binary PPM.
pub fn write_frame(path: &Path, frame: ArrayView3<f64>) -> Result<()> {
    let (h, w, c) = frame.dim();
    let buf: Vec<u8> = (0..h * w * 3)
        .map(|k| {
            let (p, ch) = (k / 3, k % 3);
            quantize(frame[[p / w, p % w, if c == 1 { 0 } else { ch }]])
        })
        .collect();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    PnmEncoder::new(BufWriter::new(file))
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(&buf, w as u32, h as u32, ExtendedColorType::Rgb8)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Reads a PPM (or any format `image` recognises) as `(H, W, channels)` in
/// [0, 1]; with one channel the red plane is used.
pub fn read_frame(path: &Path, channels: usize) -> Result<Array3<f64>> {
    if channels != 1 && channels != 3 {
        return Err(Error::InvalidArgument(format!("channels must be 1 or 3, got {channels}")));
    }
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::format(path, e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, channels), |(y, x, k)| {
        img.get_pixel(x as u32, y as u32)[k] as f64 / 255.0
    }))
}
