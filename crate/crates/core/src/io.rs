//! Manifests and image-sequence storage.
//!
//! A dataset root holds `manifest.json` and one directory per clip:
//! `clip_id/{frames,alpha,mask}/00000.png`. Frames are 8-bit RGB, alphas
//! 16-bit grayscale, masks 8-bit grayscale with values 0 or 255.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use memprop_autograd::Tensor;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{AlphaSequence, DataKind, SegMaskSequence, Split, VideoClip};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "memprop-matte-manifest-v1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Streams {
    /// Directory of RGB frames, relative to the dataset root.
    pub frames: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipManifest {
    pub clip_id: String,
    pub split: Split,
    pub data_kind: DataKind,
    pub frame_count: usize,
    pub height: usize,
    pub width: usize,
    pub streams: Streams,
    /// Seed the clip was rendered from, when generated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub seed: u64,
    pub clips: Vec<ClipManifest>,
}

/// Decoded streams of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedClip {
    pub manifest: ClipManifest,
    pub clip: VideoClip,
    pub alpha: Option<AlphaSequence>,
    pub mask: Option<SegMaskSequence>,
}

pub fn frame_file_name(index: usize) -> String {
    format!("{index:05}.png")
}

/// Parses JSON, reporting the failing field path on error.
pub fn parse_json<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::config(format!("{origin}:{path}"), e.into_inner().to_string())
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    parse_json(&text, &path.display().to_string())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

impl DatasetManifest {
    pub fn new(seed: u64, clips: Vec<ClipManifest>) -> Self {
        Self {
            format: MANIFEST_FORMAT.to_string(),
            seed,
            clips,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = read_json(path)?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::config(
                "format",
                format!("expected `{MANIFEST_FORMAT}`, found `{}`", m.format),
            ));
        }
        let mut ids = std::collections::HashSet::new();
        for (i, c) in m.clips.iter().enumerate() {
            if !ids.insert(c.clip_id.as_str()) {
                return Err(Error::config(format!("clips[{i}].clip_id"), "duplicate clip id"));
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn clip(&self, id: &str) -> Option<&ClipManifest> {
        self.clips.iter().find(|c| c.clip_id == id)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ClipManifest> {
        self.clips.iter().filter(move |c| c.split == split)
    }
}

fn count_frames(dir: &Path) -> Result<usize> {
    let entries = fs::read_dir(dir).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(dir.to_path_buf())
        } else {
            Error::io(dir, e)
        }
    })?;
    let mut n = 0;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.path().extension().is_some_and(|e| e == "png") {
            n += 1;
        }
    }
    Ok(n)
}

impl ClipManifest {
    /// Checks that every stream directory exists and holds exactly `frame_count` frames.
    pub fn validate(&self, root: &Path) -> Result<()> {
        if self.frame_count == 0 {
            return Err(Error::config(format!("{}.frame_count", self.clip_id), "must be ≥ 1"));
        }
        if self.data_kind == DataKind::Matting && self.streams.alpha.is_none() {
            return Err(Error::config(
                format!("{}.streams.alpha", self.clip_id),
                "matting clips need an alpha stream",
            ));
        }
        if self.data_kind == DataKind::Segmentation && self.streams.mask.is_none() {
            return Err(Error::config(
                format!("{}.streams.mask", self.clip_id),
                "segmentation clips need a mask stream",
            ));
        }
        let streams = [Some(&self.streams.frames), self.streams.alpha.as_ref(), self.streams.mask.as_ref()];
        for rel in streams.into_iter().flatten() {
            let dir = root.join(rel);
            for i in 0..self.frame_count {
                let p = dir.join(frame_file_name(i));
                if !p.is_file() {
                    return Err(Error::MissingFile(p));
                }
            }
            let found = count_frames(&dir)?;
            if found != self.frame_count {
                return Err(Error::InvalidInput(format!(
                    "{}: {} holds {found} frames, manifest says {}",
                    self.clip_id,
                    dir.display(),
                    self.frame_count
                )));
            }
        }
        Ok(())
    }

    pub fn load(&self, root: &Path) -> Result<LoadedClip> {
        self.validate(root)?;
        let clip = read_frames(&root.join(&self.streams.frames), self.frame_count)?;
        if clip.height() != self.height || clip.width() != self.width {
            return Err(Error::shape(
                "clip resolution",
                &[clip.height(), clip.width()],
                &[self.height, self.width],
            ));
        }
        let alpha = match &self.streams.alpha {
            Some(rel) => Some(read_alpha(&root.join(rel), self.frame_count)?),
            None => None,
        };
        let mask = match &self.streams.mask {
            Some(rel) => Some(read_masks(&root.join(rel), self.frame_count)?),
            None => None,
        };
        if let Some(a) = &alpha {
            if !a.matches_clip(&clip) {
                return Err(Error::InvalidInput(format!("{}: alpha stream does not match frames", self.clip_id)));
            }
        }
        if let Some(m) = &mask {
            if m.tensor().shape()[2..] != clip.tensor().shape()[2..] {
                return Err(Error::InvalidInput(format!("{}: mask stream does not match frames", self.clip_id)));
            }
        }
        Ok(LoadedClip {
            manifest: self.clone(),
            clip,
            alpha,
            mask,
        })
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn to_u16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

fn save_image<P, C>(path: &Path, img: &ImageBuffer<P, C>) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a `3×H×W` frame as 8-bit RGB.
pub fn write_rgb(path: &Path, frame: &Tensor) -> Result<()> {
    let [h, w] = plane_hw(frame, 3)?;
    let n = h * w;
    let d = frame.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        image::Rgb([to_u8(d[p]), to_u8(d[n + p]), to_u8(d[2 * n + p])])
    });
    save_image(path, &img)
}

pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let img = open_image(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let n = w * h;
    let raw = img.as_raw();
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / n, i % n);
        raw[p * 3 + c] as f64 / 255.0
    }))
}

/// Writes a `1×H×W` matte as 16-bit grayscale.
pub fn write_alpha_frame(path: &Path, alpha: &Tensor) -> Result<()> {
    let [h, w] = plane_hw(alpha, 1)?;
    let d = alpha.data();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([to_u16(d[y as usize * w + x as usize])]));
    save_image(path, &img)
}

pub fn read_alpha_frame(path: &Path) -> Result<Tensor> {
    let img = open_image(path)?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn(&[1, h, w], |i| raw[i] as f64 / 65535.0))
}

/// Writes a binary `1×H×W` mask as 8-bit 0/255.
pub fn write_mask_frame(path: &Path, mask: &Tensor) -> Result<()> {
    let [h, w] = plane_hw(mask, 1)?;
    crate::types::check_binary(mask, "mask")?;
    let d = mask.data();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([to_u8(d[y as usize * w + x as usize])]));
    save_image(path, &img)
}

/// Reads a mask, treating any value ≥ 128 as foreground.
pub fn read_mask_frame(path: &Path) -> Result<Tensor> {
    let img = open_image(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn(&[1, h, w], |i| if raw[i] >= 128 { 1.0 } else { 0.0 }))
}

fn plane_hw(t: &Tensor, channels: usize) -> Result<[usize; 2]> {
    match t.shape() {
        [c, h, w] if *c == channels => Ok([*h, *w]),
        s => Err(Error::InvalidInput(format!("expected {channels}×H×W image, got {s:?}"))),
    }
}

pub fn write_frames(dir: &Path, clip: &VideoClip) -> Result<()> {
    for t in 0..clip.len() {
        write_rgb(&dir.join(frame_file_name(t)), &clip.frame(t))?;
    }
    Ok(())
}

pub fn read_frames(dir: &Path, count: usize) -> Result<VideoClip> {
    let frames = (0..count)
        .map(|t| read_rgb(&dir.join(frame_file_name(t))))
        .collect::<Result<Vec<_>>>()?;
    VideoClip::from_frames(&frames, 0.0)
}

pub fn write_alpha(dir: &Path, alpha: &AlphaSequence) -> Result<()> {
    for t in 0..alpha.len() {
        write_alpha_frame(&dir.join(frame_file_name(t)), &alpha.frame(t))?;
    }
    Ok(())
}

pub fn read_alpha(dir: &Path, count: usize) -> Result<AlphaSequence> {
    let frames = (0..count)
        .map(|t| read_alpha_frame(&dir.join(frame_file_name(t))))
        .collect::<Result<Vec<_>>>()?;
    AlphaSequence::from_frames(&frames)
}

pub fn write_masks(dir: &Path, mask: &SegMaskSequence) -> Result<()> {
    for t in 0..mask.len() {
        write_mask_frame(&dir.join(frame_file_name(t)), &mask.frame(t))?;
    }
    Ok(())
}

pub fn read_masks(dir: &Path, count: usize) -> Result<SegMaskSequence> {
    let frames = (0..count)
        .map(|t| read_mask_frame(&dir.join(frame_file_name(t))))
        .collect::<Result<Vec<_>>>()?;
    SegMaskSequence::from_frames(&frames)
}

/// Number of consecutive `%05d.png` files starting at index 0.
pub fn sequence_length(dir: &Path) -> Result<usize> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut n = 0;
    while dir.join(frame_file_name(n)).is_file() {
        n += 1;
    }
    Ok(n)
}

pub fn manifest_path(root: &Path) -> PathBuf {
    root.join(MANIFEST_FILE)
}
