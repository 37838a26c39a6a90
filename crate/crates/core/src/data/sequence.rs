//! Image sequences with per-frame ground truth, and the OTB directory layout:
//! `<seq>/img/0001.png ...` plus `<seq>/groundtruth_rect.txt` holding one
//! `x,y,w,h` line per frame (1-based top-left, comma or tab separated).

use std::borrow::Cow;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;

use crate::bbox::BBox;
use crate::error::{Error, Result};

pub const GROUNDTRUTH_FILE: &str = "groundtruth_rect.txt";
const IMAGE_DIR: &str = "img";
const ATTRIBUTES_FILE: &str = "attributes.txt";
const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

#[derive(Clone, Debug)]
pub enum Frames {
    Memory(Vec<RgbImage>),
    /// Decoded on access.
    Files(Vec<PathBuf>),
}

#[derive(Clone, Debug)]
pub struct Sequence {
    pub name: String,
    pub frames: Frames,
    pub groundtruth: Vec<BBox>,
    pub attributes: Vec<String>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.groundtruth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groundtruth.is_empty()
    }

    pub fn frame(&self, i: usize) -> Result<Cow<'_, RgbImage>> {
        match &self.frames {
            Frames::Memory(v) => v
                .get(i)
                .map(Cow::Borrowed)
                .ok_or_else(|| Error::InvalidArgument(format!("frame {i} out of range in {}", self.name))),
            Frames::Files(paths) => {
                let path = paths
                    .get(i)
                    .ok_or_else(|| Error::InvalidArgument(format!("frame {i} out of range in {}", self.name)))?;
                let img = image::open(path).map_err(|source| Error::Image {
                    path: path.clone(),
                    source,
                })?;
                Ok(Cow::Owned(img.to_rgb8()))
            }
        }
    }

    /// Materializes every frame in memory.
    pub fn into_memory(self) -> Result<Sequence> {
        if let Frames::Memory(_) = self.frames {
            return Ok(self);
        }
        let frames = (0..self.len())
            .map(|i| self.frame(i).map(Cow::into_owned))
            .collect::<Result<Vec<_>>>()?;
        Ok(Sequence {
            frames: Frames::Memory(frames),
            ..self
        })
    }
}

/// Parses one ground-truth line. Commas, tabs and spaces all separate.
pub fn parse_bbox_line(line: &str) -> std::result::Result<BBox, String> {
    let values: Vec<f64> = line
        .split(|c: char| c == ',' || c == '\t' || c == ' ')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| format!("not a number: `{s}`")))
        .collect::<std::result::Result<_, _>>()?;
    if values.len() != 4 {
        return Err(format!("expected 4 values, found {}", values.len()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err("non-finite value".into());
    }
    Ok(BBox::new(values[0] - 1.0, values[1] - 1.0, values[2], values[3]))
}

/// Formats a box as a 1-based `x,y,w,h` line.
pub fn format_bbox_line(b: &BBox) -> String {
    format!("{},{},{},{}", b.x + 1.0, b.y + 1.0, b.w, b.h)
}

pub fn read_bbox_file(path: &Path) -> Result<Vec<BBox>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| parse_bbox_line(l.trim()).map_err(|m| Error::format(path, format!("line {}: {m}", n + 1))))
        .collect()
}

pub fn write_bbox_file(path: &Path, boxes: &[BBox]) -> Result<()> {
    let mut text = String::new();
    for b in boxes {
        text.push_str(&format_bbox_line(b));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if ext.as_deref().is_some_and(|e| IMAGE_EXTENSIONS.contains(&e)) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads an OTB-layout sequence directory. Frames stay on disk.
pub fn load_sequence(path: &Path) -> Result<Sequence> {
    let gt_path = [GROUNDTRUTH_FILE, "groundtruth.txt"]
        .iter()
        .map(|f| path.join(f))
        .find(|p| p.is_file())
        .ok_or_else(|| Error::format(path, format!("missing {GROUNDTRUTH_FILE}")))?;
    let groundtruth = read_bbox_file(&gt_path)?;
    let img_dir = path.join(IMAGE_DIR);
    let files = image_files(&img_dir)?;
    if files.len() != groundtruth.len() {
        return Err(Error::format(
            &gt_path,
            format!("{} ground-truth boxes for {} frames in {}", groundtruth.len(), files.len(), img_dir.display()),
        ));
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".into());
    let attr_path = path.join(ATTRIBUTES_FILE);
    let attributes = if attr_path.is_file() {
        fs::read_to_string(&attr_path)
            .map_err(|e| Error::io(&attr_path, e))?
            .split(',')
            .map(str::trim)
            .filter(|a| !a.is_empty())
            .map(String::from)
            .collect()
    } else {
        Vec::new()
    };
    Ok(Sequence {
        name,
        frames: Frames::Files(files),
        groundtruth,
        attributes,
    })
}

/// Loads every sequence directory under `root`, sorted by name.
pub fn load_sequences(root: &Path) -> Result<Vec<Sequence>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| load_sequence(d)).collect()
}

/// Writes a sequence in the OTB layout under `dir` (created if needed).
pub fn save_sequence(seq: &Sequence, dir: &Path) -> Result<()> {
    let img_dir = dir.join(IMAGE_DIR);
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    for i in 0..seq.len() {
        let frame = seq.frame(i)?;
        let path = img_dir.join(format!("{:04}.png", i + 1));
        frame.save(&path).map_err(|source| Error::Image { path, source })?;
    }
    write_bbox_file(&dir.join(GROUNDTRUTH_FILE), &seq.groundtruth)?;
    if !seq.attributes.is_empty() {
        let path = dir.join(ATTRIBUTES_FILE);
        fs::write(&path, seq.attributes.join(",") + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
