use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::tracker::FrameResult;
use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::tokenization::ImageCrop;

pub const GROUNDTRUTH_FILE: &str = "groundtruth.txt";
const FRAME_EXTENSIONS: [&str; 4] = ["ppm", "pnm", "png", "pgm"];

/// Parses one `x,y,w,h` line (commas, optionally surrounded by spaces).
pub fn parse_rect_line(line: &str) -> Result<Rect> {
    let vals: Vec<f64> = line
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Input(format!("bad box line {line:?}: {e}")))?;
    match vals.as_slice() {
        [x, y, w, h, ..] => Ok(Rect::new(*x, *y, *w, *h)),
        _ => Err(Error::Input(format!("box line {line:?} needs 4 values"))),
    }
}

/// Reads a box file with one `x,y,w,h` line per frame; blank lines are
/// skipped.
pub fn read_rects(path: &Path) -> Result<Vec<Rect>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(parse_rect_line)
        .collect()
}

pub fn format_rect(r: &Rect) -> String {
    format!("{:.4},{:.4},{:.4},{:.4}", r.x, r.y, r.w, r.h)
}

pub fn write_rects(path: &Path, rects: &[Rect]) -> Result<()> {
    let mut s = String::new();
    for r in rects {
        s.push_str(&format_rect(r));
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Predictions as `x,y,w,h,confidence` lines.
pub fn format_predictions(results: &[FrameResult]) -> String {
    let mut s = String::new();
    for r in results {
        let _ = writeln!(s, "{},{:.6}", format_rect(&r.rect), r.confidence);
    }
    s
}

/// A sequence directory: ordered frame files plus `groundtruth.txt`.
#[derive(Clone, Debug)]
pub struct SequenceDir {
    pub name: String,
    pub frames: Vec<PathBuf>,
    pub groundtruth: Vec<Rect>,
}

impl SequenceDir {
    pub fn open(dir: &Path) -> Result<Self> {
        let mut frames: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| FRAME_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            })
            .collect();
        frames.sort();
        if frames.is_empty() {
            return Err(Error::Input(format!("no frame files in {}", dir.display())));
        }
        let groundtruth = read_rects(&dir.join(GROUNDTRUTH_FILE))?;
        if groundtruth.is_empty() {
            return Err(Error::Input(format!("{} has no boxes", GROUNDTRUTH_FILE)));
        }
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(Self {
            name,
            frames,
            groundtruth,
        })
    }

    pub fn load_frames(&self) -> Result<Vec<ImageCrop>> {
        self.frames.iter().map(|p| ImageCrop::load(p)).collect()
    }

    /// Whether every frame has a ground-truth box.
    pub fn fully_annotated(&self) -> bool {
        self.groundtruth.len() == self.frames.len()
    }
}

/// Writes frames as `00000001.ppm`, … and the boxes as `groundtruth.txt`.
pub fn write_sequence_dir(dir: &Path, frames: &[ImageCrop], boxes: &[Rect]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, f) in frames.iter().enumerate() {
        f.save_ppm(&dir.join(format!("{:08}.ppm", i + 1)))?;
    }
    write_rects(&dir.join(GROUNDTRUTH_FILE), boxes)
}
