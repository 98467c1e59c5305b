//! On-disk dataset layout: `cameras.txt`, `images/*.png`, `split.txt`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::img::{load_image, save_image, Image};
use crate::sampling::Camera;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Posed views: one image file per camera plus a train/test tag.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub cameras: Vec<Camera>,
    pub image_names: Vec<String>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.cameras.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }
}

fn fmt_f(x: f64) -> String {
    // 9 significant digits, reparsable losslessly at that precision
    format!("{x:.8e}")
}

/// One camera per line: name, width, height, fx, fy, cx, cy, near, far and
/// the 3x4 pose row-major — 21 whitespace-separated fields.
fn camera_line(name: &str, cam: &Camera) -> String {
    let mut line = format!("{name} {} {}", cam.width, cam.height);
    for v in [cam.fx, cam.fy, cam.cx, cam.cy, cam.near, cam.far] {
        let _ = write!(line, " {}", fmt_f(v));
    }
    for row in &cam.pose {
        for v in row {
            let _ = write!(line, " {}", fmt_f(*v));
        }
    }
    line
}

fn parse_camera_line(line: &str, lineno: usize) -> Result<(String, Camera)> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 21 {
        return Err(Error::Format(format!(
            "cameras.txt line {lineno}: expected 21 fields, got {}",
            fields.len()
        )));
    }
    let name = fields[0].to_string();
    let int = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::Format(format!("cameras.txt line {lineno}: bad integer '{s}'")))
    };
    let num = |s: &str| -> Result<f64> {
        s.parse()
            .map_err(|_| Error::Format(format!("cameras.txt line {lineno}: bad number '{s}'")))
    };
    let mut pose = [[0.0; 4]; 3];
    for r in 0..3 {
        for c in 0..4 {
            pose[r][c] = num(fields[9 + r * 4 + c])?;
        }
    }
    Ok((
        name,
        Camera {
            width: int(fields[1])?,
            height: int(fields[2])?,
            fx: num(fields[3])?,
            fy: num(fields[4])?,
            cx: num(fields[5])?,
            cy: num(fields[6])?,
            near: num(fields[7])?,
            far: num(fields[8])?,
            pose,
        },
    ))
}

pub fn save_dataset(dir: &Path, dataset: &Dataset, images: &[Image]) -> Result<()> {
    assert_eq!(dataset.cameras.len(), images.len(), "one image per camera");
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(images_dir.display().to_string(), e))?;
    let mut cameras_txt = String::new();
    let mut split_txt = String::new();
    for i in 0..dataset.cameras.len() {
        let name = &dataset.image_names[i];
        cameras_txt.push_str(&camera_line(name, &dataset.cameras[i]));
        cameras_txt.push('\n');
        let _ = writeln!(split_txt, "{name} {}", dataset.splits[i].as_str());
        save_image(&images_dir.join(name), &images[i])?;
    }
    let cam_path = dir.join("cameras.txt");
    fs::write(&cam_path, cameras_txt).map_err(|e| Error::io(cam_path.display().to_string(), e))?;
    let split_path = dir.join("split.txt");
    fs::write(&split_path, split_txt).map_err(|e| Error::io(split_path.display().to_string(), e))?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<(Dataset, Vec<Image>)> {
    let cam_path = dir.join("cameras.txt");
    if !cam_path.exists() {
        return Err(Error::Format(format!(
            "no cameras.txt in {}",
            dir.display()
        )));
    }
    let cam_text =
        fs::read_to_string(&cam_path).map_err(|e| Error::io(cam_path.display().to_string(), e))?;
    let mut cameras = Vec::new();
    let mut image_names = Vec::new();
    for (idx, line) in cam_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (name, cam) = parse_camera_line(line, idx + 1)?;
        image_names.push(name);
        cameras.push(cam);
    }
    let split_path = dir.join("split.txt");
    let split_text = fs::read_to_string(&split_path)
        .map_err(|e| Error::io(split_path.display().to_string(), e))?;
    let mut splits = vec![None; cameras.len()];
    for (idx, line) in split_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (name, tag) = match (parts.next(), parts.next()) {
            (Some(n), Some(t)) => (n, t),
            _ => {
                return Err(Error::Format(format!(
                    "split.txt line {}: expected '<filename> train|test'",
                    idx + 1
                )))
            }
        };
        let split = match tag {
            "train" => Split::Train,
            "test" => Split::Test,
            other => {
                return Err(Error::Format(format!(
                    "split.txt line {}: unknown split '{other}'",
                    idx + 1
                )))
            }
        };
        let pos = image_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| {
                Error::Format(format!("split.txt line {}: unknown image '{name}'", idx + 1))
            })?;
        splits[pos] = Some(split);
    }
    let splits: Vec<Split> = splits
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            s.ok_or_else(|| Error::Format(format!("image '{}' missing from split.txt", image_names[i])))
        })
        .collect::<Result<_>>()?;
    let mut images = Vec::new();
    for (name, cam) in image_names.iter().zip(&cameras) {
        let img = load_image(&dir.join("images").join(name))?;
        if img.width != cam.width || img.height != cam.height {
            return Err(Error::Format(format!(
                "image '{name}' is {}x{}, camera says {}x{}",
                img.width, img.height, cam.width, cam.height
            )));
        }
        images.push(img);
    }
    Ok((
        Dataset {
            cameras,
            image_names,
            splits,
        },
        images,
    ))
}
