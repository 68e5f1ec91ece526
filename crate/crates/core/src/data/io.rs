//! Dataset ingestion from disk and PNG output.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ColorType, DynamicImage};
use serde::{Deserialize, Serialize};

use super::image::{Image, LabeledImageSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    /// One subdirectory per class; class ids follow sorted directory names.
    DirectoryPerClass,
    /// Text file of `relative_path<TAB>label` lines.
    Manifest,
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "ppm", "pgm", "pnm"];

fn is_image_file(p: &Path) -> bool {
    p.is_file()
        && p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.retain(|p| {
        !p.file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with('.'))
    });
    entries.sort();
    Ok(entries)
}

/// Decodes an 8-bit PNG or PPM/PGM file.
pub fn read_image(path: &Path) -> Result<Image> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let unreadable = |reason: String| Error::UnreadableImage {
        path: path.to_path_buf(),
        reason,
    };
    let dynimg = image::open(path).map_err(|e| unreadable(e.to_string()))?;
    let gray = matches!(
        dynimg.color(),
        ColorType::L8 | ColorType::La8 | ColorType::L16 | ColorType::La16
    );
    let (w, h, channels, bytes) = if gray {
        let g = dynimg.to_luma8();
        (g.width(), g.height(), 1, g.into_raw())
    } else {
        let rgb = dynimg.to_rgb8();
        (rgb.width(), rgb.height(), 3, rgb.into_raw())
    };
    let pixels = bytes.into_iter().map(|b| b as f64 / 255.0).collect();
    Image::new(
        h as usize,
        w as usize,
        channels,
        pixels,
        path.display().to_string(),
    )
    .map_err(|e| unreadable(e.to_string()))
}

pub fn write_png(img: &Image, path: &Path) -> Result<()> {
    let bytes = img.to_bytes();
    let (w, h) = (img.width as u32, img.height as u32);
    let dynimg = if img.channels == 1 {
        DynamicImage::ImageLuma8(image::GrayImage::from_raw(w, h, bytes).expect("buffer size"))
    } else {
        DynamicImage::ImageRgb8(image::RgbImage::from_raw(w, h, bytes).expect("buffer size"))
    };
    dynimg
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<LabeledImageSet> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    match format {
        DatasetFormat::DirectoryPerClass => load_directory(path),
        DatasetFormat::Manifest => load_manifest(path),
    }
}

fn load_directory(root: &Path) -> Result<LabeledImageSet> {
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    if class_dirs.is_empty() {
        return Err(Error::NoClasses(root.to_path_buf()));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut names = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let files: Vec<PathBuf> = sorted_entries(dir)?
            .into_iter()
            .filter(|p| is_image_file(p))
            .collect();
        if files.is_empty() {
            return Err(Error::EmptyClass(dir.clone()));
        }
        for f in files {
            images.push(read_image(&f)?);
            labels.push(label);
        }
        names.push(
            dir.file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned(),
        );
    }
    LabeledImageSet::new(images, labels, Some(names))
}

fn load_manifest(manifest: &Path) -> Result<LabeledImageSet> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: manifest.to_path_buf(),
            line: i + 1,
            message,
        };
        let (rel, label) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected `relative_path<TAB>label`".into()))?;
        let label: usize = label.trim().parse().map_err(|_| {
            parse_err(format!(
                "label `{}` is not a non-negative integer",
                label.trim()
            ))
        })?;
        let file = base.join(rel);
        if !file.exists() {
            return Err(Error::MissingFile(file));
        }
        images.push(read_image(&file)?);
        labels.push(label);
    }
    if images.is_empty() {
        return Err(Error::NoClasses(manifest.to_path_buf()));
    }
    LabeledImageSet::new(images, labels, None)
}
