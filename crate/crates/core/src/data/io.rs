//! On-disk corpus: `<root>/<domain>/<class>/<source_id>.png` plus `manifest.csv`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};

use super::{ClassLabel, Dataset, Domain, Image, LabeledImage};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.csv";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub source_id: String,
    pub class: ClassLabel,
    pub domain: Domain,
    /// `train`, `val`, `test`, or empty when unassigned.
    pub split: String,
}

fn image_path(root: &Path, domain: Domain, class: ClassLabel, source_id: &str) -> PathBuf {
    root.join(domain.name())
        .join(class.name())
        .join(format!("{source_id}.png"))
}

fn write_png(path: &Path, img: &Image) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let buf: RgbImage = ImageBuffer::from_fn(img.width() as u32, img.height() as u32, |x, y| {
        let i = (y as usize * img.width() + x as usize) * 3;
        let q = |v: f32| (v * 255.0).round().clamp(0.0, 255.0) as u8;
        let p = &img.pixels()[i..i + 3];
        Rgb([q(p[0]), q(p[1]), q(p[2])])
    });
    buf.save(path).map_err(|source| Error::Image {
        path: path.display().to_string(),
        source,
    })
}

fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.display().to_string(),
            source,
        })?
        .to_rgb8();
    let pixels = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
    Image::new(img.height() as usize, img.width() as usize, pixels)
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{other:?}")),
    })?;
    w.write_record(["source_id", "class", "domain", "split"])?;
    for r in rows {
        w.write_record([r.source_id.as_str(), r.class.name(), r.domain.name(), r.split.as_str()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{other:?}")),
    })?;
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["source_id", "class", "domain", "split"] {
        return Err(Error::Data(format!(
            "{}: unexpected header {headers:?}",
            path.display()
        )));
    }
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(ManifestRow {
                source_id: rec[0].to_string(),
                class: rec[1].parse()?,
                domain: rec[2].parse()?,
                split: rec[3].to_string(),
            })
        })
        .collect()
}

/// Writes every image as 8-bit PNG and the manifest, with `split_of`
/// naming each item's split.
pub fn save_corpus(
    dataset: &Dataset,
    root: &Path,
    split_of: impl Fn(&LabeledImage) -> String,
) -> Result<Vec<ManifestRow>> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut rows = Vec::with_capacity(dataset.len());
    for item in dataset.iter() {
        write_png(&image_path(root, item.domain, item.label, &item.source_id), &item.image)?;
        rows.push(ManifestRow {
            source_id: item.source_id.clone(),
            class: item.label,
            domain: item.domain,
            split: split_of(item),
        });
    }
    write_manifest(&root.join(MANIFEST), &rows)?;
    Ok(rows)
}

/// Reads the manifest and every image it lists, in manifest order.
pub fn load_corpus(root: &Path) -> Result<(Dataset, Vec<ManifestRow>)> {
    let rows = read_manifest(&root.join(MANIFEST))?;
    let items = rows
        .iter()
        .map(|r| {
            Ok(LabeledImage {
                image: read_png(&image_path(root, r.domain, r.class, &r.source_id))?,
                label: r.class,
                domain: r.domain,
                source_id: r.source_id.clone(),
            })
        })
        .collect::<Result<_>>()?;
    Ok((Dataset::new(items), rows))
}

/// Saves a single image as PNG.
pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    write_png(path, img)
}

pub fn load_png(path: &Path) -> Result<Image> {
    read_png(path)
}
