//! File formats: image-folder datasets, feature dumps and matrix CSVs.

use std::fs;
use std::path::{Path, PathBuf};

use dait_core::analysis::FeatureDump;
use dait_core::data::{Dataset, Image, Item, Split};
use dait_core::Matrix;

use crate::error::{DaitError, Result};

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(|e| DaitError::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| DaitError::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Decode an image to RGB with values in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| DaitError::Ingest(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Image::zeros(3, h, w);
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out.set(c, y as usize, x as usize, p.0[c] as f64 / 255.0);
        }
    }
    Ok(out)
}

/// Encode an image as 8-bit RGB PNG, mapping `v` to `clamp(127.5 + 31.875 v)`
/// so that a standard-normal range survives quantisation. Reading it back
/// yields `0.5 + v / 8`.
pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let [c, h, w] = img.dims();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, p) in buf.enumerate_pixels_mut() {
        for k in 0..3 {
            let v = img.get(k.min(c - 1), y as usize, x as usize);
            p.0[k] = (127.5 + 31.875 * v).round().clamp(0.0, 255.0) as u8;
        }
    }
    buf.save(path).map_err(|e| DaitError::Ingest(format!("{}: {e}", path.display())))
}

fn load_split(root: &Path, split: Split, class_names: &[String]) -> Result<Vec<Item>> {
    let dir = root.join(split_dir(split));
    let mut items = Vec::new();
    for (label, class) in class_names.iter().enumerate() {
        let cdir = dir.join(class);
        if !cdir.is_dir() {
            return Err(DaitError::Ingest(format!("class `{class}` missing from {}", dir.display())));
        }
        let files: Vec<PathBuf> = sorted_entries(&cdir)?.into_iter().filter(|p| is_image(p)).collect();
        if files.is_empty() {
            return Err(DaitError::Ingest(format!("class directory {} has no images", cdir.display())));
        }
        for f in files {
            items.push(Item { image: read_image(&f)?, label });
        }
    }
    Ok(items)
}

fn split_dir(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Test => "test",
    }
}

/// Load `root/train/<class>/*` and `root/test/<class>/*`. Class indices
/// follow the sorted names of the training class directories.
pub fn load_image_folder(root: &Path) -> Result<(Dataset, Dataset)> {
    let train_dir = root.join("train");
    if !train_dir.is_dir() {
        return Err(DaitError::Ingest(format!("{} is not a directory", train_dir.display())));
    }
    let class_names: Vec<String> = sorted_entries(&train_dir)?
        .into_iter()
        .filter(|p| p.is_dir())
        .filter_map(|p| p.file_name().and_then(|n| n.to_str()).map(str::to_string))
        .collect();
    if class_names.len() < 2 {
        return Err(DaitError::Ingest(format!("{} holds fewer than two class directories", train_dir.display())));
    }
    let train = load_split(root, Split::Train, &class_names)?;
    let test = load_split(root, Split::Test, &class_names)?;
    Ok((
        Dataset::new(train, class_names.clone(), Split::Train)?,
        Dataset::new(test, class_names, Split::Test)?,
    ))
}

/// Write both splits in the layout [`load_image_folder`] reads.
pub fn write_image_folder(root: &Path, train: &Dataset, test: &Dataset) -> Result<()> {
    for ds in [train, test] {
        let mut seen = vec![0usize; ds.num_classes()];
        for class in &ds.class_names {
            let d = root.join(split_dir(ds.split)).join(class);
            fs::create_dir_all(&d).map_err(|e| DaitError::io(&d, e))?;
        }
        for item in &ds.items {
            let class = &ds.class_names[item.label];
            let path = root.join(split_dir(ds.split)).join(class).join(format!("{:05}.png", seen[item.label]));
            seen[item.label] += 1;
            write_image(&path, &item.image)?;
        }
    }
    Ok(())
}

/// CSV with header `f0,…,f{D-1},label`.
pub fn write_features(path: &Path, dump: &FeatureDump) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let d = dump.features.cols();
    let mut header: Vec<String> = (0..d).map(|i| format!("f{i}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (row, label) in dump.features.iter_rows().zip(&dump.labels) {
        let mut rec: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        rec.push(label.to_string());
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| DaitError::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureDump> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().last() != Some("label") {
        return Err(DaitError::Ingest(format!("{}: last column must be `label`", path.display())));
    }
    let d = header.len() - 1;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let bad = |what: &str| DaitError::Ingest(format!("{}: row {}: bad {what}", path.display(), line + 1));
        for field in rec.iter().take(d) {
            values.push(field.trim().parse::<f64>().map_err(|_| bad("feature"))?);
        }
        labels.push(rec.get(d).ok_or_else(|| bad("label"))?.trim().parse::<usize>().map_err(|_| bad("label"))?);
    }
    let features = Matrix::from_vec(labels.len(), d, values)?;
    Ok(FeatureDump::new(features, labels, path.display().to_string())?)
}

pub fn write_matrix(path: &Path, m: &Matrix, labels: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec![String::new()];
    header.extend(labels.iter().cloned());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (i, row) in m.iter_rows().enumerate() {
        let mut rec = vec![labels.get(i).cloned().unwrap_or_else(|| i.to_string())];
        rec.extend(row.iter().map(|v| format!("{v:.6}")));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| DaitError::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> DaitError {
    DaitError::Ingest(format!("{}: {e}", path.display()))
}
