//! `images/` + `labels/` directories with matching file stems.

use std::path::{Path, PathBuf};

use crate::boxes::GroundTruth;
use crate::error::{EvalError, Result};
use crate::image::Image;
use crate::labels::{format_yolo_labels, load_yolo_labels, LabelWarning};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub stem: String,
    pub image: Image,
    pub gts: Vec<GroundTruth>,
}

/// Per-file label warnings collected while loading.
pub type Warnings = Vec<(PathBuf, LabelWarning)>;

/// Read every `.ppm` in `images` with its label file from `labels`. A
/// missing label file means an image with no boxes.
pub fn load_dataset(images: &Path, labels: &Path, nc: usize) -> Result<(Vec<Sample>, Warnings)> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(images)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "ppm"));
    paths.sort();
    if paths.is_empty() {
        return Err(EvalError::Dataset(format!("no .ppm images in {}", images.display())));
    }
    let mut samples = Vec::new();
    let mut warnings = Vec::new();
    for p in paths {
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let image = Image::read_ppm(&p)?;
        let label_path = labels.join(format!("{stem}.txt"));
        let gts = if label_path.exists() {
            let (gts, w) = load_yolo_labels(&label_path, image.width, image.height, nc)?;
            warnings.extend(w.into_iter().map(|w| (label_path.clone(), w)));
            gts
        } else {
            Vec::new()
        };
        samples.push(Sample { stem, image, gts });
    }
    Ok((samples, warnings))
}

/// Write samples as `<root>/images/<stem>.ppm` and `<root>/labels/<stem>.txt`.
pub fn save_dataset(root: &Path, samples: &[Sample]) -> Result<()> {
    let (img_dir, lbl_dir) = (root.join("images"), root.join("labels"));
    std::fs::create_dir_all(&img_dir)?;
    std::fs::create_dir_all(&lbl_dir)?;
    for s in samples {
        s.image.write_ppm(&img_dir.join(format!("{}.ppm", s.stem)))?;
        std::fs::write(
            lbl_dir.join(format!("{}.txt", s.stem)),
            format_yolo_labels(&s.gts, s.image.width, s.image.height),
        )?;
    }
    Ok(())
}
