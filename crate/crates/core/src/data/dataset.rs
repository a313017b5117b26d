//! On-disk layout: `<root>/{left,right,disp}/<id>.<ext>`, images as PPM (or
//! PGM for single-channel data), disparity as PFM, and an optional
//! `mask/<id>.pgm` marking pixels visible in both views.

use std::fs;
use std::path::Path;

use super::{pfm, pnm, StereoSample};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

fn image_ext(t: &Tensor<f32>) -> &'static str {
    if t.shape().c() == 1 {
        "pgm"
    } else {
        "ppm"
    }
}

/// Writes samples with ids `000000`, `000001`, ...
pub fn write_dataset(root: &Path, samples: &[StereoSample]) -> Result<()> {
    for dir in ["left", "right", "disp", "mask"] {
        fs::create_dir_all(root.join(dir))?;
    }
    for (i, s) in samples.iter().enumerate() {
        let id = format!("{i:06}");
        let ext = image_ext(&s.left);
        fs::write(root.join("left").join(format!("{id}.{ext}")), pnm::write_pnm(&s.left, 255)?)?;
        fs::write(root.join("right").join(format!("{id}.{ext}")), pnm::write_pnm(&s.right, 255)?)?;
        fs::write(root.join("disp").join(format!("{id}.pfm")), pfm::write_pfm_disparity(&s.gt_disp)?)?;
        let mask = Tensor::from_vec(
            Shape::new(1, 1, s.height(), s.width()),
            s.visible.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
        )?;
        fs::write(root.join("mask").join(format!("{id}.pgm")), pnm::write_pnm(&mask, 255)?)?;
    }
    Ok(())
}

fn read_image(dir: &Path, id: &str) -> Result<Tensor<f32>> {
    for ext in ["ppm", "pgm"] {
        let p = dir.join(format!("{id}.{ext}"));
        if p.exists() {
            return pnm::read_pnm(&fs::read(&p)?).map_err(|e| annotate(e, &p));
        }
    }
    Err(Error::Data(format!("no image `{id}` in {}", dir.display())))
}

fn annotate(e: Error, p: &Path) -> Error {
    match e {
        Error::Parse { offset, msg } => Error::Parse {
            offset,
            msg: format!("{}: {msg}", p.display()),
        },
        other => other,
    }
}

/// Loads every id present in `disp/`, sorted by id.
pub fn load_dataset(root: &Path) -> Result<Vec<StereoSample>> {
    let disp_dir = root.join("disp");
    let mut ids: Vec<String> = fs::read_dir(&disp_dir)
        .map_err(|e| Error::Data(format!("cannot list {}: {e}", disp_dir.display())))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            if p.extension()? != "pfm" {
                return None;
            }
            Some(p.file_stem()?.to_string_lossy().into_owned())
        })
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(Error::Data(format!("no samples under {}", root.display())));
    }
    ids.iter()
        .map(|id| {
            let left = read_image(&root.join("left"), id)?;
            let right = read_image(&root.join("right"), id)?;
            let dp = disp_dir.join(format!("{id}.pfm"));
            let gt_disp = pfm::read_pfm_disparity(&fs::read(&dp)?).map_err(|e| annotate(e, &dp))?;
            if left.shape() != right.shape()
                || left.shape().h() != gt_disp.height
                || left.shape().w() != gt_disp.width
            {
                return Err(Error::Data(format!("sample `{id}` has mismatched extents")));
            }
            let mp = root.join("mask").join(format!("{id}.pgm"));
            let visible = if mp.exists() {
                let m = pnm::read_pnm(&fs::read(&mp)?).map_err(|e| annotate(e, &mp))?;
                m.data().iter().map(|&v| v > 0.5).collect()
            } else {
                vec![true; gt_disp.height * gt_disp.width]
            };
            Ok(StereoSample {
                left,
                right,
                gt_disp,
                visible,
            })
        })
        .collect()
}
