use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::image::AnnotatedImage;
use super::labels::{parse_voc_xml, parse_yolo_txt, write_voc_xml};
use super::pgm::{load_pgm, save_pgm};
use crate::error::{Error, Result};

/// One manifest line: image path and label path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub label: PathBuf,
}

/// Reads `image<TAB>label` lines. Relative paths resolve against the manifest's
/// directory; blank lines and `#` comments are skipped.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(img), Some(label), None) if !img.is_empty() && !label.is_empty() => out.push(ManifestEntry {
                image: base.join(img),
                label: base.join(label),
            }),
            _ => {
                return Err(Error::Parse {
                    format: "manifest",
                    line: i + 1,
                    msg: "expected image<TAB>label".into(),
                })
            }
        }
    }
    Ok(out)
}

/// Loads one sample; `.xml` labels are VOC, anything else YOLO text.
pub fn load_sample(entry: &ManifestEntry, classes: &[&str]) -> Result<AnnotatedImage> {
    let image = load_pgm(&entry.image)?;
    let bytes = std::fs::read(&entry.label).map_err(|e| Error::io(&entry.label, e))?;
    let with_path = |e: Error| match e {
        Error::Parse { format, line, msg } => Error::Parse {
            format,
            line,
            msg: format!("{}: {msg}", entry.label.display()),
        },
        e => e,
    };
    let boxes = if entry.label.extension().is_some_and(|x| x == "xml") {
        let voc = parse_voc_xml(&bytes).map_err(with_path)?;
        if voc.width.is_some_and(|w| w != image.width()) || voc.height.is_some_and(|h| h != image.height()) {
            return Err(Error::invalid(
                "load_sample",
                format!(
                    "{} declares {:?}x{:?} but the image is {}x{}",
                    entry.label.display(),
                    voc.width,
                    voc.height,
                    image.width(),
                    image.height()
                ),
            ));
        }
        voc.labeled_boxes(classes).map_err(with_path)?
    } else {
        parse_yolo_txt(&bytes, image.width(), image.height()).map_err(with_path)?
    };
    AnnotatedImage::new(image, boxes, entry.image.display().to_string(), 1)
}

pub fn load_manifest(path: impl AsRef<Path>, classes: &[&str]) -> Result<Vec<AnnotatedImage>> {
    read_manifest(path)?.iter().map(|e| load_sample(e, classes)).collect()
}

/// Writes `images/NNNNN.pgm` (16-bit), `labels/NNNNN.xml` and `manifest.tsv`
/// under `dir`; returns the manifest path.
pub fn write_dataset(dir: impl AsRef<Path>, items: &[AnnotatedImage], classes: &[&str]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    for sub in ["images", "labels"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut manifest = String::new();
    for (i, a) in items.iter().enumerate() {
        let img = format!("images/{i:05}.pgm");
        let label = format!("labels/{i:05}.xml");
        save_pgm(&a.image, u16::MAX, dir.join(&img))?;
        let xml = write_voc_xml(&format!("{i:05}.pgm"), a.width(), a.height(), &a.boxes, classes)?;
        let lp = dir.join(&label);
        std::fs::write(&lp, xml).map_err(|e| Error::io(&lp, e))?;
        manifest.push_str(&format!("{img}\t{label}\n"));
    }
    let mp = dir.join("manifest.tsv");
    std::fs::write(&mp, manifest).map_err(|e| Error::io(&mp, e))?;
    Ok(mp)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
    /// Set when a ratio left a split empty on a non-empty input.
    pub warnings: Vec<String>,
}

/// Shuffles with `seed` and cuts at `round(n r_train)` and `round(n r_val)`;
/// the test split takes the rest.
pub fn split_dataset<T: Clone>(items: &[T], ratios: [f64; 3], seed: u64) -> Result<Split<T>> {
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || ratios.iter().any(|r| !(*r >= 0.0)) {
        return Err(Error::invalid("split_dataset", format!("ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let n = items.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64 * ratios[0]).round() as usize).min(n);
    let n_val = ((n as f64 * ratios[1]).round() as usize).min(n - n_train);
    let pick = |r: &[usize]| r.iter().map(|&i| items[i].clone()).collect::<Vec<T>>();
    let split = Split {
        train: pick(&order[..n_train]),
        val: pick(&order[n_train..n_train + n_val]),
        test: pick(&order[n_train + n_val..]),
        warnings: Vec::new(),
    };
    let mut split = split;
    if n > 0 {
        for (name, len) in [("train", split.train.len()), ("val", split.val.len()), ("test", split.test.len())] {
            if len == 0 {
                split.warnings.push(format!("{name} split is empty for {n} items at ratios {ratios:?}"));
            }
        }
    }
    Ok(split)
}
