//! Synthetic scenes, label formats, augmentation, upsampling and dataset files.

mod augment;
mod dataset;
mod image;
mod labels;
mod pgm;
mod synth;
mod upsample;

pub use augment::{augment, random_ops, AugOp};
pub use dataset::{load_manifest, load_sample, read_manifest, split_dataset, write_dataset, ManifestEntry, Split};
pub use image::{make_batch, AnnotatedImage, GrayImage, LabeledBox};
pub use labels::{parse_voc_xml, parse_yolo_txt, write_voc_xml, write_yolo_txt, VocAnnotation, VocObject};
pub use pgm::{load_pgm, read_pgm, save_pgm, write_pgm, write_ppm};
pub use synth::{
    synthesize_dataset, synthesize_scene, synthesize_scene_detailed, Background, SceneSpec, SynthTarget,
    FWHM_PER_SIGMA,
};
pub use upsample::{resize_by, upsample, upsample4x, UpsampleMethod};
