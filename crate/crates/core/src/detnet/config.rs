use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::msfa::DEFAULT_DILATIONS;

/// Strides of the two retained detection scales.
pub const STRIDES: [usize; 2] = [8, 16];
pub const ANCHORS_PER_SCALE: usize = 3;
/// Input sides must be a multiple of the deepest backbone stride.
pub const INPUT_MULTIPLE: usize = 32;

/// Reference channel widths of the five backbone stages before the width multiplier.
const BASE_WIDTHS: [usize; 5] = [64, 128, 256, 512, 1024];

/// Anchor `(width, height)` in input pixels.
pub type Anchor = (f64, f64);

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Multiplier on the reference stage widths 64/128/256/512/1024.
    pub width: f64,
    /// Bottleneck blocks inside every C3 stage.
    pub depth: usize,
    pub strides: [usize; 2],
    pub anchors: [[Anchor; ANCHORS_PER_SCALE]; 2],
    pub num_classes: usize,
    pub dyhead_blocks: usize,
    pub msfa_dilations: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            width: 0.125,
            depth: 1,
            strides: STRIDES,
            anchors: default_anchors(),
            num_classes: 1,
            dyhead_blocks: 2,
            msfa_dilations: DEFAULT_DILATIONS.to_vec(),
        }
    }
}

/// k-means anchors of the default synthetic scenes (targets 2-6 px).
pub fn default_anchors() -> [[Anchor; 3]; 2] {
    [
        [(2.0, 2.0), (3.0, 3.0), (4.0, 4.0)],
        [(5.0, 5.0), (6.0, 6.0), (8.0, 8.0)],
    ]
}

impl ModelConfig {
    /// A narrow configuration for fast tests.
    pub fn tiny() -> Self {
        ModelConfig {
            width: 0.0625,
            dyhead_blocks: 1,
            ..Default::default()
        }
    }

    /// Channel width of backbone stage `i` (0..5).
    pub fn stage_width(&self, i: usize) -> usize {
        ((BASE_WIDTHS[i] as f64 * self.width).round() as usize).max(2)
    }

    /// Shared width of the attention head.
    pub fn head_width(&self) -> usize {
        self.stage_width(2)
    }

    /// Values per anchor: box (4) + objectness (1) + classes.
    pub fn outputs_per_anchor(&self) -> usize {
        5 + self.num_classes
    }

    pub fn outputs_per_cell(&self) -> usize {
        ANCHORS_PER_SCALE * self.outputs_per_anchor()
    }

    /// Returns the same configuration with every anchor multiplied by `k`.
    pub fn with_anchor_scale(mut self, k: f64) -> Self {
        for scale in &mut self.anchors {
            for a in scale.iter_mut() {
                *a = (a.0 * k, a.1 * k);
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        if !(self.width.is_finite() && self.width > 0.0) {
            return bad(format!("width {} must be positive", self.width));
        }
        if self.strides != STRIDES {
            return bad(format!(
                "strides {:?} unsupported: the detector has exactly two scales at strides 8 and 16",
                self.strides
            ));
        }
        for (s, scale) in self.anchors.iter().enumerate() {
            for &(w, h) in scale {
                if !(w.is_finite() && h.is_finite() && w > 0.0 && h > 0.0) {
                    return bad(format!("anchor ({w}, {h}) at scale {s} must be positive"));
                }
            }
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.dyhead_blocks == 0 {
            return bad("dyhead_blocks must be at least 1".into());
        }
        if self.msfa_dilations.is_empty() || self.msfa_dilations.contains(&0) {
            return bad(format!("msfa_dilations {:?} must be non-empty and positive", self.msfa_dilations));
        }
        Ok(())
    }

    /// Flat `key=value` text, one key per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let anchors = self
            .anchors
            .iter()
            .map(|scale| {
                scale
                    .iter()
                    .map(|(w, h)| format!("{w},{h}"))
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect::<Vec<_>>()
            .join(" | ");
        let join = |v: &[usize]| v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
        writeln!(s, "in_channels={}", self.in_channels).unwrap();
        writeln!(s, "width={}", self.width).unwrap();
        writeln!(s, "depth={}", self.depth).unwrap();
        writeln!(s, "strides={}", join(&self.strides)).unwrap();
        writeln!(s, "anchors={anchors}").unwrap();
        writeln!(s, "num_classes={}", self.num_classes).unwrap();
        writeln!(s, "dyhead_blocks={}", self.dyhead_blocks).unwrap();
        writeln!(s, "msfa_dilations={}", join(&self.msfa_dilations)).unwrap();
        s
    }

    /// Parses the `key=value` format; unknown keys are rejected, missing keys keep defaults.
    /// Blank lines and `#` comments are ignored.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |msg: String| Error::Parse {
                format: "model config",
                line: line_no,
                msg,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let usize_list = |v: &str| -> Result<Vec<usize>> {
                v.split(',')
                    .map(|p| p.trim().parse::<usize>().map_err(|e| err(format!("{key}: {e}"))))
                    .collect()
            };
            match key {
                "in_channels" => cfg.in_channels = value.parse().map_err(|e| err(format!("{key}: {e}")))?,
                "width" => cfg.width = value.parse().map_err(|e| err(format!("{key}: {e}")))?,
                "depth" => cfg.depth = value.parse().map_err(|e| err(format!("{key}: {e}")))?,
                "num_classes" => cfg.num_classes = value.parse().map_err(|e| err(format!("{key}: {e}")))?,
                "dyhead_blocks" => cfg.dyhead_blocks = value.parse().map_err(|e| err(format!("{key}: {e}")))?,
                "msfa_dilations" => cfg.msfa_dilations = usize_list(value)?,
                "strides" => {
                    let v = usize_list(value)?;
                    cfg.strides = v
                        .try_into()
                        .map_err(|v: Vec<usize>| err(format!("strides needs exactly 2 values, got {}", v.len())))?;
                }
                "anchors" => cfg.anchors = parse_anchors(value).map_err(err)?,
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_anchors(value: &str) -> std::result::Result<[[Anchor; 3]; 2], String> {
    let scales: Vec<&str> = value.split('|').collect();
    if scales.len() != 2 {
        return Err(format!("anchors needs 2 scales separated by '|', got {}", scales.len()));
    }
    let mut out = [[(0.0, 0.0); 3]; 2];
    for (s, text) in scales.iter().enumerate() {
        let pairs: Vec<&str> = text.split_whitespace().collect();
        if pairs.len() != ANCHORS_PER_SCALE {
            return Err(format!("scale {s} needs 3 anchors, got {}", pairs.len()));
        }
        for (a, p) in pairs.iter().enumerate() {
            let (w, h) = p.split_once(',').ok_or_else(|| format!("anchor {p:?} is not w,h"))?;
            out[s][a] = (
                w.parse().map_err(|e| format!("anchor {p:?}: {e}"))?,
                h.parse().map_err(|e| format!("anchor {p:?}: {e}"))?,
            );
        }
    }
    Ok(out)
}

/// Six anchors from box sizes by k-means with `1 - IoU` distance (boxes
/// aligned at a common corner), sorted by area and split 3/3 across the scales.
pub fn kmeans_anchors(sizes: &[(f64, f64)], seed: u64) -> Result<[[Anchor; 3]; 2]> {
    const K: usize = 6;
    if sizes.len() < K {
        return Err(Error::invalid("kmeans_anchors", format!("need at least {K} boxes, got {}", sizes.len())));
    }
    let iou = |a: Anchor, b: Anchor| {
        let inter = a.0.min(b.0) * a.1.min(b.1);
        inter / (a.0 * a.1 + b.0 * b.1 - inter)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // k-means++ style seeding on the 1 - IoU distance
    let mut centers = vec![sizes[rng.random_range(0..sizes.len())]];
    while centers.len() < K {
        let d: Vec<f64> = sizes
            .iter()
            .map(|&s| centers.iter().map(|&c| 1.0 - iou(s, c)).fold(f64::MAX, f64::min).powi(2))
            .collect();
        let total: f64 = d.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..sizes.len())
        } else {
            let mut u = rng.random_range(0.0..total);
            d.iter().position(|&v| {
                u -= v;
                u <= 0.0
            })
            .unwrap_or(sizes.len() - 1)
        };
        centers.push(sizes[pick]);
    }
    for _ in 0..100 {
        let mut sum = [(0.0, 0.0, 0usize); K];
        for &s in sizes {
            let best = (0..K)
                .max_by(|&a, &b| iou(s, centers[a]).total_cmp(&iou(s, centers[b])))
                .unwrap();
            sum[best].0 += s.0;
            sum[best].1 += s.1;
            sum[best].2 += 1;
        }
        let next: Vec<Anchor> = (0..K)
            .map(|k| match sum[k] {
                (_, _, 0) => centers[k],
                (w, h, n) => (w / n as f64, h / n as f64),
            })
            .collect();
        let moved = next.iter().zip(&centers).any(|(a, b)| (a.0 - b.0).abs() + (a.1 - b.1).abs() > 1e-9);
        centers = next;
        if !moved {
            break;
        }
    }
    centers.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)));
    let round = |a: Anchor| ((a.0 * 100.0).round() / 100.0, (a.1 * 100.0).round() / 100.0);
    Ok([
        [round(centers[0]), round(centers[1]), round(centers[2])],
        [round(centers[3]), round(centers[4]), round(centers[5])],
    ])
}
