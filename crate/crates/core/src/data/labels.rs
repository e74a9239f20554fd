use super::image::LabeledBox;
use crate::error::{Error, Result};
use crate::postprocess::BBox;

/// One `<object>` of a VOC file.
#[derive(Clone, Debug, PartialEq)]
pub struct VocObject {
    pub name: String,
    /// Converted to 0-based half-open pixels.
    pub bbox: BBox,
    /// Source line of the object element.
    pub line: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VocAnnotation {
    pub filename: Option<String>,
    pub width: Option<usize>,
    pub height: Option<usize>,
    pub objects: Vec<VocObject>,
}

impl VocAnnotation {
    /// Maps object names to indices of `classes`.
    pub fn labeled_boxes(&self, classes: &[&str]) -> Result<Vec<LabeledBox>> {
        self.objects
            .iter()
            .map(|o| match classes.iter().position(|c| *c == o.name) {
                Some(class_id) => Ok(LabeledBox { class_id, bbox: o.bbox }),
                None => Err(voc_err(o.line, format!("unknown class {:?}, expected one of {classes:?}", o.name))),
            })
            .collect()
    }
}

fn voc_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        format: "voc",
        line,
        msg: msg.into(),
    }
}

fn line_of(doc: &roxmltree::Document, node: roxmltree::Node) -> usize {
    doc.text_pos_at(node.range().start).row as usize
}

fn child<'a, 'i>(node: roxmltree::Node<'a, 'i>, name: &str) -> Option<roxmltree::Node<'a, 'i>> {
    node.children().find(|c| c.is_element() && c.has_tag_name(name))
}

fn text_of(doc: &roxmltree::Document, parent: roxmltree::Node, name: &str) -> Result<String> {
    let node = child(parent, name).ok_or_else(|| {
        voc_err(line_of(doc, parent), format!("<{}> has no <{name}>", parent.tag_name().name()))
    })?;
    Ok(node.text().unwrap_or("").trim().to_string())
}

fn number(doc: &roxmltree::Document, parent: roxmltree::Node, name: &str) -> Result<f64> {
    let s = text_of(doc, parent, name)?;
    let line = child(parent, name).map_or(0, |n| line_of(doc, n));
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(voc_err(line, format!("<{name}> value {s:?} is not a finite number"))),
    }
}

/// Parses a VOC-style annotation. Corners are 1-based inclusive in the file
/// and become `(xmin - 1, ymin - 1, xmax, ymax)`.
pub fn parse_voc_xml(bytes: &[u8]) -> Result<VocAnnotation> {
    let text = std::str::from_utf8(bytes).map_err(|e| {
        let line = bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count() + 1;
        voc_err(line, "file is not valid UTF-8")
    })?;
    let doc = roxmltree::Document::parse(text).map_err(|e| voc_err(e.pos().row as usize, e.to_string()))?;
    let root = doc.root_element();
    if !root.has_tag_name("annotation") {
        return Err(voc_err(line_of(&doc, root), format!("root element is <{}>, expected <annotation>", root.tag_name().name())));
    }
    let filename = child(root, "filename").and_then(|n| n.text()).map(|s| s.trim().to_string());
    let (mut width, mut height) = (None, None);
    if let Some(size) = child(root, "size") {
        let dim = |name: &str| -> Result<usize> {
            let v = number(&doc, size, name)?;
            if v < 1.0 || v.fract() != 0.0 {
                return Err(voc_err(line_of(&doc, size), format!("<{name}> {v} is not a positive integer")));
            }
            Ok(v as usize)
        };
        width = Some(dim("width")?);
        height = Some(dim("height")?);
    }
    let mut objects = Vec::new();
    for obj in root.children().filter(|c| c.is_element() && c.has_tag_name("object")) {
        let line = line_of(&doc, obj);
        let name = text_of(&doc, obj, "name")?;
        if name.is_empty() {
            return Err(voc_err(line, "object has an empty <name>"));
        }
        let bb = child(obj, "bndbox").ok_or_else(|| voc_err(line, "object has no <bndbox>"))?;
        let (xmin, ymin) = (number(&doc, bb, "xmin")?, number(&doc, bb, "ymin")?);
        let (xmax, ymax) = (number(&doc, bb, "xmax")?, number(&doc, bb, "ymax")?);
        let bline = line_of(&doc, bb);
        if xmax < xmin || ymax < ymin {
            return Err(voc_err(bline, format!("inverted box xmin={xmin} ymin={ymin} xmax={xmax} ymax={ymax}")));
        }
        if xmin < 1.0 || ymin < 1.0 {
            return Err(voc_err(bline, format!("xmin={xmin} ymin={ymin} below the 1-based origin")));
        }
        if width.is_some_and(|w| xmax > w as f64) || height.is_some_and(|h| ymax > h as f64) {
            return Err(voc_err(bline, format!("box xmax={xmax} ymax={ymax} exceeds the image size")));
        }
        objects.push(VocObject {
            name,
            bbox: BBox::new(xmin - 1.0, ymin - 1.0, xmax, ymax),
            line,
        });
    }
    Ok(VocAnnotation {
        filename,
        width,
        height,
        objects,
    })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes a VOC file for 0-based half-open boxes.
pub fn write_voc_xml(filename: &str, width: usize, height: usize, boxes: &[LabeledBox], classes: &[&str]) -> Result<String> {
    let mut s = String::from("<annotation>\n");
    s.push_str(&format!("  <filename>{}</filename>\n", escape(filename)));
    s.push_str(&format!(
        "  <size>\n    <width>{width}</width>\n    <height>{height}</height>\n    <depth>1</depth>\n  </size>\n"
    ));
    for b in boxes {
        let name = classes
            .get(b.class_id)
            .ok_or_else(|| Error::invalid("write_voc_xml", format!("class {} has no name", b.class_id)))?;
        s.push_str(&format!(
            "  <object>\n    <name>{}</name>\n    <bndbox>\n      <xmin>{}</xmin>\n      <ymin>{}</ymin>\n      <xmax>{}</xmax>\n      <ymax>{}</ymax>\n    </bndbox>\n  </object>\n",
            escape(name),
            b.bbox.x1 + 1.0,
            b.bbox.y1 + 1.0,
            b.bbox.x2,
            b.bbox.y2
        ));
    }
    s.push_str("</annotation>\n");
    Ok(s)
}

fn yolo_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        format: "yolo",
        line,
        msg: msg.into(),
    }
}

/// Parses `class cx cy w h` lines (normalized) into pixel boxes on a
/// `width x height` image. Blank lines are ignored.
pub fn parse_yolo_txt(bytes: &[u8], width: usize, height: usize) -> Result<Vec<LabeledBox>> {
    let text = std::str::from_utf8(bytes).map_err(|e| {
        let line = bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count() + 1;
        yolo_err(line, "file is not valid UTF-8")
    })?;
    let (w, h) = (width as f64, height as f64);
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 5 {
            return Err(yolo_err(line, format!("expected 5 fields, found {}", fields.len())));
        }
        let class_id: usize = fields[0]
            .parse()
            .map_err(|_| yolo_err(line, format!("class {:?} is not a non-negative integer", fields[0])))?;
        let mut v = [0.0; 4];
        for (k, f) in fields[1..].iter().enumerate() {
            v[k] = match f.parse::<f64>() {
                Ok(x) if (0.0..=1.0).contains(&x) => x,
                _ => return Err(yolo_err(line, format!("field {} value {f:?} is not in [0, 1]", k + 2))),
            };
        }
        if v[2] == 0.0 || v[3] == 0.0 {
            return Err(yolo_err(line, "zero-size box"));
        }
        let bbox = BBox::from_center(v[0] * w, v[1] * h, v[2] * w, v[3] * h).clip(w, h);
        if !bbox.is_valid() {
            return Err(yolo_err(line, "box lies outside the image"));
        }
        out.push(LabeledBox { class_id, bbox });
    }
    Ok(out)
}

pub fn write_yolo_txt(boxes: &[LabeledBox], width: usize, height: usize) -> String {
    let (w, h) = (width as f64, height as f64);
    boxes
        .iter()
        .map(|b| {
            let (cx, cy) = b.bbox.center();
            format!(
                "{} {:.6} {:.6} {:.6} {:.6}\n",
                b.class_id,
                cx / w,
                cy / h,
                b.bbox.width() / w,
                b.bbox.height() / h
            )
        })
        .collect()
}
