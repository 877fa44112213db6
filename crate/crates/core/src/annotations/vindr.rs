//! Per-radiologist CSV rows, as distributed with public chest X-ray releases.
//!
//! Labels: `image_id,rad_id,class_name,x_min,y_min,x_max,y_max`. A row whose
//! class is `No finding` carries empty coordinates and records that the
//! radiologist reviewed the image without drawing anything.
//!
//! Image sizes are not part of the label file and come from a sidecar
//! `image_id,width,height`.

use std::fs::File;
use std::path::Path;

use super::{ingest_box, ImageRecord, LabeledBox, MultiAnnotatorDataset};
use crate::error::{Error, Result};

pub const NO_FINDING: &str = "No finding";
const LABEL_HEADER: [&str; 7] = [
    "image_id", "rad_id", "class_name", "x_min", "y_min", "x_max", "y_max",
];
const IMAGES_HEADER: [&str; 3] = ["image_id", "width", "height"];

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    Error::Parse {
        location: format!("{}:{line}", path.display()),
        message: e.to_string(),
    }
}

fn check_header(path: &Path, rdr: &mut csv::Reader<File>, expected: &[&str]) -> Result<()> {
    let header = rdr.headers().map_err(|e| csv_error(path, e))?;
    if !header.iter().eq(expected.iter().copied()) {
        return Err(Error::Parse {
            location: format!("{}:1", path.display()),
            message: format!("expected header `{}`", expected.join(",")),
        });
    }
    Ok(())
}

fn load_images(path: &Path) -> Result<Vec<ImageRecord>> {
    let mut rdr = reader(path)?;
    check_header(path, &mut rdr, &IMAGES_HEADER)?;
    let mut images = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let dim = |i: usize, name: &str| -> Result<usize> {
            rec[i].parse::<usize>().map_err(|_| Error::Parse {
                location: format!("{}:{line}:{name}", path.display()),
                message: format!("invalid {name} `{}`", &rec[i]),
            })
        };
        images.push(ImageRecord::new(&rec[0], dim(1, "width")?, dim(2, "height")?));
    }
    Ok(images)
}

pub fn load(labels: &Path, images_csv: &Path, classes: Option<&[String]>) -> Result<MultiAnnotatorDataset> {
    let images = load_images(images_csv)?;
    let mut ds = MultiAnnotatorDataset {
        classes: classes.map(<[String]>::to_vec).unwrap_or_default(),
        images,
        ..Default::default()
    };
    let fixed_classes = classes.is_some();

    let mut rdr = reader(labels)?;
    check_header(labels, &mut rdr, &LABEL_HEADER)?;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(labels, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let err = |field: &str, message: String| Error::Parse {
            location: format!("{}:{line}:{field}", labels.display()),
            message,
        };
        let (image_id, rad_id, class_name) = (&rec[0], &rec[1], &rec[2]);
        let img = ds
            .image(image_id)
            .cloned()
            .ok_or_else(|| Error::MissingImage(image_id.to_string()))?;
        if !ds.annotators.iter().any(|a| a == rad_id) {
            ds.annotators.push(rad_id.to_string());
        }
        let key = (image_id.to_string(), rad_id.to_string());

        if class_name == NO_FINDING {
            if (3..7).any(|i| !rec[i].is_empty()) {
                return Err(err("x_min", "`No finding` row with coordinates".into()));
            }
            ds.annotations.entry(key).or_default();
            continue;
        }
        let class_id = match ds.class_index(class_name) {
            Some(id) => id,
            None if !fixed_classes => {
                ds.classes.push(class_name.to_string());
                ds.classes.len() - 1
            }
            None => return Err(Error::UnknownClass(class_name.to_string())),
        };
        let mut coords = [0.0; 4];
        for (slot, (i, name)) in coords.iter_mut().zip(LABEL_HEADER[3..].iter().enumerate()) {
            *slot = rec[3 + i]
                .parse::<f64>()
                .map_err(|_| err(name, format!("invalid coordinate `{}`", &rec[3 + i])))?;
        }
        let bbox = ingest_box(coords, &img).map_err(|m| err("x_min", m))?;
        ds.annotations
            .entry(key)
            .or_default()
            .push(LabeledBox::new(bbox, class_id));
    }
    if ds.classes.is_empty() {
        // an all-"No finding" corpus still needs a class list
        ds.classes.push(NO_FINDING.to_string());
    }
    ds.validate()?;
    Ok(ds)
}

/// Writes the label CSV and the image sidecar. Scores are not representable
/// and are dropped.
pub fn save(ds: &MultiAnnotatorDataset, labels: &Path, images_csv: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(images_csv).map_err(|e| csv_error(images_csv, e))?;
    w.write_record(IMAGES_HEADER).map_err(|e| csv_error(images_csv, e))?;
    for img in &ds.images {
        w.write_record([img.image_id.clone(), img.width.to_string(), img.height.to_string()])
            .map_err(|e| csv_error(images_csv, e))?;
    }
    w.flush().map_err(|e| Error::io(images_csv, e))?;

    let mut w = csv::Writer::from_path(labels).map_err(|e| csv_error(labels, e))?;
    w.write_record(LABEL_HEADER).map_err(|e| csv_error(labels, e))?;
    for img in &ds.images {
        for rad in &ds.annotators {
            let Some(boxes) = ds.annotations.get(&(img.image_id.clone(), rad.clone())) else {
                continue;
            };
            if boxes.is_empty() {
                w.write_record([&img.image_id, rad, NO_FINDING, "", "", "", ""])
                    .map_err(|e| csv_error(labels, e))?;
            }
            for b in boxes {
                let c = b.bbox.coords().map(|v| v.to_string());
                w.write_record([
                    img.image_id.as_str(),
                    rad,
                    &ds.classes[b.class_id],
                    &c[0],
                    &c[1],
                    &c[2],
                    &c[3],
                ])
                .map_err(|e| csv_error(labels, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(labels, e))
}
