use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::pnm::Raster;
use super::{grade_to_disk, Sample, NUM_GRADES};
use crate::error::{Error, Result};
use crate::mca::{BiomarkerPanel, Codel, Idh, BIOMARKERS};
use crate::numerics::Tensor;

pub const LABELS_FILE: &str = "labels.csv";
const BASE_COLUMNS: [&str; 3] = ["sample_id", "patient_id", "grade"];

fn check_id(id: &str, file: &Path) -> Result<()> {
    if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
        return Err(Error::format(file, "sample_id", format!("{id:?} is not a usable file name")));
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes the image (and mask, when present) of one sample.
pub fn save_sample(sample: &Sample, dir: &Path) -> Result<()> {
    check_id(&sample.id, Path::new(&sample.id))?;
    let (h, w) = (sample.height(), sample.width());
    let px = sample.image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let images = dir.join("images");
    create_dir(&images)?;
    Raster::new(w, h, 3, px)?.write(&images.join(format!("{}.ppm", sample.id)))?;
    if let Some(mask) = &sample.focus_mask {
        let masks = dir.join("masks");
        create_dir(&masks)?;
        let px = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
        Raster::new(w, h, 1, px)?.write(&masks.join(format!("{}.pgm", sample.id)))?;
    }
    Ok(())
}

/// Writes images, masks and `labels.csv`. Biomarker columns are written only
/// when every sample has a panel.
pub fn save_dataset(samples: &[Sample], dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let with_panels = samples.iter().all(|s| s.panel.is_some());
    let path = dir.join(LABELS_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    let mut header: Vec<&str> = BASE_COLUMNS.to_vec();
    if with_panels {
        header.extend(BIOMARKERS);
    }
    w.write_record(&header).map_err(|e| csv_error(&path, e))?;
    for s in samples {
        save_sample(s, dir)?;
        let mut row = vec![s.id.clone(), s.patient_id.clone(), grade_to_disk(s.grade).to_string()];
        if let (true, Some(p)) = (with_panels, &s.panel) {
            row.push(match p.idh() {
                Idh::Wildtype => "wt".into(),
                Idh::Mutant => "mut".into(),
            });
            row.push(match p.codel() {
                Codel::Intact => "intact".into(),
                Codel::Codeleted => "codel".into(),
            });
            row.extend(p.cnv().iter().map(|v| v.to_string()));
        }
        w.write_record(&row).map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, "csv", format!("{other:?}")),
    }
}

/// Reads a dataset directory. Missing biomarker columns give samples without
/// panels; missing mask files give samples without focus masks.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let path = dir.join(LABELS_FILE);
    let mut r = csv::Reader::from_path(&path).map_err(|e| csv_error(&path, e))?;
    let headers = r.headers().map_err(|e| csv_error(&path, e))?.clone();
    let col: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h.trim(), i)).collect();
    for c in BASE_COLUMNS {
        if !col.contains_key(c) {
            return Err(Error::format(&path, c, "missing column"));
        }
    }
    let present: Vec<&str> = BIOMARKERS.iter().copied().filter(|b| col.contains_key(b)).collect();
    if !present.is_empty() && present.len() != BIOMARKERS.len() {
        let missing = BIOMARKERS.iter().find(|b| !col.contains_key(*b)).expect("some missing");
        return Err(Error::format(&path, *missing, "missing column (biomarker columns must be all present or all absent)"));
    }

    let mut samples = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(&path, e))?;
        let field = |name: &str| -> Result<&str> {
            rec.get(col[name])
                .map(str::trim)
                .ok_or_else(|| Error::format(&path, name, format!("row {} is too short", line + 2)))
        };
        let id = field("sample_id")?.to_string();
        check_id(&id, &path)?;
        let grade_txt = field("grade")?;
        let grade = match grade_txt.parse::<usize>() {
            Ok(g) if (2..2 + NUM_GRADES).contains(&g) => g - 2,
            _ => {
                return Err(Error::format(&path, "grade", format!("sample {id}: expected 2, 3 or 4, found {grade_txt:?}")))
            }
        };
        let panel = if present.is_empty() {
            None
        } else {
            Some(parse_panel(&path, &id, &field)?)
        };

        let img_path = dir.join("images").join(format!("{id}.ppm"));
        if !img_path.exists() {
            return Err(Error::format(&img_path, "image", format!("sample {id}: image file not found")));
        }
        let raster = Raster::read(&img_path)?;
        if raster.channels != 3 {
            return Err(Error::format(&img_path, "magic", "expected an RGB (P6) image"));
        }
        let (h, w) = (raster.height, raster.width);
        let image = Tensor::new(&[h, w, 3], raster.pixels.iter().map(|&b| b as f32 / 255.0).collect())?;

        let mask_path = dir.join("masks").join(format!("{id}.pgm"));
        let focus_mask = if mask_path.exists() {
            let m = Raster::read(&mask_path)?;
            if m.channels != 1 || m.width != w || m.height != h {
                return Err(Error::format(&mask_path, "pixels", format!("mask must be a {w}x{h} grayscale image")));
            }
            Some(m.pixels.iter().map(|&b| b >= 128).collect())
        } else {
            None
        };

        samples.push(Sample {
            id,
            patient_id: field("patient_id")?.to_string(),
            grade,
            panel,
            image,
            focus_mask,
        });
    }
    Ok(samples)
}

fn parse_panel<'a>(
    path: &Path,
    id: &str,
    field: &dyn Fn(&str) -> Result<&'a str>,
) -> Result<BiomarkerPanel> {
    let idh = match field("idh")? {
        "wt" => Idh::Wildtype,
        "mut" => Idh::Mutant,
        other => return Err(Error::format(path, "idh", format!("sample {id}: expected wt or mut, found {other:?}"))),
    };
    let codel = match field("codel_1p19q")? {
        "intact" => Codel::Intact,
        "codel" => Codel::Codeleted,
        other => {
            return Err(Error::format(
                path,
                "codel_1p19q",
                format!("sample {id}: expected intact or codel, found {other:?}"),
            ))
        }
    };
    let mut cnv = [0i8; 4];
    for (slot, name) in cnv.iter_mut().zip(&BIOMARKERS[2..]) {
        let txt = field(name)?;
        let v: i64 = txt
            .parse()
            .map_err(|_| Error::format(path, *name, format!("sample {id}: not an integer: {txt:?}")))?;
        *slot = i8::try_from(v).map_err(|_| Error::Domain {
            field: (*name).into(),
            value: txt.into(),
        })?;
    }
    BiomarkerPanel::new(idh, codel, cnv)
}
