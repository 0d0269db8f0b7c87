//! Loading models and inputs, writing tensors, images and CSV.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use xplain_core::io::{decode_tensor, model_hash, write_tensor};
use xplain_core::model::{load_model_bytes, model_to_bytes, LoadOptions, Model};
use xplain_core::viz::{read_image, RGBImage};
use xplain_core::{Error, Saliency, Tensor};

use crate::error::{CliError, CliResult, Stage};

/// A model with the hash of the files it was read from.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub model: Model,
    pub hash: String,
    pub path: PathBuf,
}

/// The weights file next to a manifest: same stem, `.xwts` extension.
pub fn default_weights_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("xwts")
}

pub fn load_model(manifest: &Path, weights: Option<&Path>) -> CliResult<LoadedModel> {
    let weights = weights.map_or_else(|| default_weights_path(manifest), Path::to_path_buf);
    let read = |p: &Path| {
        fs::read(p)
            .map_err(Error::from)
            .at_load()
            .map_err(|e| with_path(e, p))
    };
    let (m, w) = (read(manifest)?, read(&weights)?);
    let model = load_model_bytes(&m, &w, LoadOptions::default()).at_load()?;
    Ok(LoadedModel {
        model,
        hash: model_hash(&m, &w),
        path: manifest.to_path_buf(),
    })
}

fn with_path(e: CliError, p: &Path) -> CliError {
    match e {
        CliError::Load(Error::Io(io)) => CliError::Load(Error::Io(std::io::Error::new(
            io.kind(),
            format!("{}: {io}", p.display()),
        ))),
        other => other,
    }
}

/// Writes `<dir>/<name>.json` and `<dir>/<name>.xwts`; returns the manifest path.
pub fn save_model(model: &Model, dir: &Path, name: &str) -> CliResult<PathBuf> {
    fs::create_dir_all(dir).map_err(Error::from).at_runtime()?;
    let (m, w) = model_to_bytes(model).at_runtime()?;
    let manifest = dir.join(format!("{name}.json"));
    fs::write(&manifest, m).map_err(Error::from).at_runtime()?;
    fs::write(default_weights_path(&manifest), w).map_err(Error::from).at_runtime()?;
    Ok(manifest)
}

fn is_png(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Reads a model input. PNG bytes map linearly from `[0, 255]` to the
/// model's input range (one channel takes the RGB mean); tensors are taken
/// verbatim and reshaped to the input shape when the sizes agree.
pub fn load_input(path: &Path, model: &Model) -> CliResult<Tensor> {
    let shape = model.input_shape();
    if is_png(path) {
        let img = read_image(path).at_load()?;
        let c = shape[shape.len() - 1];
        if shape.len() != 4 || (img.height(), img.width()) != (shape[1], shape[2]) || !(c == 1 || c == 3) {
            return Err(CliError::Load(Error::Shape(format!(
                "{}: {}x{} image does not fit model input {shape:?}",
                path.display(),
                img.height(),
                img.width()
            ))));
        }
        let (lo, hi) = model.input_range();
        let map = |v: f32| lo + (hi - lo) * v;
        let data = img
            .data()
            .chunks(3)
            .flat_map(|px| {
                if c == 3 {
                    vec![map(px[0]), map(px[1]), map(px[2])]
                } else {
                    vec![map((px[0] + px[1] + px[2]) / 3.0)]
                }
            })
            .collect();
        return Tensor::new(shape, data).at_load();
    }
    let bytes = fs::read(path).map_err(Error::from).at_load().map_err(|e| with_path(e, path))?;
    let t = decode_tensor(&bytes).at_load()?.into_f32();
    if t.shape() == shape {
        return Ok(t);
    }
    if t.len() == shape.iter().product::<usize>() {
        return t.into_reshaped(shape).at_load();
    }
    Err(CliError::Load(Error::Shape(format!(
        "{}: tensor {:?} does not fit model input {shape:?}",
        path.display(),
        t.shape()
    ))))
}

/// Reads any tensor file as `f32`.
pub fn load_tensor(path: &Path) -> CliResult<Tensor> {
    let bytes = fs::read(path).map_err(Error::from).at_load().map_err(|e| with_path(e, path))?;
    Ok(decode_tensor(&bytes).at_load()?.into_f32())
}

pub fn save_tensor(path: &Path, t: &Tensor) -> CliResult<()> {
    ensure_parent(path)?;
    write_tensor(path, t).at_runtime()
}

/// Writes a saliency tensor and its sidecar; returns the sidecar path.
pub fn save_saliency(path: &Path, s: &Saliency, model_hash: &str) -> CliResult<PathBuf> {
    ensure_parent(path)?;
    s.export(path, model_hash).at_runtime()
}

pub fn save_png(path: &Path, img: &RGBImage) -> CliResult<()> {
    ensure_parent(path)?;
    xplain_core::viz::write_png(img, path).at_runtime()
}

pub fn ensure_parent(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(Error::from).at_runtime(),
        _ => Ok(()),
    }
}

/// Comma-separated rows with a header, LF line endings.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
    ensure_parent(path)?;
    let mut out = Vec::new();
    let line = |out: &mut Vec<u8>, cells: &[&str]| writeln!(out, "{}", cells.join(","));
    line(&mut out, header).expect("writing to a Vec");
    for r in rows {
        let cells: Vec<&str> = r.iter().map(String::as_str).collect();
        line(&mut out, &cells).expect("writing to a Vec");
    }
    fs::write(path, out).map_err(Error::from).at_runtime()
}

/// `inf`, `-inf` and `nan` sentinels, otherwise the shortest round-trip form.
pub fn format_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use xplain_core::model::{make_reference_model, ReferenceKind};

    #[test]
    fn sentinels() {
        assert_eq!(format_f64(f64::INFINITY), "inf");
        assert_eq!(format_f64(f64::NAN), "nan");
        assert_eq!(format_f64(1.5), "1.5");
    }

    #[test]
    fn model_and_input_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = make_reference_model(ReferenceKind::Mlp, 4);
        let manifest = save_model(&model, dir.path(), "mlp").unwrap();
        let loaded = load_model(&manifest, None).unwrap();
        assert_eq!(loaded.hash.len(), 64);
        let x = Tensor::full(&[256], 0.25);
        let p = dir.path().join("x.xten");
        save_tensor(&p, &x).unwrap();
        assert_eq!(load_input(&p, &loaded.model).unwrap().shape(), model.input_shape());
        let missing = load_model(&dir.path().join("nope.json"), None).unwrap_err();
        assert!(matches!(missing, CliError::Load(_)));
    }

    #[test]
    fn png_maps_to_input_range() {
        let dir = tempfile::tempdir().unwrap();
        let model = make_reference_model(ReferenceKind::Linear, 0);
        let p = dir.path().join("white.png");
        save_png(&p, &RGBImage::filled(16, 16, [1.0; 3])).unwrap();
        let x = load_input(&p, &model).unwrap();
        assert!(x.data().iter().all(|&v| v == 1.0));
        save_png(&p, &RGBImage::filled(8, 8, [1.0; 3])).unwrap();
        assert!(matches!(load_input(&p, &model), Err(CliError::Load(_))));
    }

    #[test]
    fn csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        write_csv(&p, &["a", "b"], &[vec!["1".into(), "2".into()]]).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "a,b\n1,2\n");
    }
}
